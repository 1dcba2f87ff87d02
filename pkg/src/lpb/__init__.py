"""Latent-barrier steering for diffusion behavior cloning.

A small 2D push environment, a from-scratch reverse-mode autodiff core, a
diffusion policy trained by behavior cloning, a latent dynamics model, a
nearest-neighbor familiarity score over expert latents, and inference-time
gradient steering that pulls denoised action plans back toward states the
expert data covers. The `harness` module runs paired evaluation campaigns;
`artifacts` gives every stage a checksummed binary container; `cli` wires
the stages into a pipeline.
"""

__version__ = "0.1.0"
