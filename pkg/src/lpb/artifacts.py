"""Single self-describing container for every persisted object.

File layout (all integers little-endian):

    offset 0   magic, 4 ASCII bytes "LPBF"
    offset 4   format version, u16
    offset 6   kind tag, u8
    offset 7   metadata byte length, u32
    offset 11  metadata, UTF-8 JSON (canonical: sorted keys, no spaces)
    ...        payload block count, u32
    ...        per block: element count u64, then that many f32 values
    tail       8-byte BLAKE2b digest over every preceding byte

The JSON metadata carries shapes, hyperparameters, and provenance; numeric
payloads are raw float32 so round trips are bit-exact. Anything float64 by
construction (the noise schedule, derived statistics) is either rebuilt from
integers on load or carried in the JSON, where Python's float repr round-trips
exactly. Saved reports carry wall_clock_s = 0 so identical campaigns produce
identical bytes. Writes go to a temp file in the target directory followed by
an atomic rename.
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from hashlib import blake2b

import numpy as np

from . import barrier as barmod
from . import data as datamod
from . import dynamics as dynmod
from . import harness as harmod
from . import nn
from . import policy as polmod
from .autodiff import Tensor
from .errors import ContractError

MAGIC = b"LPBF"
VERSION = 1

DATASET = "DATASET"
POLICY = "POLICY"
DYNAMICS = "DYNAMICS"
INDEX = "INDEX"
REPORT = "REPORT"
KINDS = (DATASET, POLICY, DYNAMICS, INDEX, REPORT)
_KIND_BYTE = {k: i + 1 for i, k in enumerate(KINDS)}
_BYTE_KIND = {v: k for k, v in _KIND_BYTE.items()}

_CHECKSUM_BYTES = 8


class ArtifactError(Exception):
    """Base for malformed artifact files; ``offset`` is the byte position
    at which the problem was detected."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MagicError(ArtifactError):
    """Leading bytes are not the LPBF magic."""


class VersionError(ArtifactError):
    """Format version unsupported by this reader."""


class KindError(ArtifactError):
    """Kind byte unknown, or the file holds a different kind than asked."""


class ShapeMismatchError(ArtifactError):
    """Metadata shape declarations disagree with the payload blocks."""


class TruncationError(ArtifactError):
    """File ends before its declared contents; message names expected
    versus actual byte counts."""


class ChecksumError(ArtifactError):
    """Stored digest does not match the file body."""


def _canon_json(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _assemble(kind: str, meta: dict, blocks: list[np.ndarray]) -> bytes:
    mb = _canon_json(meta)
    parts = [MAGIC, struct.pack("<HBI", VERSION, _KIND_BYTE[kind], len(mb)), mb,
             struct.pack("<I", len(blocks))]
    for arr in blocks:
        flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
        parts.append(struct.pack("<Q", flat.size))
        parts.append(flat.tobytes())
    body = b"".join(parts)
    return body + blake2b(body, digest_size=_CHECKSUM_BYTES).digest()


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".lpbf-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncationError(
                f"truncated {what}: expected {self.pos + n} bytes, file has {len(self.data)}",
                offset=len(self.data))
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def _parse(data: bytes) -> tuple[str, dict, list[np.ndarray]]:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise MagicError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version, kind_byte, meta_len = struct.unpack("<HBI", r.take(7, "header"))
    if version != VERSION:
        raise VersionError(f"format version {version}, reader supports {VERSION}", offset=4)
    if kind_byte not in _BYTE_KIND:
        raise KindError(f"unknown kind byte {kind_byte}", offset=6)
    meta_bytes = r.take(meta_len, "metadata")
    n_blocks, = struct.unpack("<I", r.take(4, "block count"))
    blocks: list[np.ndarray] = []
    for bi in range(n_blocks):
        count, = struct.unpack("<Q", r.take(8, f"block {bi} length"))
        raw = r.take(count * 4, f"block {bi} data")
        blocks.append(np.frombuffer(raw, dtype="<f4").copy())
    digest = r.take(_CHECKSUM_BYTES, "checksum")
    if r.pos != len(data):
        raise TruncationError(
            f"trailing bytes: file has {len(data)}, format ends at {r.pos}", offset=r.pos)
    body = data[:-_CHECKSUM_BYTES]
    if blake2b(body, digest_size=_CHECKSUM_BYTES).digest() != digest:
        raise ChecksumError("stored digest does not match file body",
                            offset=len(data) - _CHECKSUM_BYTES)
    try:
        meta = json.loads(meta_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ShapeMismatchError(f"unreadable metadata: {exc}", offset=11) from None
    return _BYTE_KIND[kind_byte], meta, blocks


def checksum_of(path: str) -> str:
    """Hex digest stored in an artifact's tail."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _CHECKSUM_BYTES:
        raise TruncationError(f"file too short for a checksum: {len(data)} bytes", offset=len(data))
    return data[-_CHECKSUM_BYTES:].hex()


def peek(path: str) -> tuple[str, dict]:
    """(kind, metadata) without decoding the payload object."""
    with open(path, "rb") as fh:
        kind, meta, _ = _parse(fh.read())
    return kind, meta


# ---------------------------------------------------------------------------
# per-kind encoders

def _mlp_meta(net: nn.Mlp) -> dict:
    return {"widths": list(net.widths), "activation": net.activation}


def _mlp_blocks(net: nn.Mlp) -> list[np.ndarray]:
    out = []
    for w, b in zip(net.weights, net.biases):
        out.append(w.data)
        out.append(b.data)
    return out


def _mlp_from(meta: dict, blocks: list[np.ndarray], offset: int, where: str) -> tuple[nn.Mlp, int]:
    widths = [int(w) for w in meta["widths"]]
    net = nn.mlp_init(widths, activation=meta["activation"])
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        w = _take_block(blocks, offset + 2 * i, (fan_in, fan_out), f"{where} layer {i} weights")
        b = _take_block(blocks, offset + 2 * i + 1, (fan_out,), f"{where} layer {i} biases")
        net.weights[i] = Tensor(w)
        net.biases[i] = Tensor(b)
    return net, offset + 2 * (len(widths) - 1)


def _take_block(blocks: list[np.ndarray], i: int, shape: tuple[int, ...], what: str) -> np.ndarray:
    if i >= len(blocks):
        raise ShapeMismatchError(f"missing payload block for {what}: need index {i}, have {len(blocks)}", offset=11)
    want = int(np.prod(shape))
    if blocks[i].size != want:
        raise ShapeMismatchError(
            f"{what}: declared shape {shape} needs {want} values, block {i} holds {blocks[i].size}",
            offset=11)
    return blocks[i].reshape(shape)


def _encode_dataset(ds: datamod.CuratedDataset) -> tuple[dict, list[np.ndarray]]:
    meta = {"source": ds.source, "trajectories": [], "provenance": []}
    blocks: list[np.ndarray] = []
    for t in ds.trajectories:
        meta["trajectories"].append({
            "len": int(t.length), "obs_dim": int(t.obs.shape[1]),
            "success": bool(t.success), "seed": int(t.seed),
            "init_mode": t.init_mode, "obs_mode": t.obs_mode})
        blocks.append(t.obs)
        blocks.append(t.actions)
    for p in ds.provenance:
        meta["provenance"].append({
            "origin": p.origin, "seed": int(p.seed), "success": bool(p.success),
            "checkpoint_epoch": int(p.checkpoint_epoch), "demo_id": int(p.demo_id)})
    return meta, blocks


def _decode_dataset(meta: dict, blocks: list[np.ndarray]) -> datamod.CuratedDataset:
    trajs = []
    for i, tm in enumerate(meta["trajectories"]):
        n, odim = int(tm["len"]), int(tm["obs_dim"])
        obs = _take_block(blocks, 2 * i, (n + 1, odim), f"trajectory {i} observations")
        acts = _take_block(blocks, 2 * i + 1, (n, 2), f"trajectory {i} actions")
        trajs.append(datamod.Trajectory(
            obs=obs, actions=acts, success=bool(tm["success"]), seed=int(tm["seed"]),
            init_mode=tm["init_mode"], obs_mode=tm["obs_mode"]))
    prov = [datamod.Provenance(
        origin=pm["origin"], seed=int(pm["seed"]), success=bool(pm["success"]),
        checkpoint_epoch=int(pm["checkpoint_epoch"]), demo_id=int(pm["demo_id"]))
        for pm in meta["provenance"]]
    return datamod.CuratedDataset(trajectories=trajs, source=meta["source"], provenance=prov)


def _encode_policy(p: polmod.DiffusionPolicy) -> tuple[dict, list[np.ndarray]]:
    meta = {
        "obs_mode": p.obs_mode, "t_o": p.t_o, "t_p": p.t_p, "t_a": p.t_a,
        "obs_dim": p.obs_dim, "latent_dim": p.latent_dim, "K": p.schedule.K,
        "encoder": _mlp_meta(p.encoder), "noise_net": _mlp_meta(p.noise_net)}
    return meta, _mlp_blocks(p.encoder) + _mlp_blocks(p.noise_net)


def _decode_policy(meta: dict, blocks: list[np.ndarray]) -> polmod.DiffusionPolicy:
    encoder, off = _mlp_from(meta["encoder"], blocks, 0, "encoder")
    noise_net, off = _mlp_from(meta["noise_net"], blocks, off, "noise net")
    _expect_block_count(blocks, off)
    return polmod.DiffusionPolicy(
        encoder=encoder, noise_net=noise_net,
        schedule=polmod.cosine_schedule(int(meta["K"])),
        t_o=int(meta["t_o"]), t_p=int(meta["t_p"]), t_a=int(meta["t_a"]),
        obs_mode=meta["obs_mode"], obs_dim=int(meta["obs_dim"]),
        latent_dim=int(meta["latent_dim"]))


def _encode_dynamics(m: dynmod.DynamicsModel) -> tuple[dict, list[np.ndarray]]:
    meta = {
        "t_o": m.t_o, "t_p": m.t_p, "obs_dim": m.obs_dim, "latent_dim": m.latent_dim,
        "encoder_checksum": m.encoder_checksum,
        "encoder": _mlp_meta(m.encoder), "predictor": _mlp_meta(m.predictor)}
    return meta, _mlp_blocks(m.encoder) + _mlp_blocks(m.predictor)


def _decode_dynamics(meta: dict, blocks: list[np.ndarray]) -> dynmod.DynamicsModel:
    encoder, off = _mlp_from(meta["encoder"], blocks, 0, "encoder")
    predictor, off = _mlp_from(meta["predictor"], blocks, off, "predictor")
    _expect_block_count(blocks, off)
    return dynmod.DynamicsModel(
        encoder=encoder, predictor=predictor, t_o=int(meta["t_o"]), t_p=int(meta["t_p"]),
        obs_dim=int(meta["obs_dim"]), latent_dim=int(meta["latent_dim"]),
        encoder_checksum=meta["encoder_checksum"])


def _encode_index(ix: barmod.ExpertLatentIndex) -> tuple[dict, list[np.ndarray]]:
    # Latent coordinates are float32 at the encoder's output; the index holds
    # them widened to float64 for exact distance math, so narrowing here is
    # lossless for every index the pipeline itself builds.
    meta = {"backend": ix.backend, "count": int(ix.size), "dim": int(ix.dim)}
    return meta, [ix.points.astype(np.float32)]


def _decode_index(meta: dict, blocks: list[np.ndarray]) -> barmod.ExpertLatentIndex:
    pts = _take_block(blocks, 0, (int(meta["count"]), int(meta["dim"])), "index points")
    _expect_block_count(blocks, 1)
    return barmod.build_index(pts, meta["backend"])


def _encode_report(r: harmod.SuccessReport) -> tuple[dict, list[np.ndarray]]:
    meta = {
        "method": r.method, "init_mode": r.init_mode, "episodes": r.episodes,
        "seed_base": r.seed_base, "perturb_p": r.perturb_p, "perturb_sigma": r.perturb_sigma,
        "checkpoint_epochs": [int(e) for e in r.checkpoint_epochs],
        "rates": [float(x) for x in r.rates], "mean": r.mean, "std": r.std,
        "seeds": [int(s) for s in r.seeds],
        "wall_clock_s": 0.0}
    return meta, [r.outcomes]


def _decode_report(meta: dict, blocks: list[np.ndarray]) -> harmod.SuccessReport:
    epochs = [int(e) for e in meta["checkpoint_epochs"]]
    outcomes = _take_block(blocks, 0, (len(epochs), int(meta["episodes"])), "outcome table")
    _expect_block_count(blocks, 1)
    return harmod.SuccessReport(
        method=meta["method"], init_mode=meta["init_mode"], episodes=int(meta["episodes"]),
        seed_base=int(meta["seed_base"]), perturb_p=float(meta["perturb_p"]),
        perturb_sigma=float(meta["perturb_sigma"]), checkpoint_epochs=epochs,
        rates=[float(x) for x in meta["rates"]], mean=float(meta["mean"]),
        std=float(meta["std"]), outcomes=outcomes,
        seeds=np.asarray(meta["seeds"], dtype=np.int64),
        wall_clock_s=float(meta["wall_clock_s"]))


def _expect_block_count(blocks: list[np.ndarray], used: int) -> None:
    if len(blocks) != used:
        raise ShapeMismatchError(
            f"payload holds {len(blocks)} blocks, metadata accounts for {used}", offset=11)


_ENCODERS = {
    DATASET: (_encode_dataset, _decode_dataset, datamod.CuratedDataset),
    POLICY: (_encode_policy, _decode_policy, polmod.DiffusionPolicy),
    DYNAMICS: (_encode_dynamics, _decode_dynamics, dynmod.DynamicsModel),
    INDEX: (_encode_index, _decode_index, barmod.ExpertLatentIndex),
    REPORT: (_encode_report, _decode_report, harmod.SuccessReport),
}


def kind_of(x) -> str:
    """Artifact kind for a known object type."""
    for kind, (_, _, cls) in _ENCODERS.items():
        if isinstance(x, cls):
            return kind
    raise ContractError(f"no artifact kind for object of type {type(x).__name__}")


def save_artifact(x, kind: str, path: str, extra_meta: dict | None = None) -> str:
    """Serialize ``x`` under the given kind and return the hex checksum.
    ``extra_meta`` lands under a "provenance" metadata key (resolved config,
    creation seed) without affecting the payload."""
    if kind not in _ENCODERS:
        raise ContractError(f"unknown artifact kind {kind!r}; expected one of {KINDS}")
    if not isinstance(x, _ENCODERS[kind][2]):
        raise ContractError(f"kind {kind} expects {_ENCODERS[kind][2].__name__}, got {type(x).__name__}")
    meta, blocks = _ENCODERS[kind][0](x)
    if extra_meta:
        meta["provenance_info"] = extra_meta
    data = _assemble(kind, meta, blocks)
    _atomic_write(path, data)
    return data[-_CHECKSUM_BYTES:].hex()


def load_artifact(path: str, expect_kind: str | None = None):
    """Decode an artifact file back into its object. ``expect_kind`` turns a
    kind disagreement into a KindError instead of returning the wrong type."""
    with open(path, "rb") as fh:
        data = fh.read()
    kind, meta, blocks = _parse(data)
    if expect_kind is not None and kind != expect_kind:
        raise KindError(f"file holds {kind}, expected {expect_kind}", offset=6)
    return _ENCODERS[kind][1](meta, blocks)
