"""Shared fixtures.

Two pipeline scales are available to tests:

* ``smoke_run``: the fast preset, rebuilt per session in a temp directory.
* ``full_run``: the default (pointpush) pipeline, cached under /tmp keyed by
  a hash of the package sources so repeated test sessions reuse the trained
  artifacts instead of retraining for half an hour.
"""
from __future__ import annotations

import hashlib
import os

import numpy as np
import pytest

from lpb import artifacts as art
from lpb import cli

SRC_DIR = os.path.join(os.path.dirname(__file__), "..", "src", "lpb")
CACHE_ROOT = "/tmp/lpb_test_cache"

PIPELINE = ("gen-demos", "train-policy", "collect-rollouts", "curate",
            "train-dynamics", "calibrate-tau")


def _source_hash() -> str:
    h = hashlib.blake2b(digest_size=8)
    for name in sorted(os.listdir(SRC_DIR)):
        if name.endswith(".py"):
            with open(os.path.join(SRC_DIR, name), "rb") as fh:
                h.update(name.encode())
                h.update(fh.read())
    return h.hexdigest()


def _run_pipeline(out_dir: str, preset_args: list[str]) -> None:
    for command in PIPELINE:
        rc = cli.main([command, *preset_args, "--out", out_dir])
        assert rc == 0, f"{command} failed in {out_dir}"


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory) -> str:
    out = str(tmp_path_factory.mktemp("smoke"))
    _run_pipeline(out, ["--preset", "smoke"])
    return out


@pytest.fixture(scope="session")
def full_run() -> str:
    out = os.path.join(CACHE_ROOT, _source_hash())
    marker = os.path.join(out, "COMPLETE")
    if not os.path.exists(marker):
        os.makedirs(out, exist_ok=True)
        _run_pipeline(out, [])
        with open(marker, "w", encoding="utf-8") as fh:
            fh.write("ok\n")
    return out


def load(run_dir: str, stem: str):
    return art.load_artifact(os.path.join(run_dir, stem + ".lpbf"))


@pytest.fixture(scope="session")
def smoke_policy(smoke_run):
    return load(smoke_run, "policy")


@pytest.fixture(scope="session")
def smoke_dynamics(smoke_run):
    return load(smoke_run, "dynamics")


@pytest.fixture(scope="session")
def smoke_index(smoke_run):
    return load(smoke_run, "index")


@pytest.fixture(scope="session")
def smoke_demos(smoke_run):
    return load(smoke_run, "demos")


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
