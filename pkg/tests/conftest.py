"""Session fixtures for the desk-scale acceptance runs.

Completed runs are cached under tests/_runs (override with BITLATENT_RUNS).
A cached run is reused only when its resolved-config snapshot matches the
expected configuration; otherwise it is retrained through the CLI. Delete
tests/_runs to force full retraining.
"""

import os
import subprocess
import sys
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parent.parent
RUNS = Path(os.environ.get("BITLATENT_RUNS", Path(__file__).parent / "_runs"))


def digits_idx_files():
    out = RUNS / "data"
    images, labels = out / "digits-images.idx3", out / "digits-labels.idx1"
    if not (images.exists() and labels.exists()):
        out.mkdir(parents=True, exist_ok=True)
        subprocess.run(
            [sys.executable, str(REPO / "scripts" / "make_digits_idx.py"), "--out", str(out)],
            check=True, cwd=REPO,
        )
    return images, labels


def run_recipe(name: str):
    """(command, config path, overrides, out dir) for one acceptance run."""
    out = RUNS / name
    if name == "stage1":
        return "train-tokenizer", REPO / "configs" / "tokenizer_stage1.toml", [], out
    if name == "stage2":
        prior = RUNS / "stage1" / "checkpoints" / "final.ckpt"
        return ("train-tokenizer", REPO / "configs" / "tokenizer_stage2.toml",
                [f"train.init_from={prior}"], out)
    if name in ("diffusion", "ar"):
        images, labels = digits_idx_files()
        return (f"train-{name}", REPO / "configs" / f"{name}_digits.toml",
                [f"data.images={images}", f"data.labels={labels}"], out)
    raise KeyError(name)


def ensure_run(name: str) -> Path:
    from bitlatent.cli import main
    from bitlatent.config import load_config

    command, config_path, overrides, out = run_recipe(name)
    expected = load_config(config_path, overrides)
    ckpt = out / "checkpoints" / "final.ckpt"
    snapshot = out / "config.toml"
    if ckpt.exists() and snapshot.exists():
        try:
            if load_config(snapshot) == expected:
                return out
        except Exception:
            pass
    args = [command, "--config", str(config_path), "--out", str(out)]
    for item in overrides:
        args += ["--override", item]
    rc = main(args)
    assert rc == 0, f"acceptance run {name!r} failed with exit code {rc}"
    return out


@pytest.fixture(scope="session")
def stage1_run():
    return ensure_run("stage1")


@pytest.fixture(scope="session")
def stage2_run(stage1_run):
    return ensure_run("stage2")


@pytest.fixture(scope="session")
def diffusion_run():
    return ensure_run("diffusion")


@pytest.fixture(scope="session")
def ar_run():
    return ensure_run("ar")
