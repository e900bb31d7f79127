"""Shared fixtures for the acceptance suite.

The expensive artifacts (the full synthetic dataset and the pretrained
reconstruction models) are built once per session through the CLI and shared
by every acceptance criterion that needs them.
"""

import os
import sys
import time

import numpy as np
import pytest

from thermofuse import cli

#: acceptance-suite experiment configuration. Differences from the library
#: defaults: slimmer encoder channels (the CI-speed analogue of the
#: "ROI 16 for tests" convention) and a KLD weight sized for the scale gap
#: between the per-voxel-mean MSE and the per-dimension-summed KLD.
ACCEPT_CONFIG = {
    "seed": "42",
    "channels": "1,4,8,16",
    "pretrain_epochs": "20",
    "predictor_epochs": "60",
    "w2": "1e-6",
}


def write_config(path: str, overrides: dict | None = None) -> str:
    cfg = dict(ACCEPT_CONFIG)
    cfg.update(overrides or {})
    with open(path, "w", encoding="utf-8") as f:
        for key, value in cfg.items():
            f.write(f"{key} = {value}\n")
    return path


def run_cli(args: list[str]) -> int:
    return cli.main(args)


class Workspace:
    """Paths and timing for one CLI experiment directory."""

    def __init__(self, root: str, config_path: str):
        self.root = root
        self.config_path = config_path
        self.pretrain_seconds: float | None = None

    @property
    def dataset_dir(self) -> str:
        return os.path.join(self.root, "dataset")

    @property
    def models_dir(self) -> str:
        return os.path.join(self.root, "models")

    def cmd(self, command: str, *extra: str) -> int:
        return run_cli([command, "--config", self.config_path,
                        "--out", self.root, *extra])


@pytest.fixture(scope="session")
def big_workspace(tmp_path_factory) -> Workspace:
    """Full-size dataset (38 builds, 1140 parts, build-held-out split) built
    through the CLI; shared by criteria 4, 5, 6, 8 and 10."""
    root = tmp_path_factory.mktemp("accept")
    ws = Workspace(str(root / "ws"), write_config(str(root / "accept.cfg")))
    assert ws.cmd("synth") == 0
    assert ws.cmd("preprocess") == 0
    return ws


@pytest.fixture(scope="session")
def pretrained(big_workspace: Workspace) -> Workspace:
    """AE + VAE3D pretrained on the big dataset; wall time recorded for the
    criterion-4 budget check."""
    start = time.monotonic()
    assert big_workspace.cmd("pretrain") == 0
    big_workspace.pretrain_seconds = time.monotonic() - start
    return big_workspace


@pytest.fixture(scope="session")
def big_dataset(big_workspace: Workspace) -> cli.LoadedDataset:
    return cli.LoadedDataset(big_workspace.dataset_dir)


def criterion(n: int, description: str, passed: bool) -> None:
    """One-line verdict per acceptance criterion. Written to the real stdout
    so the line is visible even when pytest captures test output."""
    verdict = "PASS" if passed else "FAIL"
    line = f"[criterion {n}] {verdict}: {description}"
    print(line)
    if sys.stdout is not sys.__stdout__:  # pytest capture active
        print(f"\n{line}", file=sys.__stdout__, flush=True)
    assert passed, f"criterion {n} failed: {description}"
