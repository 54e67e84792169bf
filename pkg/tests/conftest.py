import numpy as np
import pytest
import torch
from hypothesis import settings

from triadapt.camera import CameraConfig
from triadapt.config import RunConfig
from triadapt.generator import GeneratorConfig, TriPlaneGenerator

# timing varies a lot on a shared CPU; deadlines only add flakiness
settings.register_profile("repo", deadline=None)
settings.load_profile("repo")


def tiny_generator_config(**kw) -> GeneratorConfig:
    base = dict(z_dim=8, zd_dim=4, w_dim=8, block_channels=(8, 6), base_res=4, plane_channels=4,
                decoder_hidden=8, deform_hidden=8)
    base.update(kw)
    return GeneratorConfig(**base)


def tiny_generator(seed=0, dtype=torch.float64, resolution=8, n_samples=6, with_deformation=True):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        G = TriPlaneGenerator(tiny_generator_config(), CameraConfig(), resolution, n_samples,
                              with_deformation=with_deformation)
    return G.to(dtype)


def small_run_config(**overrides) -> RunConfig:
    """16x16, narrow networks: a few iterations of adaptation run in about a second."""
    base = {
        "model.resolution": 16, "model.n_samples": 6, "model.decoder_hidden": 16,
        "model.block_channels": (16, 16), "model.base_res": 8, "model.plane_channels": 8,
        "model.z_dim": 16, "model.w_dim": 16, "model.zd_dim": 8,
        "model.disc_channels": (16, 16), "model.pose_channels": (8, 16),
        "camera.near": 1.75, "camera.far": 3.65, "train.batch_size": 4, "train.checkpoint_every": 5,
        "data.source_n": 16, "data.target_n": 16, "data.heldout_n": 8,
    }
    base.update(overrides)
    return RunConfig().with_overrides(base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 10


def record_criterion(config, number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    config.stash.setdefault(ACCEPTANCE, {})[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, None)
    if results is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(results.get(n, f"criterion {n:2d}: FAIL  (not run or errored)"))
