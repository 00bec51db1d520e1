import numpy as np
import pytest
import torch

# Bit-reproducibility of training/sampling is only guaranteed single-threaded.
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def sim_corpus(tmp_path_factory):
    """A small shared turbulence trajectory reused across slow tests.

    220 snapshots at 64^2 with a snapshot spacing calibrated so that
    consecutive frames correlate around 0.97 (forecasting is nontrivial but
    learnable) and the forecast/SR residual scales are comparable.
    """
    from flexdiff.simulator import SimConfig, run
    from flexdiff.dataio import read_dataset

    path = tmp_path_factory.mktemp("corpus") / "traj.flexds"
    cfg = SimConfig(n=64, viscosity=2e-4, dt=2e-3, steps=219 * 10,
                    init_seed=11, k_peak=6, save_stride=10, burn_in=400)
    run(cfg, path)
    snaps, header = read_dataset(path)
    return {"path": path, "snapshots": snaps, "header": header, "config": cfg}


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
