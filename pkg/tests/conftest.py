import numpy as np
import pytest
import torch

from sud2.denoisers import linear_schedule
from sud2.models import UNetConfig, build_diffusion_net, build_mlp_denoiser
from sud2.tasks import make_toy_dataset
from sud2.trainer import pretrain_ddpm, pretrain_denoiser
from sud2.verify import standard_mixtures
from sud2 import distributions as dist


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def faces16():
    return make_toy_dataset("inpaint", "faces", counts=(5, 600, 40), seed=3, size=16, n_heldout=24)


@pytest.fixture(scope="session")
def tiny_ddpm(faces16):
    """Small diffusion net on 16x16 toy faces (about half a minute on one CPU)."""
    schedule = linear_schedule(50)
    net = build_diffusion_net(UNetConfig(base_width=16, depth=2, use_attention=True), len(schedule), seed=0)
    net, report = pretrain_ddpm(faces16.unpaired_clean, net, schedule, epochs=25, seed=0, batch_size=16)
    return net, schedule, report


@pytest.fixture(scope="session")
def gmm2d_denoiser():
    """MLP denoiser trained at one noise level on samples of the 2-D mixture."""
    gmm = standard_mixtures()["2d_three"]
    sigma = 0.5
    x = dist.sample(gmm, 20000, seed=0).astype(np.float32)
    net = build_mlp_denoiser(2, hidden=128, layers=3, seed=0)
    net, _ = pretrain_denoiser(x, net, sigma_range=(sigma, sigma), epochs=15, seed=0, batch_size=128, lr=2e-3)
    return net, gmm, sigma
