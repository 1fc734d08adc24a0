import pytest
import torch

from semadv.schedule import build_linear_schedule
from semadv.unet import ToyUNet

SMALL_ARCH = dict(base_channels=8, bottleneck_channels=32, time_dim=32)


@pytest.fixture(scope="session")
def small_sched():
    return build_linear_schedule(60, 1e-3, 0.06)


@pytest.fixture(scope="session")
def small_model(small_sched):
    torch.manual_seed(1234)
    model = ToyUNet(**SMALL_ARCH, max_timestep=small_sched.T)
    model.eval()
    return model
