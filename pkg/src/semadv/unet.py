"""Toy noise-prediction UNet with an exposed, injectable bottleneck.

The network is deliberately small (a few hundred thousand parameters) so the
whole pipeline trains on a single CPU core. The deepest feature map sits at
1/8 of the input resolution; `encode` returns it together with the skip
activations so a caller can decode several injected variants of the same
bottleneck while paying for exactly one encoder pass.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from semadv.schedule import NoiseSchedule

CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10_000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / (half - 1)
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, channels: int, temb_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(temb_dim, channels)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, temb):
        out = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        out = out + self.time_proj(torch.nn.functional.silu(temb))[:, :, None, None]
        out = self.conv2(torch.nn.functional.silu(self.norm2(out)))
        return x + out


class Downsample(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)

    def forward(self, x):
        return self.conv(torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


@dataclass
class EncoderState:
    """Everything the decoder needs besides the (possibly injected) bottleneck."""

    h: torch.Tensor
    skips: tuple
    temb: torch.Tensor


class ToyUNet(nn.Module):
    """Noise predictor eps_theta(x_t, t) with bottleneck exposure.

    `encode` runs the downsampling path once and returns the bottleneck h plus
    skip activations; `decode` runs only the upsampling path, so additive
    bottleneck injections never re-trigger the encoder. The instance counts
    encoder invocations in `encoder_calls` for instrumentation.
    """

    def __init__(
        self,
        in_channels: int = 1,
        image_size: int = 32,
        base_channels: int = 16,
        bottleneck_channels: int = 64,
        time_dim: int = 64,
        max_timestep: int = 1000,
    ):
        super().__init__()
        if image_size % 8 != 0:
            raise ValueError("image_size must be divisible by 8 (bottleneck sits at 1/8 resolution)")
        c1, c2, c3 = base_channels, base_channels * 2, base_channels * 3
        cb = bottleneck_channels
        self.arch = {
            "in_channels": in_channels,
            "image_size": image_size,
            "base_channels": base_channels,
            "bottleneck_channels": bottleneck_channels,
            "time_dim": time_dim,
            "max_timestep": max_timestep,
        }
        self.in_channels = in_channels
        self.image_size = image_size
        self.max_timestep = max_timestep
        self.bottleneck_shape = (cb, image_size // 8, image_size // 8)
        self.encoder_calls = 0

        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.time_dim = time_dim

        self.stem = nn.Conv2d(in_channels, c1, 3, padding=1)
        self.enc1 = ResBlock(c1, time_dim)
        self.down1 = Downsample(c1, c2)
        self.enc2 = ResBlock(c2, time_dim)
        self.down2 = Downsample(c2, c3)
        self.enc3 = ResBlock(c3, time_dim)
        self.down3 = Downsample(c3, cb)
        self.mid = ResBlock(cb, time_dim)

        self.up3 = Upsample(cb, c3)
        self.dec3_reduce = nn.Conv2d(2 * c3, c3, 1)
        self.dec3 = ResBlock(c3, time_dim)
        self.up2 = Upsample(c3, c2)
        self.dec2_reduce = nn.Conv2d(2 * c2, c2, 1)
        self.dec2 = ResBlock(c2, time_dim)
        self.up1 = Upsample(c2, c1)
        self.dec1_reduce = nn.Conv2d(2 * c1, c1, 1)
        self.dec1 = ResBlock(c1, time_dim)
        self.out_norm = nn.GroupNorm(8, c1)
        self.out_conv = nn.Conv2d(c1, in_channels, 3, padding=1)

    def _check_input(self, x: torch.Tensor, t) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2] != self.image_size or x.shape[3] != self.image_size:
            raise ValueError(f"expected input (B,{self.in_channels},{self.image_size},{self.image_size}), got {tuple(x.shape)}")
        dtype = self.stem.weight.dtype
        if isinstance(t, int):
            t = torch.full((x.shape[0],), t, dtype=dtype, device=x.device)
        else:
            t = torch.as_tensor(t, dtype=dtype, device=x.device)
            if t.ndim == 0:
                t = t.repeat(x.shape[0])
        if t.shape[0] != x.shape[0]:
            raise ValueError("timestep batch does not match input batch")
        if bool((t < 1).any()) or bool((t > self.max_timestep).any()):
            raise ValueError(f"timesteps must lie in [1, {self.max_timestep}]")
        return t

    def encode(self, x: torch.Tensor, t) -> EncoderState:
        t = self._check_input(x, t)
        self.encoder_calls += 1
        temb = self.time_mlp(sinusoidal_embedding(t, self.time_dim))
        s0 = self.stem(x)
        s1 = self.enc1(s0, temb)
        s2 = self.enc2(self.down1(s1), temb)
        s3 = self.enc3(self.down2(s2), temb)
        h = self.mid(self.down3(s3), temb)
        return EncoderState(h=h, skips=(s1, s2, s3), temb=temb)

    def decode(self, state: EncoderState, h: torch.Tensor) -> torch.Tensor:
        s1, s2, s3 = state.skips
        temb = state.temb
        x = self.up3(h)
        x = self.dec3(self.dec3_reduce(torch.cat([x, s3], dim=1)), temb)
        x = self.up2(x)
        x = self.dec2(self.dec2_reduce(torch.cat([x, s2], dim=1)), temb)
        x = self.up1(x)
        x = self.dec1(self.dec1_reduce(torch.cat([x, s1], dim=1)), temb)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(x)))

    def forward(self, x, t):
        state = self.encode(x, t)
        return self.decode(state, state.h)

    def predict(self, x: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor]:
        """Noise estimate plus the pre-injection bottleneck activation."""
        state = self.encode(x, t)
        return self.decode(state, state.h), state.h

    def predict_with_injection(self, x: torch.Tensor, t, delta_h: torch.Tensor) -> torch.Tensor:
        """Noise estimate with delta_h added to the bottleneck, one encoder pass."""
        state = self.encode(x, t)
        if tuple(delta_h.shape[-3:]) != self.bottleneck_shape:
            raise ValueError(f"delta_h shape {tuple(delta_h.shape)} does not end in {self.bottleneck_shape}")
        return self.decode(state, state.h + delta_h)


def predict(model: ToyUNet, x_t: torch.Tensor, t):
    return model.predict(x_t, t)


def predict_with_injection(model: ToyUNet, x_t: torch.Tensor, t, delta_h: torch.Tensor):
    return model.predict_with_injection(x_t, t, delta_h)


def state_dict_digest(module: nn.Module) -> str:
    """SHA-256 over the module's parameters/buffers, for frozen-world checks."""
    hasher = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        hasher.update(name.encode())
        hasher.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return hasher.hexdigest()


def _batched_forward_diffuse(x0, t_batch, noise, sqrt_ab, sqrt_1m_ab):
    # per-sample t: gather the per-timestep coefficients (tables are 1-based at index t-1)
    a = sqrt_ab[t_batch - 1][:, None, None, None]
    b = sqrt_1m_ab[t_batch - 1][:, None, None, None]
    return a * x0 + b * noise


def noise_prediction_mse(model: ToyUNet, images: torch.Tensor, schedule: NoiseSchedule, seed: int = 0) -> float:
    """Deterministic held-out noise-regression MSE (fixed t and noise draws)."""
    gen = torch.Generator().manual_seed(seed)
    t_batch = torch.randint(1, schedule.T + 1, (images.shape[0],), generator=gen)
    noise = torch.randn(images.shape, generator=gen, dtype=images.dtype)
    sqrt_ab = torch.from_numpy(np.sqrt(schedule.alpha_bars)).to(images.dtype)
    sqrt_1m_ab = torch.from_numpy(np.sqrt(1.0 - schedule.alpha_bars)).to(images.dtype)
    x_t = _batched_forward_diffuse(images, t_batch, noise, sqrt_ab, sqrt_1m_ab)
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, images.shape[0], 256):
            sl = slice(start, start + 256)
            eps_hat = model(x_t[sl], t_batch[sl])
            total += float(((eps_hat - noise[sl]) ** 2).sum())
            count += noise[sl].numel()
    return total / count


def train_denoiser(
    dataset,
    schedule: NoiseSchedule,
    epochs: int,
    seed: int,
    batch_size: int = 128,
    lr: float = 2e-3,
    val_fraction: float = 0.1,
    arch: dict | None = None,
) -> ToyUNet:
    """Noise-regression training of a fresh ToyUNet on [-1,1] images.

    Optimizes ||eps - eps_theta(x_t, t)||^2 with uniformly drawn t. Fully
    reproducible under a fixed seed; epochs=0 returns the initialized model.
    """
    images = torch.as_tensor(np.asarray(dataset), dtype=torch.float32)
    if images.ndim != 4:
        raise ValueError("dataset must be (N, C, H, W)")
    if float(images.min()) < -1.0001 or float(images.max()) > 1.0001:
        raise ValueError("dataset must be normalized to [-1, 1]")

    torch.manual_seed(seed)
    arch = dict(arch or {})
    arch.setdefault("in_channels", images.shape[1])
    arch.setdefault("image_size", images.shape[2])
    arch["max_timestep"] = schedule.T
    model = ToyUNet(**arch)
    if epochs == 0:
        return model

    gen = torch.Generator().manual_seed(seed + 1)
    n_val = max(1, int(round(val_fraction * images.shape[0])))
    perm = torch.randperm(images.shape[0], generator=gen)
    train_images = images[perm[n_val:]]

    sqrt_ab = torch.from_numpy(np.sqrt(schedule.alpha_bars)).float()
    sqrt_1m_ab = torch.from_numpy(np.sqrt(1.0 - schedule.alpha_bars)).float()
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)

    for _epoch in range(epochs):
        order = torch.randperm(train_images.shape[0], generator=gen)
        for start in range(0, order.shape[0], batch_size):
            batch = train_images[order[start : start + batch_size]]
            t_batch = torch.randint(1, schedule.T + 1, (batch.shape[0],), generator=gen)
            noise = torch.randn(batch.shape, generator=gen)
            x_t = _batched_forward_diffuse(batch, t_batch, noise, sqrt_ab, sqrt_1m_ab)
            eps_hat = model(x_t, t_batch)
            loss = torch.mean((eps_hat - noise) ** 2)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {_epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    model.eval()
    return model


def save_checkpoint(path, model: ToyUNet, schedule: NoiseSchedule, seed: int | None = None, extra: dict | None = None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "denoiser",
        "arch": model.arch,
        "state_dict": model.state_dict(),
        "schedule": schedule.describe(),
        "bottleneck_shape": tuple(model.bottleneck_shape),
        "seed": seed,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[ToyUNet, NoiseSchedule, dict]:
    payload = torch.load(path, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    if payload.get("kind") != "denoiser":
        raise ValueError(f"not a denoiser checkpoint: kind={payload.get('kind')!r}")
    model = ToyUNet(**payload["arch"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    schedule = NoiseSchedule.from_descriptor(payload["schedule"])
    if tuple(payload["bottleneck_shape"]) != tuple(model.bottleneck_shape):
        raise ValueError("checkpoint bottleneck_shape does not match the architecture")
    return model, schedule, payload
