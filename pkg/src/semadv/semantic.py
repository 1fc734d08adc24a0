"""Per-attribute semantic edit functions over the denoiser bottleneck.

Each attribute pairs a (source_text, target_text) prompt with a small
trainable map F(h, t) -> delta_h: two 1x1 convolutions over the bottleneck
channels with the normalized timestep concatenated as an extra channel. The
final convolution starts at zero so an untrained attribute is an identity
edit. Multiple attributes combine linearly through per-attribute weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

ATTRIBUTE_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    source_text: str
    target_text: str

    def __post_init__(self):
        if not self.name:
            raise ValueError("attribute name must be non-empty")
        if self.source_text == self.target_text:
            raise ValueError("source_text and target_text must differ")


class SemanticFunction(nn.Module):
    """delta_h = conv2(silu(conv1(cat[h, t/T]))), conv2 zero-initialized."""

    def __init__(self, bottleneck_shape: tuple, max_timestep: int, hidden_channels: int | None = None):
        super().__init__()
        channels = int(bottleneck_shape[0])
        hidden = int(hidden_channels or channels)
        self.bottleneck_shape = tuple(int(v) for v in bottleneck_shape)
        self.max_timestep = int(max_timestep)
        self.hidden_channels = hidden
        self.conv1 = nn.Conv2d(channels + 1, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, channels, 1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, h: torch.Tensor, t) -> torch.Tensor:
        if h.ndim != 4 or tuple(h.shape[1:]) != self.bottleneck_shape:
            raise ValueError(f"expected bottleneck (B,)+{self.bottleneck_shape}, got {tuple(h.shape)}")
        t_channel = torch.full_like(h[:, :1], float(t) / self.max_timestep)
        out = torch.nn.functional.silu(self.conv1(torch.cat([h, t_channel], dim=1)))
        return self.conv2(out)

    def emits_zero(self) -> bool:
        """True while the output layer is still all-zero (fresh function)."""
        return bool((self.conv2.weight == 0).all() and (self.conv2.bias == 0).all())

    def randomize_output_layer(self, scale: float, seed: int) -> None:
        """Replace the zero output layer with small Gaussian weights.

        A function that emits exactly zero leaves the edited and source
        trajectories identical, where the directional objective is undefined
        and the anchor terms have zero gradient; training must start from a
        small nonzero output.
        """
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.conv2.weight.copy_(torch.randn(self.conv2.weight.shape, generator=gen) * scale)
            self.conv2.bias.copy_(torch.randn(self.conv2.bias.shape, generator=gen) * scale)


def apply(fn: SemanticFunction, h: torch.Tensor, t) -> torch.Tensor:
    return fn(h, t)


class AttributeSet:
    """Ordered, uniquely named (spec, function) pairs over one bottleneck shape."""

    def __init__(self, items):
        items = list(items)
        names = [spec.name for spec, _ in items]
        if len(set(names)) != len(names):
            raise ValueError(f"attribute names must be unique, got {names}")
        shapes = {fn.bottleneck_shape for _, fn in items}
        if len(shapes) > 1:
            raise ValueError(f"attributes disagree on bottleneck shape: {shapes}")
        self.items = items

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def names(self):
        return [spec.name for spec, _ in self.items]

    @property
    def specs(self):
        return [spec for spec, _ in self.items]

    @property
    def functions(self):
        return [fn for _, fn in self.items]

    def subset(self, names) -> "AttributeSet":
        by_name = {spec.name: (spec, fn) for spec, fn in self.items}
        missing = [n for n in names if n not in by_name]
        if missing:
            raise KeyError(f"unknown attributes {missing}; have {sorted(by_name)}")
        return AttributeSet([by_name[n] for n in names])


def compose(attrs: AttributeSet, weights, h: torch.Tensor, t) -> torch.Tensor:
    """Sum of w_i * F_i(h, t); linear in the weight vector."""
    if len(attrs) == 0:
        raise ValueError("empty attribute set")
    if not torch.is_tensor(weights):
        weights = torch.as_tensor(weights, dtype=h.dtype)
    if weights.ndim != 1 or weights.shape[0] != len(attrs):
        raise ValueError(f"need {len(attrs)} weights, got shape {tuple(weights.shape)}")
    out = None
    for i, (_, fn) in enumerate(attrs):
        term = weights[i] * fn(h, t)
        out = term if out is None else out + term
    return out


def save_attribute(path, spec: AttributeSpec, fn: SemanticFunction, extra: dict | None = None):
    torch.save(
        {
            "format_version": ATTRIBUTE_CHECKPOINT_VERSION,
            "kind": "attribute",
            "spec": {"name": spec.name, "source_text": spec.source_text, "target_text": spec.target_text},
            "arch": {
                "bottleneck_shape": fn.bottleneck_shape,
                "max_timestep": fn.max_timestep,
                "hidden_channels": fn.hidden_channels,
            },
            "state_dict": fn.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_attribute(path) -> tuple[AttributeSpec, SemanticFunction]:
    payload = torch.load(path, weights_only=False)
    if payload.get("format_version") != ATTRIBUTE_CHECKPOINT_VERSION:
        raise ValueError(f"unsupported attribute checkpoint version {payload.get('format_version')!r}")
    if payload.get("kind") != "attribute":
        raise ValueError(f"not an attribute checkpoint: kind={payload.get('kind')!r}")
    spec = AttributeSpec(**payload["spec"])
    fn = SemanticFunction(
        bottleneck_shape=tuple(payload["arch"]["bottleneck_shape"]),
        max_timestep=payload["arch"]["max_timestep"],
        hidden_channels=payload["arch"]["hidden_channels"],
    )
    fn.load_state_dict(payload["state_dict"])
    fn.eval()
    return spec, fn


def save_registry(directory, attrs: AttributeSet, filename: str = "registry.json"):
    """One checkpoint per attribute plus a JSON index of names and prompts."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec, fn in attrs:
        ckpt = f"{spec.name}.pt"
        save_attribute(directory / ckpt, spec, fn)
        entries.append(
            {"name": spec.name, "source_text": spec.source_text, "target_text": spec.target_text, "checkpoint": ckpt}
        )
    index = {"format_version": ATTRIBUTE_CHECKPOINT_VERSION, "attributes": entries}
    (directory / filename).write_text(json.dumps(index, indent=2, sort_keys=True))
    return directory / filename


def load_registry(registry_path) -> AttributeSet:
    registry_path = Path(registry_path)
    index = json.loads(registry_path.read_text())
    if index.get("format_version") != ATTRIBUTE_CHECKPOINT_VERSION:
        raise ValueError(f"unsupported registry version {index.get('format_version')!r}")
    items = []
    for entry in index["attributes"]:
        spec, fn = load_attribute(registry_path.parent / entry["checkpoint"])
        if spec.name != entry["name"]:
            raise ValueError(f"registry entry {entry['name']!r} points at checkpoint of {spec.name!r}")
        items.append((spec, fn))
    return AttributeSet(items)
