"""Low-rank adapters: init, forward contribution, merge, counting, filtering."""

from __future__ import annotations

import re
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import torch
from torch import nn

from .numerics import Rng, ShapeError, sample_normal

__all__ = [
    "SITES",
    "LoraAdapter",
    "AdapterSet",
    "lora_init",
    "lora_forward",
    "merge",
    "trainable_param_count",
    "filter_lora_state",
    "is_lora_name",
]

INIT_STD = 0.02
SITES = ("query", "key", "value", "projection", "mlp", "head")

_LORA_NAME = re.compile(r"^[\w.]+\.lora_[AB]$")


def is_lora_name(name: str) -> bool:
    return bool(_LORA_NAME.match(name))


class LoraAdapter(nn.Module):
    """Trainable pair (A: r x d_in, B: d_out x r) attached to one base matrix."""

    def __init__(self, name: str, A: torch.Tensor, B: torch.Tensor, alpha: float, dropout_p: float):
        super().__init__()
        r = A.shape[0]
        if r < 1:
            raise ValueError("rank must be >= 1")
        if not 0 <= dropout_p < 1:
            raise ValueError(f"dropout_p must be in [0, 1), got {dropout_p}")
        if B.shape[1] != r:
            raise ShapeError(f"B {tuple(B.shape)} incompatible with rank {r}")
        self.name = name
        self.A = nn.Parameter(A)
        self.B = nn.Parameter(B)
        self.alpha = float(alpha)
        self.dropout_p = float(dropout_p)

    @property
    def r(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def num_params(self) -> int:
        return self.r * (self.d_in + self.d_out)

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {f"{self.name}.lora_A": self.A, f"{self.name}.lora_B": self.B}

    def extra_repr(self) -> str:
        return f"name={self.name!r}, r={self.r}, d_in={self.d_in}, d_out={self.d_out}, alpha={self.alpha}, p={self.dropout_p}"


def lora_init(
    rng: Rng,
    d_in: int,
    d_out: int,
    r: int = 8,
    alpha: float = 16,
    dropout_p: float = 0.1,
    name: str = "adapter",
    dtype: torch.dtype = torch.float32,
) -> LoraAdapter:
    """A ~ N(0, 0.02^2), B = 0, so the fresh adapter contributes nothing."""
    if min(d_in, d_out, r) < 1:
        raise ValueError("adapter dimensions must be positive")
    a = sample_normal(rng, r * d_in, 0.0, INIT_STD).reshape(r, d_in)
    A = torch.tensor(a, dtype=dtype)
    B = torch.zeros(d_out, r, dtype=dtype)
    return LoraAdapter(name, A, B, alpha, dropout_p)


def _dropout(x: torch.Tensor, p: float, generator: torch.Generator | None) -> torch.Tensor:
    if p == 0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1 - p)


def lora_forward(
    adapter: LoraAdapter,
    x: torch.Tensor,
    base_out: torch.Tensor,
    training: bool = False,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """base_out + (alpha/r) * B A dropout(x); dropout only when training."""
    if x.shape[-1] != adapter.d_in:
        raise ShapeError(f"input width {x.shape[-1]} != adapter d_in {adapter.d_in}")
    if base_out.shape[-1] != adapter.d_out or base_out.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"base_out {tuple(base_out.shape)} incompatible with input {tuple(x.shape)}")
    h = _dropout(x, adapter.dropout_p, generator) if training else x
    return base_out + adapter.scaling * ((h @ adapter.A.T) @ adapter.B.T)


def merge(base: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    """W' = W + (alpha/r) B A."""
    if tuple(base.shape) != (adapter.d_out, adapter.d_in):
        raise ShapeError(f"base {tuple(base.shape)} vs adapter ({adapter.d_out}, {adapter.d_in})")
    with torch.no_grad():
        delta = (adapter.B.to(base.dtype) @ adapter.A.to(base.dtype)) * adapter.scaling
        return base + delta


@dataclass
class AdapterSet:
    """Adapters keyed by the base-matrix name they attach to."""

    adapters: dict[str, LoraAdapter] = field(default_factory=dict)
    sites: frozenset[str] = frozenset(SITES)

    def add(self, adapter: LoraAdapter) -> None:
        if adapter.name in self.adapters:
            raise ValueError(f"duplicate adapter for {adapter.name}")
        self.adapters[adapter.name] = adapter

    def __iter__(self):
        return iter(self.adapters.values())

    def __len__(self) -> int:
        return len(self.adapters)

    def __getitem__(self, name: str) -> LoraAdapter:
        return self.adapters[name]

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        for ad in self.adapters.values():
            out.update(ad.named_tensors())
        return out


def trainable_param_count(adapters: AdapterSet | Iterable[LoraAdapter]) -> int:
    return sum(ad.num_params() for ad in adapters)


def filter_lora_state(full_state: Mapping[str, object]) -> dict[str, object]:
    """Keep only adapter A/B tensors from a named state map."""
    return {k: v for k, v in full_state.items() if is_lora_name(k)}

