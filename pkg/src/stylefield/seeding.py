"""Deterministic seeding utilities.

Every random draw in the package goes through an explicit generator seeded
from a (root seed, labels...) hash, never the global RNG. Per-item seeds are
derived by hashing, not by sharing a mutable stream, so parallel evaluation
order cannot change results.
"""

from __future__ import annotations

import hashlib

import torch

_MASK63 = (1 << 63) - 1


def derive_seed(root: int, *labels) -> int:
    """Stable 63-bit seed from a root seed and any hashable labels."""
    text = repr((int(root),) + tuple(labels)).encode()
    digest = hashlib.sha256(text).digest()
    return int.from_bytes(digest[:8], "little") & _MASK63


def generator(root: int, *labels) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(root, *labels))
    return g


def hash_uniform(seed: int, idx: torch.Tensor) -> torch.Tensor:
    """Counter-based uniform [0,1) draws: one value per int64 index.

    splitmix64-style mixing in wrapping int64 arithmetic; deterministic and
    order-independent, so jitter for ray i never depends on batching.
    """
    x = idx.to(torch.int64) + int(seed & _MASK63)
    x = x + (-0x61C8864680B583EB)  # 0x9E3779B97F4A7C15 as signed int64
    x = (x ^ (x >> 30)) * -0x40A7B892E31B1A47
    x = (x ^ (x >> 27)) * -0x6B2FB644ECCEEE15
    x = x ^ (x >> 31)
    return (x & ((1 << 53) - 1)).to(torch.float64) / float(1 << 53)


def init_linear(layer: torch.nn.Linear, gen: torch.Generator, gain: float = 1.0) -> None:
    """Kaiming-uniform init drawn from an explicit generator."""
    fan_in = layer.weight.shape[1]
    bound = gain * (3.0 / fan_in) ** 0.5
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=gen)


def init_conv(layer: torch.nn.Conv2d, gen: torch.Generator, gain: float = 1.0) -> None:
    fan_in = layer.weight.shape[1] * layer.weight.shape[2] * layer.weight.shape[3]
    bound = gain * (3.0 / fan_in) ** 0.5
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=gen)


def init_module(module: torch.nn.Module, seed: int) -> None:
    """Re-initialize all Linear/Conv2d leaves in named order from one seed.

    Construction-time init uses torch's global RNG; this pass makes parameter
    values a pure function of the seed regardless of ambient RNG state.
    Modules may declare extra parameters via `_param_inits`, a dict of
    parameter name -> ("uniform", lo, hi) | ("normal", mean, std).
    """
    gen = generator(seed, "init")
    for name, sub in sorted(module.named_modules(), key=lambda kv: kv[0]):
        if isinstance(sub, torch.nn.Linear):
            init_linear(sub, gen)
        elif isinstance(sub, torch.nn.Conv2d):
            init_conv(sub, gen)
        for pname, spec in sorted(getattr(sub, "_param_inits", {}).items()):
            param = getattr(sub, pname)
            with torch.no_grad():
                if spec[0] == "uniform":
                    param.uniform_(spec[1], spec[2], generator=gen)
                elif spec[0] == "normal":
                    param.normal_(spec[1], spec[2], generator=gen)
                else:
                    raise ValueError(f"unknown init spec {spec!r} for {pname}")


def apply_strict_mode() -> None:
    """Single-thread, fixed-order reductions: bit-reproducible runs."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
