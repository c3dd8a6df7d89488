"""Numeric kernel: keyed random streams, masked softmax and gradient checking.

Tensors are plain ``torch.Tensor`` objects. Test builds run everything in
float64; training may run in float32.
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

# Stand-in for -inf inside logits. Keeps backward passes finite; exact zeros
# are restored by post-masking the softmax output.
NEG_INF = -1e9


class ContractError(ValueError):
    """Raised when an operation is called with inputs violating its contract."""


class AllMaskedRowWarning(RuntimeWarning):
    pass


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ContractError(f"stream keys must be non-negative, got {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


@dataclass(frozen=True)
class Rng:
    """Immutable, keyed random stream.

    Draws never mutate the object; instead a child stream is derived for each
    consumer with :meth:`child`. The bit generator is Philox (counter based),
    seeded through ``numpy.random.SeedSequence`` so that identical
    ``(seed, path)`` pairs reproduce identical draws on every platform.
    """

    seed: int
    path: tuple[int, ...] = ()

    algorithm = "philox4x64-seedsequence"

    def child(self, *keys) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))

    def integer_seed(self) -> int:
        """A 63-bit integer derived from this stream, for seeding torch."""
        return int(self.generator().integers(0, 2**63 - 1))

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(self.integer_seed())
        return g


def seeded_gaussian(rng: Rng, rows: int, cols: int, dtype=torch.float64) -> torch.Tensor:
    """I.i.d. standard normal ``rows x cols`` tensor drawn from ``rng``."""
    draws = rng.generator().standard_normal((rows, cols))
    return torch.from_numpy(draws).to(dtype)


def seeded_gaussian_like(rng: Rng, shape, dtype=torch.float64) -> torch.Tensor:
    draws = rng.generator().standard_normal(tuple(shape))
    return torch.from_numpy(draws).to(dtype)


def softmax_with_bias(logits: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Row softmax of ``logits + bias`` with exact zeros where ``bias`` is -inf.

    ``bias`` may hold ``-inf`` or any value ``<= NEG_INF`` to mark blocked
    positions, and 0 elsewhere. It broadcasts against ``logits``. Rows that
    are blocked everywhere return uniform weights and emit a warning.
    """
    try:
        shape = torch.broadcast_shapes(logits.shape, bias.shape)
    except RuntimeError as exc:
        raise ContractError(f"shape mismatch: logits {tuple(logits.shape)} vs bias {tuple(bias.shape)}") from exc
    if shape != logits.shape:
        raise ContractError(f"bias {tuple(bias.shape)} does not broadcast onto logits {tuple(logits.shape)}")

    blocked = bias <= NEG_INF
    finite_bias = torch.where(blocked, torch.full_like(bias, NEG_INF), bias).to(logits.dtype)
    weights = torch.softmax(logits + finite_bias, dim=-1)
    allowed = (~blocked).to(logits.dtype)
    weights = weights * allowed

    row_open = allowed.sum(dim=-1, keepdim=True) > 0
    if not bool(row_open.all()):
        warnings.warn("attention row with every position masked; using uniform weights", AllMaskedRowWarning, stacklevel=2)
        uniform = torch.full_like(weights, 1.0 / shape[-1])
        weights = torch.where(row_open, weights, uniform)
    return weights


def _central_difference(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float) -> torch.Tensor:
    grad = torch.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    with torch.no_grad():
        for k in range(flat_x.numel()):
            orig = flat_x[k].item()
            flat_x[k] = orig + eps
            f_plus = float(f(x))
            flat_x[k] = orig - eps
            f_minus = float(f(x))
            flat_x[k] = orig
            flat_g[k] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = torch.maximum(torch.ones_like(analytic), torch.maximum(analytic.abs(), numeric.abs()))
    return float(((analytic - numeric).abs() / denom).max()) if analytic.numel() else 0.0


def gradient_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-6) -> float:
    """Max relative error between autograd and central differences of ``f`` at ``x``.

    ``f`` maps a tensor to a scalar tensor. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    x = x.detach().clone().to(torch.float64)
    xg = x.clone().requires_grad_(True)
    value = f(xg)
    if value.numel() != 1:
        raise ContractError("f must return a scalar")
    if not torch.isfinite(value).all():
        raise ContractError(f"f(x) is not finite: {value.item()}")
    (analytic,) = torch.autograd.grad(value, xg, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    numeric = _central_difference(f, x, eps)
    return relative_error(analytic.detach(), numeric)


def gradient_check_module(loss_fn: Callable[[], torch.Tensor], params: list[torch.Tensor], eps: float = 1e-6) -> float:
    """Like :func:`gradient_check` but perturbs parameter tensors in place.

    ``loss_fn`` takes no arguments and reads ``params`` (leaf tensors with
    ``requires_grad``). Returns the max relative error over all of them.
    """
    loss = loss_fn()
    if not torch.isfinite(loss).all():
        raise ContractError(f"loss is not finite: {loss.item()}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        numeric = torch.zeros_like(p)
        flat_p = p.data.reshape(-1)
        flat_n = numeric.reshape(-1)
        with torch.no_grad():
            for k in range(flat_p.numel()):
                orig = flat_p[k].item()
                flat_p[k] = orig + eps
                f_plus = float(loss_fn())
                flat_p[k] = orig - eps
                f_minus = float(loss_fn())
                flat_p[k] = orig
                flat_n[k] = (f_plus - f_minus) / (2.0 * eps)
        worst = max(worst, relative_error(g, numeric))
    return worst
