"""Probabilistic halting: probability flow, truncation, re-allocation, mixing.

All functions accept sequences or tensors and operate along the last
dimension, so the same code serves single gate vectors (tests, decoding)
and ``[batch, length, K]`` stacks (training).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

GATE_EPS = 1e-6


class HaltingError(ValueError):
    pass


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype or torch.float64)


def finalize_gates(raw: torch.Tensor, eps: float = GATE_EPS) -> torch.Tensor:
    """Clamp router outputs to ``[eps, 1 - eps]`` and hard-set the last gate to 0."""
    raw = _as_tensor(raw)
    if raw.shape[-1] == 0:
        raise HaltingError("empty gate vector")
    head = raw[..., :-1].clamp(eps, 1.0 - eps)
    tail = torch.zeros_like(raw[..., -1:])
    return torch.cat([head, tail], dim=-1)


def compute_reach(gates) -> torch.Tensor:
    """reach[0] = 1 and reach[k+1] = reach[k] * gates[k]."""
    gates = _as_tensor(gates)
    if gates.ndim == 0 or gates.shape[-1] == 0:
        raise HaltingError("empty gate vector")
    ones = torch.ones_like(gates[..., :1])
    # cumprod keeps the per-step product order identical to a running loop
    return torch.cat([ones, torch.cumprod(gates[..., :-1], dim=-1)], dim=-1)


def compute_exit(gates, reach) -> torch.Tensor:
    gates = _as_tensor(gates)
    reach = _as_tensor(reach, gates.dtype)
    if gates.shape != reach.shape:
        raise HaltingError(f"gates {tuple(gates.shape)} and reach {tuple(reach.shape)} differ in shape")
    return reach * (1.0 - gates)


def _check_tau(tau: float) -> None:
    if not 0.0 < tau <= 1.0:
        raise HaltingError(f"threshold must lie in (0, 1], got {tau}")


def truncation_step(reach, tau: float) -> torch.Tensor | int:
    """Largest 1-based step whose reach probability is at least ``tau``.

    Returns a Python int for a single vector and a long tensor for stacks.
    """
    _check_tau(tau)
    reach = _as_tensor(reach)
    kept = (reach >= tau).to(torch.long)
    # reach is non-increasing, so the kept steps form a prefix
    k_star = kept.sum(dim=-1).clamp(min=1)
    return int(k_star) if reach.ndim == 1 else k_star


def reallocate_residual(exit_p, reach, k_star) -> torch.Tensor:
    """Truncated halting weights over the executed steps.

    For a single vector returns length ``k_star``. For stacks returns the full
    ``K`` width with zeros past each row's ``k_star``.
    """
    exit_p = _as_tensor(exit_p)
    reach = _as_tensor(reach, exit_p.dtype)
    k_max = exit_p.shape[-1]
    if exit_p.ndim == 1:
        k_star = int(k_star)
        if not 1 <= k_star <= k_max:
            raise HaltingError(f"k_star={k_star} outside [1, {k_max}]")
        return torch.cat([exit_p[: k_star - 1], reach[k_star - 1: k_star]])
    k_star = torch.as_tensor(k_star, device=exit_p.device)
    if bool((k_star < 1).any()) or bool((k_star > k_max).any()):
        raise HaltingError(f"k_star outside [1, {k_max}]")
    steps = torch.arange(1, k_max + 1, device=exit_p.device)
    ks = k_star.unsqueeze(-1)
    zero = torch.zeros((), dtype=exit_p.dtype, device=exit_p.device)
    return torch.where(steps < ks, exit_p, torch.where(steps == ks, reach, zero))


def mix_states(weights, states, atol: float = 1e-6) -> torch.Tensor:
    """Convex combination of latent states along the step axis.

    ``weights`` is ``[..., K]`` and ``states`` is ``[..., K, D]``.
    """
    weights = _as_tensor(weights)
    if not isinstance(states, torch.Tensor):
        states = torch.stack([_as_tensor(s, weights.dtype) for s in states])
    if weights.shape[-1] != states.shape[-2]:
        raise HaltingError(f"{weights.shape[-1]} weights for {states.shape[-2]} states")
    total = weights.detach().sum(dim=-1)
    if not torch.allclose(total, torch.ones_like(total), atol=atol, rtol=0.0):
        raise HaltingError(f"mixing weights must sum to 1 (max dev {float((total - 1).abs().max()):.3g})")
    return (weights.unsqueeze(-1).to(states.dtype) * states).sum(dim=-2)


def prune_ratio(lengths: Sequence[int], max_latent: int) -> float:
    """``1 - mean(l) / l_max`` over executed latent lengths."""
    if max_latent < 1:
        raise HaltingError("prune ratio needs l_max >= 1")
    lengths = _as_tensor(lengths, torch.float64).reshape(-1)
    if lengths.numel() == 0:
        raise HaltingError("no lengths given")
    if bool((lengths < 0).any()) or bool((lengths > max_latent).any()):
        raise HaltingError(f"latent lengths must lie in [0, {max_latent}]")
    return 1.0 - float(lengths.mean()) / max_latent


@dataclass(frozen=True)
class HaltingSchedule:
    gates: torch.Tensor
    reach: torch.Tensor
    exit: torch.Tensor
    k_star: int
    hat_exit: torch.Tensor
    threshold: float

    @property
    def latent_length(self) -> int:
        return self.k_star - 1

    @classmethod
    def from_gates(cls, gates, tau: float) -> "HaltingSchedule":
        gates = _as_tensor(gates)
        if gates.ndim != 1:
            raise HaltingError("HaltingSchedule describes a single token")
        if gates.numel() == 0:
            raise HaltingError("empty gate vector")
        if bool((gates < 0).any()) or bool((gates > 1).any()):
            raise HaltingError("gates must lie in [0, 1]")
        if float(gates[-1]) != 0.0:
            raise HaltingError("final gate must be exactly 0")
        reach = compute_reach(gates)
        exit_p = compute_exit(gates, reach)
        k_star = truncation_step(reach, tau)
        return cls(gates, reach, exit_p, k_star, reallocate_residual(exit_p, reach, k_star), tau)
