"""Training objective: CE on the mixed state plus the correctness-aware halting penalty."""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn.functional as F

from alcot.config import AdaptiveLossConfig, ConfigError


def ce_loss(logits: torch.Tensor, targets: torch.Tensor, mask: Optional[torch.Tensor] = None,
            reduction: str = "mean") -> torch.Tensor:
    """Token-level cross-entropy of ``[..., V]`` logits against ``[...]`` targets."""
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    per_token = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                                reduction="none")
    if mask is not None:
        m = mask.reshape(-1).to(per_token.dtype)
        total = (per_token * m).sum()
        return total / m.sum().clamp(min=1) if reduction == "mean" else total
    return per_token.mean() if reduction == "mean" else per_token.sum()


def adaptive_loss(gates: torch.Tensor, p_target: torch.Tensor, k_star: torch.Tensor,
                  config: AdaptiveLossConfig, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``lam * mean_t sum_{k <= K*_t} g_t^(k) * sg(p_target_t^(k) ** beta)``.

    ``gates``/``p_target`` are ``[..., K]``, ``k_star`` is ``[...]``. The
    probability factor is detached, so only the gates receive gradient.
    """
    if config.lam < 0 or config.beta < 1:
        raise ConfigError("adaptive loss needs lam >= 0 and beta >= 1")
    if gates.shape != p_target.shape:
        raise ValueError("gates and p_target must share a shape")
    steps = torch.arange(1, gates.shape[-1] + 1, device=gates.device)
    executed = (steps <= k_star.unsqueeze(-1)).to(gates.dtype)
    weight = p_target.detach().clamp(0.0, 1.0).pow(config.beta)
    per_token = (gates * weight * executed).sum(dim=-1)
    if mask is not None:
        m = mask.to(per_token.dtype)
        per_token = per_token * m
        denom = m.sum().clamp(min=1)
    else:
        denom = per_token.numel()
    return config.lam * per_token.sum() / denom


def total_loss(ce: torch.Tensor, adaptive: torch.Tensor) -> torch.Tensor:
    return ce + adaptive


def objective(out, targets: torch.Tensor, config: AdaptiveLossConfig,
              mask: Optional[torch.Tensor] = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """``(total, ce, adaptive)`` for an :class:`~alcot.model.UnrollOutput`."""
    ce = ce_loss(out.logits, targets, mask, config.ce_reduction)
    if out.p_target is None:
        raise ValueError("unroll was run without targets; p_target missing")
    # the penalty reads gates computed on detached states, so it only trains the router
    gates = out.gates if out.penalty_gates is None else out.penalty_gates
    adaptive = adaptive_loss(gates, out.p_target, out.k_star, config, mask)
    return total_loss(ce, adaptive), ce, adaptive
