"""2D causal visibility over (token position, latent step).

A query at ``(t, k)`` may read a key at ``(t', k')`` iff ``t' <= t``,
``k' <= k`` and the key was actually executed. Indices in the public
functions are 1-based. Keys are laid out step-major, position-minor: all
step-1 slots, then all step-2 slots, and so on, ``L`` slots per step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import torch


class MaskError(ValueError):
    pass


def mask_value(dtype: torch.dtype) -> float:
    """Large negative additive bias; half the dtype minimum so sums stay finite."""
    return torch.finfo(dtype).min / 2


@dataclass(frozen=True)
class GridIndex:
    t: int
    k: int

    def check(self, length: int, k_max: int) -> None:
        if not (1 <= self.t <= length and 1 <= self.k <= k_max):
            raise MaskError(f"{self} outside grid L={length}, K_max={k_max}")


class Occupancy:
    """Which (t, k) grid cells were executed.

    Built from per-token executed step counts ``K*_t``; step 1 is always
    executed.
    """

    def __init__(self, k_star: Iterable[int], k_max: int):
        self.k_star = [int(k) for k in k_star]
        self.k_max = k_max
        for k in self.k_star:
            if not 1 <= k <= k_max:
                raise MaskError(f"executed step count {k} outside [1, {k_max}]")

    @classmethod
    def full(cls, length: int, k_max: int) -> "Occupancy":
        return cls([k_max] * length, k_max)

    @property
    def length(self) -> int:
        return len(self.k_star)

    def active(self, idx: GridIndex) -> bool:
        return idx.k <= self.k_star[idx.t - 1]

    def active_set(self, k: int) -> list[int]:
        return [t for t in range(1, self.length + 1) if k <= self.k_star[t - 1]]


def visible(src: GridIndex, dst: GridIndex, occupancy: Occupancy) -> bool:
    """Whether query ``src`` may attend to key ``dst``."""
    src.check(occupancy.length, occupancy.k_max)
    dst.check(occupancy.length, occupancy.k_max)
    return dst.t <= src.t and dst.k <= src.k and occupancy.active(dst)


def position_ids(length: int, k_max: int) -> torch.Tensor:
    """``[K_max, L]`` position ids; every latent step reuses its token's position."""
    return torch.arange(1, length + 1).unsqueeze(0).expand(k_max, length).clone()


def key_layout(length: int, k: int) -> list[GridIndex]:
    """Grid index of every key slot visible in principle to step-``k`` queries."""
    return [GridIndex(t, s) for s in range(1, k + 1) for t in range(1, length + 1)]


def build_step_mask(length: int, k_max: int, k: int, active_sets: list[Iterable[int]],
                    dtype: torch.dtype = torch.float32) -> tuple[list[int], torch.Tensor]:
    """Additive mask rows for the active queries of latent step ``k``.

    ``active_sets[s - 1]`` holds the 1-based positions executed at step ``s``
    for ``s = 1..k``. Returns the query positions and a ``[n_query, k * L]``
    tensor with 0 at visible keys and a large negative value elsewhere.
    An empty query set yields a ``[0, k * L]`` mask, meaning the step is skipped.
    """
    if not 1 <= k <= k_max:
        raise MaskError(f"step {k} outside [1, {k_max}]")
    if len(active_sets) < k:
        raise MaskError(f"need active sets for steps 1..{k}, got {len(active_sets)}")
    key_active = torch.zeros(k, length, dtype=torch.bool)
    for s in range(k):
        for t in active_sets[s]:
            if not 1 <= t <= length:
                raise MaskError(f"position {t} outside [1, {length}]")
            key_active[s, t - 1] = True
    queries = sorted(int(t) for t in active_sets[k - 1])
    q_pos = torch.tensor(queries, dtype=torch.long) - 1
    mask = step_attention_bias(q_pos.unsqueeze(0), key_active.unsqueeze(0), dtype)[0, 0]
    return queries, mask


def step_attention_bias(q_pos: torch.Tensor, key_active: torch.Tensor,
                        dtype: torch.dtype) -> torch.Tensor:
    """Batched additive bias for queries of one latent step.

    ``q_pos``: ``[B, N]`` 0-based query positions. ``key_active``:
    ``[B, S, L]`` occupancy of the ``S`` steps the queries may see (steps
    ``1..k``). Returns ``[B, 1, N, S * L]`` for broadcasting over heads.
    """
    b, s, length = key_active.shape
    key_pos = torch.arange(length, device=q_pos.device).repeat(s)  # [S*L]
    causal = key_pos.view(1, 1, -1) <= q_pos.unsqueeze(-1)  # [B, N, S*L]
    allowed = causal & key_active.reshape(b, 1, s * length)
    bias = torch.zeros(allowed.shape, dtype=dtype, device=q_pos.device)
    bias.masked_fill_(~allowed, mask_value(dtype))
    return bias.unsqueeze(1)
