"""Brute-force references for tests. Slow by design.

Nothing here calls into the model's forward code: the transformer math is
re-derived from the raw weight dict, attention is dense over an explicit
mask, and nothing is cached.
"""

from __future__ import annotations

import numpy as np
import torch

from alcot.config import ModelConfig


def _rms(x, w, eps):
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * w


def _rotate(x, pos, base):
    # x: [N, H, dh]; pos: [N]
    dh = x.shape[-1]
    inv = 1.0 / (base ** (torch.arange(0, dh, 2, dtype=torch.float64) / dh))
    ang = pos.to(torch.float64).unsqueeze(1) * inv.unsqueeze(0)
    cos = ang.cos().to(x.dtype).unsqueeze(1)
    sin = ang.sin().to(x.dtype).unsqueeze(1)
    out = torch.empty_like(x)
    out[..., 0::2] = x[..., 0::2] * cos - x[..., 1::2] * sin
    out[..., 1::2] = x[..., 0::2] * sin + x[..., 1::2] * cos
    return out


def dense_layers(weights: dict, cfg: ModelConfig, x: torch.Tensor, pos: torch.Tensor,
                 allowed: torch.Tensor) -> torch.Tensor:
    """Run all blocks plus the final norm on ``x`` ([N, D]) with an explicit
    boolean visibility matrix ``allowed`` ([N, N], row = query)."""
    n = x.shape[0]
    h_, dh = cfg.n_heads, cfg.head_dim
    h = x
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        a = _rms(h, weights[p + "attn_norm.weight"], cfg.norm_eps)
        q = _rotate((a @ weights[p + "attn.wq.weight"].T).view(n, h_, dh), pos, cfg.rope_base)
        k = _rotate((a @ weights[p + "attn.wk.weight"].T).view(n, h_, dh), pos, cfg.rope_base)
        v = (a @ weights[p + "attn.wv.weight"].T).view(n, h_, dh)
        scores = torch.einsum("qhd,khd->hqk", q, k) / dh ** 0.5
        scores = scores.masked_fill(~allowed.unsqueeze(0), float("-inf"))
        att = torch.softmax(scores, dim=-1)
        o = torch.einsum("hqk,khd->qhd", att, v).reshape(n, -1)
        h = h + o @ weights[p + "attn.wo.weight"].T
        m = _rms(h, weights[p + "mlp_norm.weight"], cfg.norm_eps)
        gate = m @ weights[p + "mlp.w_gate.weight"].T
        up = m @ weights[p + "mlp.w_up.weight"].T
        h = h + (torch.nn.functional.silu(gate) * up) @ weights[p + "mlp.w_down.weight"].T
    return _rms(h, weights["final_norm.weight"], cfg.norm_eps)


def _feed(weights, cfg, z):
    if cfg.feed == "affine":
        return z @ weights["feed.weight"].T + weights["feed.bias"]
    return z


def flat_grid_mask(length: int, k_max: int) -> torch.Tensor:
    """Explicit ``[(L*K), (L*K)]`` visibility over the flattened grid.

    Flat index ``(k - 1) * L + (t - 1)``; entry [i, j] says query i sees key j.
    """
    size = length * k_max
    allowed = torch.zeros(size, size, dtype=torch.bool)
    for i in range(size):
        ki, ti = divmod(i, length)
        for j in range(size):
            kj, tj = divmod(j, length)
            allowed[i, j] = tj <= ti and kj <= ki
    return allowed


@torch.no_grad()
def dense_forward(weights: dict, cfg: ModelConfig, tokens: torch.Tensor, k_max: int | None = None,
                  perturb: dict | None = None, k_star=None) -> torch.Tensor:
    """All latent states ``[L, K, D]`` for one sequence.

    Recomputes the whole flattened grid ``K`` times; after sweep ``s`` the
    inputs of steps ``<= s + 1`` are final, so ``K`` sweeps give exact states.
    ``perturb`` maps 0-based ``(t, k)`` (``k`` 1-based) to an input offset.
    ``k_star`` (executed steps per token) hides unexecuted keys; states of
    unexecuted cells are still returned but meaningless.
    """
    k_max = cfg.k_max if k_max is None else k_max
    length = tokens.shape[0]
    emb = weights["embed.weight"][tokens]
    d = emb.shape[-1]
    allowed = flat_grid_mask(length, k_max)
    if k_star is not None:
        executed = torch.tensor([[k < int(ks) for ks in k_star] for k in range(k_max)]).reshape(-1)
        allowed = allowed & executed.unsqueeze(0)
    pos = torch.arange(length).repeat(k_max)
    z = torch.zeros(k_max, length, d, dtype=emb.dtype)
    for _ in range(k_max):
        inputs = [emb] + [_feed(weights, cfg, z[s]) for s in range(k_max - 1)]
        x = torch.cat(inputs, dim=0).clone()
        for (t, k), delta in (perturb or {}).items():
            x[(k - 1) * length + t] += delta.to(x.dtype)
        z = dense_layers(weights, cfg, x, pos, allowed).view(k_max, length, d)
    return z.permute(1, 0, 2).contiguous()


@torch.no_grad()
def sequential_forward(weights: dict, cfg: ModelConfig, tokens: torch.Tensor, steps,
                       fresh_positions: bool = True, perturb: dict | None = None) -> list[list[torch.Tensor]]:
    """Strictly sequential latent chain in one 1D sequence.

    Token ``t`` is followed by its latent inputs, so the stream is
    ``x_1, z_1^(1), .., z_1^(K_1 - 1), x_2, ...`` and every later entry sees
    every earlier one. Each entry is computed by re-running the whole prefix.
    ``fresh_positions`` gives every entry its own position id; otherwise all
    entries of token ``t`` share position ``t``.

    Returns ``states[t][k - 1]`` for ``k = 1..steps[t]``.
    """
    steps = [int(s) for s in steps]
    if len(steps) != tokens.shape[0]:
        raise ValueError("one step count per token required")
    emb = weights["embed.weight"][tokens]
    xs: list[torch.Tensor] = []
    pos: list[int] = []
    states: list[list[torch.Tensor]] = []
    for t, k_t in enumerate(steps):
        states.append([])
        for k in range(1, max(k_t, 1) + 1):
            x = emb[t] if k == 1 else _feed(weights, cfg, states[t][-1])
            if perturb and (t, k) in perturb:
                x = x + perturb[(t, k)].to(x.dtype)
            xs.append(x)
            pos.append(len(pos) if fresh_positions else t)
            n = len(xs)
            allowed = torch.ones(n, n, dtype=torch.bool).tril()
            out = dense_layers(weights, cfg, torch.stack(xs), torch.tensor(pos), allowed)
            states[t].append(out[-1])
    return states


@torch.no_grad()
def dense_vanilla_logits(weights: dict, cfg: ModelConfig, tokens: torch.Tensor) -> torch.Tensor:
    length = tokens.shape[0]
    allowed = torch.ones(length, length, dtype=torch.bool).tril()
    z = dense_layers(weights, cfg, weights["embed.weight"][tokens], torch.arange(length), allowed)
    return z @ weights["lm_head.weight"].T


def halting_mc(gates, samples: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Empirical distribution of the halting step from simulated coin flips."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = rng or np.random.default_rng(0)
    gates = np.asarray(gates, dtype=np.float64)
    k_max = gates.shape[0]
    counts = np.zeros(k_max, dtype=np.int64)
    for _ in range(samples):
        for k in range(k_max):
            if rng.random() >= gates[k]:
                counts[k] += 1
                break
    return counts / samples


def halting_mc_vectorized(gates, samples: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Same simulation drawing all coins at once; for large sample counts."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = rng or np.random.default_rng(0)
    gates = np.asarray(gates, dtype=np.float64)
    cont = rng.random((samples, gates.shape[0])) < gates
    stop_step = np.argmin(cont, axis=1)  # first False; the last gate is 0 so one exists
    return np.bincount(stop_step, minlength=gates.shape[0]) / samples


def halting_mc_batch(gates, samples: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Halting histograms for many gate vectors ``[N, K]`` at once.

    Of the chains still running at step k, the number that stop is
    Binomial(running, 1 - g^(k)); drawing these counts step by step has the
    same distribution as simulating every chain coin by coin.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = rng or np.random.default_rng(0)
    gates = np.atleast_2d(np.asarray(gates, dtype=np.float64))
    running = np.full(gates.shape[0], samples, dtype=np.int64)
    counts = np.zeros(gates.shape, dtype=np.int64)
    for k in range(gates.shape[1]):
        stop = rng.binomial(running, 1.0 - gates[:, k])
        counts[:, k] = stop
        running = running - stop
    return counts / samples
