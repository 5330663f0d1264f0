"""Decoder-only transformer with adaptive latent steps.

Every token runs up to ``K_max`` forward passes. Pass 1 reads the token
embedding; pass ``k > 1`` reads the previous pass's last-layer state. A
router turns each state into a continuation gate, tokens whose reach
probability drops below ``tau`` are pruned, and the executed states are
mixed with the truncated halting weights.

Keys/values of every executed (t, k) cell are cached per latent step so a
step-k pass only computes its own active queries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from alcot import halting
from alcot.config import ModelConfig
from alcot.mask import step_attention_bias


class CacheError(RuntimeError):
    pass


class StepNotExecuted(LookupError):
    pass


def torch_dtype(precision: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[precision]


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def rope_tables(head_dim: int, max_len: int, base: float) -> tuple[torch.Tensor, torch.Tensor]:
    inv_freq = 1.0 / (base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim))
    angles = torch.arange(max_len, dtype=torch.float64).unsqueeze(1) * inv_freq.unsqueeze(0)
    return angles.cos(), angles.sin()


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved channel pairs. ``x``: [B, H, N, dh]; cos/sin: [B, 1, N, dh/2]."""
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    rot_even = x_even * cos - x_odd * sin
    rot_odd = x_even * sin + x_odd * cos
    return torch.stack([rot_even, rot_odd], dim=-1).flatten(-2)


class KVCache:
    """Per-layer key/value blocks, one block of ``capacity`` slots per latent step.

    ``occupancy[s]`` is a ``[B, capacity]`` bool marking which positions
    executed step ``s + 1``. A block for step k exists only once step k ran.
    """

    def __init__(self, n_layers: int, batch: int, capacity: int):
        self.n_layers = n_layers
        self.batch = batch
        self.capacity = capacity
        self.keys: list[list[torch.Tensor]] = [[] for _ in range(n_layers)]
        self.values: list[list[torch.Tensor]] = [[] for _ in range(n_layers)]
        self.occupancy: list[torch.Tensor] = []

    @property
    def num_steps(self) -> int:
        return len(self.occupancy)

    def mark(self, step: int, q_idx: torch.Tensor, q_valid: torch.Tensor) -> None:
        """Record that the valid queries execute latent step ``step`` (1-based)."""
        if step > self.num_steps + 1:
            raise CacheError(f"step {step} requested but only {self.num_steps} steps cached")
        b_sel, n_sel = q_valid.nonzero(as_tuple=True)
        pos = q_idx[b_sel, n_sel]
        if step > 1:
            prev = self.occupancy[step - 2]
            if not bool(prev[b_sel, pos].all()):
                raise CacheError(f"query at step {step} lacks its step-{step - 1} entry")
        if step == self.num_steps + 1:
            self.occupancy.append(torch.zeros(self.batch, self.capacity, dtype=torch.bool,
                                              device=q_idx.device))
        occ = self.occupancy[step - 1]
        if bool(occ[b_sel, pos].any()):
            raise CacheError(f"cell already executed at step {step}")
        occ[b_sel, pos] = True

    def write(self, layer: int, step: int, q_idx: torch.Tensor, q_valid: torch.Tensor,
              k: torch.Tensor, v: torch.Tensor) -> None:
        """Store ``k, v`` ([B, H, N, dh]) at the query positions of ``step``."""
        blocks_k, blocks_v = self.keys[layer], self.values[layer]
        b, h, _, dh = k.shape
        if len(blocks_k) == step - 1:
            empty = k.new_zeros(b, self.capacity, h, dh)
            blocks_k.append(empty)
            blocks_v.append(empty.clone())
        elif len(blocks_k) < step:
            raise CacheError(f"layer {layer}: writing step {step} with {len(blocks_k)} blocks cached")
        b_sel, n_sel = q_valid.nonzero(as_tuple=True)
        pos = q_idx[b_sel, n_sel]
        new_k = k.permute(0, 2, 1, 3)[b_sel, n_sel]
        new_v = v.permute(0, 2, 1, 3)[b_sel, n_sel]
        if torch.is_grad_enabled():
            blocks_k[step - 1] = blocks_k[step - 1].index_put((b_sel, pos), new_k)
            blocks_v[step - 1] = blocks_v[step - 1].index_put((b_sel, pos), new_v)
        else:
            blocks_k[step - 1].index_put_((b_sel, pos), new_k)
            blocks_v[step - 1].index_put_((b_sel, pos), new_v)

    def gather(self, layer: int, step: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Keys, values ([B, H, step*capacity, dh]) and occupancy ([B, step, capacity])."""
        ks = torch.cat(self.keys[layer][:step], dim=1).permute(0, 2, 1, 3)
        vs = torch.cat(self.values[layer][:step], dim=1).permute(0, 2, 1, 3)
        return ks, vs, torch.stack(self.occupancy[:step], dim=1)


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.wq = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.wk = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.wv = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.wo = nn.Linear(cfg.d_model, cfg.d_model, bias=False)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def project(self, x, cos, sin):
        q = apply_rope(self._heads(self.wq(x)), cos, sin)
        k = apply_rope(self._heads(self.wk(x)), cos, sin)
        return q, k, self._heads(self.wv(x))

    def merge(self, out: torch.Tensor) -> torch.Tensor:
        b, _, n, _ = out.shape
        return self.wo(out.transpose(1, 2).reshape(b, n, -1))


class SwiGLU(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.w_gate = nn.Linear(d_model, d_ff, bias=False)
        self.w_up = nn.Linear(d_model, d_ff, bias=False)
        self.w_down = nn.Linear(d_ff, d_model, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w_down(F.silu(self.w_gate(x)) * self.w_up(x))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.attn = Attention(cfg)
        self.mlp_norm = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.mlp = SwiGLU(cfg.d_model, cfg.d_ff)


class Router(nn.Module):
    """Maps a latent state to a continuation logit.

    Shared routers use one head for every step; per-step routers keep one
    head per step ``1..K_max-1`` (the last step is a forced halt).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.kind = cfg.router_kind
        self.detach_input = cfg.router_detach_input
        n_heads = 1 if self.kind.startswith("shared") else max(cfg.k_max - 1, 0)
        two_layer = self.kind.endswith("two-layer")
        heads = []
        if self.kind != "none":
            for _ in range(n_heads):
                out = nn.Linear(cfg.router_hidden if two_layer else cfg.d_model, 1)
                if two_layer:
                    heads.append(nn.Sequential(nn.Linear(cfg.d_model, cfg.router_hidden), nn.GELU(), out))
                else:
                    heads.append(out)
        self.heads = nn.ModuleList(heads)
        self.init_bias = cfg.router_init_bias

    def reset_parameters(self) -> None:
        for head in self.heads:
            last = head[-1] if isinstance(head, nn.Sequential) else head
            nn.init.zeros_(last.weight)
            nn.init.constant_(last.bias, self.init_bias)

    def forward(self, z: torch.Tensor, step: int) -> torch.Tensor:
        if self.kind == "none":
            raise RuntimeError("router_kind 'none' has no logits")
        if self.detach_input:
            z = z.detach()
        head = self.heads[0] if self.kind.startswith("shared") else self.heads[step - 1]
        return head(z).squeeze(-1)


@dataclass
class UnrollOutput:
    """Everything one teacher-forced unroll produces for a ``[B, L]`` batch.

    Per-step tensors have a trailing step axis of width ``K`` = steps
    actually run (at most ``K_max``); cells past a token's ``k_star`` are 0.
    """

    z: torch.Tensor  # [B, L, K, D]
    gates: torch.Tensor  # [B, L, K]
    reach: torch.Tensor  # [B, L, K]
    hat_exit: torch.Tensor  # [B, L, K]
    executed: torch.Tensor  # [B, L, K] bool
    k_star: torch.Tensor  # [B, L] long
    z_final: torch.Tensor  # [B, L, D]
    logits: torch.Tensor  # [B, L, V]
    p_target: Optional[torch.Tensor]  # [B, L, K], stop-gradient
    active_counts: list[int] = field(default_factory=list)  # summed over the batch
    router_logits: Optional[torch.Tensor] = None
    # same values as ``gates`` but differentiable only wrt router weights
    penalty_gates: Optional[torch.Tensor] = None

    @property
    def latent_length(self) -> torch.Tensor:
        return self.k_star - 1

    def sequence_active_counts(self) -> torch.Tensor:
        """``[B, K]`` active token counts per sequence and step."""
        return self.executed.sum(dim=1)


def pack_active(active: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Left-pack active positions of a ``[B, L]`` mask into ``[B, N]`` indices.

    Padding slots point at position 0 and are flagged invalid.
    """
    counts = active.sum(dim=1)
    n = int(counts.max()) if active.numel() else 0
    # stable sort puts active positions first, in increasing order
    order = torch.argsort((~active).to(torch.int8), dim=1, stable=True)[:, :n]
    valid = torch.arange(n, device=active.device).unsqueeze(0) < counts.unsqueeze(1)
    return torch.where(valid, order, torch.zeros_like(order)), valid


class LatentLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.feed = nn.Linear(cfg.d_model, cfg.d_model) if cfg.feed == "affine" else None
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.final_norm = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.router = Router(cfg)
        cos, sin = rope_tables(cfg.head_dim, cfg.max_seq_len, cfg.rope_base)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)
        # optional callable (step, q_idx, q_valid) -> raw gates [B, N]; replaces the router
        self.scripted_gates = None
        self.reset_parameters()
        self.to(torch_dtype(cfg.precision))

    def reset_parameters(self) -> None:
        std = 0.02
        nn.init.normal_(self.embed.weight, std=1.0)
        for block in self.blocks:
            for lin in (block.attn.wq, block.attn.wk, block.attn.wv, block.mlp.w_gate, block.mlp.w_up):
                nn.init.normal_(lin.weight, std=std)
            for lin in (block.attn.wo, block.mlp.w_down):
                nn.init.normal_(lin.weight, std=std / math.sqrt(2 * self.cfg.n_layers))
        nn.init.normal_(self.lm_head.weight, std=std)
        if self.feed is not None:
            nn.init.eye_(self.feed.weight)
            nn.init.zeros_(self.feed.bias)
        for head in self.router.heads:
            if isinstance(head, nn.Sequential):
                nn.init.normal_(head[0].weight, std=std)
                nn.init.zeros_(head[0].bias)
        self.router.reset_parameters()

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.weight.dtype

    def num_parameters(self, non_embedding: bool = True) -> int:
        n = sum(p.numel() for p in self.parameters())
        return n - self.embed.weight.numel() if non_embedding else n

    # -- single pieces -----------------------------------------------------

    def _rope(self, pos: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if pos.numel() and int(pos.max()) >= self.cfg.max_seq_len:
            raise ValueError(f"position exceeds max_seq_len={self.cfg.max_seq_len}")
        cos = self.rope_cos[pos].to(self.dtype).unsqueeze(1)
        sin = self.rope_sin[pos].to(self.dtype).unsqueeze(1)
        return cos, sin

    def embed_step_input(self, step: int, token: torch.Tensor,
                         prev_state: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Input vector for latent ``step``: token embedding at step 1, fed-back state after."""
        if step == 1:
            return self.embed(token)
        if prev_state is None:
            raise StepNotExecuted(f"step {step} needs the step-{step - 1} state, which was not executed")
        return prev_state if self.feed is None else self.feed(prev_state)

    def gates_from_logits(self, logits: torch.Tensor, step: int) -> torch.Tensor:
        if step == self.cfg.k_max:
            return torch.zeros_like(logits)
        return torch.sigmoid(logits).clamp(halting.GATE_EPS, 1.0 - halting.GATE_EPS)

    def step_gates(self, z: torch.Tensor, step: int) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Continuation gates (and router logits) for states produced at ``step``."""
        if self.cfg.router_kind == "none":
            fill = 0.0 if step == self.cfg.k_max else 1.0
            return torch.full(z.shape[:-1], fill, dtype=z.dtype, device=z.device), None
        if step == self.cfg.k_max:
            return torch.zeros(z.shape[:-1], dtype=z.dtype, device=z.device), None
        logits = self.router(z, step)
        return self.gates_from_logits(logits, step), logits

    def gates_for(self, step: int, z: torch.Tensor, q_idx: torch.Tensor,
                  q_valid: torch.Tensor) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        if self.scripted_gates is None:
            return self.step_gates(z, step)
        raw = torch.as_tensor(self.scripted_gates(step, q_idx, q_valid), dtype=z.dtype)
        return (torch.zeros_like(raw) if step == self.cfg.k_max else raw), None

    def forward_step(self, step: int, q_idx: torch.Tensor, q_valid: torch.Tensor,
                     inputs: torch.Tensor, cache: KVCache) -> torch.Tensor:
        """One transformer pass for the queries of latent ``step``.

        ``q_idx``/``q_valid``: ``[B, N]`` 0-based positions and validity,
        ``inputs``: ``[B, N, D]``. Appends this step's keys/values to ``cache``
        and returns last-layer states ``[B, N, D]``.
        """
        if not 1 <= step <= self.cfg.k_max:
            raise ValueError(f"step {step} outside [1, {self.cfg.k_max}]")
        if q_idx.shape[1] == 0:
            return inputs
        cache.mark(step, q_idx, q_valid)
        cos, sin = self._rope(q_idx)
        h = inputs
        bias = None
        for layer, block in enumerate(self.blocks):
            q, k, v = block.attn.project(block.attn_norm(h), cos, sin)
            cache.write(layer, step, q_idx, q_valid, k, v)
            keys, values, occ = cache.gather(layer, step)
            if bias is None:
                bias = step_attention_bias(q_idx, occ, h.dtype)
            out = F.scaled_dot_product_attention(q, keys, values, attn_mask=bias)
            h = h + block.attn.merge(out)
            h = h + block.mlp(block.mlp_norm(h))
        return self.final_norm(h)

    # -- full passes -------------------------------------------------------

    def forward_vanilla(self, tokens: torch.Tensor) -> torch.Tensor:
        """Plain causal transformer pass over ``[B, L]`` tokens; returns logits."""
        b, length = tokens.shape
        pos = torch.arange(length, device=tokens.device).expand(b, length)
        cos, sin = self._rope(pos)
        h = self.embed(tokens)
        for block in self.blocks:
            q, k, v = block.attn.project(block.attn_norm(h), cos, sin)
            out = F.scaled_dot_product_attention(q, k, v, is_causal=True)
            h = h + block.attn.merge(out)
            h = h + block.mlp(block.mlp_norm(h))
        return self.lm_head(self.final_norm(h))

    def unroll(self, tokens: torch.Tensor, targets: Optional[torch.Tensor] = None, *,
               prune: bool = True, tau: Optional[float] = None,
               perturb: Optional[dict[tuple[int, int, int], torch.Tensor]] = None) -> UnrollOutput:
        """Teacher-forced latent unroll over a ``[B, L]`` batch.

        ``prune=False`` executes all ``K_max`` steps for every token (the
        ``tau -> 0+`` limit). ``perturb`` maps 0-based ``(b, t, k)`` (``k``
        1-based) to a vector added to that cell's step input; used by the
        dependency tests.
        """
        cfg = self.cfg
        tau = cfg.tau if tau is None else tau
        if not 0.0 < tau <= 1.0:
            raise halting.HaltingError(f"threshold must lie in (0, 1], got {tau}")
        b, length = tokens.shape
        device = tokens.device
        cache = KVCache(cfg.n_layers, b, length)
        active = torch.ones(b, length, dtype=torch.bool, device=device)
        reach = torch.ones(b, length, dtype=self.dtype, device=device)
        step_input = self.embed(tokens)

        zs, gs, pgs, reaches, execs, ps, rls, counts = [], [], [], [], [], [], [], []
        separate_penalty = (self.scripted_gates is None and cfg.router_kind != "none"
                            and not cfg.router_detach_input and torch.is_grad_enabled())
        for step in range(1, cfg.k_max + 1):
            if not bool(active.any()):
                break
            q_idx, q_valid = pack_active(active)
            bi = torch.arange(b, device=device).unsqueeze(1)
            x = step_input[bi, q_idx]
            if perturb:
                x = self._apply_perturbation(x, q_idx, q_valid, step, perturb)
            z_packed = self.forward_step(step, q_idx, q_valid, x, cache)
            g_packed, logit_packed = self.gates_for(step, z_packed, q_idx, q_valid)

            b_sel, n_sel = q_valid.nonzero(as_tuple=True)
            t_sel = q_idx[b_sel, n_sel]
            z_full = z_packed.new_zeros(b, length, cfg.d_model).index_put((b_sel, t_sel), z_packed[b_sel, n_sel])
            g_full = g_packed.new_zeros(b, length).index_put((b_sel, t_sel), g_packed[b_sel, n_sel])
            if separate_penalty:
                pg_packed = self.step_gates(z_packed.detach(), step)[0]
                pgs.append(pg_packed.new_zeros(b, length).index_put((b_sel, t_sel), pg_packed[b_sel, n_sel]))
            else:
                pgs.append(g_full)
            if logit_packed is not None:
                rls.append(logit_packed.new_zeros(b, length).index_put((b_sel, t_sel), logit_packed[b_sel, n_sel]))
            if targets is not None:
                with torch.no_grad():
                    logp = F.log_softmax(self.lm_head(z_packed[b_sel, n_sel]), dim=-1)
                    p_sel = logp.gather(-1, targets[b_sel, t_sel].unsqueeze(-1)).squeeze(-1).exp()
                    ps.append(torch.zeros(b, length, dtype=self.dtype, device=device).index_put((b_sel, t_sel), p_sel))

            zs.append(z_full)
            gs.append(g_full)
            reaches.append(reach)
            execs.append(active)
            counts.append(int(active.sum()))

            reach = reach * g_full
            if step == cfg.k_max:
                active = torch.zeros_like(active)
            elif prune:
                active = active & (reach.detach() >= tau)
            if step < cfg.k_max:
                step_input = self.embed_step_input(step + 1, tokens, z_full)

        executed = torch.stack(execs, dim=-1)
        gates = torch.stack(gs, dim=-1)
        reach_t = torch.stack(reaches, dim=-1)
        k_star = executed.sum(dim=-1)
        exit_p = halting.compute_exit(gates, reach_t)
        hat = halting.reallocate_residual(exit_p, reach_t, k_star)
        z_all = torch.stack(zs, dim=2)
        tol = 1e-5 if self.dtype == torch.float32 else 1e-9
        z_final = halting.mix_states(hat, z_all, atol=tol)
        return UnrollOutput(
            z=z_all, gates=gates, reach=reach_t, hat_exit=hat, executed=executed, k_star=k_star,
            z_final=z_final, logits=self.lm_head(z_final),
            p_target=torch.stack(ps, dim=-1) if ps else None,
            active_counts=counts,
            router_logits=torch.stack(rls, dim=-1) if rls else None,
            penalty_gates=torch.stack(pgs, dim=-1),
        )

    @staticmethod
    def _apply_perturbation(x, q_idx, q_valid, step, perturb):
        x = x.clone()
        for (bb, t, k), delta in perturb.items():
            if k != step:
                continue
            hit = ((q_idx[bb] == t) & q_valid[bb]).nonzero(as_tuple=True)[0]
            if hit.numel():
                x[bb, hit[0]] = x[bb, hit[0]] + delta.to(x.dtype)
        return x


def non_embedding_params(cfg: ModelConfig) -> int:
    """Parameter count excluding the token embedding, from the config alone."""
    d = cfg.d_model
    per_block = 4 * d * d + 3 * d * cfg.d_ff + 2 * d
    n = cfg.n_layers * per_block + d + d * cfg.vocab_size
    if cfg.feed == "affine":
        n += d * d + d
    if cfg.router_kind != "none":
        heads = 1 if cfg.router_kind.startswith("shared") else max(cfg.k_max - 1, 0)
        if cfg.router_kind.endswith("two-layer"):
            head = d * cfg.router_hidden + cfg.router_hidden + cfg.router_hidden + 1
        else:
            head = d + 1
        n += heads * head
    return n


def count_active_flops(active_counts, cfg: ModelConfig) -> float:
    """Training FLOPs estimate: 6 x non-embedding params per executed token-step.

    Router parameters are part of the non-embedding count, so router cost
    is included.
    """
    return 6.0 * non_embedding_params(cfg) * float(sum(int(c) for c in active_counts))


def vanilla_flops(n_tokens: int, cfg: ModelConfig) -> float:
    """Same estimate for a single pass per token."""
    return 6.0 * non_embedding_params(cfg) * float(n_tokens)
