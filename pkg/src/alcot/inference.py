"""Token-wise adaptive decoding.

At each position the session runs latent steps one at a time, updating the
reach probability after every gate and stopping as soon as the next step's
reach would fall below ``tau``. The executed states are mixed with the
truncated halting weights, and the LM head predicts the next token.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from alcot import halting
from alcot.data import ByteTokenizer
from alcot.model import KVCache, LatentLM


class ContextOverflow(RuntimeError):
    pass


class UnknownToken(ValueError):
    pass


@dataclass
class DecodeTrace:
    position: int
    input_token: int
    latent_length: int
    gates: list[float]
    weights: list[float]
    token: Optional[int] = None  # emitted (or teacher-forced) next token
    p_target: list[float] = field(default_factory=list)

    def record(self) -> dict:
        return asdict(self)


class DecodeSession:
    """Owns one sequence's KV cache; feed tokens one at a time."""

    def __init__(self, model: LatentLM, capacity: Optional[int] = None, tau: Optional[float] = None):
        self.model = model
        self.cfg = model.cfg
        self.capacity = capacity or self.cfg.max_seq_len
        self.tau = self.cfg.tau if tau is None else tau
        if not 0.0 < self.tau <= 1.0:
            raise halting.HaltingError(f"threshold must lie in (0, 1], got {self.tau}")
        self.cache = KVCache(self.cfg.n_layers, 1, self.capacity)
        self.position = 0
        self.states: list[torch.Tensor] = []

    @torch.no_grad()
    def feed(self, token: int, target: Optional[int] = None) -> tuple[torch.Tensor, DecodeTrace]:
        """Process ``token`` at the next position; returns next-token logits and its trace."""
        model = self.model
        if not 0 <= int(token) < self.cfg.vocab_size:
            raise UnknownToken(f"token id {token} outside vocabulary of {self.cfg.vocab_size}")
        if self.position >= self.capacity:
            raise ContextOverflow(f"context of {self.capacity} positions is full")
        t = self.position
        q_idx = torch.tensor([[t]])
        q_valid = torch.ones(1, 1, dtype=torch.bool)
        tok = torch.tensor([[int(token)]])

        reach = torch.ones(1, 1, dtype=model.dtype)
        zs, gates, reaches, p_target = [], [], [], []
        prev = None
        for step in range(1, self.cfg.k_max + 1):
            x = model.embed_step_input(step, tok, prev)
            z = model.forward_step(step, q_idx, q_valid, x, self.cache)
            g, _ = model.gates_for(step, z, q_idx, q_valid)
            zs.append(z[0, 0])
            gates.append(g[0, 0])
            reaches.append(reach[0, 0])
            if target is not None:
                logp = torch.log_softmax(model.lm_head(z[0, 0]), dim=-1)
                p_target.append(float(logp[int(target)].exp()))
            # same arithmetic as the training unroll, so halting decisions match
            reach = reach * g
            if step == self.cfg.k_max or not bool(reach >= self.tau):
                break
            prev = z

        g_vec = torch.stack(gates)
        r_vec = torch.stack(reaches)
        k_star = len(zs)
        hat = halting.reallocate_residual(halting.compute_exit(g_vec, r_vec), r_vec, k_star)
        tol = 1e-5 if model.dtype == torch.float32 else 1e-9
        z_final = halting.mix_states(hat, torch.stack(zs), atol=tol)
        logits = model.lm_head(z_final)
        self.states.append(z_final)
        self.position += 1
        trace = DecodeTrace(position=t, input_token=int(token), latent_length=k_star - 1,
                            gates=[float(v) for v in g_vec], weights=[float(v) for v in hat],
                            token=None if target is None else int(target), p_target=p_target)
        return logits, trace


def sample(logits: torch.Tensor, temperature: float = 0.0,
           generator: Optional[torch.Generator] = None) -> int:
    """Greedy for ``temperature <= 0``, otherwise temperature sampling."""
    if temperature <= 0:
        return int(torch.argmax(logits))
    probs = torch.softmax(logits.to(torch.float64) / temperature, dim=-1)
    return int(torch.multinomial(probs, 1, generator=generator))


def decode_token(session: DecodeSession, token: int, temperature: float = 0.0,
                 generator: Optional[torch.Generator] = None) -> tuple[int, DecodeTrace]:
    """Feed ``token`` and choose the next one."""
    logits, trace = session.feed(token)
    trace.token = sample(logits, temperature, generator)
    return trace.token, trace


@dataclass
class Generation:
    prompt_ids: list[int]
    ids: list[int]
    text: str
    traces: list[DecodeTrace]
    prompt_traces: list[DecodeTrace]

    @property
    def mean_latent_length(self) -> float:
        return sum(t.latent_length for t in self.traces) / max(len(self.traces), 1)


def generate(model: LatentLM, prompt: str | Sequence[int], max_new_tokens: int,
             temperature: float = 0.0, seed: int = 0, tau: Optional[float] = None,
             tokenizer: Optional[ByteTokenizer] = None) -> Generation:
    tokenizer = tokenizer or ByteTokenizer()
    ids = tokenizer.encode(prompt) if isinstance(prompt, str) else [int(i) for i in prompt]
    if not ids:
        ids = [tokenizer.BOS]
    for i in ids:
        if not 0 <= i < model.cfg.vocab_size:
            raise UnknownToken(f"token id {i} outside vocabulary of {model.cfg.vocab_size}")
    model.eval()
    session = DecodeSession(model, tau=tau)
    gen = torch.Generator().manual_seed(seed)
    prompt_traces = []
    for i in ids[:-1]:
        _, tr = session.feed(i)
        prompt_traces.append(tr)
    out: list[int] = []
    traces: list[DecodeTrace] = []
    last = ids[-1]
    for _ in range(max_new_tokens):
        last, tr = decode_token(session, last, temperature, gen)
        traces.append(tr)
        out.append(last)
    return Generation(ids, out, tokenizer.decode(out), traces, prompt_traces)


def teacher_forced(model: LatentLM, tokens: Sequence[int], targets: Optional[Sequence[int]] = None,
                   tau: Optional[float] = None) -> tuple[torch.Tensor, list[DecodeTrace]]:
    """Decode a known sequence position by position; returns logits ``[L, V]`` and traces."""
    model.eval()
    session = DecodeSession(model, capacity=max(len(tokens), 1), tau=tau)
    logits, traces = [], []
    for i, tok in enumerate(tokens):
        lg, tr = session.feed(int(tok), None if targets is None else int(targets[i]))
        logits.append(lg)
        traces.append(tr)
    return torch.stack(logits), traces


def write_trace(path: str | Path, traces: Sequence[DecodeTrace]) -> None:
    with open(path, "w") as fh:
        for tr in traces:
            fh.write(json.dumps(tr.record()) + "\n")
