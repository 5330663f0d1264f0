"""One-stage pretraining loop, evaluation and FLOPs bookkeeping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from alcot import checkpoint as ckpt
from alcot.config import AdaptiveLossConfig, TrainConfig
from alcot.data import BatchSampler, load_corpus, split_batch
from alcot.halting import prune_ratio
from alcot.model import LatentLM, count_active_flops, vanilla_flops
from alcot.objective import ce_loss, objective

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay to ``min_lr_ratio * lr``."""
    warmup = int(cfg.warmup_frac * cfg.steps)
    if warmup and step < warmup:
        return cfg.lr * (step + 1) / warmup
    span = max(cfg.steps - warmup, 1)
    progress = min((step - warmup) / span, 1.0)
    floor = cfg.lr * cfg.min_lr_ratio
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * progress))


def build_optimizer(model: LatentLM, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for _, p in model.named_parameters():
        (decay if p.ndim >= 2 else no_decay).append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def _optimizer_blobs(opt: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    blobs = {}
    for idx, state in opt.state_dict()["state"].items():
        for key, value in state.items():
            blobs[f"optim.{idx}.{key}"] = torch.as_tensor(value)
    return blobs


def _restore_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor]) -> None:
    sd = opt.state_dict()
    state: dict[int, dict[str, torch.Tensor]] = {}
    for name, value in tensors.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = value.clone()
    sd["state"] = state
    opt.load_state_dict(sd)


@dataclass
class StepMetrics:
    step: int
    tokens: int
    ce: float
    adaptive: float
    prune_ratio: Optional[float]
    mean_len: float
    active_counts: list[int]
    flops_step: float
    flops_cum: float
    lr: float

    def record(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainResult:
    model: LatentLM
    metrics: list[StepMetrics] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    flops_cum: float = 0.0
    tokens: int = 0
    elapsed: float = 0.0


def batch_stats(out, max_latent: int) -> tuple[float, Optional[float]]:
    lengths = out.latent_length.reshape(-1)
    mean_len = float(lengths.to(torch.float64).mean())
    return mean_len, (prune_ratio(lengths, max_latent) if max_latent >= 1 else None)


@torch.no_grad()
def evaluate(model: LatentLM, windows: np.ndarray, loss_cfg: AdaptiveLossConfig,
             batch_size: int = 16, vanilla: bool = False) -> dict:
    """Mean CE, perplexity and halting stats over ``windows`` in file order."""
    model.eval()
    ce_sum, n_tok, len_sum = 0.0, 0, 0.0
    for start in range(0, len(windows), batch_size):
        x, y = split_batch(windows[start: start + batch_size])
        if vanilla:
            ce = ce_loss(model.forward_vanilla(x), y, reduction="sum")
        else:
            out = model.unroll(x)
            ce = ce_loss(out.logits, y, reduction="sum")
            len_sum += float(out.latent_length.to(torch.float64).sum())
        ce_sum += float(ce)
        n_tok += y.numel()
    mean_ce = ce_sum / n_tok
    mean_len = len_sum / n_tok
    l_max = model.cfg.max_latent
    return {
        "ce": mean_ce,
        "ppl": math.exp(mean_ce),
        "mean_len": mean_len,
        "prune_ratio": (1.0 - mean_len / l_max) if (l_max >= 1 and not vanilla) else None,
        "tokens": n_tok,
    }


def evaluate_ppl(checkpoint_path: str | Path, corpus_path: str | Path, batch_size: int = 16,
                 seq_len: Optional[int] = None) -> float:
    """Perplexity of a checkpoint over a corpus, using the adaptive path."""
    c = ckpt.load(checkpoint_path)
    model = c.build_model()
    length = seq_len or (c.train_config.seq_len if c.train_config else 65)
    windows = load_corpus(corpus_path, length, model.cfg.vocab_size)
    return evaluate(model, windows, c.loss_config, batch_size)["ppl"]


def train(cfg: TrainConfig, resume: Optional[str | Path] = None,
          windows: Optional[np.ndarray] = None, eval_windows: Optional[np.ndarray] = None,
          write_files: bool = True, on_step: Optional[Callable[[StepMetrics], None]] = None) -> TrainResult:
    """Run the configured number of optimization steps.

    ``windows``/``eval_windows`` override the corpus paths (handy for
    tests). With ``write_files`` the metrics log, periodic checkpoints and a
    final checkpoint go to ``cfg.out_dir``.
    """
    mcfg = cfg.model
    if windows is None:
        windows = load_corpus(cfg.corpus, cfg.seq_len, mcfg.vocab_size)
    if eval_windows is None and cfg.eval_corpus:
        eval_windows = load_corpus(cfg.eval_corpus, cfg.seq_len, mcfg.vocab_size)
    if windows.shape[1] != cfg.seq_len:
        raise ValueError(f"windows have length {windows.shape[1]}, config says {cfg.seq_len}")

    torch.manual_seed(cfg.seed)
    model = LatentLM(mcfg)
    opt = build_optimizer(model, cfg)
    start_step, flops_cum, tokens_seen = 0, 0.0, 0
    if resume is not None:
        c = ckpt.load(resume)
        model.load_state_dict(c.model_state())
        _restore_optimizer(opt, c.tensors)
        start_step = int(c.meta["step"])
        flops_cum = float(c.meta["flops_cum"])
        tokens_seen = int(c.meta["tokens"])

    sampler = BatchSampler(len(windows), cfg.batch_size, cfg.seed, cfg.shuffle)
    out_dir = Path(cfg.out_dir)
    log_fh = None
    if write_files:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.jsonl", "a" if resume else "w")

    result = TrainResult(model=model, flops_cum=flops_cum, tokens=tokens_seen)
    t0 = time.perf_counter()

    def save(step: int, name: str) -> Path:
        path = out_dir / name
        meta = {"step": step, "flops_cum": repr(result.flops_cum), "tokens": result.tokens}
        ckpt.save_model(path, model, cfg.loss, cfg, extra=_optimizer_blobs(opt), meta=meta)
        return path

    try:
        for step in range(start_step, cfg.steps):
            model.train()
            x, y = split_batch(windows[sampler.indices(step)])
            lr = lr_at(step, cfg)
            for group in opt.param_groups:
                group["lr"] = lr

            if cfg.vanilla:
                ce = ce_loss(model.forward_vanilla(x), y, reduction=cfg.loss.ce_reduction)
                adaptive = torch.zeros((), dtype=ce.dtype)
                loss = ce
                counts = [y.numel()]
                mean_len, pr = 0.0, None
                flops_step = vanilla_flops(y.numel(), mcfg)
            else:
                out = model.unroll(x, y)
                loss, ce, adaptive = objective(out, y, cfg.loss)
                counts = out.active_counts
                mean_len, pr = batch_stats(out, mcfg.max_latent)
                flops_step = count_active_flops(counts, mcfg)

            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}: ce={float(ce.detach())!r} "
                                       f"adaptive={float(adaptive.detach())!r} lr={lr:.3g}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()

            result.flops_cum += flops_step
            result.tokens += y.numel()
            m = StepMetrics(step + 1, result.tokens, float(ce.detach()), float(adaptive.detach()), pr, mean_len,
                            list(counts), flops_step, result.flops_cum, lr)
            if on_step:
                on_step(m)
            if (step + 1) % cfg.log_interval == 0 or step + 1 == cfg.steps:
                result.metrics.append(m)
                if log_fh:
                    log_fh.write(json.dumps(m.record()) + "\n")
                    log_fh.flush()
                log.info("step %d ce %.4f adapt %.4f len %.2f", step + 1, m.ce, m.adaptive, mean_len)
            if eval_windows is not None and cfg.eval_interval and (step + 1) % cfg.eval_interval == 0:
                ev = evaluate(model, eval_windows[: cfg.eval_batches * cfg.batch_size], cfg.loss,
                              cfg.batch_size, cfg.vanilla)
                ev["step"] = step + 1
                result.evals.append(ev)
            if write_files and cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
                save(step + 1, f"ckpt_{step + 1:06d}.alck")
        if write_files:
            result.checkpoint = save(cfg.steps, "final.alck")
    finally:
        if log_fh:
            log_fh.close()
    result.elapsed = time.perf_counter() - t0
    model.eval()
    return result
