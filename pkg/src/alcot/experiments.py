"""Desk-scale ablation runs: loss strength, latent budget and router kind.

Every run shares corpus, seed, optimizer schedule and step count; only the
swept knob differs. Results are cached as JSON next to the checkpoints so
the acceptance suite and the CLI can reuse them.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from alcot import checkpoint as ckpt
from alcot.config import AdaptiveLossConfig, ModelConfig, TrainConfig
from alcot.data import ByteTokenizer, make_windows, synthetic_text
from alcot.trainer import evaluate, train

log = logging.getLogger(__name__)


@dataclass
class ToyScale:
    """Size of the ablation runs. ``default`` fits a single CPU core in well under an hour."""

    train_chars: int = 1_200_000
    eval_chars: int = 60_000
    seq_len: int = 65
    batch_size: int = 16
    steps: int = 1500
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 172
    lr: float = 3e-3
    seed: int = 0
    data_seed: int = 1234

    @classmethod
    def smoke(cls) -> "ToyScale":
        return cls(train_chars=80_000, eval_chars=8_000, steps=30)


@dataclass
class RunSpec:
    name: str
    max_latent: int
    lam: float = 0.4
    beta: float = 10.0
    router_kind: str = "shared-affine"


ABLATIONS = [
    RunSpec("lmax0", max_latent=0),
    RunSpec("lmax2", max_latent=2),
    RunSpec("lmax5", max_latent=5),  # doubles as the shared-affine router run at lam=0.4
    RunSpec("lam0.1", max_latent=5, lam=0.1),
    RunSpec("lam0.8", max_latent=5, lam=0.8),
    RunSpec("no-adaptive", max_latent=5, router_kind="none"),
]


@dataclass
class RunResult:
    name: str
    spec: dict
    eval_ce: float
    eval_prune_ratio: float | None
    eval_mean_len: float
    train_ce_tail: float
    train_prune_ratio_tail: float | None
    flops_cum: float
    elapsed: float
    checkpoint: str = ""
    extra: dict = field(default_factory=dict)


def toy_windows(scale: ToyScale) -> tuple[np.ndarray, np.ndarray]:
    tok = ByteTokenizer()
    train_ids = np.array(tok.encode(synthetic_text(scale.train_chars, scale.data_seed)))
    eval_ids = np.array(tok.encode(synthetic_text(scale.eval_chars, scale.data_seed + 1)))
    return make_windows(train_ids, scale.seq_len), make_windows(eval_ids, scale.seq_len)


def train_config(spec: RunSpec, scale: ToyScale, out_dir: Path) -> TrainConfig:
    model = ModelConfig(
        vocab_size=ByteTokenizer.vocab_size, d_model=scale.d_model, n_layers=scale.n_layers,
        n_heads=scale.n_heads, d_ff=scale.d_ff, max_latent=spec.max_latent,
        router_kind=spec.router_kind,
    )
    return TrainConfig(
        out_dir=str(out_dir / spec.name), batch_size=scale.batch_size, seq_len=scale.seq_len,
        steps=scale.steps, lr=scale.lr, seed=scale.seed, log_interval=10,
        model=model, loss=AdaptiveLossConfig(lam=spec.lam, beta=spec.beta),
    )


_TRAINING_MODULES = ("config", "data", "halting", "mask", "model", "objective", "trainer")


def code_fingerprint() -> str:
    """Hash of the sources that influence a training run; cached results must match it."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for name in _TRAINING_MODULES:
        h.update((root / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


def _tail(values, frac: float = 0.1):
    values = [v for v in values if v is not None]
    if not values:
        return None
    n = max(1, int(len(values) * frac))
    return float(np.mean(values[-n:]))


def run_one(spec: RunSpec, scale: ToyScale, out_dir: Path, windows=None, eval_windows=None,
            force: bool = False) -> RunResult:
    out_dir = Path(out_dir)
    cache = out_dir / spec.name / "result.json"
    if cache.exists() and not force:
        stored = json.loads(cache.read_text())
        fresh = (stored.get("scale") == asdict(scale) and stored.get("spec") == asdict(spec)
                 and stored.get("code") == code_fingerprint())
        if fresh:
            stored.pop("scale")
            stored.pop("code")
            return RunResult(**stored)
    if windows is None:
        windows, eval_windows = toy_windows(scale)
    cfg = train_config(spec, scale, out_dir)
    result = train(cfg, windows=windows)
    ev = evaluate(result.model, eval_windows, cfg.loss, scale.batch_size)
    run = RunResult(
        name=spec.name, spec=asdict(spec), eval_ce=ev["ce"], eval_prune_ratio=ev["prune_ratio"],
        eval_mean_len=ev["mean_len"],
        train_ce_tail=_tail([m.ce for m in result.metrics]),
        train_prune_ratio_tail=_tail([m.prune_ratio for m in result.metrics]),
        flops_cum=result.flops_cum, elapsed=result.elapsed, checkpoint=str(result.checkpoint),
    )
    cache.write_text(json.dumps({**asdict(run), "scale": asdict(scale), "code": code_fingerprint()}, indent=2))
    log.info("%s: eval ce %.4f prune %s (%.0fs)", spec.name, run.eval_ce, run.eval_prune_ratio, run.elapsed)
    return run


def run_ablations(scale: ToyScale, out_dir: str | Path, specs=None, force: bool = False) -> dict[str, RunResult]:
    windows, eval_windows = toy_windows(scale)
    return {s.name: run_one(s, scale, Path(out_dir), windows, eval_windows, force)
            for s in (specs or ABLATIONS)}


def load_run_model(run: RunResult):
    return ckpt.load_model(run.checkpoint)


def scale_from_dict(d: dict) -> ToyScale:
    return ToyScale(**{**asdict(ToyScale()), **d})


def with_overrides(scale: ToyScale, **kw) -> ToyScale:
    s = copy.deepcopy(scale)
    for k, v in kw.items():
        setattr(s, k, v)
    return s
