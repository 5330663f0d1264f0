"""Analyses of where the model spends latent steps.

* ``probe_gain``: with pruning off, how much one more latent step moves the
  target probability, bucketed by the current target probability.
* ``length_vs_ptarget`` / ``difficulty_buckets``: how executed latent
  length relates to confidence and to token cross-entropy.
* ``case_study_report``: per-token latent length rendered as colored text.
"""

from __future__ import annotations

import html
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import stats

from alcot.data import ByteTokenizer, split_batch
from alcot.model import LatentLM


@dataclass
class TokenReport:
    token_id: int  # input token at this position
    target_id: int
    position: int
    window: int
    ce: float  # nats, of the final mixed prediction
    latent_length: int
    p_target: list[float] = field(default_factory=list)  # per executed step

    @property
    def p_final(self) -> float:
        return math.exp(-self.ce)


@torch.no_grad()
def collect_reports(model: LatentLM, windows: np.ndarray, batch_size: int = 16,
                    tau: Optional[float] = None, prune: bool = True) -> list[TokenReport]:
    model.eval()
    reports = []
    for start in range(0, len(windows), batch_size):
        x, y = split_batch(windows[start: start + batch_size])
        out = model.unroll(x, y, tau=tau, prune=prune)
        ce = torch.nn.functional.cross_entropy(out.logits.transpose(1, 2), y, reduction="none")
        for b in range(x.shape[0]):
            for t in range(x.shape[1]):
                ks = int(out.k_star[b, t])
                reports.append(TokenReport(
                    token_id=int(x[b, t]), target_id=int(y[b, t]), position=t, window=start + b,
                    ce=float(ce[b, t]), latent_length=ks - 1,
                    p_target=[float(p) for p in out.p_target[b, t, :ks]],
                ))
    return reports


# -- adaptive-gain probe ------------------------------------------------------

@dataclass
class ProbeResult:
    edges: np.ndarray
    rows: list[dict]  # step, bucket, lo, hi, mean_gain, count; empty buckets omitted
    p_current: np.ndarray  # flat per (token, step) samples
    gain: np.ndarray
    step: np.ndarray

    def table(self, step: int | None = None) -> list[dict]:
        return [r for r in self.rows if step is None or r["step"] == step]


def confidence_edges(n_bins: int = 10) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_bins + 1)


def _bucketize(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


@torch.no_grad()
def probe_gain(model: LatentLM, windows: np.ndarray, edges: Optional[np.ndarray] = None,
               batch_size: int = 16) -> ProbeResult:
    """Mean ``p^(k+1) - p^(k)`` per (step k, bucket of p^(k)), all steps executed.

    Uses every step ``k < K_max``; with ``K_max = 1`` the result is empty.
    """
    edges = confidence_edges() if edges is None else np.asarray(edges, dtype=np.float64)
    model.eval()
    cur, gain, steps = [], [], []
    for start in range(0, len(windows), batch_size):
        x, y = split_batch(windows[start: start + batch_size])
        out = model.unroll(x, y, prune=False)
        p = out.p_target.to(torch.float64).reshape(-1, out.p_target.shape[-1]).numpy()
        for k in range(p.shape[1] - 1):
            cur.append(p[:, k])
            gain.append(p[:, k + 1] - p[:, k])
            steps.append(np.full(p.shape[0], k + 1))
    if not cur:
        empty = np.zeros(0)
        return ProbeResult(edges, [], empty, empty, empty.astype(int))
    cur_a, gain_a, step_a = np.concatenate(cur), np.concatenate(gain), np.concatenate(steps)
    bucket = _bucketize(cur_a, edges)
    rows = []
    for k in np.unique(step_a):
        for bi in range(len(edges) - 1):
            sel = (step_a == k) & (bucket == bi)
            n = int(sel.sum())
            if n == 0:
                continue
            rows.append({"step": int(k), "bucket": bi, "lo": float(edges[bi]), "hi": float(edges[bi + 1]),
                         "mean_gain": float(gain_a[sel].mean()), "count": n})
    return ProbeResult(edges, rows, cur_a, gain_a, step_a)


def bucket_permutation_test(values: np.ndarray, groups: np.ndarray, n_perm: int = 1000,
                            seed: int = 0) -> float:
    """p-value for "group means differ", using the count-weighted spread of group means."""
    values = np.asarray(values, dtype=np.float64)
    groups = np.asarray(groups)
    labels = np.unique(groups)
    if len(labels) < 2:
        return 1.0

    def spread(g):
        grand = values.mean()
        return sum((g == lab).sum() * (values[g == lab].mean() - grand) ** 2 for lab in labels)

    observed = spread(groups)
    rng = np.random.default_rng(seed)
    hits = sum(spread(rng.permutation(groups)) >= observed for _ in range(n_perm))
    return (hits + 1) / (n_perm + 1)


# -- length / difficulty curves ------------------------------------------------

def length_vs_ptarget(reports: Sequence[TokenReport]) -> list[dict]:
    """Mean final target probability grouped by executed latent length."""
    groups: dict[int, list[float]] = {}
    for r in reports:
        groups.setdefault(r.latent_length, []).append(r.p_final)
    return [{"latent_length": k, "mean_p_target": float(np.mean(v)), "count": len(v)}
            for k, v in sorted(groups.items())]


def difficulty_edges(ces: np.ndarray, n_bins: int = 10, floor: float = 1e-4) -> np.ndarray:
    """Log-spaced CE edges over the observed range."""
    ces = np.asarray(ces, dtype=np.float64)
    lo, hi = max(float(ces.min()), floor), max(float(ces.max()), floor)
    if hi <= lo * (1 + 1e-12):
        return np.array([lo, lo])
    return np.geomspace(lo, hi, n_bins + 1)


def difficulty_buckets(reports: Sequence[TokenReport], edges: Optional[np.ndarray] = None,
                       n_bins: int = 10) -> list[dict]:
    """Mean latent length per CE bucket; values outside the edges land in the end buckets."""
    if not reports:
        return []
    ces = np.array([r.ce for r in reports])
    lengths = np.array([r.latent_length for r in reports], dtype=np.float64)
    edges = difficulty_edges(ces, n_bins) if edges is None else np.asarray(edges, dtype=np.float64)
    bucket = _bucketize(ces, edges) if len(edges) > 2 else np.zeros(len(ces), dtype=int)
    rows = []
    for bi in range(max(len(edges) - 1, 1)):
        sel = bucket == bi
        if sel.any():
            rows.append({"bucket": bi, "lo": float(edges[bi]), "hi": float(edges[min(bi + 1, len(edges) - 1)]),
                         "mean_latent_length": float(lengths[sel].mean()), "count": int(sel.sum())})
    return rows


def trend(rows: Sequence[dict], x: str, y: str) -> float:
    """Spearman rank correlation between two columns of a table."""
    xs, ys = [r[x] for r in rows], [r[y] for r in rows]
    if len(set(xs)) < 2 or len(set(ys)) < 2:
        return float("nan")  # undefined for a constant column
    return float(stats.spearmanr(xs, ys)[0])


def write_table(path: str | Path, rows: Sequence[dict]) -> None:
    """Tab-separated table with a header line."""
    rows = list(rows)
    with open(path, "w") as fh:
        if not rows:
            return
        keys = list(rows[0])
        fh.write("\t".join(keys) + "\n")
        for r in rows:
            fh.write("\t".join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k]) for k in keys) + "\n")


# -- case study ------------------------------------------------------------------

def color_scale(max_latent: int) -> list[str]:
    """One hex color per latent length 0..l_max, pale to saturated."""
    n = max_latent + 1
    colors = []
    for i in range(n):
        f = i / max(n - 1, 1)
        r = int(round(255 - f * (255 - 200)))
        g = int(round(250 - f * (250 - 40)))
        b = int(round(235 - f * (235 - 40)))
        colors.append(f"#{r:02x}{g:02x}{b:02x}")
    return colors


def _ansi_bg(hex_color: str) -> str:
    r, g, b = (int(hex_color[i: i + 2], 16) for i in (1, 3, 5))
    return f"\x1b[48;2;{r};{g};{b}m\x1b[38;2;0;0;0m"


@dataclass
class CaseStudy:
    tokens: list[int]
    latent_lengths: list[int]
    legend: list[tuple[int, str]]
    ansi: str
    html: str


@torch.no_grad()
def case_study_report(model: LatentLM, text: str, out_path: Optional[str | Path] = None,
                      tau: Optional[float] = None, prune: bool = True) -> CaseStudy:
    """Color each token by the latent length the model ran before predicting its successor."""
    tok = ByteTokenizer()
    ids = tok.encode(text)
    if not ids:
        ids = [tok.BOS]
    model.eval()
    x = torch.tensor([ids])
    out = model.unroll(x, tau=tau, prune=prune)
    lengths = [int(v) for v in out.latent_length[0]]
    colors = color_scale(model.cfg.max_latent)
    legend = list(enumerate(colors))

    reset = "\x1b[0m"
    ansi_parts = [_ansi_bg(colors[l]) + tok.token_text(i).replace("\n", "↵") + reset
                  for i, l in zip(ids, lengths)]
    ansi_legend = " ".join(_ansi_bg(c) + f" {l} " + reset for l, c in legend)
    ansi = "".join(ansi_parts) + "\n\nlatent steps: " + ansi_legend + "\n"

    spans = []
    for i, l in zip(ids, lengths):
        ch = html.escape(tok.token_text(i))
        if ch == "\n":
            spans.append("<br>")
            continue
        ch = "&nbsp;" if ch == " " else ch
        spans.append(f'<span class="t" style="background:{colors[l]}" title="l={l}">{ch}</span>')
    legend_html = "".join(f'<span class="t" style="background:{c}">&nbsp;{l}&nbsp;</span>' for l, c in legend)
    page = (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>latent steps per token</title>"
        "<style>body{font-family:monospace;line-height:1.8}.t{padding:1px 0}</style></head><body>\n"
        f"<p>{''.join(spans)}</p>\n<p>latent steps (l_max={model.cfg.max_latent}): {legend_html}</p>\n"
        "</body></html>\n"
    )
    if out_path is not None:
        Path(out_path).write_text(page)
    return CaseStudy(ids, lengths, legend, ansi, page)
