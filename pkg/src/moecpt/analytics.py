"""Routing analytics over recorded top-k decisions.

All metrics are counting-based and take ``selected`` arrays of shape
(N, k): row ``n`` holds the experts chosen for token ``n`` in one layer.

* MRI: the largest fraction of a window's tokens sent to one expert.
* Router saturation: mean per-token overlap |A ∩ B| / k between two
  checkpoints' choices on the same token sequence.
* Vocabulary specialization: for token id x and expert i, the share of
  x's routings (occurrences * k) that went to i. The mapping alpha sends
  each observed token id to its most-used expert (ties to the lower id).
* CVS: average, over token ids, of one checkpoint's specialization at the
  expert another checkpoint's mapping assigns to that id.
* Co-activation: C[i, j] = (# tokens choosing both i and j) / (# tokens
  choosing i). Undefined rows (expert never chosen) are NaN.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ConfigError, UnsupportedMetric
from .traces import TraceTable


def _check_selected(selected: np.ndarray, num_experts: int) -> np.ndarray:
    sel = np.asarray(selected)
    if sel.ndim != 2 or sel.shape[0] == 0:
        raise ConfigError("routing window is empty")
    if sel.min() < 0 or sel.max() >= num_experts:
        raise ConfigError("expert id outside [0, E)")
    return sel


def expert_load(selected: np.ndarray, num_experts: int) -> np.ndarray:
    sel = _check_selected(selected, num_experts)
    return np.bincount(sel.ravel(), minlength=num_experts)


def mri(selected: np.ndarray, num_experts: int) -> float:
    """Maximum routing imbalance of one (step, layer) window."""
    counts = expert_load(selected, num_experts)
    return float(counts.max() / selected.shape[0])


@dataclass
class MriReport:
    # (step, layer) -> mri
    values: dict[tuple[int, int], float]
    num_experts: int
    k: int

    def layers(self) -> list[int]:
        return sorted({l for _, l in self.values})

    def steps(self) -> list[int]:
        return sorted({s for s, _ in self.values})

    def summary(self, step: int) -> dict[str, float]:
        vals = np.array([v for (s, _), v in sorted(self.values.items()) if s == step])
        return {"median": float(np.median(vals)), "min": float(vals.min()), "max": float(vals.max())}


def mri_report(table, num_experts: int) -> MriReport:
    """MRI for every (step, layer) window of a trace table."""
    vals = {}
    for step, layer, sub in table.windows():
        vals[(step, layer)] = mri(sub.experts, num_experts)
    return MriReport(vals, num_experts, table.k)


# ---------------------------------------------------------------- saturation


def check_aligned(tokens_a: np.ndarray, tokens_b: np.ndarray) -> None:
    a, b = np.asarray(tokens_a), np.asarray(tokens_b)
    if a.shape != b.shape:
        raise AlignmentError(f"traces cover {len(a)} vs {len(b)} tokens", position=min(len(a), len(b)))
    bad = np.nonzero(a != b)[0]
    if bad.size:
        p = int(bad[0])
        raise AlignmentError(f"token ids diverge at position {p}: {a[p]} vs {b[p]}", position=p)


def router_saturation(selected_h: np.ndarray, selected_j: np.ndarray, k: int | None = None,
                      tokens_h: np.ndarray | None = None, tokens_j: np.ndarray | None = None) -> float:
    """Mean over tokens of |E_h ∩ E_j| / k."""
    a, b = np.asarray(selected_h), np.asarray(selected_j)
    if tokens_h is not None or tokens_j is not None:
        check_aligned(tokens_h, tokens_j)
    if a.shape != b.shape:
        raise AlignmentError(f"selection shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        raise ConfigError("empty traces")
    k = a.shape[1] if k is None else k
    # rows hold distinct ids, so pairwise equality counts the intersection;
    # one integer division keeps the result correctly rounded
    inter = int((a[:, :, None] == b[:, None, :]).sum())
    return inter / (a.shape[0] * k)


def saturation_by_layer(table_h, table_j) -> dict[int, float]:
    out = {}
    for layer in table_h.layers():
        a, b = _eval_order(table_h.select(layer=layer)), _eval_order(table_j.select(layer=layer))
        out[layer] = router_saturation(a.experts, b.experts, a.k, a.token, b.token)
    return out


def _eval_order(t):
    order = np.lexsort((t.pos, t.step))
    return TraceTable(t.step[order], t.layer[order], t.pos[order], t.token[order],
                      t.experts[order], t.gates[order])


# ---------------------------------------------------------------- vocabulary


@dataclass
class VocabSpecReport:
    counts: np.ndarray          # V x E routings of token x to expert i
    occurrences: np.ndarray     # V
    k: int
    specialization: np.ndarray  # V x E; NaN rows for unobserved ids
    alpha: np.ndarray           # V; -1 for unobserved ids
    expert_mean: np.ndarray     # E; NaN when no id maps to the expert
    layer_mean: float
    unobserved: int

    @property
    def observed(self) -> np.ndarray:
        return self.occurrences > 0


def vocab_specialization(tokens: np.ndarray, selected: np.ndarray, vocab_size: int,
                         num_experts: int) -> VocabSpecReport:
    sel = _check_selected(selected, num_experts)
    tokens = np.asarray(tokens)
    if tokens.shape[0] != sel.shape[0]:
        raise ConfigError("tokens and selections differ in length")
    if tokens.min() < 0 or tokens.max() >= vocab_size:
        raise ConfigError("token id outside vocabulary")
    k = sel.shape[1]
    counts = np.zeros((vocab_size, num_experts), dtype=np.int64)
    np.add.at(counts, (np.repeat(tokens, k), sel.ravel()), 1)
    occ = np.bincount(tokens, minlength=vocab_size)
    obs = occ > 0
    spec = np.full((vocab_size, num_experts), np.nan)
    spec[obs] = counts[obs] / (occ[obs, None] * k)
    alpha = np.full(vocab_size, -1, dtype=np.int64)
    alpha[obs] = np.argmax(counts[obs], axis=1)  # first max wins
    best = np.full(vocab_size, np.nan)
    best[obs] = spec[obs, alpha[obs]]
    expert_mean = np.full(num_experts, np.nan)
    for e in range(num_experts):
        m = alpha == e
        if m.any():
            expert_mean[e] = best[m].mean()
    layer_mean = float(np.nanmean(expert_mean))
    return VocabSpecReport(counts, occ, k, spec, alpha, expert_mean, layer_mean,
                           int(vocab_size - obs.sum()))


@dataclass
class CvsResult:
    value: float
    tokens_used: int
    excluded: int  # ids mapped by the reference but unseen in the compared traces


def cvs(mapping: VocabSpecReport, compared: VocabSpecReport, normalize: str = "vocab") -> CvsResult:
    """Specialization of ``compared`` at the experts chosen by ``mapping``.

    ``normalize="vocab"`` averages over token ids observed in both;
    ``normalize="experts"`` sums over those ids and divides by E.
    """
    both = (mapping.alpha >= 0) & compared.observed
    excluded = int(((mapping.alpha >= 0) & ~compared.observed).sum())
    ids = np.nonzero(both)[0]
    if ids.size == 0:
        raise ConfigError("no token id observed in both traces")
    vals = compared.specialization[ids, mapping.alpha[ids]].tolist()
    if normalize == "vocab":
        value = math.fsum(vals) / len(vals)
    elif normalize == "experts":
        value = math.fsum(vals) / compared.specialization.shape[1]
    else:
        raise ConfigError(f"unknown CVS normalisation {normalize!r}")
    return CvsResult(value, int(ids.size), excluded)


def cvs_by_layer(table_map, table_cmp, vocab_size: int, num_experts: int) -> dict[int, CvsResult]:
    out = {}
    for layer in table_map.layers():
        a, b = table_map.select(layer=layer), table_cmp.select(layer=layer)
        out[layer] = cvs(vocab_specialization(a.token, a.experts, vocab_size, num_experts),
                         vocab_specialization(b.token, b.experts, vocab_size, num_experts))
    return out


# ---------------------------------------------------------------- co-activation


@dataclass
class CoactReport:
    matrix: np.ndarray        # E x E, NaN rows for inactive experts
    activations: np.ndarray   # E
    inactive: list[int] = field(default_factory=list)


def coactivation(selected: np.ndarray, num_experts: int) -> CoactReport:
    sel = _check_selected(selected, num_experts)
    if sel.shape[1] < 2:
        raise UnsupportedMetric("expert co-activation needs k >= 2")
    onehot = np.zeros((sel.shape[0], num_experts), dtype=np.int64)
    np.put_along_axis(onehot, sel, 1, axis=1)
    joint = onehot.T @ onehot
    act = np.diag(joint).copy()
    C = np.full((num_experts, num_experts), np.nan)
    live = act > 0
    C[live] = joint[live] / act[live, None]
    return CoactReport(C, act, [int(i) for i in np.nonzero(~live)[0]])


@dataclass
class CoactDiff:
    diff: np.ndarray
    median: float
    max: float
    p90: float
    undefined: int


def coact_diff(c1, c2) -> CoactDiff:
    a = c1.matrix if isinstance(c1, CoactReport) else np.asarray(c1, float)
    b = c2.matrix if isinstance(c2, CoactReport) else np.asarray(c2, float)
    if a.shape != b.shape:
        raise ConfigError("co-activation matrices differ in shape")
    d = np.abs(a - b)
    vals = d[np.isfinite(d)]
    if vals.size == 0:
        return CoactDiff(d, float("nan"), float("nan"), float("nan"), int(d.size))
    return CoactDiff(d, float(np.median(vals)), float(vals.max()),
                     float(np.percentile(vals, 90)), int(d.size - vals.size))
