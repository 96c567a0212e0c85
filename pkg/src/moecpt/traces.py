"""Routing trace logs.

One line per routing decision, tab separated, in this field order::

    step  layer  pos  token  experts  gates  [probs]

``experts`` and ``gates`` are comma-joined lists of length k (best expert
first); ``probs`` is the optional comma-joined raw probability vector of
length E. ``pos`` is the flat token index inside the batch or eval
window. Gate/probability values are written with ``GATE_DIGITS``
significant digits. Files ending in ``.gz`` are gzip-compressed; the
line format is the same.
"""
from __future__ import annotations

import gzip
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError

GATE_DIGITS = 6


@dataclass
class TraceRecord:
    step: int
    layer: int
    pos: int
    token: int
    experts: tuple[int, ...]
    gates: tuple[float, ...]
    probs: tuple[float, ...] | None = None

    def to_line(self) -> str:
        cols = [str(self.step), str(self.layer), str(self.pos), str(self.token),
                ",".join(map(str, self.experts)),
                ",".join(f"{g:.{GATE_DIGITS}g}" for g in self.gates)]
        if self.probs is not None:
            cols.append(",".join(f"{p:.{GATE_DIGITS}g}" for p in self.probs))
        return "\t".join(cols)

    @classmethod
    def from_line(cls, line: str) -> "TraceRecord":
        cols = line.rstrip("\n").split("\t")
        if len(cols) not in (6, 7):
            raise ConfigError(f"malformed trace line: {line[:80]!r}")
        probs = tuple(float(v) for v in cols[6].split(",")) if len(cols) == 7 else None
        return cls(int(cols[0]), int(cols[1]), int(cols[2]), int(cols[3]),
                   tuple(int(v) for v in cols[4].split(",")),
                   tuple(float(v) for v in cols[5].split(",")), probs)


def _open(path: str | Path, mode: str):
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps compressed bytes reproducible
        raw = open(path, mode + "b")
        gz = gzip.GzipFile(fileobj=raw, mode=mode + "b", mtime=0, filename="")
        return io.TextIOWrapper(gz, encoding="utf-8", newline="\n"), raw
    return open(path, mode, encoding="utf-8", newline="\n"), None


def format_block(step: int, layer: int, tokens: np.ndarray, selected: np.ndarray,
                 gates: np.ndarray, probs: np.ndarray | None = None, pos_offset: int = 0) -> str:
    """Lines for every token of one (step, layer) routing call."""
    fmt = f"{{:.{GATE_DIGITS}g}}"
    exp_s = [",".join(map(str, row)) for row in selected.tolist()]
    gate_s = [",".join(fmt.format(g) for g in row) for row in gates.tolist()]
    head = f"{step}\t{layer}\t"
    tok = tokens.tolist()
    if probs is None:
        lines = [f"{head}{i + pos_offset}\t{tok[i]}\t{exp_s[i]}\t{gate_s[i]}" for i in range(len(tok))]
    else:
        prob_s = [",".join(fmt.format(p) for p in row) for row in probs.tolist()]
        lines = [f"{head}{i + pos_offset}\t{tok[i]}\t{exp_s[i]}\t{gate_s[i]}\t{prob_s[i]}"
                 for i in range(len(tok))]
    return "\n".join(lines) + "\n"


class TraceWriter:
    def __init__(self, path: str | Path, include_probs: bool = False) -> None:
        self.path = Path(path)
        self.include_probs = include_probs
        self._fh, self._raw = _open(self.path, "w")

    def write_outcome(self, step: int, layer: int, tokens: np.ndarray, outcome,
                      limit: int | None = None, pos_offset: int = 0) -> None:
        """Write the first ``limit`` (default: all) decisions of ``outcome``."""
        n = len(outcome.selected) if limit is None else limit
        probs = outcome.raw_probs[:n] if self.include_probs else None
        self._fh.write(format_block(step, layer, np.asarray(tokens).ravel()[:n], outcome.selected[:n],
                                    outcome.gate_weights[:n], probs, pos_offset))

    def write(self, record: TraceRecord) -> None:
        self._fh.write(record.to_line() + "\n")

    def close(self) -> None:
        self._fh.close()
        if self._raw is not None:
            self._raw.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def iter_records(path: str | Path) -> Iterator[TraceRecord]:
    fh, raw = _open(path, "r")
    try:
        for line in fh:
            if line.strip():
                yield TraceRecord.from_line(line)
    finally:
        fh.close()
        if raw is not None:
            raw.close()


@dataclass
class TraceTable:
    """Columnar view of a trace log."""

    step: np.ndarray
    layer: np.ndarray
    pos: np.ndarray
    token: np.ndarray
    experts: np.ndarray  # N x k
    gates: np.ndarray    # N x k

    def __len__(self) -> int:
        return len(self.step)

    @property
    def k(self) -> int:
        return self.experts.shape[1]

    def layers(self) -> list[int]:
        return sorted(set(self.layer.tolist()))

    def steps(self) -> list[int]:
        return sorted(set(self.step.tolist()))

    def select(self, layer: int | None = None, step: int | None = None) -> "TraceTable":
        m = np.ones(len(self), bool)
        if layer is not None:
            m &= self.layer == layer
        if step is not None:
            m &= self.step == step
        return TraceTable(self.step[m], self.layer[m], self.pos[m], self.token[m],
                          self.experts[m], self.gates[m])

    def windows(self) -> Iterator[tuple[int, int, "TraceTable"]]:
        """(step, layer, sub-table) for each batch window, in sorted order."""
        key = self.step.astype(np.int64) * 1_000_003 + self.layer
        order = np.argsort(key, kind="stable")
        ks = key[order]
        cuts = np.nonzero(np.diff(ks))[0] + 1
        for idx in np.split(order, cuts):
            if idx.size:
                yield (int(self.step[idx[0]]), int(self.layer[idx[0]]),
                       TraceTable(self.step[idx], self.layer[idx], self.pos[idx],
                                  self.token[idx], self.experts[idx], self.gates[idx]))


def load_table(path: str | Path) -> TraceTable:
    fh, raw = _open(path, "r")
    steps, layers, pos, toks, exps, gates = [], [], [], [], [], []
    try:
        for line in fh:
            if not line.strip():
                continue
            cols = line.rstrip("\n").split("\t")
            if len(cols) not in (6, 7):
                raise ConfigError(f"malformed trace line: {line[:80]!r}")
            steps.append(int(cols[0]))
            layers.append(int(cols[1]))
            pos.append(int(cols[2]))
            toks.append(int(cols[3]))
            exps.append([int(v) for v in cols[4].split(",")])
            gates.append([float(v) for v in cols[5].split(",")])
    finally:
        fh.close()
        if raw is not None:
            raw.close()
    if exps and len({len(e) for e in exps}) != 1:
        raise ConfigError("trace mixes records with different k")
    k = len(exps[0]) if exps else 0
    return TraceTable(np.array(steps, np.int64), np.array(layers, np.int64), np.array(pos, np.int64),
                      np.array(toks, np.int64), np.array(exps, np.int64).reshape(-1, k),
                      np.array(gates, np.float64).reshape(-1, k))
