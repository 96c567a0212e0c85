"""Learning-rate schedules: warmup + cosine annealing, and CosineInf.

CosineInf runs through four phases, each a contiguous block of iterations:

    warmup    linear 0 -> eta_max
    cooldown  cosine eta_max -> eta_const
    constant  eta_const
    annealing cosine eta_const -> eta_min

Phase lengths are ``floor(frac * total)``; annealing takes the remainder.
When the cooldown is empty the warmup climbs to ``eta_const`` instead, so
the curve stays continuous. The lr at a phase boundary equals the value at
the end of the earlier phase and the start of the later one.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

from .errors import ConfigError


class Family(str, enum.Enum):
    COSINE_ANNEALING = "cosine-annealing"
    COSINE_INF = "cosine-inf"


@dataclass(frozen=True)
class ScheduleSpec:
    family: Family
    total_iterations: int
    eta_max: float
    eta_min: float
    eta_const: float = 0.0
    warmup_frac: float = 0.01
    cooldown_frac: float = 0.0
    constant_frac: float = 0.0
    resume_offset: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.total_iterations < 1:
            raise ConfigError("total_iterations must be >= 1")
        if self.family is Family.COSINE_INF:
            if not 0 < self.eta_min <= self.eta_const <= self.eta_max:
                raise ConfigError("need 0 < eta_min <= eta_const <= eta_max")
        elif not 0 < self.eta_min <= self.eta_max:
            raise ConfigError("need 0 < eta_min <= eta_max")
        fracs = (self.warmup_frac, self.cooldown_frac, self.constant_frac)
        if min(fracs) < 0 or sum(fracs) > 1 + 1e-12:
            raise ConfigError("phase fractions must be >= 0 and sum to <= 1")
        if self.resume_offset < 0:
            raise ConfigError("resume_offset must be >= 0")

    def phase_lengths(self) -> tuple[int, int, int, int]:
        """(warmup, cooldown, constant, annealing) iteration counts."""
        n = self.total_iterations
        w = math.floor(self.warmup_frac * n)
        if self.family is Family.COSINE_ANNEALING:
            return w, 0, 0, n - w
        c = math.floor(self.cooldown_frac * n)
        k = math.floor(self.constant_frac * n)
        return w, c, k, n - w - c - k

    def boundaries(self) -> tuple[int, int, int, int]:
        """Iteration at which warmup ends, cooldown ends, constant ends, and the last."""
        w, c, k, a = self.phase_lengths()
        return w, w + c, w + c + k, w + c + k + a


def _cosine(start: float, end: float, progress: float) -> float:
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    end: int
    kind: str          # "linear" | "cosine" | "flat"
    lr_start: float
    lr_end: float

    def value(self, t: float) -> float:
        if self.kind == "flat" or self.end == self.start:
            return self.lr_start
        progress = (t - self.start) / (self.end - self.start)
        if self.kind == "linear":
            return self.lr_end * progress if self.lr_start == 0.0 else (
                self.lr_start + (self.lr_end - self.lr_start) * progress)
        return _cosine(self.lr_start, self.lr_end, progress)


def segments(spec: ScheduleSpec) -> list[Segment]:
    """Non-empty schedule phases in order, each covering [start, end]."""
    w_end, cd_end, const_end, total = spec.boundaries()
    if spec.family is Family.COSINE_ANNEALING:
        segs = [Segment("warmup", 0, w_end, "linear", 0.0, spec.eta_max),
                Segment("annealing", w_end, total, "cosine", spec.eta_max, spec.eta_min)]
    else:
        peak = spec.eta_max if cd_end > w_end else spec.eta_const
        segs = [Segment("warmup", 0, w_end, "linear", 0.0, peak),
                Segment("cooldown", w_end, cd_end, "cosine", spec.eta_max, spec.eta_const),
                Segment("constant", cd_end, const_end, "flat", spec.eta_const, spec.eta_const),
                Segment("annealing", const_end, total, "cosine", spec.eta_const, spec.eta_min)]
    return [s for s in segs if s.end > s.start]


def lr_at(spec: ScheduleSpec, iteration: int) -> float:
    if not 0 <= iteration <= spec.total_iterations:
        raise ConfigError(f"iteration {iteration} outside [0, {spec.total_iterations}]")
    segs = segments(spec)
    for seg in segs:
        # a boundary belongs to the later phase, except flat phases keep their end
        if iteration < seg.end or (seg.kind == "flat" and iteration == seg.end):
            return seg.value(iteration)
    return segs[-1].value(iteration)


def resume_for_cpt(pretrain: ScheduleSpec, cpt_total: int, decayed: bool) -> ScheduleSpec:
    """Schedule for continual pre-training after ``pretrain``.

    From a decayed checkpoint the lr re-warms to eta_max and re-decays to
    eta_min (cosine annealing). From a non-decayed checkpoint a CosineInf
    schedule warms to eta_const, holds it for 80% of the run, then anneals.
    """
    if cpt_total < 1:
        raise ConfigError("cpt_total must be >= 1")
    offset = pretrain.resume_offset + pretrain.total_iterations
    eta_const = pretrain.eta_const if pretrain.eta_const > 0 else pretrain.eta_max
    if decayed:
        return ScheduleSpec(Family.COSINE_ANNEALING, cpt_total, pretrain.eta_max, pretrain.eta_min,
                            eta_const=0.0, warmup_frac=0.01, resume_offset=offset)
    return ScheduleSpec(Family.COSINE_INF, cpt_total, pretrain.eta_max, pretrain.eta_min,
                        eta_const=eta_const, warmup_frac=0.01, cooldown_frac=0.0,
                        constant_frac=0.80, resume_offset=offset)


# Values from the reference hyperparameter table. "Constant iters percent
# 0.10" is taken literally (0.10 %), leaving ~28.9 % of pre-training to
# the final anneal; every fraction is a plain field, so override freely.
PRETRAIN_PRESET = ScheduleSpec(Family.COSINE_INF, 192720, 3e-4, 3e-5, 1.65e-4,
                               warmup_frac=0.01, cooldown_frac=0.70, constant_frac=0.001)
CPT_PRESET = ScheduleSpec(Family.COSINE_INF, 95370, 3e-4, 3e-5, 1.65e-4,
                          warmup_frac=0.01, cooldown_frac=0.0, constant_frac=0.80)
CPT_ABLATION_PRESET = ScheduleSpec(Family.COSINE_ANNEALING, 95370, 3e-4, 3e-5, warmup_frac=0.01)
RETRAIN_PRESET = ScheduleSpec(Family.COSINE_ANNEALING, 288090, 3e-4, 3e-5, warmup_frac=0.01)


def scaled(spec: ScheduleSpec, total_iterations: int, lr_scale: float = 1.0) -> ScheduleSpec:
    """Same phase fractions and lr ratios at a different length / lr level."""
    return replace(spec, total_iterations=total_iterations, eta_max=spec.eta_max * lr_scale,
                   eta_min=spec.eta_min * lr_scale, eta_const=spec.eta_const * lr_scale)
