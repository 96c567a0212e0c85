"""Single-process training loop, evaluation and checkpoint plumbing."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numeric_core as nc
from .analytics import mri
from .checkpoint import Checkpoint
from .data import ReplayMixer, read_items
from .errors import CheckpointError, ConfigError, NumericalAbort
from .model import ModelConfig, MoeLM
from .moe_layer import Mode
from .schedules import Family, ScheduleSpec, lr_at
from .traces import TraceWriter

log = logging.getLogger(__name__)

BETAS = (0.9, 0.95)
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.1
GRAD_CLIP = 1.0


class AdamW:
    """Decoupled weight decay Adam; norm gains are not decayed."""

    def __init__(self, betas=BETAS, eps=ADAM_EPS, weight_decay=WEIGHT_DECAY, clip=GRAD_CLIP) -> None:
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip = clip
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def update(self, params: dict[str, nc.Matrix], grads: dict[str, np.ndarray], lr: float) -> float:
        """Clip to global norm ``clip``, apply one step; returns the pre-clip norm."""
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        factor = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.step += 1
        bc1 = 1.0 - self.b1 ** self.step
        bc2 = 1.0 - self.b2 ** self.step
        for name, p in params.items():
            g = grads[name] * factor
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            else:
                v = self.v[name]
            m = self.b1 * m + (1.0 - self.b1) * g
            v = self.b2 * v + (1.0 - self.b2) * (g * g)
            self.m[name], self.v[name] = m, v
            new = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if "norm" not in name:
                new = new - lr * self.weight_decay * p.data
            new.flags.writeable = False
            p.data = new
        return norm

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load(self, tensors: dict[str, np.ndarray], step: int) -> None:
        self.m = {k[len("adam.m."):]: np.array(v) for k, v in tensors.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: np.array(v) for k, v in tensors.items() if k.startswith("adam.v.")}
        self.step = step


@dataclass
class TracePolicy:
    """Emit traces every ``every`` steps, plus the first/last ``edge`` steps."""

    every: int = 0
    edge: int = 0

    def wants(self, step: int, start: int, stop: int) -> bool:
        if self.every and (step - start) % self.every == 0:
            return True
        return step - start < self.edge or stop - step <= self.edge


METRIC_FIELDS = ("step", "lr", "lm_loss", "aux_loss", "z_loss", "total_loss")


class MetricLog:
    """CSV: step,lr,lm_loss,aux_loss,z_loss,total_loss,mri_layer_0..L-1."""

    def __init__(self, path: str | Path, num_layers: int) -> None:
        self.path = Path(path)
        self.header = list(METRIC_FIELDS) + [f"mri_layer_{j}" for j in range(num_layers)]
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(self.header)

    def write(self, row: dict) -> None:
        self._w.writerow([row["step"]] + [repr(float(row[h])) for h in self.header[1:]])

    def close(self) -> None:
        self._fh.close()


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


@dataclass
class PhaseResult:
    rows: list[dict] = field(default_factory=list)
    end_iteration: int = 0
    optimizer: AdamW | None = None


def train_phase(model: MoeLM, mixer: ReplayMixer, schedule: ScheduleSpec, steps: int,
                start_iteration: int = 0, optimizer: AdamW | None = None,
                trace: TraceWriter | None = None, trace_policy: TracePolicy | None = None,
                metrics: MetricLog | None = None, stop_iteration: int | None = None) -> PhaseResult:
    """Run ``steps`` optimisation steps starting at ``start_iteration``.

    Step ``t`` uses batch ``mixer.batch(t)`` and lr ``lr_at(schedule, t)``.
    ``stop_iteration`` (default: the end of this call) only shapes the
    "last N steps" trace window.
    """
    end = start_iteration + steps
    if end > schedule.total_iterations:
        raise ConfigError(f"schedule has {schedule.total_iterations} iterations, run needs {end}")
    opt = optimizer if optimizer is not None else AdamW()
    policy = trace_policy or TracePolicy()
    stop = stop_iteration if stop_iteration is not None else end
    params = model.params()
    names = list(params)
    plist = [params[n] for n in names]
    E = model.config.moe.num_routed_experts
    k = model.config.moe.active_experts
    result = PhaseResult(end_iteration=start_iteration, optimizer=opt)
    for t in range(start_iteration, end):
        batch = mixer.batch(t)
        lr = lr_at(schedule, t)
        with nc.GradTape() as tape:
            br = model.loss(batch.tokens, Mode.TRAIN)
        total = br.total_loss
        if not math.isfinite(total):
            raise NumericalAbort(f"non-finite loss at step {t}",
                                 {"step": t, "lr": lr, "batch": batch.tokens,
                                  "lm_loss": br.lm_loss, "aux_loss": br.aux_loss, "z_loss": br.z_loss})
        grads = dict(zip(names, tape.gradient(br.total, plist)))
        gnorm = opt.update(params, grads, lr)
        if not math.isfinite(gnorm):
            raise NumericalAbort(f"non-finite gradient norm at step {t}",
                                 {"step": t, "lr": lr, "batch": batch.tokens, "grad_norm": gnorm})
        n_tok = batch.tokens.shape[0] * (batch.tokens.shape[1] - 1)
        row = {"step": t, "lr": lr, "lm_loss": br.lm_loss, "aux_loss": br.aux_loss,
               "z_loss": br.z_loss, "total_loss": total}
        for j, oc in enumerate(br.outcomes):
            counts = oc.expert_counts(E)
            if int(counts.sum()) != n_tok * k:
                raise NumericalAbort(f"dropless invariant violated at step {t}, layer {j}")
            row[f"mri_layer_{j}"] = mri(oc.selected, E)
        result.rows.append(row)
        if metrics is not None:
            metrics.write(row)
        if trace is not None and policy.wants(t, start_iteration, stop):
            inputs = batch.tokens[:, :-1]
            for j, oc in enumerate(br.outcomes):
                trace.write_outcome(t, j, inputs, oc)
        result.end_iteration = t + 1
    return result


def evaluate(model: MoeLM, stream, num_tokens: int, batch_size: int = 16,
             trace: TraceWriter | None = None, trace_step: int = -1) -> float:
    """Mean next-token cross-entropy (nats) over exactly ``num_tokens`` targets.

    Sequence ``i`` is tokens ``[i*(S+1), (i+1)*(S+1))`` of ``stream``;
    routing runs in inference mode and parameters are untouched.
    """
    S = model.config.seq_len
    if num_tokens < S:
        raise ConfigError(f"num_tokens must be >= seq_len ({S})")
    n_seq = -(-num_tokens // S)
    total = 0.0
    done = 0
    for b0 in range(0, n_seq, batch_size):
        idx = np.arange(b0, min(b0 + batch_size, n_seq))
        toks = read_items(stream, idx * (S + 1), S + 1)
        fr = model.forward(toks[:, :-1], Mode.INFERENCE)
        X = fr.logits.data
        mx = X.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(X - mx).sum(axis=1))
        tgt = toks[:, 1:].ravel()
        nll = lse - X[np.arange(len(tgt)), tgt]
        take = min(len(nll), num_tokens - done)
        total += float(nll[:take].sum())
        if trace is not None:
            for j, oc in enumerate(fr.outcomes):
                trace.write_outcome(trace_step, j, toks[:, :-1], oc, limit=take, pos_offset=done)
        done += take
    return total / num_tokens


# ---------------------------------------------------------------- checkpoints


def schedule_items(spec: ScheduleSpec) -> dict[str, str]:
    return {
        "schedule.family": spec.family.value,
        "schedule.total_iterations": str(spec.total_iterations),
        "schedule.eta_max": repr(spec.eta_max),
        "schedule.eta_min": repr(spec.eta_min),
        "schedule.eta_const": repr(spec.eta_const),
        "schedule.warmup_frac": repr(spec.warmup_frac),
        "schedule.cooldown_frac": repr(spec.cooldown_frac),
        "schedule.constant_frac": repr(spec.constant_frac),
        "schedule.resume_offset": str(spec.resume_offset),
    }


def schedule_from_items(items: dict[str, str]) -> ScheduleSpec:
    return ScheduleSpec(Family(items["schedule.family"]), int(items["schedule.total_iterations"]),
                        float(items["schedule.eta_max"]), float(items["schedule.eta_min"]),
                        float(items["schedule.eta_const"]), float(items["schedule.warmup_frac"]),
                        float(items["schedule.cooldown_frac"]), float(items["schedule.constant_frac"]),
                        int(items["schedule.resume_offset"]))


def make_checkpoint(model: MoeLM, optimizer: AdamW | None = None, **meta) -> Checkpoint:
    """Snapshot parameters (+ optimizer moments) with metadata.

    Recognised metadata: phase_id, task_id, iteration, schedule
    (a ScheduleSpec), data_seed; anything else is stored as ``str(value)``.
    """
    md: dict[str, str] = {}
    md.update(model.config.to_items())
    sched = meta.pop("schedule", None)
    for key, val in meta.items():
        md[key] = str(val)
    if sched is not None:
        md.update(schedule_items(sched))
    md["adam.step"] = str(optimizer.step if optimizer is not None else 0)
    tensors = {k: v for k, v in model.state().items()}
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    return Checkpoint(tensors, md, model.config.config_hash())


def restore(ckpt: Checkpoint, config: ModelConfig | None = None,
            with_optimizer: bool = True) -> tuple[MoeLM, AdamW]:
    """Rebuild model (and optimizer state) from a checkpoint.

    When ``config`` is given its hash must match the checkpoint's.
    """
    cfg = config if config is not None else ModelConfig.from_items(
        {k: v for k, v in ckpt.metadata.items() if k.startswith("model.")})
    if cfg.config_hash() != ckpt.config_hash:
        raise CheckpointError("config hash mismatch between checkpoint and model config")
    model = MoeLM(cfg)
    model.load_state(ckpt.tensors)
    opt = AdamW()
    if with_optimizer:
        opt.load(ckpt.tensors, int(ckpt.metadata.get("adam.step", "0")))
    return model, opt
