"""Run configuration: a flat ``key=value`` file with section prefixes.

Blank lines and ``#`` comments are ignored. Recognised keys::

    preset = granular-pbtk              model preset; model.* keys override it
    model.num_layers / hidden_size / vocab_size / seq_len / attention / seed
    model.moe.<field>                   any MoeLayerConfig field

    schedule.preset = pretrain | cpt | cpt-ablation | retrain
    schedule.lr_scale = 1.0             multiplies the preset lrs
    schedule.resume = none | nondecayed | decayed
                                        cpt only: derive the schedule from the
                                        one stored in the source checkpoint
    schedule.<field>                    any ScheduleSpec field

    train.steps                         defaults to schedule.total_iterations
    train.batch_size = 16
    train.phase_id / train.task_id      labels stored in the checkpoint

    data.train = path.toks              or data.mixture + data.source.<name>
    data.mixture = a:0.7,b:0.3
    data.source.<name> = path.toks
    data.replay = path.toks             previous-distribution data
    data.replay_fraction = 0.0
    data.replay_pool                    replay items drawn from [0, pool)
    data.seed = 0

    trace.every = 0                     0 disables periodic tracing
    trace.edge = 0                      also trace the first/last N steps
    trace.probs = false
    trace.gzip = true

    eval.data = path.toks               optional held-out stream
    eval.tokens = 4096

    output.dir = runs/<phase_id>

Relative data paths are resolved against the config file's directory.
Everything is validated before any file is written.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import MixtureSpec
from .errors import ConfigError
from .model import ModelConfig, PRESETS, preset_config
from .moe_layer import MoeLayerConfig
from .schedules import (CPT_ABLATION_PRESET, CPT_PRESET, PRETRAIN_PRESET, RETRAIN_PRESET,
                        Family, ScheduleSpec, scaled)
from .trainer import TracePolicy

SCHEDULE_PRESETS = {
    "pretrain": PRETRAIN_PRESET,
    "cpt": CPT_PRESET,
    "cpt-ablation": CPT_ABLATION_PRESET,
    "retrain": RETRAIN_PRESET,
}
RESUME_MODES = ("none", "nondecayed", "decayed")

_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"moe"}
_MOE_KEYS = {f.name for f in fields(MoeLayerConfig)}
_SCHED_KEYS = {f.name for f in fields(ScheduleSpec)}
_FIXED_KEYS = {
    "preset", "schedule.preset", "schedule.lr_scale", "schedule.resume",
    "train.steps", "train.batch_size", "train.phase_id", "train.task_id",
    "data.train", "data.mixture", "data.replay", "data.replay_fraction", "data.replay_pool", "data.seed",
    "trace.every", "trace.edge", "trace.probs", "trace.gzip",
    "eval.data", "eval.tokens", "output.dir",
}


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw!r}")
        out[key.strip()] = val.strip()
    return out


def _known(key: str) -> bool:
    if key in _FIXED_KEYS or key.startswith("data.source."):
        return True
    if key.startswith("model.moe."):
        return key[len("model.moe."):] in _MOE_KEYS
    if key.startswith("model."):
        return key[len("model."):] in _MODEL_KEYS
    if key.startswith("schedule."):
        return key[len("schedule."):] in _SCHED_KEYS
    return False


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _num(items: dict[str, str], key: str, kind, default):
    if key not in items:
        return default
    try:
        return kind(items[key])
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {items[key]!r} as {kind.__name__}") from None


@dataclass(frozen=True)
class DataConfig:
    train: Path | None = None
    mixture: MixtureSpec | None = None
    sources: dict[str, Path] = field(default_factory=dict)
    replay: Path | None = None
    replay_fraction: float = 0.0
    replay_pool: int | None = None
    seed: int = 0

    def paths(self) -> list[Path]:
        out = [self.train] if self.train is not None else list(self.sources.values())
        if self.replay is not None:
            out.append(self.replay)
        return out


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig | None          # None: take the shape from the source checkpoint
    schedule: ScheduleSpec | None      # None: derive from the checkpoint (resume mode)
    resume: str
    steps: int | None
    batch_size: int
    data: DataConfig
    trace: TracePolicy
    trace_probs: bool
    trace_gzip: bool
    eval_data: Path | None
    eval_tokens: int
    output_dir: Path
    phase_id: str
    task_id: str
    items: dict[str, str] = field(default_factory=dict, compare=False)

    def with_replay(self, fraction: float) -> "RunConfig":
        if not 0.0 <= fraction <= 1.0:
            raise ConfigError(f"replay fraction {fraction} outside [0, 1]")
        return dataclasses.replace(self, data=dataclasses.replace(self.data, replay_fraction=fraction))

    def validate_files(self) -> None:
        for p in self.data.paths() + ([self.eval_data] if self.eval_data else []):
            if not p.is_file():
                raise ConfigError(f"data file not found: {p}")
        if self.data.replay_fraction > 0 and self.data.replay is None:
            raise ConfigError("data.replay_fraction > 0 needs data.replay")

    def with_model(self, model: ModelConfig) -> "RunConfig":
        return dataclasses.replace(self, model=model)


def _model_config(items: dict[str, str]) -> ModelConfig | None:
    preset = items.get("preset")
    model_items = {k: v for k, v in items.items() if k.startswith("model.")}
    if preset is None and not model_items:
        return None
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    # the preset sizes its experts from the hidden size, so apply that first
    hidden = _num(items, "model.hidden_size", int, ModelConfig.hidden_size)
    merged = preset_config(preset or "granular-pbtk", hidden_size=hidden).to_items()
    merged.update(model_items)
    try:
        return ModelConfig.from_items(merged)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from None


def _schedule(items: dict[str, str], resume: str) -> ScheduleSpec | None:
    sched_items = {k[len("schedule."):]: v for k, v in items.items()
                   if k.startswith("schedule.") and k[len("schedule."):] in _SCHED_KEYS}
    preset = items.get("schedule.preset")
    if resume != "none":
        if preset is not None or set(sched_items) - {"total_iterations"}:
            raise ConfigError("schedule.resume derives the schedule; only schedule.total_iterations may be set")
        return None
    if preset is None and not sched_items:
        raise ConfigError("no schedule configured (set schedule.preset or schedule.* fields)")
    if preset is not None and preset not in SCHEDULE_PRESETS:
        raise ConfigError(f"unknown schedule preset {preset!r}; choose from {sorted(SCHEDULE_PRESETS)}")
    lr_scale = _num(items, "schedule.lr_scale", float, 1.0)
    if lr_scale <= 0:
        raise ConfigError("schedule.lr_scale must be > 0")
    if preset is not None:
        base = SCHEDULE_PRESETS[preset]
        total = _num(items, "schedule.total_iterations", int, base.total_iterations)
        base = scaled(base, total, lr_scale)
    else:
        if "family" not in sched_items:
            raise ConfigError("schedule.family is required without schedule.preset")
        base = None
    kw = dataclasses.asdict(base) if base is not None else {}
    types = {f.name: f.type for f in fields(ScheduleSpec)}
    for name, val in sched_items.items():
        t = str(types[name])
        try:
            if name == "family":
                kw[name] = Family(val)
            elif "int" in t:
                kw[name] = int(val)
            else:
                kw[name] = float(val)
        except ValueError:
            raise ConfigError(f"schedule.{name}: cannot parse {val!r}") from None
    if base is None and "eta_max" in kw and lr_scale != 1.0:
        for n in ("eta_max", "eta_min", "eta_const"):
            if n in kw:
                kw[n] *= lr_scale
    try:
        return ScheduleSpec(**kw)
    except TypeError as exc:
        raise ConfigError(f"incomplete schedule: {exc}") from None


def build_config(items: dict[str, str], base_dir: Path | str = ".", output_root: Path | str | None = None,
                 default_phase: str = "pretrain") -> RunConfig:
    """Validate ``items`` into a RunConfig. Touches no files."""
    unknown = sorted(k for k in items if not _known(k))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    base_dir = Path(base_dir)

    def path(key: str) -> Path | None:
        if key not in items or not items[key]:
            return None
        p = Path(items[key])
        return p if p.is_absolute() else base_dir / p

    resume = items.get("schedule.resume", "none")
    if resume not in RESUME_MODES:
        raise ConfigError(f"schedule.resume must be one of {RESUME_MODES}")
    model = _model_config(items)
    schedule = _schedule(items, resume)

    sources = {k[len("data.source."):]: path(k) for k in items if k.startswith("data.source.")}
    mixture = MixtureSpec.parse(items["data.mixture"]) if "data.mixture" in items else None
    train = path("data.train")
    if train is not None and mixture is not None:
        raise ConfigError("set either data.train or data.mixture, not both")
    if mixture is not None:
        missing = [s for s, _ in mixture.components if s not in sources]
        if missing:
            raise ConfigError(f"data.mixture names sources without data.source.* entries: {missing}")
    elif train is None:
        raise ConfigError("no training data (set data.train or data.mixture)")
    replay_fraction = _num(items, "data.replay_fraction", float, 0.0)
    if not 0.0 <= replay_fraction <= 1.0:
        raise ConfigError(f"data.replay_fraction {replay_fraction} outside [0, 1]")
    replay_pool = _num(items, "data.replay_pool", int, None)
    if replay_pool is not None and replay_pool < 1:
        raise ConfigError("data.replay_pool must be >= 1")
    data = DataConfig(train, mixture, sources, path("data.replay"), replay_fraction,
                      replay_pool, _num(items, "data.seed", int, 0))

    steps = _num(items, "train.steps", int, None)
    if steps is not None and steps < 1:
        raise ConfigError("train.steps must be >= 1")
    if steps is not None and schedule is not None and steps > schedule.total_iterations:
        raise ConfigError(f"train.steps {steps} exceeds schedule length {schedule.total_iterations}")
    batch_size = _num(items, "train.batch_size", int, 16)
    if batch_size < 1:
        raise ConfigError("train.batch_size must be >= 1")
    every, edge = _num(items, "trace.every", int, 0), _num(items, "trace.edge", int, 0)
    if every < 0 or edge < 0:
        raise ConfigError("trace cadence must be >= 0")
    eval_tokens = _num(items, "eval.tokens", int, 4096)
    if eval_tokens < 1:
        raise ConfigError("eval.tokens must be >= 1")
    if model is not None and eval_tokens < model.seq_len:
        raise ConfigError(f"eval.tokens must be >= seq_len ({model.seq_len})")

    phase_id = items.get("train.phase_id", default_phase)
    out = Path(items.get("output.dir", f"runs/{phase_id}"))
    if not out.is_absolute():
        out = Path(output_root) / out if output_root is not None else base_dir / out
    return RunConfig(model, schedule, resume, steps, batch_size, data,
                     TracePolicy(every, edge), _bool(items.get("trace.probs", "false")),
                     _bool(items.get("trace.gzip", "true")), path("eval.data"), eval_tokens,
                     out, phase_id, items.get("train.task_id", phase_id), dict(items))


def load_config(path: str | Path, overrides: dict[str, str] | None = None,
                output_root: Path | str | None = None, default_phase: str = "pretrain") -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    items = parse_kv(text, str(path))
    items.update(overrides or {})
    return build_config(items, path.parent, output_root, default_phase)
