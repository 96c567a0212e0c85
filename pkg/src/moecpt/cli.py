"""``moecpt`` command line: gen-data, pretrain, cpt, eval, analyze, report.

Relative output paths are placed under ``$MOECPT_OUT`` when it is set.
Exit codes: 0 ok, 1 other failure, 2 invalid configuration, 3 misaligned
traces, 4 numerical abort, 5 checkpoint mismatch, 6 unsupported metric.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analytics import coact_diff, coactivation, cvs, mri_report, saturation_by_layer, vocab_specialization
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import FileStream, MixtureStream, Profile, ReplayMixer, synth_corpus, write_tokens
from .errors import CheckpointError, ConfigError, MoeCptError, NumericalAbort, UnsupportedMetric
from .model import ModelConfig, MoeLM
from .schedules import resume_for_cpt
from .trainer import (MetricLog, evaluate, make_checkpoint, read_metrics, restore,
                      schedule_from_items, train_phase)
from .traces import TraceWriter, load_table

log = logging.getLogger("moecpt")

OUTPUT_ROOT_ENV = "MOECPT_OUT"
CHECKPOINT_NAME = "checkpoint.moeckpt"
METRICS_NAME = "metrics.csv"
METRICS = ("mri", "saturation", "vocab", "cvs", "coactivation")


def output_root() -> Path | None:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) if root else None


def _out_path(p: str | Path) -> Path:
    p = Path(p)
    root = output_root()
    return root / p if root is not None and not p.is_absolute() else p


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(out: Path, command: str, started: float, extra: dict | None = None) -> None:
    # wall-clock data lives only here so the other outputs stay reproducible
    info = {"command": command, "version": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
            "seconds": round(time.time() - started, 3)}
    info.update(extra or {})
    _write_json(out / "manifest.json", info)


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    if args.vocab < 8:
        raise ConfigError(f"vocab_size must be >= 8, got {args.vocab}")
    if args.tokens < 1:
        raise ConfigError("--tokens must be >= 1")
    out = _out_path(args.out or f"data/dist_{args.profile}_seed{args.seed}.toks")
    stream = synth_corpus(Profile(args.profile), args.vocab, args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tokens(out, stream.read(0, args.tokens), args.vocab)
    print(out)
    return 0


# ---------------------------------------------------------------- training


def _stream(cfg: RunConfig):
    if cfg.data.mixture is not None:
        srcs = {k: FileStream(p) for k, p in cfg.data.sources.items()}
        return MixtureStream(cfg.data.mixture, srcs, cfg.data.seed)
    return FileStream(cfg.data.train)


def _check_vocab(stream, model_cfg: ModelConfig, what: str) -> None:
    if stream.vocab_size != model_cfg.vocab_size:
        raise ConfigError(f"{what} has vocab_size {stream.vocab_size}, model expects {model_cfg.vocab_size}")


def _train(cfg: RunConfig, model: MoeLM, schedule, meta: dict, command: str, started: float,
           replay_pool: int | None) -> int:
    steps = cfg.steps if cfg.steps is not None else schedule.total_iterations
    if steps > schedule.total_iterations:
        raise ConfigError(f"train.steps {steps} exceeds schedule length {schedule.total_iterations}")
    new = _stream(cfg)
    _check_vocab(new, model.config, "training data")
    replay = FileStream(cfg.data.replay) if cfg.data.replay is not None else None
    if replay is not None:
        _check_vocab(replay, model.config, "replay data")
    mixer = ReplayMixer(new, replay, cfg.data.replay_fraction, cfg.batch_size, model.config.seq_len,
                        seed=cfg.data.seed, replay_pool=replay_pool)

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(
        "".join(f"{k}={v}\n" for k, v in sorted(cfg.items.items())))
    metrics = MetricLog(out / METRICS_NAME, model.config.num_layers)
    tracing = cfg.trace.every > 0 or cfg.trace.edge > 0
    writer = TraceWriter(out / ("trace.tsv.gz" if cfg.trace_gzip else "trace.tsv"),
                         cfg.trace_probs) if tracing else None
    try:
        res = train_phase(model, mixer, schedule, steps, trace=writer, trace_policy=cfg.trace, metrics=metrics)
    except NumericalAbort as exc:
        diag = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in exc.diagnostics.items()}
        _write_json(out / "abort.json", {"error": str(exc), **diag})
        raise
    finally:
        metrics.close()
        if writer is not None:
            writer.close()
    meta = dict(meta, iteration=res.end_iteration, items_seen=res.end_iteration * cfg.batch_size,
                data_seed=cfg.data.seed, replay_fraction=cfg.data.replay_fraction)
    ckpt = make_checkpoint(model, res.optimizer, schedule=schedule, **meta)
    save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    summary = {"steps": steps, "final": {k: v for k, v in res.rows[-1].items()}}
    if cfg.eval_data is not None:
        held = FileStream(cfg.eval_data)
        _check_vocab(held, model.config, "eval data")
        summary["eval_ce"] = evaluate(model, held, cfg.eval_tokens)
    _write_json(out / "summary.json", summary)
    _write_manifest(out, command, started)
    print(out / CHECKPOINT_NAME)
    return 0


def _load_run_config(args, default_phase: str) -> RunConfig:
    overrides = dict(_parse_set(args.set))
    if getattr(args, "preset", None):
        overrides["preset"] = args.preset
    if getattr(args, "replay", None) is not None:
        overrides["data.replay_fraction"] = repr(args.replay)
    if getattr(args, "steps", None) is not None:
        overrides["train.steps"] = str(args.steps)
    if args.out:
        overrides["output.dir"] = args.out
    return load_config(args.config, overrides, output_root(), default_phase)


def _parse_set(pairs) -> list[tuple[str, str]]:
    out = []
    for p in pairs or []:
        k, sep, v = p.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        out.append((k.strip(), v.strip()))
    return out


def cmd_pretrain(args) -> int:
    started = time.time()
    cfg = _load_run_config(args, "pretrain")
    if cfg.model is None:
        raise ConfigError("pretrain needs a model (set preset or model.* keys)")
    if cfg.schedule is None:
        raise ConfigError("pretrain cannot resume a schedule; set schedule.resume=none")
    cfg.validate_files()
    model = MoeLM(cfg.model)
    return _train(cfg, model, cfg.schedule, {"phase_id": cfg.phase_id, "task_id": cfg.task_id},
                  "pretrain", started, cfg.data.replay_pool)


def _checkpoint_file(path: str | Path) -> Path:
    """A checkpoint file, or the checkpoint inside a run directory."""
    src = Path(path)
    if src.is_dir():
        src = src / CHECKPOINT_NAME
    if not src.is_file():
        raise CheckpointError(f"checkpoint not found: {src}")
    return src


def cmd_cpt(args) -> int:
    started = time.time()
    cfg = _load_run_config(args, "cpt")
    cfg.validate_files()
    ckpt = load_checkpoint(_checkpoint_file(args.from_checkpoint))
    if cfg.model is not None and cfg.model.config_hash() != ckpt.config_hash:
        raise CheckpointError("model config does not match the checkpoint (config hash differs)")
    # optimizer moments are reset for the new distribution
    model, _ = restore(ckpt, cfg.model, with_optimizer=False)
    if cfg.resume == "none":
        schedule = cfg.schedule
    else:
        if "schedule.family" not in ckpt.metadata:
            raise CheckpointError("checkpoint carries no schedule to resume from")
        prev = schedule_from_items(ckpt.metadata)
        total = int(cfg.items.get("schedule.total_iterations", prev.total_iterations))
        schedule = resume_for_cpt(prev, total, decayed=cfg.resume == "decayed")
    pool = cfg.data.replay_pool
    if pool is None and "items_seen" in ckpt.metadata:
        pool = int(ckpt.metadata["items_seen"])
    meta = {"phase_id": cfg.phase_id, "task_id": cfg.task_id,
            "parent_phase_id": ckpt.metadata.get("phase_id", ""),
            "parent_task_id": ckpt.metadata.get("task_id", "")}
    return _train(cfg, model, schedule, meta, "cpt", started, pool)


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    started = time.time()
    ckpt = load_checkpoint(_checkpoint_file(args.checkpoint))
    model, _ = restore(ckpt, with_optimizer=False)
    stream = FileStream(args.data)
    _check_vocab(stream, model.config, "eval data")
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    writer = TraceWriter(out / args.trace_name, args.probs) if args.trace_name else None
    try:
        ce = evaluate(model, stream, args.tokens, args.batch_size, trace=writer, trace_step=0)
    finally:
        if writer is not None:
            writer.close()
    _write_json(out / "eval.json", {"checkpoint": str(args.checkpoint), "data": str(args.data),
                                    "tokens": args.tokens, "cross_entropy": ce,
                                    "phase_id": ckpt.metadata.get("phase_id", ""),
                                    "task_id": ckpt.metadata.get("task_id", "")})
    _write_manifest(out, "eval", started)
    print(f"cross_entropy={ce!r}")
    return 0


# ---------------------------------------------------------------- analyze


def _shape_from(args) -> tuple[int, int]:
    E, V = args.num_experts, args.vocab_size
    if args.checkpoint:
        md = load_checkpoint(_checkpoint_file(args.checkpoint)).metadata
        E = E or int(md["model.moe.num_routed_experts"])
        V = V or int(md["model.vocab_size"])
    if not E or not V:
        raise ConfigError("pass --checkpoint or both --num-experts and --vocab-size")
    return E, V


def _plot(out: Path, name: str, xs, ys) -> None:
    _write_csv(out / f"{name}.xy.csv", ["x", "y"], zip(xs, ys))


def cmd_analyze(args) -> int:
    started = time.time()
    E, V = _shape_from(args)
    metrics = list(METRICS) if args.metric == "all" else [args.metric]
    needs_pair = {"saturation", "cvs"}
    if args.metric != "all" and args.metric in needs_pair and not args.trace_b:
        raise ConfigError(f"--metric {args.metric} compares two traces; pass --trace-b")
    table = load_table(args.trace)
    other = load_table(args.trace_b) if args.trace_b else None
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {"num_experts": E, "vocab_size": V, "k": table.k, "metrics": {}}

    for metric in metrics:
        if metric in needs_pair and other is None:
            continue
        if metric == "coactivation" and table.k < 2:
            if args.metric == "coactivation":
                raise UnsupportedMetric("expert co-activation needs k >= 2 (this trace has k=1)")
            continue
        report["metrics"][metric] = ANALYZERS[metric](table, other, E, V, out, args.plot_data)
    _write_json(out / "report.json", report)
    _write_manifest(out, "analyze", started)
    print(out / "report.json")
    return 0


def _an_mri(table, other, E, V, out, plot):
    rep = mri_report(table, E)
    rows = [(s, l, v) for (s, l), v in sorted(rep.values.items())]
    _write_csv(out / "mri.csv", ["step", "layer", "mri"], rows)
    if plot:
        for layer in rep.layers():
            pts = [(s, v) for s, l, v in rows if l == layer]
            _plot(out, f"mri_layer_{layer}", [p[0] for p in pts], [p[1] for p in pts])
    per_layer = {}
    for layer in rep.layers():
        vals = np.array([v for (s, l), v in rep.values.items() if l == layer])
        per_layer[str(layer)] = {"median": float(np.median(vals)), "max": float(vals.max()),
                                 "min": float(vals.min())}
    return {"lower_bound": table.k / E, "layers": per_layer}


def _an_saturation(table, other, E, V, out, plot):
    rows = sorted(saturation_by_layer(table, other).items())
    _write_csv(out / "saturation.csv", ["layer", "saturation"], rows)
    if plot:
        _plot(out, "saturation", [r[0] for r in rows], [r[1] for r in rows])
    return {str(l): v for l, v in rows}


def _vocab_reports(table, E, V):
    return {layer: vocab_specialization(sub.token, sub.experts, V, E)
            for layer in table.layers() for sub in [table.select(layer=layer)]}


def _an_vocab(table, other, E, V, out, plot):
    reps = _vocab_reports(table, E, V)
    rows = []
    for layer, r in reps.items():
        for x in np.nonzero(r.observed)[0]:
            rows.append((layer, int(x), int(r.occurrences[x]), int(r.alpha[x]),
                         float(r.specialization[x, r.alpha[x]])))
    _write_csv(out / "vocab_specialization.csv",
               ["layer", "token", "occurrences", "alpha", "specialization"], rows)
    exp_rows = [(layer, e, r.expert_mean[e]) for layer, r in reps.items() for e in range(E)]
    _write_csv(out / "vocab_specialization_experts.csv", ["layer", "expert", "mean_specialization"], exp_rows)
    if plot:
        for layer, r in reps.items():
            _plot(out, f"vocab_specialization_layer_{layer}", range(E), r.expert_mean)
    return {str(l): {"layer_mean": r.layer_mean, "unobserved_tokens": r.unobserved} for l, r in reps.items()}


def _an_cvs(table, other, E, V, out, plot):
    ra, rb = _vocab_reports(table, E, V), _vocab_reports(other, E, V)
    rows = []
    for layer in table.layers():
        res = cvs(ra[layer], rb[layer])
        rows.append((layer, res.value, res.tokens_used, res.excluded))
    _write_csv(out / "cvs.csv", ["layer", "cvs", "tokens_used", "excluded"], rows)
    if plot:
        _plot(out, "cvs", [r[0] for r in rows], [r[1] for r in rows])
    return {str(r[0]): r[1] for r in rows}


def _an_coactivation(table, other, E, V, out, plot):
    result = {}
    for layer in table.layers():
        c = coactivation(table.select(layer=layer).experts, E)
        _write_csv(out / f"coactivation_layer_{layer}.csv", ["expert"] + [str(j) for j in range(E)],
                   ([i] + list(c.matrix[i]) for i in range(E)))
        entry = {"inactive": c.inactive}
        if other is not None:
            d = coact_diff(c, coactivation(other.select(layer=layer).experts, E))
            entry.update(diff_median=d.median, diff_max=d.max, diff_p90=d.p90, undefined=d.undefined)
            _write_csv(out / f"coactivation_diff_layer_{layer}.csv", ["expert"] + [str(j) for j in range(E)],
                       ([i] + list(d.diff[i]) for i in range(E)))
            if plot:
                vals = np.sort(d.diff[np.isfinite(d.diff)])
                _plot(out, f"coactivation_diff_layer_{layer}", range(len(vals)), vals)
        result[str(layer)] = entry
    return result


ANALYZERS = {"mri": _an_mri, "saturation": _an_saturation, "vocab": _an_vocab,
             "cvs": _an_cvs, "coactivation": _an_coactivation}


# ---------------------------------------------------------------- report


def cmd_report(args) -> int:
    started = time.time()
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, series = [], {}
    for run in args.runs:
        run = Path(run)
        mpath = run / METRICS_NAME
        if not mpath.is_file():
            raise ConfigError(f"{run} has no {METRICS_NAME}")
        m = read_metrics(mpath)
        if not m:
            raise ConfigError(f"{mpath} is empty")
        mri_cols = [k for k in m[0] if k.startswith("mri_layer_")]
        mri = np.array([[r[c] for c in mri_cols] for r in m])
        summary = {}
        if (run / "summary.json").is_file():
            summary = json.loads((run / "summary.json").read_text())
        rows.append((run.name, len(m), m[-1]["lm_loss"], m[-1]["total_loss"],
                     float(np.median(mri)), float(mri.max()), summary.get("eval_ce", float("nan"))))
        series[run.name] = m
        if args.plot_data:
            _plot(out, f"{run.name}_lm_loss", [r["step"] for r in m], [r["lm_loss"] for r in m])
            _plot(out, f"{run.name}_mri", [r["step"] for r in m], mri.mean(axis=1))
    _write_csv(out / "runs.csv", ["run", "steps", "final_lm_loss", "final_total_loss",
                                  "mri_median", "mri_max", "eval_ce"], rows)
    _write_manifest(out, "report", started, {"runs": [str(r) for r in args.runs]})
    print(out / "runs.csv")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moecpt", description="MoE continual pre-training lab.")
    p.add_argument("--version", action="version", version=f"moecpt {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic Markov corpus as a TOKS file")
    g.add_argument("--profile", choices=[x.value for x in Profile], required=True,
                   help="a: lower half of the vocabulary, b: upper half")
    g.add_argument("--vocab", type=int, default=256, help="vocabulary size (>= 8)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tokens", type=int, default=1_000_000, help="number of tokens to write")
    g.add_argument("--out", help="output file (default data/dist_<profile>_seed<seed>.toks)")
    g.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("pretrain", cmd_pretrain, "train a model from scratch"),
                                 ("cpt", cmd_cpt, "continue training a checkpoint on new data")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--config", required=True, help="key=value run config file")
        t.add_argument("--preset", help="model preset (overrides the config's preset)")
        t.add_argument("--steps", type=int, help="override train.steps")
        t.add_argument("--out", help="override output.dir")
        t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        if name == "cpt":
            t.add_argument("--from", dest="from_checkpoint", required=True,
                           help="source checkpoint file or run directory")
            t.add_argument("--replay", type=float, help="replay fraction in [0, 1]")
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="held-out cross-entropy, optionally with routing traces")
    e.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    e.add_argument("--data", required=True, help="TOKS file")
    e.add_argument("--tokens", type=int, default=4096, help="number of target tokens")
    e.add_argument("--batch-size", type=int, default=16)
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--trace-name", default="eval_trace.tsv.gz", help="trace file name ('' disables)")
    e.add_argument("--probs", action="store_true", help="include router probabilities in the trace")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="routing analytics over trace logs")
    a.add_argument("--metric", choices=METRICS + ("all",), default="all")
    a.add_argument("--trace", required=True, help="reference trace (T_h)")
    a.add_argument("--trace-b", help="second trace (T_j) for saturation, CVS and co-activation diffs")
    a.add_argument("--checkpoint", help="checkpoint file or run directory to read E and vocab size from")
    a.add_argument("--num-experts", type=int)
    a.add_argument("--vocab-size", type=int)
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--plot-data", action="store_true", help="also write (x, y) series files")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report", help="summarise training runs")
    r.add_argument("runs", nargs="+", help="run directories")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--plot-data", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except MoeCptError as exc:
        pos = getattr(exc, "position", None)
        suffix = f" (position {pos})" if pos is not None else ""
        print(f"moecpt: error: {exc}{suffix}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"moecpt: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
