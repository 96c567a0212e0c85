from pathlib import Path

import pytest

from moecpt.config import build_config, load_config, parse_kv
from moecpt.errors import ConfigError
from moecpt.moe_layer import Balancing
from moecpt.schedules import CPT_PRESET, Family

BASE = {"preset": "granular-pbtk", "schedule.preset": "cpt", "data.train": "x.toks"}


def cfg(**extra):
    items = dict(BASE)
    items.update({k.replace("__", "."): v for k, v in extra.items()})
    return build_config(items, "/base")


def test_parse_kv_comments_and_blanks():
    text = "# header\n\npreset = switch-sbtk   # trailing\nmodel.seq_len=16\n"
    assert parse_kv(text) == {"preset": "switch-sbtk", "model.seq_len": "16"}
    with pytest.raises(ConfigError, match=":2:"):
        parse_kv("a=1\nnot a pair\n")


def test_defaults_and_paths():
    c = cfg()
    assert c.model.moe.num_routed_experts == 31
    assert c.schedule == CPT_PRESET
    assert c.batch_size == 16
    assert c.data.train == Path("/base/x.toks")
    assert c.output_dir == Path("/base/runs/pretrain")
    assert build_config(dict(BASE), "/base", output_root="/out").output_dir == Path("/out/runs/pretrain")


def test_preset_sizes_experts_from_hidden_size():
    c = cfg(model__hidden_size="16", preset="switch-sbtk")
    assert c.model.moe.hidden_size == 16
    assert c.model.moe.num_routed_experts == 8
    assert c.model.moe.balancing is Balancing.SINKHORN
    assert c.model.moe.aux_coeff == 0.0


def test_model_moe_override():
    assert cfg(model__moe__active_experts="2").model.moe.active_experts == 2
    with pytest.raises(ConfigError):
        cfg(model__moe__active_experts="40")


def test_schedule_scaling_and_fields():
    c = cfg(schedule__total_iterations="100", schedule__lr_scale="10")
    assert c.schedule.total_iterations == 100
    assert c.schedule.eta_max == pytest.approx(3e-3)
    custom = build_config({"data.train": "x", "preset": "switch-pbtk", "schedule.family": "cosine-annealing",
                           "schedule.total_iterations": "10", "schedule.eta_max": "1e-3",
                           "schedule.eta_min": "1e-4"}, ".")
    assert custom.schedule.family is Family.COSINE_ANNEALING


def test_resume_mode_only_allows_length():
    items = {"data.train": "x", "schedule.resume": "decayed", "schedule.total_iterations": "10"}
    c = build_config(items, ".")
    assert c.schedule is None and c.resume == "decayed" and c.model is None
    with pytest.raises(ConfigError):
        build_config(dict(items, **{"schedule.preset": "cpt"}), ".")
    with pytest.raises(ConfigError):
        build_config(dict(items, **{"schedule.resume": "sometimes"}), ".")


@pytest.mark.parametrize("key,value", [
    ("bogus.key", "1"),
    ("model.depth", "3"),
    ("preset", "huge-moe"),
    ("schedule.preset", "linear"),
    ("schedule.lr_scale", "0"),
    ("data.replay_fraction", "1.5"),
    ("data.replay_pool", "0"),
    ("train.steps", "0"),
    ("train.steps", "999999999"),
    ("train.batch_size", "many"),
    ("trace.every", "-1"),
    ("trace.probs", "maybe"),
    ("eval.tokens", "3"),
    ("model.hidden_size", "0"),
])
def test_invalid_values_rejected(key, value):
    with pytest.raises(ConfigError):
        cfg(**{key.replace(".", "__"): value})


def test_data_source_rules():
    with pytest.raises(ConfigError):
        build_config({"preset": "switch-pbtk", "schedule.preset": "cpt"}, ".")
    with pytest.raises(ConfigError):
        cfg(data__mixture="a:1")
    items = {"preset": "switch-pbtk", "schedule.preset": "cpt", "data.mixture": "a:3,b:1",
             "data.source.a": "a.toks", "data.source.b": "/abs/b.toks"}
    c = build_config(items, "/cfg")
    assert c.data.sources == {"a": Path("/cfg/a.toks"), "b": Path("/abs/b.toks")}
    assert c.data.mixture.weights.tolist() == [0.75, 0.25]


def test_validate_files(tmp_path):
    c = build_config(dict(BASE), tmp_path)
    with pytest.raises(ConfigError, match="not found"):
        c.validate_files()
    (tmp_path / "x.toks").write_bytes(b"")
    c.validate_files()
    with pytest.raises(ConfigError, match="replay"):
        c.with_replay(0.4).validate_files()
    with pytest.raises(ConfigError):
        c.with_replay(-0.1)


def test_load_config_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("preset = switch-pbtk\nschedule.preset = cpt\ndata.train = x.toks\n")
    c = load_config(path, {"train.phase_id": "cpt-b", "train.task_id": "2"})
    assert (c.phase_id, c.task_id) == ("cpt-b", "2")
    assert c.output_dir == tmp_path / "runs/cpt-b"
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
