"""Toy decoder-only MoE language model.

Pre-norm blocks: ``x += attn(norm(x))`` (optional single-head causal
attention) then ``x += moe(norm(x))``. Learned token and position
embeddings, untied LM head.
"""
from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numeric_core as nc
from .balancing import aux_loss_term, z_loss_term
from .errors import ConfigError
from .moe_layer import Balancing, Mode, MoeLayer, MoeLayerConfig, RoutingOutcome, granular_config, switch_config
from .numeric_core import Matrix


class Attention(str, enum.Enum):
    NONE = "none"
    MINIMAL = "minimal"


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    hidden_size: int = 64
    vocab_size: int = 256
    seq_len: int = 64
    moe: MoeLayerConfig | None = None
    attention: Attention = Attention.MINIMAL
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "attention", Attention(self.attention))
        for name in ("num_layers", "hidden_size", "vocab_size", "seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.moe is None:
            object.__setattr__(self, "moe", granular_config(self.hidden_size))
        if self.moe.hidden_size != self.hidden_size:
            raise ConfigError("moe.hidden_size must equal hidden_size")

    def to_items(self) -> dict[str, str]:
        """Flat ``model.*`` keys; what the config hash is computed over."""
        out = {}
        for f in fields(self):
            if f.name == "moe":
                for k, v in asdict(self.moe).items():
                    out[f"model.moe.{k}"] = _fmt(v)
            else:
                out[f"model.{f.name}"] = _fmt(getattr(self, f.name))
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        moe_kw, kw = {}, {}
        moe_types = {f.name: f.type for f in fields(MoeLayerConfig)}
        for key, val in items.items():
            if key.startswith("model.moe."):
                name = key[len("model.moe."):]
                moe_kw[name] = _parse(val, moe_types[name])
            elif key.startswith("model."):
                name = key[len("model."):]
                kw[name] = _parse(val, {f.name: f.type for f in fields(cls)}[name])
        return cls(moe=MoeLayerConfig(**moe_kw), **kw)

    def config_hash(self) -> bytes:
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.to_items().items()))
        return hashlib.sha256(text.encode()).digest()


def _fmt(v) -> str:
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, type_name):
    t = str(type_name)
    if "bool" in t:
        return text.strip().lower() in ("1", "true", "yes")
    if "float" in t:
        return float(text)
    if "int" in t:
        return int(text)
    return text


PRESETS = {
    "granular-pbtk": (granular_config, Balancing.PENALTY),
    "granular-sbtk": (granular_config, Balancing.SINKHORN),
    "switch-pbtk": (switch_config, Balancing.PENALTY),
    "switch-sbtk": (switch_config, Balancing.SINKHORN),
}


def preset_config(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    make, bal = PRESETS[name]
    hidden = overrides.get("hidden_size", ModelConfig.hidden_size)
    return ModelConfig(moe=make(hidden, bal), **overrides)


def _uniform(rng: np.random.Generator, bound: float, shape) -> Matrix:
    return Matrix(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Block:
    def __init__(self, config: ModelConfig, index: int) -> None:
        h = config.hidden_size
        self.attention = config.attention is Attention.MINIMAL
        rng = nc.make_rng(config.seed, index, 20000)
        self.norm1 = Matrix(np.ones((1, h)), requires_grad=True)
        self.norm2 = Matrix(np.ones((1, h)), requires_grad=True)
        if self.attention:
            b = math.sqrt(3.0 / h)
            self.wq, self.wk, self.wv = (_uniform(rng, b, (h, h)) for _ in range(3))
            self.wo = _uniform(rng, b / math.sqrt(2 * config.num_layers), (h, h))
        self.moe = MoeLayer.init(config.moe, config.seed, index)

    def params(self) -> dict[str, Matrix]:
        out = {"norm1": self.norm1, "norm2": self.norm2}
        if self.attention:
            out.update(attn_q=self.wq, attn_k=self.wk, attn_v=self.wv, attn_o=self.wo)
        out.update({f"moe.{k}": v for k, v in self.moe.params().items()})
        return out

    def __call__(self, x: Matrix, n_seq: int, seq_len: int, mode: Mode,
                 selection: np.ndarray | None = None) -> tuple[Matrix, RoutingOutcome]:
        if self.attention:
            n = nc.rmsnorm(x, self.norm1)
            att = nc.causal_attention(nc.matmul(n, self.wq), nc.matmul(n, self.wk),
                                      nc.matmul(n, self.wv), n_seq, seq_len)
            x = nc.add(x, nc.matmul(att, self.wo))
        y, outcome = self.moe.forward(nc.rmsnorm(x, self.norm2), mode, selection)
        return nc.add(x, y), outcome


@dataclass
class ForwardResult:
    logits: Matrix
    outcomes: list[RoutingOutcome]


@dataclass
class LossBreakdown:
    total: Matrix
    lm_loss: float
    aux_loss: float   # summed over layers
    z_loss: float     # summed over layers
    outcomes: list[RoutingOutcome]

    @property
    def total_loss(self) -> float:
        return self.total.item()


class MoeLM:
    def __init__(self, config: ModelConfig) -> None:
        self.config = config
        h, v, s = config.hidden_size, config.vocab_size, config.seq_len
        rng = nc.make_rng(config.seed, 30000)
        self.embed = Matrix(rng.normal(0.0, 1.0, size=(v, h)), requires_grad=True)
        self.pos = Matrix(rng.normal(0.0, 0.1, size=(s, h)), requires_grad=True)
        self.blocks = [Block(config, j) for j in range(config.num_layers)]
        self.final_norm = Matrix(np.ones((1, h)), requires_grad=True)
        self.lm_head = Matrix(rng.uniform(-0.01, 0.01, size=(h, v)), requires_grad=True)

    def params(self) -> dict[str, Matrix]:
        """All trainable tensors in a fixed order (the checkpoint order)."""
        out = {"embed": self.embed, "pos": self.pos}
        for j, blk in enumerate(self.blocks):
            out.update({f"layer.{j}.{k}": p for k, p in blk.params().items()})
        out["final_norm"] = self.final_norm
        out["lm_head"] = self.lm_head
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = set(params) - set(tensors)
        if missing:
            raise ConfigError(f"state is missing tensors: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"{name}: shape {arr.shape} != {p.shape}")
            arr = arr.copy()
            arr.flags.writeable = False
            p.data = arr

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params().items()}

    def forward(self, tokens: np.ndarray, mode: Mode | str = Mode.TRAIN,
                selections: list[np.ndarray] | None = None) -> ForwardResult:
        tokens = np.asarray(tokens)
        n_seq, seq_len = tokens.shape
        if seq_len > self.config.seq_len:
            raise ConfigError(f"sequence length {seq_len} exceeds model seq_len {self.config.seq_len}")
        mode = Mode(mode)
        x = nc.add(nc.take_rows(self.embed, tokens.ravel()),
                   nc.take_rows(self.pos, np.tile(np.arange(seq_len), n_seq)))
        outcomes = []
        for j, blk in enumerate(self.blocks):
            x, oc = blk(x, n_seq, seq_len, mode, None if selections is None else selections[j])
            outcomes.append(oc)
        logits = nc.matmul(nc.rmsnorm(x, self.final_norm), self.lm_head)
        return ForwardResult(logits, outcomes)

    def loss(self, batch_tokens: np.ndarray, mode: Mode | str = Mode.TRAIN,
             selections: list[np.ndarray] | None = None) -> LossBreakdown:
        """LM cross-entropy plus aux/z penalties weighted by the layer config.

        ``batch_tokens`` is (n_seq, seq_len + 1); targets are the shift.
        """
        batch_tokens = np.asarray(batch_tokens)
        inputs, targets = batch_tokens[:, :-1], batch_tokens[:, 1:]
        fr = self.forward(inputs, mode, selections)
        lm = nc.cross_entropy(fr.logits, targets.ravel())
        cfg = self.config.moe
        total = lm
        aux_sum = z_sum = 0.0
        for oc in fr.outcomes:
            aux = aux_loss_term(oc.probs_node, oc.selected, cfg.num_routed_experts)
            z = z_loss_term(oc.logits_node)
            aux_sum += aux.item()
            z_sum += z.item()
            if cfg.aux_coeff:
                total = nc.add(total, nc.scale(aux, cfg.aux_coeff))
            if cfg.z_coeff:
                total = nc.add(total, nc.scale(z, cfg.z_coeff))
        return LossBreakdown(total, lm.item(), aux_sum, z_sum, fr.outcomes)


def tensor_manifest(config: ModelConfig, with_optimizer: bool = False) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every checkpoint tensor implied by ``config``."""
    h, v, s = config.hidden_size, config.vocab_size, config.seq_len
    m = config.moe
    e, i = m.num_routed_experts, m.expert_intermediate_size
    out: dict[str, tuple[int, ...]] = {"embed": (v, h), "pos": (s, h)}
    for j in range(config.num_layers):
        p = f"layer.{j}."
        out[p + "norm1"] = (1, h)
        out[p + "norm2"] = (1, h)
        if config.attention is Attention.MINIMAL:
            for n in ("attn_q", "attn_k", "attn_v", "attn_o"):
                out[p + n] = (h, h)
        out[p + "moe.router"] = (h, e)
        experts = [f"expert.{x}" for x in range(e)] + (["shared"] if m.shared_expert else [])
        for ex in experts:
            out[p + f"moe.{ex}.gate"] = (h, i)
            out[p + f"moe.{ex}.up"] = (h, i)
            out[p + f"moe.{ex}.down"] = (i, h)
    out["final_norm"] = (1, h)
    out["lm_head"] = (h, v)
    if with_optimizer:
        base = dict(out)
        for prefix in ("adam.m.", "adam.v."):
            out.update({prefix + k: shp for k, shp in base.items()})
    return out
