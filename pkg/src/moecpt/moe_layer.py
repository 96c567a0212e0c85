"""Top-k mixture-of-experts feed-forward layer.

A linear router scores every token against E experts. The k highest
scoring experts are kept (penalty mode: raw softmax; Sinkhorn mode during
training: the balanced plan). The selected experts' raw probabilities are
renormalised into gate weights, and the layer output is the gate-weighted
sum of GEGLU expert outputs plus an optional always-on shared expert.
Every token keeps exactly k experts; nothing is dropped.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numeric_core as nc
from .balancing import (DEFAULT_AUX_COEFF, DEFAULT_SINKHORN_MAX_ITERATIONS,
                        DEFAULT_SINKHORN_TOLERANCE, DEFAULT_Z_COEFF, sinkhorn_balance)
from .errors import ConfigError
from .numeric_core import Matrix

ROUTER_INIT_SCALE = 0.1


class Balancing(str, enum.Enum):
    PENALTY = "pbtk"
    SINKHORN = "sbtk"


class Mode(str, enum.Enum):
    TRAIN = "train"
    INFERENCE = "inference"


@dataclass(frozen=True)
class MoeLayerConfig:
    hidden_size: int
    num_routed_experts: int
    active_experts: int
    shared_expert: bool = False
    expert_intermediate_size: int = 16
    balancing: Balancing = Balancing.PENALTY
    aux_coeff: float = DEFAULT_AUX_COEFF
    z_coeff: float = DEFAULT_Z_COEFF
    sinkhorn_tolerance: float = DEFAULT_SINKHORN_TOLERANCE
    sinkhorn_max_iterations: int = DEFAULT_SINKHORN_MAX_ITERATIONS

    def __post_init__(self):
        if self.hidden_size < 1:
            raise ConfigError("hidden_size must be >= 1")
        if not 1 <= self.active_experts <= self.num_routed_experts:
            raise ConfigError(
                f"need 1 <= k <= E, got k={self.active_experts}, E={self.num_routed_experts}")
        if self.expert_intermediate_size < 1:
            raise ConfigError("expert_intermediate_size must be >= 1")
        if self.aux_coeff < 0 or self.z_coeff < 0:
            raise ConfigError("penalty coefficients must be >= 0")
        if self.sinkhorn_tolerance <= 0:
            raise ConfigError("sinkhorn_tolerance must be > 0")
        object.__setattr__(self, "balancing", Balancing(self.balancing))


def dense_intermediate(hidden_size: int) -> int:
    return round(hidden_size * 8 / 3)


def granular_config(hidden_size: int, balancing: Balancing | str = Balancing.PENALTY) -> MoeLayerConfig:
    """31 routed experts, 3 active, one shared; experts 1/4 of dense width."""
    return _with_mode_defaults(MoeLayerConfig(
        hidden_size=hidden_size, num_routed_experts=31, active_experts=3, shared_expert=True,
        expert_intermediate_size=max(1, round(dense_intermediate(hidden_size) / 4)),
        balancing=Balancing(balancing)))


def switch_config(hidden_size: int, balancing: Balancing | str = Balancing.PENALTY) -> MoeLayerConfig:
    """8 full-width routed experts, 1 active, no shared expert."""
    return _with_mode_defaults(MoeLayerConfig(
        hidden_size=hidden_size, num_routed_experts=8, active_experts=1, shared_expert=False,
        expert_intermediate_size=dense_intermediate(hidden_size),
        balancing=Balancing(balancing)))


def _with_mode_defaults(cfg: MoeLayerConfig) -> MoeLayerConfig:
    # Sinkhorn-balanced runs train on the LM loss alone
    if cfg.balancing is Balancing.SINKHORN:
        return replace(cfg, aux_coeff=0.0, z_coeff=0.0)
    return cfg


@dataclass
class RoutingOutcome:
    selected: np.ndarray        # T x k expert ids, best first
    gate_weights: np.ndarray    # T x k, rows sum to 1
    raw_probs: np.ndarray       # T x E
    balanced_probs: np.ndarray  # T x E (== raw_probs unless Sinkhorn + train)
    logits: np.ndarray          # T x E
    sinkhorn_iterations: int = 0
    sinkhorn_converged: bool = True
    # tape handles for building losses; not part of the record
    probs_node: Matrix | None = field(default=None, repr=False, compare=False)
    logits_node: Matrix | None = field(default=None, repr=False, compare=False)
    gates_node: Matrix | None = field(default=None, repr=False, compare=False)

    @property
    def num_tokens(self) -> int:
        return self.selected.shape[0]

    def expert_counts(self, num_experts: int) -> np.ndarray:
        return np.bincount(self.selected.ravel(), minlength=num_experts)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, ties to the lower index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


class ExpertFfn:
    """GEGLU feed-forward: (gelu(x Wg) * (x Wu)) Wd."""

    def __init__(self, gate: Matrix, up: Matrix, down: Matrix) -> None:
        if gate.shape != up.shape or down.shape != (gate.cols, gate.rows):
            raise ConfigError("inconsistent expert weight shapes")
        self.gate, self.up, self.down = gate, up, down

    @classmethod
    def init(cls, hidden: int, inter: int, rng: np.random.Generator) -> "ExpertFfn":
        def he(fan_in, shape):
            b = math.sqrt(6.0 / fan_in)
            return Matrix(rng.uniform(-b, b, size=shape), requires_grad=True)
        return cls(he(hidden, (hidden, inter)), he(hidden, (hidden, inter)), he(inter, (inter, hidden)))

    def params(self) -> dict[str, Matrix]:
        return {"gate": self.gate, "up": self.up, "down": self.down}

    def __call__(self, x: Matrix) -> Matrix:
        h = nc.mul(nc.gelu(nc.matmul(x, self.gate)), nc.matmul(x, self.up))
        return nc.matmul(h, self.down)


class MoeLayer:
    """Router + routed experts + optional shared expert.

    Parameters of expert ``e`` in layer ``l`` come from ``make_rng(seed, l, e)``;
    the router uses stream ``(seed, l, 10000)`` and the shared expert
    ``(seed, l, 10001)``.
    """

    def __init__(self, config: MoeLayerConfig, router: Matrix, experts: list[ExpertFfn],
                 shared: ExpertFfn | None) -> None:
        if router.shape != (config.hidden_size, config.num_routed_experts):
            raise ConfigError("router shape must be H x E")
        if len(experts) != config.num_routed_experts:
            raise ConfigError("expert count must equal E")
        if config.shared_expert != (shared is not None):
            raise ConfigError("shared expert presence must match config")
        self.config = config
        self.router = router
        self.experts = experts
        self.shared = shared

    @classmethod
    def init(cls, config: MoeLayerConfig, seed: int, layer_index: int = 0) -> "MoeLayer":
        h, e, i = config.hidden_size, config.num_routed_experts, config.expert_intermediate_size
        rrng = nc.make_rng(seed, layer_index, 10000)
        b = ROUTER_INIT_SCALE * math.sqrt(6.0 / h)
        router = Matrix(rrng.uniform(-b, b, size=(h, e)), requires_grad=True)
        experts = [ExpertFfn.init(h, i, nc.make_rng(seed, layer_index, j)) for j in range(e)]
        shared = ExpertFfn.init(h, i, nc.make_rng(seed, layer_index, 10001)) if config.shared_expert else None
        return cls(config, router, experts, shared)

    def params(self) -> dict[str, Matrix]:
        out = {"router": self.router}
        for j, ex in enumerate(self.experts):
            for n, p in ex.params().items():
                out[f"expert.{j}.{n}"] = p
        if self.shared is not None:
            for n, p in self.shared.params().items():
                out[f"shared.{n}"] = p
        return out

    # ------------------------------------------------------------ routing

    def route(self, tokens: Matrix, mode: Mode | str = Mode.TRAIN,
              selection: np.ndarray | None = None) -> RoutingOutcome:
        """Route ``tokens``; ``selection`` pins the expert choice (T x k)."""
        cfg = self.config
        if tokens.cols != cfg.hidden_size:
            raise ConfigError(f"tokens have {tokens.cols} features, layer expects {cfg.hidden_size}")
        mode = Mode(mode)
        logits = nc.matmul(tokens, self.router)
        probs = nc.softmax_rows(logits)
        raw = probs.data
        iters, converged = 0, True
        if cfg.balancing is Balancing.SINKHORN and mode is Mode.TRAIN:
            sb = sinkhorn_balance(logits.data, cfg.sinkhorn_tolerance, cfg.sinkhorn_max_iterations)
            balanced = sb.adjusted
            iters, converged = sb.iterations, sb.converged
        else:
            balanced = raw
        if selection is None:
            selected = top_k(balanced, cfg.active_experts)
        else:
            selected = np.asarray(selection, dtype=np.intp)
            if selected.shape != (tokens.rows, cfg.active_experts):
                raise ConfigError("pinned selection must be T x k")
        gates = nc.normalize_rows(nc.take_along_rows(probs, selected))
        return RoutingOutcome(selected=selected, gate_weights=gates.data, raw_probs=raw,
                              balanced_probs=balanced, logits=logits.data,
                              sinkhorn_iterations=iters, sinkhorn_converged=converged,
                              probs_node=probs, logits_node=logits, gates_node=gates)

    def forward(self, tokens: Matrix, mode: Mode | str = Mode.TRAIN,
                selection: np.ndarray | None = None) -> tuple[Matrix, RoutingOutcome]:
        outcome = self.route(tokens, mode, selection)
        n = tokens.rows
        sel = outcome.selected
        parts, rows = [], []
        for e, expert in enumerate(self.experts):
            tok, slot = np.nonzero(sel == e)
            if tok.size == 0:
                continue
            y = expert(nc.take_rows(tokens, tok))
            w = nc.gather_elements(outcome.gates_node, tok, slot)
            parts.append(nc.mul(y, w))
            rows.append(tok)
        out = nc.scatter_add_rows(n, np.concatenate(rows), nc.concat_rows(parts))
        if self.shared is not None:
            out = nc.add(out, self.shared(tokens))
        return out, outcome
