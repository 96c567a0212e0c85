"""Token streams, replay accounting and batch composition.

Synthetic corpora are first-order Markov chains over the vocabulary. Each
profile owns a "home" half of the vocabulary (DistA the lower half, DistB
the upper half): every token's row puts 90% of its mass on four
successors drawn from the profile's home half, with weights
0.40/0.25/0.15/0.10, and spreads the remaining 10% uniformly over the
whole vocabulary. The transition table depends only on (profile,
vocab_size); the stream seed drives sampling. A stream is the
concatenation of independent blocks of ``BLOCK_LEN`` tokens, block ``b``
sampled from ``make_rng(seed, profile, b)``, so any position can be
reproduced without replaying the prefix.
"""
from __future__ import annotations

import enum
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, EndOfData
from .numeric_core import make_rng

BLOCK_LEN = 1024
TOKS_MAGIC = b"TOKS"
TOKS_VERSION = 1
_TOKS_HEADER = struct.Struct("<4sIII")
_SUCCESSOR_WEIGHTS = np.array([0.40, 0.25, 0.15, 0.10])
_BACKGROUND_MASS = 0.10
_TABLE_KEY = 0x7AB1E


class Profile(str, enum.Enum):
    A = "a"
    B = "b"

    @property
    def index(self) -> int:
        return 0 if self is Profile.A else 1


class TokenStream(Protocol):
    source_id: str
    vocab_size: int

    def read(self, start: int, n: int) -> np.ndarray: ...


def transition_table(profile: Profile | str, vocab_size: int) -> np.ndarray:
    """Row-stochastic V x V matrix for a synthetic profile."""
    profile = Profile(profile)
    if vocab_size < 8:
        raise ConfigError("vocab_size must be >= 8")
    half = vocab_size // 2
    home = np.arange(half) if profile is Profile.A else np.arange(half, vocab_size)
    rng = make_rng(_TABLE_KEY, profile.index, vocab_size)
    table = np.full((vocab_size, vocab_size), _BACKGROUND_MASS / vocab_size)
    for row in range(vocab_size):
        succ = rng.choice(home, size=len(_SUCCESSOR_WEIGHTS), replace=False)
        table[row, succ] += _SUCCESSOR_WEIGHTS
    return table / table.sum(axis=1, keepdims=True)


class MarkovStream:
    """Infinite, seekable synthetic token stream."""

    def __init__(self, profile: Profile | str, vocab_size: int, seed: int, cache_blocks: int = 256) -> None:
        self.profile = Profile(profile)
        self.vocab_size = vocab_size
        self.seed = seed
        self.source_id = f"dist{self.profile.value}"
        table = transition_table(self.profile, vocab_size)
        self._cum = np.cumsum(table, axis=1)
        self._cum[:, -1] = 1.0
        half = vocab_size // 2
        self._home = (0, half) if self.profile is Profile.A else (half, vocab_size)
        self._cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self._cache_blocks = cache_blocks

    def _generate(self, blocks: Sequence[int]) -> np.ndarray:
        n = len(blocks)
        u = np.empty((n, BLOCK_LEN))
        first = np.empty(n, dtype=np.int64)
        for i, b in enumerate(blocks):
            rng = make_rng(self.seed, self.profile.index, b)
            first[i] = rng.integers(*self._home)
            u[i] = rng.random(BLOCK_LEN)
        out = np.empty((n, BLOCK_LEN), dtype=np.int64)
        out[:, 0] = first
        prev = first
        for t in range(1, BLOCK_LEN):
            cur = (self._cum[prev] < u[:, t:t + 1]).sum(axis=1)
            out[:, t] = cur
            prev = cur
        return out

    def _blocks(self, ids: range) -> list[np.ndarray]:
        missing = [b for b in ids if b not in self._cache]
        if missing:
            for b, arr in zip(missing, self._generate(missing)):
                self._cache[b] = arr
        result = []
        for b in ids:
            self._cache.move_to_end(b)
            result.append(self._cache[b])
        while len(self._cache) > max(self._cache_blocks, len(ids)):
            self._cache.popitem(last=False)
        return result

    def read(self, start: int, n: int) -> np.ndarray:
        if start < 0 or n < 0:
            raise ConfigError("read range must be non-negative")
        if n == 0:
            return np.empty(0, dtype=np.int64)
        b0, b1 = start // BLOCK_LEN, (start + n - 1) // BLOCK_LEN
        flat = np.concatenate(self._blocks(range(b0, b1 + 1)))
        off = start - b0 * BLOCK_LEN
        return flat[off:off + n]

    def read_many(self, starts: np.ndarray, n: int) -> np.ndarray:
        """Rows ``read(s, n)`` for each start, generating blocks in one pass."""
        needed = sorted({b for s in starts for b in range(s // BLOCK_LEN, (s + n - 1) // BLOCK_LEN + 1)})
        missing = [b for b in needed if b not in self._cache]
        if missing:
            for b, arr in zip(missing, self._generate(missing)):
                self._cache[b] = arr
        out = np.empty((len(starts), n), dtype=np.int64)
        for i, s in enumerate(starts):
            b0, b1 = s // BLOCK_LEN, (s + n - 1) // BLOCK_LEN
            flat = np.concatenate([self._cache[b] for b in range(b0, b1 + 1)])
            out[i] = flat[s - b0 * BLOCK_LEN:s - b0 * BLOCK_LEN + n]
        while len(self._cache) > max(self._cache_blocks, len(needed)):
            self._cache.popitem(last=False)
        return out


def synth_corpus(profile: Profile | str, vocab_size: int, seed: int) -> MarkovStream:
    if vocab_size < 8:
        raise ConfigError("vocab_size must be >= 8")
    return MarkovStream(profile, vocab_size, seed)


# ---------------------------------------------------------------- TOKS files


def write_tokens(path: str | Path, tokens: np.ndarray, vocab_size: int) -> None:
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise ConfigError("token ids outside [0, vocab_size)")
    with open(path, "wb") as fh:
        fh.write(_TOKS_HEADER.pack(TOKS_MAGIC, TOKS_VERSION, vocab_size, 0))
        fh.write(tokens.astype("<u4").tobytes())


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_TOKS_HEADER.size)
    if len(raw) < _TOKS_HEADER.size:
        raise ConfigError(f"{path}: truncated TOKS header")
    magic, version, vocab, reserved = _TOKS_HEADER.unpack(raw)
    if magic != TOKS_MAGIC:
        raise ConfigError(f"{path}: bad magic {magic!r}")
    if version != TOKS_VERSION:
        raise ConfigError(f"{path}: unsupported TOKS version {version}")
    return {"magic": magic.decode(), "version": version, "vocab_size": vocab, "reserved": reserved}


class FileStream:
    """Finite stream over a TOKS file."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        hdr = read_header(self.path)
        self.vocab_size = hdr["vocab_size"]
        self.source_id = self.path.stem
        self._data = np.memmap(self.path, dtype="<u4", mode="r", offset=_TOKS_HEADER.size)

    def __len__(self) -> int:
        return len(self._data)

    def read(self, start: int, n: int) -> np.ndarray:
        if start < 0 or start + n > len(self._data):
            raise EndOfData(f"{self.path}: requested [{start}, {start + n}) of {len(self._data)} tokens")
        return np.asarray(self._data[start:start + n], dtype=np.int64)

    def read_many(self, starts: np.ndarray, n: int) -> np.ndarray:
        return np.stack([self.read(int(s), n) for s in starts]) if len(starts) else np.empty((0, n), np.int64)


def read_items(stream, starts: np.ndarray, n: int) -> np.ndarray:
    if hasattr(stream, "read_many"):
        return stream.read_many(np.asarray(starts, dtype=np.int64), n)
    return np.stack([stream.read(int(s), n) for s in starts]) if len(starts) else np.empty((0, n), np.int64)


# ---------------------------------------------------------------- mixtures


@dataclass(frozen=True)
class MixtureSpec:
    components: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if not self.components:
            raise ConfigError("mixture needs at least one component")
        if any(w < 0 for _, w in self.components):
            raise ConfigError("mixture weights must be >= 0")
        total = sum(w for _, w in self.components)
        if total <= 0:
            raise ConfigError("mixture weights must not all be zero")
        object.__setattr__(self, "components",
                           tuple((s, w / total) for s, w in self.components))

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.components])

    @classmethod
    def parse(cls, text: str) -> "MixtureSpec":
        """``"a:0.7,b:0.3"`` style."""
        comps = []
        for part in text.split(","):
            name, _, w = part.partition(":")
            comps.append((name.strip(), float(w) if w else 1.0))
        return cls(tuple(comps))


class MixtureStream:
    """Item ``i`` comes from a component picked with the mixture weights.

    The component's own item ``i`` is used, so every source stays seekable
    at the cost of skipping items of the sources that were not chosen.
    """

    def __init__(self, spec: MixtureSpec, sources: dict[str, TokenStream], seed: int) -> None:
        missing = [s for s, _ in spec.components if s not in sources]
        if missing:
            raise ConfigError(f"mixture references unknown sources {missing}")
        vocab = {sources[s].vocab_size for s, _ in spec.components}
        if len(vocab) != 1:
            raise ConfigError("mixture sources disagree on vocab_size")
        self.spec = spec
        self.sources = [sources[s] for s, _ in spec.components]
        self.vocab_size = vocab.pop()
        self.source_id = "+".join(s for s, _ in spec.components)
        self.seed = seed

    def choices(self, first_item: int, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.int64)
        cum = np.cumsum(self.spec.weights)
        cum[-1] = 1.0
        for i in range(n):
            item = first_item + i
            u = make_rng(self.seed, 0x313, item).random()
            out[i] = int(np.searchsorted(cum, u, side="right"))
        return out

    def read_many(self, starts: np.ndarray, n: int) -> np.ndarray:
        # starts must be item-aligned: start = item * n
        items = np.asarray(starts) // n
        out = np.empty((len(starts), n), dtype=np.int64)
        comps = np.array([self.choices(int(i), 1)[0] for i in items], dtype=np.int64)
        for c, src in enumerate(self.sources):
            idx = np.nonzero(comps == c)[0]
            if idx.size:
                out[idx] = read_items(src, np.asarray(starts)[idx], n)
        return out

    def read(self, start: int, n: int) -> np.ndarray:
        return self.read_many(np.array([start]), n)[0]


# ---------------------------------------------------------------- replay


@dataclass(frozen=True)
class ReplayPlan:
    replay_fraction: float
    total_token_budget: int
    new_tokens: int
    replay_tokens: int


def replay_quota(r: float, n: int) -> int:
    """round(r * n), halves to even."""
    return int(round(r * n))


def plan_replay(r: float, budget: int) -> ReplayPlan:
    if not 0.0 <= r <= 1.0:
        raise ConfigError(f"replay fraction {r} outside [0, 1]")
    if budget < 1:
        raise ConfigError("token budget must be >= 1")
    replay = replay_quota(r, budget)
    return ReplayPlan(r, budget, budget - replay, replay)


@dataclass
class Batch:
    tokens: np.ndarray       # n_items x item_len
    from_replay: np.ndarray  # n_items bool

    @property
    def replay_count(self) -> int:
        return int(self.from_replay.sum())


def compose_batch(plan: ReplayPlan | float, new_stream, replay_stream, batch_tokens: int,
                  seed: int, step: int = 0, item_len: int = 1,
                  replay_pool: int | None = None) -> Batch:
    """Batch of ``batch_tokens`` items with an exact replay quota.

    ``round(r * batch_tokens)`` items come from ``replay_stream`` and the
    rest from ``new_stream``; items are ``item_len`` consecutive tokens
    (1 for token-level mixing, a packed sequence length for training).
    New items are read sequentially, so batch ``step`` continues where
    batch ``step - 1`` stopped. Replay items are drawn uniformly from the
    first ``replay_pool`` items of the replay stream, or read sequentially
    when no pool is given. Positions are shuffled by ``(seed, step)``.
    """
    r = plan.replay_fraction if isinstance(plan, ReplayPlan) else float(plan)
    if batch_tokens < 1:
        raise ConfigError("batch_tokens must be >= 1")
    if not 0.0 <= r <= 1.0:
        raise ConfigError(f"replay fraction {r} outside [0, 1]")
    n_rep = replay_quota(r, batch_tokens)
    n_new = batch_tokens - n_rep
    new_items = step * n_new + np.arange(n_new)
    if replay_pool is None:
        rep_items = step * n_rep + np.arange(n_rep)
    else:
        if replay_pool < 1:
            raise ConfigError("replay_pool must be >= 1")
        rep_items = make_rng(seed, step, 1).integers(0, replay_pool, size=n_rep)
    parts = []
    if n_new:
        parts.append(read_items(new_stream, new_items * item_len, item_len))
    if n_rep:
        parts.append(read_items(replay_stream, rep_items * item_len, item_len))
    tokens = np.concatenate(parts, axis=0)
    origin = np.concatenate([np.zeros(n_new, bool), np.ones(n_rep, bool)])
    perm = make_rng(seed, step, 2).permutation(batch_tokens)
    return Batch(tokens[perm], origin[perm])


class ReplayMixer:
    """Per-step batches of packed sequences for one training phase."""

    def __init__(self, new_stream, replay_stream=None, replay_fraction: float = 0.0,
                 batch_size: int = 32, seq_len: int = 64, seed: int = 0,
                 replay_pool: int | None = None) -> None:
        if replay_fraction > 0 and replay_stream is None:
            raise ConfigError("replay_fraction > 0 needs a replay stream")
        self.new_stream = new_stream
        self.replay_stream = replay_stream if replay_stream is not None else new_stream
        self.replay_fraction = replay_fraction
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.seed = seed
        self.replay_pool = replay_pool

    def batch(self, step: int) -> Batch:
        return compose_batch(self.replay_fraction, self.new_stream, self.replay_stream,
                             self.batch_size, self.seed, step=step, item_len=self.seq_len + 1,
                             replay_pool=self.replay_pool)

    @property
    def replay_per_batch(self) -> int:
        return replay_quota(self.replay_fraction, self.batch_size)
