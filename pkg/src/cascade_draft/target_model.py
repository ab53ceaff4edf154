"""Small decoder-only transformer used as the verification ground truth.

Besides logits, every forward pass reports low/mid/high hidden states
(the outputs of three designated blocks) for the drafter. Tree forwards
attend through an ancestor mask so each node sees exactly its root path.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .layers import BLOCK_PARAMS, DecoderBlock, causal_mask, init_block
from .numerics import Tensor
from .serialization import load_tensors, save_tensors


class CapacityError(RuntimeError):
    pass


class MaskError(ValueError):
    pass


class CacheRangeError(IndexError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 256
    hidden_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    max_positions: int = 128
    rms_epsilon: float = 1e-5
    tap_low: int | None = None
    tap_mid: int | None = None
    tap_high: int | None = None

    def __post_init__(self):
        if self.vocab_size < 1 or self.hidden_dim < 1 or self.max_positions < 1:
            raise ValueError("vocab_size, hidden_dim and max_positions must be positive")
        if self.num_layers < 3:
            raise ValueError(f"num_layers must be >= 3 for distinct low/mid/high taps, got {self.num_layers}")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if not self.rms_epsilon > 0:
            raise ValueError("rms_epsilon must be positive")
        taps = self.taps
        if len(set(taps)) != 3 or not all(1 <= t <= self.num_layers for t in taps):
            raise ValueError(f"tap points must be distinct blocks in [1, {self.num_layers}], got {taps}")

    @property
    def taps(self) -> tuple[int, int, int]:
        """1-based block indices feeding the low, mid and high features."""
        low = self.tap_low if self.tap_low is not None else 1
        mid = self.tap_mid if self.tap_mid is not None else math.ceil(self.num_layers / 2)
        high = self.tap_high if self.tap_high is not None else self.num_layers
        return low, mid, high


@dataclass
class MultiLevelFeatures:
    """Low/mid/high hidden states for a run of consecutive positions, each [n, d]."""

    low: np.ndarray
    mid: np.ndarray
    high: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    def rows(self, index) -> MultiLevelFeatures:
        return MultiLevelFeatures(self.low[index], self.mid[index], self.high[index], self.positions[index])

    def stacked(self) -> np.ndarray:
        """[n, 3d] concatenation in low, mid, high order."""
        return np.concatenate([self.low, self.mid, self.high], axis=-1)


class KVCache:
    """Per-layer key/value store with a committed prefix and a speculative tail."""

    def __init__(self, num_layers: int, dim: int, capacity: int):
        self.keys = np.zeros((num_layers, capacity, dim), dtype=np.float32)
        self.values = np.zeros((num_layers, capacity, dim), dtype=np.float32)
        self.committed_len = 0
        self.speculative_len = 0

    @property
    def capacity(self) -> int:
        return self.keys.shape[1]

    @property
    def length(self) -> int:
        return self.committed_len + self.speculative_len

    def past(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        n = self.length
        return self.keys[layer, :n], self.values[layer, :n]

    def reserve(self, n: int) -> None:
        if self.length + n > self.capacity:
            raise CapacityError(
                f"KV cache overflow: {n} new entries at position {self.length} exceed capacity {self.capacity}")

    def write(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        start = self.length
        self.keys[layer, start:start + len(k)] = k
        self.values[layer, start:start + len(v)] = v

    def advance(self, n: int) -> None:
        self.speculative_len += n

    def commit(self, n: int, keep=None) -> None:
        """Keep ``n`` speculative entries (``keep``: their offsets, default the first ``n``)."""
        if n > self.speculative_len or n < 0:
            raise CacheRangeError(f"cannot commit {n} of {self.speculative_len} speculative entries")
        keep = np.arange(n) if keep is None else np.asarray(keep, dtype=np.int64)
        if len(keep) != n or (n and (keep.min() < 0 or keep.max() >= self.speculative_len)):
            raise CacheRangeError(f"commit offsets {keep.tolist()} invalid for {self.speculative_len} entries")
        c = self.committed_len
        src = c + keep
        self.keys[:, c:c + n] = self.keys[:, src]
        self.values[:, c:c + n] = self.values[:, src]
        self.committed_len += n
        self.speculative_len = 0

    def rollback(self) -> None:
        self.speculative_len = 0

    def truncate(self, n: int) -> None:
        self.committed_len = n
        self.speculative_len = 0

    def copy(self) -> KVCache:
        other = KVCache.__new__(KVCache)
        other.keys = self.keys.copy()
        other.values = self.values.copy()
        other.committed_len = self.committed_len
        other.speculative_len = self.speculative_len
        return other


def ancestor_mask(parents) -> np.ndarray:
    """mask[i, j] iff j == i or j is a strict ancestor of i (parents[i] < 0 is a root)."""
    n = len(parents)
    mask = np.eye(n, dtype=bool)
    for i, par in enumerate(parents):
        if par >= i:
            raise MaskError(f"node {i} has parent {par}; nodes must follow their parents")
        if par >= 0:
            mask[i] |= mask[par]
    return mask


class TargetModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.blocks = [
            DecoderBlock({k: params[f"blocks.{i}.{k}"] for k in BLOCK_PARAMS}, config.num_heads, config.rms_epsilon)
            for i in range(config.num_layers)
        ]
        self.forward_calls = 0

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> TargetModel:
        rng = np.random.default_rng(seed)
        d, v = config.hidden_dim, config.vocab_size
        params = {
            "tok_emb": Tensor(rng.normal(0.0, 0.1, size=(v, d)).astype(np.float32), requires_grad=True),
            "pos_emb": Tensor(rng.normal(0.0, 0.1, size=(config.max_positions, d)).astype(np.float32),
                              requires_grad=True),
            "final_norm": Tensor(np.ones(d, np.float32), requires_grad=True),
        }
        for i in range(config.num_layers):
            for k, t in init_block(rng, d, config.num_layers).items():
                params[f"blocks.{i}.{k}"] = t
        return cls(config, params)

    # --- parameters ----------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def astype(self, dtype) -> TargetModel:
        """Copy with every parameter cast to ``dtype`` (float64 for gradient checks)."""
        params = {k: Tensor(t.data, requires_grad=t.requires_grad, dtype=dtype) for k, t in self.params.items()}
        return TargetModel(self.config, params)

    def freeze(self) -> TargetModel:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        return self

    def save_weights(self, path: str | os.PathLike) -> None:
        save_tensors(path, {k: t.data for k, t in self.params.items()})

    @classmethod
    def load_weights(cls, path: str | os.PathLike, config: ModelConfig) -> TargetModel:
        arrays = load_tensors(path)
        ref = cls.init(config)
        unknown = sorted(set(arrays) - set(ref.params))
        if unknown:
            raise ValueError(f"unknown tensor names in {path}: {unknown}")
        missing = sorted(set(ref.params) - set(arrays))
        if missing:
            raise ValueError(f"missing tensors in {path}: {missing}")
        for k, t in ref.params.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"tensor {k!r} has shape {arrays[k].shape}, config expects {t.shape}")
        params = {k: Tensor(arrays[k], requires_grad=False) for k in ref.params}
        return cls(config, params)

    # --- forward -------------------------------------------------------

    def embed(self, tokens) -> Tensor:
        return nx.embedding(self.params["tok_emb"], tokens)

    def head(self, hidden: Tensor) -> Tensor:
        """Final norm followed by the tied-embedding projection."""
        normed = nx.rms_norm(hidden, self.params["final_norm"], self.config.rms_epsilon)
        return normed @ nx.transpose(self.params["tok_emb"], (1, 0))

    def _forward(self, tokens: np.ndarray, positions: np.ndarray, mask: np.ndarray,
                 cache: KVCache | None):
        """Shared body: tokens [B, T] -> (logits [B, T, V], tapped hidden states)."""
        cfg = self.config
        if positions.size and positions.max() >= cfg.max_positions:
            raise CapacityError(f"position {int(positions.max())} exceeds max_positions {cfg.max_positions}")
        if cache is not None:
            cache.reserve(tokens.shape[1])
        x = self.embed(tokens) + nx.embedding(self.params["pos_emb"], positions)
        taps = {t: None for t in cfg.taps}
        for i, block in enumerate(self.blocks):
            past_k = past_v = None
            if cache is not None:
                past_k, past_v = cache.past(i)
            x, k, v = block.forward(x, mask, past_k, past_v)
            if cache is not None:
                cache.write(i, k[0], v[0])
            if i + 1 in taps:
                taps[i + 1] = x
        if cache is not None:
            cache.advance(tokens.shape[1])
        logits = self.head(x)
        low, mid, high = (taps[t] for t in cfg.taps)
        return logits, low, mid, high

    def forward_train(self, tokens: np.ndarray):
        """Batched causal forward without a cache: tokens [B, T]."""
        tokens = np.asarray(tokens, dtype=np.int64)
        t = tokens.shape[1]
        return self._forward(tokens, np.arange(t), causal_mask(t), None)

    def forward_extend(self, tokens, cache: KVCache, commit: bool = True):
        """Append ``tokens`` after the committed prefix with causal attention."""
        tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
        if cache.speculative_len:
            raise CapacityError("cache holds uncommitted speculative entries")
        n = tokens.shape[1]
        start = cache.committed_len
        positions = np.arange(start, start + n)
        self.forward_calls += 1
        if n == 0:
            d = self.config.hidden_dim
            empty = np.zeros((0, d), np.float32)
            return np.zeros((0, self.config.vocab_size), np.float32), \
                MultiLevelFeatures(empty, empty, empty, positions)
        logits, low, mid, high = self._forward(tokens, positions, causal_mask(n, start), cache)
        if commit:
            cache.commit(n)
        feats = MultiLevelFeatures(low.data[0], mid.data[0], high.data[0], positions)
        return logits.data[0], feats

    def forward_prefill(self, tokens, cache: KVCache):
        if cache.length:
            raise CapacityError("prefill needs an empty cache")
        if len(tokens) > self.config.max_positions:
            raise CapacityError(f"prompt of {len(tokens)} tokens exceeds max_positions {self.config.max_positions}")
        return self.forward_extend(tokens, cache, commit=True)

    def forward_tree(self, tokens, tree_mask: np.ndarray, parents, cache: KVCache):
        """Score a token tree appended after the committed prefix.

        ``parents[i]`` is the index of node ``i``'s parent or -1 when it hangs
        directly off the prefix. ``tree_mask`` must be the reflexive ancestor
        closure of ``parents``. Entries land in the cache as speculative.
        """
        tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
        if cache.speculative_len:
            raise CapacityError("cache holds uncommitted speculative entries")
        expected = ancestor_mask(parents)
        tree_mask = np.asarray(tree_mask, dtype=bool)
        if tree_mask.shape != expected.shape or not np.array_equal(tree_mask, expected):
            raise MaskError("tree mask is not the ancestor closure of the parent links")
        depth = tree_mask.sum(axis=1)
        start = cache.committed_len
        positions = start + depth - 1
        mask = np.concatenate([np.ones((len(depth), start), dtype=bool), tree_mask], axis=1)
        self.forward_calls += 1
        logits, low, mid, high = self._forward(tokens, positions, mask, cache)
        feats = MultiLevelFeatures(low.data[0], mid.data[0], high.data[0], positions)
        return logits.data[0], feats

    def new_cache(self, extra: int = 0) -> KVCache:
        """Cache sized for every position plus ``extra`` slots of speculative headroom."""
        return KVCache(self.config.num_layers, self.config.hidden_dim, self.config.max_positions + extra)

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()
