"""Cascaded non-autoregressive drafter.

One call maps the fused target features of the last verified position and
the embedding of the next token through N serially connected decoder
levels; level i's hidden state, read out through the target's frozen LM
head, is the draft distribution i tokens ahead.

Each level keeps its own key/value cache over previously processed
positions, so drafting stays one pass per cycle while every level still
sees the committed context.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .layers import BLOCK_PARAMS, DecoderBlock, causal_mask, init_block
from .numerics import Tensor
from .serialization import load_tensors, save_tensors
from .target_model import KVCache, MultiLevelFeatures, TargetModel

STRUCTURES = ("cascade", "parallel")


class DrafterStateError(RuntimeError):
    pass


@dataclass
class DrafterConfig:
    depth: int = 7
    hidden_dim: int = 64
    num_heads: int = 4
    structure: str = "cascade"
    attend_context: bool = True
    rms_epsilon: float = 1e-5

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"drafter depth must be >= 1, got {self.depth}")
        if self.structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {STRUCTURES}, got {self.structure!r}")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")


@dataclass
class DraftOutput:
    hidden: list[np.ndarray]
    logits: np.ndarray  # [N, V]
    probs: np.ndarray  # [N, V]


@dataclass
class DrafterState:
    """Per-level caches plus the accepted positions not yet pushed through the cascade."""

    cache: KVCache
    pending_features: list[np.ndarray] = field(default_factory=list)
    pending_tokens: list[int] = field(default_factory=list)

    @property
    def committed_len(self) -> int:
        return self.cache.committed_len

    @property
    def aligned_len(self) -> int:
        return self.cache.committed_len + len(self.pending_tokens)


@dataclass
class DrafterCounters:
    draft_calls: int = 0
    level_evals: int = 0
    head_projections: int = 0


class CascadeDrafter:
    def __init__(self, config: DrafterConfig, params: dict[str, Tensor], target: TargetModel):
        if config.hidden_dim != target.config.hidden_dim:
            raise ValueError(
                f"drafter hidden_dim {config.hidden_dim} != target hidden_dim {target.config.hidden_dim}")
        self.config = config
        self.params = params
        self.target = target
        self.levels = [
            DecoderBlock({k: params[f"cascade.{i}.{k}"] for k in BLOCK_PARAMS}, config.num_heads,
                         config.rms_epsilon)
            for i in range(config.depth)
        ]
        self.counters = DrafterCounters()

    @classmethod
    def init(cls, config: DrafterConfig, target: TargetModel, seed: int = 0) -> CascadeDrafter:
        rng = np.random.default_rng(seed)
        d = config.hidden_dim

        def linear(fan_in, fan_out):
            w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)).astype(np.float32)
            return Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out, np.float32), requires_grad=True)

        params: dict[str, Tensor] = {}
        params["fc_fuse.weight"], params["fc_fuse.bias"] = linear(3 * d, d)
        params["fc_in.weight"], params["fc_in.bias"] = linear(2 * d, d)
        for i in range(config.depth):
            for k, t in init_block(rng, d, config.depth).items():
                params[f"cascade.{i}.{k}"] = t
        return cls(config, params, target)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def astype(self, dtype, target: TargetModel | None = None) -> CascadeDrafter:
        params = {k: Tensor(t.data, requires_grad=t.requires_grad, dtype=dtype) for k, t in self.params.items()}
        return CascadeDrafter(self.config, params, target if target is not None else self.target.astype(dtype))

    def with_structure(self, structure: str) -> CascadeDrafter:
        """Same weights, different level wiring (for the parallel-heads ablation)."""
        cfg = DrafterConfig(**{**self.config.__dict__, "structure": structure})
        return CascadeDrafter(cfg, self.params, self.target)

    def save_weights(self, path: str | os.PathLike) -> None:
        save_tensors(path, {k: t.data for k, t in self.params.items()})

    @classmethod
    def load_weights(cls, path: str | os.PathLike, config: DrafterConfig, target: TargetModel) -> CascadeDrafter:
        arrays = load_tensors(path)
        ref = cls.init(config, target)
        unknown = sorted(set(arrays) - set(ref.params))
        if unknown:
            raise ValueError(f"unknown tensor names in {path}: {unknown}")
        missing = sorted(set(ref.params) - set(arrays))
        if missing:
            raise ValueError(f"missing tensors in {path}: {missing}")
        for k, t in ref.params.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"tensor {k!r} has shape {arrays[k].shape}, config expects {t.shape}")
        return cls(config, {k: Tensor(arrays[k], requires_grad=True) for k in ref.params}, target)

    # --- building blocks ----------------------------------------------

    def fuse_features(self, low, mid, high) -> Tensor:
        """g = FC_fuse(concat(l, m, h)), an affine map 3d -> d."""
        d = self.config.hidden_dim
        parts = [nx.as_tensor(x, dtype=self.params["fc_fuse.weight"].dtype) for x in (low, mid, high)]
        for x in parts:
            if x.shape[-1] != d:
                raise nx.DimensionError(f"feature dim {x.shape[-1]} != drafter hidden_dim {d}")
        return nx.concat(parts, axis=-1) @ self.params["fc_fuse.weight"] + self.params["fc_fuse.bias"]

    def input_projection(self, g: Tensor, e: Tensor) -> Tensor:
        """x_0 = FC_in(concat(g, e)), an affine map 2d -> d."""
        return nx.concat([g, e], axis=-1) @ self.params["fc_in.weight"] + self.params["fc_in.bias"]

    def head(self, hidden: Tensor) -> Tensor:
        return self.target.head(hidden)

    def _level_mask(self, n_new: int, n_past: int) -> np.ndarray:
        if self.config.attend_context:
            return causal_mask(n_new, n_past)
        mask = np.zeros((n_new, n_past + n_new), dtype=bool)
        mask[:, n_past:] = np.eye(n_new, dtype=bool)
        return mask

    def run_levels(self, x0: Tensor, cache: KVCache | None = None) -> list[Tensor]:
        """Push x0 [B, T, d] through the levels; appends level keys/values to ``cache``."""
        t = x0.shape[1]
        past = cache.length if cache is not None else 0
        mask = self._level_mask(t, past)
        if cache is not None:
            cache.reserve(t)
        hidden = []
        h = x0
        for i, level in enumerate(self.levels):
            inp = x0 if self.config.structure == "parallel" else h
            pk = pv = None
            if cache is not None:
                pk, pv = cache.past(i)
            h, k, v = level.forward(inp, mask, pk, pv)
            if cache is not None:
                cache.write(i, k[0], v[0])
            hidden.append(h)
        if cache is not None:
            cache.advance(t)
        return hidden

    # --- training path ------------------------------------------------

    def forward_sequence(self, prev_features: np.ndarray, tokens: np.ndarray):
        """Whole-sequence causal pass used in training.

        ``prev_features[b, s]`` holds the stacked (l, m, h) features of
        position s-1 (zeros at s = 0) and ``tokens[b, s]`` is token s.
        Returns per-level hidden states and logits, each [B, T, ...].
        """
        d = self.config.hidden_dim
        f = nx.as_tensor(prev_features, dtype=self.params["fc_fuse.weight"].dtype)
        g = self.fuse_features(f.data[..., :d], f.data[..., d:2 * d], f.data[..., 2 * d:])
        e = self.target.embed(np.asarray(tokens, dtype=np.int64))
        x0 = self.input_projection(g, e)
        hidden = self.run_levels(x0)
        return hidden, [self.head(h) for h in hidden]

    # --- inference path -----------------------------------------------

    def new_state(self, capacity: int) -> DrafterState:
        return DrafterState(KVCache(self.config.depth, self.config.hidden_dim, capacity))

    @staticmethod
    def prev_feature_rows(features: MultiLevelFeatures, start_is_sequence_start: bool) -> np.ndarray:
        stacked = features.stacked()
        if start_is_sequence_start:
            stacked = np.concatenate([np.zeros((1, stacked.shape[1]), stacked.dtype), stacked[:-1]])
        return stacked

    def drafter_prefill(self, features: MultiLevelFeatures, tokens, state: DrafterState) -> None:
        """Build level caches for positions 0..C-1 after a target prefill of C tokens.

        Entry s pairs the features of position s-1 (zeros for s = 0) with the
        embedding of token s.
        """
        tokens = list(tokens)
        if len(features) != len(tokens):
            raise DrafterStateError(f"{len(features)} feature rows for {len(tokens)} prompt tokens")
        if state.cache.length or state.pending_tokens:
            raise DrafterStateError("drafter prefill needs a fresh state")
        if not tokens:
            return
        rows = self.prev_feature_rows(features, True)
        self._extend(rows, tokens, state.cache)

    def _embed_rows(self, rows: np.ndarray, tokens) -> Tensor:
        d = self.config.hidden_dim
        g = self.fuse_features(rows[:, :d], rows[:, d:2 * d], rows[:, 2 * d:])
        e = self.target.embed(np.asarray(tokens, dtype=np.int64))
        return self.input_projection(g, e)

    def _extend(self, rows: np.ndarray, tokens, cache: KVCache) -> list[Tensor]:
        x0 = self._embed_rows(np.asarray(rows), tokens)
        hidden = self.run_levels(nx.reshape(x0, (1,) + x0.shape), cache)
        cache.commit(cache.speculative_len)
        return hidden

    def queue_context(self, state: DrafterState, feature_rows: np.ndarray, tokens) -> None:
        """Record accepted positions to be folded in at the next draft call."""
        for row, tok in zip(feature_rows, tokens):
            state.pending_features.append(np.asarray(row))
            state.pending_tokens.append(int(tok))

    def draft_forward(self, g_t, e_next, state: DrafterState, temperature: float = 1.0) -> DraftOutput:
        """One pass through the cascade for the anchor entry (g_t, e_next).

        Queued context rows go through the same pass ahead of the anchor, so
        every level is evaluated exactly once per call. The anchor's own
        keys/values are left speculative; :meth:`accept_anchor` commits them.
        """
        d = self.config.hidden_dim
        g_t = nx.as_tensor(g_t).data.reshape(1, d)
        e_next = nx.as_tensor(e_next).data.reshape(1, d)
        if state.cache.speculative_len:
            raise DrafterStateError("previous anchor not yet accepted or rolled back")
        if state.pending_tokens:
            rows = np.stack(state.pending_features)
            dt = self.params["fc_fuse.weight"].dtype
            g_ctx = self.fuse_features(rows[:, :d], rows[:, d:2 * d], rows[:, 2 * d:]).data
            e_ctx = self.target.embed(np.asarray(state.pending_tokens, dtype=np.int64)).data
            g_all = np.concatenate([g_ctx, g_t.astype(dt)])
            e_all = np.concatenate([e_ctx, e_next.astype(dt)])
        else:
            g_all, e_all = g_t, e_next
        n_ctx = len(state.pending_tokens)
        x0 = self.input_projection(nx.as_tensor(g_all), nx.as_tensor(e_all))
        hidden = self.run_levels(nx.reshape(x0, (1,) + x0.shape), state.cache)
        state.cache.commit(n_ctx)
        state.cache.advance(1)
        state.pending_features.clear()
        state.pending_tokens.clear()
        h_last = np.stack([h.data[0, -1] for h in hidden])
        logits = self.head(nx.as_tensor(h_last)).data
        probs = nx.softmax(nx.as_tensor(logits), temperature=temperature).data
        c = self.counters
        c.draft_calls += 1
        c.level_evals += self.config.depth
        c.head_projections += self.config.depth
        return DraftOutput(hidden=list(h_last), logits=logits, probs=probs)

    def draft(self, prev_features: np.ndarray, next_token: int, state: DrafterState,
              temperature: float = 1.0) -> DraftOutput:
        """Fuse the stacked (l, m, h) row of the last verified position, then draft."""
        d = self.config.hidden_dim
        row = np.asarray(prev_features).reshape(3 * d)
        g = self.fuse_features(row[:d], row[d:2 * d], row[2 * d:])
        e = self.target.embed(np.asarray([next_token], dtype=np.int64))
        return self.draft_forward(g, e, state, temperature=temperature)

    @staticmethod
    def accept_anchor(state: DrafterState) -> None:
        state.cache.commit(state.cache.speculative_len)
