"""Pre-norm decoder block shared by the target model and the cascade levels."""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import Tensor

BLOCK_PARAMS = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w1", "b1", "w2", "b2")


def causal_mask(n_new: int, n_past: int = 0) -> np.ndarray:
    """Visibility for ``n_new`` fresh positions appended after ``n_past`` cached ones."""
    mask = np.ones((n_new, n_past + n_new), dtype=bool)
    mask[:, n_past:] = np.tril(np.ones((n_new, n_new), dtype=bool))
    return mask


def init_block(rng: np.random.Generator, d: int, num_layers: int, mlp_ratio: int = 4) -> dict[str, Tensor]:
    std = 1.0 / math.sqrt(d)
    out_std = std / math.sqrt(2 * num_layers)
    h = mlp_ratio * d

    def normal(shape, s):
        return Tensor(rng.normal(0.0, s, size=shape).astype(np.float32), requires_grad=True)

    return {
        "attn_norm": Tensor(np.ones(d, np.float32), requires_grad=True),
        "wq": normal((d, d), std),
        "wk": normal((d, d), std),
        "wv": normal((d, d), std),
        "wo": normal((d, d), out_std),
        "mlp_norm": Tensor(np.ones(d, np.float32), requires_grad=True),
        "w1": normal((d, h), std),
        "b1": Tensor(np.zeros(h, np.float32), requires_grad=True),
        "w2": normal((h, d), 1.0 / math.sqrt(h) / math.sqrt(2 * num_layers)),
        "b2": Tensor(np.zeros(d, np.float32), requires_grad=True),
    }


class DecoderBlock:
    """x + Attn(RMSNorm(x)), then x + MLP(RMSNorm(x)).

    Keys and values of fresh positions are returned so callers can cache
    them; cached ones come in as plain arrays and receive no gradient.
    """

    def __init__(self, params: dict[str, Tensor], num_heads: int, eps: float):
        d = params["wq"].shape[0]
        if d % num_heads:
            raise ValueError(f"hidden dim {d} not divisible by {num_heads} heads")
        self.p = params
        self.num_heads = num_heads
        self.eps = eps

    def forward(self, x: Tensor, mask: np.ndarray, past_k: np.ndarray | None = None,
                past_v: np.ndarray | None = None):
        p = self.p
        b, t, d = x.shape
        hn, hd = self.num_heads, d // self.num_heads
        a = nx.rms_norm(x, p["attn_norm"], self.eps)
        q = a @ p["wq"]
        k = a @ p["wk"]
        v = a @ p["wv"]
        k_new, v_new = k.data, v.data
        if past_k is not None and len(past_k):
            k = nx.concat([Tensor(np.broadcast_to(past_k, (b,) + past_k.shape), dtype=x.dtype), k], axis=1)
            v = nx.concat([Tensor(np.broadcast_to(past_v, (b,) + past_v.shape), dtype=x.dtype), v], axis=1)
        s = k.shape[1]
        qh = nx.transpose(nx.reshape(q, (b, t, hn, hd)), (0, 2, 1, 3))
        kh = nx.transpose(nx.reshape(k, (b, s, hn, hd)), (0, 2, 3, 1))
        vh = nx.transpose(nx.reshape(v, (b, s, hn, hd)), (0, 2, 1, 3))
        scores = nx.scale(qh @ kh, 1.0 / math.sqrt(hd))
        att = nx.softmax(scores, mask=mask)
        ctx = nx.reshape(nx.transpose(att @ vh, (0, 2, 1, 3)), (b, t, d))
        x = x + ctx @ p["wo"]
        m = nx.rms_norm(x, p["mlp_norm"], self.eps)
        x = x + (nx.gelu(m @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"])
        return x, k_new, v_new
