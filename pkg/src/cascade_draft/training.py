"""Multi-level drafter training.

Every cascade level is supervised directly: a soft cross-entropy against the
target's next-token law at its offset plus a Smooth-L1 pull of its hidden
state onto the target's feature at the same offset. Levels are weighted
geometrically so the deepest level counts most, and gradients flow through
the whole cascade (each level consumes the previous level's output from the
same pass, never the ground-truth feature).
"""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .drafter import CascadeDrafter
from .numerics import GradTape, Tensor
from .serialization import FormatError
from .target_model import TargetModel

log = logging.getLogger(__name__)

DATASET_MAGIC = b"FEGD"
DATASET_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.1
    beta: float = 1.0
    layer_decay: float = 0.9
    lr: float = 5e-5
    adam_betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    grad_clip: float = 0.5
    weight_decay: float = 0.0
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0 < self.layer_decay <= 1:
            raise ValueError(f"layer_decay must lie in (0, 1], got {self.layer_decay}")
        if not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")


@dataclass
class TrainingExample:
    """One teacher sequence with everything the drafter loss needs, per position.

    ``teacher_probs[s]`` is the target's law for token s+1 after reading
    tokens 0..s; ``low/mid/high[s]`` are the tapped features at position s and
    ``align[s]`` is the feature the drafter hidden states are pulled towards.
    """

    tokens: np.ndarray
    prompt_len: int
    teacher_probs: np.ndarray
    low: np.ndarray
    mid: np.ndarray
    high: np.ndarray
    align: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)

    def prev_features(self) -> np.ndarray:
        """Stacked (l, m, h) of position s-1 at row s, zeros at row 0."""
        stacked = np.concatenate([self.low, self.mid, self.high], axis=-1)
        return np.concatenate([np.zeros((1, stacked.shape[1]), np.float32), stacked[:-1]])


@dataclass
class DatasetStats:
    generated: int = 0
    skipped_short: int = 0


# --------------------------------------------------------------------------
# data generation and (de)serialisation
# --------------------------------------------------------------------------

def teacher_example(target: TargetModel, tokens, prompt_len: int, align: str = "high") -> TrainingExample:
    """Run one clean prefill over ``tokens`` and record teacher laws and features."""
    cache = target.new_cache()
    logits, feats = target.forward_prefill(list(tokens), cache)
    probs = nx.softmax(Tensor(logits)).data
    if align not in ("low", "mid", "high"):
        raise ValueError(f"unknown alignment feature {align!r}")
    return TrainingExample(np.asarray(tokens, dtype=np.int64), prompt_len, probs.astype(np.float32),
                           feats.low, feats.mid, feats.high, getattr(feats, align))


def sample_continuation(target: TargetModel, prompt, length: int, rng: np.random.Generator,
                        temperature: float = 1.0) -> list[int]:
    cache = target.new_cache()
    logits, _ = target.forward_prefill(list(prompt), cache)
    out: list[int] = []
    last = logits[-1]
    for _ in range(length):
        p = nx.softmax(Tensor(last), temperature=temperature).data.astype(np.float64)
        tok = int(rng.choice(len(p), p=p / p.sum()))
        out.append(tok)
        if len(out) == length:
            break
        last, _ = target.forward_extend([tok], cache)
        last = last[0]
    return out


def generate_training_data(target: TargetModel, prompts, n_examples: int, continuation_len: int,
                           depth: int, seed: int = 0, align: str = "high"):
    """Target-sampled continuations (temperature 1) turned into training examples.

    Prompts are cycled if fewer than ``n_examples``. Returns (examples, stats).
    """
    rng = np.random.default_rng(seed)
    stats = DatasetStats()
    examples: list[TrainingExample] = []
    for i in range(n_examples):
        prompt = list(prompts[i % len(prompts)])
        cont = sample_continuation(target, prompt, continuation_len, rng)
        if len(cont) < depth + 1:
            stats.skipped_short += 1
            continue
        examples.append(teacher_example(target, prompt + cont, len(prompt), align))
        stats.generated += 1
    return examples, stats


def save_dataset(path: str | os.PathLike, examples) -> None:
    """"FEGD" container: magic, u32 version, u64 count, then per example u32
    seq_len, prompt_len, vocab, dim; u32 tokens; f32 teacher_probs, low, mid,
    high, align (all row-major)."""
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IQ", DATASET_VERSION, len(examples)))
        for ex in examples:
            t, v = ex.teacher_probs.shape
            d = ex.low.shape[1]
            fh.write(struct.pack("<IIII", t, ex.prompt_len, v, d))
            fh.write(np.asarray(ex.tokens, dtype="<u4").tobytes())
            for arr in (ex.teacher_probs, ex.low, ex.mid, ex.high, ex.align):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_dataset(path: str | os.PathLike) -> list[TrainingExample]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != DATASET_MAGIC:
        raise FormatError("bad magic, expected b'FEGD'", 0)
    if len(buf) < 16:
        raise FormatError("truncated dataset header", len(buf))
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    pos = 16
    out = []
    for _ in range(count):
        if pos + 16 > len(buf):
            raise FormatError("truncated example header", pos)
        t, prompt_len, v, d = struct.unpack_from("<IIII", buf, pos)
        pos += 16
        need = 4 * t + 4 * (t * v + 4 * t * d)
        if pos + need > len(buf):
            raise FormatError("truncated example body", pos)
        tokens = np.frombuffer(buf, "<u4", t, pos).astype(np.int64)
        pos += 4 * t
        arrays = []
        for n, shape in ((t * v, (t, v)), (t * d, (t, d)), (t * d, (t, d)), (t * d, (t, d)), (t * d, (t, d))):
            arrays.append(np.frombuffer(buf, "<f4", n, pos).reshape(shape).astype(np.float32))
            pos += 4 * n
        out.append(TrainingExample(tokens, prompt_len, *arrays))
    if pos != len(buf):
        raise FormatError("trailing bytes after last example", pos)
    return out


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def layer_weights(depth: int, decay: float) -> np.ndarray:
    """w_i = decay^(N - i) for i = 1..N."""
    return np.array([decay ** (depth - i) for i in range(1, depth + 1)])


@dataclass
class LossBreakdown:
    total: float
    ce: list[float]
    feat: list[float]


def total_loss(hidden, logits, teacher_probs, align, config: TrainConfig):
    """Weighted multi-level loss for a batch of whole-sequence drafter passes.

    ``hidden``/``logits`` are the N per-level outputs, each [B, T, ...];
    ``teacher_probs`` [B, T, V] and ``align`` [B, T, d] come from the target.
    Level i at anchor s is scored against position s + i - 1, for every
    anchor with all N offsets inside the sequence. CE and feature terms are
    averaged over anchors; the feature term sums over hidden coordinates.
    """
    depth = len(hidden)
    b, t = hidden[0].shape[:2]
    if teacher_probs.shape[:2] != (b, t) or align.shape[:2] != (b, t):
        raise nx.DimensionError(
            f"teacher arrays {teacher_probs.shape}/{align.shape} do not match drafter outputs ({b}, {t})")
    anchors = t - depth + 1
    if anchors < 1:
        raise nx.DimensionError(f"sequence of {t} positions too short for {depth} levels")
    w = layer_weights(depth, config.layer_decay)
    dt = hidden[0].dtype
    total = None
    ce_vals, feat_vals = [], []
    for i in range(depth):
        sl = slice(i, i + anchors)
        q = nx.softmax(nx.take(logits[i], (slice(None), slice(0, anchors))))
        ce = nx.mean(nx.cross_entropy(Tensor(teacher_probs[:, sl], dtype=dt), q))
        diff = nx.take(hidden[i], (slice(None), slice(0, anchors))) - Tensor(align[:, sl], dtype=dt)
        feat = nx.scale(nx.sum(nx.smooth_l1(diff)), 1.0 / (b * anchors))
        term = nx.scale(ce, config.alpha * w[i]) + nx.scale(feat, config.beta * w[i])
        total = term if total is None else total + term
        ce_vals.append(ce.item())
        feat_vals.append(feat.item())
    return total, LossBreakdown(total.item(), ce_vals, feat_vals)


def batch_arrays(examples):
    tokens = np.stack([ex.tokens for ex in examples])
    prev = np.stack([ex.prev_features() for ex in examples])
    probs = np.stack([ex.teacher_probs for ex in examples])
    align = np.stack([ex.align for ex in examples])
    return tokens, prev, probs, align


def drafter_loss(drafter: CascadeDrafter, examples, config: TrainConfig):
    tokens, prev, probs, align = batch_arrays(examples)
    hidden, logits = drafter.forward_sequence(prev, tokens)
    return total_loss(hidden, logits, probs, align, config)


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = nx.global_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(factor)
    return norm


class AdamW:
    def __init__(self, params, lr: float, betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        if self.lr == 0:
            self.step_count += 1
            return
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p.data *= 1 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


@dataclass
class StepResult:
    step: int
    loss: float
    grad_norm: float
    breakdown: LossBreakdown


def train_step(examples, drafter: CascadeDrafter, optimizer: AdamW, config: TrainConfig,
               batch_index: int = 0) -> StepResult:
    optimizer.zero_grad()
    with GradTape():
        loss, parts = drafter_loss(drafter, examples, config)
    if not math.isfinite(parts.total):
        raise TrainingError(f"non-finite loss {parts.total} at batch {batch_index}")
    nx.backward(loss)
    norm = clip_grad_norm(optimizer.params, config.grad_clip)
    optimizer.step()
    return StepResult(optimizer.step_count, parts.total, norm, parts)


@dataclass
class TrainHistory:
    steps: list[StepResult] = field(default_factory=list)

    def write_csv(self, path, depth: int) -> None:
        header = ["step", "loss_total"] + [f"ce_{i + 1}" for i in range(depth)] + [f"feat_{i + 1}" for i in range(depth)]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for r in self.steps:
                vals = [str(r.step), f"{r.loss:.8g}"] + [f"{x:.8g}" for x in r.breakdown.ce] + \
                    [f"{x:.8g}" for x in r.breakdown.feat]
                fh.write(",".join(vals) + "\n")


def train_drafter(drafter: CascadeDrafter, examples, config: TrainConfig, log_every: int = 100) -> TrainHistory:
    """Constant-rate AdamW over shuffled mini-batches of equal-length examples."""
    if not examples:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(config.seed)
    opt = AdamW(drafter.parameters(), config.lr, config.adam_betas, config.adam_eps, config.weight_decay)
    history = TrainHistory()
    by_len: dict[int, list[int]] = {}
    for i, ex in enumerate(examples):
        by_len.setdefault(len(ex), []).append(i)
    groups = [g for g in by_len.values()]
    order: list[list[int]] = []
    for step in range(config.steps):
        if not order:
            for g in groups:
                perm = rng.permutation(g)
                order.extend(perm[j:j + config.batch_size].tolist() for j in range(0, len(perm), config.batch_size))
            rng.shuffle(order)
        idx = order.pop()
        res = train_step([examples[i] for i in idx], drafter, opt, config, batch_index=step)
        history.steps.append(res)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f |g| %.3f", res.step, res.loss, res.grad_norm)
    return history


# --------------------------------------------------------------------------
# target pre-training on the synthetic language
# --------------------------------------------------------------------------

def next_token_loss(target: TargetModel, tokens: np.ndarray) -> Tensor:
    logits, *_ = target.forward_train(tokens[:, :-1])
    b, t = tokens.shape[0], tokens.shape[1] - 1
    onehot = np.zeros((b, t, target.config.vocab_size), dtype=logits.dtype)
    np.put_along_axis(onehot, tokens[:, 1:, None], 1.0, axis=-1)
    return nx.mean(nx.cross_entropy(onehot, nx.softmax(logits)))


def pretrain_target(target: TargetModel, language, steps: int, batch_size: int, seq_len: int,
                    lr: float, seed: int = 0, log_every: int = 100) -> list[float]:
    rng = np.random.default_rng(seed)
    opt = AdamW(target.parameters(), lr, (0.9, 0.95))
    losses = []
    for step in range(steps):
        batch = language.batch(batch_size, seq_len, rng)
        opt.zero_grad()
        with GradTape():
            loss = next_token_loss(target, batch)
        nx.backward(loss)
        clip_grad_norm(opt.params, 1.0)
        opt.step()
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            log.info("target step %d loss %.4f", step + 1, losses[-1])
    return losses


def held_out_ce(target: TargetModel, language, n: int, seq_len: int, seed: int) -> float:
    batch = language.batch(n, seq_len, np.random.default_rng(seed))
    return next_token_loss(target, batch).item()
