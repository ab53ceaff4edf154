"""Draft / verify / commit generation loop, vanilla reference decoding and metrics."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .draft_tree import ROOT, build_backbone_tree
from .drafter import CascadeDrafter
from .numerics import ParameterError, Tensor
from .sampling import RandomSource
from .target_model import TargetModel, ancestor_mask
from .verification import verify_greedy, verify_stochastic

MODES = ("cascade_tree", "cascade_chain", "parallel_heads", "vanilla")


@dataclass
class GenerationConfig:
    max_new_tokens: int = 64
    temperature: float = 0.0
    draft_depth: int = 7
    topk: int = 10
    mode: str = "cascade_tree"
    seed: int = 0
    candidate_selection: str = "topk"
    eos_token: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.temperature < 0:
            raise ParameterError("temperature must be >= 0")
        if self.draft_depth < 1 or self.topk < 1 or self.max_new_tokens < 1:
            raise ParameterError("draft_depth, topk and max_new_tokens must be >= 1")


@dataclass
class CycleMetrics:
    cycle: int
    nodes_verified: int
    accepted_length: int
    accepted_depth: int
    target_calls: int
    drafter_calls: int
    wall_time: float


@dataclass
class GenerationResult:
    tokens: list[int]
    cycles: list[CycleMetrics]
    target_calls: int
    drafter_calls: int
    wall_time: float
    prefill_calls: int = 1

    @property
    def tau(self) -> float:
        return compute_tau(self.cycles)


def _sample(logits: np.ndarray, temperature: float, source: RandomSource) -> int:
    if temperature == 0:
        return int(np.argmax(logits))
    return source.categorical(nx.softmax(Tensor(logits), temperature=temperature).data.astype(np.float64))


def _truncate(tokens: list[int], budget: int, eos: int | None) -> tuple[list[int], bool]:
    out = tokens[:budget]
    if eos is not None and eos in out:
        return out[:out.index(eos) + 1], True
    return out, len(out) >= budget


def generate_vanilla(prompt, config: GenerationConfig, target: TargetModel) -> GenerationResult:
    """One target call per token; the reference every speculative mode must match."""
    prompt = list(prompt)
    if not prompt:
        raise ParameterError("prompt must be non-empty")
    start = time.perf_counter()
    calls0 = target.forward_calls
    source = RandomSource(config.seed)
    cache = target.new_cache(extra=1)
    target.forward_prefill(prompt[:-1], cache)
    pending = prompt[-1]
    out: list[int] = []
    cycles: list[CycleMetrics] = []
    while True:
        t0 = time.perf_counter()
        logits, _ = target.forward_extend([pending], cache)
        tok = _sample(logits[0], config.temperature, source)
        out.append(tok)
        cycles.append(CycleMetrics(len(cycles), 1, 1, 0, 1, 0, time.perf_counter() - t0))
        pending = tok
        if len(out) >= config.max_new_tokens or tok == config.eos_token:
            break
    return GenerationResult(out, cycles, target.forward_calls - calls0, 0, time.perf_counter() - start)


def generate(prompt, config: GenerationConfig, target: TargetModel,
             drafter: CascadeDrafter | None = None) -> GenerationResult:
    """Speculative generation: draft in one pass, build the tree, verify, commit.

    The last prompt token is the first tree root: it enters the target's
    cache together with the draft nodes, so each cycle costs exactly one
    target call and the prefill covers the prompt minus that token.
    """
    if config.mode == "vanilla":
        return generate_vanilla(prompt, config, target)
    if drafter is None:
        raise ParameterError(f"mode {config.mode!r} needs a drafter")
    if config.draft_depth > drafter.config.depth:
        raise ParameterError(f"draft_depth {config.draft_depth} exceeds drafter depth {drafter.config.depth}")
    if config.mode == "parallel_heads" and drafter.config.structure != "parallel":
        drafter = drafter.with_structure("parallel")
    elif config.mode != "parallel_heads" and drafter.config.structure != "cascade":
        drafter = drafter.with_structure("cascade")
    k = 1 if config.mode == "cascade_chain" else config.topk
    n = config.draft_depth
    greedy = config.temperature == 0
    prompt = list(prompt)
    if not prompt:
        raise ParameterError("prompt must be non-empty")

    start = time.perf_counter()
    calls0 = target.forward_calls
    dcalls0 = drafter.counters.draft_calls
    source = RandomSource(config.seed)
    cache = target.new_cache(extra=1 + n * k)
    ctx, pending = prompt[:-1], prompt[-1]
    _, feats = target.forward_prefill(ctx, cache)
    dstate = drafter.new_state(cache.capacity + 1)
    drafter.drafter_prefill(feats, ctx, dstate)
    d = target.config.hidden_dim
    prev_row = feats.stacked()[-1] if len(ctx) else np.zeros(3 * d, np.float32)

    out: list[int] = []
    cycles: list[CycleMetrics] = []
    done = False
    while not done:
        t0 = time.perf_counter()
        if dstate.aligned_len != cache.committed_len:
            raise RuntimeError(f"drafter covers {dstate.aligned_len} positions, target {cache.committed_len}")
        draft = drafter.draft(prev_row, pending, dstate, temperature=1.0 if greedy else config.temperature)
        tree = build_backbone_tree(draft.probs[:n], k, config.candidate_selection, rng=source)
        parents = [-1] + [0 if p == ROOT else p + 1 for p in tree.parents]
        logits, tfeats = target.forward_tree([pending] + tree.tokens, ancestor_mask(parents), parents, cache)
        if greedy:
            outcome = verify_greedy(tree, logits[1:], logits[0])
        else:
            probs = nx.softmax(Tensor(logits), temperature=config.temperature).data.astype(np.float64)
            outcome = verify_stochastic(tree, probs[1:], probs[0], source)
        keep = [0] + [i + 1 for i in outcome.accepted_nodes]
        cache.commit(len(keep), keep)
        drafter.accept_anchor(dstate)
        rows = tfeats.stacked()[keep]
        a = outcome.accepted_tree_depth
        drafter.queue_context(dstate, rows[:a], outcome.accepted_tokens[:a])
        prev_row = rows[a]
        pending = outcome.bonus_token
        emitted, done = _truncate(outcome.accepted_tokens, config.max_new_tokens - len(out), config.eos_token)
        out.extend(emitted)
        cycles.append(CycleMetrics(len(cycles), len(tree), len(emitted), a, 1, 1, time.perf_counter() - t0))
    return GenerationResult(out, cycles, target.forward_calls - calls0,
                            drafter.counters.draft_calls - dcalls0, time.perf_counter() - start)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def compute_tau(cycles) -> float:
    """Emitted tokens per verification cycle, bonus token included."""
    cycles = list(cycles)
    if not cycles:
        raise ParameterError("compute_tau needs at least one cycle")
    return sum(c.accepted_length for c in cycles) / len(cycles)


@dataclass
class SpeedupReport:
    wall_speedup: float
    call_ratio: float


def compute_speedup(speculative: dict, vanilla: dict) -> SpeedupReport:
    """Both arguments map prompt id -> GenerationResult over the same prompt set."""
    if set(speculative) != set(vanilla):
        raise ParameterError("speculative and vanilla runs cover different prompt sets")
    if not speculative:
        raise ParameterError("no runs to compare")
    wall = sum(r.wall_time for r in vanilla.values()) / sum(r.wall_time for r in speculative.values())
    calls = sum(r.target_calls for r in vanilla.values()) / sum(r.target_calls for r in speculative.values())
    return SpeedupReport(wall, calls)


def acceptance_rate_by_depth(cycles, depth: int) -> list[float | None]:
    """Conditional per-depth acceptance: P(accepted depth >= i | accepted depth >= i-1).

    ``None`` marks a depth no cycle reached.
    """
    reached = np.array([c.accepted_depth for c in cycles])
    rates: list[float | None] = []
    for i in range(1, depth + 1):
        den = int((reached >= i - 1).sum())
        rates.append(float((reached >= i).sum()) / den if den else None)
    return rates


def cycle_records(result: GenerationResult, mode: str, prompt_id) -> list[dict]:
    return [{"type": "cycle", "mode": mode, "prompt": prompt_id, **asdict(c)} for c in result.cycles]


def write_jsonl(fh, records) -> None:
    for r in records:
        fh.write(json.dumps(r, sort_keys=True) + "\n")


def recount_tau(lines, mode: str) -> float:
    """τ recomputed from raw JSON-lines cycle records of one mode."""
    emitted = cycles = 0
    for line in lines:
        rec = json.loads(line)
        if rec.get("type") == "cycle" and rec.get("mode") == mode:
            emitted += rec["accepted_length"]
            cycles += 1
    if not cycles:
        raise ParameterError(f"no cycle records for mode {mode!r}")
    return emitted / cycles


@dataclass
class RunSummary:
    mode: str
    prompts: int
    tokens: int
    cycles: int
    tau: float
    target_calls: int
    drafter_calls: int
    wall_time: float
    call_ratio: float | None = None
    wall_speedup: float | None = None
    acceptance_by_depth: list = field(default_factory=list)

    def record(self) -> dict:
        return {"type": "summary", **asdict(self)}


def summarize(mode: str, results: dict, depth: int, vanilla: dict | None = None) -> RunSummary:
    cycles = [c for r in results.values() for c in r.cycles]
    s = RunSummary(
        mode=mode,
        prompts=len(results),
        tokens=sum(len(r.tokens) for r in results.values()),
        cycles=len(cycles),
        tau=compute_tau(cycles),
        target_calls=sum(r.target_calls for r in results.values()),
        drafter_calls=sum(r.drafter_calls for r in results.values()),
        wall_time=sum(r.wall_time for r in results.values()),
        acceptance_by_depth=acceptance_rate_by_depth(cycles, depth) if mode != "vanilla" else [],
    )
    if vanilla is not None:
        rep = compute_speedup(results, vanilla)
        s.call_ratio, s.wall_speedup = rep.call_ratio, rep.wall_speedup
    return s
