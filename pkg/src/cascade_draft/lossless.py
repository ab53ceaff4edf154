"""Losslessness checks: greedy replay against vanilla decoding, exact
enumeration of the verifier's random decisions, and Monte-Carlo sampling.

The enumeration drives the real tree builder and verifier through a
scripted random source that branches on every decision, so the law of the
emitted tokens is computed exactly rather than estimated.
"""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .draft_tree import build_backbone_tree, linearize_path
from .engine import GenerationConfig, generate, generate_vanilla
from .sampling import RandomSource
from .verification import verify_stochastic


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


class ScriptedSource:
    """Random source that follows a script of branch choices, then takes branch 0.

    Every untaken alternative past the script is queued in ``alternatives``
    as a longer script, and ``weight`` accumulates the probability of the
    path actually followed.
    """

    def __init__(self, script: list[int]):
        self.script = script
        self.taken: list[int] = []
        self.weight = 1.0
        self.alternatives: list[list[int]] = []

    def _choose(self, probs: list[float]) -> int:
        pos = len(self.taken)
        options = [i for i, p in enumerate(probs) if p > 0]
        if pos < len(self.script):
            choice = self.script[pos]
        else:
            choice = options[0]
            for alt in options[1:]:
                self.alternatives.append(self.taken + [alt])
        self.taken.append(choice)
        self.weight *= probs[choice]
        return choice

    def bernoulli(self, prob: float) -> bool:
        prob = min(max(prob, 0.0), 1.0)
        return self._choose([prob, 1.0 - prob]) == 0

    def categorical(self, probs) -> int:
        p = np.asarray(probs, dtype=np.float64)
        return self._choose(list(p / p.sum()))


def enumerate_law(run: Callable[[ScriptedSource], tuple]) -> dict[tuple, float]:
    """Exact outcome law of a deterministic function of scripted randomness."""
    law: dict[tuple, float] = defaultdict(float)
    stack: list[list[int]] = [[]]
    while stack:
        src = ScriptedSource(stack.pop())
        out = run(src)
        stack.extend(src.alternatives)
        law[out] += src.weight
    return dict(law)


class PathLaws:
    """Fixed pseudo-random target laws indexed by the emitted token path."""

    def __init__(self, vocab: int, seed: int, concentration: float = 1.0):
        self.vocab = vocab
        self.seed = seed
        self.concentration = concentration
        self._cache: dict[tuple, np.ndarray] = {}

    def __call__(self, path: tuple) -> np.ndarray:
        path = tuple(int(t) for t in path)
        if path not in self._cache:
            digest = hashlib.sha256(repr((self.seed, path)).encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            self._cache[path] = rng.dirichlet(np.full(self.vocab, self.concentration))
        return self._cache[path]


def tree_round(q: np.ndarray, k: int, laws: PathLaws, source, selection: str,
               always_accept: bool = False) -> tuple:
    """Build a tree from draft laws ``q`` and verify it against ``laws``; emitted tokens."""
    tree = build_backbone_tree(q, k, selection, rng=source)
    node_probs = np.array([laws(tuple(linearize_path(tree, i))) for i in range(len(tree))])
    out = verify_stochastic(tree, node_probs, laws(()), source, always_accept=always_accept)
    return tuple(out.accepted_tokens)


def conditional_tv(outcomes: dict[tuple, float], laws: PathLaws) -> float:
    """Worst total-variation gap between the emitted next-token law and the target's,
    over every emitted prefix (conditioned on a next token being emitted)."""
    mass: dict[tuple, np.ndarray] = {}
    for seq, w in outcomes.items():
        for j in range(len(seq)):
            prefix = seq[:j]
            mass.setdefault(prefix, np.zeros(laws.vocab))[seq[j]] += w
    worst = 0.0
    for prefix, m in mass.items():
        if m.sum() <= 0:
            continue
        worst = max(worst, 0.5 * float(np.abs(m / m.sum() - laws(prefix)).sum()))
    return worst


def draft_laws(vocab: int, depth: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).dirichlet(np.ones(vocab), size=depth)


def enumeration_check(vocab: int = 4, depth: int = 1, k: int = 2, seed: int = 0,
                      selection: str = "topk", always_accept: bool = False,
                      tol: float = 1e-9) -> CheckResult:
    laws = PathLaws(vocab, seed)
    q = draft_laws(vocab, depth, seed + 1)
    law = enumerate_law(lambda src: tree_round(q, k, laws, src, selection, always_accept))
    total = sum(law.values())
    tv = conditional_tv(law, laws)
    ok = tv <= tol and abs(total - 1.0) <= 1e-12
    return CheckResult(f"exact enumeration V={vocab} N={depth} k={k} ({selection})", ok,
                       f"max TV {tv:.3e} (tol {tol:g}), total mass {total:.15f}, {len(law)} outcomes")


def monte_carlo_check(vocab: int = 8, depth: int = 2, k: int = 2, trials: int = 200_000, seed: int = 0,
                      selection: str = "topk", always_accept: bool = False, tol: float = 0.01) -> CheckResult:
    """Empirical first-token law, and second-token law after the first token most often continued.

    The first-token law is held to ``tol``. The conditional law rests on
    fewer draws, so its bound is max(tol, sqrt(V / n)) for n conditional
    draws, a few times the expected sampling TV.
    """
    laws = PathLaws(vocab, seed)
    q = draft_laws(vocab, depth, seed + 1)
    src = RandomSource(seed + 2)
    counts: dict[tuple, float] = defaultdict(float)
    for _ in range(trials):
        counts[tree_round(q, k, laws, src, selection, always_accept)] += 1.0
    first = np.zeros(vocab)
    for seq, c in counts.items():
        first[seq[0]] += c
    tv1 = 0.5 * float(np.abs(first / first.sum() - laws(())).sum())
    continued = np.zeros((vocab, vocab))
    for seq, c in counts.items():
        if len(seq) > 1:
            continued[seq[0], seq[1]] += c
    lead = int(np.argmax(continued.sum(axis=1)))
    second = continued[lead]
    if not second.sum():
        return CheckResult(f"Monte Carlo V={vocab} N={depth} k={k} ({selection}, {trials} trials)", False,
                           "no trial emitted a second token")
    tv2 = 0.5 * float(np.abs(second / second.sum() - laws((lead,))).sum())
    tol2 = max(tol, float(np.sqrt(vocab / second.sum())))
    ok = tv1 <= tol and tv2 <= tol2
    return CheckResult(f"Monte Carlo V={vocab} N={depth} k={k} ({selection}, {trials} trials)", ok,
                       f"TV first {tv1:.4f} (tol {tol:g}), TV second|{lead} {tv2:.4f} over "
                       f"{int(second.sum())} draws (tol {tol2:.4f})")


def greedy_equality_check(target, drafter, prompts, max_new_tokens: int, depth: int, topk: int,
                          mode: str = "cascade_tree") -> CheckResult:
    mismatches = 0
    for prompt in prompts:
        ref = generate_vanilla(prompt, GenerationConfig(max_new_tokens=max_new_tokens, mode="vanilla"), target)
        cfg = GenerationConfig(max_new_tokens=max_new_tokens, draft_depth=depth, topk=topk, mode=mode)
        got = generate(prompt, cfg, target, drafter)
        if got.tokens != ref.tokens:
            mismatches += 1
    return CheckResult(f"greedy equality {mode} N={depth} k={topk}", mismatches == 0,
                       f"{len(prompts) - mismatches}/{len(prompts)} prompts token-identical "
                       f"over {max_new_tokens} new tokens")


def run_suite(target, drafter, prompts, max_new_tokens: int, depth: int, topk: int,
              mc_trials: int = 200_000, seed: int = 0, always_accept: bool = False) -> list[CheckResult]:
    results = []
    for mode, k in (("cascade_tree", topk), ("cascade_chain", 1), ("cascade_tree", 1)):
        results.append(greedy_equality_check(target, drafter, prompts, max_new_tokens, depth, k, mode))
    for selection in ("topk", "sample"):
        results.append(enumeration_check(4, 1, 2, seed, selection, always_accept))
        results.append(enumeration_check(4, 2, 2, seed + 10, selection, always_accept))
    results.append(monte_carlo_check(8, 2, 2, mc_trials, seed, "topk", always_accept))
    return results
