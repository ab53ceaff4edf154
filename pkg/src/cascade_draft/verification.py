"""Lossless acceptance of a draft tree against the target's distributions.

Both rules walk down from the root, accept at most one child per level and
always finish with a bonus token drawn from the target, so every call
emits at least one token and exactly reproduces the target's law.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .draft_tree import ROOT, DraftTree
from .numerics import DimensionError
from .sampling import as_source


class ConsistencyError(RuntimeError):
    pass


@dataclass
class VerifyOutcome:
    accepted_tokens: list[int]
    accepted_tree_depth: int
    per_depth_accept: list[bool] = field(default_factory=list)
    accepted_nodes: list[int] = field(default_factory=list)

    @property
    def bonus_token(self) -> int:
        return self.accepted_tokens[-1]


def _check_rows(tree: DraftTree, rows: np.ndarray) -> None:
    if rows.shape[0] != len(tree):
        raise DimensionError(f"{rows.shape[0]} logit rows for a tree of {len(tree)} nodes")


def _children_by_token(tree: DraftTree) -> dict[int, dict[int, int]]:
    table: dict[int, dict[int, int]] = {}
    for i, node in enumerate(tree.nodes):
        table.setdefault(node.parent, {})[node.token] = i
    return table


def verify_greedy(tree: DraftTree, node_logits, prefix_logits) -> VerifyOutcome:
    """Follow the target's argmax down the tree for as long as a child matches."""
    node_logits = np.asarray(node_logits)
    _check_rows(tree, node_logits)
    table = _children_by_token(tree)
    cur, ctx = ROOT, np.asarray(prefix_logits)
    accepted_nodes: list[int] = []
    per_depth: list[bool] = []
    while True:
        want = int(np.argmax(ctx))
        kids = table.get(cur)
        if not kids:
            break
        child = kids.get(want)
        per_depth.append(child is not None)
        if child is None:
            break
        accepted_nodes.append(child)
        cur, ctx = child, node_logits[child]
    tokens = [tree.nodes[i].token for i in accepted_nodes] + [int(np.argmax(ctx))]
    return VerifyOutcome(tokens, len(accepted_nodes), per_depth, accepted_nodes)


def _normalise(p: np.ndarray) -> np.ndarray:
    s = p.sum()
    if s <= 0:
        raise ConsistencyError("residual distribution vanished")
    return p / s


def verify_stochastic(tree: DraftTree, node_probs, prefix_probs, rng, always_accept: bool = False) -> VerifyOutcome:
    """Multi-candidate speculative sampling over the tree.

    At each level the children are tried in the order they were selected.
    Candidate c is accepted with probability min(1, r(c) / s(c)) where r is
    the current residual target law and s the law c was proposed from: the
    renormalised draft distribution over untried tokens for sampled trees,
    a point mass for deterministic top-k trees. A rejection replaces r with
    normalise(max(0, r - s)). If every child is rejected the bonus token is
    drawn from r; otherwise the walk descends and, past the deepest accepted
    node, the bonus is drawn from that node's target distribution.

    Randomness: one uniform per tried candidate, plus one for the bonus.
    ``always_accept`` corrupts the rule and exists only as a negative control.
    """
    node_probs = np.asarray(node_probs, dtype=np.float64)
    _check_rows(tree, node_probs)
    source = as_source(rng)
    sampled = tree.selection == "sample"
    by_parent: dict[int, list[int]] = {}
    for i, node in enumerate(tree.nodes):
        by_parent.setdefault(node.parent, []).append(i)

    cur = ROOT
    residual = np.asarray(prefix_probs, dtype=np.float64)
    accepted_nodes: list[int] = []
    per_depth: list[bool] = []
    while True:
        kids = sorted(by_parent.get(cur, []), key=lambda i: tree.nodes[i].rank)
        if not kids:
            break
        depth = tree.nodes[kids[0]].depth
        proposal = tree.distributions[depth - 1].copy() if sampled else None
        taken = None
        for i in kids:
            tok = tree.nodes[i].token
            if sampled:
                if proposal[tok] <= 0:
                    raise ConsistencyError(f"draft probability is zero for tree token {tok} at depth {depth}")
                s = proposal / proposal.sum()
            else:
                s = np.zeros_like(residual)
                s[tok] = 1.0
            ratio = min(1.0, residual[tok] / s[tok])
            hit = source.bernoulli(ratio)
            if hit or always_accept:
                taken = i
                break
            residual = _normalise(np.maximum(0.0, residual - s))
            if sampled:
                proposal[tok] = 0.0
        per_depth.append(taken is not None)
        if taken is None:
            break
        accepted_nodes.append(taken)
        cur = taken
        residual = node_probs[taken]
    bonus = source.categorical(residual)
    tokens = [tree.nodes[i].token for i in accepted_nodes] + [int(bonus)]
    return VerifyOutcome(tokens, len(accepted_nodes), per_depth, accepted_nodes)
