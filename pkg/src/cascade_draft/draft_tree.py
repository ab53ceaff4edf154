"""Backbone-expansion draft trees.

Level 1 takes the top-k tokens of the first draft distribution; the most
probable one becomes the backbone node. Every later level takes the top-k
tokens of its own distribution and hangs them under the previous backbone
node, again extending the backbone with the most probable one. The tree
therefore holds at most N*k nodes and a single backbone path of length N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ParameterError
from .sampling import RandomSource, as_source

ROOT = -1


class TreeStructureError(ValueError):
    pass


@dataclass(frozen=True)
class DraftNode:
    token: int
    parent: int
    depth: int
    draft_prob: float
    on_backbone: bool
    # order in which the candidate was selected at its level (0 = first)
    rank: int = 0


@dataclass(frozen=True)
class DraftTree:
    nodes: tuple[DraftNode, ...]
    backbone: tuple[int, ...]
    k: int
    # q[i] is the draft distribution for depth i + 1
    distributions: np.ndarray
    selection: str = "topk"

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def depth(self) -> int:
        return len(self.backbone)

    @property
    def parents(self) -> list[int]:
        return [n.parent for n in self.nodes]

    @property
    def tokens(self) -> list[int]:
        return [n.token for n in self.nodes]

    def children(self, index: int) -> list[int]:
        """Indices of the children of ``index`` (ROOT for depth-1 nodes)."""
        return [i for i, n in enumerate(self.nodes) if n.parent == index]

    def dump(self) -> str:
        """Tab-separated debug listing: index, parent, depth, token, prob, backbone flag."""
        lines = [
            f"{i}\t{n.parent}\t{n.depth}\t{n.token}\t{n.draft_prob:.6g}\t{int(n.on_backbone)}"
            for i, n in enumerate(self.nodes)
        ]
        return "\n".join(lines) + ("\n" if lines else "")


def _top_k(q: np.ndarray, k: int) -> list[int]:
    """Highest-probability tokens, ties broken by lower token id, zeros dropped."""
    order = np.lexsort((np.arange(len(q)), -q))
    return [int(t) for t in order[:k] if q[t] > 0]


def _sample_k(q: np.ndarray, k: int, source: RandomSource) -> list[int]:
    """Up to k tokens drawn without replacement from q, in draw order (one draw each)."""
    rest = q.copy()
    picks = []
    while len(picks) < k and rest.sum() > 0:
        tok = source.categorical(rest / rest.sum())
        picks.append(tok)
        rest[tok] = 0.0
    return picks


def build_backbone_tree(q, k: int, selection: str = "topk", rng=None) -> DraftTree:
    """Build the constrained draft tree from N draft distributions.

    With ``selection="sample"`` the k candidates per level are drawn without
    replacement from that level's distribution (needs ``rng``); the backbone
    still extends through the most probable candidate drawn.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2:
        raise ParameterError(f"expected [N, V] draft distributions, got shape {q.shape}")
    n_levels, vocab = q.shape
    if k < 1 or k > vocab:
        raise ParameterError(f"branching k={k} must lie in [1, V={vocab}]")
    if selection not in ("topk", "sample"):
        raise ParameterError(f"unknown candidate selection {selection!r}")
    if selection == "sample":
        if rng is None:
            raise ParameterError("sampled candidate selection needs an rng")
        rng = as_source(rng)

    nodes: list[DraftNode] = []
    backbone: list[int] = []
    parent = ROOT
    for level in range(n_levels):
        row = q[level]
        picks = _top_k(row, k) if selection == "topk" else _sample_k(row, k, rng)
        if not picks:
            break
        best = max(picks, key=lambda t: (row[t], -t))
        rank = {tok: r for r, tok in enumerate(picks)}
        level_nodes = sorted(picks, key=lambda t: (t != best, -row[t], t))
        for tok in level_nodes:
            nodes.append(DraftNode(tok, parent, level + 1, float(row[tok]), tok == best, rank[tok]))
        parent = len(nodes) - len(level_nodes)
        backbone.append(parent)
    return DraftTree(tuple(nodes), tuple(backbone), k, q, selection)


def tree_attention_mask(tree: DraftTree) -> np.ndarray:
    """mask[i, j] is True iff j == i or j is a strict ancestor of i."""
    n = len(tree)
    mask = np.eye(n, dtype=bool)
    for i, node in enumerate(tree.nodes):
        seen = {i}
        j = node.parent
        while j != ROOT:
            if j in seen or not 0 <= j < n:
                raise TreeStructureError(f"parent chain of node {i} is cyclic or out of range")
            seen.add(j)
            mask[i, j] = True
            j = tree.nodes[j].parent
    return mask


def linearize_path(tree: DraftTree, index: int) -> list[int]:
    """Tokens on the root-to-node path, root side first."""
    if not 0 <= index < len(tree):
        raise IndexError(f"node index {index} out of range for a tree of {len(tree)} nodes")
    path = []
    j = index
    while j != ROOT:
        path.append(tree.nodes[j].token)
        j = tree.nodes[j].parent
    return path[::-1]


def path_indices(tree: DraftTree, index: int) -> list[int]:
    out = []
    j = index
    while j != ROOT:
        out.append(j)
        j = tree.nodes[j].parent
    return out[::-1]
