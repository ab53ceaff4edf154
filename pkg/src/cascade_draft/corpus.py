"""Seeded synthetic token language for self-contained runs.

Every token has a fixed table of successors; the first successor is taken
with probability ``p_main`` and the others share the rest. Sequences are a
deterministic function of the seed, and the resulting next-token laws are
sharp but not degenerate, which is what a toy target model needs.
"""

from __future__ import annotations

import numpy as np


class SuccessorLanguage:
    def __init__(self, vocab_size: int, seed: int = 0, branching: int = 4, p_main: float = 0.8):
        if branching < 1 or branching > vocab_size:
            raise ValueError(f"branching {branching} must lie in [1, {vocab_size}]")
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.p_main = p_main
        primary = rng.permutation(vocab_size)
        others = np.stack([rng.choice(vocab_size, size=branching - 1, replace=False)
                           for _ in range(vocab_size)]) if branching > 1 else np.zeros((vocab_size, 0), int)
        self.successors = np.concatenate([primary[:, None], others], axis=1)
        probs = np.full(branching, (1.0 - p_main) / max(branching - 1, 1))
        probs[0] = p_main if branching > 1 else 1.0
        self.successor_probs = probs

    def next_law(self, token: int) -> np.ndarray:
        law = np.zeros(self.vocab_size)
        np.add.at(law, self.successors[token], self.successor_probs)
        return law

    def sample(self, length: int, rng: np.random.Generator) -> list[int]:
        tok = int(rng.integers(self.vocab_size))
        out = [tok]
        for _ in range(length - 1):
            j = rng.choice(len(self.successor_probs), p=self.successor_probs)
            tok = int(self.successors[tok, j])
            out.append(tok)
        return out

    def batch(self, n: int, length: int, rng: np.random.Generator) -> np.ndarray:
        return np.array([self.sample(length, rng) for _ in range(n)], dtype=np.int64)


def synthetic_prompts(vocab_size: int, n: int, length: int, seed: int = 0,
                      language_seed: int = 0) -> list[list[int]]:
    """``n`` prompts of ``length`` tokens drawn from the seeded language."""
    lang = SuccessorLanguage(vocab_size, language_seed)
    rng = np.random.default_rng(seed)
    return [lang.sample(length, rng) for _ in range(n)]


def read_prompt_file(path) -> list[list[int]]:
    """One prompt per line, whitespace-separated token ids; blank lines and # comments skipped."""
    prompts = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                prompts.append([int(t) for t in line.split()])
    return prompts


def write_prompt_file(path, prompts) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in prompts:
            fh.write(" ".join(str(t) for t in p) + "\n")
