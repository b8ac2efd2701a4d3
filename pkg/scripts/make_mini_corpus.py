#!/usr/bin/env python3
"""Regenerate the bundled mini review corpus (src/rdg/corpora/mini_reviews.txt).

Two hundred tiny binary-tree "reviews" over a fixed sentiment vocabulary.
Every node carries a binary label derived compositionally: sentiment words
are +1/-1, a negator leaf flips the sibling subtree it attaches to, and a
node's label is 1 when its subtree sentiment is positive. The corpus is a
deterministic function of the seed, so re-running this script reproduces the
checked-in file byte for byte.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from rdg.data import TreeInstance, Vocab, serialize  # noqa: E402

POSITIVE = ("good", "great", "charming", "fresh", "sharp", "warm", "deft", "vivid")
NEGATIVE = ("bad", "dull", "stale", "weak", "bland", "tired", "flat", "hollow")
NEGATORS = ("not", "never", "hardly")
NEUTRAL = ("the", "film", "plot", "acting", "score", "pacing", "it", "feels", "rather", "mostly")

SEED = 20180423
COUNT = 200


def build_corpus() -> tuple[list[TreeInstance], Vocab]:
    rng = np.random.default_rng(SEED)
    vocab = Vocab()
    for w in (*POSITIVE, *NEGATIVE, *NEGATORS, *NEUTRAL):
        vocab.add(w)

    def sample_word(kind: str) -> str:
        pool = {"pos": POSITIVE, "neg": NEGATIVE, "not": NEGATORS, "mid": NEUTRAL}[kind]
        return pool[int(rng.integers(len(pool)))]

    def label_of(s: int) -> int:
        return 1 if s > 0 else 0

    out: list[TreeInstance] = []
    for _ in range(COUNT):
        labels: list[int] = []
        tokens: list[int] = []
        lefts: list[int] = []
        rights: list[int] = []

        def leaf(kind: str) -> tuple[int, int]:
            word = sample_word(kind)
            s = (kind == "pos") - (kind == "neg")
            labels.append(label_of(s))
            tokens.append(vocab.add(word))
            lefts.append(-1)
            rights.append(-1)
            return len(labels) - 1, s

        def node(left: tuple[int, int], right: tuple[int, int], flip: bool) -> tuple[int, int]:
            s = -right[1] if flip else left[1] + right[1]
            labels.append(label_of(s))
            tokens.append(-1)
            lefts.append(left[0])
            rights.append(right[0])
            return len(labels) - 1, s

        def phrase(depth: int) -> tuple[int, int]:
            """A sentiment-bearing subtree of at most `depth` further splits."""
            r = rng.random()
            if depth == 0 or r < 0.35:
                return leaf("pos" if rng.random() < 0.5 else "neg")
            if r < 0.55:  # negation: ("not"-leaf, phrase)
                return node(leaf("not"), phrase(depth - 1), flip=True)
            if r < 0.75:  # neutral modifier on the left
                return node(leaf("mid"), phrase(depth - 1), flip=False)
            return node(phrase(depth - 1), phrase(depth - 1), flip=False)

        # subject ("the film" style) + predicate phrase
        subj = node(leaf("mid"), leaf("mid"), flip=False)
        root, _ = node(subj, phrase(int(rng.integers(1, 4))), flip=False)
        out.append(
            TreeInstance(tuple(labels), tuple(tokens), tuple(lefts), tuple(rights), root)
        )
    return out, vocab


def main() -> int:
    corpus, vocab = build_corpus()
    dest = Path(__file__).resolve().parents[1] / "src" / "rdg" / "corpora" / "mini_reviews.txt"
    dest.parent.mkdir(parents=True, exist_ok=True)
    lines = [serialize(t, vocab) for t in corpus]
    dest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    n_nodes = sum(t.n_nodes for t in corpus)
    print(f"wrote {len(corpus)} trees ({n_nodes} nodes) to {dest}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
