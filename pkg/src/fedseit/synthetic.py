"""Seeded synthetic text corpora for desk-scale experiments.

Each label owns a pool of keyword tokens; documents mix keywords of their
label with background tokens. ``shared_keywords`` adds a pool every label
also draws from, which makes tasks look alike at the vocabulary level.
``prefix`` namespaces every token so two corpora can have disjoint vocabularies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Corpus


@dataclass
class SyntheticSpec:
    labels: int = 12
    train_per_label: int = 80
    test_per_label: int = 20
    keywords_per_label: int = 15
    shared_keywords: int = 0
    background: int = 150
    min_len: int = 8
    max_len: int = 20
    keyword_rate: float = 0.4
    shared_rate: float = 0.2
    prefix: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.labels < 1 or self.keywords_per_label < 1 or self.background < 1:
            raise ValueError("labels, keywords_per_label and background must be >= 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.keyword_rate + self.shared_rate > 1.0:
            raise ValueError("keyword_rate + shared_rate must be <= 1")

    def label_name(self, i: int) -> str:
        return f"{self.prefix}label{i:02d}"


def _doc(spec: SyntheticSpec, lab: int, rng: np.random.Generator) -> str:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    toks = []
    for u in rng.random(n):
        if u < spec.keyword_rate:
            toks.append(f"{spec.prefix}k{lab}x{rng.integers(spec.keywords_per_label)}")
        elif u < spec.keyword_rate + spec.shared_rate and spec.shared_keywords:
            toks.append(f"{spec.prefix}s{rng.integers(spec.shared_keywords)}")
        else:
            toks.append(f"{spec.prefix}b{rng.integers(spec.background)}")
    return " ".join(toks)


def make_corpus(spec: SyntheticSpec) -> tuple[Corpus, Corpus]:
    """(train, test) corpora; documents are emitted label by label."""
    rng = np.random.default_rng(spec.seed)
    splits = []
    for split, per_label in (("train", spec.train_per_label), ("test", spec.test_per_label)):
        pairs = [(_doc(spec, lab, rng), spec.label_name(lab))
                 for lab in range(spec.labels) for _ in range(per_label)]
        splits.append(Corpus.from_texts(pairs, split))
    return splits[0], splits[1]
