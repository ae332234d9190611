"""Corpus ingestion, embeddings and the non-iid task grid.

Corpus files are UTF-8 TSV, one document per line: ``label<TAB>text``.
Embedding files are word2vec/GloVe text: ``token v1 ... vD`` per line with an
optional ``count dim`` header line.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

Doc = tuple[tuple[str, ...], int]


def tokenize(text: str) -> list[str]:
    out = []
    for raw in text.lower().split():
        lo, hi = 0, len(raw)
        while lo < hi and not raw[lo].isalnum():
            lo += 1
        while hi > lo and not raw[hi - 1].isalnum():
            hi -= 1
        if hi > lo:
            out.append(raw[lo:hi])
    return out


@dataclass
class Corpus:
    documents: list[tuple[tuple[str, ...], str]]
    split: str = "train"
    dropped: int = 0

    @property
    def label_set(self) -> list[str]:
        return sorted({label for _, label in self.documents})

    def by_label(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, (_, label) in enumerate(self.documents):
            out.setdefault(label, []).append(i)
        return out

    @classmethod
    def from_texts(cls, pairs, split: str = "train") -> "Corpus":
        docs, dropped = [], 0
        for text, label in pairs:
            toks = tokenize(text)
            if toks:
                docs.append((tuple(toks), str(label)))
            else:
                dropped += 1
        if dropped:
            log.warning("dropped %d empty documents from %s split", dropped, split)
        return cls(docs, split, dropped)


def load_corpus(path, split: str = "train") -> Corpus:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'label<TAB>text'")
            label, text = line.split("\t", 1)
            pairs.append((text, label))
    return Corpus.from_texts(pairs, split)


def write_corpus(corpus: Corpus, path):
    with open(path, "w", encoding="utf-8") as fh:
        for toks, label in corpus.documents:
            fh.write(f"{label}\t{' '.join(toks)}\n")


# ------------------------------------------------------------------ embeddings


@dataclass
class EmbeddingTable:
    vocab: dict[str, int]
    matrix: np.ndarray  # [V + 1, D]; the last row is the all-zero OOV row

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def oov_index(self) -> int:
        return self.matrix.shape[0] - 1

    def lookup(self, token: str) -> np.ndarray:
        return self.matrix[self.vocab.get(token, self.oov_index)]

    def encode(self, tokens) -> np.ndarray:
        oov = self.oov_index
        return np.array([self.vocab.get(t, oov) for t in tokens], dtype=np.int64)

    def __contains__(self, token: str) -> bool:
        return token in self.vocab


def _table(tokens: list[str], rows: list, dim: int) -> EmbeddingTable:
    matrix = np.zeros((len(rows) + 1, dim))
    if rows:
        matrix[:-1] = np.asarray(rows, dtype=np.float64)
    return EmbeddingTable({t: i for i, t in enumerate(tokens)}, matrix)


def load_embeddings(path, dim: int) -> EmbeddingTable:
    tokens, rows = [], []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if not parts or parts == [""]:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue  # "count dim" header
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected token + {dim} values, got {len(parts) - 1}")
            try:
                vec = [float(v) for v in parts[1:]]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed number") from None
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"{path}:{lineno}: non-finite value")
            if parts[0] in seen:
                continue
            seen.add(parts[0])
            tokens.append(parts[0])
            rows.append(vec)
    return _table(tokens, rows, dim)


def synth_embeddings(vocab, dim: int, seed: int) -> EmbeddingTable:
    tokens = sorted(set(vocab))
    rng = np.random.default_rng(seed)
    return _table(tokens, list(rng.uniform(-0.1, 0.1, size=(len(tokens), dim))), dim)


def corpus_vocab(*corpora: Corpus) -> list[str]:
    return sorted({tok for c in corpora for toks, _ in c.documents for tok in toks})


# ------------------------------------------------------------------ task grid


@dataclass
class TaskDataset:
    client_id: int
    task_id: int
    labels: tuple[str, ...]
    train: list[Doc] = field(default_factory=list)
    valid: list[Doc] = field(default_factory=list)
    test: list[Doc] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def to_dict(self) -> dict:
        enc = lambda docs: [[" ".join(t), y] for t, y in docs]  # noqa: E731
        return {
            "client_id": self.client_id,
            "task_id": self.task_id,
            "labels": list(self.labels),
            "train": enc(self.train),
            "valid": enc(self.valid),
            "test": enc(self.test),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskDataset":
        dec = lambda docs: [(tuple(t.split(" ")), int(y)) for t, y in docs]  # noqa: E731
        return cls(d["client_id"], d["task_id"], tuple(d["labels"]),
                   dec(d["train"]), dec(d["valid"]), dec(d["test"]))


def non_iid_split(train: Corpus, test: Corpus, clients: int, tasks: int,
                  labels_per_task: int = 4, seed: int = 42,
                  valid_fraction: float = 0.1) -> list[list[TaskDataset]]:
    """Build the ``clients x tasks`` grid of task datasets.

    Each cell draws ``labels_per_task`` distinct labels. A label drawn by k
    cells has its (shuffled) training documents cut into k disjoint parts whose
    sizes differ by at most one; every cell then holds out ``valid_fraction`` of
    its share for validation. Test sets are the full test documents of the
    cell's labels and are not split.
    """
    labels = train.label_set
    if labels_per_task > len(labels):
        raise ValueError(f"labels_per_task={labels_per_task} exceeds {len(labels)} labels")
    if clients < 1 or tasks < 1:
        raise ValueError("clients and tasks must be >= 1")
    rng = np.random.default_rng(seed)

    subsets: dict[tuple[int, int], tuple[str, ...]] = {}
    users: dict[str, list[tuple[int, int]]] = {}
    for c in range(clients):
        for t in range(tasks):
            picked = rng.choice(len(labels), size=labels_per_task, replace=False)
            subsets[c, t] = tuple(labels[i] for i in picked)
            for lab in subsets[c, t]:
                users.setdefault(lab, []).append((c, t))

    by_label = train.by_label()
    shares: dict[tuple[int, int], list[int]] = {cell: [] for cell in subsets}
    for lab in labels:
        cells = users.get(lab)
        if not cells:
            continue
        docs = by_label[lab]
        if len(docs) < len(cells):
            raise ValueError(f"label {lab!r} has {len(docs)} training documents but is drawn by {len(cells)} tasks")
        perm = rng.permutation(docs)
        for cell, part in zip(cells, np.array_split(perm, len(cells))):
            shares[cell].extend(int(i) for i in part)

    test_by_label = test.by_label()
    grid = []
    for c in range(clients):
        row = []
        for t in range(tasks):
            subset = subsets[c, t]
            local = {lab: i for i, lab in enumerate(subset)}
            idx = rng.permutation(np.array(sorted(shares[c, t]), dtype=np.int64))
            n_valid = int(round(valid_fraction * len(idx))) if len(idx) > 1 else 0
            docs = [(train.documents[i][0], local[train.documents[i][1]]) for i in idx]
            test_idx = sorted(i for lab in subset for i in test_by_label.get(lab, []))
            row.append(TaskDataset(
                client_id=c, task_id=t, labels=subset,
                train=docs[n_valid:], valid=docs[:n_valid],
                test=[(test.documents[i][0], local[test.documents[i][1]]) for i in test_idx],
            ))
        grid.append(row)
    return grid


def manifest(grid: list[list[TaskDataset]]) -> list[dict]:
    return [
        {"client": d.client_id, "task": d.task_id, "labels": list(d.labels),
         "n_train": len(d.train), "n_valid": len(d.valid), "n_test": len(d.test)}
        for row in grid for d in row
    ]


def save_grid(grid: list[list[TaskDataset]], out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tasks.json").write_text(json.dumps([[d.to_dict() for d in row] for row in grid]))
    (out / "manifest.json").write_text(json.dumps(manifest(grid), indent=2))


def load_grid(path) -> list[list[TaskDataset]]:
    path = Path(path)
    if path.is_dir():
        path = path / "tasks.json"
    return [[TaskDataset.from_dict(d) for d in row] for row in json.loads(path.read_text())]


# ------------------------------------------------------------------ batching


def encode_docs(docs: list[Doc], table: EmbeddingTable) -> tuple[list[np.ndarray], np.ndarray]:
    return [table.encode(t) for t, _ in docs], np.array([y for _, y in docs], dtype=np.int64)


def pad_batch(seqs: list[np.ndarray], pad_index: int, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad index sequences with ``pad_index`` (the zero OOV row).

    Documents shorter than ``min_len`` count as length ``min_len``; the extra
    rows are zero embeddings.
    """
    lengths = np.array([max(len(s), min_len) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), pad_index, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths
