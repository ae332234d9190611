"""Per-client continual trainer.

A client owns one dense base filter bank for its whole task sequence and one
:class:`DecomposedTaskState` per task. The training objective for task ``t`` is

    mean CE
    + lambda1 * (|sigmoid(m_t)|_1 + sum_{i<=t} |A_i|_1)
    + lambda2 * sum_{i<t} |(B - B_i*) * sigmoid(m_i) + (A_i - A_i*)|_2^2

where ``B_i*``/``A_i*`` are the snapshots taken when task ``i`` ended, so the
last term is exactly the squared drift of task ``i``'s composed filters.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .cluster import kmeans
from .data import EmbeddingTable, TaskDataset, encode_docs, pad_batch
from .model import (
    DecomposedTaskState,
    ForeignAdapter,
    ModelConfig,
    check_filters,
    forward,
    init_filters,
    init_task_state,
)
from .tensor import ShapeError

log = logging.getLogger(__name__)

NONZERO_TOL = 1e-6


@dataclass
class TrainConfig:
    lambda1: float = 1e-3
    lambda2: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs_per_round: int = 50
    early_stop_patience: int = 3
    dropout: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "learning_rate", "epochs_per_round", "early_stop_patience"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class RoundReport:
    client_id: int
    task: int
    round: int
    epoch_losses: list[float] = field(default_factory=list)
    valid_losses: list[float] = field(default_factory=list)
    epochs_run: int = 0
    early_stopped: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def overwrite_nonzero(base: list[np.ndarray], theta_g: list[np.ndarray], tol: float = NONZERO_TOL) -> list[np.ndarray]:
    """Copy of ``base`` with every entry where ``|theta_g| > tol`` taken from ``theta_g``."""
    if len(base) != len(theta_g):
        raise ShapeError(f"{len(theta_g)} global banks for {len(base)} base banks")
    out = []
    for b, g in zip(base, theta_g):
        if b.shape != g.shape:
            raise ShapeError(f"global bank {g.shape} vs base {b.shape}")
        out.append(np.where(np.abs(g) > tol, g, b))
    return out


def sparsify(base: list[np.ndarray], masks: list[np.ndarray], tol: float = NONZERO_TOL) -> list[np.ndarray]:
    out = []
    for b, m in zip(base, masks):
        v = b * m
        v[np.abs(v) <= tol] = 0.0
        out.append(v)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def document_vectors(docs, table: EmbeddingTable) -> np.ndarray:
    """Mean in-vocabulary token embedding per document; all-OOV documents are skipped."""
    rows = []
    for toks, _ in docs:
        idx = [table.vocab[t] for t in toks if t in table.vocab]
        if idx:
            rows.append(table.matrix[idx].mean(axis=0))
    return np.array(rows).reshape(len(rows), table.dim)


def summarize_task(dataset: TaskDataset, table: EmbeddingTable, q: int = 200, seed: int = 0) -> np.ndarray:
    """Cluster-center summary [<=q, D] of a task's training documents."""
    if not dataset.train:
        raise ValueError("cannot summarise an empty task")
    if q < 1:
        raise ValueError("q must be >= 1")
    vecs = document_vectors(dataset.train, table)
    if len(vecs) == 0:
        raise ValueError(f"every document of client {dataset.client_id} task {dataset.task_id} is out of vocabulary")
    return kmeans(vecs, min(q, len(vecs)), seed=seed)


class Client:
    def __init__(self, client_id: int, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 embeddings: EmbeddingTable, mode: str = "fedseit", rng_key: int | None = None):
        if embeddings.dim != model_cfg.embedding_dim:
            raise ShapeError(f"embedding dim {embeddings.dim} != model dim {model_cfg.embedding_dim}")
        self.client_id = client_id
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.embeddings = embeddings
        self.mode = mode
        # rng_key lets several clients share one random stream (symmetry checks)
        self.rng = np.random.default_rng([train_cfg.seed, client_id if rng_key is None else rng_key])
        self.base = [T.parameter(a) for a in init_filters(model_cfg, self.rng)]
        self.tasks: list[DecomposedTaskState] = []
        self.datasets: list[TaskDataset] = []
        self._encoded: list[dict] = []

    @property
    def current(self) -> DecomposedTaskState:
        if not self.tasks:
            raise RuntimeError(f"client {self.client_id} has no task")
        return self.tasks[-1]

    # ------------------------------------------------------------ server exchange

    def init_base_from_global(self, theta_g: list[np.ndarray]):
        for p, v in zip(self.base, overwrite_nonzero([b.data for b in self.base], theta_g)):
            p.data = v

    def export_sparsified_base(self) -> list[np.ndarray]:
        masks = [_sigmoid(m.data) for m in self.current.mask_logits]
        return sparsify([b.data for b in self.base], masks)

    def export_adaptive(self) -> list[np.ndarray]:
        return [a.data.copy() for a in self.current.adaptive]

    def export_projections(self) -> dict[str, np.ndarray]:
        cur = self.current
        if cur.w_f is None:
            return {}
        return {"W_f": cur.w_f.data.copy(), "W_c": cur.w_c.data.copy()}

    # ------------------------------------------------------------ task lifecycle

    def start_task(self, dataset: TaskDataset, foreign: list[ForeignAdapter] = (),
                   projections: dict[str, np.ndarray] | None = None) -> DecomposedTaskState:
        if not dataset.train:
            raise ValueError(f"client {self.client_id}: task {dataset.task_id} has no training documents")
        if self.tasks and not self.tasks[-1].frozen:
            raise RuntimeError("previous task was not snapshotted")
        state = init_task_state(self.model_cfg, len(self.tasks) + 1, self.mode, self.base,
                                list(foreign), dataset.n_classes, self.rng, projections)
        self.tasks.append(state)
        self.datasets.append(dataset)
        self._encoded.append({
            split: encode_docs(getattr(dataset, split), self.embeddings)
            for split in ("train", "valid", "test")
        })
        return state

    def snapshot_boundaries(self):
        """Record end-of-task anchors for the drift penalty and freeze the task's head."""
        cur = self.current
        cur.base_snapshot = [b.data.copy() for b in self.base]
        cur.adaptive_snapshot = [a.data.copy() for a in cur.adaptive]
        for p in cur.mask_logits + [cur.alpha, cur.head, cur.w_f, cur.w_c]:
            if p is not None:
                p.requires_grad = False
        cur.frozen = True

    def trainable(self) -> list[T.Tensor]:
        params = list(self.base) + self.current.trainable()
        for past in self.tasks[:-1]:
            params += past.adaptive
        return params

    # ------------------------------------------------------------ objective

    def _batch(self, seqs, ids):
        idx, lengths = pad_batch([seqs[i] for i in ids], self.embeddings.oov_index, self.model_cfg.max_filter)
        return T.embed(idx, self.embeddings.matrix), lengths

    def loss_terms(self, x: T.Tensor, lengths, labels, dropout: float = 0.0, rng=None) -> dict[str, T.Tensor]:
        cur = self.current
        logits = forward(x, lengths, cur, dropout=dropout, rng=rng)
        ce = T.softmax_cross_entropy(logits, labels)
        sparsity = T.total(T.l1_norm(T.sigmoid(m)) for m in cur.mask_logits)
        sparsity = T.add(sparsity, T.total(T.l1_norm(a) for s in self.tasks for a in s.adaptive))
        return {"ce": ce, "sparsity": sparsity, "drift": self.drift_term()}

    def drift_term(self) -> T.Tensor:
        terms = []
        for past in self.tasks[:-1]:
            for b, b0, m, a, a0 in zip(self.base, past.base_snapshot, past.mask_logits,
                                       past.adaptive, past.adaptive_snapshot):
                mask = T.Tensor(_sigmoid(m.data))
                delta = T.add(T.mul(T.sub(b, T.Tensor(b0)), mask), T.sub(a, T.Tensor(a0)))
                terms.append(T.sq_l2_norm(delta))
        return T.total(terms)

    def drift_penalty(self) -> float:
        return float(self.drift_term().data)

    def total_loss(self, terms: dict[str, T.Tensor]) -> T.Tensor:
        return T.total([
            terms["ce"],
            T.mul(terms["sparsity"], T.Tensor(self.cfg.lambda1)),
            T.mul(terms["drift"], T.Tensor(self.cfg.lambda2)),
        ])

    # ------------------------------------------------------------ training

    def mean_ce(self, split: str = "valid", state: DecomposedTaskState | None = None) -> float:
        pos = (self.tasks.index(state) if state is not None else len(self.tasks) - 1)
        seqs, y = self._encoded[pos][split]
        state = self.tasks[pos]
        total, bs = 0.0, self.cfg.batch_size
        for lo in range(0, len(seqs), bs):
            ids = np.arange(lo, min(lo + bs, len(seqs)))
            x, lengths = self._batch(seqs, ids)
            logits = forward(x, lengths, state)
            total += float(T.softmax_cross_entropy(logits, y[ids]).data) * len(ids)
        return total / len(seqs)

    def train_round(self, round_idx: int = 1) -> RoundReport:
        cur = self.current
        seqs, y = self._encoded[-1]["train"]
        has_valid = len(self._encoded[-1]["valid"][0]) > 0
        params = self.trainable()
        report = RoundReport(self.client_id, cur.task_id, round_idx)
        best, bad = np.inf, 0
        lr, bs = self.cfg.learning_rate, self.cfg.batch_size
        for epoch in range(self.cfg.epochs_per_round):
            order = self.rng.permutation(len(seqs))
            losses = []
            for lo in range(0, len(order), bs):
                ids = order[lo:lo + bs]
                x, lengths = self._batch(seqs, ids)
                terms = self.loss_terms(x, lengths, y[ids], self.cfg.dropout, self.rng)
                loss = self.total_loss(terms)
                if not loss.is_finite():
                    raise FloatingPointError(
                        f"non-finite loss at client {self.client_id} task {cur.task_id} round {round_idx} "
                        f"epoch {epoch + 1}: " + ", ".join(f"{k}={float(v.data)!r}" for k, v in terms.items())
                    )
                grads = T.backward(loss, params)
                for p, g in zip(params, grads):
                    p.data = p.data - lr * g
                losses.append(float(loss.data))
            report.epoch_losses.append(float(np.mean(losses)))
            report.epochs_run = epoch + 1
            if has_valid:
                val = self.mean_ce("valid")
                report.valid_losses.append(val)
                if val < best:
                    best, bad = val, 0
                else:
                    bad += 1
                    if bad >= self.cfg.early_stop_patience:
                        report.early_stopped = True
                        break
        return report

    # ------------------------------------------------------------ evaluation

    def predict(self, state: DecomposedTaskState, split: str = "test") -> tuple[np.ndarray, np.ndarray]:
        pos = self.tasks.index(state)
        seqs, y = self._encoded[pos][split]
        preds = []
        for lo in range(0, len(seqs), self.cfg.batch_size):
            ids = np.arange(lo, min(lo + self.cfg.batch_size, len(seqs)))
            x, lengths = self._batch(seqs, ids)
            preds.append(forward(x, lengths, state).data.argmax(axis=1))
        return (np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)), y

    def accuracy(self, state: DecomposedTaskState | None = None, split: str = "test") -> float:
        preds, y = self.predict(state or self.current, split)
        return float(np.mean(preds == y)) if len(y) else float("nan")

    def check_global(self, theta_g: list[np.ndarray]):
        check_filters(self.model_cfg, theta_g, "global parameter")
