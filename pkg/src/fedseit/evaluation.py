"""End-of-run scoring, multi-seed aggregation, checkpoints and result files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec
from . import tensor as T
from .data import EmbeddingTable, TaskDataset, encode_docs, pad_batch
from .model import DecomposedTaskState, ForeignAdapter, ModelConfig, forward, state_arrays


def micro_accuracy(preds, truths) -> float:
    preds, truths = np.asarray(preds), np.asarray(truths)
    if preds.shape != truths.shape:
        raise ValueError(f"{preds.shape[0] if preds.ndim else 0} predictions for "
                         f"{truths.shape[0] if truths.ndim else 0} labels")
    if preds.size == 0:
        raise ValueError("accuracy of an empty test set is undefined")
    return float(np.count_nonzero(preds == truths)) / preds.size


def mean(values) -> float:
    values = list(values)
    if not values:
        raise ValueError("mean of nothing")
    return math.fsum(values) / len(values)


def population_std(values) -> float:
    values = list(values)
    mu = mean(values)
    return math.sqrt(math.fsum((v - mu) ** 2 for v in values) / len(values))


# ------------------------------------------------------------------ frozen bundles


@dataclass(eq=False)
class TaskBundle:
    """Everything needed to re-score one finished (client, task): parameters and its test data."""

    client_id: int
    task: int  # 1-based position in the client's sequence
    mode: str
    params: dict[str, np.ndarray]
    foreign: list[ForeignAdapter]
    dataset: TaskDataset

    REQUIRED = ("B", "A", "m", "alpha", "head")

    def validate(self, cfg: ModelConfig):
        k = len(cfg.filter_sizes)
        missing = [f"{p}.{i}" for p in ("B", "A", "m") for i in range(k) if f"{p}.{i}" not in self.params]
        missing += [n for n in ("alpha", "head") if n not in self.params]
        if self.mode != "fedweit":
            missing += [n for n in ("W_f", "W_c") if n not in self.params]
        if missing:
            raise ValueError(f"bundle client {self.client_id} task {self.task} lacks {', '.join(missing)}")
        if len(self.foreign) != len(self.params["alpha"]):
            raise ValueError(f"bundle client {self.client_id} task {self.task}: "
                             f"{len(self.foreign)} foreign adapters for {len(self.params['alpha'])} attentions")

    def state(self, cfg: ModelConfig) -> DecomposedTaskState:
        self.validate(cfg)
        p = self.params
        banks = lambda prefix: [T.Tensor(p[f"{prefix}.{i}"]) for i in range(len(cfg.filter_sizes))]  # noqa: E731
        const = lambda name: T.Tensor(p[name]) if name in p else None  # noqa: E731
        return DecomposedTaskState(
            task_id=self.task, mode=self.mode, base=banks("B"), adaptive=banks("A"),
            mask_logits=banks("m"), alpha=const("alpha"), head=const("head"),
            w_f=None if self.mode == "fedweit" else const("W_f"),
            w_c=None if self.mode == "fedweit" else const("W_c"),
            foreign=list(self.foreign), frozen=True,
        )

    def to_json(self) -> str:
        named = sorted(self.params.items())
        for i, a in enumerate(self.foreign):
            named += [(f"F{i}.{j}", f) for j, f in enumerate(a.filters)]
        rec = {
            "client": self.client_id, "task": self.task, "mode": self.mode,
            "foreign": [[a.source_client, a.source_task] for a in self.foreign],
            "dataset": self.dataset.to_dict(),
            "params": codec.to_text(codec.encode(named)),
        }
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TaskBundle":
        rec = json.loads(text)
        named = dict(codec.decode(codec.from_text(rec["params"])))
        foreign = []
        for i, (sc, st) in enumerate(rec["foreign"]):
            keys = sorted((k for k in named if k.startswith(f"F{i}.")), key=lambda k: int(k.split(".")[1]))
            foreign.append(ForeignAdapter(sc, st, tuple(named.pop(k) for k in keys)))
        return cls(rec["client"], rec["task"], rec["mode"], named, foreign,
                   TaskDataset.from_dict(rec["dataset"]))


def bundles_from_clients(clients) -> list[TaskBundle]:
    """Freeze every task of every client using each client's final base."""
    out = []
    for client in clients:
        for pos, (state, ds) in enumerate(zip(client.tasks, client.datasets), 1):
            params = {n: np.array(a, copy=True) for n, a in state_arrays(state)}
            out.append(TaskBundle(client.client_id, pos, state.mode, params, list(state.foreign), ds))
    return out


def predict_bundle(bundle: TaskBundle, embeddings: EmbeddingTable, cfg: ModelConfig,
                   batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    state = bundle.state(cfg)
    seqs, y = encode_docs(bundle.dataset.test, embeddings)
    preds = []
    for lo in range(0, len(seqs), batch_size):
        idx, lengths = pad_batch(seqs[lo:lo + batch_size], embeddings.oov_index, cfg.max_filter)
        preds.append(forward(T.embed(idx, embeddings.matrix), lengths, state).data.argmax(axis=1))
    return (np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)), y


# ------------------------------------------------------------------ results


@dataclass
class SeedResult:
    seed: int
    maa: dict[tuple[int, int], float]
    trajectory: list[dict] = field(default_factory=list)
    transcript: str | None = None

    @property
    def tta(self) -> float:
        return mean(self.maa[k] for k in sorted(self.maa))


@dataclass
class ExperimentResult:
    runs: list[SeedResult]
    config: dict = field(default_factory=dict)

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.runs]

    @property
    def tta_mean(self) -> float:
        return mean(r.tta for r in self.runs)

    @property
    def tta_std(self) -> float:
        return population_std(r.tta for r in self.runs)

    def merge(self, other: "ExperimentResult") -> "ExperimentResult":
        return ExperimentResult(self.runs + other.runs, self.config or other.config)


def evaluate_all(bundles: list[TaskBundle], embeddings: EmbeddingTable, cfg: ModelConfig,
                 seed: int = 0, trajectory=None, config: dict | None = None) -> ExperimentResult:
    """Score every frozen (client, task) bundle on its test set, dropout off."""
    if not bundles:
        raise ValueError("no bundles to evaluate")
    maa = {}
    for b in bundles:
        preds, y = predict_bundle(b, embeddings, cfg)
        maa[b.client_id, b.task] = micro_accuracy(preds, y)
    return ExperimentResult([SeedResult(seed, maa, list(trajectory or []))], dict(config or {}))


def emit(result: ExperimentResult, out_dir) -> Path:
    """Write results.csv, trajectory.csv, config.echo and transcripts.txt under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "client", "task", "maa", "tta_std"])
        for run in result.runs:
            for (c, t) in sorted(run.maa):
                w.writerow([run.seed, c, t, repr(run.maa[c, t]), ""])
        for run in result.runs:
            w.writerow([run.seed, "all", "all", repr(run.tta), ""])
        w.writerow(["mean", "all", "all", repr(result.tta_mean), repr(result.tta_std)])
    with open(out / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "client", "task", "round", "accuracy"])
        for run in result.runs:
            for p in run.trajectory:
                w.writerow([run.seed, p["client"], p["task"], p["round"], repr(p["accuracy"])])
    (out / "config.echo").write_text(json.dumps(result.config, indent=2, sort_keys=True) + "\n")
    (out / "transcripts.txt").write_text("".join(f"{r.seed}\t{r.transcript}\n" for r in result.runs if r.transcript))
    return out


def read_results(path) -> dict:
    """Parse results.csv back into per-seed MAA tables and the summary row."""
    per_seed: dict[str, dict[tuple[int, int], float]] = {}
    summary = None
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["seed"] == "mean":
                summary = (float(row["maa"]), float(row["tta_std"]))
            elif row["client"] != "all":
                per_seed.setdefault(row["seed"], {})[int(row["client"]), int(row["task"])] = float(row["maa"])
    return {"maa": per_seed, "summary": summary}


# ------------------------------------------------------------------ checkpoints


def save_checkpoints(bundles: list[TaskBundle], embeddings: EmbeddingTable, cfg: ModelConfig,
                     out_dir, meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for b in bundles:
        (out / f"client{b.client_id}_task{b.task}.json").write_text(b.to_json() + "\n")
    tokens = sorted(embeddings.vocab, key=embeddings.vocab.get)
    np.savez(out / "embeddings.npz", tokens=np.array(tokens, dtype=str), matrix=embeddings.matrix)
    info = {"model": {"embedding_dim": cfg.embedding_dim, "filter_sizes": list(cfg.filter_sizes),
                      "filters_per_size": cfg.filters_per_size, "mask_init": cfg.mask_init}}
    info.update(meta or {})
    (out / "checkpoint.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return out


def load_checkpoints(path) -> tuple[list[TaskBundle], EmbeddingTable, ModelConfig, dict]:
    path = Path(path)
    info_file = path / "checkpoint.json"
    if not info_file.exists():
        raise FileNotFoundError(f"{path} is not a checkpoint directory (no checkpoint.json)")
    info = json.loads(info_file.read_text())
    cfg = ModelConfig(**info["model"])
    with np.load(path / "embeddings.npz") as z:
        tokens, matrix = [str(t) for t in z["tokens"]], z["matrix"]
    table = EmbeddingTable({t: i for i, t in enumerate(tokens)}, matrix)
    files = sorted(path.glob("client*_task*.json"))
    if not files:
        raise FileNotFoundError(f"{path} holds no task bundles")
    bundles = [TaskBundle.from_json(f.read_text()) for f in files]
    bundles.sort(key=lambda b: (b.client_id, b.task))
    return bundles, table, cfg, info
