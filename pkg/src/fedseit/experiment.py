"""Multi-seed experiment driver: data, one federation per seed, scoring, files."""

from __future__ import annotations

import json
import logging
from pathlib import Path

from .config import federation_config
from .data import Corpus, EmbeddingTable, corpus_vocab, load_corpus, load_embeddings, non_iid_split, save_grid, synth_embeddings
from .evaluation import ExperimentResult, bundles_from_clients, emit, evaluate_all, load_checkpoints, save_checkpoints
from .federation import run, write_transcript
from .synthetic import SyntheticSpec, make_corpus

log = logging.getLogger(__name__)


def load_data(s: dict) -> tuple[Corpus, Corpus, EmbeddingTable]:
    if s["synthetic"] is not None:
        train, test = make_corpus(SyntheticSpec(**s["synthetic"]))
    else:
        train = load_corpus(s["train_corpus"], "train")
        test = load_corpus(s["test_corpus"], "test") if s["test_corpus"] else Corpus([], "test")
    if s["embeddings"]:
        table = load_embeddings(s["embeddings"], int(s["embedding_dim"]))
    else:
        table = synth_embeddings(corpus_vocab(train, test), int(s["embedding_dim"]), int(s["task_generation_seed"]))
    return train, test, table


def run_experiment(s: dict, out_dir) -> ExperimentResult:
    out = Path(out_dir)
    train, test, table = load_data(s)
    grid = non_iid_split(train, test, int(s["clients"]), int(s["tasks"]),
                         int(s["labels_per_task"]), int(s["task_generation_seed"]))
    save_grid(grid, out / "grid")
    echo = {k: v for k, v in s.items()}
    result = None
    for seed in s["seeds"]:
        cfg = federation_config(s, seed)
        log.info("seed %d: %s, C=%d T=%d R=%d", seed, cfg.mode, cfg.clients, cfg.tasks, cfg.rounds)
        fed = run(cfg, grid, table)
        ckpt = out / "checkpoints" / f"seed{seed}"
        bundles = bundles_from_clients(fed.clients)
        save_checkpoints(bundles, table, cfg.model, ckpt,
                         {"seed": seed, "trajectory": fed.trajectory, "selections": fed.selections})
        write_transcript(fed.transcript, ckpt / "transcript.jsonl")
        fed.registry.save(ckpt / "registry.jsonl")
        with open(ckpt / "reports.jsonl", "w") as fh:
            for rep in fed.reports:
                fh.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
        one = evaluate_all(bundles, table, cfg.model, seed, fed.trajectory, echo)
        one.runs[0].transcript = str(Path("checkpoints") / f"seed{seed}" / "transcript.jsonl")
        result = one if result is None else result.merge(one)
    emit(result, out)
    return result


def evaluate_checkpoints(ckpt_dir, out_dir) -> ExperimentResult:
    """Re-score saved bundles; ``ckpt_dir`` is one seed's directory or a parent of several."""
    root = Path(ckpt_dir)
    dirs = [root] if (root / "checkpoint.json").exists() else sorted(p.parent for p in root.glob("*/checkpoint.json"))
    if not dirs:
        raise FileNotFoundError(f"no checkpoint directories under {root}")
    result = None
    for d in dirs:
        bundles, table, cfg, info = load_checkpoints(d)
        one = evaluate_all(bundles, table, cfg, int(info.get("seed", 0)), info.get("trajectory"), info)
        if (d / "transcript.jsonl").exists():
            one.runs[0].transcript = str(d / "transcript.jsonl")
        result = one if result is None else result.merge(one)
    emit(result, out_dir)
    return result
