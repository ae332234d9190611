"""Experiment config files.

A config is a flat YAML mapping; only ``synthetic`` may hold a nested
mapping (forwarded to :class:`fedseit.synthetic.SyntheticSpec`). Keys and
defaults::

    # federation
    clients: 3                  # C
    tasks: 5                    # T, tasks picked per client
    rounds: 10                  # R
    mode: fedseit               # fedseit | fedweit | fedseit-dls | isolated
    sit: off                    # off, or K (tasks sent to each client)
    cluster_centers: 200        # Q
    seeds: [1, 2, 3]            # one full run per seed (init + task order)
    shuffle_tasks: true
    workers: 1
    # data
    train_corpus: train.tsv     # label<TAB>text; relative to the config file
    test_corpus: test.tsv
    embeddings: null            # word2vec text file; null = seeded random table
    labels_per_task: 4
    task_generation_seed: 42
    synthetic: null             # or a mapping, used instead of the corpus files
    # model
    embedding_dim: 300
    kernel_sizes: [3, 4, 5]
    filters_per_size: 128
    mask_init: 3.0
    # training
    learning_rate: 1.0e-4
    batch_size: 64
    dropout: 0.3
    lambda1: 1.0e-3
    lambda2: 1.0
    epochs_per_round: 50
    early_stopping_patience: 3
"""

from __future__ import annotations

from pathlib import Path

import yaml

from .client import TrainConfig
from .federation import FederationConfig
from .model import ModelConfig
from .server import SITConfig

DEFAULTS = {
    "clients": 3, "tasks": 5, "rounds": 10, "mode": "fedseit", "sit": "off",
    "cluster_centers": 200, "seeds": [1, 2, 3], "shuffle_tasks": True, "workers": 1,
    "train_corpus": None, "test_corpus": None, "embeddings": None,
    "labels_per_task": 4, "task_generation_seed": 42, "synthetic": None,
    "embedding_dim": 300, "kernel_sizes": [3, 4, 5], "filters_per_size": 128, "mask_init": 3.0,
    "learning_rate": 1e-4, "batch_size": 64, "dropout": 0.3, "lambda1": 1e-3, "lambda2": 1.0,
    "epochs_per_round": 50, "early_stopping_patience": 3,
}
PATH_KEYS = ("train_corpus", "test_corpus", "embeddings")


def parse_sit(value) -> int | None:
    """``off``/``false``/None disable SIT; an integer K enables it."""
    if value is None or value is False or str(value).lower() == "off":
        return None
    try:
        k = int(value)
    except (TypeError, ValueError):
        k = 0
    if k < 1:
        raise ValueError(f"sit must be 'off' or a positive K, got {value!r}")
    return k


def load_config(path) -> dict:
    path = Path(path)
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a key-value mapping")
    return settings(raw, base_dir=path.parent)


def settings(raw: dict, base_dir=None) -> dict:
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    out = dict(DEFAULTS)
    out.update(raw)
    for k in PATH_KEYS:
        if out[k] is not None and base_dir is not None:
            out[k] = str((Path(base_dir) / out[k]).resolve())
    out["sit"] = parse_sit(out["sit"])
    out["seeds"] = [int(s) for s in (out["seeds"] if isinstance(out["seeds"], list) else [out["seeds"]])]
    if not out["seeds"]:
        raise ValueError("seeds must list at least one seed")
    if out["synthetic"] is None and out["train_corpus"] is None:
        raise ValueError("config needs either train_corpus or a synthetic section")
    return out


def federation_config(s: dict, seed: int) -> FederationConfig:
    return FederationConfig(
        clients=int(s["clients"]), tasks=int(s["tasks"]), rounds=int(s["rounds"]), mode=s["mode"],
        sit=SITConfig(enabled=s["sit"] is not None, k=s["sit"] or 1, q=int(s["cluster_centers"])),
        train=TrainConfig(
            lambda1=float(s["lambda1"]), lambda2=float(s["lambda2"]),
            learning_rate=float(s["learning_rate"]), batch_size=int(s["batch_size"]),
            epochs_per_round=int(s["epochs_per_round"]),
            early_stop_patience=int(s["early_stopping_patience"]), dropout=float(s["dropout"]),
        ),
        model=ModelConfig(
            embedding_dim=int(s["embedding_dim"]), filter_sizes=tuple(s["kernel_sizes"]),
            filters_per_size=int(s["filters_per_size"]), mask_init=float(s["mask_init"]),
        ),
        seed=seed, shuffle_tasks=bool(s["shuffle_tasks"]), workers=int(s["workers"]),
    )
