"""Parameter server: FedAvg of sparsified bases, adapter registry, task-similarity selection."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codec
from .model import ForeignAdapter, ModelConfig, init_filters
from .tensor import ShapeError


@dataclass
class SITConfig:
    enabled: bool = False
    k: int = 3
    q: int = 200

    def __post_init__(self):
        if self.enabled and self.k < 1:
            raise ValueError("SIT needs k >= 1")
        if self.q < 1:
            raise ValueError("q must be >= 1")


def aggregate(bases: list[list[np.ndarray]]) -> list[np.ndarray]:
    """Unweighted elementwise mean of per-client filter-bank lists."""
    if not bases:
        raise ValueError("aggregate needs at least one client")
    shapes = [[np.shape(b) for b in banks] for banks in bases]
    if any(s != shapes[0] for s in shapes):
        raise ShapeError(f"aggregate: mismatched shapes {shapes}")
    n = len(bases)
    out = []
    for parts in zip(*bases):
        acc = np.zeros_like(parts[0], dtype=np.float64)
        for p in parts:
            acc = acc + p
        out.append(acc / n)
    return out


def score_overlap(query, candidate) -> float:
    """Mean cosine similarity over all (query center, candidate center) pairs."""
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    c = np.atleast_2d(np.asarray(candidate, dtype=np.float64))
    if q.shape[1] != c.shape[1]:
        raise ShapeError(f"summary dims differ: {q.shape[1]} vs {c.shape[1]}")
    if len(q) == 0 or len(c) == 0:
        raise ValueError("empty summary")
    qn = np.linalg.norm(q, axis=1)
    cn = np.linalg.norm(c, axis=1)
    qu = np.divide(q, qn[:, None], out=np.zeros_like(q), where=qn[:, None] > 0)
    cu = np.divide(c, cn[:, None], out=np.zeros_like(c), where=cn[:, None] > 0)
    return float((qu @ cu.T).mean())


@dataclass(frozen=True, eq=False)
class RegistryEntry:
    client_id: int
    task_id: int
    adaptive: tuple[np.ndarray, ...]
    summary: np.ndarray | None = None

    def adapter(self) -> ForeignAdapter:
        return ForeignAdapter(self.client_id, self.task_id, self.adaptive)


class AdapterRegistry:
    """Write-once store of every completed (client, task) adaptive bank and summary."""

    def __init__(self):
        self._entries: dict[tuple[int, int], RegistryEntry] = {}

    def store(self, client_id: int, task_id: int, adaptive, summary=None):
        key = (client_id, task_id)
        if key in self._entries:
            raise KeyError(f"registry already holds client {client_id} task {task_id}")
        arrays = tuple(np.array(a, dtype=np.float64) for a in adaptive)
        for a in arrays:
            a.setflags(write=False)
        summ = None if summary is None else np.array(summary, dtype=np.float64)
        if summ is not None:
            summ.setflags(write=False)
        self._entries[key] = RegistryEntry(client_id, task_id, arrays, summ)

    def get(self, client_id: int, task_id: int) -> RegistryEntry:
        return self._entries[client_id, task_id]

    def __contains__(self, key) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[RegistryEntry]:
        return [self._entries[k] for k in sorted(self._entries)]

    def save(self, path):
        with open(path, "w") as fh:
            for e in self.entries():
                named = [(f"A.{i}", a) for i, a in enumerate(e.adaptive)]
                if e.summary is not None:
                    named.append(("summary", e.summary))
                rec = {"client": e.client_id, "task": e.task_id, "params": codec.to_text(codec.encode(named))}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "AdapterRegistry":
        reg = cls()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            named = dict(codec.decode(codec.from_text(rec["params"])))
            adaptive = [named[k] for k in sorted((k for k in named if k.startswith("A.")),
                                                 key=lambda k: int(k[2:]))]
            reg.store(rec["client"], rec["task"], adaptive, named.get("summary"))
        return reg


def rank_candidates(requesting_client: int, summary, registry: AdapterRegistry) -> list[tuple[float, RegistryEntry]]:
    scored = [
        (score_overlap(summary, e.summary), e)
        for e in registry.entries()
        if e.client_id != requesting_client and e.summary is not None
    ]
    scored.sort(key=lambda se: (-se[0], se[1].client_id, se[1].task_id))
    return scored


def select_top_k(requesting_client: int, summary, registry: AdapterRegistry, cfg: SITConfig) -> list[ForeignAdapter]:
    """The ``k`` most similar foreign tasks from every other client's full history."""
    if not cfg.enabled:
        raise ValueError("select_top_k called with SIT disabled")
    return [e.adapter() for _, e in rank_candidates(requesting_client, summary, registry)[: cfg.k]]


def latest_adapters(requesting_client: int, registry: AdapterRegistry, task: int, clients: int) -> list[ForeignAdapter]:
    """Every client's adapter from task ``task - 1`` (the requester's own included)."""
    if task <= 1:
        return []
    missing = [(c, task - 1) for c in range(clients) if (c, task - 1) not in registry]
    if missing:
        raise KeyError("registry has no adapter for " + ", ".join(f"client {c} task {t}" for c, t in missing))
    return [registry.get(c, task - 1).adapter() for c in range(clients)]


class Server:
    def __init__(self, model_cfg: ModelConfig, sit: SITConfig, clients: int, seed: int = 0):
        self.model_cfg = model_cfg
        self.sit = sit
        self.clients = clients
        self.registry = AdapterRegistry()
        self.theta_g = init_filters(model_cfg, np.random.default_rng([seed, 1_000_003]))
        self.projections: dict[str, np.ndarray] = {}
        self.queries: dict[int, np.ndarray] = {}

    def aggregate_round(self, bases: list[list[np.ndarray]], projections: list[dict] | None = None):
        if len(bases) != self.clients:
            raise ValueError(f"expected {self.clients} base uploads, got {len(bases)}")
        self.theta_g = aggregate(bases)
        if projections:
            names = sorted(projections[0])
            means = aggregate([[p[n] for n in names] for p in projections])
            self.projections = dict(zip(names, means))

    def register(self, client_id: int, task_id: int, adaptive, summary=None):
        self.registry.store(client_id, task_id, adaptive, summary)

    def adapters_for(self, client_id: int, task: int, summary=None) -> list[ForeignAdapter]:
        if task <= 1:
            return []
        if self.sit.enabled:
            return select_top_k(client_id, summary, self.registry, self.sit)
        return latest_adapters(client_id, self.registry, task, self.clients)
