"""Synchronous federation loop with an in-process message transport.

Per task ``t`` and round ``r``:

1. server broadcasts the global base (``GlobalDown``) and clients overwrite
   their base with its non-zero entries;
2. at ``r == 1`` every client starts a fresh task state; for ``t > 1`` it
   first receives foreign adaptive filters (``AdaptersDown``), ranked by
   summary similarity when SIT is on (the client uploads the new task's
   summary as a ``SummaryUp`` query first);
3. clients train, upload sparsified bases (``BaseUp``) and the server
   averages them into the next global base;
4. at ``r == R`` clients upload the task's adaptive filters (``AdapterUp``,
   plus the task summary when SIT is on), the server registers them, and
   clients snapshot their drift anchors.

Every exchange goes through :class:`Transport`, whose log is the transcript.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import codec
from .client import Client, RoundReport, TrainConfig, summarize_task
from .data import EmbeddingTable, TaskDataset
from .model import MODES, ForeignAdapter, ModelConfig
from .server import Server, SITConfig, aggregate

log = logging.getLogger(__name__)

KINDS = ("GlobalDown", "BaseUp", "AdapterUp", "SummaryUp", "AdaptersDown")
SERVER = "server"
BROADCAST = "all"


def client_name(c: int) -> str:
    return f"client:{c}"


@dataclass
class FederationConfig:
    clients: int = 3
    tasks: int = 5
    rounds: int = 10
    mode: str = "fedseit"
    sit: SITConfig = field(default_factory=SITConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 1
    shuffle_tasks: bool = True
    workers: int = 1
    shared_client_seed: bool = False  # every client draws from the same stream

    def __post_init__(self):
        if min(self.clients, self.tasks, self.rounds) < 1:
            raise ValueError("clients, tasks and rounds must all be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def dls(self) -> bool:
        return self.mode == "fedseit-dls"

    @property
    def federated(self) -> bool:
        return self.mode != "isolated"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["filter_sizes"] = list(self.model.filter_sizes)
        return d


@dataclass
class Message:
    seq: int
    kind: str
    sender: str
    receiver: str
    task: int
    round: int
    payload: bytes | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(codec.decode(self.payload)) if self.payload is not None else {}

    def names(self) -> list[str]:
        return [n for n, _ in codec.decode(self.payload)] if self.payload is not None else []

    def to_json(self) -> str:
        rec = {
            "seq": self.seq, "kind": self.kind, "sender": self.sender, "receiver": self.receiver,
            "task": self.task, "round": self.round, "meta": self.meta,
            "payload": None if self.payload is None else codec.to_text(self.payload),
        }
        return json.dumps(rec, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Message":
        rec = json.loads(line)
        payload = None if rec["payload"] is None else codec.from_text(rec["payload"])
        return cls(rec["seq"], rec["kind"], rec["sender"], rec["receiver"], rec["task"],
                   rec["round"], payload, rec["meta"])


class Transport:
    """Reliable, ordered in-process delivery with per-receiver FIFO inboxes."""

    def __init__(self):
        self.log: list[Message] = []
        self._inbox: dict[str, deque[Message]] = {}

    def register(self, name: str):
        self._inbox.setdefault(name, deque())

    def send(self, kind: str, sender: str, receiver: str, task: int, rnd: int,
             named: list[tuple[str, np.ndarray]] | None = None, meta: dict | None = None) -> Message:
        msg = Message(len(self.log), kind, sender, receiver, task, rnd,
                      None if named is None else codec.encode(named), meta or {})
        self.log.append(msg)
        targets = [n for n in self._inbox if n != SERVER] if receiver == BROADCAST else [receiver]
        for t in targets:
            self._inbox[t].append(msg)
        return msg

    def recv(self, name: str, kind: str) -> Message:
        box = self._inbox[name]
        if not box:
            raise RuntimeError(f"{name} expected a {kind} message but its inbox is empty")
        msg = box.popleft()
        if msg.kind != kind:
            raise RuntimeError(f"{name} expected {kind}, got {msg.kind} (seq {msg.seq})")
        return msg


def _banks(named: dict[str, np.ndarray], prefix: str) -> list[np.ndarray]:
    keys = sorted((k for k in named if k.startswith(prefix + ".")), key=lambda k: int(k.split(".")[1]))
    return [named[k] for k in keys]


def _bank_pairs(prefix: str, banks) -> list[tuple[str, np.ndarray]]:
    return [(f"{prefix}.{i}", b) for i, b in enumerate(banks)]


class RoundAborted(RuntimeError):
    pass


@dataclass
class FederationRun:
    config: FederationConfig
    sequences: list[list[TaskDataset]]
    clients: list[Client]
    transcript: list[Message]
    theta_history: list[list[np.ndarray]]
    reports: list[RoundReport]
    trajectory: list[dict]
    selections: list[dict]
    registry: object | None = None


def order_tasks(grid: list[list[TaskDataset]], cfg: FederationConfig) -> list[list[TaskDataset]]:
    if len(grid) < cfg.clients or any(len(row) < cfg.tasks for row in grid[: cfg.clients]):
        raise ValueError(f"task grid is smaller than {cfg.clients} clients x {cfg.tasks} tasks")
    out = []
    for c in range(cfg.clients):
        row = list(grid[c][: cfg.tasks])
        if cfg.shuffle_tasks:
            key = 0 if cfg.shared_client_seed else c
            perm = np.random.default_rng([cfg.seed, key, 7]).permutation(len(row))
            row = [row[i] for i in perm]
        out.append(row)
    return out


def _summary_seed(seed: int, c: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, c, t]).generate_state(1)[0])


def run(cfg: FederationConfig, grid: list[list[TaskDataset]], embeddings: EmbeddingTable) -> FederationRun:
    sequences = order_tasks(grid, cfg)
    train_cfg = replace(cfg.train, seed=cfg.seed)
    clients = [Client(c, cfg.model, train_cfg, embeddings, cfg.mode, 0 if cfg.shared_client_seed else None)
               for c in range(cfg.clients)]
    server = Server(cfg.model, cfg.sit, cfg.clients, seed=cfg.seed)
    net = Transport()
    net.register(SERVER)
    for c in range(cfg.clients):
        net.register(client_name(c))

    theta_history, reports, trajectory, selections = [], [], [], []
    dls_init: dict[int, dict[str, np.ndarray]] = {}
    summaries: dict[tuple[int, int], np.ndarray] = {}
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def summary(c: int, t: int) -> np.ndarray:
        if (c, t) not in summaries:
            summaries[c, t] = summarize_task(sequences[c][t - 1], embeddings, cfg.sit.q, _summary_seed(cfg.seed, c, t))
        return summaries[c, t]

    try:
        for t in range(1, cfg.tasks + 1):
            for r in range(1, cfg.rounds + 1):
                if cfg.federated:
                    named = _bank_pairs("B", server.theta_g)
                    if cfg.dls and server.projections:
                        named += sorted(server.projections.items())
                    net.send("GlobalDown", SERVER, BROADCAST, t, r, named)
                    for c, client in enumerate(clients):
                        got = net.recv(client_name(c), "GlobalDown").arrays()
                        client.init_base_from_global(_banks(got, "B"))
                        if cfg.dls and "W_c" in got:
                            dls_init[c] = {k: got[k] for k in ("W_f", "W_c")}

                if r == 1:
                    for c, client in enumerate(clients):
                        foreign: list[ForeignAdapter] = []
                        if cfg.federated and t > 1:
                            query = None
                            if cfg.sit.enabled:
                                net.send("SummaryUp", client_name(c), SERVER, t, r,
                                         [("summary", summary(c, t))], {"purpose": "query"})
                                query = net.recv(SERVER, "SummaryUp").arrays()["summary"]
                            chosen = server.adapters_for(c, t, query)
                            named = [pair for i, a in enumerate(chosen) for pair in _bank_pairs(f"A{i}", a.filters)]
                            sources = [[a.source_client, a.source_task] for a in chosen]
                            net.send("AdaptersDown", SERVER, client_name(c), t, r, named, {"sources": sources})
                            msg = net.recv(client_name(c), "AdaptersDown")
                            got = msg.arrays()
                            foreign = [
                                ForeignAdapter(sc, st, tuple(_banks(got, f"A{i}")))
                                for i, (sc, st) in enumerate(msg.meta["sources"])
                            ]
                            selections.append({"client": c, "task": t, "sources": sources})
                        client.start_task(sequences[c][t - 1], foreign, dls_init.get(c) if cfg.dls else None)

                round_reports = _train_all(clients, r, pool)
                reports.extend(round_reports)

                if cfg.federated:
                    for c, client in enumerate(clients):
                        named = _bank_pairs("B", client.export_sparsified_base())
                        if cfg.dls:
                            named += sorted(client.export_projections().items())
                        net.send("BaseUp", client_name(c), SERVER, t, r, named)
                    ups = [net.recv(SERVER, "BaseUp").arrays() for _ in clients]
                    projections = [{k: u[k] for k in ("W_f", "W_c")} for u in ups] if cfg.dls else None
                    server.aggregate_round([_banks(u, "B") for u in ups], projections)
                    theta_history.append([b.copy() for b in server.theta_g])

                for c, client in enumerate(clients):
                    trajectory.append({"client": c, "task": t, "round": r, "accuracy": client.accuracy()})

                if r == cfg.rounds:
                    for c, client in enumerate(clients):
                        if cfg.federated:
                            net.send("AdapterUp", client_name(c), SERVER, t, r,
                                     _bank_pairs("A", client.export_adaptive()))
                            if cfg.sit.enabled:
                                net.send("SummaryUp", client_name(c), SERVER, t, r,
                                         [("summary", summary(c, t))], {"purpose": "register"})
                            adaptive = _banks(net.recv(SERVER, "AdapterUp").arrays(), "A")
                            summ = net.recv(SERVER, "SummaryUp").arrays()["summary"] if cfg.sit.enabled else None
                            server.register(c, t, adaptive, summ)
                        client.snapshot_boundaries()
    finally:
        if pool is not None:
            pool.shutdown()

    return FederationRun(cfg, sequences, clients, net.log, theta_history, reports, trajectory,
                         selections, server.registry)


def _train_all(clients: list[Client], rnd: int, pool) -> list[RoundReport]:
    if pool is None:
        results = []
        for client in clients:
            try:
                results.append(client.train_round(rnd))
            except Exception as exc:
                raise RoundAborted(f"client {client.client_id} failed in round {rnd}: {exc}") from exc
        return results
    futures = [pool.submit(client.train_round, rnd) for client in clients]
    results, first_error = [], None
    for client, fut in zip(clients, futures):
        try:
            results.append(fut.result())
        except Exception as exc:
            first_error = first_error or (client, exc)
    if first_error:
        client, exc = first_error
        raise RoundAborted(f"client {client.client_id} failed in round {rnd}: {exc}") from exc
    return results


# ------------------------------------------------------------------ transcripts


def transcript(fed_run: FederationRun) -> list[Message]:
    return list(fed_run.transcript)


def write_transcript(messages: list[Message], path):
    Path(path).write_text("".join(m.to_json() + "\n" for m in messages))


def read_transcript(path) -> list[Message]:
    return [Message.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


def replay_global(messages: list[Message]) -> list[list[np.ndarray]]:
    """Recompute the global base after every round from the logged ``BaseUp`` payloads."""
    out, pending, key = [], [], None
    for m in messages:
        if m.kind != "BaseUp":
            continue
        if key is not None and (m.task, m.round) != key:
            out.append(aggregate(pending))
            pending = []
        key = (m.task, m.round)
        pending.append(_banks(m.arrays(), "B"))
    if pending:
        out.append(aggregate(pending))
    return out


def message_structure(messages: list[Message], drop: tuple[str, ...] = ()) -> list[tuple]:
    """Shape-level view of a transcript (no values), optionally ignoring some payload names."""
    out = []
    for m in messages:
        names = tuple(n for n in m.names() if n not in drop)
        out.append((m.kind, m.sender, m.receiver, m.task, m.round, names,
                    json.dumps(m.meta, sort_keys=True)))
    return out
