"""Decomposed CNN text classifier.

Each convolution filter bank is ``theta = B * sigmoid(mask_logits) + A`` where
``B`` is the client's base (shared over its tasks and with the server), ``A``
the per-task adaptive filters and the mask gates whole filters. Two ways of
using foreign adaptive filters are supported:

* ``fedseit``: foreign filters run as separate CNN branches whose pooled
  vectors are concatenated and projected (``W_f``), then joined with the local
  vector and projected again (``W_c``).
* ``fedweit``: foreign filters are added into the local filters, weighted by
  their attention scalars.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MODES = ("fedseit", "fedweit", "fedseit-dls", "isolated")


@dataclass
class ModelConfig:
    embedding_dim: int = 300
    filter_sizes: tuple[int, ...] = (3, 4, 5)
    filters_per_size: int = 128
    mask_init: float = 3.0

    def __post_init__(self):
        self.filter_sizes = tuple(int(f) for f in self.filter_sizes)
        if self.embedding_dim < 1 or self.filters_per_size < 1:
            raise ValueError("embedding_dim and filters_per_size must be positive")
        if not self.filter_sizes or min(self.filter_sizes) < 1:
            raise ValueError("filter_sizes must be a non-empty list of positive ints")

    @property
    def z_dim(self) -> int:
        return self.filters_per_size * len(self.filter_sizes)

    @property
    def max_filter(self) -> int:
        return max(self.filter_sizes)

    def filter_shapes(self) -> list[tuple[int, int, int]]:
        return [(f, self.embedding_dim, self.filters_per_size) for f in self.filter_sizes]


@dataclass(frozen=True, eq=False)
class ForeignAdapter:
    source_client: int
    source_task: int
    filters: tuple[np.ndarray, ...]


@dataclass(eq=False)
class DecomposedTaskState:
    task_id: int
    mode: str
    base: list[Tensor]  # the owning client's live base, shared by all its tasks
    adaptive: list[Tensor]
    mask_logits: list[Tensor]
    alpha: Tensor
    head: Tensor
    w_f: Tensor | None = None
    w_c: Tensor | None = None
    foreign: list[ForeignAdapter] = field(default_factory=list)
    base_snapshot: list[np.ndarray] | None = None
    adaptive_snapshot: list[np.ndarray] | None = None
    frozen: bool = False

    @property
    def n_foreign(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_classes(self) -> int:
        return self.head.shape[1]

    def effective_masks(self) -> list[Tensor]:
        return [effective_mask(m) for m in self.mask_logits]

    def trainable(self) -> list[Tensor]:
        """Task-local trainables (base and past adaptives are handled by the client)."""
        out = list(self.adaptive) + list(self.mask_logits) + [self.alpha, self.head]
        if self.w_f is not None:
            out += [self.w_f, self.w_c]
        return out


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_filters(cfg: ModelConfig, rng: np.random.Generator) -> list[np.ndarray]:
    return [glorot(rng, s, s[0] * s[1], s[0] * s[2]) for s in cfg.filter_shapes()]


def init_task_state(
    cfg: ModelConfig,
    task_id: int,
    mode: str,
    base: list[Tensor],
    foreign: list[ForeignAdapter],
    n_classes: int,
    rng: np.random.Generator,
    projections: dict[str, np.ndarray] | None = None,
) -> DecomposedTaskState:
    """Fresh adaptive filters, mask, attentions, projections and head for one task.

    ``projections`` (dense-layer sharing) seeds ``w_f``/``w_c`` when the shapes fit.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    z = cfg.z_dim
    n = len(foreign)
    for a in foreign:
        check_filters(cfg, a.filters, "foreign adapter")
    state = DecomposedTaskState(
        task_id=task_id,
        mode=mode,
        base=base,
        adaptive=[T.parameter(a) for a in init_filters(cfg, rng)],
        mask_logits=[T.parameter(np.full(cfg.filters_per_size, cfg.mask_init)) for _ in cfg.filter_sizes],
        alpha=T.parameter(np.full(n, 1.0 / n) if n else np.zeros(0)),
        head=T.parameter(glorot(rng, (z, n_classes), z, n_classes)),
        foreign=list(foreign),
    )
    if mode != "fedweit":
        w_f = glorot(rng, (n * z, z), n * z, z) if n else np.zeros((0, z))
        w_c = glorot(rng, (2 * z, z), 2 * z, z)
        if projections:
            if projections.get("W_f") is not None and projections["W_f"].shape == w_f.shape:
                w_f = projections["W_f"].copy()
            if projections.get("W_c") is not None and projections["W_c"].shape == w_c.shape:
                w_c = projections["W_c"].copy()
        state.w_f, state.w_c = T.parameter(w_f), T.parameter(w_c)
    return state


def check_filters(cfg: ModelConfig, banks, what: str = "filters"):
    shapes = [tuple(np.shape(b.data if isinstance(b, Tensor) else b)) for b in banks]
    if shapes != cfg.filter_shapes():
        raise ShapeError(f"{what}: shapes {shapes} != expected {cfg.filter_shapes()}")


def effective_mask(mask_logits: Tensor) -> Tensor:
    return T.sigmoid(mask_logits)


def compose(base: Tensor, mask: Tensor, adaptive: Tensor) -> Tensor:
    """``base * mask + adaptive`` with the mask scaling whole filters (last axis)."""
    if base.shape != adaptive.shape:
        raise ShapeError(f"compose: base {base.shape} vs adaptive {adaptive.shape}")
    if mask.shape != base.shape[-1:]:
        raise ShapeError(f"compose: mask {mask.shape} does not match {base.shape[-1]} filters")
    return T.add(T.mul(base, mask), adaptive)


def _pooled(x: Tensor, lengths, banks: list[Tensor]) -> Tensor:
    return T.concat([T.conv1d_maxpool(x, w, lengths) for w in banks], axis=-1)


def _activate(z: Tensor, rate: float, rng) -> Tensor:
    return T.dropout(T.relu(z), rate, rng)


def local_filters(state: DecomposedTaskState) -> list[Tensor]:
    return [
        compose(b, effective_mask(m), a)
        for b, m, a in zip(state.base, state.mask_logits, state.adaptive)
    ]


def _check_foreign(state: DecomposedTaskState, foreign):
    if len(foreign) != state.n_foreign:
        raise ShapeError(f"{len(foreign)} foreign adapters but state expects {state.n_foreign}")


def forward_fedseit(x: Tensor, lengths, state: DecomposedTaskState, foreign=None,
                    dropout: float = 0.0, rng=None) -> Tensor:
    """Logits [batch, classes] with foreign adapters as separate projected branches."""
    foreign = state.foreign if foreign is None else foreign
    _check_foreign(state, foreign)
    z_c = _activate(_pooled(x, lengths, local_filters(state)), dropout, rng)
    batch = z_c.shape[0] if z_c.data.ndim == 2 else None
    zdim = z_c.shape[-1]
    if foreign:
        hats = []
        for i, adapter in enumerate(foreign):
            a_i = T.index(state.alpha, i)
            banks = [T.mul(T.Tensor(f), a_i) for f in adapter.filters]
            hats.append(_activate(_pooled(x, lengths, banks), dropout, rng))
        z_f = T.affine(T.concat(hats, axis=-1), state.w_f)
    else:
        z_f = T.Tensor(np.zeros((batch, zdim) if batch is not None else zdim))
    z = T.affine(T.concat([z_c, z_f], axis=-1), state.w_c)
    return T.affine(z, state.head)


def forward_fedweit(x: Tensor, lengths, state: DecomposedTaskState, foreign=None,
                    dropout: float = 0.0, rng=None) -> Tensor:
    """Logits with foreign adapters added into the local filters."""
    foreign = state.foreign if foreign is None else foreign
    _check_foreign(state, foreign)
    banks = local_filters(state)
    for i, adapter in enumerate(foreign):
        a_i = T.index(state.alpha, i)
        banks = [T.add(w, T.mul(T.Tensor(f), a_i)) for w, f in zip(banks, adapter.filters)]
    z = _activate(_pooled(x, lengths, banks), dropout, rng)
    return T.affine(z, state.head)


def forward(x: Tensor, lengths, state: DecomposedTaskState, dropout: float = 0.0, rng=None) -> Tensor:
    if state.mode == "fedweit":
        return forward_fedweit(x, lengths, state, dropout=dropout, rng=rng)
    return forward_fedseit(x, lengths, state, dropout=dropout, rng=rng)


def state_arrays(state: DecomposedTaskState) -> list[tuple[str, np.ndarray]]:
    """Named parameters in wire order: B per filter size, A, mask logits, alpha, W_f, W_c, head."""
    out = [(f"B.{i}", b.data) for i, b in enumerate(state.base)]
    out += [(f"A.{i}", a.data) for i, a in enumerate(state.adaptive)]
    out += [(f"m.{i}", m.data) for i, m in enumerate(state.mask_logits)]
    out.append(("alpha", state.alpha.data))
    if state.w_f is not None:
        out += [("W_f", state.w_f.data), ("W_c", state.w_c.data)]
    out.append(("head", state.head.data))
    return out
