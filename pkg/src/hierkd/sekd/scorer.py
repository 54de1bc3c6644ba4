"""Per-level option scorer shared by the teacher and student roles.

Input at level l is ``[x | E[known] | E[own]]``: the image feature, the
embedding of the label placed in the known-facts slot, and the embedding of
the label the model itself produced at level l-1. Absent context uses the
UNKNOWN embedding (last row of E). The hidden state ``h = tanh(W1 a + b1)``
is the anchor; each option scores ``U[node] . h + c[node]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from hierkd.config import ScorerConfig
from hierkd.core.errors import TrainingError
from hierkd.core.models import LETTERS

PARAM_NAMES = ("W1", "b1", "U", "c", "E")


class ContextMode(str, Enum):
    """Where earlier-level labels enter the scorer."""
    CONDITIONED = "conditioned"  # own previous answer as a known fact (teacher)
    GOLD_FORCED = "gold_forced"  # gold parent as a known fact (pretraining)
    JOINT = "joint"  # own previous answer in the self-generated slot (student)


@dataclass
class ScorerParams:
    W1: np.ndarray  # (L, H, d + 2e)
    b1: np.ndarray  # (L, H)
    U: np.ndarray  # (n_nodes, H)
    c: np.ndarray  # (n_nodes,)
    E: np.ndarray  # (n_nodes + 1, e)

    @property
    def unknown(self) -> int:
        return self.E.shape[0] - 1

    @property
    def n_levels(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.E.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.W1.shape[2] - 2 * self.embed_dim

    def arrays(self) -> Dict[str, np.ndarray]:
        """Live views keyed by name; updating them updates the model."""
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ScorerParams":
        return ScorerParams(**{name: arr.copy() for name, arr in self.arrays().items()})

    def zeros_like(self) -> "ScorerParams":
        return ScorerParams(**{name: np.zeros_like(arr) for name, arr in self.arrays().items()})

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "ScorerParams":
        missing = [name for name in PARAM_NAMES if name not in arrays]
        if missing:
            raise TrainingError(f"missing scorer tensors: {', '.join(missing)}")
        return cls(**{name: np.asarray(arrays[name], dtype=np.float64) for name in PARAM_NAMES})

    def __iter__(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self.arrays().items())


def init_scorer(
    n_levels: int,
    n_nodes: int,
    feature_dim: int,
    config: ScorerConfig,
    rng: np.random.Generator,
) -> ScorerParams:
    """Random initialisation; the self-generated slot starts disconnected (zero weights)."""
    d, e, h = feature_dim, config.embed_dim, config.hidden_dim
    s = config.init_scale
    W1 = np.zeros((n_levels, h, d + 2 * e))
    W1[:, :, : d + e] = rng.normal(scale=s / np.sqrt(d + e), size=(n_levels, h, d + e))
    return ScorerParams(
        W1=W1,
        b1=np.zeros((n_levels, h)),
        U=rng.normal(scale=s / np.sqrt(h), size=(n_nodes, h)),
        c=np.zeros(n_nodes),
        E=rng.normal(scale=s, size=(n_nodes + 1, e)),
    )


@dataclass
class LevelCache:
    inputs: np.ndarray  # (N, d + 2e)
    hidden: np.ndarray  # (N, H)
    logits: np.ndarray  # (N, k)
    options: np.ndarray  # (N, k) node rows
    known: np.ndarray  # (N,) embedding rows in the known slot
    own: np.ndarray  # (N,) embedding rows in the self-generated slot


@dataclass
class ForwardTrace:
    mode: ContextMode
    levels: List[LevelCache] = field(default_factory=list)
    choices: Optional[np.ndarray] = None  # (N, L) letter indices

    @property
    def logits(self) -> np.ndarray:
        return np.stack([lv.logits for lv in self.levels], axis=1)

    @property
    def anchors(self) -> np.ndarray:
        return np.stack([lv.hidden for lv in self.levels], axis=1)

    @property
    def contexts(self) -> Tuple[np.ndarray, np.ndarray]:
        """(known, own) embedding rows, each (N, L); feed back to ``forward`` to freeze them."""
        return (
            np.stack([lv.known for lv in self.levels], axis=1),
            np.stack([lv.own for lv in self.levels], axis=1),
        )


def forward(
    params: ScorerParams,
    features: np.ndarray,
    options: np.ndarray,
    mode: ContextMode,
    gold_nodes: Optional[np.ndarray] = None,
    contexts: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> ForwardTrace:
    """Score every level left to right.

    The chosen letter at each level is the argmax, ties going to the lowest
    letter. ``contexts`` overrides the slot contents (used to hold the
    discrete choices fixed while differentiating).

    Raises:
        TrainingError: non-finite activations.
    """
    mode = ContextMode(mode)
    if mode is ContextMode.GOLD_FORCED and gold_nodes is None and contexts is None:
        raise TrainingError("gold-forced scoring needs the gold node rows")
    n = features.shape[0]
    unk = np.full(n, params.unknown, dtype=np.int64)
    rows = np.arange(n)
    trace = ForwardTrace(mode=mode)
    choices = np.zeros((n, options.shape[1]), dtype=np.int64)
    previous: Optional[np.ndarray] = None

    for level in range(options.shape[1]):
        if contexts is not None:
            known, own = contexts[0][:, level], contexts[1][:, level]
        elif previous is None:
            known, own = unk, unk
        elif mode is ContextMode.GOLD_FORCED:
            known, own = gold_nodes[:, level - 1], unk
        elif mode is ContextMode.CONDITIONED:
            known, own = previous, unk
        else:
            known, own = unk, previous

        a = np.concatenate([features, params.E[known], params.E[own]], axis=1)
        h = np.tanh(a @ params.W1[level].T + params.b1[level])
        opts = options[:, level, :]
        logits = np.einsum("nkh,nh->nk", params.U[opts], h) + params.c[opts]
        if not np.all(np.isfinite(logits)):
            raise TrainingError("non-finite activations", detail=f"level {level + 1}")

        choice = np.argmax(logits, axis=1)
        choices[:, level] = choice
        previous = opts[rows, choice]
        trace.levels.append(LevelCache(a, h, logits, opts, known, own))

    trace.choices = choices
    return trace


def backward(
    params: ScorerParams,
    trace: ForwardTrace,
    dlogits: np.ndarray,
    danchors: Optional[np.ndarray] = None,
) -> ScorerParams:
    """Gradients of a loss given its gradients w.r.t. logits (N, L, k) and anchors (N, L, H).

    Slot contents are treated as constants.
    """
    grads = params.zeros_like()
    d, e = params.feature_dim, params.embed_dim
    for level, cache in enumerate(trace.levels):
        g = dlogits[:, level, :]
        np.add.at(grads.U, cache.options, g[:, :, None] * cache.hidden[:, None, :])
        np.add.at(grads.c, cache.options, g)
        dh = np.einsum("nk,nkh->nh", g, params.U[cache.options])
        if danchors is not None:
            dh = dh + danchors[:, level, :]
        dz = dh * (1.0 - cache.hidden**2)
        grads.W1[level] += dz.T @ cache.inputs
        grads.b1[level] += dz.sum(axis=0)
        da = dz @ params.W1[level]
        np.add.at(grads.E, cache.known, da[:, d : d + e])
        np.add.at(grads.E, cache.own, da[:, d + e :])
    return grads


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


@dataclass
class DistillSignals:
    """Teacher outputs recorded once, before student training."""
    hard_labels: np.ndarray  # (N, L) letter indices
    soft_dist: np.ndarray  # (N, L, k)
    anchors: np.ndarray  # (N, L, H)
    logits: np.ndarray  # (N, L, k)

    def __len__(self) -> int:
        return self.hard_labels.shape[0]

    def take(self, rows: np.ndarray) -> "DistillSignals":
        return DistillSignals(self.hard_labels[rows], self.soft_dist[rows], self.anchors[rows], self.logits[rows])

    def letters(self, i: int) -> List[str]:
        return [LETTERS[j] for j in self.hard_labels[i]]


def teacher_forward(params: ScorerParams, features: np.ndarray, options: np.ndarray) -> DistillSignals:
    """Conditioned stepwise pass: each level sees the teacher's own earlier answers as known facts."""
    trace = forward(params, features, options, ContextMode.CONDITIONED)
    logits = trace.logits
    return DistillSignals(trace.choices, softmax(logits), trace.anchors, logits)


@dataclass
class StudentOutput:
    letters: np.ndarray  # (N, L)
    soft_dist: np.ndarray
    anchors: np.ndarray
    trace: ForwardTrace


def student_forward(params: ScorerParams, features: np.ndarray, options: np.ndarray) -> StudentOutput:
    """Single-pass joint scoring: earlier answers enter only through the self-generated slot."""
    trace = forward(params, features, options, ContextMode.JOINT)
    return StudentOutput(trace.choices, softmax(trace.logits), trace.anchors, trace)
