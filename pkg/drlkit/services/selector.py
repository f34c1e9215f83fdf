"""
Confidence-gap data selection.

Each pair carries M_conf, the mean of the clean and adversarial margins
(true-class probability minus the best wrong-class probability). Scores start
at exactly 0, are overwritten after every batch from that batch's forward
outputs, and each epoch trains on the M pairs with the smallest scores.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from drlkit.core.tensor import check_labels
from drlkit.utils.errors import SelectionError, ShapeError

logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-6
NEVER = -1


@dataclass
class SelectionState:
    """Per-pair scores indexed by pair id, plus the stamp of their last update."""
    scores: np.ndarray
    last_updated: np.ndarray = field(default=None)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.last_updated is None:
            self.last_updated = np.full(self.scores.shape, NEVER, dtype=np.int64)

    @classmethod
    def initial(cls, num_pairs: int) -> "SelectionState":
        return cls(scores=np.zeros(num_pairs, dtype=np.float64))

    @property
    def num_pairs(self) -> int:
        return int(self.scores.shape[0])

    def as_dict(self) -> dict[int, float]:
        return {i: float(s) for i, s in enumerate(self.scores)}

    def snapshot(self) -> "SelectionState":
        return SelectionState(scores=self.scores.copy(), last_updated=self.last_updated.copy())


def _margins(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    rows = np.arange(probs.shape[0])
    true = probs[rows, labels]
    others = probs.copy()
    others[rows, labels] = -np.inf
    return true - others.max(axis=1)


def _check_simplex(probs: np.ndarray, name: str) -> None:
    if np.any(np.abs(probs.sum(axis=-1) - 1.0) > SIMPLEX_TOLERANCE):
        raise SelectionError(f"{name} rows must sum to 1 within {SIMPLEX_TOLERANCE}")


def batch_mconf(probs_clean: np.ndarray, probs_adv: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """M_conf for every row of an N×C batch."""
    pc = np.asarray(probs_clean, dtype=np.float64)
    pa = np.asarray(probs_adv, dtype=np.float64)
    if pc.ndim != 2 or pc.shape != pa.shape:
        raise ShapeError(f"probability batches must be matching N×C, got {pc.shape} and {pa.shape}")
    y = check_labels(labels, pc.shape[1], pc.shape[0])
    _check_simplex(pc, "probs_clean")
    _check_simplex(pa, "probs_adv")
    return 0.5 * (_margins(pc, y) + _margins(pa, y))


def compute_mconf(probs_clean: Sequence[float], probs_adv: Sequence[float], y: int) -> float:
    """½[(p_y − max_{i≠y} p_i) + (p'_y − max_{i≠y} p'_i)] for one pair."""
    pc = np.asarray(probs_clean, dtype=np.float64).reshape(1, -1)
    pa = np.asarray(probs_adv, dtype=np.float64).reshape(1, -1)
    return float(batch_mconf(pc, pa, [y])[0])


def update_scores(
    state: SelectionState,
    pair_ids: Sequence[int],
    probs_clean: np.ndarray,
    probs_adv: np.ndarray,
    labels: Sequence[int],
    stamp: int = 0,
) -> SelectionState:
    """Overwrite the scores of ``pair_ids`` with fresh M_conf values."""
    ids = np.asarray(pair_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= state.num_pairs):
        bad = ids[(ids < 0) | (ids >= state.num_pairs)]
        raise SelectionError(f"unknown pair ids {bad.tolist()[:5]}")
    values = batch_mconf(probs_clean, probs_adv, labels)
    if values.shape[0] != ids.shape[0]:
        raise ShapeError(f"{ids.shape[0]} pair ids but {values.shape[0]} probability rows")
    state.scores[ids] = values
    state.last_updated[ids] = stamp
    return state


def select_epoch(state: SelectionState, m: int) -> np.ndarray:
    """The ``m`` lowest-scoring pair ids; ties go to the smaller id."""
    if not 1 <= m <= state.num_pairs:
        raise SelectionError(f"selection size {m} outside [1, {state.num_pairs}]")
    order = np.lexsort((np.arange(state.num_pairs), state.scores))
    return order[:m]


def select_random(state: SelectionState, m: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample of ``m`` pair ids, for the data-selection ablation."""
    if not 1 <= m <= state.num_pairs:
        raise SelectionError(f"selection size {m} outside [1, {state.num_pairs}]")
    return np.sort(rng.choice(state.num_pairs, size=m, replace=False))


def format_trace(epoch: int, pair_ids: Sequence[int], scores: np.ndarray) -> str:
    """Whitespace-aligned table: epoch, rank, pair id, score at selection time."""
    lines = [f"{'epoch':>6} {'rank':>7} {'pair_id':>8} {'score':>12}"]
    for rank, pid in enumerate(pair_ids):
        lines.append(f"{epoch:>6d} {rank:>7d} {int(pid):>8d} {float(scores[pid]):>12.6f}")
    return "\n".join(lines) + "\n"


class SelectionTrace:
    """Appends one table per epoch to a text file, or keeps them in memory."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self.tables: list[str] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def record(self, epoch: int, pair_ids: Sequence[int], state: SelectionState) -> None:
        table = format_trace(epoch, pair_ids, state.scores)
        self.tables.append(table)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(table)
