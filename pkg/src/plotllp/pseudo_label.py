"""Per-bag pseudo-labels from proportion-constrained optimal transport.

Blocks are stored as ``K x n_i`` arrays whose columns are per-instance label
distributions. The OT problems themselves are posed on the ``1/n_i`` scaled
version, with class marginal ``p_i`` and uniform instance marginal.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .ot_core import EXACT_OT_CAP, SinkhornConfig, sinkhorn, transport_simplex

PROB_FLOOR = 1e-7


class ExactFallbackWarning(UserWarning):
    """The exact assignment exceeded the size cap and fell back to argmax of the soft one."""


class NotConvergedError(RuntimeError):
    """Sinkhorn hit its iteration cap on a bag."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


@dataclass
class PseudoLabelMatrix:
    """Block-diagonal pseudo-labels, one ``K x n_i`` block per bag, ordered by bag index."""

    blocks: list[np.ndarray]
    mode: str = "soft"
    fallbacks: list[int] = field(default_factory=list)

    def stacked(self) -> np.ndarray:
        """All instances as rows (``N x K``), in bag order."""
        return np.concatenate([b.T for b in self.blocks], axis=0)

    def argmax_labels(self) -> np.ndarray:
        return np.argmax(self.stacked(), axis=1)

    def copy(self) -> PseudoLabelMatrix:
        return PseudoLabelMatrix([b.copy() for b in self.blocks], self.mode, list(self.fallbacks))


def bag_cost(probs) -> np.ndarray:
    """``-log`` of the clamped ``K x n_i`` posterior block."""
    probs = np.asarray(probs, dtype=float)
    if np.isnan(probs).any():
        raise ValueError("posterior block contains NaN")
    return -np.log(np.clip(probs, PROB_FLOOR, 1.0))


def _check_props(p, K):
    p = np.asarray(p, dtype=float)
    if p.shape != (K,):
        raise ValueError(f"proportions must have length {K}")
    if np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
        raise ValueError("proportions must be nonnegative and sum to 1")
    return p


def assign_soft(probs, proportions, cfg: SinkhornConfig | None = None, strict: bool = True):
    """Entropic OT labels for one bag; each column of the result sums to 1.

    With ``strict`` a non-converged solve raises :class:`NotConvergedError`
    (the partial block rides along on the exception); otherwise the
    unconverged block is returned.
    """
    probs = np.asarray(probs, dtype=float)
    K, n = probs.shape
    p = _check_props(proportions, K)
    res = sinkhorn(bag_cost(probs), p, np.full(n, 1.0 / n), cfg)
    Q = res.plan * n
    Q /= Q.sum(axis=0, keepdims=True)
    if strict and not res.converged:
        raise NotConvergedError(
            f"Sinkhorn did not converge in {res.n_iter} iterations "
            f"(marginal error {res.marginal_error:.3g})",
            block=Q,
        )
    return Q


def assign_hard(soft) -> np.ndarray:
    """One-hot at each column's argmax; ties go to the lowest class index."""
    soft = np.asarray(soft, dtype=float)
    hard = np.zeros_like(soft)
    hard[np.argmax(soft, axis=0), np.arange(soft.shape[1])] = 1.0
    return hard


def largest_remainder(proportions, n: int) -> np.ndarray:
    """Integer class counts summing to ``n``, nearest to ``proportions * n``."""
    raw = np.asarray(proportions, dtype=float) * n
    counts = np.floor(raw + 1e-9).astype(int)
    short = n - counts.sum()
    if short > 0:
        # stable sort keeps the lowest class first among equal remainders
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def assign_hard_exact(probs, proportions, cap: int = EXACT_OT_CAP, cfg: SinkhornConfig | None = None):
    """One-hot labels whose class counts match the proportions exactly.

    Among all such labelings the total ``-log`` posterior is minimal. Bags
    over the exact solver's cap fall back to argmax of the soft assignment
    and emit :class:`ExactFallbackWarning`.
    """
    probs = np.asarray(probs, dtype=float)
    K, n = probs.shape
    p = _check_props(proportions, K)
    if K * n > cap:
        warnings.warn(
            f"bag of {n} instances x {K} classes exceeds exact cap {cap}; using argmax of soft labels",
            ExactFallbackWarning,
            stacklevel=2,
        )
        return assign_hard(assign_soft(probs, p, cfg, strict=False))
    counts = largest_remainder(p, n).astype(float)
    # integral supplies and unit demands make every vertex a 0/1 assignment
    plan = transport_simplex(bag_cost(probs), counts, np.ones(n))
    return assign_hard(plan)


def ensemble_average(history, window: int = 5) -> np.ndarray:
    """Elementwise mean of the last ``window`` blocks in ``history``."""
    if not history:
        raise ValueError("ensemble history is empty")
    recent = list(history)[-window:]
    shape = np.shape(recent[0])
    if any(np.shape(b) != shape for b in recent):
        raise ValueError("ensemble history blocks have different shapes")
    return np.mean(np.stack(recent), axis=0)


def export_blocks(Q: PseudoLabelMatrix, bag_instances, path) -> None:
    """Write ``bag_index,instance_index,class,weight`` rows for every block entry."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bag_index", "instance_index", "class", "weight"])
        for b, (block, idx) in enumerate(zip(Q.blocks, bag_instances)):
            for j, inst in enumerate(idx):
                for k in range(block.shape[0]):
                    w.writerow([b, int(inst), k, f"{block[k, j]:.17g}"])
