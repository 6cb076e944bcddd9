"""Attribute relevance: per-sample contributions, per-class averages, threshold sets.

For a sample x with attributes Phi(x) and head matrix W (J x C), the
contribution of attribute j to the interpreter's predicted class y is

    alpha_j = phi_j(x) * w_{j,y}
    r_j     = alpha_j / max_i |alpha_i|        (all-zero alpha -> r = 0)

Per-class global relevance r_{j,c} averages r_j over the samples the
interpreter assigns to class c.  Thresholding |r| (local) or r (global)
at 1/tau yields the interpretation sets.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np


@dataclass
class LocalRelevance:
    sample_id: int
    predicted_class: int
    alpha: np.ndarray    # (J,)
    r: np.ndarray        # (J,), max |r| = 1 unless alpha == 0


@dataclass
class GlobalRelevanceMatrix:
    r: np.ndarray               # (J, C); undefined columns stored as 0
    support_counts: np.ndarray  # (C,), samples per predicted class
    defined: np.ndarray         # (C,) bool, False where support is 0

    @property
    def attribute_count(self) -> int:
        return self.r.shape[0]

    @property
    def class_count(self) -> int:
        return self.r.shape[1]


@dataclass
class InterpretationSet:
    tau_inverse: float
    local: Dict[int, Tuple[int, ...]]            # sample_id -> attribute indices
    global_pairs: Tuple[Tuple[int, int], ...]    # (class, attribute) pairs


def relevance_rows(phi: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized per-sample relevances.

    phi: (N, J) attribute activations; w: (J, C) head matrix.
    Returns (r, predicted) with r of shape (N, J).  Argmax ties go to the
    lowest class index.
    """
    phi = np.asarray(phi, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if phi.ndim != 2 or w.ndim != 2 or phi.shape[1] != w.shape[0]:
        raise ValueError(f"incompatible shapes phi {phi.shape}, w {w.shape}")
    scores = phi @ w                                # softmax is monotone: argmax carries over
    predicted = scores.argmax(axis=1)
    alpha = phi * w[:, predicted].T
    denom = np.abs(alpha).max(axis=1, keepdims=True)
    r = np.divide(alpha, denom, out=np.zeros_like(alpha), where=denom > 0)
    return r, predicted


def local_relevance(phi_row: np.ndarray, w: np.ndarray, sample_id: int = 0) -> LocalRelevance:
    """Relevance of every attribute for one sample's predicted class."""
    r, predicted = relevance_rows(np.atleast_2d(phi_row), w)
    alpha = np.asarray(phi_row, dtype=np.float64) * np.asarray(w, dtype=np.float64)[:, predicted[0]]
    return LocalRelevance(sample_id=sample_id, predicted_class=int(predicted[0]),
                          alpha=alpha, r=r[0])


def local_relevances(phi: np.ndarray, w: np.ndarray,
                     sample_ids: Optional[Sequence[int]] = None) -> List[LocalRelevance]:
    r, predicted = relevance_rows(phi, w)
    ids = range(len(phi)) if sample_ids is None else sample_ids
    w64 = np.asarray(w, dtype=np.float64)
    return [LocalRelevance(sample_id=int(i), predicted_class=int(predicted[k]),
                           alpha=np.asarray(phi[k], dtype=np.float64) * w64[:, predicted[k]],
                           r=r[k])
            for k, i in enumerate(ids)]


def global_relevance(phi: np.ndarray, w: np.ndarray, class_count: Optional[int] = None
                     ) -> GlobalRelevanceMatrix:
    """Average per-sample relevance within each predicted class."""
    if len(phi) == 0:
        raise ValueError("global_relevance needs a non-empty sample set")
    r, predicted = relevance_rows(phi, w)
    c = class_count if class_count is not None else w.shape[1]
    j = r.shape[1]
    matrix = np.zeros((j, c), dtype=np.float64)
    counts = np.zeros(c, dtype=np.int64)
    for cls in range(c):
        mask = predicted == cls
        counts[cls] = mask.sum()
        if counts[cls]:
            matrix[:, cls] = r[mask].mean(axis=0)
    return GlobalRelevanceMatrix(r=matrix, support_counts=counts, defined=counts > 0)


def global_from_locals(locals_: Iterable[LocalRelevance], class_count: int
                       ) -> GlobalRelevanceMatrix:
    """Same averaging, but from precomputed LocalRelevance records."""
    locals_ = list(locals_)
    if not locals_:
        raise ValueError("no local relevances given")
    j = len(locals_[0].r)
    sums = np.zeros((j, class_count), dtype=np.float64)
    counts = np.zeros(class_count, dtype=np.int64)
    for lr in locals_:
        sums[:, lr.predicted_class] += lr.r
        counts[lr.predicted_class] += 1
    matrix = np.divide(sums, counts[None, :], out=np.zeros_like(sums), where=counts[None, :] > 0)
    return GlobalRelevanceMatrix(r=matrix, support_counts=counts, defined=counts > 0)


def merge_global(a: GlobalRelevanceMatrix, b: GlobalRelevanceMatrix) -> GlobalRelevanceMatrix:
    """Combine two matrices computed on disjoint sample sets (support-weighted)."""
    if a.r.shape != b.r.shape:
        raise ValueError("matrices have different shapes")
    counts = a.support_counts + b.support_counts
    sums = a.r * a.support_counts[None, :] + b.r * b.support_counts[None, :]
    matrix = np.divide(sums, counts[None, :], out=np.zeros_like(sums), where=counts[None, :] > 0)
    return GlobalRelevanceMatrix(r=matrix, support_counts=counts, defined=counts > 0)


def _check_threshold(tau_inverse: float):
    if not (0.0 < tau_inverse < 1.0):
        raise ValueError(f"threshold 1/tau must lie in (0, 1), got {tau_inverse}")


def local_set(r: np.ndarray, tau_inverse: float) -> Tuple[int, ...]:
    """Attributes with |r_j| above the threshold, ascending."""
    _check_threshold(tau_inverse)
    return tuple(int(j) for j in np.flatnonzero(np.abs(r) > tau_inverse))


def global_set(matrix: GlobalRelevanceMatrix, tau_inverse: float
               ) -> Tuple[Tuple[int, int], ...]:
    """(class, attribute) pairs with signed r_{j,c} above the threshold."""
    _check_threshold(tau_inverse)
    pairs = []
    for cls in range(matrix.class_count):
        if not matrix.defined[cls]:
            continue
        for j in np.flatnonzero(matrix.r[:, cls] > tau_inverse):
            pairs.append((cls, int(j)))
    return tuple(pairs)


def interpretation_sets(tau_inverse: float,
                        locals_: Optional[Sequence[LocalRelevance]] = None,
                        global_matrix: Optional[GlobalRelevanceMatrix] = None
                        ) -> InterpretationSet:
    """Threshold local and/or global relevances into interpretation sets."""
    _check_threshold(tau_inverse)
    local = {}
    if locals_ is not None:
        for lr in locals_:
            local[lr.sample_id] = local_set(lr.r, tau_inverse)
    pairs = global_set(global_matrix, tau_inverse) if global_matrix is not None else ()
    return InterpretationSet(tau_inverse=tau_inverse, local=local, global_pairs=pairs)


# -- model-level wrappers ------------------------------------------------

def bundle_local_relevance(bundle, x: np.ndarray, sample_id: int = 0) -> LocalRelevance:
    """Relevance for a single image (C,H,W) using a trained bundle."""
    phi = bundle.predict(np.asarray(x, dtype=np.float32)[None])["phi"][0]
    return local_relevance(phi, bundle.head_matrix(), sample_id=sample_id)


def bundle_global_relevance(bundle, images: np.ndarray) -> GlobalRelevanceMatrix:
    phi = bundle.predict(np.asarray(images, dtype=np.float32))["phi"]
    return global_relevance(phi, bundle.head_matrix(), class_count=bundle.class_count)
