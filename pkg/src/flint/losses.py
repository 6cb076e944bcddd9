"""Training losses: prediction, output fidelity, conciseness/diversity, input fidelity.

The combined objective is

    L = L_pred + beta * L_of + gamma * L_if + delta * L_cd

with L_cd built from a soft entropy E(v) = -sum_i p_i log p_i, p = softmax(v):

    L_cd = -E(mean_batch Phi) + mean_batch E(Phi(x)) + eta * mean_batch ||Phi(x)||_1

All batch-summed terms are implemented as batch means so loss weights do not
depend on batch size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.5    # output fidelity
    gamma: float = 0.8   # input fidelity (reconstruction)
    delta: float = 0.2   # conciseness/diversity
    eta: float = 0.5     # l1 strength inside the cd term

    def validate(self) -> "LossWeights":
        for name in ("beta", "gamma", "delta", "eta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")
        return self


@dataclass
class CdTerms:
    diversity: float      # -E(batch-mean Phi)
    conciseness: float    # mean per-sample E(Phi)
    l1: float             # mean per-sample l1 norm
    total: float


@dataclass
class LossBreakdown:
    pred: float = 0.0
    of: float = 0.0
    cd: float = 0.0
    if_: float = 0.0
    total: float = 0.0
    cd_diversity: float = 0.0
    cd_conciseness: float = 0.0
    cd_l1: float = 0.0

    def as_dict(self):
        return {"pred": self.pred, "of": self.of, "cd": self.cd, "if": self.if_,
                "total": self.total, "cd_diversity": self.cd_diversity,
                "cd_conciseness": self.cd_conciseness, "cd_l1": self.cd_l1}


def _entropy_rows(v: torch.Tensor) -> torch.Tensor:
    """Row-wise soft entropy of a 2-d tensor, numerically stable."""
    logp = v - torch.logsumexp(v, dim=1, keepdim=True)
    return -(torch.exp(logp) * logp).sum(dim=1)


def soft_entropy(v: torch.Tensor) -> torch.Tensor:
    """E(v) = -sum p log p with p = softmax(v), for a 1-d vector; in [0, log n]."""
    v = torch.as_tensor(v)
    if v.ndim != 1 or v.numel() < 1:
        raise ValueError(f"soft_entropy expects a non-empty 1-d vector, got shape {tuple(v.shape)}")
    if not torch.isfinite(v).all():
        raise ValueError("soft_entropy: input contains NaN/Inf")
    return _entropy_rows(v.unsqueeze(0))[0]


def prediction_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy.  Labels may be class indices (N,) or one-hot rows (N,C)."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be (N, C), got {tuple(logits.shape)}")
    n, c = logits.shape
    if labels.ndim == 2:
        if labels.shape != (n, c):
            raise ValueError(f"one-hot labels must be {(n, c)}, got {tuple(labels.shape)}")
        rows = labels.sum(dim=1)
        if not torch.all((rows - 1).abs() < 1e-6) or not torch.all(
                (labels == 0) | ((labels - 1).abs() < 1e-6)):
            raise ValueError("labels are not valid one-hot rows")
        labels = labels.argmax(dim=1)
    elif labels.ndim == 1:
        if labels.shape[0] != n:
            raise ValueError(f"expected {n} labels, got {labels.shape[0]}")
    else:
        raise ValueError(f"labels must be (N,) indices or (N, C) one-hot, got {tuple(labels.shape)}")
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label index out of range [0, {c})")
    return F.cross_entropy(logits, labels)


def _check_stochastic(name: str, p: torch.Tensor):
    if p.ndim != 2:
        raise ValueError(f"{name} must be (N, C), got {tuple(p.shape)}")
    if torch.any(p < -1e-8):
        raise ValueError(f"{name}: negative entries")
    sums = p.sum(dim=1)
    if torch.any((sums - 1).abs() > 1e-4):
        raise ValueError(f"{name}: row sums outside 1 +/- 1e-4")


def output_fidelity_loss(g_probs: torch.Tensor, f_probs: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -sum_c g_probs * log f_probs (f clamped at 1e-12)."""
    _check_stochastic("g_probs", g_probs)
    _check_stochastic("f_probs", f_probs)
    if g_probs.shape != f_probs.shape:
        raise ValueError(f"shape mismatch {tuple(g_probs.shape)} vs {tuple(f_probs.shape)}")
    return -(g_probs * f_probs.clamp_min(1e-12).log()).sum(dim=1).mean()


def conciseness_diversity_loss(phi: torch.Tensor, eta: float,
                               include_entropy: bool = True
                               ) -> Tuple[torch.Tensor, CdTerms]:
    """Entropy-based conciseness/diversity term over a batch of attribute rows.

    include_entropy=False keeps only the l1 part (the ablation used to study
    what the two entropy terms buy over plain sparsity).
    """
    if phi.ndim != 2 or phi.shape[0] < 1:
        raise ValueError(f"phi must be a non-empty (N, J) batch, got {tuple(phi.shape)}")
    if torch.any(phi < 0):
        raise ValueError("phi must be non-negative")
    l1 = phi.abs().sum(dim=1).mean()
    if include_entropy:
        diversity = -_entropy_rows(phi.mean(dim=0, keepdim=True))[0]
        conciseness = _entropy_rows(phi).mean()
        total = diversity + conciseness + eta * l1
    else:
        diversity = torch.zeros((), dtype=phi.dtype)
        conciseness = torch.zeros((), dtype=phi.dtype)
        total = eta * l1
    terms = CdTerms(diversity=float(diversity), conciseness=float(conciseness),
                    l1=float(l1), total=float(total))
    return total, terms


def input_fidelity_loss(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Mean squared reconstruction error over all pixels of the batch."""
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    return F.mse_loss(x_hat, x)


def total_loss(weights: LossWeights,
               pred: Optional[torch.Tensor] = None,
               of: Optional[torch.Tensor] = None,
               if_: Optional[torch.Tensor] = None,
               cd: Optional[torch.Tensor] = None,
               cd_terms: Optional[CdTerms] = None,
               use_of: bool = True,
               use_cd: bool = True) -> Tuple[torch.Tensor, LossBreakdown]:
    """Combine loss terms under the stage mask.

    Masked or absent terms contribute exactly zero and add nothing to the
    autograd graph; the breakdown records them as 0.  Terms whose weight is
    zero are likewise skipped.
    """
    weights.validate()
    parts = []
    bd = LossBreakdown()
    if pred is not None:
        parts.append(pred)
        bd.pred = float(pred)
    if of is not None and use_of and weights.beta > 0:
        parts.append(weights.beta * of)
        bd.of = float(of)
    if if_ is not None and weights.gamma > 0:
        parts.append(weights.gamma * if_)
        bd.if_ = float(if_)
    if cd is not None and use_cd and weights.delta > 0:
        parts.append(weights.delta * cd)
        bd.cd = float(cd)
        if cd_terms is not None:
            bd.cd_diversity = cd_terms.diversity
            bd.cd_conciseness = cd_terms.conciseness
            bd.cd_l1 = cd_terms.l1
    if not parts:
        raise ValueError("total_loss: no active terms")
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    bd.total = float(total)
    if not math.isfinite(bd.total):
        raise FloatingPointError("total loss is not finite")
    return total, bd
