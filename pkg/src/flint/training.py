"""Staged joint training of predictor + interpreter, and the post-hoc variant.

Joint mode follows the staged schedule: the first epochs optimize
L_pred + gamma*L_if, the output-fidelity term joins at of_start_epoch
(default 3) and the conciseness/diversity term at cd_start_epoch
(default 4).  Post-hoc mode trains only the interpreter parts against a
frozen predictor, dropping L_pred.
"""
from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .data import AugmentConfig, BatchStream, Dataset
from .losses import (LossBreakdown, LossWeights, conciseness_diversity_loss,
                     input_fidelity_loss, output_fidelity_loss, prediction_loss,
                     total_loss)
from .models import ModelBundle


class TrainingDivergenceError(RuntimeError):
    """Total loss became NaN/Inf; training aborted."""


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 12
    batch_size: int = 64
    learning_rate: float = 1e-4
    seed: int = 0
    mode: str = "joint"                  # joint | posthoc
    of_start_epoch: int = 3              # 1-based epoch where L_of activates
    cd_start_epoch: int = 4              # 1-based epoch where L_cd activates
    entropy_terms: bool = True           # False -> only the l1 part of L_cd
    of_backprop_to_predictor: bool = True
    augment: Optional[AugmentConfig] = None

    def validate(self) -> "TrainConfig":
        self.weights.validate()
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be positive and finite")
        if self.mode not in ("joint", "posthoc"):
            raise ValueError(f"mode must be 'joint' or 'posthoc', got {self.mode!r}")
        if self.of_start_epoch < 1 or self.cd_start_epoch < 1:
            raise ValueError("stage start epochs are 1-based and must be >= 1")
        if self.weights.beta > 0 and self.of_start_epoch > self.epochs:
            raise ValueError(f"of_start_epoch {self.of_start_epoch} exceeds epochs {self.epochs}")
        if self.weights.delta > 0 and self.cd_start_epoch > self.epochs:
            raise ValueError(f"cd_start_epoch {self.cd_start_epoch} exceeds epochs {self.epochs}")
        return self


@dataclass
class TrainReport:
    per_epoch: List[LossBreakdown]
    accuracy_f_train: float
    accuracy_g_train: float
    fidelity_train: float
    accuracy_f_test: Optional[float]
    accuracy_g_test: Optional[float]
    fidelity_test: Optional[float]
    wall_seconds: float
    checksum: str
    mode: str
    epochs: int
    batch_size: int

    def as_dict(self) -> dict:
        d = {
            "mode": self.mode, "epochs": self.epochs, "batch_size": self.batch_size,
            "accuracy_f_train": self.accuracy_f_train,
            "accuracy_g_train": self.accuracy_g_train,
            "fidelity_train": self.fidelity_train,
            "accuracy_f_test": self.accuracy_f_test,
            "accuracy_g_test": self.accuracy_g_test,
            "fidelity_test": self.fidelity_test,
            "wall_seconds": self.wall_seconds, "checksum": self.checksum,
            "per_epoch": [bd.as_dict() for bd in self.per_epoch],
        }
        return d


def evaluate(bundle: ModelBundle, data: Dataset) -> Dict[str, float]:
    """Accuracy of f and g plus their argmax agreement (fidelity)."""
    if len(data) == 0:
        raise ValueError("evaluate: empty dataset")
    out = bundle.predict(data.images)
    pred_f = out["f_logits"].argmax(axis=1)
    pred_g = out["g_probs"].argmax(axis=1)
    return {
        "accuracy_f": float((pred_f == data.labels).mean()),
        "accuracy_g": float((pred_g == data.labels).mean()),
        "fidelity": float((pred_f == pred_g).mean()),
    }


def _mean_breakdown(bds: List[LossBreakdown]) -> LossBreakdown:
    n = len(bds)
    out = LossBreakdown()
    for bd in bds:
        out.pred += bd.pred / n
        out.of += bd.of / n
        out.cd += bd.cd / n
        out.if_ += bd.if_ / n
        out.total += bd.total / n
        out.cd_diversity += bd.cd_diversity / n
        out.cd_conciseness += bd.cd_conciseness / n
        out.cd_l1 += bd.cd_l1 / n
    return out


def _run_training(bundle: ModelBundle, data: Dataset, config: TrainConfig,
                  test_data: Optional[Dataset], posthoc: bool
                  ) -> Tuple[ModelBundle, TrainReport]:
    config.validate()
    t0 = time.perf_counter()
    net = copy.deepcopy(bundle)
    if posthoc and not net.predictor_frozen():
        raise ValueError("post-hoc training requires a frozen predictor "
                         "(call freeze_predictor() first)")
    dtype = next(net.parameters()).dtype
    weights = config.weights
    opt = torch.optim.Adam((p for p in net.parameters() if p.requires_grad),
                           lr=config.learning_rate)
    stream = BatchStream(data, batch_size=config.batch_size,
                         augment=config.augment, seed=config.seed)
    per_epoch: List[LossBreakdown] = []
    for epoch in range(1, config.epochs + 1):
        use_of = weights.beta > 0 and epoch >= config.of_start_epoch
        use_cd = weights.delta > 0 and epoch >= config.cd_start_epoch
        batch_bds: List[LossBreakdown] = []
        for batch_i, (xb, yb) in enumerate(stream.epoch(epoch - 1)):
            x = torch.as_tensor(xb, dtype=dtype)
            logits, f_i = net.forward_with_taps(x)
            need_phi = weights.gamma > 0 or use_of or use_cd
            phi = net.attributes(f_i) if need_phi else None

            pred = None
            if not posthoc:
                pred = prediction_loss(logits, torch.as_tensor(yb))
            of = if_ = cd = None
            cd_terms = None
            if weights.gamma > 0:
                if_ = input_fidelity_loss(net.decode(phi), x)
            if use_of:
                if config.of_backprop_to_predictor:
                    f_probs = torch.softmax(logits, dim=1)
                    g_probs = net.interpreter_forward(phi)
                else:
                    f_probs = torch.softmax(logits.detach(), dim=1)
                    g_probs = net.interpreter_forward(net.attributes(f_i.detach()))
                of = output_fidelity_loss(g_probs, f_probs)
            if use_cd:
                cd, cd_terms = conciseness_diversity_loss(
                    phi, weights.eta, include_entropy=config.entropy_terms)
            if pred is None and of is None and if_ is None and cd is None:
                # nothing active this stage (e.g. post-hoc with gamma=0 before
                # of_start_epoch): no step taken
                batch_bds.append(LossBreakdown())
                continue
            try:
                loss, bd = total_loss(weights, pred=pred, of=of, if_=if_, cd=cd,
                                      cd_terms=cd_terms, use_of=use_of, use_cd=use_cd)
            except FloatingPointError as e:
                raise TrainingDivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {batch_i}") from e
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_bds.append(bd)
        per_epoch.append(_mean_breakdown(batch_bds))

    train_eval = evaluate(net, data)
    test_eval = evaluate(net, test_data) if test_data is not None else None
    report = TrainReport(
        per_epoch=per_epoch,
        accuracy_f_train=train_eval["accuracy_f"],
        accuracy_g_train=train_eval["accuracy_g"],
        fidelity_train=train_eval["fidelity"],
        accuracy_f_test=test_eval["accuracy_f"] if test_eval else None,
        accuracy_g_test=test_eval["accuracy_g"] if test_eval else None,
        fidelity_test=test_eval["fidelity"] if test_eval else None,
        wall_seconds=time.perf_counter() - t0,
        checksum=net.checksum(),
        mode=config.mode,
        epochs=config.epochs,
        batch_size=config.batch_size,
    )
    return net, report


def train_joint(bundle: ModelBundle, data: Dataset, config: TrainConfig,
                test_data: Optional[Dataset] = None) -> Tuple[ModelBundle, TrainReport]:
    """Staged joint optimization of all four parameter groups."""
    if config.mode != "joint":
        raise ValueError(f"train_joint requires mode='joint', got {config.mode!r}")
    return _run_training(bundle, data, config, test_data, posthoc=False)


def train_posthoc(frozen_bundle: ModelBundle, data: Dataset, config: TrainConfig,
                  test_data: Optional[Dataset] = None) -> Tuple[ModelBundle, TrainReport]:
    """Interpreter-only training against a frozen predictor (no L_pred)."""
    if config.mode != "posthoc":
        raise ValueError(f"train_posthoc requires mode='posthoc', got {config.mode!r}")
    return _run_training(frozen_bundle, data, config, test_data, posthoc=True)
