"""Joint architecture search under teacher supervision, and retraining of the found cell.

Each search mini-batch takes two passes that share one Gumbel sample. The
first pass updates student weights and projections. The second pass
re-evaluates the loss with the new weights and updates the architecture logits.
Retraining keeps the distillation terms and drops the efficiency term, which
is constant once the cell is fixed.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .cost import CostTable, efficiency_loss
from .data import PAD, next_item_cases
from .distill import LayerSet, Projection, emb_loss, hidden_loss, kd_loss, pred_loss
from .objectives import TrainingDiverged, ce_loss, iterate_batches, total_loss
from .optim import AdamW
from .search_space import ArchParams, DiscreteCell, StudentModel, derive_architecture, sample_edges
from .teacher import TeacherModel

log = logging.getLogger(__name__)

__all__ = ["SearchConfig", "SearchResult", "RetrainResult", "TeacherSignals", "ce_loss", "total_loss",
           "search", "retrain", "student_width", "training_cases"]

COMPONENTS = ("ce", "emb", "pred", "hidden", "kd", "eff", "total")


@dataclass
class SearchConfig:
    gamma: float = 0.5
    beta: float = 8.0
    m: int = 3
    k_blocks: int = 4
    lr: float = 5e-3
    weight_decay: float = 5e-4
    arch_lr: float = 2e-5
    arch_weight_decay: float = 1e-4
    epochs: int = 50
    retrain_epochs: int = 100
    batch_size: int = 32
    tau_start: float = 5.0
    tau_end: float = 0.5
    width_ratio: int = 4
    mode: str = "straight_through"
    use_ce: bool = True
    use_emb_kd: bool = True
    use_pred_kd: bool = True
    use_hidden_kd: bool = True
    train_arch: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ValueError("temperatures must be positive")
        if self.mode not in ("soft", "straight_through"):
            raise ValueError(f"search mode must be soft or straight_through, got {self.mode!r}")
        if self.m < 1 or self.k_blocks < 1 or self.batch_size < 1 or self.width_ratio < 1:
            raise ValueError("m, k_blocks, batch_size and width_ratio must be >= 1")

    def tau(self, epoch: int) -> float:
        """Geometric annealing from ``tau_start`` (first epoch) to ``tau_end`` (last)."""
        if self.epochs <= 1:
            return self.tau_start
        frac = min(max(epoch / (self.epochs - 1), 0.0), 1.0)
        return float(self.tau_start * (self.tau_end / self.tau_start) ** frac)

    def to_json(self) -> dict:
        return asdict(self)


def student_width(teacher: TeacherModel, config: SearchConfig) -> int:
    return max(1, teacher.config.d // config.width_ratio)


def training_cases(train: np.ndarray):
    """Next-item cases (prefix -> last real item) drawn from training rows.

    The student is scored only at the final position. A symmetric convolution at
    an earlier position would otherwise read the very item it is asked to predict.
    """
    return next_item_cases(np.asarray(train, dtype=np.int64))


@dataclass
class TeacherSignals:
    """Frozen teacher outputs for every training case, computed once."""

    probs: np.ndarray        # (n, t, V+1)
    hidden: list             # per block, (n, t, d_T)
    embedding: np.ndarray    # (V+1, d_T)

    @classmethod
    def compute(cls, teacher: TeacherModel, inputs: np.ndarray, batch_size: int = 64) -> "TeacherSignals":
        probs, hidden = [], None
        for start in range(0, len(inputs), batch_size):
            out = teacher.forward(inputs[start: start + batch_size])
            probs.append(ad.softmax(out.logits).data)
            hs = [h.data for h in out.hidden]
            hidden = [[h] for h in hs] if hidden is None else [acc + [h] for acc, h in zip(hidden, hs)]
        return cls(np.concatenate(probs), [np.concatenate(h) for h in hidden],
                   teacher.params[teacher.embedding_key].data.copy())


def _zero() -> Tensor:
    return Tensor(np.asarray(0.0))


def _loss_terms(student: StudentModel, proj: Projection, signals: TeacherSignals, idx: np.ndarray,
                inputs: np.ndarray, targets: np.ndarray, config: SearchConfig, *,
                arch: Optional[ArchParams] = None, ys: Optional[list] = None,
                table: Optional[CostTable] = None, with_eff: bool = True) -> dict:
    batch = inputs[idx]
    if arch is not None:
        out = student.forward(batch, arch=arch, mode=config.mode, ys=ys)
    else:
        out = student.forward(batch)
    probs = ad.softmax(out.logits)
    last = np.zeros(batch.shape)
    last[:, -1] = 1.0
    full_targets = np.zeros(batch.shape, dtype=np.int64)
    full_targets[:, -1] = targets[idx]
    terms = {}
    terms["ce"] = ce_loss(probs, full_targets, last) if config.use_ce else _zero()
    terms["emb"] = emb_loss(Tensor(signals.embedding), out.embedding, proj.w_e) if config.use_emb_kd else _zero()
    terms["pred"] = pred_loss(Tensor(signals.probs[idx]), probs, last) if config.use_pred_kd else _zero()
    if config.use_hidden_kd:
        h_t = LayerSet.uniform([Tensor(h[idx]) for h in signals.hidden])
        h_s = LayerSet.uniform(out.hidden)
        terms["hidden"] = hidden_loss(h_t, h_s, proj.w_h, (batch != PAD).astype(np.float64))
    else:
        terms["hidden"] = _zero()
    terms["kd"] = kd_loss(terms["emb"], terms["pred"], terms["hidden"])
    if with_eff:
        terms["eff"] = efficiency_loss(arch, table, mode=config.mode, ys=ys)
    else:
        terms["eff"] = _zero()
    terms["total"] = total_loss(terms["ce"], terms["kd"], terms["eff"], config.gamma,
                                config.beta if with_eff else 0.0)
    return terms


def _values(terms: dict) -> dict:
    return {k: float(terms[k].data) for k in COMPONENTS if k in terms}


def _epoch_record(phase: str, epoch: int, rows: list, **extra) -> dict:
    rec = {"phase": phase, "epoch": epoch}
    for k in COMPONENTS:
        rec[k] = float(np.mean([r[k] for r in rows])) if rows else 0.0
    rec.update(extra)
    return rec


@dataclass
class SearchResult:
    arch: ArchParams
    student: StudentModel
    projection: Projection
    history: list = field(default_factory=list)

    @property
    def cell(self) -> DiscreteCell:
        return derive_architecture(self.arch)


def search(train: np.ndarray, teacher: TeacherModel, config: SearchConfig,
           n_items: Optional[int] = None) -> SearchResult:
    """Jointly learn student weights, projections and architecture logits.

    ``train`` holds padded training rows. The teacher must be frozen, and its
    parameters are never modified.
    """
    if any(p.requires_grad for p in teacher.parameters()):
        raise ValueError("teacher must be frozen before search")
    n_items = teacher.n_items if n_items is None else n_items
    cases = training_cases(train)
    rng = np.random.default_rng(config.seed)
    d_s = student_width(teacher, config)
    student = StudentModel(n_items, d_s, config.k_blocks, config.m, rng=rng)
    proj = Projection.init(d_s, teacher.config.d, rng)
    arch = ArchParams.uniform(config.m)
    table = CostTable.build(d_s, cases.inputs.shape[1])
    signals = TeacherSignals.compute(teacher, cases.inputs)
    weights = student.parameters() + proj.parameters()
    w_opt = AdamW(weights, config.lr, config.weight_decay, post_step=student.zero_padding_row)
    a_opt = AdamW(arch.parameters(), config.arch_lr, config.arch_weight_decay)
    history = []
    for epoch in range(config.epochs):
        tau = config.tau(epoch)
        rows = []
        for step, idx in enumerate(iterate_batches(len(cases), config.batch_size, rng)):
            noise = rng.gumbel(size=arch.theta.shape)
            terms = {}
            try:
                ys = sample_edges(arch, tau, noise=noise)
                terms = _loss_terms(student, proj, signals, idx, cases.inputs, cases.targets, config,
                                    arch=arch, ys=ys, table=table)
                grads = ad.backward(terms["total"])
                w_opt.step(grads)
                rows.append(_values(terms))
                if config.train_arch:
                    ys = sample_edges(arch, tau, noise=noise)
                    terms = _loss_terms(student, proj, signals, idx, cases.inputs, cases.targets, config,
                                        arch=arch, ys=ys, table=table)
                    a_opt.step(ad.backward(terms["total"]))
            except NonFiniteError as exc:
                raise TrainingDiverged("search", epoch, step, str(exc), _values(terms)) from exc
        rec = _epoch_record("search", epoch, rows, tau=tau,
                            cell=[op for op in derive_architecture(arch).ops])
        history.append(rec)
        log.debug("search epoch %d total %.4f tau %.3f", epoch, rec["total"], tau)
    return SearchResult(arch, student, proj, history)


@dataclass
class RetrainResult:
    student: StudentModel
    projection: Projection
    history: list = field(default_factory=list)


def retrain(cell: DiscreteCell, train: np.ndarray, teacher: TeacherModel, config: SearchConfig,
            n_items: Optional[int] = None, seed: Optional[int] = None) -> RetrainResult:
    """Train a freshly initialised discrete student with CE and distillation."""
    if any(p.requires_grad for p in teacher.parameters()):
        raise ValueError("teacher must be frozen before retraining")
    n_items = teacher.n_items if n_items is None else n_items
    cases = training_cases(train)
    seed = config.seed if seed is None else seed
    # distinct stream from search so retraining starts from fresh weights
    rng = np.random.default_rng([seed, 1])
    d_s = student_width(teacher, config)
    student = StudentModel(n_items, d_s, config.k_blocks, cell.m, cell=cell, rng=rng)
    proj = Projection.init(d_s, teacher.config.d, rng)
    signals = TeacherSignals.compute(teacher, cases.inputs)
    w_opt = AdamW(student.parameters() + proj.parameters(), config.lr, config.weight_decay,
                  post_step=student.zero_padding_row)
    history = []
    for epoch in range(config.retrain_epochs):
        rows = []
        for step, idx in enumerate(iterate_batches(len(cases), config.batch_size, rng)):
            terms = {}
            try:
                terms = _loss_terms(student, proj, signals, idx, cases.inputs, cases.targets, config,
                                    with_eff=False)
                w_opt.step(ad.backward(terms["total"]))
            except NonFiniteError as exc:
                raise TrainingDiverged("retrain", epoch, step, str(exc), _values(terms)) from exc
            rows.append(_values(terms))
        history.append(_epoch_record("retrain", epoch, rows))
    student.freeze()
    return RetrainResult(student, proj, history)
