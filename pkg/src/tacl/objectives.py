"""Training losses: MLM, NSP, token-aware contrastive, sentence contrastive."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import torch

from . import tensor_core as tc

TERMS = ("mlm", "nsp", "tacl", "sent_cl")

RECIPES: dict[str, frozenset[str]] = {
    "pretrain-base": frozenset({"mlm", "nsp"}),
    "baseline-mt": frozenset({"mlm", "nsp"}),
    "model-1": frozenset({"mlm", "nsp", "sent_cl"}),
    "model-2": frozenset({"tacl"}),
    "tacl": frozenset({"mlm", "nsp", "tacl"}),
}


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    tau: float = 0.01
    terms: frozenset[str] = frozenset({"mlm", "nsp", "tacl"})
    weights: dict[str, float] = field(default_factory=lambda: {t: 1.0 for t in TERMS})
    tacl_reduction: str = "mean"         # "mean" over selected tokens, or raw "sum"
    tacl_denominator_specials: bool = True

    def __post_init__(self):
        self.terms = frozenset(self.terms)
        if self.tau <= 0:
            raise LossError("tau must be positive")
        if not self.terms:
            raise LossError("at least one loss term must be enabled")
        unknown = sorted(self.terms - set(TERMS))
        if unknown:
            raise LossError(f"unknown loss terms: {', '.join(unknown)}")
        self.weights = {t: 1.0 for t in TERMS} | dict(self.weights)
        if self.tacl_reduction not in ("mean", "sum"):
            raise LossError("tacl_reduction must be 'mean' or 'sum'")

    @classmethod
    def for_recipe(cls, recipe: str, **kw) -> "LossConfig":
        if recipe not in RECIPES:
            raise LossError(f"unknown recipe {recipe!r}; choose from {', '.join(sorted(RECIPES))}")
        return cls(terms=RECIPES[recipe], **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise LossError(f"unknown loss config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {"tau": self.tau, "terms": sorted(self.terms), "weights": dict(self.weights),
                "tacl_reduction": self.tacl_reduction,
                "tacl_denominator_specials": self.tacl_denominator_specials}


def mlm_loss(logits: torch.Tensor, targets: torch.Tensor, indicator: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over indicated positions. logits (..., n, K)."""
    indicator = indicator.bool()
    count = int(indicator.sum())
    if count == 0:
        raise LossError("no selected positions for the MLM loss")
    ce = tc.cross_entropy(logits[indicator], targets[indicator])
    return ce.sum() / count


def nsp_loss(logits: torch.Tensor, is_next: torch.Tensor) -> torch.Tensor:
    """Mean two-way cross-entropy; class 1 = B follows A."""
    if logits.dim() == 1:
        logits, is_next = logits[None], torch.as_tensor(is_next).reshape(1)
    return tc.cross_entropy(logits, is_next.long()).mean()


def tacl_terms(student: torch.Tensor, teacher: torch.Tensor, padding_mask: torch.Tensor,
               tau: float, negatives_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Per-position contrastive terms, shape (B, n).

    Term i is ``logsumexp_j(sim(s_i, t_j)/tau) - sim(s_i, t_i)/tau`` with j
    over the non-padding positions of the same sequence (further limited by
    ``negatives_mask`` if given, which must keep position i itself). The
    teacher side never carries gradient.
    """
    if student.dim() == 2:
        student, teacher, padding_mask = student[None], teacher[None], padding_mask[None]
        if negatives_mask is not None:
            negatives_mask = negatives_mask[None]
    if student.shape != teacher.shape:
        raise tc.DimensionError(f"student {tuple(student.shape)} vs teacher {tuple(teacher.shape)}")
    padding_mask = padding_mask.bool()
    teacher = teacher.detach()
    s_hat = tc.normalize_rows(student, padding_mask)
    t_hat = tc.normalize_rows(teacher, padding_mask)
    logits = tc.matmul(s_hat, t_hat.transpose(-1, -2)) / tau  # (B, n, n)
    cols = padding_mask if negatives_mask is None else padding_mask & negatives_mask.bool()
    eye = torch.eye(logits.shape[-1], dtype=torch.bool)
    cols = cols[:, None, :] | (eye[None] & padding_mask[:, :, None])
    lse = torch.logsumexp(logits.masked_fill(~cols, -math.inf), dim=-1)
    positive = torch.diagonal(logits, dim1=-2, dim2=-1)
    return torch.where(padding_mask, lse - positive, torch.zeros_like(lse))


def tacl_loss(student: torch.Tensor, teacher: torch.Tensor, mask_indicator: torch.Tensor,
              padding_mask: torch.Tensor, tau: float = 0.01, reduction: str = "mean",
              negatives_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Token-aware contrastive loss between student and frozen-teacher final states.

    ``reduction="mean"`` averages the terms of all indicated positions in the
    batch. ``reduction="sum"`` sums them within each sequence and averages
    those sums over the sequences of the batch.
    """
    terms = tacl_terms(student, teacher, padding_mask, tau, negatives_mask)
    ind = mask_indicator.bool().reshape(terms.shape) & padding_mask.bool().reshape(terms.shape)
    count = int(ind.sum())
    if count == 0:
        raise LossError("no selected positions for the contrastive loss")
    total = terms[ind].sum()
    loss = total / count if reduction == "mean" else total / terms.shape[0]
    return tc.check_finite(loss, "tacl loss")


def sent_cl_loss(view1: torch.Tensor, view2: torch.Tensor, tau: float = 0.01) -> torch.Tensor:
    """Symmetric in-batch InfoNCE over two (B, d) views; row b of each view is a positive pair."""
    if view1.shape != view2.shape:
        raise tc.DimensionError("views differ in shape")
    B = view1.shape[0]
    if B < 2:
        raise LossError("sentence contrastive loss needs a batch of at least 2")
    sim = tc.cosine_matrix(view1, view2) / tau
    labels = torch.arange(B)
    forward = tc.cross_entropy(sim, labels).mean()
    backward = tc.cross_entropy(sim.t(), labels).mean()
    return (forward + backward) / 2


def total_loss(parts: dict[str, torch.Tensor], config: LossConfig) -> tuple[torch.Tensor, dict[str, float | None]]:
    """Weighted sum of the enabled terms, plus a per-term breakdown (None = disabled)."""
    missing = sorted(t for t in config.terms if t not in parts)
    if missing:
        raise LossError(f"enabled terms not computed: {', '.join(missing)}")
    total = None
    breakdown: dict[str, float | None] = {}
    for t in TERMS:
        if t in config.terms:
            term = config.weights[t] * parts[t]
            total = term if total is None else total + term
            breakdown[t] = float(parts[t].detach())
        else:
            breakdown[t] = None
    breakdown["total"] = float(total.detach())
    return total, breakdown
