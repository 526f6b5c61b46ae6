"""Continual pre-training: frozen teacher, trainable student, AdamW, schedules, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import model as M
from . import tensor_core as tc
from .corpus import make_nsp_pair
from .masking import Batch, MaskingRates, apply_masking, pad_batch
from .objectives import RECIPES, LossConfig, mlm_loss, nsp_loss, sent_cl_loss, tacl_loss, total_loss

log = logging.getLogger(__name__)

OPTIMIZER_FILE = "optimizer.bin"
METRICS_FILE = "metrics.jsonl"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr_peak: float = 1e-4
    warmup_ratio: float = 0.10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    seed: int = 13
    checkpoint_every: int = 0
    recipe: str = "tacl"
    max_len: int = 128
    data_mode: str = "dynamic"  # or "static": a fixed pool of batches cycled per pass

    def __post_init__(self):
        errors = []
        if self.steps <= 0:
            errors.append("steps must be positive")
        if self.batch_size <= 0:
            errors.append("batch_size must be positive")
        if not 0.0 <= self.warmup_ratio < 1.0:
            errors.append("warmup_ratio must lie in [0, 1)")
        if self.recipe not in RECIPES:
            errors.append(f"unknown recipe {self.recipe!r}")
        if self.data_mode not in ("dynamic", "static"):
            errors.append(f"unknown data_mode {self.data_mode!r}")
        if errors:
            raise ValueError("; ".join(errors))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**d)

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_ratio * self.steps))


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr_peak``, then linear decay to 0 at ``steps``."""
    warm, total = config.warmup_steps, config.steps
    if step < warm:
        return config.lr_peak * step / warm
    return config.lr_peak * max(0.0, (total - step) / max(1, total - warm))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, torch.Tensor]) -> "OptimizerState":
        return cls({k: torch.zeros_like(p.detach()) for k, p in params.items()},
                   {k: torch.zeros_like(p.detach()) for k, p in params.items()})

    def to_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"m.{k}": t for k, t in self.m.items()}
        out.update({f"v.{k}": t for k, t in self.v.items()})
        out["step"] = torch.tensor([self.step], dtype=torch.int64)
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, torch.Tensor]) -> "OptimizerState":
        m = {k[2:]: t for k, t in tensors.items() if k.startswith("m.")}
        v = {k[2:]: t for k, t in tensors.items() if k.startswith("v.")}
        return cls(m, v, int(tensors["step"][0]))


def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: OptimizerState,
               lr: float, config: TrainConfig) -> None:
    """One bias-corrected Adam step with decoupled weight decay, in place."""
    bad = [k for k, g in grads.items() if not bool(torch.isfinite(g).all())]
    if bad:
        raise tc.NonFiniteError(f"non-finite gradient in {', '.join(bad)}; step aborted")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if config.weight_decay and not M.is_no_decay(name):
                p.mul_(1.0 - lr * config.weight_decay)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + config.adam_eps))


def clip_grad_norm(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; return the prior norm."""
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.values():
            g.mul_(scale)
    return norm


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def _step_seed(seed: int, step: int) -> int:
    return (seed * 1_000_003 + step) % (2 ** 62)


def make_batch(docs: Sequence, vocab_size: int, config: TrainConfig, step: int,
               rates: MaskingRates = MaskingRates(), views: int = 1) -> list[Batch]:
    """Batch for ``step``, drawn from an RNG keyed on (seed, step).

    Keying the stream on the step keeps resumed runs identical to
    uninterrupted ones. ``views`` independent maskings share the same pairs.
    """
    key = step
    if config.data_mode == "static":
        n_sent = sum(len(d) for d in docs)
        key = step % max(1, math.ceil(n_sent / config.batch_size))
    rng = np.random.default_rng([config.seed, key])
    pairs = [make_nsp_pair(docs, rng, config.max_len) for _ in range(config.batch_size)]
    out = []
    for _ in range(views):
        examples = [apply_masking(seq, rng, vocab_size, rates, is_next) for seq, is_next in pairs]
        out.append(pad_batch(examples))
    return out


# ---------------------------------------------------------------------------
# losses for one batch
# ---------------------------------------------------------------------------

def batch_losses(student: dict, teacher: dict | None, cfg: M.ModelConfig, batches: list[Batch],
                 loss_cfg: LossConfig, train: bool = True,
                 generator: torch.Generator | None = None) -> tuple[torch.Tensor, dict]:
    batch = batches[0]
    acts = M.forward(student, cfg, batch.masked_ids, batch.segment_ids, batch.padding_mask,
                     train=train, generator=generator)
    parts = {}
    if "mlm" in loss_cfg.terms:
        sel = batch.selected
        logits = M.mlm_head(acts.final[sel], student, cfg)
        parts["mlm"] = mlm_loss(logits, batch.mlm_targets[sel], torch.ones(logits.shape[0], dtype=torch.bool))
    if "nsp" in loss_cfg.terms:
        parts["nsp"] = nsp_loss(M.nsp_logits(acts, student), batch.is_next)
    if "tacl" in loss_cfg.terms:
        if teacher is None:
            raise ValueError("recipe needs a teacher")
        with torch.no_grad():
            t_acts = M.forward(teacher, cfg, batch.original_ids, batch.segment_ids, batch.padding_mask,
                               train=False)
        negatives = None if loss_cfg.tacl_denominator_specials else ~batch.special_mask
        parts["tacl"] = tacl_loss(acts.final, t_acts.final, batch.mask_indicator, batch.padding_mask,
                                  loss_cfg.tau, loss_cfg.tacl_reduction, negatives)
    if "sent_cl" in loss_cfg.terms:
        other = batches[1]
        acts2 = M.forward(student, cfg, other.masked_ids, other.segment_ids, other.padding_mask,
                          train=train, generator=generator)
        parts["sent_cl"] = sent_cl_loss(acts.final[:, 0], acts2.final[:, 0], loss_cfg.tau)
    return total_loss(parts, loss_cfg)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    student: dict[str, torch.Tensor]
    teacher: dict[str, torch.Tensor] | None
    optimizer: OptimizerState
    metrics: list[dict] = field(default_factory=list)
    final_checkpoint: Path | None = None


def _checkpoint_meta(train_cfg: TrainConfig, loss_cfg: LossConfig, tag: str) -> dict:
    return {"train": asdict(train_cfg), "loss": loss_cfg.to_dict(), "recipe": train_cfg.recipe,
            "seed": train_cfg.seed, "tag": tag}


def save_training_checkpoint(path: Path, params, cfg, state: OptimizerState, train_cfg, loss_cfg, tag) -> Path:
    M.save_checkpoint(path, params, cfg, step=state.step, extra=_checkpoint_meta(train_cfg, loss_cfg, tag))
    tc.save_tensors(state.to_tensors(), Path(path) / OPTIMIZER_FILE)
    return Path(path)


def train(docs: Sequence, base_params: dict[str, torch.Tensor], model_cfg: M.ModelConfig,
          train_cfg: TrainConfig, loss_cfg: LossConfig | None = None,
          out_dir: str | Path | None = None, resume_from: str | Path | None = None,
          rates: MaskingRates = MaskingRates(), stop_at: int | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Train a student initialised from ``base_params``.

    The teacher is a frozen copy of ``base_params``. Both start identical;
    only the student is updated. ``stop_at`` ends the run early (the
    schedule still assumes ``train_cfg.steps``), which is how interrupted
    runs are simulated.
    """
    torch.set_num_threads(1)
    loss_cfg = loss_cfg or LossConfig.for_recipe(train_cfg.recipe)
    if model_cfg.max_len < train_cfg.max_len:
        raise ValueError("train max_len exceeds model max_len")
    needs_teacher = "tacl" in loss_cfg.terms
    views = 2 if "sent_cl" in loss_cfg.terms else 1

    teacher = M.clone_params(base_params, requires_grad=False) if needs_teacher else None
    if resume_from is not None:
        student, _, meta = M.load_checkpoint(resume_from)
        state = OptimizerState.from_tensors(tc.load_tensors(Path(resume_from) / OPTIMIZER_FILE))
        if state.step != meta["step"]:
            raise ValueError("optimizer state and checkpoint disagree on step")
    else:
        student = M.clone_params(base_params, requires_grad=True)
        state = OptimizerState.zeros_like(student)

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if teacher is not None and not (out / "teacher").exists():
            M.save_checkpoint(out / "teacher", teacher, model_cfg, extra={"tag": "teacher"})
        mpath = out / METRICS_FILE
        kept = []
        if resume_from is not None and mpath.exists():
            kept = [ln for ln in mpath.read_text().splitlines() if json.loads(ln)["step"] <= state.step]
        mpath.write_text("".join(ln + "\n" for ln in kept))
        metrics_fh = mpath.open("a")

    result = TrainResult(student, teacher, state)
    last = min(train_cfg.steps, stop_at) if stop_at is not None else train_cfg.steps
    try:
        while state.step < last:
            t0 = time.perf_counter()
            step = state.step + 1
            batches = make_batch(docs, model_cfg.vocab_size, train_cfg, step, rates, views)
            gen = torch.Generator().manual_seed(_step_seed(train_cfg.seed, step))
            try:
                loss, breakdown = batch_losses(student, teacher, model_cfg, batches, loss_cfg, True, gen)
                if not math.isfinite(breakdown["total"]):
                    raise tc.NonFiniteError("non-finite total loss")
                grads = tc.backward(loss, student)
            except tc.NonFiniteError as e:
                if out is not None:
                    save_training_checkpoint(out / "last-good", student, model_cfg, state, train_cfg,
                                             loss_cfg, "last-good")
                raise TrainingDiverged(f"step {step}: {e}") from e
            clip_grad_norm(grads, train_cfg.grad_clip_norm)
            lr = lr_at(step - 1, train_cfg)
            adamw_step(student, grads, state, lr, train_cfg)

            rec = {"step": step, "total": breakdown["total"], "mlm": breakdown["mlm"],
                   "nsp": breakdown["nsp"], "tacl": breakdown["tacl"], "sent_cl": breakdown["sent_cl"],
                   "lr": lr, "seconds": time.perf_counter() - t0}
            result.metrics.append(rec)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(rec) + "\n")
                metrics_fh.flush()
            if on_step is not None:
                on_step(rec)
            if out is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
                save_training_checkpoint(out / f"step-{step:06d}", student, model_cfg, state, train_cfg,
                                         loss_cfg, "periodic")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if out is not None and state.step == train_cfg.steps:
        result.final_checkpoint = save_training_checkpoint(out / "final", student, model_cfg, state,
                                                           train_cfg, loss_cfg, "final")
    return result
