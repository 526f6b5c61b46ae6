"""Desk-scale directional experiment: does the contrastive branch end less anisotropic?

One run pre-trains a base model with MLM+NSP, continues two branches from it
for the same number of steps (``baseline-mt`` and ``tacl``), and compares
their layer-wise self-similarity on a fixed sentence sample.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import analysis as A
from . import corpus as C
from . import model as M
from . import trainer as T
from .objectives import LossConfig


@dataclass(frozen=True)
class Protocol:
    vocab_size: int = 1000
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 64
    batch_size: int = 32
    base_steps: int = 1500
    base_lr: float = 1e-3
    branch_steps: int = 1500
    branch_lr: float = 2e-3
    tau: float = 0.01
    tacl_reduction: str = "sum"
    sample: int = 500
    branch_seed_offset: int = 1000


@dataclass
class DirectionalResult:
    seed: int
    base: A.SelfSimReport
    baseline: A.SelfSimReport
    tacl: A.SelfSimReport
    seconds: float
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def final_delta(self) -> float:
        """tacl minus baseline-mt, final layer (negative = tacl more discriminative)."""
        return A.compare_models(self.tacl, self.baseline).final_delta

    def to_dict(self) -> dict:
        return {"seed": self.seed, "final_delta": self.final_delta, "seconds": self.seconds,
                "timings": self.timings, "base": self.base.to_dict(),
                "baseline-mt": self.baseline.to_dict(), "tacl": self.tacl.to_dict()}


def directional_run(docs: Sequence[Sequence[str]], seed: int, protocol: Protocol = Protocol(),
                    out_dir: str | Path | None = None,
                    log: Callable[[str], None] | None = None) -> DirectionalResult:
    """Run base pre-training and both branches for one seed on raw-text ``docs``."""
    p = protocol
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    vocab = C.build_vocab((s for d in docs for s in d), p.vocab_size)
    enc = C.encode_corpus(docs, vocab)
    cfg = M.ModelConfig(vocab_size=len(vocab), d_model=p.d_model, n_layers=p.n_layers, n_heads=p.n_heads,
                        d_ff=p.d_ff, max_len=p.max_len)
    sample = A.sample_sentences(enc, p.sample, p.max_len, seed=seed)
    timings = {}

    def sub(name):
        return None if out is None else out / name

    tb = time.perf_counter()
    base_cfg = T.TrainConfig(steps=p.base_steps, batch_size=p.batch_size, lr_peak=p.base_lr,
                             recipe="pretrain-base", seed=seed, max_len=p.max_len)
    base = T.train(enc, M.init_params(cfg, seed), cfg, base_cfg, out_dir=sub("base")).student
    timings["base"] = time.perf_counter() - tb
    reports = {"base": A.layerwise_self_similarity(base, cfg, sample, model_tag="base")}
    if log:
        log(f"seed {seed}: base done in {timings['base']:.0f}s, s(x) {reports['base'].means()}")

    for recipe in ("baseline-mt", "tacl"):
        tb = time.perf_counter()
        tcfg = T.TrainConfig(steps=p.branch_steps, batch_size=p.batch_size, lr_peak=p.branch_lr, recipe=recipe,
                             seed=seed + p.branch_seed_offset, max_len=p.max_len)
        lcfg = LossConfig.for_recipe(recipe, tau=p.tau, tacl_reduction=p.tacl_reduction)
        student = T.train(enc, base, cfg, tcfg, lcfg, out_dir=sub(recipe)).student
        timings[recipe] = time.perf_counter() - tb
        reports[recipe] = A.layerwise_self_similarity(student, cfg, sample, model_tag=recipe)
        if log:
            log(f"seed {seed}: {recipe} done in {timings[recipe]:.0f}s, s(x) {reports[recipe].means()}")

    res = DirectionalResult(seed, reports["base"], reports["baseline-mt"], reports["tacl"],
                            time.perf_counter() - t0, timings)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for name, rep in reports.items():
            rep.save(out / f"report-{name}.json")
        (out / "protocol.json").write_text(json.dumps(asdict(p), indent=2) + "\n")
    return res
