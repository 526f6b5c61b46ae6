"""Self-checking suites: finite-difference gradients, loop oracles, masking statistics.

Each suite returns a list of :class:`Check` records so the CLI and the
test-suite can share the same code paths.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterator

import numpy as np
import torch

from . import model as M
from . import objectives as O
from . import tensor_core as tc
from .corpus import CLS_ID, MASK_ID, N_RESERVED, SEP_ID, TokenSequence
from .masking import MaskingRates, apply_masking

W = tc.WIDE


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    limit: float
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# loop oracles (deliberately naive, independent of the vectorised code)
# ---------------------------------------------------------------------------

def cos(u, v) -> float:
    return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))


def _lse(xs) -> float:
    m = max(xs)
    return m + math.log(math.fsum(math.exp(x - m) for x in xs))


def tacl_loop(student, teacher, indicator, valid, tau) -> tuple[dict[int, float], float]:
    """Per-position terms and their mean over selected positions, by explicit loops."""
    student, teacher = np.asarray(student, float), np.asarray(teacher, float)
    n = student.shape[0]
    terms = {}
    for i in range(n):
        if not (indicator[i] and valid[i]):
            continue
        logits = [cos(student[i], teacher[j]) / tau for j in range(n) if valid[j]]
        terms[i] = _lse(logits) - cos(student[i], teacher[i]) / tau
    return terms, math.fsum(terms.values()) / len(terms)


def sent_cl_loop(v1, v2, tau) -> float:
    B = len(v1)
    total = 0.0
    for a, b in ((v1, v2), (v2, v1)):
        for i in range(B):
            logits = [cos(a[i], b[j]) / tau for j in range(B)]
            total += _lse(logits) - logits[i]
    return total / (2 * B)


def mlm_loop(logits, targets, indicator) -> float:
    losses = [_lse(row) - row[t] for row, t, ind in zip(logits, targets, indicator) if ind]
    return math.fsum(losses) / len(losses)


def self_sim_loop(h) -> float:
    n = len(h)
    total = math.fsum(cos(h[i], h[j]) for i in range(n) for j in range(n) if i != j)
    return total / (n * (n - 1))


# ---------------------------------------------------------------------------
# gradient suite
# ---------------------------------------------------------------------------

def _rand(g: torch.Generator, *shape) -> torch.Tensor:
    return torch.randn(*shape, generator=g, dtype=W)


def _op_instances(g: torch.Generator) -> Iterator[tuple[str, Callable, torch.Tensor]]:
    """One randomized (name, f, x) triple per differentiable operation."""
    r = lambda lo, hi: int(torch.randint(lo, hi + 1, (1,), generator=g))
    m, k, n = r(1, 5), r(1, 5), r(1, 5)
    b = _rand(g, k, n)
    yield "matmul.a", lambda x, b=b: tc.matmul(x, b).sin().sum(), _rand(g, m, k)
    a = _rand(g, m, k)
    yield "matmul.b", lambda x, a=a: tc.matmul(a, x).sin().sum(), _rand(g, k, n)
    y = _rand(g, m, n)
    yield "add", lambda x, y=y: tc.add(x, y).pow(2).sum(), _rand(g, m, n)
    w = _rand(g, m, 6)
    yield "softmax", lambda x, w=w: (tc.softmax(x, -1) * w).sum(), _rand(g, m, 6) * 3
    yield "log_softmax", lambda x, w=w: (tc.log_softmax(x, -1) * w).sum(), _rand(g, m, 6) * 3
    v = _rand(g, 8)
    yield "cosine_sim", lambda x, v=v: tc.cosine_sim(x, v), _rand(g, 8)
    d = r(3, 8)  # at d=2 the normalised output is a constant +-1 and the gradient vanishes
    gain, bias, w2 = _rand(g, d), _rand(g, d), _rand(g, m, d)
    yield "layer_norm", lambda x, gain=gain, bias=bias, w2=w2: (tc.layer_norm(x, gain, bias) * w2).sum(), _rand(g, m, d)
    yield "gelu", lambda x: tc.gelu(x).sum(), _rand(g, m, n) * 2
    ids = torch.randint(0, 5, (7,), generator=g)
    w3 = _rand(g, 7, 3)
    yield "embedding_lookup", lambda x, ids=ids, w3=w3: (tc.embedding_lookup(x, ids) * w3).sum(), _rand(g, 5, 3)
    tgt = torch.randint(0, 6, (m,), generator=g)
    yield "cross_entropy", lambda x, tgt=tgt: tc.cross_entropy(x, tgt).sum(), _rand(g, m, 6)
    seed = r(0, 10**6)
    yield "dropout", (lambda x, seed=seed:
                      (tc.dropout(x, 0.3, torch.Generator().manual_seed(seed)) ** 2).sum()), _rand(g, m, n)
    ind = (torch.rand(6, generator=g) < 0.5).long()
    ind[r(0, 5)] = 1
    teacher = _rand(g, 6, 8)
    tau = [1.0, 0.1, 0.01][r(0, 2)]
    yield "tacl_loss", (lambda x, t=teacher, ind=ind, tau=tau:
                        O.tacl_loss(x, t, ind, torch.ones(6), tau)), _rand(g, 6, 8)
    view2 = _rand(g, 4, 8)
    yield "sent_cl_loss", lambda x, v2=view2: O.sent_cl_loss(x, v2, 0.1), _rand(g, 4, 8)
    tg = torch.randint(0, 9, (5,), generator=g)
    mi = torch.tensor([1, 0, 1, 1, 0])
    yield "mlm_loss", lambda x, tg=tg, mi=mi: O.mlm_loss(x, tg, mi), _rand(g, 5, 9)
    lab = torch.randint(0, 2, (3,), generator=g)
    yield "nsp_loss", lambda x, lab=lab: O.nsp_loss(x, lab), _rand(g, 3, 2)


GRAD_CFG = M.ModelConfig(vocab_size=12, d_model=8, n_layers=2, n_heads=2, d_ff=12, max_len=8, dropout_p=0.1)
# names of the parameter tensors perturbed in the full-model check
FULL_MODEL_PARAMS = ("embeddings.token", "layers.0.attn.q.weight", "layers.1.ffn.in.weight",
                     "mlm.transform.weight", "pooler.weight", "nsp.bias")


def _toy_params(seed: int) -> dict[str, torch.Tensor]:
    # weights scaled up from the 0.02 init so gradients sit well above finite-difference noise
    p = M.init_params(GRAD_CFG, seed, dtype=W)
    g = torch.Generator().manual_seed(seed)
    out = {}
    for k, v in p.items():
        v = v.detach()
        if k.endswith(".gain"):
            v = v + 0.3 * _rand(g, *v.shape)
        elif k.endswith(".bias"):
            v = v + 0.3 * _rand(g, *v.shape)
        else:
            v = v * 20
        out[k] = v
    return out


def composite_instance(seed: int, terms=("mlm", "nsp", "tacl"), tau: float = 0.01):
    """A float64 toy batch and a closure ``loss(params)`` for the composite objective."""
    g = torch.Generator().manual_seed(seed)
    params = _toy_params(seed)
    teacher = {k: v.clone() + 0.05 * _rand(g, *v.shape) for k, v in params.items()}
    B, n = 2, 6
    ids = torch.randint(N_RESERVED, GRAD_CFG.vocab_size, (B, n), generator=g)
    ids[:, 0], ids[:, -1] = CLS_ID, SEP_ID
    ids[1, 4:] = torch.tensor([SEP_ID, 0])
    pad = ids != 0
    segs = torch.zeros_like(ids)
    segs[:, 3:] = 1
    sel = torch.zeros(B, n, dtype=torch.bool)
    sel[0, [1, 3]] = True
    sel[1, 2] = True
    masked = ids.clone()
    masked[sel] = MASK_ID
    is_next = torch.tensor([1, 0])
    cfg = O.LossConfig(tau=tau, terms=frozenset(terms))
    drop_seed = seed + 17

    def loss(p: dict[str, torch.Tensor]) -> torch.Tensor:
        gen = torch.Generator().manual_seed(drop_seed)
        acts = M.forward(p, GRAD_CFG, masked, segs, pad, train=True, generator=gen)
        parts = {}
        if "mlm" in terms:
            parts["mlm"] = O.mlm_loss(M.mlm_logits(acts, p, GRAD_CFG), ids, sel)
        if "nsp" in terms:
            parts["nsp"] = O.nsp_loss(M.nsp_logits(acts, p), is_next)
        if "tacl" in terms:
            t_acts = M.forward(teacher, GRAD_CFG, ids, segs, pad, train=False)
            parts["tacl"] = O.tacl_loss(acts.final, t_acts.final, sel, pad, tau)
        if "sent_cl" in terms:
            acts2 = M.forward(p, GRAD_CFG, ids, segs, pad, train=True, generator=gen)
            parts["sent_cl"] = O.sent_cl_loss(acts.final[:, 0], acts2.final[:, 0], tau)
        return O.total_loss(parts, cfg)[0]

    return params, loss


def full_model_checks(seed: int, tol: float = 1e-4, terms=("mlm", "nsp", "tacl")) -> list[Check]:
    params, loss = composite_instance(seed, terms)
    out = []
    for name in FULL_MODEL_PARAMS:
        def f(x, name=name):
            q = dict(params)
            q[name] = x
            return loss(q)
        rep = tc.grad_check(f, params[name], tol=tol)
        out.append(Check(f"full_model[{'+'.join(terms)}].{name}", rep.passed, rep.max_rel_error, tol,
                         f"seed={seed} coords={rep.n_coords}"))
    return out


def gradient_suite(instances: int = 100, seed: int = 0, tol: float = 1e-4, op: str | None = None,
                   full_model: bool = True) -> list[Check]:
    """Randomised finite-difference checks.

    ``instances`` counts per-operation instances (rounds over the op table);
    when ``full_model`` is true the composite objective is checked too.
    """
    g = torch.Generator().manual_seed(seed)
    checks: list[Check] = []
    count = 0
    while count < instances:
        for name, f, x in _op_instances(g):
            if op is not None and name.split(".")[0] != op:
                continue
            rep = tc.grad_check(f, x, tol=tol)
            checks.append(Check(f"op.{name}", rep.passed, rep.max_rel_error, tol, f"shape={tuple(x.shape)}"))
            count += 1
            if count >= instances:
                break
        if op is not None and not checks:
            raise ValueError(f"unknown operation {op!r}; choose from {', '.join(op_names())}")
    if full_model:
        checks += full_model_checks(seed)
        checks += full_model_checks(seed + 1, terms=("mlm", "nsp", "sent_cl"))
    return checks


def op_names() -> list[str]:
    names = [n.split(".")[0] for n, _, _ in _op_instances(torch.Generator().manual_seed(0))]
    return sorted(set(names))


# ---------------------------------------------------------------------------
# loss oracles and closed forms
# ---------------------------------------------------------------------------

def tacl_oracle_checks(instances: int = 1000, seed: int = 0, tol: float = 1e-6) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst, min_term, failures = 0.0, math.inf, 0
    for _ in range(instances):
        n, d = int(rng.integers(2, 9)), int(rng.integers(1, 17))
        tau = float(rng.choice([1.0, 0.1, 0.01]))
        s, t = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        valid = np.ones(n, dtype=int)
        n_valid = int(rng.integers(2, n + 1))
        valid[n_valid:] = 0
        ind = (rng.random(n) < 0.5).astype(int) * valid
        if not ind.any():
            ind[int(rng.integers(n_valid))] = 1
        ref_terms, ref = tacl_loop(s, t, ind, valid, tau)
        st, tt = torch.tensor(s, dtype=W), torch.tensor(t, dtype=W)
        got = float(O.tacl_loss(st, tt, torch.tensor(ind), torch.tensor(valid), tau))
        terms = O.tacl_terms(st, tt, torch.tensor(valid), tau)[0]
        err = abs(got - ref)
        worst = max(worst, err)
        min_term = min(min_term, float(terms[torch.tensor(ind).bool()].min()))
        failures += err > tol
    return [Check("tacl_vs_double_loop", failures == 0, worst, tol, f"instances={instances}"),
            Check("tacl_terms_nonnegative", min_term >= 0.0, min_term, 0.0, "min selected per-position term")]


def closed_form_checks(tol: float = 1e-9) -> list[Check]:
    out = []
    g = torch.Generator().manual_seed(0)
    teacher = _rand(g, 1, 8).expand(6, 8)
    valid = torch.tensor([1, 1, 1, 1, 1, 0])
    got = float(O.tacl_loss(_rand(g, 6, 8), teacher, torch.tensor([1, 0, 1, 1, 0, 0]), valid, 0.01))
    out.append(Check("tacl_uniform_teacher_log_n", abs(got - math.log(5)) <= tol, abs(got - math.log(5)), tol))
    e = torch.eye(2, dtype=W)
    ref = math.log(1 + math.exp(-1))
    got = float(O.tacl_loss(e.clone(), e, torch.tensor([1, 0]), torch.ones(2), 1.0))
    out.append(Check("tacl_orthogonal_two_token", abs(got - ref) <= tol, abs(got - ref), tol))
    K = 13
    got = float(O.mlm_loss(torch.zeros(4, K, dtype=W), torch.tensor([0, 3, 7, 12]), torch.ones(4)))
    out.append(Check("mlm_uniform_log_k", abs(got - math.log(K)) <= tol, abs(got - math.log(K)), tol))
    got = float(O.sent_cl_loss(e, e.clone(), 1.0))
    out.append(Check("sent_cl_orthonormal_pairs", abs(got - ref) <= tol, abs(got - ref), tol))
    got = float(O.nsp_loss(torch.zeros(3, 2, dtype=W), torch.tensor([0, 1, 1])))
    out.append(Check("nsp_equal_logits_log2", abs(got - math.log(2)) <= tol, abs(got - math.log(2)), tol))
    return out


def loop_oracle_checks(seed: int = 0, tol: float = 1e-6) -> list[Check]:
    rng = np.random.default_rng(seed)
    logits, targets = rng.normal(size=(7, 9)), rng.integers(0, 9, size=7)
    ind = np.array([1, 0, 1, 1, 0, 1, 1])
    got = float(O.mlm_loss(torch.tensor(logits), torch.tensor(targets), torch.tensor(ind)))
    e1 = abs(got - mlm_loop(logits.tolist(), targets.tolist(), ind.tolist()))
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    e2 = abs(float(O.sent_cl_loss(torch.tensor(a), torch.tensor(b), 0.1)) - sent_cl_loop(a, b, 0.1))
    return [Check("mlm_vs_loop", e1 <= 1e-9, e1, 1e-9), Check("sent_cl_vs_loop", e2 <= tol, e2, tol)]


# ---------------------------------------------------------------------------
# masking statistics
# ---------------------------------------------------------------------------

def masking_statistics(n_tokens: int = 1_000_000, seed: int = 0, vocab_size: int = 1000,
                       rates: MaskingRates = MaskingRates()) -> dict[str, float]:
    """Monte-Carlo selection and replacement-category rates over ``n_tokens`` maskable positions."""
    rng = np.random.default_rng(seed)
    body = 30
    seq = TokenSequence([CLS_ID] + list(range(N_RESERVED, N_RESERVED + body)) + [SEP_ID] +
                        list(range(N_RESERVED + body, N_RESERVED + 2 * body)) + [SEP_ID],
                        [0] * (body + 2) + [1] * (body + 1))
    special = np.isin(np.asarray(seq.ids), (CLS_ID, SEP_ID))
    seen = sel = n_mask = n_rand = n_keep = special_hits = 0
    while seen < n_tokens:
        ex = apply_masking(seq, rng, vocab_size, rates)
        orig, masked = np.asarray(ex.original_ids), np.asarray(ex.masked_ids)
        chosen = np.asarray(ex.selected, dtype=bool)
        special_hits += int((chosen & special).sum() + (np.asarray(ex.mask_indicator, dtype=bool) & special).sum())
        seen += 2 * body
        sel += int(chosen.sum())
        is_mask = masked[chosen] == MASK_ID
        same = masked[chosen] == orig[chosen]
        n_mask += int(is_mask.sum())
        n_keep += int(same.sum())
        n_rand += int((~is_mask & ~same).sum())
    return {"tokens": seen, "selected": sel, "select_rate": sel / seen, "mask_frac": n_mask / sel,
            "random_frac": n_rand / sel, "keep_frac": n_keep / sel, "special_selected": special_hits}


def masking_checks(n_tokens: int = 1_000_000, seed: int = 0) -> list[Check]:
    s = masking_statistics(n_tokens, seed)
    out = [Check("masking.select_rate", abs(s["select_rate"] - 0.15) <= 0.002, s["select_rate"], 0.002,
                 f"tokens={s['tokens']}")]
    for key, target in (("mask_frac", 0.8), ("random_frac", 0.1), ("keep_frac", 0.1)):
        out.append(Check(f"masking.{key}", abs(s[key] - target) <= 0.005, s[key], 0.005, f"target={target}"))
    out.append(Check("masking.specials_never_selected", s["special_selected"] == 0, s["special_selected"], 0))
    return out


def selftest(masking_tokens: int = 1_000_000, tacl_instances: int = 1000) -> list[Check]:
    t0 = time.perf_counter()
    checks = closed_form_checks() + loop_oracle_checks() + tacl_oracle_checks(tacl_instances)
    checks += masking_checks(masking_tokens)
    checks.append(Check("selftest.seconds", True, time.perf_counter() - t0, math.inf))
    return checks
