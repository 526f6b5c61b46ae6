import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tacl import objectives as O
from tacl import tensor_core as tc
from tacl.verify import mlm_loop, sent_cl_loop, tacl_loop

W = tc.WIDE


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=W)


# -- config --------------------------------------------------------------------

def test_recipes_term_sets():
    assert O.LossConfig.for_recipe("tacl").terms == {"mlm", "nsp", "tacl"}
    assert O.LossConfig.for_recipe("baseline-mt").terms == {"mlm", "nsp"}
    assert O.LossConfig.for_recipe("model-1").terms == {"mlm", "nsp", "sent_cl"}
    assert O.LossConfig.for_recipe("model-2").terms == {"tacl"}
    with pytest.raises(O.LossError):
        O.LossConfig.for_recipe("model-3")


def test_config_validation():
    with pytest.raises(O.LossError):
        O.LossConfig(tau=0)
    with pytest.raises(O.LossError):
        O.LossConfig(terms=frozenset())
    with pytest.raises(O.LossError, match="alpha.*beta"):
        O.LossConfig.from_dict({"alpha": 1, "beta": 2})
    cfg = O.LossConfig(tau=0.1, terms={"mlm"})
    assert O.LossConfig.from_dict(cfg.to_dict() | {"terms": frozenset(cfg.to_dict()["terms"])}) == cfg


# -- MLM / NSP -----------------------------------------------------------------

def test_mlm_uniform_is_log_k():
    K = 11
    loss = O.mlm_loss(torch.zeros(5, K, dtype=W), torch.arange(5), torch.tensor([1, 0, 1, 1, 0]))
    assert abs(float(loss) - math.log(K)) < 1e-12


def test_mlm_monotone_toward_zero():
    prev = math.inf
    for big in (0.0, 5.0, 10.0, 20.0):
        logits = torch.zeros(1, 4, dtype=W)
        logits[0, 2] = big
        val = float(O.mlm_loss(logits, torch.tensor([2]), torch.tensor([1])))
        assert val < prev
        prev = val
    assert prev < 1e-8


def test_mlm_loop_oracle():
    logits, targets = rand(7, 9, seed=1), torch.randint(0, 9, (7,), generator=torch.Generator().manual_seed(1))
    ind = torch.tensor([1, 0, 1, 1, 0, 1, 1])
    ref = mlm_loop(logits.tolist(), targets.tolist(), ind.tolist())
    assert abs(float(O.mlm_loss(logits, targets, ind)) - ref) < 1e-9


def test_mlm_no_selection():
    with pytest.raises(O.LossError):
        O.mlm_loss(torch.zeros(2, 3), torch.zeros(2, dtype=torch.long), torch.zeros(2))


def test_nsp_equal_logits_log2_and_symmetry():
    assert float(O.nsp_loss(torch.zeros(2, dtype=W), torch.tensor(1))) == pytest.approx(math.log(2), abs=1e-15)
    logits = torch.tensor([[0.3, -0.7], [-0.7, 0.3]], dtype=W)
    per = tc.cross_entropy(logits, torch.tensor([0, 1]))
    assert float(per[0]) == float(per[1])


def test_nsp_gradient():
    labels = torch.tensor([0, 1, 1])
    assert tc.grad_check(lambda x: O.nsp_loss(x, labels), rand(3, 2, seed=2)).passed


# -- TaCL ----------------------------------------------------------------------

def test_tacl_orthogonal_closed_form():
    t = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=W)
    loss = O.tacl_loss(t.clone(), t, torch.tensor([1, 0]), torch.tensor([1, 1]), tau=1.0)
    assert abs(float(loss) - math.log(1 + math.exp(-1))) < 1e-12


def test_tacl_uniform_teacher_log_n():
    teacher = rand(1, 8).expand(6, 8)
    valid = torch.tensor([1, 1, 1, 1, 1, 0])
    loss = O.tacl_loss(rand(6, 8, seed=3), teacher, torch.tensor([0, 1, 1, 0, 1, 0]), valid, tau=0.01)
    assert abs(float(loss) - math.log(5)) < 1e-9


@pytest.mark.parametrize("tau", [1.0, 0.1, 0.01])
def test_tacl_matches_double_loop(tau):
    s, t = rand(6, 8, seed=4), rand(6, 8, seed=5)
    ind, valid = [1, 0, 1, 1, 0, 1], [1, 1, 1, 1, 1, 1]
    _, ref = tacl_loop(s.numpy(), t.numpy(), ind, valid, tau)
    got = O.tacl_loss(s, t, torch.tensor(ind), torch.tensor(valid), tau)
    assert abs(float(got) - ref) < 1e-6


def test_tacl_gradient_and_teacher_isolation():
    t = rand(6, 8, seed=7).requires_grad_(True)
    ind, valid = torch.tensor([1, 1, 0, 1, 0, 0]), torch.ones(6)
    rep = tc.grad_check(lambda x: O.tacl_loss(x, t, ind, valid, 0.01), rand(6, 8, seed=6))
    assert rep.passed, rep
    s = rand(6, 8, seed=6).requires_grad_(True)
    loss = O.tacl_loss(s, t, ind, valid, 0.01)
    assert loss.grad_fn is not None
    g = tc.backward(loss, {"s": s, "t": t})
    assert torch.equal(g["t"], torch.zeros_like(t))


def test_tacl_errors():
    with pytest.raises(O.LossError):
        O.tacl_loss(rand(3, 4), rand(3, 4), torch.zeros(3), torch.ones(3))
    with pytest.raises(tc.DegenerateVectorError):
        O.tacl_loss(torch.zeros(3, 4, dtype=W), rand(3, 4), torch.ones(3), torch.ones(3))
    with pytest.raises(tc.DimensionError):
        O.tacl_loss(rand(3, 4), rand(3, 5), torch.ones(3), torch.ones(3))


def test_tacl_sum_reduction_is_per_sequence_sum():
    s, t = rand(2, 5, 4, seed=8), rand(2, 5, 4, seed=9)
    ind, valid = torch.ones(2, 5), torch.ones(2, 5)
    terms = O.tacl_terms(s, t, valid, 0.1)
    assert abs(float(O.tacl_loss(s, t, ind, valid, 0.1, "sum")) - float(terms.sum()) / 2) < 1e-12
    assert abs(float(O.tacl_loss(s, t, ind, valid, 0.1, "mean")) - float(terms.mean())) < 1e-12


def test_tacl_negatives_mask_drops_columns():
    s, t = rand(4, 6, seed=10), rand(4, 6, seed=11)
    neg = torch.tensor([False, True, True, False])
    got = O.tacl_terms(s, t, torch.ones(4), 1.0, negatives_mask=neg)
    _, ref1 = tacl_loop(s.numpy(), t.numpy(), [0, 1, 0, 0], [0, 1, 1, 0], 1.0)
    assert abs(float(got[0, 1]) - ref1) < 1e-12
    # position 0 keeps itself even though it is excluded as a negative for others
    col = [float(O.tc.cosine_sim(s[0], t[j])) for j in (0, 1, 2)]
    ref0 = math.log(sum(math.exp(c) for c in col)) - col[0]
    assert abs(float(got[0, 0]) - ref0) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.integers(1, 16), st.sampled_from([1.0, 0.1, 0.01]), st.integers(0, 10**6))
def test_tacl_terms_nonnegative_and_scale_invariant(n, d, tau, seed):
    s, t = rand(n, d, seed=seed), rand(n, d, seed=seed + 1)
    ind, valid = torch.ones(n), torch.ones(n)
    terms = O.tacl_terms(s, t, valid, tau)
    assert bool((terms >= -1e-12).all())
    g = torch.Generator().manual_seed(seed)
    scale_s = torch.rand(n, 1, generator=g, dtype=W) * 10 + 0.01
    scale_t = torch.rand(n, 1, generator=g, dtype=W) * 10 + 0.01
    a = float(O.tacl_loss(s, t, ind, valid, tau))
    b = float(O.tacl_loss(s * scale_s, t * scale_t, ind, valid, tau))
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


def test_tacl_padding_neutral():
    s, t = rand(5, 8, seed=12), rand(5, 8, seed=13)
    ind = torch.tensor([0, 1, 1, 0, 1])
    base = O.tacl_loss(s, t, ind, torch.ones(5), 0.01)
    pad = lambda x: torch.cat([x, rand(3, 8, seed=99)])
    padded = O.tacl_loss(pad(s), pad(t), torch.cat([ind, torch.ones(3)]),
                         torch.tensor([1] * 5 + [0] * 3), 0.01)
    assert abs(float(base) - float(padded)) < 1e-12


def test_tacl_smaller_tau_decreases_when_positive_is_row_max():
    t = torch.eye(4, dtype=W)
    s = t + 0.2 * rand(4, 4, seed=14).abs() * (1 - t)
    vals = [float(O.tacl_loss(s, t, torch.ones(4), torch.ones(4), tau)) for tau in (1.0, 0.1, 0.01)]
    assert vals[0] > vals[1] > vals[2] >= 0


# -- sentence-level ------------------------------------------------------------

def test_sent_cl_closed_forms():
    e = torch.eye(2, dtype=W)
    assert abs(float(O.sent_cl_loss(e, e.clone(), 1.0)) - math.log(1 + math.exp(-1))) < 1e-12
    same = rand(1, 5).expand(4, 5)
    assert abs(float(O.sent_cl_loss(same, same, 0.01)) - math.log(4)) < 1e-9


def test_sent_cl_loop_oracle_and_errors():
    a, b = rand(4, 6, seed=15), rand(4, 6, seed=16)
    assert abs(float(O.sent_cl_loss(a, b, 0.1)) - sent_cl_loop(a.numpy(), b.numpy(), 0.1)) < 1e-6
    with pytest.raises(O.LossError):
        O.sent_cl_loss(a[:1], b[:1])


# -- composite -----------------------------------------------------------------

def test_total_single_term_and_weighted_sum():
    parts = {"mlm": torch.tensor(1.5), "nsp": torch.tensor(0.25), "tacl": torch.tensor(2.0)}
    total, br = O.total_loss(parts, O.LossConfig(terms={"mlm"}))
    assert float(total) == 1.5 and br["nsp"] is None and br["total"] == 1.5
    cfg = O.LossConfig(terms={"mlm", "nsp", "tacl"}, weights={"mlm": 0.5, "nsp": 2.0, "tacl": 3.0})
    total, _ = O.total_loss(parts, cfg)
    assert float(total) == 0.5 * 1.5 + 2.0 * 0.25 + 3.0 * 2.0
    with pytest.raises(O.LossError):
        O.total_loss({"mlm": torch.tensor(1.0)}, O.LossConfig(terms={"mlm", "nsp"}))


def test_zero_weights_match_mlm_only_gradient():
    x = rand(3, 5, seed=17).requires_grad_(True)
    targets, ind = torch.tensor([0, 2, 4]), torch.ones(3)

    def parts():
        return {"mlm": O.mlm_loss(x, targets, ind), "nsp": O.nsp_loss(x[:, :2], torch.tensor([0, 1, 1])),
                "tacl": O.tacl_loss(x, rand(3, 5, seed=18), ind, torch.ones(3), 0.1)}

    cfg_all = O.LossConfig(terms={"mlm", "nsp", "tacl"}, weights={"nsp": 0.0, "tacl": 0.0})
    g_all = tc.backward(O.total_loss(parts(), cfg_all)[0], {"x": x})["x"]
    g_mlm = tc.backward(O.total_loss(parts(), O.LossConfig(terms={"mlm"}))[0], {"x": x})["x"]
    assert torch.equal(g_all, g_mlm)
