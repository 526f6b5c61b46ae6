
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tacl import analysis as A
from tacl import model as M
from tacl import tensor_core as tc
from tacl.corpus import TokenSequence, single_sequence
from tacl.verify import cos, self_sim_loop

W = tc.WIDE
CFG = M.ModelConfig(vocab_size=30, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_len=16)


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=W)


def sentences(k, seed=0):
    rng = np.random.default_rng(seed)
    return [single_sequence(rng.integers(5, 30, size=int(rng.integers(2, 10))).tolist(), 16) for _ in range(k)]


# -- self_similarity -----------------------------------------------------------

def test_identical_rows_one_orthonormal_zero():
    assert A.self_similarity(rand(1, 6).expand(4, 6)) == pytest.approx(1.0, abs=1e-12)
    assert A.self_similarity(torch.eye(5, dtype=W)) == 0.0


def test_double_loop_oracle():
    h = rand(5, 8, seed=1)
    assert abs(A.self_similarity(h) - self_sim_loop(h.numpy())) < 1e-9


def test_keep_mask_and_errors():
    h = rand(4, 3, seed=2)
    keep = torch.tensor([True, False, True, True])
    assert A.self_similarity(h, keep) == pytest.approx(self_sim_loop(h[keep].numpy()), abs=1e-12)
    with pytest.raises(A.AnalysisError):
        A.self_similarity(h, torch.tensor([True, False, False, False]))
    with pytest.raises(tc.DegenerateVectorError):
        A.self_similarity(torch.zeros(3, 2))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 10), st.integers(1, 12), st.integers(0, 10**6))
def test_invariances_and_bounds(n, d, seed):
    h = rand(n, d, seed=seed)
    s = A.self_similarity(h)
    assert -1.0 / (n - 1) - 1e-12 <= s <= 1.0 + 1e-12
    g = torch.Generator().manual_seed(seed)
    perm = torch.randperm(n, generator=g)
    scale = torch.rand(n, 1, generator=g, dtype=W) * 100 + 1e-3
    assert abs(A.self_similarity(h[perm]) - s) < 1e-12
    assert abs(A.self_similarity(h * scale) - s) <= 1e-9


def test_lower_bound_attained_by_simplex():
    n = 4
    e = torch.eye(n, dtype=W)
    simplex = e - e.mean(0)  # n unit-norm-equal vectors summing to zero
    assert A.self_similarity(simplex) == pytest.approx(-1 / (n - 1), abs=1e-12)


def test_analysis_keep_mask_excludes_specials():
    ids = torch.tensor([[2, 7, 8, 3, 0]])
    pad = ids != 0
    assert A.analysis_keep_mask(ids, pad).tolist() == [[False, True, True, False, False]]
    assert A.analysis_keep_mask(ids, pad, include_specials=True).tolist() == [[True, True, True, True, False]]


# -- layer-wise reports ---------------------------------------------------------

def test_report_shape_and_single_sentence_std():
    p = M.init_params(CFG, 1)
    rep = A.layerwise_self_similarity(p, CFG, sentences(1))
    assert len(rep.layers) == CFG.n_layers + 1
    assert all(s.std == 0.0 and s.n == 1 for s in rep.layers)
    assert rep.layer0 == "embedding_output"
    assert all(-1 <= m <= 1 for m in rep.means())


def test_report_order_invariant():
    p = M.init_params(CFG, 2)
    sents = sentences(12, seed=3)
    a = A.layerwise_self_similarity(p, CFG, sents)
    b = A.layerwise_self_similarity(p, CFG, sents[::-1])
    assert a.to_dict() == b.to_dict()


def test_report_matches_recomputation_from_activations():
    p = M.init_params(CFG, 4)
    sents = sentences(6, seed=5)
    rep = A.layerwise_self_similarity(p, CFG, sents)
    per = []
    for s in sents:
        with torch.no_grad():
            acts = M.forward(p, CFG, torch.tensor(s.ids))
        per.append([self_sim_loop(h[0, 1:-1].double().numpy()) for h in acts.hidden])
    per = np.array(per)
    for layer, stat in enumerate(rep.layers):
        assert abs(stat.mean - per[:, layer].mean()) < 1e-9
        assert abs(stat.std - per[:, layer].std()) < 1e-9


def test_batched_scores_padding_neutral():
    p = M.init_params(CFG, 6)
    sents = sentences(8, seed=7)
    a = A.sentence_scores(p, CFG, sents, batch_size=1)
    b = A.sentence_scores(p, CFG, sents, batch_size=8)
    assert float(np.abs(a - b).max()) <= 1e-6


def test_report_json_round_trip(tmp_path):
    rep = A.SelfSimReport([A.LayerStat(0, 0.5, 0.1, 3), A.LayerStat(1, 0.25, 0.0, 3)], "m", "c")
    rep.save(tmp_path / "r.json")
    assert A.SelfSimReport.load(tmp_path / "r.json") == rep


def test_empty_sample_and_sampler():
    with pytest.raises(A.AnalysisError):
        A.layerwise_self_similarity(M.init_params(CFG), CFG, [])
    docs = [[[5, 6, 7], [8]], [[9, 10]]]
    got = A.sample_sentences(docs, 10, 16)
    assert [s.ids for s in got] == [[2, 5, 6, 7, 3], [2, 9, 10, 3]]
    assert A.sample_sentences(docs, 1, 16, seed=4) == A.sample_sentences(docs, 1, 16, seed=4)


# -- matrices and heatmaps -----------------------------------------------------

def test_matrix_diagonal_symmetry_and_oracle():
    p = M.init_params(CFG, 8)
    seq = TokenSequence([2, 9, 14, 21, 3], [0] * 5)
    m = A.self_sim_matrix(p, CFG, seq)
    assert np.all(np.diag(m.values) == 1.0)
    assert np.array_equal(m.values, m.values.T)
    with torch.no_grad():
        h = M.forward(p, CFG, torch.tensor(seq.ids)).final[0].double().numpy()
    for i in range(5):
        for j in range(5):
            if i != j:
                assert abs(m.values[i, j] - cos(h[i], h[j])) < 1e-9
    assert m.tokens == ["2", "9", "14", "21", "3"]


def test_pgm_identity_mapping():
    pgm = A.heatmap_pgm(A.SelfSimMatrix(np.eye(3), ["a", "b", "c"]))
    header = b"P5\n3 3\n255\n"
    assert pgm.startswith(header)
    pix = list(pgm[len(header):])
    assert pix == [0, 128, 128, 128, 0, 128, 128, 128, 0]
    assert A._gray(-1.0) == 255 and A._gray(1.0) == 0


def test_pgm_scale():
    pgm = A.heatmap_pgm(A.SelfSimMatrix(np.array([[1.0, -1.0], [-1.0, 1.0]])), scale=2)
    assert pgm.startswith(b"P5\n4 4\n255\n")
    assert list(pgm[-16:]) == [0, 0, 255, 255] * 2 + [255, 255, 0, 0] * 2


def test_csv_round_trip_and_determinism(tmp_path):
    vals = np.array([[1.0, 0.123456789123], [0.123456789123, 1.0]])
    m = A.SelfSimMatrix(vals, ["x,y", "##z"])
    back = A.read_heatmap_csv(A.heatmap_csv(m))
    assert back.tokens == m.tokens
    assert np.allclose(back.values, vals, atol=5e-10, rtol=0)
    c1, p1 = A.export_heatmap(m, tmp_path / "a")
    c2, p2 = A.export_heatmap(m, tmp_path / "b")
    assert c1.read_bytes() == c2.read_bytes() and p1.read_bytes() == p2.read_bytes()


# -- comparison ----------------------------------------------------------------

def _rep(means):
    return A.SelfSimReport([A.LayerStat(i, m, 0.0, 1) for i, m in enumerate(means)])


def test_compare_self_and_known_gap():
    r = _rep([0.5, 0.4, 0.3])
    c = A.compare_models(r, r)
    assert c.deltas == [0.0, 0.0, 0.0] and c.more_discriminative == "tie"
    c = A.compare_models(_rep([0.5, 0.25, 0.125]), _rep([0.5, 0.5, 0.5]))
    assert c.deltas == [0.0, -0.25, -0.375] and c.final_delta == -0.375 and c.more_discriminative == "a"
    assert "final layer" in c.table("tacl", "base")
    with pytest.raises(A.AnalysisError):
        A.compare_models(_rep([0.1]), _rep([0.1, 0.2]))
