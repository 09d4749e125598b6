import numpy as np
import pytest

from arfc.arc import ArcConfig, ArcModel, arc_forward_loss, arc_generate, arc_param_count
from arfc.decoderpool import (
    DecoderPool,
    cluster_param_count,
    evenly_spaced_rates,
    pool_param_count,
    reconstruct,
    reconstruction_losses,
    route,
)
from arfc.ergc import build_graph, cosine_matrix, ergc_loss, relation_score
from arfc.mos import MosConfig, MosModel, freeze, make_solutions, mos_forward_loss, mos_param_count, mos_refine
from arfc.numkit import LayerParams, Rng, Tensor, no_grad
from arfc.tokenizer import ratio_to_token_count, truncate
from conftest import gradcheck, rel_err, numeric_grad


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


# ---------------------------------------------------------------- ergc


def test_graph_is_symmetric_with_unit_diagonal():
    E = build_graph(rand(6, 5)).data
    assert np.allclose(E, E.T, atol=1e-15) and np.allclose(np.diag(E), 1)


def test_graph_matches_plain_cosine():
    x = rand(7, 4)
    brute = np.array([[a @ b / np.linalg.norm(a) / np.linalg.norm(b) for b in x] for a in x])
    assert np.allclose(build_graph(x).data, brute, atol=1e-14)
    assert np.allclose(cosine_matrix(x), brute, atol=1e-14)


def test_graph_errors():
    with pytest.raises(ValueError):
        build_graph(rand(1, 4))
    with pytest.raises(ValueError):
        build_graph(np.array([[1.0, 0], [0, 0]]))
    with pytest.raises(ValueError):
        ergc_loss(np.eye(3), np.eye(4))


def test_ergc_loss_zero_for_scaled_copy_and_gradient():
    x = rand(5, 6)
    assert ergc_loss(build_graph(x), build_graph(3 * x)).data == pytest.approx(0, abs=1e-24)
    E = build_graph(x).data
    assert gradcheck(lambda y: ergc_loss(Tensor(E), build_graph(y)), [rand(5, 3, seed=2)]) < 1e-4


def test_ergc_hand_value():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[1.0, 0.0], [1.0, 0.0]])
    # off-diagonal cosine goes 0 -> 1 twice
    assert ergc_loss(build_graph(a), build_graph(b)).data == pytest.approx(2.0)


def test_relation_score_identity_is_zero():
    x = rand(8, 4)
    s = relation_score(x, x)
    assert s["relation_err"] < 1e-15 and s["sim_ori"] == pytest.approx(s["sim_cmp"])


# ---------------------------------------------------------------- decoder pool


def test_route_examples():
    pool8 = DecoderPool(64, 8, 2, Rng(0))
    assert route(pool8, 0.0).tokens == 8
    assert route(pool8, 0.5).tokens == 4
    pool16 = DecoderPool(32, 16, 1, Rng(0))
    assert route(pool16, 0.9375).tokens == 1


def test_pool_covers_grid():
    pool = DecoderPool(16, 4, 3, Rng(0))
    for j in range(1, 5):
        c = pool.cluster(j)
        assert c.in_dim == 4 * j and c.out_dim == 16 and c.M == 3
    with pytest.raises(KeyError):
        pool.cluster(5)


def test_param_counts_match_closed_form():
    D, T, M = 24, 4, 3
    pool = DecoderPool(D, T, M, Rng(0))
    for j in range(1, T + 1):
        n = sum(pool.params[name].data.size for name in pool.cluster_param_names(j))
        assert n == cluster_param_count(j, D // T, D, M) == (M + 1) * (j * (D // T) * D + D)
    assert pool.params.count() == pool_param_count(D, T, M)


def test_rates_evenly_spaced():
    assert np.allclose(evenly_spaced_rates(5), [0.1, 0.3, 0.5, 0.7, 0.9])


def test_left_inverse_decoder_reconstructs_exactly():
    D = 6
    pool = DecoderPool(D, 3, 1, Rng(0))
    A = rand(D, D, seed=4)
    f = rand(5, D, seed=5)
    code = f @ A
    c = pool.cluster(3)
    c.params["main.w"].data = np.linalg.inv(A)
    c.params["main.b"].data = np.zeros(D)
    f_rec, _ = reconstruct(c, code, None, train=False)
    assert np.allclose(f_rec.data, f, atol=1e-12)


def test_eval_mode_aux_use_undropped_code():
    pool = DecoderPool(8, 2, 3, Rng(1))
    c = pool.cluster(2)
    code = rand(4, 8)
    _, aux = reconstruct(c, code, Rng(0), train=False)
    for m, a in enumerate(aux):
        p = c.params
        assert np.allclose(a.data, code @ p[f"aux{m}.w"].data + p[f"aux{m}.b"].data, rtol=0, atol=1e-12)


def test_aux_views_differ_in_train_mode():
    pool = DecoderPool(8, 2, 2, Rng(1))
    c = pool.cluster(2)
    code = rand(4, 8)
    f_rec, aux = reconstruct(c, code, Rng(3), train=True)
    outs = [f_rec.data] + [a.data for a in aux]
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.linalg.norm(outs[i] - outs[j]) > 0
    _, again = reconstruct(c, code, Rng(3), train=True)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(aux, again))


def test_reconstruct_length_mismatch():
    pool = DecoderPool(8, 2, 1, Rng(0))
    with pytest.raises(ValueError):
        reconstruct(pool.cluster(1), np.zeros((2, 8)), None, False)


def test_reconstruction_losses_examples():
    f = Tensor(np.array([[1.0, 0.0]]))
    r, a = reconstruction_losses(f, Tensor(np.zeros((1, 2))), [Tensor(np.ones((1, 2)))])
    assert (r.data, a.data) == (1.0, 1.0)
    r, a = reconstruction_losses(f, f, [f, f])
    assert (r.data, a.data) == (0.0, 0.0)
    x, y, z = rand(3, 5), rand(3, 5, seed=1), rand(3, 5, seed=2)
    r, a = reconstruction_losses(Tensor(x), Tensor(y), [Tensor(z), Tensor(y)])
    assert abs(r.data - sum(((x - y) ** 2).ravel())) < 1e-12
    assert abs(a.data - sum(((x - z) ** 2).ravel()) - sum(((x - y) ** 2).ravel())) < 1e-12


# ---------------------------------------------------------------- arc


SMALL = ArcConfig(D=16, T=4, width=8, layers=2, heads=2)


def test_arc_config_validation():
    with pytest.raises(ValueError):
        ArcConfig(D=10, T=4)
    with pytest.raises(ValueError):
        ArcConfig(width=30, heads=4)
    with pytest.raises(ValueError):
        ArcConfig(layers=0)


def test_arc_param_count_closed_form():
    for cfg in (SMALL, ArcConfig(), ArcConfig(generation="parallel"), ArcConfig(final_norm=False)):
        assert ArcModel(cfg, Rng(0)).params.count() == arc_param_count(cfg)


def test_large_config_constructible():
    cfg = ArcConfig(D=1024, T=16, width=64, layers=12, heads=4)
    assert cfg.d == 64
    assert arc_param_count(cfg) > 0


def test_arc_generate_shapes_and_range():
    m = ArcModel(SMALL, Rng(0))
    x = rand(3, 16)
    assert arc_generate(m, x, 2).shape == (3, 8)
    assert arc_generate(m, x[0], 4).shape == (16,)
    for n in (0, 5):
        with pytest.raises(ValueError):
            arc_generate(m, x, n)


def test_arc_prefix_consistency_and_truncate():
    m = ArcModel(SMALL, Rng(1))
    x = rand(5, 16)
    with no_grad():
        full = arc_generate(m, x, 4).data
        for n in range(1, 4):
            assert np.array_equal(arc_generate(m, x, n).data, full[:, : 4 * n])
        for r in (0.0, 0.3, 0.5, 0.75):
            direct = arc_generate(m, x, ratio_to_token_count(r, 4)).data
            assert np.array_equal(truncate(full, r, 4), direct)


def test_arc_deterministic_across_builds():
    x = rand(2, 16)
    a = arc_generate(ArcModel(SMALL, Rng(5)), x, 4).data
    b = arc_generate(ArcModel(SMALL, Rng(5)), x, 4).data
    assert np.array_equal(a, b)


def test_arc_last_input_token_drives_first_output():
    m = ArcModel(SMALL, Rng(2))
    x = rand(1, 16)
    y = x.copy()
    y[0, 12:] += 0.5
    a, b = arc_generate(m, x, 1).data, arc_generate(m, y, 1).data
    assert not np.allclose(a, b)


def test_parallel_mode_breaks_prefix_consistency():
    m = ArcModel(ArcConfig(D=16, T=4, width=8, heads=2, generation="parallel"), Rng(0))
    x = rand(3, 16)
    full = arc_generate(m, x, 4).data
    assert not np.array_equal(arc_generate(m, x, 2).data, full[:, :8])


def _identity_arc():
    cfg = ArcConfig(D=8, T=1, width=8, layers=1, heads=2, final_norm=False)
    m = ArcModel(cfg, Rng(0))
    for n in m.params:
        m.params[n].data = np.zeros_like(m.params[n].data)
    m.params["in_proj.w"].data = np.eye(8)
    m.params["out_proj.w"].data = np.eye(8)
    return m


def test_identity_compressor_with_inverse_decoder_has_zero_loss():
    m = _identity_arc()
    pool = DecoderPool(8, 1, 2, Rng(0))
    for name in pool.params:
        p = pool.params[name]
        p.data = np.eye(8) if name.endswith(".w") else np.zeros(8)
    x = rand(4, 8)
    parts = arc_forward_loss(m, x, [0.0], pool, 0.0, None, train=False, backward=False)
    assert parts.value == pytest.approx(0.0, abs=1e-20)


def test_arc_loss_matches_brute_force():
    cfg = ArcConfig(D=8, T=2, width=8, layers=1, heads=2)
    m = ArcModel(cfg, Rng(3))
    pool = DecoderPool(8, 2, 1, Rng(4))
    x = rand(2, 8)
    lam = 0.7
    rng = Rng(9)
    parts = arc_forward_loss(m, x, [0.0], pool, lam, rng, train=True, backward=False)
    # recompute outside the graph, replaying the dropout stream the loss used
    with no_grad():
        z = arc_generate(m, x, 2).data
    p = pool.cluster(2).params
    f_rec = z @ p["main.w"].data + p["main.b"].data
    rate = pool.aux_rates[0]
    keep = rng.fold(1).fold(0).fold(0).uniform(z.shape) >= rate
    f_aux = (z * keep / (1 - rate)) @ p["aux0.w"].data + p["aux0.b"].data
    E = lambda v: (v / np.linalg.norm(v, axis=1, keepdims=True)) @ (v / np.linalg.norm(v, axis=1, keepdims=True)).T
    want = np.sum((x - f_rec) ** 2) + np.sum((x - f_aux) ** 2) + lam * np.sum((E(x) - E(z)) ** 2)
    assert parts.value == pytest.approx(want, rel=1e-12)


def test_arc_loss_affine_in_lambda():
    m = ArcModel(SMALL, Rng(0))
    pool = DecoderPool(16, 4, 2, Rng(1))
    x = rand(4, 16)
    L = {lam: arc_forward_loss(m, x, [0.25, 0.5], pool, lam, Rng(2), backward=False).value for lam in (0, 0.5, 1)}
    assert L[1] - L[0] == pytest.approx(2 * (L[0.5] - L[0]), rel=1e-10)


def test_arc_loss_errors():
    m = ArcModel(SMALL, Rng(0))
    pool = DecoderPool(16, 4, 1, Rng(1))
    with pytest.raises(ValueError):
        arc_forward_loss(m, rand(4, 16), [], pool, 0.5, Rng(0))
    with pytest.raises(ValueError):
        arc_forward_loss(m, rand(1, 16), [0.0], pool, 0.5, Rng(0))


def test_arc_end_to_end_gradient_matches_finite_differences():
    cfg = ArcConfig(D=8, T=2, width=8, layers=2, heads=2)
    m = ArcModel(cfg, Rng(6))
    pool = DecoderPool(8, 2, 2, Rng(7))
    x = rand(3, 8)
    ratios = [0.0, 0.5]
    params = LayerParams()
    params.merged(m.params, "arc")
    params.merged(pool.params, "pool")

    def loss():
        return arc_forward_loss(m, x, ratios, pool, 0.5, Rng(8), backward=False).value

    params.zero_grad()
    arc_forward_loss(m, x, ratios, pool, 0.5, Rng(8))
    for name in params:
        t = params[name]

        def f(a, t=t):
            t.data = a
            return loss()

        fd = numeric_grad(f, [t.data.copy()])[0]
        g = t.grad if t.grad is not None else np.zeros_like(fd)
        assert rel_err(g, fd) < 1e-3, name


# ---------------------------------------------------------------- mos


def test_mos_param_count():
    for cfg in (MosConfig(), MosConfig(K=3, L=1, use_pos=False)):
        assert MosModel(cfg, 16, Rng(0)).params.count() == mos_param_count(cfg, 16)


def test_make_solutions_degenerate_and_expectation():
    f = rand(16)
    S = make_solutions(f, 1, Rng(0), rates=[0.0])
    assert np.array_equal(S.data[0], f)
    mean = np.mean([make_solutions(f, 3, Rng(1).fold(i)).data for i in range(20000)], axis=0)
    # relative error per element, scaled by |f| to stay meaningful near zero entries
    assert np.max(np.abs(mean - f) / np.abs(f).max()) < 0.05
    big = np.ones(4)
    m = np.mean([make_solutions(big, 3, Rng(2).fold(i)).data for i in range(10**5 // 4)], axis=0)
    assert np.max(np.abs(m - 1)) < 0.04


def test_make_solutions_reproducible():
    f = rand(3, 8)
    assert np.array_equal(make_solutions(f, 5, Rng(3)).data, make_solutions(f, 5, Rng(3)).data)


def test_mos_zero_weights_pass_token_through():
    model = MosModel(MosConfig(K=1, L=1), 8, Rng(0))
    for n in model.params:
        if n.startswith("blocks."):
            model.params[n].data = np.zeros_like(model.params[n].data)
    out = mos_refine(model, rand(1, 8)).data
    assert np.array_equal(out, model.params["token"].data + model.params["pos_emb"].data[-1])
    model2 = MosModel(MosConfig(K=1, L=1, use_pos=False), 8, Rng(0))
    for n in model2.params:
        if n.startswith("blocks."):
            model2.params[n].data = np.zeros_like(model2.params[n].data)
    assert np.array_equal(mos_refine(model2, rand(1, 8)).data, model2.params["token"].data)


def test_mos_permutation_invariant_without_positions():
    model = MosModel(MosConfig(K=3, L=2, use_pos=False), 8, Rng(1))
    S = rand(2, 3, 8)
    a = mos_refine(model, S).data
    b = mos_refine(model, S[:, [2, 0, 1]]).data
    assert np.allclose(a, b, atol=1e-10)
    with_pos = MosModel(MosConfig(K=3, L=2), 8, Rng(1))
    assert not np.allclose(mos_refine(with_pos, S).data, mos_refine(with_pos, S[:, [2, 0, 1]]).data)


def test_mos_output_length():
    for K, L in ((1, 1), (3, 2), (5, 3)):
        model = MosModel(MosConfig(K=K, L=L), 16, Rng(0))
        assert mos_refine(model, rand(2, K, 16)).shape == (2, 16)


def _mos_setup():
    arc = ArcModel(SMALL, Rng(0))
    mos = MosModel(MosConfig(K=3, L=1), 16, Rng(1))
    pool = DecoderPool(16, 4, 2, Rng(2))
    return arc, mos, pool


def test_mos_requires_frozen_arc_and_leaves_arc_grad_empty():
    arc, mos, pool = _mos_setup()
    x = rand(4, 16)
    with pytest.raises(AssertionError):
        mos_forward_loss(arc, mos, x, [0.0], pool, 0.5, Rng(0))
    freeze(arc.params)
    parts = mos_forward_loss(arc, mos, x, [0.0, 0.5], pool, 0.5, Rng(0))
    assert all(arc.params[n].grad is None for n in arc.params)
    assert np.any(mos.params["token"].grad != 0)
    assert parts.value > 0


def test_mos_loss_lambda_zero_is_reconstruction_only():
    arc, mos, pool = _mos_setup()
    freeze(arc.params)
    p = mos_forward_loss(arc, mos, rand(4, 16), [0.25], pool, 0.0, Rng(3), backward=False)
    assert p.value == pytest.approx(p.rec + p.aux / pool.M, rel=1e-12)


def test_mos_loss_single_ratio_brute_force():
    arc, mos, pool = _mos_setup()
    freeze(arc.params)
    x = rand(3, 16)
    lam = 0.5
    rng = Rng(4)
    parts = mos_forward_loss(arc, mos, x, [0.0], pool, lam, rng, backward=False)
    with no_grad():
        F = arc_generate(arc, x, 4).data
        S = make_solutions(F, 3, rng.fold(0), True)
        f_star = mos_refine(mos, S).data
    p = pool.cluster(4).params
    total = np.sum((x - (f_star @ p["main.w"].data + p["main.b"].data)) ** 2)
    aux = 0.0
    for m, rate in enumerate(pool.aux_rates):
        keep = rng.fold(1).fold(0).fold(m).uniform(f_star.shape) >= rate
        aux += np.sum((x - ((f_star * keep / (1 - rate)) @ p[f"aux{m}.w"].data + p[f"aux{m}.b"].data)) ** 2)
    total += aux / pool.M + lam * np.sum((cosine_matrix(x) - cosine_matrix(f_star)) ** 2)
    assert parts.value == pytest.approx(total, rel=1e-10)
