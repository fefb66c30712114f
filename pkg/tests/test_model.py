import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_diff, perfect_fixture, rel_err
from hypav import data, model
from hypav.errors import DataError, NumericalDomainError


def tiny(num_curvatures=0, head_in=None, seed=0):
    return model.ModelParams.init(8, 6, 4, 5, seed=seed, num_curvatures=num_curvatures, head_in=head_in)


def tiny_batch(seed=0):
    r = np.random.default_rng(seed)
    return r.normal(size=(4, 8)), r.normal(size=(4, 8)), r.normal(size=(3, 5)), np.array([0, 2, 1, 2])


# -- forward and base loss -----------------------------------------------------------


def test_zero_weights_give_zero_outputs():
    p = model.ModelParams.init(8, 6, 4, 5)
    for k in p.tensors:
        p.tensors[k] = np.zeros_like(p.tensors[k])
    fw = model.forward(*tiny_batch()[:3], p)
    for name in ("phi_v", "phi_a", "phi_v_att", "phi_a_att", "theta_v", "theta_a", "theta_w"):
        assert not getattr(fw, name).any()


def test_reference_shapes():
    p = model.ModelParams.init(seed=0)
    r = np.random.default_rng(0)
    fw = model.forward(r.normal(size=(3, 512)), r.normal(size=(3, 512)), r.normal(size=(7, 512)), p)
    assert fw.phi_v.shape == fw.phi_a.shape == fw.phi_v_att.shape == (3, 300)
    assert fw.theta_v.shape == fw.theta_a.shape == (3, 64)
    assert fw.theta_w.shape == (7, 64)


def test_open_gate_disables_fusion():
    p = tiny()
    p.tensors["gate_v"] = np.array(50.0)
    p.tensors["gate_a"] = np.array(50.0)
    fw = model.forward(*tiny_batch()[:3], p)
    assert np.array_equal(fw.phi_v_att, fw.phi_v) and np.array_equal(fw.phi_a_att, fw.phi_a)


def test_shape_mismatch():
    with pytest.raises(DataError):
        model.forward(np.zeros((2, 8)), np.zeros((3, 8)), np.zeros((3, 5)), tiny())


def _logit_fixture(logits_row, tau):
    """Embeddings whose cosine logits against unit class axes equal ``logits_row``."""
    k = len(logits_row)
    cos = np.asarray(logits_row) * tau
    z = cos.copy()
    # cosines against orthonormal axes: pad with an orthogonal component for unit norm
    rest = math.sqrt(max(0.0, 1.0 - float(np.sum(cos**2))))
    z = np.append(z, rest)[None, :]
    w = np.eye(k, k + 1)
    return z, z, w


def test_base_loss_examples():
    z, _, w = _logit_fixture([0.0, 0.0, 0.0], 0.1)
    assert model.base_loss(z, z, w, [1], 0.1) == pytest.approx(math.log(3), abs=1e-12)
    z, _, w = _logit_fixture([2.0, 0.0, 0.0], 0.5)
    assert model.base_loss(z, z, w, [0], 0.5) == pytest.approx(math.log(1 + 2 * math.exp(-2)), abs=1e-12)
    assert math.log(1 + 2 * math.exp(-2)) == pytest.approx(0.23954, abs=1e-5)
    # margin -> infinity: a perfectly aligned sample at vanishing temperature
    z, _, w = _logit_fixture([1e3, 0.0, 0.0], 1e-3)
    assert model.base_loss(z, z, w, [0], 1e-3) <= 1e-300


def test_base_loss_vjp():
    r = np.random.default_rng(2)
    tv, ta, tw = r.normal(size=(5, 4)), r.normal(size=(5, 4)), r.normal(size=(3, 4))
    lab = np.array([0, 1, 2, 2, 1])
    gv, ga, gw = model.base_loss_vjp(tv, ta, tw, lab, 0.3)
    f = lambda a, b, c: model.base_loss(a, b, c, lab, 0.3)
    assert rel_err(gv, central_diff(lambda t: f(t, ta, tw), tv)) <= 1e-5
    assert rel_err(ga, central_diff(lambda t: f(tv, t, tw), ta)) <= 1e-5
    assert rel_err(gw, central_diff(lambda t: f(tv, ta, t), tw)) <= 1e-5


# -- end-to-end gradients ------------------------------------------------------------

CASES = [
    ("baseline", "phi", "hyperbolic", 1),
    ("hyper-alignment", "phi", "hyperbolic", 1),
    ("hyper-single", "phi", "hyperbolic", 1),
    ("hyper-multiple", "phi", "hyperbolic", 2),
    ("hyper-multiple", "phi_att", "hyperbolic", 3),
    ("hyper-multiple", "theta", "hyperbolic", 2),
    ("hyper-alignment", "theta", "spherical", 1),
    ("hyper-alignment", "phi", "euclidean", 1),
]


def _cfg(mode, where, space, n_c, weight=1.0, kernel="neg-geodesic-distance"):
    curv = {"hyperbolic": -0.2, "spherical": 0.5, "euclidean": -0.2}[space]
    return model.TrainConfig(mode=mode, align_at=where, space=space, num_curvatures=n_c,
                             curvature=curv, align_weight=weight, kernel=kernel)


@pytest.mark.parametrize("mode, where, space, n_c", CASES)
def test_total_loss_gradient_every_tensor(mode, where, space, n_c):
    cfg = _cfg(mode, where, space, n_c)
    head_in = {"phi": 12, "phi_att": 12, "theta": 8}[where]
    p = tiny(num_curvatures=n_c if cfg.adaptive else 0, head_in=head_in)
    for k in ("enc_v_b", "proj_a_b", "word_b"):
        p.tensors[k] = np.random.default_rng(9).normal(size=p.tensors[k].shape) * 0.1
    p.tensors["gate_v"] = np.array(0.3)
    v, a, w, lab = tiny_batch()
    _, grads = model.loss_and_grads(p, v, a, w, lab, cfg)
    assert set(grads) == set(p.tensors)
    for name, t in p.tensors.items():
        def f(x, name=name):
            q = p.copy()
            q.tensors[name] = x
            return model.loss_and_grads(q, v, a, w, lab, cfg, need_align_grad=False)[0]["total"]
        assert rel_err(grads[name], central_diff(f, t)) <= 1e-4, name


@pytest.mark.parametrize("mode, where, space, n_c", [c for c in CASES if c[0] != "baseline"])
def test_alignment_gradient_path_alone(mode, where, space, n_c):
    """The alignment term is small next to the base loss; isolate its gradient."""
    cfg = _cfg(mode, where, space, n_c)
    off = _cfg(mode, where, space, n_c, weight=0.0)
    head_in = {"phi": 12, "phi_att": 12, "theta": 8}[where]
    p = tiny(num_curvatures=n_c if cfg.adaptive else 0, head_in=head_in, seed=4)
    v, a, w, lab = tiny_batch(3)
    _, g_on = model.loss_and_grads(p, v, a, w, lab, cfg)
    _, g_off = model.loss_and_grads(p, v, a, w, lab, off)
    for name, t in p.tensors.items():
        def f(x, name=name):
            q = p.copy()
            q.tensors[name] = x
            return model.loss_and_grads(q, v, a, w, lab, cfg, need_align_grad=False)[0]["align"]
        num = central_diff(f, t)
        got = g_on[name] - g_off[name]
        assert np.max(np.abs(got - num)) <= 1e-4 * max(1e-6, np.max(np.abs(num))) + 1e-11, name


def test_weight_zero_leaves_head_gradient_zero():
    cfg = _cfg("hyper-multiple", "phi", "hyperbolic", 2, weight=0.0)
    p = tiny(num_curvatures=2, head_in=12)
    _, grads = model.loss_and_grads(p, *tiny_batch(), cfg)
    assert not grads["head_w"].any() and not grads["head_b"].any()


# -- metrics -------------------------------------------------------------------------


def test_harmonic_mean_examples():
    assert model.harmonic_mean(51.53, 18.43) == pytest.approx(27.15, abs=0.01)
    assert model.harmonic_mean(63.15, 30.72) == pytest.approx(41.34, abs=0.01)
    assert model.harmonic_mean(100.0, 0.0) == 0.0
    assert model.harmonic_mean(0.0, 0.0) == 0.0


@given(st.floats(0, 100), st.floats(0, 100))
def test_harmonic_mean_bounds(s, u):
    hm = model.harmonic_mean(s, u)
    assert hm <= 2 * min(s, u) + 1e-9 and hm <= (s + u) / 2 + 1e-9
    assert model.harmonic_mean(s, s) == s


def test_perfect_classifier_report():
    bundle, params = perfect_fixture()
    rep = model.evaluate_gzsl(params, bundle)
    assert (rep.S, rep.U, rep.HM, rep.ZSL) == (100.0, 100.0, 100.0, 100.0)


def test_seen_only_predictor():
    labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    seen = np.array([True, True, False, False])
    scores = np.zeros((8, 4))
    scores[:, 0] = 1.0  # always predicts seen class 0
    scores[:, 2] = 0.5  # second choice: unseen class 2
    rep = model.gzsl_report(scores, labels, seen)
    assert rep.U == 0.0 and rep.HM == 0.0 and rep.ZSL > 0.0


def test_missing_group_warns():
    labels = np.array([0, 1])
    seen = np.array([True, True, False])
    with pytest.warns(RuntimeWarning):
        rep = model.gzsl_report(np.eye(3)[:2], labels, seen)
    assert rep.U is None and rep.HM == 0.0


# -- training --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_bundle():
    return data.default_dataset(seed=0, per_class=12)


def _small_cfg(**kw):
    base = dict(hid_dim=24, emb_dim=8, epochs=3, batch_size=16)
    base.update(kw)
    return model.TrainConfig(**base)


def test_seed_determinism(small_bundle):
    r1 = model.train(small_bundle, _small_cfg())
    r2 = model.train(small_bundle, _small_cfg())
    assert r1.log == r2.log
    for k in r1.params.tensors:
        assert np.array_equal(r1.params.tensors[k], r2.params.tensors[k])


def test_weight_zero_reproduces_baseline(small_bundle):
    for where in model.ALIGN_AT:
        aligned = model.train(small_bundle, _small_cfg(align_weight=0.0, align_at=where))
        base = model.train(small_bundle, _small_cfg(mode="baseline", align_at=where))
        for k in base.params.tensors:
            assert np.array_equal(aligned.params.tensors[k], base.params.tensors[k]), k


def test_loss_trends_down(small_bundle):
    log = model.train(small_bundle, _small_cfg(epochs=10)).log
    assert all(np.isfinite(r["total_loss"]) for r in log)
    assert log[-1]["total_loss"] < log[1]["total_loss"]


def test_curvatures_logged_and_in_range(small_bundle):
    log = model.train(small_bundle, _small_cfg(num_curvatures=3)).log
    for rec in log:
        assert len(rec["curvatures"]) == 3
        assert all(-0.4 < c < 0 for c in rec["curvatures"])


def test_nan_loss_aborts(small_bundle):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(NumericalDomainError):
            model.train(small_bundle, _small_cfg(mode="baseline", lr=1e300))


def test_empty_and_leaky_datasets(small_bundle):
    b = data.DatasetBundle(small_bundle.video, small_bundle.audio, small_bundle.words, small_bundle.labels,
                           small_bundle.taxonomy, small_bundle.seen, np.array(["test"] * len(small_bundle.labels)))
    with pytest.raises(DataError):
        model.train(b, _small_cfg())
    leak = small_bundle.split.copy()
    leak[np.flatnonzero(~small_bundle.seen[small_bundle.labels])[0]] = "train"
    b = data.DatasetBundle(small_bundle.video, small_bundle.audio, small_bundle.words, small_bundle.labels,
                           small_bundle.taxonomy, small_bundle.seen, leak)
    with pytest.raises(DataError):
        model.train(b, _small_cfg())


def test_embedding_delta_rel(small_bundle):
    res = model.train(small_bundle, _small_cfg(epochs=1))
    d = model.embedding_delta_rel(res.params, small_bundle)
    assert 0.0 <= d <= 1.0
