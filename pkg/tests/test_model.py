import math

import numpy as np
import pytest

import oracles
from gradcheck import gradient_check, tiny_config
from mgaa import autograd as ag
from mgaa.autograd import Tensor
from mgaa.model import (
    ABLATIONS,
    ConfigError,
    MGAANet,
    ModelConfig,
    ShapeError,
    ablation_config,
    afm_weights,
    cfeb_forward,
    classifier_forward,
    gtfa_forward,
    init_params,
    ltfa_forward,
    mgaa_forward,
    predict_labels,
)


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def f64_net(cfg, seed=0):
    params, buffers = init_params(cfg, seed, dtype=np.float64)
    return MGAANet(cfg, params, buffers)


def randomize(net, rng, scale=0.5):
    """Replace zero/one inits with random values so every path is exercised."""
    for k, v in net.params.items():
        if k.endswith(("gamma",)):
            v[...] = 1 + 0.2 * rng.standard_normal(v.shape)
        elif k.endswith(("beta",)) or ".afm.vg." in k:
            v[...] = scale * rng.standard_normal(v.shape)
    for k, v in net.buffers.items():
        v[...] = rng.uniform(0.5, 1.5, v.shape) if k.endswith("var") else 0.1 * rng.standard_normal(v.shape)


# ---------------------------------------------------------------- config


def test_default_parameter_count_near_3_74m():
    n = MGAANet(ModelConfig()).n_params
    assert n == 3_738_220
    assert abs(n - 3.74e6) / 3.74e6 <= 0.02


@pytest.mark.parametrize(
    "kw",
    [dict(window_set=(3, 4)), dict(window_set=(1,)), dict(dropout_p=1.0), dict(use_gtfa=False, use_ltfa=False),
     dict(mgaa_placement=("middle",)), dict(afm_reduction=0), dict(fusion="max")],
)
def test_invalid_configs_rejected(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw).validate()


def test_shape_chain_default():
    cfg = ModelConfig()
    assert cfg.stage_shapes() == [(32, 30, 63), (64, 15, 31), (128, 7, 15)]
    assert cfg.flat_dim == 13440
    net = MGAANet(cfg)
    taps = {}
    logits = net.forward(np.zeros((2, 1, 60, 126), np.float32), taps=taps)
    assert logits.shape == (2, 2)
    assert [taps[f"cfeb{s}"] for s in (1, 2, 3)] == [(2, 32, 30, 63), (2, 64, 15, 31), (2, 128, 7, 15)]


def test_wrong_input_shape_names_stage():
    net = MGAANet(ModelConfig())
    with pytest.raises(ShapeError, match="input"):
        net.forward(np.zeros((1, 1, 60, 100), np.float32))


# ---------------------------------------------------------------- blocks


def test_cfeb_shapes_and_zero_input():
    rng = np.random.default_rng(0)
    for cin, cout, f, t, want in [(1, 32, 60, 126, (30, 63)), (32, 64, 30, 63, (15, 31)), (64, 128, 15, 31, (7, 15))]:
        w = T(rng.standard_normal((cout, cin, 3, 3)) * 0.1)
        x = T(np.zeros((8, cin, f, t)))
        out = cfeb_forward(x, w, T(np.zeros(cout)), T(np.ones(cout)), T(np.zeros(cout)), np.zeros(cout), np.ones(cout), False)
        assert out.shape == (8, cout) + want
        assert not out.data.any()
    with pytest.raises(ShapeError):
        cfeb_forward(T(np.zeros((1, 1, 1, 5))), w, T(np.zeros(128)), T(np.ones(128)), T(np.zeros(128)), np.zeros(128), np.ones(128), False)


def gtfa_weights(rng, c):
    return [T(rng.standard_normal((c, c)) * 0.5), T(rng.standard_normal(c) * 0.1),
            T(rng.standard_normal((c, c)) * 0.5), T(rng.standard_normal(c) * 0.1)]


def ltfa_weights(rng, c, k):
    return [T(rng.standard_normal((c, k, 1)) * 0.5), T(rng.standard_normal(c) * 0.1),
            T(rng.standard_normal((c, c)) * 0.5), T(rng.standard_normal(c) * 0.1),
            T(rng.standard_normal((c, 1, k)) * 0.5), T(rng.standard_normal(c) * 0.1),
            T(rng.standard_normal((c, c)) * 0.5), T(rng.standard_normal(c) * 0.1)]


def test_gtfa_matches_naive_oracle(rng):
    x = rng.standard_normal((2, 4, 6, 10))
    w = gtfa_weights(rng, 4)
    out, (fm, tm) = gtfa_forward(T(x), *w, return_maps=True)
    ref, rf, rt = oracles.gtfa(x, *(a.data for a in w))
    np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(fm, rf, rtol=1e-12)
    np.testing.assert_allclose(tm, rt, rtol=1e-12)
    assert fm.shape == (2, 4, 1, 10) and tm.shape == (2, 4, 6, 1)


@pytest.mark.parametrize("k", [3, 5, 7])
def test_ltfa_matches_naive_oracle(rng, k):
    x = rng.standard_normal((2, 4, 6, 10))
    w = ltfa_weights(rng, 4, k)
    out = ltfa_forward(T(x), *w)
    ref = oracles.ltfa(x, *(a.data for a in w))
    np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-14)


def test_ltfa_rejects_even_window(rng):
    with pytest.raises(ConfigError):
        ltfa_forward(T(rng.standard_normal((1, 4, 6, 10))), *ltfa_weights(rng, 4, 4))


def test_zero_input_zero_output(rng):
    x = T(np.zeros((2, 4, 6, 10)))
    assert not gtfa_forward(x, *gtfa_weights(rng, 4)).data.any()
    assert not ltfa_forward(x, *ltfa_weights(rng, 4, 3)).data.any()
    cfg = ModelConfig(cfeb_channels=(4, 4, 4), window_set=(3, 5), n_freq=12, n_frames=20, hidden_dims=(8, 4))
    net = f64_net(cfg)
    randomize(net, rng)
    p = {k: T(v) for k, v in net.params.items()}
    assert not mgaa_forward(x, p, "mgaa_shallow", cfg).data.any()


def afm_params(rng, c, r, n):
    return [T(rng.standard_normal((r, c)) * 0.5), T(rng.standard_normal(r) * 0.1),
            T(1 + 0.2 * rng.standard_normal(r)), T(0.2 * rng.standard_normal(r)),
            T(rng.standard_normal((n, r))), T(rng.standard_normal(n) * 0.1)]


def test_afm_matches_naive_oracle(rng):
    x = rng.standard_normal((3, 32, 6, 10))
    p = afm_params(rng, 32, 4, 5)
    got = afm_weights(T(x), *p, groups=2)
    ref = oracles.afm(x, *(a.data for a in p), groups=2)
    np.testing.assert_allclose(got.data, ref, rtol=1e-10, atol=1e-13)
    np.testing.assert_allclose(got.data.sum(axis=1), 1, atol=1e-12)


def test_afm_zero_head_is_uniform(rng):
    p = afm_params(rng, 8, 4, 5)
    p[4], p[5] = T(np.zeros((5, 4))), T(np.zeros(5))
    w = afm_weights(T(rng.standard_normal((2, 8, 6, 10))), *p, groups=2)
    np.testing.assert_allclose(w.data, 0.2, rtol=1e-15)


def test_mgaa_matches_composed_oracle(rng):
    cfg = ModelConfig()
    net = f64_net(cfg, seed=3)
    randomize(net, rng)
    x = rng.standard_normal((2, 32, 30, 63))
    p = {k: T(v) for k, v in net.params.items()}
    got = mgaa_forward(T(x), p, "mgaa_shallow", cfg).data
    q = {k: v for k, v in net.params.items() if k.startswith("mgaa_shallow.")}
    pre = "mgaa_shallow"
    branches = [oracles.gtfa(x, q[f"{pre}.gtfa.vf.w"], q[f"{pre}.gtfa.vf.b"], q[f"{pre}.gtfa.vt.w"], q[f"{pre}.gtfa.vt.b"])[0]]
    for k in cfg.window_set:
        b = f"{pre}.ltfa{k}"
        branches.append(oracles.ltfa(x, *(q[f"{b}.{n}"] for n in
                        ("dwf.w", "dwf.b", "vf.w", "vf.b", "dwt.w", "dwt.b", "vt.w", "vt.b"))))
    w = oracles.afm(x, *(q[f"{pre}.afm.{n}"] for n in ("vr.w", "vr.b", "gn.gamma", "gn.beta", "vg.w", "vg.b")),
                    groups=cfg.afm_group_count(32))
    ref = sum(w[:, i, None, None, None] * br for i, br in enumerate(branches))
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12)


def test_single_branch_is_exact(rng):
    x = T(rng.standard_normal((2, 32, 30, 63)))
    for kw, name in [(dict(use_ltfa=False), "gtfa"), (dict(use_gtfa=False, window_set=(5,)), "ltfa5")]:
        cfg = ModelConfig(**kw)
        net = f64_net(cfg)
        randomize(net, rng)
        p = {k: T(v) for k, v in net.params.items()}
        out = mgaa_forward(x, p, "mgaa_shallow", cfg).data
        pre = f"mgaa_shallow.{name}"
        if name == "gtfa":
            br = gtfa_forward(x, *(p[f"{pre}.{n}"] for n in ("vf.w", "vf.b", "vt.w", "vt.b")))
        else:
            br = ltfa_forward(x, *(p[f"{pre}.{n}"] for n in ("dwf.w", "dwf.b", "vf.w", "vf.b", "dwt.w", "dwt.b", "vt.w", "vt.b")))
        np.testing.assert_array_equal(out, br.data)


def test_fixed_equal_fusion_is_branch_mean(rng):
    cfg = ModelConfig(fusion="fixed_equal", window_set=(3, 5))
    net = f64_net(cfg)
    x = T(rng.standard_normal((2, 32, 30, 63)))
    p = {k: T(v) for k, v in net.params.items()}
    out = mgaa_forward(x, p, "mgaa_shallow", cfg).data
    pre = "mgaa_shallow"
    brs = [gtfa_forward(x, *(p[f"{pre}.gtfa.{n}"] for n in ("vf.w", "vf.b", "vt.w", "vt.b"))).data]
    for k in (3, 5):
        brs.append(ltfa_forward(x, *(p[f"{pre}.ltfa{k}.{n}"] for n in ("dwf.w", "dwf.b", "vf.w", "vf.b", "dwt.w", "dwt.b", "vt.w", "vt.b"))).data)
    np.testing.assert_allclose(out, np.mean(brs, axis=0), rtol=1e-6, atol=1e-12)


def test_classifier_matches_oracle_and_is_stable(rng):
    cfg = ModelConfig(cfeb_channels=(4, 4, 4), n_freq=12, n_frames=20, hidden_dims=(8, 4))
    net = f64_net(cfg)
    randomize(net, rng)
    flat = rng.standard_normal((5, cfg.flat_dim))
    p = {k: T(v) for k, v in net.params.items()}
    a = classifier_forward(T(flat), p, net.buffers, False, 0.3, None).data
    b = classifier_forward(T(flat), p, net.buffers, False, 0.3, None).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, oracles.classifier_eval(flat, net.params, net.buffers), rtol=1e-10, atol=1e-12)
    with pytest.raises(ShapeError):
        classifier_forward(T(flat[:, :-1]), p, net.buffers, False, 0.3, None)


def test_training_dropout_after_first_relu_only(rng):
    cfg = ModelConfig(cfeb_channels=(4, 4, 4), n_freq=12, n_frames=20, hidden_dims=(8, 4), dropout_p=0.5)
    net = f64_net(cfg)
    flat = rng.standard_normal((6, cfg.flat_dim))
    p = {k: T(v) for k, v in net.params.items()}
    b1, b2 = dict(net.buffers), {k: v.copy() for k, v in net.buffers.items()}
    a = classifier_forward(T(flat), p, {k: v.copy() for k, v in b1.items()}, True, 0.5, np.random.default_rng(1)).data
    c = classifier_forward(T(flat), p, b2, True, 0.5, np.random.default_rng(2)).data
    assert not np.allclose(a, c)


def test_embed_then_head_equals_forward(rng):
    cfg = ModelConfig()
    net = MGAANet(cfg, seed=1)
    x = rng.standard_normal((3, 1, 60, 126)).astype(np.float32)
    emb = net.embed(x)
    assert emb.shape == (3, 13440)
    np.testing.assert_array_equal(net.head(emb).data, net.forward(x).data)
    np.testing.assert_array_equal(net.embed(x), emb)


def test_ablation_a_is_plain_cfeb_stack(rng):
    cfg = ablation_config("a")
    net = MGAANet(cfg, seed=2)
    x = rng.standard_normal((2, 1, 60, 126)).astype(np.float32)
    p = {k: Tensor(v) for k, v in net.params.items()}
    h = Tensor(x)
    for s in (1, 2, 3):
        h = cfeb_forward(h, p[f"cfeb{s}.conv.w"], p[f"cfeb{s}.conv.b"], p[f"cfeb{s}.bn.gamma"], p[f"cfeb{s}.bn.beta"],
                         net.buffers[f"cfeb{s}.bn.mean"], net.buffers[f"cfeb{s}.bn.var"], False)
    np.testing.assert_array_equal(net.embed(x), h.data.reshape(2, -1))


def test_ablation_parameter_directions():
    n = {k: MGAANet(ablation_config(k)).n_params for k in ABLATIONS}
    full = n["j"]
    for k in "abcde":
        assert n[k] < full
    assert n["f"] < full  # no AFM head
    assert n["g"] < n["h"] < full < n["i"]
    assert n["a"] < n["d"] and n["a"] < n["e"]
    assert n["d"] + n["e"] - n["a"] == full


def test_predict_labels_tie_goes_to_real():
    assert predict_labels(np.array([[0.3, 0.3], [0.1, 0.2], [0.5, -1.0]])).tolist() == [0, 1, 0]


# ---------------------------------------------------------------- loss


def test_loss_uniform_logits_is_ln2():
    loss = ag.cross_entropy(Tensor(np.zeros((4, 2))), np.array([0, 1, 1, 0]))
    assert abs(float(loss.data) - math.log(2)) < 1e-15


def test_loss_saturates():
    logits = np.array([[20.0, 0.0], [0.0, 20.0]])
    assert float(ag.cross_entropy(Tensor(logits), np.array([0, 1])).data) < 1e-8


def test_loss_matches_naive(rng):
    logits = rng.standard_normal((16, 2)) * 3
    y = rng.integers(0, 2, 16)
    got = float(ag.cross_entropy(Tensor(logits), y).data)
    assert abs(got - oracles.neg_log_softmax(logits, y)) < 1e-12


def test_loss_rejects_bad_inputs():
    with pytest.raises(FloatingPointError):
        ag.cross_entropy(Tensor(np.array([[np.nan, 0.0]])), np.array([0]))
    with pytest.raises(ValueError):
        ag.cross_entropy(Tensor(np.zeros((1, 2))), np.array([2]))


# ---------------------------------------------------------------- gradients


def test_tiny_model_shapes():
    assert tiny_config().stage_shapes()[0] == (4, 6, 10)


def test_gradient_check():
    errors = gradient_check(tiny_config(), seed=1, h=1e-3)
    assert max(errors.values()) <= 1e-4, {k: v for k, v in errors.items() if v > 1e-4}


@pytest.mark.parametrize("kw", [dict(fusion="fixed_equal"), dict(use_ltfa=False), dict(mgaa_placement=("deep",))])
def test_gradient_check_variants(kw):
    errors = gradient_check(tiny_config(**kw), seed=1, h=1e-5)
    assert max(errors.values()) <= 1e-4, {k: v for k, v in errors.items() if v > 1e-4}


@pytest.mark.parametrize("seed", [0, 2])
def test_gradient_check_small_step_other_seeds(seed):
    errors = gradient_check(tiny_config(), seed=seed, h=1e-5, include_input=False)
    assert max(errors.values()) <= 1e-4, {k: v for k, v in errors.items() if v > 1e-4}


def test_eval_dropout_is_identity(rng):
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    y = ag.dropout(x, 0.3, np.random.default_rng(0), training=False)
    np.testing.assert_array_equal(y.data, x.data)
    s = ag.mean(ag.mean(y, 1), 0)
    s.backward()
    np.testing.assert_allclose(x.grad, np.full((3, 5), 1 / 15))


def test_saturated_batch_has_tiny_gradients():
    cfg = tiny_config()
    net = f64_net(cfg)
    net.params["cls.fc3.w"][:] = 0.0
    net.params["cls.fc3.b"][:] = [40.0, -40.0]
    x = np.random.default_rng(0).standard_normal((4, 1, 12, 20))
    p = net.tensors()
    loss = ag.cross_entropy(net.forward(x, p, training=True, rng=np.random.default_rng(0)), np.zeros(4, dtype=int))
    loss.backward()
    assert max(np.abs(t.grad).max() for t in p.values() if t.grad is not None) < 1e-12
