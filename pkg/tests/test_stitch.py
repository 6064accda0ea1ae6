import numpy as np
import pytest
import torch
from dataclasses import replace

from conftest import central_difference, rel_err
from stitchlab import direct_match, nnet, stitch
from stitchlab.errors import (BottleneckNotSupported, ConfigError, NonDivisibleShapes, ShapeMismatch,
                              ZeroDenominator)
from stitchlab.nnet.spec import micro10, microres
from stitchlab.stitch import StitchingLayer, StitchTrainConfig


@pytest.fixture(scope="module")
def data():
    return nnet.synth_splits(11, 1200, 400)


@pytest.fixture(scope="module")
def twins(data):
    cfg = nnet.TrainConfig(epochs=3)
    return (nnet.train(micro10(), data[0], replace(cfg, seed=1)),
            nnet.train(micro10(), data[0], replace(cfg, seed=2)))


def _self(model, layer="Layer4", s=None):
    return stitch.frankenstein(model, model, layer, stitcher=s)


# forward

def test_identity_self_stitch_reproduces_model(twins, data):
    m = twins[0]
    for layer in ("Layer1", "Layer4", "Layer8"):
        c = m.activation_shape(layer)[2]
        f = _self(m, layer, StitchingLayer.full(np.eye(c)))
        np.testing.assert_allclose(stitch.stitched_forward(f, data[1]), nnet.forward(m, data[1]), atol=1e-6)


def test_zero_stitcher_gives_constant_output(twins, data):
    f = stitch.frankenstein(*twins, "Layer5", stitcher=StitchingLayer.full(np.zeros((16, 16)), np.full(16, 0.3)))
    out = stitch.stitched_forward(f, data[1].inputs[:50])
    assert np.all(out == out[0])


def test_ls_stitcher_matches_manual_composition(twins, data):
    m1, m2 = twins
    layer = "Layer3"
    a = nnet.representation_map(m1, data[0], layer)
    b = nnet.representation_map(m2, data[0], layer)
    sol = direct_match.ls_match(nnet.flatten(a), nnet.flatten(b))
    f = stitch.frankenstein(m1, m2, layer, stitcher=StitchingLayer.full(sol.m, sol.bias))
    test_a = nnet.representation_map(m1, data[1], layer)
    n, w, h, _ = test_a.data.shape
    oracle = nnet.task_map(m2, nnet.unflatten(sol.apply(nnet.flatten(test_a)), n, w, h), layer)
    np.testing.assert_allclose(stitch.stitched_forward(f, data[1]), oracle, atol=1e-5)


def test_stitched_forward_is_batch_invariant(twins, data):
    rng = np.random.default_rng(0)
    s = StitchingLayer.full(rng.normal(size=(16, 16)) * 0.3, rng.normal(size=16) * 0.1)
    f = stitch.frankenstein(*twins, "Layer4", stitcher=s)
    x = data[1].inputs[:60]
    full = stitch.stitched_forward(f, x)
    parts = np.concatenate([stitch.stitched_forward(f, x[i:i + 7]) for i in range(0, 60, 7)])
    np.testing.assert_allclose(parts, full, atol=1e-6)
    perm = rng.permutation(60)
    np.testing.assert_allclose(stitch.stitched_forward(f, x[perm]), full[perm], atol=1e-6)


def test_shape_checks(twins):
    m1, m2 = twins
    with pytest.raises(ShapeMismatch):
        stitch.frankenstein(m1, m2, "Layer4", stitcher=StitchingLayer.full(np.eye(8)))
    with pytest.raises(ShapeMismatch):
        stitch.frankenstein(m1, m2, "Layer6", "Layer1")  # would need upsampling
    f = stitch.frankenstein(m1, m2, "Layer1", "Layer6")
    assert f.adapter == (4, 4)


# init

def test_init_modes(twins, data):
    m1, m2 = twins
    s = stitch.init_stitcher("Identity", m1, m2, "Layer4", data[0])
    assert np.array_equal(s.m, np.eye(16)) and not s.bias.any()
    with pytest.raises(ConfigError):
        stitch.init_stitcher("Identity", m1, m2, "Layer2", data[0], layer_m="Layer3")
    r1 = stitch.init_stitcher("Random(0.01)", m1, m2, "Layer4", data[0], seed=1)
    r2 = stitch.init_stitcher("Random(0.01)", m1, m2, "Layer4", data[0], seed=2)
    assert not np.array_equal(r1.m, r2.m)
    assert np.array_equal(r1.m, stitch.init_stitcher("Random(0.01)", m1, m2, "Layer4", data[0], seed=1).m)
    assert abs(r1.m.std() - 0.01) < 0.003
    default = stitch.init_stitcher("Random", m1, m2, "Layer4", data[0], seed=3)
    assert abs(default.m.std() - 0.25) < 0.06
    with pytest.raises(nnet.model.UnknownLayer):
        stitch.init_stitcher("Random", m1, m2, "nope", data[0])


def test_least_squares_init_reproduces_ls_match(twins, data):
    m1, m2 = twins
    s = stitch.init_stitcher("LeastSquares", m1, m2, "Layer5", data[0])
    a = nnet.flatten(nnet.representation_map(m1, data[0], "Layer5"))
    b = nnet.flatten(nnet.representation_map(m2, data[0], "Layer5"))
    sol = direct_match.ls_match(a, b, with_bias=True)
    assert np.array_equal(s.m, sol.m) and np.array_equal(s.bias, sol.bias)


def test_least_squares_self_stitch_is_exact(twins, data):
    m = twins[0]
    s = stitch.init_stitcher("LeastSquares", m, m, "Layer6", data[0])
    np.testing.assert_allclose(s.m, np.eye(32), atol=1e-6)
    assert stitch.relative_accuracy(_self(m, "Layer6", s), data[1]) == 1.0


def test_bottleneck_init_is_rrr_point(twins, data):
    m1, m2 = twins
    s = stitch.init_stitcher("LeastSquares", m1, m2, "Layer5", data[0], form="bottleneck", k=4)
    a = nnet.flatten(nnet.representation_map(m1, data[0], "Layer5"))
    b = nnet.flatten(nnet.representation_map(m2, data[0], "Layer5"))
    sol = direct_match.rrr_match(a, b, 4)
    np.testing.assert_allclose(s.matrix, sol.m, atol=1e-8)
    np.testing.assert_allclose(s.bias, sol.bias, atol=1e-8)
    assert s.p.shape == (16, 4) and s.q.shape == (4, 16)


# training

def test_lr_zero_identity_trace_is_constant(twins, data):
    m = twins[0]
    cfg = StitchTrainConfig(init="Identity", lr=0.0, epochs=2, metrics=("cka",))
    s, trace = stitch.train_stitcher(_self(m), cfg, data[0], data[1])
    assert [r["rel_acc"] for r in trace] == [1.0] * 3
    assert len({r["task_loss"] for r in trace}) == 1
    assert trace[0]["cka"] == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(s.m, np.eye(16))


def test_training_freezes_hosts_and_improves(twins, data, tmp_path):
    m1, m2 = twins
    before = [{k: v.clone() for k, v in m.net.state_dict().items()} for m in twins]
    f = stitch.frankenstein(m1, m2, "Layer4")
    cfg = StitchTrainConfig(epochs=3, metrics=("cka", "r2lr", "cca", "svcca"))
    s, trace = stitch.train_stitcher(f, cfg, data[0], data[1], trace_path=tmp_path / "trace.jsonl")
    for m, ref in zip(twins, before):
        for k, v in m.net.state_dict().items():
            assert torch.equal(v, ref[k]), k
    best = s.meta["best_epoch"]
    assert trace[best]["task_loss"] <= trace[0]["task_loss"]
    assert trace[-1]["task_loss"] <= trace[0]["task_loss"]
    lines = (tmp_path / "trace.jsonl").read_text().splitlines()
    import json
    first = json.loads(lines[0])
    assert list(first) == ["epoch", "task_loss", "rel_acc", "cka", "r2lr", "cca", "svcca", "sparsity"]
    assert len(lines) == 4
    for r in trace:
        assert 0 <= r["cka"] <= 1 + 1e-9 and 0 <= r["cca"] <= 1 + 1e-9


def test_training_is_deterministic(twins, data):
    f = stitch.frankenstein(*twins, "Layer7")
    cfg = StitchTrainConfig(epochs=2, init="Random", seed=5)
    s1, t1 = stitch.train_stitcher(f, cfg, data[0], data[1])
    s2, t2 = stitch.train_stitcher(f, cfg, data[0], data[1])
    assert t1 == t2 and np.array_equal(s1.m, s2.m)


def test_bottleneck_rank_and_full_agreement(twins, data):
    f = stitch.frankenstein(*twins, "Layer4")
    tr, va = stitch.prepare_split(f, data[0]), stitch.prepare_split(f, data[1])
    cfg = StitchTrainConfig(epochs=2, form="bottleneck", k=3)
    s, trace = stitch.train_stitcher(f, cfg, tr, va)
    assert all(r["rank"] <= 3 for r in trace)
    init = stitch.init_stitcher("LeastSquares", *twins, "Layer4", tr)
    full_cfg = StitchTrainConfig(epochs=2, lr=1e-4)
    _, t_full = stitch.train_stitcher(f, full_cfg, tr, va, init=init)
    fac = StitchingLayer.bottleneck(init.m, np.eye(16), init.bias)
    _, t_fac = stitch.train_stitcher(f, replace(full_cfg, form="bottleneck", k=16), tr, va, init=fac)
    for a, b in zip(t_full, t_fac):
        assert abs(a["task_loss"] - b["task_loss"]) <= 0.02 * a["task_loss"]


def _float64_setup(twins, data, layer="Layer5", n=8):
    m1, m2 = (m.to_float64() for m in twins)
    f = stitch.frankenstein(m1, m2, layer)
    split = stitch.prepare_split(f, data[1].subset(n))
    return f, split


@pytest.mark.parametrize("penalty", ["soft", "hard", "cka", "l1", "bottleneck"])
def test_stitcher_gradients_match_finite_differences(twins, data, penalty):
    f, split = _float64_setup(twins, data)
    rng = np.random.default_rng(1)
    cfg = {"soft": StitchTrainConfig(), "hard": StitchTrainConfig(loss="HardCE"),
           "cka": StitchTrainConfig(cka_penalty_weight=0.1), "l1": StitchTrainConfig(l1_weight=0.01),
           "bottleneck": StitchTrainConfig(form="bottleneck", k=4)}[penalty]
    targets = split.labels if cfg.loss == "HardCE" else split.target_probs
    if penalty == "bottleneck":
        params = [torch.tensor(rng.normal(size=(16, 4)) * 0.5), torch.tensor(rng.normal(size=(4, 16)) * 0.5),
                  torch.tensor(rng.normal(size=16) * 0.1)]
        weight = lambda: params[0] @ params[1]
    else:
        params = [torch.tensor(np.eye(16) + rng.normal(size=(16, 16)) * 0.2), torch.tensor(rng.normal(size=16) * 0.1)]
        weight = lambda: params[0]

    def loss():
        return stitch.stitch_objective(f.model2, f.layer_m, weight(), params[-1], split.source, targets, cfg,
                                       split.target_acts)

    for p in params:
        p.requires_grad_(True)
    grads = torch.autograd.grad(loss(), params)
    for p, g in zip(params, grads):
        flat = p.detach().view(-1)
        for idx in rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False):
            num = central_difference(loss, flat, int(idx))
            assert rel_err(num, g.reshape(-1)[idx].item()) < 1e-4


def test_torch_rv_matches_numpy():
    from stitchlab import similarity
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(40, 5)), rng.normal(size=(40, 3))
    assert stitch.torch_rv(torch.tensor(x), torch.tensor(y)).item() == pytest.approx(similarity.rv(x, y), abs=1e-12)


def test_cka_penalty_variants(twins, data):
    m = twins[0]
    f = _self(m, "Layer7")
    cfg = StitchTrainConfig(init="Identity", epochs=1, lr=1e-3)
    s0, t0 = stitch.train_stitcher_cka_penalty(f, cfg, data[0], data[1])
    s1, t1 = stitch.train_stitcher(f, cfg, data[0], data[1])
    assert t0 == t1
    s, trace = stitch.train_stitcher_cka_penalty(f, replace(cfg, cka_penalty_weight=0.1, epochs=2), data[0], data[1])
    assert trace[0]["cka"] == pytest.approx(1.0) and trace[0]["rel_acc"] == 1.0
    assert trace[-1]["cka"] < trace[0]["cka"]
    with pytest.raises(ConfigError):
        stitch.train_stitcher_cka_penalty(stitch.frankenstein(*twins, "Layer7"), replace(cfg, cka_penalty_weight=0.1),
                                          data[0], data[1])


def test_l1_training_produces_sparsity(twins, data):
    f = stitch.frankenstein(*twins, "Layer6")
    cfg = StitchTrainConfig(epochs=2, l1_weight=1e-3, lr=1e-3)
    s, trace = stitch.train_stitcher(f, cfg, data[0], data[1])
    assert trace[-1]["sparsity"] > trace[0]["sparsity"]


def test_config_validation():
    with pytest.raises(ConfigError):
        StitchTrainConfig(loss="MSE")
    with pytest.raises(ConfigError):
        StitchTrainConfig(init="Orthogonal")
    with pytest.raises(ConfigError):
        StitchTrainConfig(l1_weight=-1)
    assert StitchTrainConfig(lr=1.0, epochs=4, lr_milestones=(0.5,)).lr_at(2) == pytest.approx(0.1)


# structural analyses

def test_sparsify_examples():
    s, sp = stitch.sparsify(StitchingLayer.full(np.full((2, 3), 0.5)))
    assert sp == 0 and np.all(s.m == 0.5)
    assert stitch.sparsify(StitchingLayer.full(np.zeros((3, 3))))[1] == 1.0
    m = np.array([[1e-5, 2.0], [1e-5, -3.0]])
    s, sp = stitch.sparsify(StitchingLayer.full(m))
    assert sp == 0.5 and s.m[0, 0] == 0 and s.m[1, 1] == -3.0
    with pytest.raises(BottleneckNotSupported):
        stitch.sparsify(StitchingLayer.bottleneck(np.ones((3, 1)), np.ones((1, 3))))


def test_interpolate_examples():
    rng = np.random.default_rng(0)
    a = StitchingLayer.full(rng.normal(size=(3, 4)), rng.normal(size=4))
    b = StitchingLayer.full(rng.normal(size=(3, 4)), rng.normal(size=4))
    assert np.array_equal(stitch.interpolate(a, b, 0).m, b.m) and np.array_equal(stitch.interpolate(a, b, 1).m, a.m)
    neg = StitchingLayer.full(-a.m, -a.bias)
    mid = stitch.interpolate(a, neg, 0.5)
    assert not mid.m.any() and not mid.bias.any()
    np.testing.assert_allclose(stitch.interpolate(a, b, 0.3).m, 0.3 * a.m + 0.7 * b.m)
    with pytest.raises(ShapeMismatch):
        stitch.interpolate(a, StitchingLayer.full(np.ones((3, 3))), 0.5)


def test_mode_connectivity(twins, data):
    f = _self(twins[0], "Layer6")
    split = stitch.prepare_split(f, data[1], target_acts=False)
    s = stitch.init_stitcher("LeastSquares", twins[0], twins[0], "Layer6", data[0])
    s_ra = stitch.relative_accuracy(f.with_stitcher(s), split)
    assert s_ra >= 0.8
    grid = np.linspace(0, 1, 11)
    bad = StitchingLayer.full(np.zeros((32, 32)))
    records = stitch.mode_connectivity_sweep([(s, s.copy(), "same"), (s, bad, "bad")], grid, f, split)
    flat = [r for r in records if r["pair"] == "same"]
    assert len(flat) == 11 and len({r["rel_acc"] for r in flat}) == 1
    assert abs(flat[0]["rel_acc"] - s_ra) <= 0.005
    skipped = [r for r in records if r["pair"] == "bad"]
    assert len(skipped) == 1 and skipped[0]["skipped"] and "below" in skipped[0]["reason"]


def test_pool_adapter():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 3, 2)).astype(np.float32)
    assert np.array_equal(stitch.pool_adapter(x, 3, 3).data, x)
    blocks = np.kron(np.arange(4.0).reshape(2, 2), np.ones((2, 2)))[None, :, :, None]
    assert np.array_equal(stitch.pool_adapter(blocks, 2, 2).data[0, :, :, 0], np.arange(4.0).reshape(2, 2))
    y = rng.normal(size=(3, 4, 4, 5))
    got = stitch.pool_adapter(y, 2, 2).data
    for n in range(3):
        for i in range(2):
            for j in range(2):
                for c in range(5):
                    assert got[n, i, j, c] == max(y[n, 2 * i + di, 2 * j + dj, c] for di in range(2) for dj in range(2))
    with pytest.raises(NonDivisibleShapes):
        stitch.pool_adapter(y, 3, 3)


def test_adapter_matches_torch_path(twins, data):
    m1, m2 = twins
    f = stitch.frankenstein(m1, m2, "Layer2", "Layer7")
    a = nnet.representation_map(m1, data[1].inputs[:10], "Layer2")
    pooled = stitch.pool_adapter(a, 4, 4)
    np.testing.assert_allclose(stitch.source_activations(f, data[1].inputs[:10]).data, pooled.data)


def test_cross_layer_grid_shape(data):
    spec = microres()
    m1, m2 = nnet.new_model(spec, 1), nnet.new_model(spec, 2)
    taps = ["Layer1.0", "Layer2.0", "Layer2.1", "Layer3.0"]
    cfg = StitchTrainConfig(epochs=0)
    records = stitch.cross_layer_grid(m1, m2, cfg, data[0].subset(200), data[1], taps)
    cells = {(r["layer_l"], r["layer_m"]) for r in records}
    spatial = {t: m1.activation_shape(t)[:2] for t in taps}
    expected = {(i, j) for i in taps for j in taps if spatial[i][0] >= spatial[j][0]}
    assert cells == expected
    assert ("Layer3.0", "Layer1.0") not in cells
    assert len(cells) == 4 + 3 + 3 + 1 + 1 - 1 or len(cells) == len(expected)
    diag = [r for r in records if r["layer_l"] == r["layer_m"] == "Layer2.0"][0]
    f = stitch.frankenstein(m1, m2, "Layer2.0")
    s, _ = stitch.train_stitcher(f, cfg, data[0].subset(200), data[1])
    assert diag["rel_acc"] == stitch.relative_accuracy(f.with_stitcher(s), data[1])


def test_relative_accuracy(twins, data):
    m = twins[0]
    c = m.activation_shape("Layer8")[2]
    assert stitch.relative_accuracy(_self(m, "Layer8", StitchingLayer.full(np.eye(c))), data[1]) == 1.0
    f = _self(m, "Layer8", StitchingLayer.full(np.zeros((c, c))))
    split = stitch.prepare_split(f, data[1], target_acts=False)
    probs = stitch.stitched_forward(f, data[1])
    assert np.all(probs.argmax(1) == probs[0].argmax())
    # balanced test split: a constant prediction is right 1/classes of the time
    assert stitch.relative_accuracy(f, split) == pytest.approx(0.1 / split.model2_accuracy)
    wrong = stitch.StitchSplit(split.source, split.target_probs, (split.target_probs.argmax(1) + 1) % 10)
    with pytest.raises(ZeroDenominator):
        stitch.relative_accuracy(f, wrong)
    # two-pass oracle
    g = stitch.frankenstein(*twins, "Layer5", stitcher=stitch.init_stitcher("LeastSquares", *twins, "Layer5", data[0]))
    acc_f = nnet.accuracy_of(stitch.stitched_forward(g, data[1]), data[1].labels)
    acc_2 = nnet.accuracy(twins[1], data[1])
    assert stitch.relative_accuracy(g, data[1]) == pytest.approx(acc_f / acc_2, abs=1e-12)


def test_stitcher_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    full = StitchingLayer.full(rng.normal(size=(4, 3)), rng.normal(size=3))
    stitch.save_stitcher(tmp_path / "full", full)
    back = stitch.load_stitcher(tmp_path / "full")
    assert back.form == "full" and np.array_equal(back.m, full.m) and np.array_equal(back.bias, full.bias)
    bn = StitchingLayer.bottleneck(rng.normal(size=(4, 2)), rng.normal(size=(2, 3)), rng.normal(size=3))
    stitch.save_stitcher(tmp_path / "bn", bn)
    import json
    meta = json.loads((tmp_path / "bn.json").read_text())
    assert meta["form"] == "bottleneck" and meta["k"] == 2 and meta["class"] == "RankK"
    back = stitch.load_stitcher(tmp_path / "bn")
    assert np.array_equal(back.p, bn.p) and np.array_equal(back.q, bn.q)
