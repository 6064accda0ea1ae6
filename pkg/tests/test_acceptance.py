"""End-to-end acceptance checks.

Criteria 1 to 4 are self-contained numerical checks. Criteria 5 to 10 run the
desk-scale experiments through the harness on one pair of cached twin
networks (Micro-10, synthetic data with 20k train / 4k test samples), and
criterion 11 repeats them from an empty model cache and compares the record
streams byte for byte, ignoring wall-clock fields.
"""

import json
import math
import statistics
import time

import numpy as np
import pytest
import torch

from conftest import central_difference, rel_err
from stitchlab import direct_match as dm
from stitchlab import linalg, nnet, similarity as sim, stitch
from stitchlab.harness import ExperimentConfig, read_records, run_experiment, strip_wall_time
from stitchlab.harness import cache
from stitchlab.nnet import model as nm
from stitchlab.nnet.spec import BatchNorm, Conv, Dense, GlobalAvgPool, Logits, NetworkSpec, ReLU, ResBlock, micro10

pytestmark = pytest.mark.acceptance

MIN = 60.0


def _random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


# 1

@pytest.mark.criterion(1, "similarity index invariances over 100 seeded instances")
def test_criterion_01_index_invariances():
    t0 = time.perf_counter()
    worst = {"cka_orth": 0.0, "cka_scale": 0.0, "rv_orth": 0.0, "rv_scale": 0.0, "cca_lin": 0.0}
    for seed in range(100):
        rng = np.random.default_rng(seed)
        p, q = rng.integers(1, 9, size=2)
        x = rng.normal(size=(64, p))
        y = x[:, rng.integers(0, p, size=q)] @ rng.normal(size=(q, q)) + 0.5 * rng.normal(size=(64, q))
        ox, oy = _random_orthogonal(rng, p), _random_orthogonal(rng, q)
        sx, sy = rng.uniform(0.1, 10), rng.uniform(0.1, 10)
        k, l = linalg.gram(x), linalg.gram(y)
        base_cka = sim.cka(k, l)
        worst["cka_orth"] = max(worst["cka_orth"], abs(sim.cka(linalg.gram(x @ ox), linalg.gram(y @ oy)) - base_cka))
        worst["cka_scale"] = max(worst["cka_scale"], abs(sim.cka(linalg.gram(sx * x), linalg.gram(sy * y)) - base_cka))
        base_rv = sim.rv(x, y)
        worst["rv_orth"] = max(worst["rv_orth"], abs(sim.rv(x @ ox, y @ oy) - base_rv))
        worst["rv_scale"] = max(worst["rv_scale"], abs(sim.rv(sx * x, sy * y) - base_rv))
        tx = rng.normal(size=(p, p)) + 3 * np.eye(p)
        ty = rng.normal(size=(q, q)) + 3 * np.eye(q)
        worst["cca_lin"] = max(worst["cca_lin"], abs(sim.cca_mean(x @ tx, y @ ty) - sim.cca_mean(x, y)))
    elapsed = time.perf_counter() - t0
    print("criterion 1:", worst, f"{elapsed:.1f}s")
    assert max(worst[k] for k in ("cka_orth", "cka_scale", "rv_orth", "rv_scale")) <= 1e-9
    assert worst["cca_lin"] <= 1e-7
    assert elapsed < 1 * MIN


# 2

@pytest.mark.criterion(2, "hand values for rv, ls_match, lasso_match and pseudoinverse")
def test_criterion_02_hand_values():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    y = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]])
    assert abs(sim.rv(x, y) - 1 / math.sqrt(10)) <= 1e-12
    a, b = np.array([[1.0], [2.0], [3.0]]), np.array([[2.0], [4.0], [7.0]])
    assert abs(dm.ls_match(a, b, with_bias=False).m.item() - 31 / 14) <= 1e-12
    a, b = np.array([[1.0], [2.0]]), np.array([[1.0], [2.0]])
    assert abs(dm.lasso_match(a, b, 0.5, with_bias=False).m.item() - 4 / 5) <= 1e-6
    pinv = linalg.pseudoinverse(np.array([[1.0, 2.0], [2.0, 4.0]]))
    assert np.max(np.abs(pinv - np.array([[0.04, 0.08], [0.08, 0.16]]))) <= 1e-12


# 3

def _layer_activations():
    data = nnet.synth_dataset(3, 64)
    a = nnet.flatten(nnet.representation_map(nnet.new_model(micro10(), 1), data, "Layer4"))
    b = nnet.flatten(nnet.representation_map(nnet.new_model(micro10(), 2), data, "Layer4"))
    return a, b


@pytest.mark.criterion(3, "solver optimality on seeded 4096x16 activations")
def test_criterion_03_solver_properties():
    t0 = time.perf_counter()
    a, b = _layer_activations()
    assert a.shape == (4096, 16) and b.shape == (4096, 16)
    ls = dm.ls_match(a, b)
    aug = np.hstack([a, np.ones((len(a), 1))])
    resid = aug @ np.vstack([ls.m, ls.bias]) - b
    ortho = np.linalg.norm(aug.T @ resid) / (np.linalg.norm(aug) * np.linalg.norm(resid))
    assert ortho <= 1e-8
    ls_nb = dm.ls_match(a, b, with_bias=False)
    pro = dm.procrustes_match(a, b)
    assert pro.residual_fro >= ls_nb.residual_fro
    rrr = [dm.rrr_match(a, b, k).residual_fro for k in range(17)]
    assert all(r2 <= r1 * (1 + 1e-12) for r1, r2 in zip(rrr, rrr[1:]))
    assert abs(rrr[16] - ls.residual_fro) <= 1e-9 * ls.residual_fro
    amax = dm.lasso_alpha_max(a, b)
    sparsity = [dm.lasso_match(a, b, amax * f, tol=1e-9).sparsity for f in np.geomspace(1e-4, 1, 12)]
    assert all(s2 >= s1 for s1, s2 in zip(sparsity, sparsity[1:]))
    assert sparsity[-1] == 1.0
    elapsed = time.perf_counter() - t0
    print(f"criterion 3: orthogonality {ortho:.2e}, sparsity path {sparsity}, {elapsed:.1f}s")
    assert elapsed < 2 * MIN


# 4

GRAD_SPECS = {
    "conv": NetworkSpec((Conv(3, stride=2), Logits(3)), (5, 5, 2)),
    "batchnorm": NetworkSpec((Conv(3), BatchNorm(), Logits(3)), (4, 4, 2)),
    "relu": NetworkSpec((Conv(3), ReLU(), Logits(3)), (4, 4, 2)),
    "global_pool": NetworkSpec((Conv(3), GlobalAvgPool(), Logits(3)), (4, 4, 2)),
    "dense": NetworkSpec((Dense(5), Logits(3)), (2, 2, 2)),
    "residual": NetworkSpec((ResBlock(3, stride=2), ResBlock(3), Logits(3)), (4, 4, 2)),
}


def _perturb_bn(model, rng):
    for mod in model.net.modules():
        if isinstance(mod, torch.nn.BatchNorm2d):
            mod.running_mean.copy_(torch.tensor(rng.normal(size=mod.running_mean.shape) * 0.3))
            mod.running_var.copy_(torch.tensor(rng.uniform(0.5, 1.5, size=mod.running_var.shape)))
            mod.weight.copy_(torch.tensor(rng.uniform(0.5, 1.5, size=mod.weight.shape)))


@pytest.mark.criterion(4, "gradients of every layer type and the stitcher match finite differences")
def test_criterion_04_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for name, spec in GRAD_SPECS.items():
        model = nnet.new_model(spec, 1).to_float64()
        _perturb_bn(model, rng)
        x = rng.normal(size=(5, *spec.input_shape))
        soft = nnet.softmax(rng.normal(size=(5, 3)))
        grads = nnet.backward(model, x, soft, "CrossEntropySoft")
        xt, st = nm.to_torch(x, torch.float64), torch.tensor(soft)
        loss = lambda: nm.loss_value(model.logits(xt), st, "CrossEntropySoft")
        for pname, p in model.net.named_parameters():
            flat = p.view(-1)
            for idx in rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False):
                err = rel_err(central_difference(loss, flat, int(idx)), grads[pname].reshape(-1)[idx])
                worst = max(worst, err)
                assert err < 1e-4, (name, pname, idx)

    twins = [nnet.new_model(micro10(input_shape=(8, 8, 1)), s).to_float64() for s in (3, 4)]
    for m in twins:
        _perturb_bn(m, rng)
    data = nnet.Dataset(rng.normal(size=(6, 8, 8, 1)).astype(np.float32), rng.integers(0, 10, 6), "Test", 0, 10)
    f = stitch.frankenstein(*twins, "Layer4")
    split = stitch.prepare_split(f, data)
    for label, cfg in (("soft_ce", stitch.StitchTrainConfig()),
                       ("cka_penalty", stitch.StitchTrainConfig(cka_penalty_weight=0.1)),
                       ("l1", stitch.StitchTrainConfig(l1_weight=0.05))):
        w = torch.tensor(np.eye(16) + 0.2 * rng.normal(size=(16, 16)), requires_grad=True)
        b = torch.tensor(0.1 * rng.normal(size=16), requires_grad=True)
        obj = lambda: stitch.stitch_objective(f.model2, f.layer_m, w, b, split.source, split.target_probs, cfg,
                                              split.target_acts)
        gw, gb = torch.autograd.grad(obj(), [w, b])
        for p, g in ((w, gw), (b, gb)):
            flat = p.detach().view(-1)
            for idx in rng.choice(flat.numel(), size=8, replace=False):
                err = rel_err(central_difference(obj, flat, int(idx)), g.reshape(-1)[idx].item())
                worst = max(worst, err)
                assert err < 1e-4, (label, idx)
    elapsed = time.perf_counter() - t0
    print(f"criterion 4: worst relative error {worst:.2e}, {elapsed:.1f}s")
    assert elapsed < 2 * MIN


# 5 to 11: desk-scale experiments on cached twins

BASE = {
    "model": "micro10",
    "model_seeds": [1, 2],
    "data": {"seed": 0, "n_train": 20_000, "n_test": 4_000},
    "train": {"epochs": 30},
}
EXPERIMENT_CONFIGS = {
    5: {"experiment": "Exp1_Match", "seeds": [0, 1], "stitch": {"epochs": 6}},
    6: {"experiment": "Exp4_CkaPenalty", "layers": ["Layer8"], "seeds": [0], "params": {"cka_weight": 0.1}},
    7: {"experiment": "Exp8_LowRank", "layers": ["Layer4"], "seeds": [0], "params": {"ks": [2, 4, 8]},
        "stitch": {"epochs": 5}},
    8: {"experiment": "Exp7_Sparsity", "layers": ["Layer4", "Layer7"], "seeds": [0], "stitch": {"epochs": 5}},
    9: {"experiment": "Exp5_InitSensitivity", "layers": ["Layer4"], "seeds": [0],
        "params": {"ls_seeds": list(range(10)), "random_seeds": list(range(10))}, "stitch": {"epochs": 5}},
    10: {"experiment": "Exp6_ModeConnect", "layers": ["Layer4", "Layer7"], "seeds": [0],
         "params": {"pair_inits": ["LeastSquares", "Random"]}, "stitch": {"epochs": 5}},
}
CAPS = {5: 30 * MIN, 6: 10 * MIN, 7: 20 * MIN, 8: 20 * MIN, 9: 25 * MIN, 10: 15 * MIN}


class Runs:
    """Runs each experiment on first use; all share one model cache."""

    def __init__(self, root):
        self.root = root
        self.results = {}
        self.twin_seconds = None

    def config(self, criterion, tag="a"):
        d = {**BASE, **EXPERIMENT_CONFIGS[criterion], "output_dir": str(self.root / tag / "runs")}
        return ExperimentConfig.from_dict(json.loads(json.dumps(d)))

    def run(self, criterion, tag="a"):
        with pytest.MonkeyPatch.context() as mp:
            mp.setenv("STITCHLAB_CACHE", str(self.root / tag / "cache"))
            cfg = self.config(criterion, tag)
            t0 = time.perf_counter()
            twins = cache.get_twins(cfg)
            twin_seconds = time.perf_counter() - t0
            t0 = time.perf_counter()
            paths = run_experiment(cfg)
            seconds = time.perf_counter() - t0
        return {"paths": paths, "records": read_records(paths["records"]), "seconds": seconds,
                "twin_seconds": twin_seconds, "twins": twins,
                "errors": paths["errors"].read_text()}

    def get(self, criterion):
        if criterion not in self.results:
            self.results[criterion] = self.run(criterion)
        return self.results[criterion]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


def _by(records, method, **hp):
    return [r for r in records if r.method == method and all(r.hyperparameters.get(k) == v for k, v in hp.items())]


@pytest.mark.criterion(5, "twins reach 90% and task-loss stitching reaches 85% relative accuracy at every tap")
def test_criterion_05_matchability(runs):
    res = runs.get(5)
    assert res["errors"] == ""
    m1, m2, _, test = res["twins"]
    accs = [nnet.accuracy(m, test) for m in (m1, m2)]
    recs = res["records"]
    taps = nnet.default_taps(m1.spec)
    rows = []
    for tap in taps:
        task = [r.rel_acc for r in recs if r.layer == tap and r.method == "task_loss"]
        ls = [r.rel_acc for r in recs if r.layer == tap and r.method == "least_squares"]
        rows.append((tap, min(task), float(np.mean(task)), ls[0]))
    print("criterion 5: twin test accuracy", accs)
    for row in rows:
        print("  %s task min %.4f mean %.4f | least squares %.4f" % row)
    runtime = res["seconds"] + res["twin_seconds"]
    print(f"  runtime {runtime:.0f}s")
    assert min(accs) >= 0.90
    assert all(task_min >= 0.85 for _, task_min, _, _ in rows)
    assert any(task_mean > ls for _, _, task_mean, ls in rows)
    assert runtime < CAPS[5]


@pytest.mark.criterion(6, "CKA penalty: self-stitch CKA <= 0.8 at relative accuracy >= 0.98")
def test_criterion_06_cka_penalty(runs):
    res = runs.get(6)
    assert res["errors"] == ""
    best = _by(res["records"], "cka_penalty_best")
    curve = _by(res["records"], "cka_penalty")
    print("criterion 6:", [(r.hyperparameters["epoch"], round(r.similarity["cka"], 4), round(r.rel_acc, 4)) for r in curve],
          f"{res['seconds']:.0f}s")
    assert curve[0].similarity["cka"] == pytest.approx(1.0, abs=1e-9) and curve[0].rel_acc == 1.0
    assert len(best) == 1
    assert best[0].similarity["cka"] <= 0.8 and best[0].rel_acc >= 0.98
    assert res["seconds"] < CAPS[6]


@pytest.mark.criterion(7, "bottleneck task-loss stitching is at least as good as reduced-rank regression")
def test_criterion_07_low_rank(runs):
    res = runs.get(7)
    assert res["errors"] == ""
    recs = res["records"]
    gaps = {}
    for k in (2, 4, 8):
        task = _by(recs, "task_bottleneck", k=k)[0]
        rrr = _by(recs, "rrr", k=k)[0]
        assert task.extra["rank"] <= k and rrr.extra["rank"] <= k
        gaps[k] = (task.rel_acc, rrr.rel_acc)
    print("criterion 7:", gaps, f"{res['seconds']:.0f}s")
    assert all(t >= r - 0.01 for t, r in gaps.values())
    assert any(t > r for t, r in gaps.values())
    assert res["seconds"] < CAPS[7]


@pytest.mark.criterion(8, "at 80% sparsity task-loss L1 beats direct Lasso by 5 points on some tap")
def test_criterion_08_sparsity(runs):
    res = runs.get(8)
    assert res["errors"] == ""
    recs = res["records"]
    gaps = {}
    for tap in ("Layer4", "Layer7"):
        picks = {}
        for method in ("lasso", "task_l1"):
            path = sorted((r for r in recs if r.layer == tap and r.method == method),
                          key=lambda r: r.hyperparameters["alpha"])
            print(f"criterion 8: {tap} {method}",
                  [(r.hyperparameters["alpha"], round(r.extra["sparsity"], 3), round(r.rel_acc, 3)) for r in path])
            if method == "lasso":
                sp = [r.extra["sparsity"] for r in path]
                assert all(b >= a for a, b in zip(sp, sp[1:]))
            dense_enough = [r for r in path if r.extra["sparsity"] >= 0.8]
            picks[method] = dense_enough[0] if dense_enough else None
        if picks["lasso"] and picks["task_l1"]:
            gaps[tap] = picks["task_l1"].rel_acc - picks["lasso"].rel_acc
    print("criterion 8: gap in relative accuracy", gaps, f"{res['seconds']:.0f}s")
    assert gaps and max(gaps.values()) >= 0.05
    assert res["seconds"] < CAPS[8]


@pytest.mark.criterion(9, "worst least-squares init beats the median random init")
def test_criterion_09_init_sensitivity(runs):
    res = runs.get(9)
    assert res["errors"] == ""
    ls = [r.rel_acc for r in _by(res["records"], "ls_init")]
    rnd = [r.rel_acc for r in _by(res["records"], "random_init")]
    print(f"criterion 9: LS min {min(ls):.4f} random median {statistics.median(rnd):.4f}", f"{res['seconds']:.0f}s")
    assert len(ls) == 10 and len(rnd) == 10
    assert min(ls) >= statistics.median(rnd)
    assert res["seconds"] < CAPS[9]


@pytest.mark.criterion(10, "mode connectivity: endpoints reproduce stored accuracies, filter rule, late-tap curve")
def test_criterion_10_mode_connectivity(runs):
    res = runs.get(10)
    assert res["errors"] == ""
    recs = res["records"]
    admitted = 0
    for tap in ("Layer4", "Layer7"):
        for init in ("LeastSquares", "Random"):
            ends = {r.hyperparameters["which"]: r.rel_acc for r in _by(recs, "endpoint", init=init) if r.layer == tap}
            curve = sorted((r for r in _by(recs, "interpolation", init=init) if r.layer == tap),
                           key=lambda r: r.extra["lambda"])
            skipped = [r for r in _by(recs, "skipped", init=init) if r.layer == tap]
            print(f"criterion 10: {tap} {init} endpoints {ends}",
                  "skipped: " + skipped[0].note if skipped else [round(r.rel_acc, 4) for r in curve])
            if min(ends.values()) >= 0.8:
                assert not skipped and len(curve) == 11
                assert abs(curve[0].rel_acc - ends["m2"]) <= 0.005
                assert abs(curve[-1].rel_acc - ends["m1"]) <= 0.005
                admitted += tap == "Layer7"
            else:
                assert len(skipped) == 1 and not curve
    assert admitted >= 1
    assert res["seconds"] < CAPS[10]


@pytest.mark.criterion(11, "re-running criteria 5 to 10 from an empty cache gives identical record streams")
def test_criterion_11_determinism(runs):
    for criterion in range(5, 11):
        first = runs.get(criterion)["paths"]["records"].read_text()
        again = runs.run(criterion, tag="b")["paths"]["records"].read_text()
        assert strip_wall_time(first) == strip_wall_time(again), f"criterion {criterion} streams differ"
        assert first.count("\n") == again.count("\n") > 0
