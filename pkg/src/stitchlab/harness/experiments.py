"""Desk-scale experiment runners.

Each runner walks its (layer, seed, method) cells in a fixed order and writes
one :class:`MetricRecord` per result. A cell that raises is logged to
``errors.jsonl`` and the experiment moves on.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import direct_match, stitch
from ..errors import NotConverged, StitchLabError
from ..nnet.model import Model, from_torch
from ..nnet.spec import default_taps
from ..stitch import StitchingLayer, StitchSplit
from .cache import get_twins
from .config import ExperimentConfig
from .records import MetricRecord, RecordWriter
from .report import baseline_no_transform, emit_plot_data, format_table, summarize

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = [0.0] + [10.0**e for e in range(-4, 5)]
SIM_METRICS = ("cka", "r2lr", "cca", "svcca")


@dataclass
class Context:
    cfg: ExperimentConfig
    model1: Model
    model2: Model
    train: object
    test: object
    writer: RecordWriter
    errors: list

    @property
    def layers(self) -> list[str]:
        return list(self.cfg.layers) if self.cfg.layers else default_taps(self.model1.spec)

    def param(self, key, default):
        return self.cfg.params.get(key, default)

    def splits(self, f: stitch.FrankensteinNetwork, metrics: bool = False) -> tuple[StitchSplit, StitchSplit]:
        limit = self.param("train_limit", None)
        train = self.train if limit is None else self.train.subset(limit)
        return stitch.prepare_split(f, train), stitch.prepare_split(f, self.test, target_acts=metrics)

    def emit(self, layer, seed, method, hp, ev: dict, t0: float, similarity=None, extra=None, note=""):
        rec = MetricRecord(self.cfg.experiment, layer, int(seed), method, dict(hp), float(ev["rel_acc"]),
                           float(ev["cross_entropy"]), dict(similarity or {}), dict(extra or {}), note,
                           time.perf_counter() - t0)
        self.writer.write(rec)
        return rec

    def cell(self, label: str, fn) -> None:
        try:
            fn()
        except StitchLabError as exc:
            log.warning("cell %s failed: %s", label, exc)
            self.errors.append({"cell": label, "error": type(exc).__name__, "message": str(exc)})


def _sims(rec: dict) -> dict:
    return {k: rec[k] for k in SIM_METRICS if k in rec}


def _trained_cell(ctx: Context, f, tr, te, layer, seed, method, hp, **overrides):
    t0 = time.perf_counter()
    cfg = ctx.cfg.stitch_config(**{"seed": seed, **overrides})
    s, trace = stitch.train_stitcher(f, cfg, tr, te)
    best = trace[s.meta["best_epoch"]]
    extra = {"best_epoch": s.meta["best_epoch"], "init_rel_acc": trace[0]["rel_acc"],
             "final_rel_acc": trace[-1]["rel_acc"]}
    ctx.emit(layer, seed, method, hp, {"rel_acc": best["rel_acc"], "cross_entropy": best["task_loss"]}, t0,
             _sims(best), extra)
    return s, trace


# Experiment 1: task-loss vs least-squares matching at every tap

def exp1_match(ctx: Context, model1=None, model2=None, hp=None) -> None:
    m1, m2 = model1 or ctx.model1, model2 or ctx.model2
    hp = hp or {}
    for layer in ctx.layers:
        f = stitch.frankenstein(m1, m2, layer)
        tr, te = ctx.splits(f)

        def direct():
            t0 = time.perf_counter()
            s = stitch.init_stitcher("LeastSquares", m1, m2, layer, tr)
            ctx.emit(layer, ctx.cfg.seeds[0], "least_squares", hp, stitch.evaluate(f.with_stitcher(s), te), t0)

        def baseline():
            t0 = time.perf_counter()
            rec = baseline_no_transform(m1, m2, layer, te, ctx.cfg.experiment, ctx.cfg.seeds[0])
            ctx.emit(layer, rec.seed, rec.method, hp, {"rel_acc": rec.rel_acc, "cross_entropy": rec.cross_entropy}, t0)

        ctx.cell(f"{layer}/least_squares", direct)
        ctx.cell(f"{layer}/no_transform", baseline)
        for seed in ctx.cfg.seeds:
            ctx.cell(f"{layer}/task/{seed}",
                     lambda: _trained_cell(ctx, f, tr, te, layer, seed, "task_loss", hp, init="LeastSquares"))


def exp2_width(ctx: Context) -> None:
    for width in ctx.param("widths", [1, 2]):
        m1, m2, _, _ = get_twins(ctx.cfg, width_multiplier=width)
        exp1_match(ctx, m1, m2, {"width": width})


def exp3_indices(ctx: Context) -> None:
    for layer in ctx.layers:
        f = stitch.frankenstein(ctx.model1, ctx.model2, layer)
        tr, te = ctx.splits(f, metrics=True)
        for seed in ctx.cfg.seeds:
            def run():
                t0 = time.perf_counter()
                cfg = ctx.cfg.stitch_config(seed=seed, metrics=SIM_METRICS)
                s, trace = stitch.train_stitcher(f, cfg, tr, te)
                for rec in trace:
                    ctx.emit(layer, seed, "task_loss", {"epoch": rec["epoch"]},
                             {"rel_acc": rec["rel_acc"], "cross_entropy": rec["task_loss"]}, t0, _sims(rec),
                             {"sparsity": rec["sparsity"]})
            ctx.cell(f"{layer}/{seed}", run)


def exp4_cka_penalty(ctx: Context) -> None:
    weight = ctx.param("cka_weight", 0.1)
    base = {"init": "Identity", "epochs": 2, "lr": 1e-3, "lr_milestones": [0.5], "cka_penalty_weight": weight}
    base.update(ctx.cfg.stitch)
    for layer in ctx.layers:
        f = stitch.frankenstein(ctx.model1, ctx.model1, layer)
        tr, te = ctx.splits(f, metrics=True)
        for seed in ctx.cfg.seeds:
            def run():
                t0 = time.perf_counter()
                cfg = stitch.StitchTrainConfig(**{**base, "seed": seed})
                s, trace = stitch.train_stitcher_cka_penalty(f, cfg, tr, te)
                hp = {"cka_weight": cfg.cka_penalty_weight}
                for rec in trace:
                    ctx.emit(layer, seed, "cka_penalty", {**hp, "epoch": rec["epoch"]},
                             {"rel_acc": rec["rel_acc"], "cross_entropy": rec["task_loss"]}, t0, _sims(rec))
                best = trace[s.meta["best_epoch"]]
                ctx.emit(layer, seed, "cka_penalty_best", hp, {"rel_acc": best["rel_acc"], "cross_entropy": best["task_loss"]},
                         t0, _sims(best), {"best_epoch": s.meta["best_epoch"]})
            ctx.cell(f"{layer}/{seed}", run)


def exp5_init(ctx: Context) -> None:
    ls_seeds = ctx.param("ls_seeds", ctx.cfg.seeds)
    random_seeds = ctx.param("random_seeds", ctx.cfg.seeds)
    m2 = ctx.model1 if ctx.param("self_stitch", False) else ctx.model2
    for layer in ctx.layers:
        f = stitch.frankenstein(ctx.model1, m2, layer)
        tr, te = ctx.splits(f)
        for init, method, seeds in (("LeastSquares", "ls_init", ls_seeds), ("Random", "random_init", random_seeds)):
            for seed in seeds:
                ctx.cell(f"{layer}/{method}/{seed}",
                         lambda: _trained_cell(ctx, f, tr, te, layer, seed, method, {}, init=init))


def exp6_mode_connect(ctx: Context) -> None:
    grid = [float(x) for x in ctx.param("grid", np.linspace(0, 1, 11).round(10).tolist())]
    inits = ctx.param("pair_inits", ["LeastSquares", "Random"])
    for layer in ctx.layers:
        f = stitch.frankenstein(ctx.model1, ctx.model2, layer)
        tr, te = ctx.splits(f)
        for init in inits:
            for seed in ctx.cfg.seeds:
                def run():
                    t0 = time.perf_counter()
                    ends = []
                    for which, s_seed in (("m1", 2 * seed), ("m2", 2 * seed + 1)):
                        cfg = ctx.cfg.stitch_config(seed=s_seed, init=init)
                        s, trace = stitch.train_stitcher(f, cfg, tr, te)
                        ev = stitch.evaluate(f.with_stitcher(s), te)
                        ctx.emit(layer, seed, "endpoint", {"init": init, "which": which}, ev, t0)
                        ends.append(s)
                    for rec in stitch.mode_connectivity_sweep([(ends[0], ends[1])], grid, f, te):
                        if rec["skipped"]:
                            ctx.emit(layer, seed, "skipped", {"init": init},
                                     {"rel_acc": min(rec["endpoint_rel_acc"]), "cross_entropy": 0.0}, t0,
                                     note=rec["reason"])
                        else:
                            ev = stitch.evaluate(f.with_stitcher(stitch.interpolate(ends[0], ends[1], rec["lambda"])), te)
                            ctx.emit(layer, seed, "interpolation", {"init": init, "lambda": rec["lambda"]},
                                     {"rel_acc": rec["rel_acc"], "cross_entropy": ev["cross_entropy"]}, t0,
                                     extra={"lambda": rec["lambda"]})
                ctx.cell(f"{layer}/{init}/{seed}", run)


def exp7_sparsity(ctx: Context) -> None:
    alphas = [float(a) for a in ctx.param("alphas", DEFAULT_ALPHAS)]
    max_iter = ctx.param("lasso_max_iter", 2000)
    tol = ctx.param("lasso_tol", 1e-6)
    for layer in ctx.layers:
        f = stitch.frankenstein(ctx.model1, ctx.model2, layer)
        tr, te = ctx.splits(f)
        a, b = tr.flat_source(), tr.flat_target()

        def lasso_path():
            warm = None
            for alpha in alphas:
                t0 = time.perf_counter()
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", NotConverged)
                    sol = direct_match.lasso_match(a, b, alpha, max_iter=max_iter, tol=tol, warm_start=warm)
                warm = sol.m
                s, sp = stitch.sparsify(StitchingLayer.full(sol.m, sol.bias))
                ctx.emit(layer, ctx.cfg.seeds[0], "lasso", {"alpha": alpha}, stitch.evaluate(f.with_stitcher(s), te),
                         t0, extra={"sparsity": sp, "converged": float(sol.params["converged"])})

        ctx.cell(f"{layer}/lasso", lasso_path)
        for seed in ctx.cfg.seeds:
            for alpha in alphas:
                def run():
                    t0 = time.perf_counter()
                    cfg = ctx.cfg.stitch_config(seed=seed, l1_weight=alpha)
                    s, trace = stitch.train_stitcher(f, cfg, tr, te)
                    s, sp = stitch.sparsify(s)
                    ctx.emit(layer, seed, "task_l1", {"alpha": alpha}, stitch.evaluate(f.with_stitcher(s), te), t0,
                             extra={"sparsity": sp, "best_epoch": s.meta["best_epoch"]})
                ctx.cell(f"{layer}/task_l1/{alpha}/{seed}", run)


def exp8_low_rank(ctx: Context) -> None:
    ks = [int(k) for k in ctx.param("ks", [2, 4, 8])]
    for layer in ctx.layers:
        f = stitch.frankenstein(ctx.model1, ctx.model2, layer)
        tr, te = ctx.splits(f)
        a, b = tr.flat_source(), tr.flat_target()
        for k in ks:
            holder = {}

            def rrr():
                t0 = time.perf_counter()
                holder["s"] = stitch.bottleneck_from_rrr(a, b, k)
                ctx.emit(layer, ctx.cfg.seeds[0], "rrr", {"k": k}, stitch.evaluate(f.with_stitcher(holder["s"]), te), t0,
                         extra={"rank": direct_match.matrix_rank(holder["s"].matrix)})

            ctx.cell(f"{layer}/rrr/{k}", rrr)
            for seed in ctx.cfg.seeds:
                def run():
                    t0 = time.perf_counter()
                    cfg = ctx.cfg.stitch_config(seed=seed, form="bottleneck", k=k)
                    s, trace = stitch.train_stitcher(f, cfg, tr, te, init=holder.get("s"))
                    best = trace[s.meta["best_epoch"]]
                    ctx.emit(layer, seed, "task_bottleneck", {"k": k},
                             {"rel_acc": best["rel_acc"], "cross_entropy": best["task_loss"]}, t0,
                             extra={"rank": best["rank"], "best_epoch": s.meta["best_epoch"]})
                ctx.cell(f"{layer}/task_bottleneck/{k}/{seed}", run)


def appb_weighted(ctx: Context) -> None:
    schemes = ctx.param("schemes", ["Ones", "GradSumOutput", "GradArgmaxOutput", "ActivationPower(2)",
                                    "HardThreshold(10)", "SoftThreshold(10)"])
    normalization = ctx.param("normalization", "MinMax")
    wms_kw = {"epochs": ctx.param("wms_epochs", 20), "batch": ctx.param("wms_batch", 256),
              "lr": ctx.param("wms_lr", 1e-3)}
    limit = ctx.param("match_samples", 500)
    for layer in ctx.layers:
        f = stitch.frankenstein(ctx.model1, ctx.model2, layer)
        tr, te = ctx.splits(f)
        sub = tr.subset(limit)
        a, b = sub.flat_source(), sub.flat_target()
        acts_b = from_torch(sub.target_acts)
        for text in schemes:
            for seed in ctx.cfg.seeds:
                def run():
                    t0 = time.perf_counter()
                    scheme = direct_match.WeightScheme.parse(text, normalization)
                    w = direct_match.weight_refresher(scheme, ctx.model2, layer, acts_b)
                    sol = direct_match.wms_match(a, b, w, seed=seed, max_rows=None, scheme=str(scheme), **wms_kw)
                    s = StitchingLayer.full(sol.m, sol.bias)
                    ctx.emit(layer, seed, "weighted", {"scheme": str(scheme), "normalization": normalization},
                             stitch.evaluate(f.with_stitcher(s), te), t0, extra={"objective": sol.params["objective"]})
                ctx.cell(f"{layer}/{text}/{seed}", run)


def appc1_grid(ctx: Context) -> None:
    for seed in ctx.cfg.seeds:
        def run():
            t0 = time.perf_counter()
            cfg = ctx.cfg.stitch_config(seed=seed)
            limit = ctx.param("train_limit", None)
            train = ctx.train if limit is None else ctx.train.subset(limit)
            for rec in stitch.cross_layer_grid(ctx.model1, ctx.model2, cfg, train, ctx.test, ctx.layers):
                ctx.emit(rec["layer_l"], seed, "task_loss", {"layer_m": rec["layer_m"]},
                         {"rel_acc": rec["rel_acc"], "cross_entropy": rec["cross_entropy"]}, t0,
                         extra={"best_epoch": rec["best_epoch"]})
        ctx.cell(f"grid/{seed}", run)


RUNNERS = {
    "Exp1_Match": exp1_match,
    "Exp2_Width": exp2_width,
    "Exp3_IndicesDuringTraining": exp3_indices,
    "Exp4_CkaPenalty": exp4_cka_penalty,
    "Exp5_InitSensitivity": exp5_init,
    "Exp6_ModeConnect": exp6_mode_connect,
    "Exp7_Sparsity": exp7_sparsity,
    "Exp8_LowRank": exp8_low_rank,
    "AppB_Weighted": appb_weighted,
    "AppC1_Grid": appc1_grid,
}


def run_experiment(cfg: ExperimentConfig) -> dict[str, Path]:
    """Run one experiment; writes records, errors, plot bundles and a summary under ``output_dir``."""
    cfg.validate()
    out = Path(cfg.output_dir) / cfg.experiment
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    model1, model2, train, test = get_twins(cfg)
    writer = RecordWriter(out / "records.jsonl")
    ctx = Context(cfg, model1, model2, train, test, writer, [])
    RUNNERS[cfg.experiment](ctx)
    (out / "errors.jsonl").write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in ctx.errors))
    plots = emit_plot_data(writer.records, out / "plots")
    rows = summarize(writer.records)
    (out / "summary.txt").write_text(format_table(rows) + "\n")
    return {"records": writer.path, "errors": out / "errors.jsonl", "summary": out / "summary.txt",
            "plots": plots[cfg.experiment], "dir": out}
