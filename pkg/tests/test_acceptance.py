"""End-to-end acceptance checks, one test per criterion, each printing a PASS/FAIL line."""

import json
import math
import time

import numpy as np

from latentflow.cli import build_parser, main
from latentflow.evalstats import BTItem, ItemVotes, bootstrap_ci, bt_fit, consensus, net_win_rate, significance_band
from latentflow.extension import (ar_generate, beam_extend, mask_report, multidiffusion_solve,
                                  plan_segments)
from latentflow.model import MlpVelocityField, TrainConfig, gaussian_mixture, mlp_backward, sample_model, train_flow
from latentflow.numerics import Rng
from latentflow.sampler import euler_solve, linear_quadratic_schedule, linear_schedule, midpoint_solve, parse_schedule
from latentflow.tae import (apply_untiled, identity_codec, latent_frame_count, opl_loss, plan_tiles,
                            pooling_codec, scaling_codec, tiled_apply)

from oracles import central_difference_grads, opl_direct


def test_token_arithmetic(criterion, capsys):
    code = main(["tokens", "--frames", "256", "--height", "768", "--width", "768",
                 "--tae-factor", "8", "--patch", "1,2,2"])
    tokens = json.loads(capsys.readouterr().out)["tokens"]
    criterion("token arithmetic: 256x768x768, 8x compression, 1x2x2 patches", code == 0 and tokens == 73728,
              f"tokens={tokens}")


def test_linear_quadratic_prefix(criterion):
    lq = linear_quadratic_schedule(50, 1000).knots
    lin = linear_schedule(1000).knots
    same = lq[:26].tobytes() == lin[:26].tobytes()
    default = build_parser().parse_args(["sample"]).schedule
    default_ok = default == "linquad:50,250" and parse_schedule(default).steps == 50
    criterion("linear-quadratic prefix bit-exact, CLI default 50/250", same and default_ok,
              f"prefix_equal={same} default={default}")


def test_solver_orders(criterion):
    start = time.perf_counter()
    errs = {}
    for name, solver in (("euler", euler_solve), ("midpoint", midpoint_solve)):
        e = [abs(solver(lambda x, t, c: x, np.array([1.0]), linear_schedule(n))[0] - math.e) for n in (64, 128)]
        errs[name] = e[1] / e[0]
    elapsed = time.perf_counter() - start
    ok = abs(errs["euler"] - 0.5) <= 0.1 and abs(errs["midpoint"] - 0.25) <= 0.05 and elapsed < 1.0
    criterion("solver orders 64 -> 128 steps", ok,
              f"euler ratio={errs['euler']:.4f} midpoint ratio={errs['midpoint']:.4f} time={elapsed:.3f}s")


def test_flow_matching_learning(criterion):
    start = time.perf_counter()
    data, _ = gaussian_mixture(4096, Rng(0, stream=1))
    config = TrainConfig(steps=4000, batch=256, seed=0)
    model, _ = train_flow(data, config)
    samples = sample_model(model, 2000, linear_quadratic_schedule(50, 250), rng=Rng(1))
    elapsed = time.perf_counter() - start
    right = samples[:, 0] > 0
    mean_r, mean_l = samples[right].mean(axis=0), samples[~right].mean(axis=0)
    err = max(np.linalg.norm(mean_r - [2.0, 0.0]), np.linalg.norm(mean_l - [-2.0, 0.0]))
    prop = right.mean()
    ok = config.steps <= 20000 and err <= 0.15 and abs(prop - 0.5) <= 0.05 and elapsed < 120
    criterion("flow matching learns the 2-Gaussian mixture", ok,
              f"means=({mean_l[0]:.3f},{mean_l[1]:.3f}) ({mean_r[0]:.3f},{mean_r[1]:.3f}) "
              f"max mean error={err:.3f} right proportion={prop:.3f} time={elapsed:.1f}s")


def test_opl_behaviour(criterion):
    zero = opl_loss(np.full((3, 4, 4), 1.7)) == 0.0
    spike = np.array([0.0, 0.0, 0.0, 10.0]).reshape(1, 2, 2)
    value = opl_loss(spike, r=1.0)
    oracle = opl_direct(spike.tolist(), 1.0)
    spike_ok = abs(value - 0.79247) <= 1e-5 and abs(value - oracle) <= 1e-5
    rng = Rng(11)
    rs = np.linspace(0.0, 6.0, 25)
    monotone = True
    for k in range(100):
        x = rng.child(k).normal((3, 5, 5)) ** 3
        losses = [opl_loss(x, r) for r in rs]
        monotone &= bool(np.all(np.diff(losses) <= 0))
    criterion("OPL zero on constants, spike example, monotone in r", zero and spike_ok and monotone,
              f"spike={value:.6f} oracle={oracle:.6f} monotone_on_100={monotone}")


def test_tiling_equivalence(criterion):
    rng = Rng(42)
    triples = [(64, 32, 16), (256, 32, 16)]
    draws = rng.integers(10**6, (48, 3))
    for a, b, c in draws:
        k = 1 + int(b) % 6
        triples.append((1 + int(a) % 300, 8 * k, 8 * (int(c) % k)))
    failures = []
    for n, (t, tile, overlap) in enumerate(triples):
        x = Rng(n).normal((t, 2))
        raw = plan_tiles(t, tile, overlap)
        for codec in (identity_codec(), scaling_codec(2.0)):
            if tiled_apply(codec, x, raw, raw).tobytes() != apply_untiled(codec, x).tobytes():
                failures.append((t, tile, overlap, "factor 1"))
        pool = pooling_codec(8, 2.0)
        dec = plan_tiles(latent_frame_count(t), tile // 8, overlap // 8)
        if tiled_apply(pool, x, raw, dec).tobytes() != apply_untiled(pool, x).tobytes():
            failures.append((t, tile, overlap, "factor 8"))
    criterion("tiling equals untiled bit-exactly on 50 triples incl. 32/16", not failures,
              f"triples={len(triples)} failures={failures[:3]}")


def test_extension_correctness(criterion):
    spans_ok = plan_segments(30, 15, 5).spans == ((0, 15), (10, 30))
    rng = Rng(5)
    worst = 0.0
    for k in range(100):
        n, hop, ctx = (int(v) for v in rng.child(k).integers(1000, 3))
        plan = plan_segments(1 + n % 200, 1 + hop % 40, 1 + ctx % 40)
        for window in ("uniform", "bartlett"):
            worst = max(worst, float(np.max(np.abs(mask_report(plan, window).sum(axis=1) - 1.0))))
    field = lambda x, t, c: np.sin(x) - 0.5 * t  # noqa: E731
    sched = linear_schedule(20)
    x0 = Rng(1).normal((12, 3))
    md = multidiffusion_solve(field, plan_segments(12, 30, 10), sched, x0)
    md_ok = md.tobytes() == euler_solve(field, x0, sched).tobytes()
    plan = plan_segments(100, 30, 10)
    ar = ar_generate(field, plan, sched, Rng(3), channels=2)
    bm = beam_extend(field, plan, sched, lambda x: float(np.sum(x)), 1, 1, Rng(3), channels=2)
    beam_ok = bm.tobytes() == ar.tobytes()
    ok = spans_ok and worst <= 1e-12 and md_ok and beam_ok
    criterion("extension: worked spans, mask partition, degenerate equivalences", ok,
              f"spans={spans_ok} max mask error={worst:.1e} md==euler={md_ok} beam==ar={beam_ok}")


def test_gradient_checks(criterion):
    start = time.perf_counter()
    worst = 0.0
    for k in range(20):
        rng = Rng(100 + k)
        hidden = tuple(int(h) for h in 2 + rng.integers(6, 1 + k % 2))
        data_dim = 1 + k % 3
        cond_dim = k % 3
        model = MlpVelocityField.create(data_dim, hidden, 4, cond_dim, rng=rng.child(0))
        for b in model.biases:
            b[:] = 0.3 * rng.child(1).normal(b.shape)
        inputs = model.inputs(rng.child(2).normal((6, data_dim)), rng.child(3).uniform(6),
                              rng.child(4).normal((6, cond_dim)))
        target = rng.child(5).normal((6, data_dim))
        _, grads = mlp_backward(model, inputs, target)
        numeric = central_difference_grads(lambda: mlp_backward(model, inputs, target)[0], model.params())
        for g, n in zip(grads, numeric):
            scale = max(np.max(np.abs(g)), np.max(np.abs(n)), 1e-300)
            worst = max(worst, float(np.max(np.abs(g - n)) / scale))
    elapsed = time.perf_counter() - start
    criterion("analytic vs central-difference gradients on 20 nets", worst <= 1e-6 and elapsed < 10,
              f"max relative error={worst:.2e} time={elapsed:.2f}s")


def test_eval_statistics(criterion):
    all_wins = net_win_rate(consensus(ItemVotes(str(k), (1, 1, 1))) for k in range(10)) == 100.0
    rng = Rng(2)
    votes = [tuple(int(v) for v in rng.child(k).integers(3, 3) - 1) for k in range(200)]
    items = [ItemVotes(str(k), v) for k, v in enumerate(votes)]
    forward = net_win_rate(consensus(i) for i in items)
    antisym = forward == -net_win_rate(consensus(i.swapped()) for i in items)
    scores = [consensus(i) for i in items]
    a, b = bootstrap_ci(scores, 1000, Rng(9)), bootstrap_ci(scores, 1000, Rng(9))
    reproducible = np.array(a).tobytes() == np.array(b).tobytes()
    bands = (significance_band(10.45, 3.74), significance_band(3.87, 5.07))
    bands_ok = bands == ("significant", "on_par")

    n = 10**4
    sim = Rng(0)
    flip, u = sim.integers(2, n), sim.uniform(n)
    bt_items = []
    for k in range(n):
        ba, bb = (1, 0) if flip[k] else (0, 1)
        d = (0.4 * ba) - (0.6 + 0.4 * bb)
        bt_items.append(BTItem("A", "B", (1 if u[k] < 1 / (1 + math.exp(-d)) else -1,), 0, ba, bb))
    fit = bt_fit(bt_items, n_bins=2, n_groups=1)
    bt_err = max(abs(fit.offsets["B"] - 0.6), abs(fit.coef[1, 0] - 0.4))
    ok = all_wins and antisym and reproducible and bands_ok and bt_err <= 0.05
    criterion("eval statistics: NWT, antisymmetry, bootstrap, bands, BT recovery", ok,
              f"all_wins={all_wins} antisym={antisym} bootstrap_repro={reproducible} bands={bands} "
              f"bt max error={bt_err:.4f} at {n} annotations")
