"""Acceptance suite. Each test prints one PASS/FAIL line for its criterion.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the toy bench
(criteria 5 and 8) takes roughly 25 minutes on one CPU core.
"""

import dataclasses
import math
import time

import numpy as np
import pytest
import torch

import oracles
import test_adaptation as ta
import test_segmenter as ts
from seuda import adaptation as ad
from seuda.data import generate_phantoms, phantom_params
from seuda.experiment import ToyConfig, make_toy_data, run_bench, stability_study
from seuda.metrics import asd, overlap_metrics, postprocess
from seuda.segmenter import cross_entropy, load_segmenter, save_segmenter

BENCH_SEEDS = (0, 1, 2)


@pytest.fixture
def verdict(capsys):
    def emit(n, name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {name}" + (f" ({detail})" if detail else ""))
        assert ok, f"criterion {n} failed: {detail}"
    return emit


# ------------------------------------------------------------- criterion 1

def test_c1_metric_oracles(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_asd, overlap_ok, checked = 0.0, True, 0
    for _ in range(200):
        density = rng.uniform(0.1, 0.9, 2)
        pred = np.where(rng.random((16, 16)) < density[0], rng.integers(1, 3, (16, 16)), 0)
        gt = np.where(rng.random((16, 16)) < density[1], rng.integers(1, 3, (16, 16)), 0)
        for c in (1, 2):
            overlap_ok &= tuple(overlap_metrics(pred, gt, c)) == oracles.overlap_by_sets(pred, gt, c)
            if (pred == c).any() and (gt == c).any():
                spacing = float(rng.uniform(0.2, 2.0))
                worst_asd = max(worst_asd, abs(asd(pred, gt, c, spacing)
                                               - oracles.asd_bruteforce(pred, gt, c, spacing)))
                checked += 1
    elapsed = time.perf_counter() - t0
    ok = overlap_ok and worst_asd <= 1e-9 and elapsed < 10
    verdict(1, "metric oracle equivalence", ok,
            f"overlap exact={overlap_ok}, max |ASD diff|={worst_asd:.2e} over {checked} pairs, "
            f"{elapsed:.1f}s")


# ------------------------------------------------------------- criterion 2

def test_c2_gradient_checks(verdict):
    t0 = time.perf_counter()
    errors = {}

    model = ts.build_segmenter(ts.mini_config(), seed=1, dtype=torch.float64)
    params = list(model.net.parameters())
    with torch.no_grad():
        for p in params:
            p.add_(0.1 * torch.randn(p.shape, dtype=p.dtype, generator=torch.Generator().manual_seed(3)))
    g = torch.Generator().manual_seed(4)
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64, generator=g) * 255
    y = torch.randint(0, 3, (1, 8, 8), generator=g)

    def ce():
        return cross_entropy(model.net(x), y)

    sizes = {"cross-entropy": sum(p.numel() for p in params)}
    errors["cross-entropy"] = ta.rel_error(torch.autograd.grad(ce(), params),
                                           oracles.central_differences(ce, params))

    seg = ta.mini_segmenter()
    for name, key, lam, nets, seed in (("generator LSGAN", "gan_ts", 0.5, ("G_ts",), 0),
                                      ("cycle", "cyc", 0.0, ("G_ts", "G_st"), 1),
                                      ("semantic", "sem", 0.5, ("G_ts",), 2)):
        state = ta.mini_state(lam=lam)
        x_s, x_t = ta._mini_inputs(seed)
        params = [p for n in nets for p in state.nets[n].parameters()]
        sizes[name] = sum(p.numel() for p in params)

        def f():
            return ad.generator_losses(state, seg, x_s, x_t)[key]

        if key == "cyc":
            with torch.no_grad():
                s, t = ad.to_unit(x_s), ad.to_unit(x_t)
                gap = min((state.nets["G_st"](state.nets["G_ts"](t)) - t).abs().min().item(),
                          (state.nets["G_ts"](state.nets["G_st"](s)) - s).abs().min().item())
            assert gap > 1e-3, "cycle check landed on an L1 kink"
        errors[name] = ta.rel_error(torch.autograd.grad(f(), params),
                                    oracles.central_differences(f, params))
    elapsed = time.perf_counter() - t0
    ok = all(e < 1e-4 for e in errors.values()) and max(sizes.values()) <= 2000 and elapsed < 120
    verdict(2, "gradient checks", ok,
            ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f"; {elapsed:.1f}s")


# ------------------------------------------------------- criteria 3 and 4

@pytest.fixture(scope="module")
def long_adaptation(tmp_path_factory):
    """500 adaptation steps on toy phantoms with default weights."""
    cfg = ToyConfig(seed=3, n_source_train=20, n_source_val=5, n_source_test=5, n_target_train=50,
                    n_target_test=5, seg_epochs=3)
    data = make_toy_data(cfg)
    seg = ts.build_segmenter(cfg.segmenter_config(), seed=cfg.seed)
    seg, _ = ts.train_segmenter(seg, data.source_train, data.source_val, cfg.train_options())
    seg.freeze()
    ckpt = tmp_path_factory.mktemp("frozen") / "segmenter.pt"
    save_segmenter(seg, ckpt)
    state = cfg.build_adaptation()
    reports = []
    ad.train_adaptation(state, seg, data.source_train, data.target_train, 10,
                        lambda s, r: reports.append(r))
    return seg, ckpt, reports, state


def test_c3_objective_consistency(long_adaptation, verdict):
    _, _, reports, state = long_adaptation
    w = state.config
    assert (w.alpha, w.beta, w.lambda_sem) == (0.5, 10.0, 0.5)
    dev = [abs(r.total - (r.gan_st + 0.5 * r.gan_ts + 10 * r.cyc + 0.5 * r.sem)) for r in reports]
    ok = len(reports) >= 100 and max(dev) <= 1e-6 and all(r.sem > 0 for r in reports)
    verdict(3, "weighted objective consistency", ok,
            f"{len(reports)} steps, max deviation {max(dev):.1e}")


def test_c4_frozen_segmenter(long_adaptation, verdict):
    seg, ckpt, reports, _ = long_adaptation
    before = load_segmenter(ckpt).parameters()
    after = seg.parameters()
    same = before.keys() == after.keys() and all(
        np.array_equal(before[k], after[k]) and before[k].tobytes() == after[k].tobytes()
        for k in before)
    ok = len(reports) == 500 and same
    verdict(4, "segmenter untouched by adaptation", ok,
            f"{len(reports)} steps, {len(before)} tensors bit-identical={same}")


# ------------------------------------------------------------- criterion 5

@pytest.fixture(scope="module")
def bench():
    runs = {}
    t0 = time.perf_counter()
    for seed in BENCH_SEEDS:
        cfg = ToyConfig(seed=seed)
        data = make_toy_data(cfg)
        reports, inputs = run_bench(cfg, data=data)
        runs[seed] = (cfg, data, reports, inputs)
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_c5_toy_trend(bench, verdict):
    runs, elapsed = bench
    dice = {s: np.median([runs[k][2][s].mean_dice() for k in BENCH_SEEDS])
            for s in ("S-test", "T-noDA", "T-HistM", "T-STL", "CyUDA", "SeUDA")}
    checks = {
        "S>=95": dice["S-test"] >= 95,
        "noDA<=S-10": dice["T-noDA"] <= dice["S-test"] - 10,
        "SeUDA>=noDA+5": dice["SeUDA"] >= dice["T-noDA"] + 5,
        "HistM<=SeUDA": dice["T-HistM"] <= dice["SeUDA"],
        "STL>=SeUDA-3": dice["T-STL"] >= dice["SeUDA"] - 3,
        "<=45min": elapsed <= 45 * 60,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = ", ".join(f"{k} {v:.2f}" for k, v in dice.items()) + f"; {elapsed / 60:.1f} min"
    if failed:
        detail += "; failed: " + ", ".join(failed)
    verdict(5, "toy end-to-end trend (median of 3 seeds)", not failed, detail)


# ------------------------------------------------------------- criterion 6

def test_c6_cyuda_equivalence(verdict):
    cfg = ToyConfig(seed=11)
    src = generate_phantoms(phantom_params("source", 40), 8)
    tgt = generate_phantoms(phantom_params("target", 41), 8)
    seg = ts.build_segmenter(cfg.segmenter_config(), seed=0).freeze()
    with_dm = cfg.build_adaptation(lambda_sem=0.0)
    without = cfg.build_adaptation(lambda_sem=0.0, semantic=False)
    traj = ([], [])

    def recorder(out):
        return lambda s, r: out.append({**s.parameters("G_ts"), **{"st." + k: v for k, v in
                                                                   s.parameters("G_st").items()}})

    ad.train_adaptation(with_dm, seg, src, tgt, 2, recorder(traj[0]))
    ad.train_adaptation(without, None, src, tgt, 2, recorder(traj[1]))
    same = len(traj[0]) == len(traj[1]) == 16 and all(
        all(np.array_equal(a[k], b[k]) for k in a) for a, b in zip(*traj))
    verdict(6, "lambda=0 matches a build without the mask discriminator", same
            and "D_m" not in without.nets, f"{len(traj[0])} steps compared")


# ------------------------------------------------------------- criterion 7

def test_c7_pool_and_schedule(verdict):
    rng = np.random.default_rng(5)
    pool_ok = True
    for trial in range(30):
        cap = int(rng.integers(0, 60))
        pool = ad.ImagePool(cap, seed=trial)
        seen = []
        for i in range(int(rng.integers(1, 150))):
            img = torch.full((1, 1, 2, 2), float(i))
            out = pool.query(img)
            pool_ok &= len(pool) <= cap
            if i < cap:
                pool_ok &= torch.equal(out, img)
            seen.append(float(i))
            pool_ok &= out.flatten()[0].item() in seen
    sched = [ad.lr_at(e, 0.002, 100, 100) for e in range(0, 230)]
    sched_ok = (ad.lr_at(0) == 0.002 and ad.lr_at(200) == 0.0
                and all(b <= a for a, b in zip(sched, sched[1:])) and min(sched) == 0.0)
    verdict(7, "image pool and lr schedule", pool_ok and sched_ok,
            f"pool={pool_ok}, schedule={sched_ok}")


# ------------------------------------------------------------- criterion 8

@pytest.mark.slow
def test_c8_stability_trend(bench, capsys):
    """Soft: reported, never fails the build."""
    runs, _ = bench
    wins, rows = 0, []
    for seed in BENCH_SEEDS:
        cfg, data, _, inputs = runs[seed]
        small = dataclasses.replace(cfg, uda_epochs=10)
        sub = dataclasses.replace(data, target_train=data.target_train.subset(range(20)))
        res = stability_study(small, 5, [0.0, 0.5], data=sub, segmenter=inputs.segmenter)
        s0, s5 = res["lambda"]["0.0"]["dice_std"], res["lambda"]["0.5"]["dice_std"]
        wins += s5 <= s0
        rows.append(f"rep {seed}: std(l=0)={s0:.2f} std(l=0.5)={s5:.2f}")
        assert math.isfinite(s0) and math.isfinite(s5)
    status = "PASS" if wins >= 2 else "FAIL (soft, not build-breaking)"
    with capsys.disabled():
        print(f"\n[{status}] criterion 8: stability trend ({wins}/3 repetitions; " + "; ".join(rows) + ")")


# ------------------------------------------------------------- criterion 9

def test_c9_postprocess_contract(verdict):
    rng = np.random.default_rng(9)
    base = generate_phantoms(phantom_params("source", 99, working_size=32), 100)
    comps_ok = holes_ok = idem_ok = True
    for i, case in enumerate(base):
        noisy = case.label.copy()
        flip = rng.random(noisy.shape) < rng.uniform(0.02, 0.2)
        noisy[flip] = rng.integers(0, 3, flip.sum())
        out = postprocess(noisy)
        idem_ok &= np.array_equal(postprocess(out), out)
        for c in (1, 2):
            comps_ok &= len(oracles.components4(out == c)) <= 1
            holes_ok &= oracles.count_holes(out == c) == 0
    verdict(9, "post-processing contract", comps_ok and holes_ok and idem_ok,
            f"single component={comps_ok}, no holes={holes_ok}, idempotent={idem_ok}")
