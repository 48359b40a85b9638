"""End-to-end acceptance suite.

Each test prints one verdict line (run pytest with -s to watch them land).
The ordering criteria train many short runs on one shared synthetic city;
expect a multi-hour wall time on a single core. Budgets (step counts,
learning rates) were calibrated on a 1-core container; the assertions
themselves are machine-independent orderings and tolerances.
"""

import filecmp
import shutil
import statistics
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import oracles
from roadflow import cli as C
from roadflow import datagen as D
from roadflow import gradcheck as G
from roadflow import layers, metrics
from roadflow.config import RunConfig, VARIANTS
from roadflow.model import load_checkpoint, save_checkpoint
from roadflow.tensor import Tensor, write_tensor

# Matched training budget for the ordering criteria (criteria 6-8).
ORDER_STEPS = 150
ORDER_SEEDS = (0, 1, 2)
ORDER_BATCH = 8
ORDER_LR = 1e-3

# Overfit probe (criterion 5): a quarter-size city so 16 samples fit the
# wall-clock cap on one throttled core.
OVERFIT_LR = 3e-3
OVERFIT_BATCH = 16
OVERFIT_CAP = 400


def verdict(num, name, ok, detail=""):
    line = f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {name}"
    if detail:
        line += f"  [{detail}]"
    print(flush=True)
    print(line, flush=True)
    return ok


# --------------------------------------------------------------------------
# shared artifacts

@pytest.fixture(scope="module")
def base_cfg():
    return RunConfig()


@pytest.fixture(scope="module")
def ds(base_cfg):
    return D.build_dataset(base_cfg)


@pytest.fixture(scope="module")
def data_dir(ds, tmp_path_factory):
    out = tmp_path_factory.mktemp("city")
    D.write_dataset(out, ds)
    return out


def train_test_mape(base_cfg, ds, tmp, tag, steps=ORDER_STEPS, seed=0, **kw):
    """Train one run in-process and score the best checkpoint on test."""
    cfg = replace(base_cfg, epochs=10_000, max_steps=steps,
                  batch_size=ORDER_BATCH, lr=ORDER_LR, seed=seed, **kw)
    out = tmp / tag
    C.run_training(cfg, ds, out)
    report, _ = C.evaluate_checkpoint(out, ds, "test")
    shutil.rmtree(out, ignore_errors=True)
    return report.mape


@pytest.fixture(scope="module")
def variant_scores(base_cfg, ds, tmp_path_factory):
    """Test MAPE per variant and seed at the matched budget, plus timing."""
    tmp = tmp_path_factory.mktemp("order")
    cpu0, wall0 = time.process_time(), time.perf_counter()
    scores = {}
    for variant in VARIANTS:
        scores[variant] = [
            train_test_mape(base_cfg, ds, tmp, f"{variant}-{s}",
                            variant=variant, seed=s)
            for s in ORDER_SEEDS
        ]
    scores["_cpu"] = time.process_time() - cpu0
    scores["_wall"] = time.perf_counter() - wall0
    return scores


# --------------------------------------------------------------------------
# criterion 1: every backward pass survives a finite-difference audit

def test_criterion_1_gradient_audit():
    t0 = time.perf_counter()
    results = G.run_suite(0)
    elapsed = time.perf_counter() - t0
    layer_worst = max(r.max_err for r in results if r.name != "end_to_end")
    end = next(r for r in results if r.name == "end_to_end")
    ok = layer_worst < 1e-4 and end.max_err < 1e-3 and elapsed < 120.0
    verdict(1, "gradient audit", ok,
            f"layers<= {layer_worst:.2e}, end_to_end {end.max_err:.2e}, "
            f"{elapsed:.1f}s")
    assert layer_worst < 1e-4
    assert end.max_err < 1e-3
    assert elapsed < 120.0


# --------------------------------------------------------------------------
# criterion 2: the directional convolution matches a nested-loop oracle

def test_criterion_2_mdconv_oracle():
    rng = np.random.default_rng(20_240_817)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        h = int(rng.integers(1, 9))
        w = int(rng.integers(1, 9))
        ci = int(rng.integers(1, 5))
        cq = int(rng.integers(1, 5))
        radius = int(rng.integers(1, 4))
        x = rng.normal(size=(h, w, ci))
        kernels = [Tensor(rng.normal(size=(ci, 2 * radius + 1, cq)))
                   for _ in range(4)]
        got = layers.mdconv1d(Tensor(x), kernels, radius).data
        want = oracles.mdconv1d_ref(x, [k.data for k in kernels], radius)
        worst = max(worst, float(np.abs(got - want).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10.0
    verdict(2, "directional conv vs oracle", ok,
            f"200 cases, worst {worst:.2e}, {elapsed:.1f}s")
    assert worst <= 1e-12
    assert elapsed < 10.0


# --------------------------------------------------------------------------
# criterion 3: metric hand values and scale invariance

def test_criterion_3_metric_identities():
    preds, truths = np.array([3.0, 4.0]), np.array([0.0, 0.0])
    r_err = abs(metrics.rmse(preds, truths) - np.sqrt(12.5))
    m_err = abs(metrics.mae(preds, truths) - 3.5)

    one_off = np.array([[2.0, 1.0], [1.0, 1.0]])
    flat = np.ones((2, 2))
    p_err = abs(metrics.mape_citywide(one_off, flat) - 0.25)

    rng = np.random.default_rng(3)
    p = rng.uniform(0.0, 50.0, (6, 4, 4, 2))
    t = rng.uniform(1.0, 50.0, (6, 4, 4, 2))
    s_err = abs(metrics.mape_citywide(10.0 * p, 10.0 * t)
                - metrics.mape_citywide(p, t))

    ok = r_err <= 1e-12 and m_err <= 1e-12 and p_err <= 1e-12 and s_err <= 1e-9
    verdict(3, "metric identities", ok,
            f"hand err {max(r_err, m_err, p_err):.1e}, scale err {s_err:.1e}")
    assert r_err <= 1e-12 and m_err <= 1e-12 and p_err <= 1e-12
    assert s_err <= 1e-9


# --------------------------------------------------------------------------
# criterion 4: conservation and road-flow correlation on the shared city

def test_criterion_4_conservation_and_correlation(ds):
    exact = np.array_equal(ds.coarse, D.aggregate_coarse(ds.fine, ds.n))
    for t in range(0, ds.count, 97):
        exact &= np.array_equal(ds.coarse[t],
                                oracles.block_sum_ref(ds.fine[t], ds.n))
    corr = D.road_flow_correlation(ds.road, ds.fine)
    ok = exact and corr > 0.5
    verdict(4, "conservation + road correlation", ok,
            f"block sums exact={exact}, corr={corr:.3f}")
    assert exact
    assert corr > 0.5


# --------------------------------------------------------------------------
# criterion 5: the full variant can memorize 16 fixed samples fast

def test_criterion_5_overfit(tmp_path):
    cfg = RunConfig(i_c=4, j_c=4, days=7, train_days=5, val_days=1,
                    test_days=1, n_arterial=2, n_secondary=3,
                    variant="full", lr=OVERFIT_LR, batch_size=OVERFIT_BATCH,
                    epochs=10_000, max_steps=OVERFIT_CAP)
    city = D.build_dataset(cfg)
    lo = 2 * cfg.intervals_per_day + 30          # a weekday morning block
    idx = np.arange(lo, lo + 16)
    sub = D.Dataset(fine=city.fine[idx], coarse=city.coarse[idx],
                    external=city.external[idx], road=city.road, n=city.n,
                    interval_minutes=city.interval_minutes,
                    intervals_per_day=city.intervals_per_day,
                    start_dow=city.start_dow, seed=city.seed,
                    splits={"train": (0, 16), "val": (0, 16),
                            "test": (0, 16)})
    t0 = time.perf_counter()
    res = C.run_training(cfg, sub, tmp_path / "overfit", stop_below=0.045)
    report, _ = C.evaluate_checkpoint(tmp_path / "overfit", sub, "train")
    elapsed = time.perf_counter() - t0
    ok = report.mape < 0.05 and res.steps <= 2000 and elapsed < 600.0
    verdict(5, "overfit 16 samples", ok,
            f"train mape {report.mape:.4f} in {res.steps} steps, "
            f"{elapsed:.0f}s")
    assert report.mape < 0.05
    assert res.steps <= 2000
    assert elapsed < 600.0


# --------------------------------------------------------------------------
# criterion 6: nested variants order by median test MAPE at a matched budget

def test_criterion_6_variant_ordering(variant_scores):
    med = {v: statistics.median(variant_scores[v]) for v in VARIANTS}
    gap1 = med["short"] - med["short-road"]
    gap2 = med["short-road"] - med["short-long-road"]
    gap3 = med["short-long-road"] - med["full"]
    ok = gap1 > 0 and gap2 > 0 and gap3 >= 0 and variant_scores["_cpu"] < 7200
    verdict(6, "variant ordering", ok,
            " >= ".join(f"{v}:{med[v]:.4f}" for v in VARIANTS)
            + f", cpu {variant_scores['_cpu']:.0f}s")
    assert gap1 > 0
    assert gap2 > 0
    assert gap3 >= 0
    assert variant_scores["_cpu"] < 7200


# --------------------------------------------------------------------------
# criterion 7: ablation toggles run end-to-end and the defaults win

def test_criterion_7_toggles(base_cfg, ds, tmp_path_factory, variant_scores):
    tmp = tmp_path_factory.mktemp("toggles")
    square = train_test_mape(base_cfg, ds, tmp, "square2d", steps=30,
                             variant="full", road_conv="square2d")
    common = [train_test_mape(base_cfg, ds, tmp, f"common-{s}", seed=s,
                              variant="full", road_weighting="common")
              for s in ORDER_SEEDS]
    positional = [train_test_mape(base_cfg, ds, tmp, f"pos-{s}", seed=s,
                                  variant="full", query_mode="positional")
                  for s in ORDER_SEEDS]
    default_med = statistics.median(variant_scores["full"])
    med_common = statistics.median(common)
    med_pos = statistics.median(positional)
    ok = (np.isfinite(square) and default_med <= med_common
          and default_med <= med_pos)
    verdict(7, "ablation toggles", ok,
            f"default {default_med:.4f} vs common {med_common:.4f} "
            f"vs positional {med_pos:.4f}; square2d ran ({square:.3f})")
    assert np.isfinite(square)
    assert default_med <= med_common
    assert default_med <= med_pos


# --------------------------------------------------------------------------
# criterion 8: a trained full model beats the historical average

def test_criterion_8_beats_baseline(ds, variant_scores):
    ha_report, _ = C.evaluate_baseline(ds, "test")
    full_med = statistics.median(variant_scores["full"])
    ok = ha_report.mape > full_med
    verdict(8, "beats historical average", ok,
            f"HA {ha_report.mape:.4f} > full {full_med:.4f}")
    assert ha_report.mape > full_med


# --------------------------------------------------------------------------
# criterion 9: same seed, same bytes

def _tree_bytes(root: Path) -> dict:
    return {p.relative_to(root): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(data_dir, tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = C.main(["train", "--data", str(data_dir), "--out", str(out),
                       "--variant", "short-road", "--max-steps", "40",
                       "--seed", "7"])
        assert code == 0
        runs.append(_tree_bytes(out))
    same = (runs[0].keys() == runs[1].keys()
            and all(runs[0][k] == runs[1][k] for k in runs[0]))
    logs_same = runs[0][Path("train_log.txt")] == runs[1][Path("train_log.txt")]
    ok = same and logs_same
    verdict(9, "same-seed determinism", ok,
            f"{len(runs[0])} files bit-identical={same}")
    assert same


# --------------------------------------------------------------------------
# criterion 10: serialization round trips and corruption detection

def test_criterion_10_round_trips(ds, data_dir, tmp_path):
    back = D.read_dataset(data_dir)
    data_ok = (np.array_equal(back.fine, ds.fine)
               and np.array_equal(back.coarse, ds.coarse)
               and np.array_equal(back.road, ds.road)
               and np.array_equal(back.external, ds.external))
    second = tmp_path / "again"
    D.write_dataset(second, back)
    cmp_files = [p.relative_to(data_dir)
                 for p in sorted(data_dir.rglob("*.rtfm"))]
    files_ok = all(filecmp.cmp(data_dir / p, second / p, shallow=False)
                   for p in cmp_files)

    ck = tmp_path / "ck"
    code = C.main(["train", "--data", str(data_dir), "--out", str(ck),
                   "--variant", "short-road", "--max-steps", "8",
                   "--seed", "1"])
    assert code == 0
    model, manifest, road_input = load_checkpoint(ck)
    ck2 = tmp_path / "ck2"
    save_checkpoint(ck2, model, manifest, road_input)
    names = [p.name for p in sorted(ck.iterdir())
             if p.suffix == ".rtfm" or p.name == "manifest.txt"]
    ck_ok = all(filecmp.cmp(ck / n, ck2 / n, shallow=False) for n in names)

    # corrupt one tensor's magic and expect the validation exit code
    bad = tmp_path / "bad.rtfm"
    write_tensor(bad, ds.coarse[0])
    raw = bytearray(bad.read_bytes())
    raw[:4] = b"XXXX"
    bad.write_bytes(bytes(raw))
    code = C.main(["infer", "--checkpoint", str(ck), "--coarse", str(bad),
                   "--out", str(tmp_path / "pred.rtfm")])
    corrupt_ok = code == 2

    ok = data_ok and files_ok and ck_ok and corrupt_ok
    verdict(10, "round trips + corruption", ok,
            f"dataset={data_ok} files={files_ok} checkpoint={ck_ok} "
            f"magic->exit2={corrupt_ok}")
    assert data_ok
    assert files_ok
    assert ck_ok
    assert corrupt_ok
