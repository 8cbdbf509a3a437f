"""Acceptance suite: one PASS/FAIL line per criterion.

Criteria 6 to 9 share two full default-config CLI runs (train plus every grid),
which take several minutes each on one core.
"""

import csv
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from layerlab.analysis import average_auc, roc_auc
from layerlab.checkpoint import load_checkpoint
from layerlab.config import ExperimentConfig, cell_rng
from layerlab.data_io import standardize_episode
from layerlab.model import build_model, forward
from layerlab.prior import TaskPrior, Teacher, sample_task, split_episode
from layerlab.report import manifest_schema
from layerlab.runner import _cosine_cell, load_datasets
from layerlab.surgery import plan_identity

from conftest import VARIANTS, make_episode, tiny_config

TESTS = Path(__file__).parent
CLI_BUDGET = 15 * 60
TRAIN_BUDGET = 10 * 60


@pytest.fixture
def say(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    return emit


def run_pytest(*node_ids):
    start = time.perf_counter()
    res = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *node_ids],
        cwd=TESTS.parent, capture_output=True, text=True,
    )
    lines = res.stdout.strip().splitlines()
    return res.returncode == 0, time.perf_counter() - start, lines[-1] if lines else res.stderr[-300:]


def test_1_gradient_suite(say):
    ok, secs, summary = run_pytest(
        "tests/test_tensor.py::test_matmul_gradient_5x4_4x3",
        "tests/test_tensor.py::test_matmul_batched_gradients",
        "tests/test_tensor.py::test_elementwise_and_shape_gradients",
        "tests/test_tensor.py::test_div_and_log_gradients",
        "tests/test_tensor.py::test_masked_softmax_gradient",
        "tests/test_tensor.py::test_cross_entropy_gradient_and_value",
        "tests/test_tensor.py::test_layer_norm_moments_and_gradient",
        "tests/test_tensor.py::test_attention_gradients",
        "tests/test_tensor.py::test_library_gradcheck_agrees",
        "tests/test_model.py::test_model_gradients_match_finite_differences",
    )
    passed = ok and secs < 120
    say(1, passed, f"finite-difference checks for all ops and 3 variants: {summary} ({secs:.1f}s, budget 120s)")
    assert passed


def test_2_identity_plan(say):
    mismatches = 0
    for variant in VARIANTS:
        model = build_model(tiny_config(variant, layers=3))
        for seed in range(20):
            rng = np.random.default_rng(seed)
            ep = make_episode(seed=seed, n_rows=int(rng.integers(30, 70)), n_features=int(rng.integers(1, 5)))
            a = forward(model, ep).logits
            b = forward(model, ep, plan_identity(model.n_layers)).logits
            mismatches += not np.array_equal(a, b)
    say(2, mismatches == 0, f"identity plan bit-identical on 20 episodes x 3 variants ({mismatches} mismatches)")
    assert mismatches == 0


def test_3_auc_oracle(say):
    ok, secs, summary = run_pytest("tests/test_analysis.py::test_auc_brute_force_500_instances")
    say(3, ok, f"AUC vs pairwise oracle, complement and monotone invariance on 500 instances: {summary}")
    assert ok


def test_4_probe_oracles(say):
    ok, secs, summary = run_pytest(
        "tests/test_probing.py::test_linear_probe_matches_irls",
        "tests/test_probing.py::test_knn_matches_brute_force_scan",
        "tests/test_probing.py::test_decoder_probe_zero_steps_is_early_exit_readout",
    )
    say(4, ok, f"linear vs IRLS (10 problems), KNN vs brute scan, zero-step decoder vs early exit: {summary}")
    assert ok


def test_5_win_tie_lose(say):
    ok, secs, summary = run_pytest(
        "tests/test_analysis.py::test_wtl_boundaries",
        "tests/test_analysis.py::test_wtl_counts_and_threshold_validation",
        "tests/test_analysis.py::test_wtl_order_invariant",
    )
    say(5, ok, f"tie-band boundaries and order invariance: {summary}")
    assert ok


# end-to-end runs shared by criteria 6-9


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    runs = []
    for name in ("run1", "run2"):
        start = time.perf_counter()
        res = subprocess.run(
            [sys.executable, "-m", "layerlab.cli", "report", "--out", str(root / name)],
            cwd=root, env=env, capture_output=True, text=True, timeout=2 * CLI_BUDGET,
        )
        runs.append({"dir": root / name, "rc": res.returncode, "seconds": time.perf_counter() - start,
                     "log": res.stderr})
    return runs


def read_matrix(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) if v else np.nan for v in r[1:]] for r in rows])


def read_records(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_6_desk_scale_training(say, cli_runs):
    run = cli_runs[0]
    manifest = json.loads((run["dir"] / "manifest.json").read_text())
    model = load_checkpoint(run["dir"] / "model.llab")
    cfg = model.config
    prior = TaskPrior(feature_count_range=(2, 8), sample_count_range=(150, 200), teacher=Teacher.LINEAR, noise_std=0.1)
    aucs = []
    for i in range(50):
        rng = cell_rng(12345, "held-out", i)
        ep = standardize_episode(split_episode(sample_task(prior, rng), 0.5, 0.1, rng=rng))
        aucs.append(roc_auc(forward(model, ep).scores, ep.query_y))
    mean_auc = average_auc(aucs)
    secs = manifest["training"]["seconds"]
    shape_ok = (cfg.variant, cfg.layers, cfg.model_dim) == ("row", 6, 64) and manifest["training"]["steps"] <= 3000
    ok = run["rc"] == 0 and shape_ok and mean_auc >= 0.85 and secs < TRAIN_BUDGET
    say(6, ok, f"ROW L={cfg.layers} d={cfg.model_dim}, {manifest['training']['steps']} steps in {secs:.0f}s "
               f"(budget {TRAIN_BUDGET}s), held-out mean AUC {mean_auc:.4f} over 50 tasks (need >= 0.85)")
    assert ok


def test_7_trends_reported(say, cli_runs):
    out = cli_runs[0]["dir"]
    records = read_records(out / "records.csv")
    manifest = json.loads((out / "manifest.json").read_text())
    L = manifest["n_layers"]

    def mean_of(plan, key):
        vals = [float(r[key]) for r in records if r["plan"] == plan and r[key]]
        return float(np.mean(np.abs(vals) if key == "delta" else vals))

    skip_first, skip_last = mean_of("skip:0", "auc"), mean_of(f"skip:{L - 1}", "auc")
    a = skip_first < skip_last
    tri = {k: (v["upper_mean"], v["lower_mean"]) for k, v in manifest["transfer"].items()}
    b = all(up >= low for up, low in tri.values())
    repeat = [abs(float(r["delta"])) for r in records if r["plan"].startswith("repeat:") and r["delta"]]
    rep_mean, swap01 = float(np.mean(repeat)), mean_of("swap:0-1", "delta")
    c = rep_mean <= swap01
    detail = (
        f"(a) skip first AUC {skip_first:.4f} vs skip last {skip_last:.4f}: {'observed' if a else 'not observed'}; "
        f"(b) transfer upper >= lower {', '.join(f'{k} {u:.3f}/{l:.3f}' for k, (u, l) in tri.items())}: "
        f"{'observed' if b else 'not observed'}; "
        f"(c) repeat mean |delta| {rep_mean:.4f} vs swap 0-1 {swap01:.4f}: {'observed' if c else 'not observed'} "
        "[reported only]"
    )
    say(7, a and b and c, detail)


def test_8_end_to_end(say, cli_runs):
    r1, r2 = cli_runs
    csvs1 = {p.name: p.read_bytes() for p in sorted(r1["dir"].glob("*.csv"))}
    csvs2 = {p.name: p.read_bytes() for p in sorted(r2["dir"].glob("*.csv"))}
    manifest = json.loads((r1["dir"] / "manifest.json").read_text())
    try:
        jsonschema.validate(manifest, manifest_schema())
        jsonschema.validate(json.loads((r2["dir"] / "manifest.json").read_text()), manifest_schema())
        schema_ok = True
    except jsonschema.ValidationError:
        schema_ok = False
    grids = {"skip", "swap", "repeat", "early-exit", "probe", "cosine"}
    complete = (
        set(manifest["interventions"]) == grids
        and len(manifest["datasets"]) == 5
        and manifest["counts"]["completed_cells"] == manifest["counts"]["expected_cells"]
        and all((r1["dir"] / f).exists() for f in manifest["files"])
    )
    identical = bool(csvs1) and csvs1 == csvs2
    fast = max(r1["seconds"], r2["seconds"]) < CLI_BUDGET
    ok = r1["rc"] == r2["rc"] == 0 and complete and identical and schema_ok and fast
    say(8, ok, f"CLI runs {r1['seconds']:.0f}s and {r2['seconds']:.0f}s (budget {CLI_BUDGET}s), exit {r1['rc']}/{r2['rc']}, "
               f"{len(csvs1)} CSVs byte-identical: {identical}, manifest schema-valid: {schema_ok}, "
               f"all grids on 5 datasets: {complete}")
    assert ok


def test_9_cosine_properties(say, cli_runs):
    matrices = [read_matrix(run["dir"] / "cosine.csv") for run in cli_runs]
    # the per-dataset matrices behind the emitted average
    cfg = ExperimentConfig.from_tree({})
    model = load_checkpoint(cli_runs[0]["dir"] / "model.llab")
    datasets, _ = load_datasets(cfg)
    for ds in datasets:
        stack = forward(model, ds.episode, capture=True).stack
        matrices.append(_cosine_cell(ds, stack).matrices["cosine"])
    bad = 0
    for m in matrices:
        finite = np.all(np.isfinite(m))
        sym = np.array_equal(m, m.T)
        diag = np.all(np.abs(np.diag(m) - 1.0) <= 1e-12)
        bounded = np.all((m >= -1) & (m <= 1))
        bad += not (finite and sym and diag and bounded)
    say(9, bad == 0, f"{len(matrices)} cosine matrices (2 emitted, {len(datasets)} per-dataset) symmetric, "
                     f"unit diagonal, within [-1, 1]; {bad} violations")
    assert bad == 0
