"""Acceptance criteria, each checked at its stated tolerance.

Every test prints one ``PASS`` or ``FAIL`` line (also repeated in the pytest
terminal summary). Simulation-backed criteria use all available cores.
"""

import itertools
import os
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import quad

from pofrm.basis import make_basis_2d
from pofrm.innerprod import psi_block_1d, psi_block_2d
from pofrm.metrics import auc, imse
from pofrm.simulation import GAP_GRID, PCT_GRID, ScenarioConfig, beta1, run_replicate, run_scenario

from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.slow

JOBS = os.cpu_count() or 1
TESTS = Path(__file__).parent


def verdict(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def means(reports, method, *keys):
    ok = [r for r in reports if r.method == method and r.status == "ok"]
    out = {k: float(np.mean([r.values[k] if k in r.values else r.times[k[5:]] for r in ok])) for k in keys}
    return out, len(ok)


def test_criterion_1_study1_reference_scenario():
    cfg = ScenarioConfig(study=1, family="gaussian", pct_incomplete=0.2, gap_size=0.05,
                         n_subjects=100, replicates=100, seed=7)
    m, n_ok = means(run_scenario(cfg, methods=("pofrm",), jobs=JOBS), "pofrm", "imse_beta1", "imse_beta2", "rmse")
    ok = (n_ok == 100 and 0.005 <= m["imse_beta1"] <= 0.020 and 0.015 <= m["imse_beta2"] <= 0.060
          and 0.40 <= m["rmse"] <= 0.65)
    verdict(1, ok, f"{n_ok}/100 fits; IMSE(b1)={m['imse_beta1']:.3g} in [0.005, 0.020]; "
                   f"IMSE(b2)={m['imse_beta2']:.3g} in [0.015, 0.060]; RMSE={m['rmse']:.3g} in [0.40, 0.65]")


def test_criterion_2_degradation_ordering():
    cfg = ScenarioConfig(study=1, family="gaussian", pct_incomplete=0.8, gap_size=0.15,
                         n_subjects=100, replicates=100, seed=11)
    reports = run_scenario(cfg, methods=("pofrm", "pofrm_i"), jobs=JOBS)
    a, na = means(reports, "pofrm", "rmse")
    b, nb = means(reports, "pofrm_i", "rmse")
    ratio = b["rmse"] / a["rmse"]
    ok = na == nb == 100 and a["rmse"] < b["rmse"] and ratio >= 2.0
    verdict(2, ok, f"RMSE POFRM={a['rmse']:.4g} ({na} fits), POFRM-I={b['rmse']:.4g} ({nb} fits); "
                   f"ratio {ratio:.3g} (need >= 2)")


def test_criterion_3_study2_binomial():
    base = ScenarioConfig(study=2, family="binomial", n_subjects=100, replicates=30, seed=13)
    rows = []
    for p, g in itertools.product(PCT_GRID[2], GAP_GRID):
        reports = run_scenario(replace(base, pct_incomplete=p, gap_size=g), methods=("pofrm",), jobs=JOBS)
        m, _ = means(reports, "pofrm", "auc", "misclassification")
        rows.append((p, g, m["auc"], m["misclassification"]))
    hits = [r for r in rows if 0.80 <= r[2] <= 0.90 and 14 <= r[3] <= 23]
    best = max(rows, key=lambda r: r[2])
    verdict(3, bool(hits), f"{len(hits)}/9 scenarios with AUC in [0.80, 0.90] and misclassification in [14, 23]%; "
                           f"best AUC {best[2]:.3g} (misclassification {best[3]:.3g}%) at {best[0]:.0%}/{best[1]:.0%}")


def test_criterion_4_timing_ratio_on_surfaces():
    # single process so that wall times are not inflated by contention
    base = ScenarioConfig(study=2, family="gaussian", n_subjects=100, replicates=5, seed=17)
    ratios = []
    for p, g in itertools.product(PCT_GRID[2], GAP_GRID):
        reports = run_scenario(replace(base, pct_incomplete=p, gap_size=g), methods=("pofrm", "pofrm_i"), jobs=1)
        a, _ = means(reports, "pofrm", "time_total")
        b, _ = means(reports, "pofrm_i", "time_total")
        ratios.append(b["time_total"] / a["time_total"])
    verdict(4, min(ratios) >= 2.0, f"POFRM-I/POFRM wall-time ratio over 9 surface scenarios: "
                                   f"min {min(ratios):.3g}, max {max(ratios):.3g} (need >= 2 everywhere)")


PROPERTY_TESTS = [
    "test_basis.py::test_partition_of_unity_and_local_support",
    "test_basis.py::test_second_difference_annihilates_constants_and_ramps",
    "test_basis.py::test_second_difference_null_space_is_two_dimensional",
    "test_smoothing.py::test_masked_fit_equals_row_deleted_fit",
    "test_smoothing.py::test_surface_masked_fit_equals_row_deleted_fit",
    "test_smoothing.py::test_row_deletion_equivalence_over_random_masks",
    "test_mixedmodel.py::test_orthogonality_and_g_inverse_pattern",
    "test_mixedmodel.py::test_fixed_tau_matches_closed_form",
    "test_model.py::test_full_observation_matches_classical_pipeline",
    "test_baseline.py::test_observed_values_are_untouched",
    "test_simulation.py::test_replay_is_bit_identical",
    "test_simulation.py::test_results_do_not_depend_on_parallelism",
    "test_cli.py::test_same_seed_gives_identical_replicate_files",
]


def test_criterion_5_property_suite():
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           *[str(TESTS / t) for t in PROPERTY_TESTS]],
                          capture_output=True, text=True, cwd=TESTS.parent)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    verdict(5, proc.returncode == 0, f"{len(PROPERTY_TESTS)} property tests: {summary}")


def test_criterion_6_oracles():
    t = np.linspace(0, 1, 2001)
    want = quad(lambda s: beta1(s) ** 2, 0, 1, epsabs=1e-15, limit=200)[0]
    imse_err = abs(imse(beta1(t), np.zeros_like(t), t) - want)

    g1, g2 = np.linspace(0, 1, 20), np.linspace(0, 1, 20)
    cov, coef = make_basis_2d((0, 1), (0, 1), (10, 10)), make_basis_2d((0, 1), (0, 1), (8, 8))
    full = psi_block_2d((g1, g2), np.ones((20, 20), bool), cov, coef).matrix
    kron = np.kron(psi_block_1d(g2, np.ones(20, bool), cov.basis_t2, coef.basis_t2).matrix,
                   psi_block_1d(g1, np.ones(20, bool), cov.basis_t1, coef.basis_t1).matrix)
    psi_err = float(np.abs(full - kron).max())

    rng = np.random.default_rng(0)
    auc_err = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        scores = rng.integers(-4, 5, n).astype(float)
        pos, neg = scores[labels == 1], scores[labels == 0]
        pairs = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg) / (pos.size * neg.size)
        auc_err = max(auc_err, abs(auc(labels, scores) - pairs))
    ok = imse_err <= 1e-7 and psi_err <= 1e-8 and auc_err == 0.0
    verdict(6, ok, f"IMSE oracle {want:.6g} off by {imse_err:.2g} (<= 1e-7); Kronecker Psi off by {psi_err:.2g} "
                   f"(<= 1e-8); AUC vs pair enumeration on 500 datasets off by {auc_err:.2g}")


def test_criterion_7_two_group_surfaces():
    cfg = ScenarioConfig(study=2, family="binomial", generator="two_group", n_subjects=200,
                         pct_incomplete=1.0, gap_size=0.10, group_means=((0.3, 0.35), (-0.3, -0.35)), seed=19)
    acc, aucs = [], []
    for rep in range(10):
        (r,) = run_replicate(cfg, rep, methods=("pofrm",))
        assert r.status == "ok", r.message
        acc.append(1 - r.values["misclassification"] / 100)
        aucs.append(r.values["auc"])
    ok = np.mean(acc) >= 0.85 and np.mean(aucs) >= 0.90
    verdict(7, ok, f"10 replicates, all surfaces gapped: accuracy {np.mean(acc):.4g} (>= 0.85), "
                   f"AUC {np.mean(aucs):.4g} (>= 0.90)")
