"""The nine acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line (also repeated in the terminal
summary by ``conftest.py``). Criterion 7 trains two models for 500
iterations and takes several minutes.
"""

import time

import pytest

from bdhnet import checks

LINES: dict[int, str] = {}
_trained: dict = {}


def report(n: int, results) -> None:
    results = results if isinstance(results, list) else [results]
    ok = all(r.passed for r in results)
    name = checks.ACCEPTANCE[n][0]
    if len(results) == 1:
        body = results[0].line().split(" ", 1)[1]
    else:
        worst = max(results, key=lambda r: r.value)
        secs = sum(r.seconds for r in results)
        body = (f"{len(results)} groups, worst {worst.name} value={worst.value:.3e} "
                f"limit={worst.limit:g} time={secs:.1f}s")
    line = f"{'PASS' if ok else 'FAIL'} criterion {n} ({name}): {body}"
    LINES[n] = line
    print(line)
    for r in results if len(results) > 1 else []:
        print("    " + r.line())
    assert ok, line


def test_criterion_1_physics_oracle():
    r = checks.edi_roundtrip(n_scenes=5, size=64, frames=9, contrast=0.2)
    report(1, r)
    assert r.seconds < 10.0


def test_criterion_2_gradient_fidelity():
    t0 = time.perf_counter()
    res = checks.gradcheck(n_coords=30, limit=1e-4)
    total = time.perf_counter() - t0
    assert {r.name[len("gradcheck["):-1] for r in res} >= {
        "encoder", "snn_synapses", "snn_ncm", "rbam_offsets", "attention", "fusion", "decoder"}
    report(2, res)
    assert total < 60.0, f"took {total:.1f}s"


def test_criterion_3_ncm_firing_law():
    report(3, checks.ncm_firing_law(n=10_000))


def test_criterion_4_lif_equivalence():
    report(4, checks.lif_equivalence(n=1000, steps=12, tol=1e-12))


def test_criterion_5_mask_and_gates():
    report(5, checks.mask_and_gates())


def test_criterion_6_deformable_degeneracy():
    report(6, checks.deformable_degeneracy())


@pytest.mark.slow
def test_criterion_7_toy_training():
    report(7, checks.toy_training(iterations=500, margin_db=3.0, ablation=True, keep=_trained))


@pytest.mark.slow
def test_trained_mask_centroid_tracks_motion():
    """Property check on the model trained for criterion 7 (trained here if that test was skipped)."""
    if "full" not in _trained:
        checks.toy_training(iterations=500, ablation=False, keep=_trained)
    r = checks.mask_centroid(_trained["full"], n_scenes=10, radius=3, min_rate=0.9)
    print(r.line())
    assert r.passed, r.line()


def test_criterion_8_determinism_and_round_trips():
    report(8, checks.determinism_roundtrips())


def test_criterion_9_metrics():
    report(9, checks.metric_oracles())
