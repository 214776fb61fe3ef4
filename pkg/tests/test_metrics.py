"""Metric tests: formula exactness, hand-computed statistics, dual-route coverage."""

import numpy as np
import pytest

from fabriclab import metrics, render, sim


@pytest.fixture(scope="module")
def flat_state():
    return sim.settle(sim.make_flat_cloth(sim.ClothSpec()))


def test_flat_coverage_is_one(flat_state):
    assert metrics.coverage(flat_state) == pytest.approx(1.0, abs=0.02)


def test_fold_coverage_half(flat_state):
    action = sim.WorldAction(
        pick=tuple(flat_state.positions[0]), place=tuple(flat_state.positions[-1])
    )
    folded = sim.execute_pick_place(flat_state, action)
    cov = metrics.coverage(folded)
    assert cov == pytest.approx(0.5, abs=0.05)
    # render-route and simulator-internal raster agree
    assert cov == pytest.approx(sim.projected_coverage(folded), abs=0.02)


def test_coverage_translation_invariant(flat_state):
    moved = flat_state.copy()
    moved.positions[:, 0] += 0.03
    moved.positions[:, 1] -= 0.02
    assert metrics.coverage(moved) == pytest.approx(
        metrics.coverage(flat_state), abs=0.01
    )


def test_coverage_out_of_view(flat_state):
    moved = flat_state.copy()
    moved.positions[:, 0] += 10.0
    with pytest.raises(render.ClothOutOfView):
        metrics.coverage(moved)


def test_normalized_improvement_formula():
    assert metrics.normalized_improvement(0.5, 0.5, 1.0) == 0.0
    assert metrics.normalized_improvement(1.0, 0.5, 1.0) == 1.0
    smax = 0.8
    assert metrics.normalized_improvement(0.65 * smax, 0.3 * smax, smax) == pytest.approx(0.5)
    # worsened coverage goes negative
    assert metrics.normalized_improvement(0.2, 0.4, 1.0) < 0


def test_normalized_improvement_random_triples_exact():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        s0 = rng.uniform(0.0, 0.9)
        smax = s0 + rng.uniform(1e-6, 1.0)
        s = rng.uniform(0.0, 1.2)
        expected = (s - s0) / (smax - s0)
        assert abs(metrics.normalized_improvement(s, s0, smax) - expected) < 1e-12


def test_normalized_improvement_degenerate():
    with pytest.raises(metrics.DegenerateStart):
        metrics.normalized_improvement(0.5, 0.9, 0.9)
    with pytest.raises(metrics.DegenerateStart):
        metrics.normalized_improvement(0.5, 0.95, 0.9)


def test_mean_particle_distance(flat_state):
    assert metrics.mean_particle_distance(flat_state, flat_state) == 0.0
    moved = flat_state.copy()
    moved.positions += np.array([0.003, 0.0, 0.004])
    assert metrics.mean_particle_distance(moved, flat_state) == pytest.approx(5.0)
    assert metrics.mean_particle_distance(
        flat_state, moved
    ) == metrics.mean_particle_distance(moved, flat_state)


def test_mean_particle_distance_spec_mismatch(flat_state):
    other = sim.make_flat_cloth(sim.ClothSpec(rows=10, cols=10))
    with pytest.raises(metrics.SpecMismatch):
        metrics.mean_particle_distance(flat_state, other)


def test_summarize_ni_hand_computed():
    assert metrics.summarize_ni([0.5]) == (0.5, 0.0)
    q50, spread = metrics.summarize_ni([0.1, 0.2, 0.3, 0.4, 0.5])
    assert q50 == pytest.approx(0.3)
    assert spread == pytest.approx(0.1)


def test_summarize_ni_permutation_invariant():
    rng = np.random.default_rng(3)
    vals = rng.uniform(-0.2, 1.0, size=17)
    base = metrics.summarize_ni(vals)
    for _ in range(5):
        rng.shuffle(vals)
        assert metrics.summarize_ni(vals) == base


def test_summarize_ni_empty():
    with pytest.raises(metrics.EmptyInput):
        metrics.summarize_ni([])


def test_summarize_mean_std():
    assert metrics.summarize_mean_std([5, 5, 5]) == (5.0, 0.0)
    assert metrics.summarize_mean_std([0, 10]) == (5.0, 5.0)
    mean1, std1 = metrics.summarize_mean_std([1.0, 2.0, 4.0])
    mean3, std3 = metrics.summarize_mean_std([3.0, 6.0, 12.0])
    assert mean3 == pytest.approx(3 * mean1)
    assert std3 == pytest.approx(3 * std1)
    with pytest.raises(metrics.EmptyInput):
        metrics.summarize_mean_std([])


def test_metrics_record_roundtrip():
    rec = metrics.MetricsRecord(s0=0.4, smax=1.0, s=0.9, ni=0.83, coverage_trace=[0.4, 0.9])
    d = rec.to_record()
    assert d["ni"] == 0.83
    assert d["coverage_trace"] == [0.4, 0.9]
    assert d["particle_error_mm"] is None
