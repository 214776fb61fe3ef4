"""Coverage, normalized improvement, particle distance, and report statistics."""

import math
from dataclasses import dataclass, field

import numpy as np

from .render import Camera, mask_from_depth, render_topdown
from .sim import ClothState, flat_area

COVERAGE_SLACK = 0.02  # rasterization overcount allowance above 1.0


class MetricsError(Exception):
    pass


class DegenerateStart(MetricsError):
    """Normalized improvement is undefined when smax <= s0."""


class SpecMismatch(MetricsError):
    """Particle distance needs identical cloth specs (index correspondence)."""


class EmptyInput(MetricsError):
    """A summary statistic of zero values."""


@dataclass
class MetricsRecord:
    """Per-rollout metric bundle; coverages are fractions of flat area."""

    s0: float
    smax: float
    s: float = 0.0
    ni: float | None = None
    particle_error_mm: float | None = None
    coverage_trace: list[float] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "s0": self.s0,
            "smax": self.smax,
            "s": self.s,
            "ni": self.ni,
            "particle_error_mm": self.particle_error_mm,
            "coverage_trace": list(self.coverage_trace),
        }


def coverage(state: ClothState, camera: Camera | None = None) -> float:
    """Projected cloth area over flat area, measured by rendered mask pixels.

    Clipped to [0, 1 + COVERAGE_SLACK]; raises the renderer's ClothOutOfView
    if the state does not fit the camera.
    """
    camera = camera or Camera()
    obs = render_topdown(state, camera)
    mask = mask_from_depth(obs)
    area = float(mask.sum()) * camera.meters_per_pixel**2
    return max(0.0, min(area / flat_area(state.spec), 1.0 + COVERAGE_SLACK))


def normalized_improvement(s: float, s0: float, smax: float) -> float:
    """(s - s0) / (smax - s0); negative when coverage worsened."""
    if smax <= s0:
        raise DegenerateStart(f"smax ({smax}) must exceed s0 ({s0})")
    return (s - s0) / (smax - s0)


def mean_particle_distance(achieved: ClothState, goal: ClothState) -> float:
    """Mean Euclidean distance between corresponding particles, millimeters."""
    if achieved.spec != goal.spec:
        raise SpecMismatch(
            f"achieved spec {achieved.spec} differs from goal spec {goal.spec}"
        )
    d = np.linalg.norm(achieved.positions - goal.positions, axis=1)
    return float(d.mean() * 1000.0)


def _nearest_rank(sorted_values: np.ndarray, pct: float) -> float:
    n = len(sorted_values)
    rank = max(1, math.ceil(pct / 100.0 * n))
    return float(sorted_values[rank - 1])


def summarize_ni(values) -> tuple[float, float]:
    """Median and percentile spread of a normalized-improvement sample.

    Uses nearest-rank percentiles; the spread is
    max(|Q50 - Q25|, |Q75 - Q50|), matching the reporting convention of the
    experiment tables.
    """
    vals = np.sort(np.asarray(list(values), dtype=float))
    if len(vals) == 0:
        raise EmptyInput("summarize_ni of an empty sequence")
    q25 = _nearest_rank(vals, 25)
    q50 = _nearest_rank(vals, 50)
    q75 = _nearest_rank(vals, 75)
    return q50, max(abs(q50 - q25), abs(q75 - q50))


def summarize_mean_std(values) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation."""
    vals = np.asarray(list(values), dtype=float)
    if len(vals) == 0:
        raise EmptyInput("summarize_mean_std of an empty sequence")
    return float(vals.mean()), float(vals.std(ddof=0))


__all__ = [
    "MetricsRecord",
    "MetricsError",
    "DegenerateStart",
    "SpecMismatch",
    "EmptyInput",
    "coverage",
    "normalized_improvement",
    "mean_particle_distance",
    "summarize_ni",
    "summarize_mean_std",
    "COVERAGE_SLACK",
]
