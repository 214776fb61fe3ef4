"""Verification gate for smoothing actions: proximity and direction checks,
correction messages, and the bounded re-query protocol.

Angles follow the world frame everywhere: for a pick pixel (col, row) and a
center pixel, the outward direction is ``atan2(center_row - pick_row,
pick_col - center_col)`` because image rows grow downward.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .percept import AnnotatedImage, PerceptSummary, annotate_subgoal_arrow
from .render import Camera, Observation

REASON_OK = "OK"
REASON_TOO_CLOSE_PRIOR = "TooCloseToPriorPick"
REASON_TOO_CLOSE_SYMMETRIC = "TooCloseToSymmetricPoint"
REASON_DIRECTION = "DirectionDeviates"

_DEFAULT_PROXIMITY_PX = 0.2 * 0.3125 / Camera().meters_per_pixel


class VerifyError(Exception):
    pass


class DegeneratePick(VerifyError):
    """Pick coincides with the fabric center; the outward direction is
    undefined and the caller should re-query."""


class ProposerExhausted(VerifyError):
    """Both the strict and relaxed phases ran out of queries.

    Carries the full ``query_log`` for the rollout archive.
    """

    def __init__(self, message: str, query_log: "QueryLog"):
        super().__init__(message)
        self.query_log = query_log


@dataclass(frozen=True)
class VerifyParams:
    proximity_threshold: float = _DEFAULT_PROXIMITY_PX  # pixels
    direction_tolerance: float = math.pi / 4 + 1e-6  # radians
    max_queries: int = 3

    def __post_init__(self) -> None:
        if self.proximity_threshold <= 0:
            raise ValueError("proximity_threshold must be positive")
        if not 0 < self.direction_tolerance <= math.pi / 2:
            raise ValueError("direction_tolerance must be in (0, pi/2]")
        if self.max_queries < 1:
            raise ValueError("max_queries must be >= 1")


def default_params(edge_length: float, camera: Camera | None = None) -> VerifyParams:
    """Parameters with the proximity threshold scaled to 20% of the flat edge."""
    camera = camera or Camera()
    return VerifyParams(
        proximity_threshold=0.2 * edge_length / camera.meters_per_pixel
    )


@dataclass
class CheckResult:
    passed: bool
    reason: str
    correction_text: str

    def __post_init__(self) -> None:
        assert self.passed == (self.reason == REASON_OK)
        assert (self.correction_text == "") == self.passed


def _ok() -> CheckResult:
    return CheckResult(passed=True, reason=REASON_OK, correction_text="")


def proximity_check(
    pick, prior_pick, center, params: VerifyParams | None = None
) -> CheckResult:
    """Pick must be far from the prior pick and from its point reflection
    about the center. Passes trivially when there is no prior pick."""
    params = params or VerifyParams()
    if prior_pick is None:
        return _ok()
    px, py = float(pick[0]), float(pick[1])
    qx, qy = float(prior_pick[0]), float(prior_pick[1])
    sx, sy = 2.0 * center[0] - qx, 2.0 * center[1] - qy
    d_prior = math.hypot(px - qx, py - qy)
    d_sym = math.hypot(px - sx, py - sy)
    if min(d_prior, d_sym) >= params.proximity_threshold:
        return _ok()
    if d_prior <= d_sym:
        reason = REASON_TOO_CLOSE_PRIOR
        what = "the previous picking point"
        dist = d_prior
    else:
        reason = REASON_TOO_CLOSE_SYMMETRIC
        what = "the symmetric point of the previous picking point about the center"
        dist = d_sym
    text = (
        f"The chosen picking point ({pick[0]}, {pick[1]}) is only {dist:.1f} px "
        f"from {what}; it must be at least {params.proximity_threshold:.1f} px "
        "away. Choose a different corner farther from both points."
    )
    return CheckResult(passed=False, reason=reason, correction_text=text)


def outward_angle(pick, center) -> float:
    """World-frame angle of the ray from the center through the pick pixel."""
    dx = float(pick[0]) - float(center[0])
    dy = float(center[1]) - float(pick[1])
    if dx == 0.0 and dy == 0.0:
        raise DegeneratePick(f"pick {tuple(pick)} coincides with center")
    return math.atan2(dy, dx)


def circular_difference(a: float, b: float) -> float:
    """Absolute angle difference folded into [0, pi]."""
    d = math.fmod(abs(a - b), 2.0 * math.pi)
    return min(d, 2.0 * math.pi - d)


def direction_check(
    pick, center, proposed_angle: float, params: VerifyParams | None = None
) -> CheckResult:
    """The proposed pull must roughly continue the center-to-pick ray."""
    params = params or VerifyParams()
    outward = outward_angle(pick, center)
    diff = circular_difference(proposed_angle, outward)
    if diff <= params.direction_tolerance:
        return _ok()
    text = (
        f"The proposed pull angle {proposed_angle:.3f} rad deviates by "
        f"{diff:.3f} rad from the outward direction {outward:.3f} rad "
        f"(center to picking point); at most {params.direction_tolerance:.3f} rad "
        "is allowed. Pull away from the fabric center, not across or into it."
    )
    return CheckResult(passed=False, reason=REASON_DIRECTION, correction_text=text)


@dataclass
class SmoothingContext:
    """Everything a smoothing proposer may look at for one decision."""

    summary: PerceptSummary
    observation: Observation
    annotated: AnnotatedImage | None = None
    prior_pick: Optional[tuple[int, int]] = None
    prior_place: Optional[tuple[int, int]] = None
    edge_length: float = 0.3125  # meters, flat edge for pull-distance scaling


@dataclass
class Feedback:
    """Failure context handed back to the proposer on the next query."""

    correction_text: str
    failed_action_image: AnnotatedImage | None = None


@dataclass
class QueryEntry:
    phase: str  # "strict" | "relaxed"
    action: dict
    proximity: CheckResult | None
    direction: CheckResult | None
    note: str = ""
    accepted: bool = False

    def to_record(self) -> dict:
        def cr(x: CheckResult | None):
            return None if x is None else {
                "passed": x.passed,
                "reason": x.reason,
                "correction_text": x.correction_text,
            }

        return {
            "phase": self.phase,
            "action": self.action,
            "proximity": cr(self.proximity),
            "direction": cr(self.direction),
            "note": self.note,
            "accepted": self.accepted,
        }


@dataclass
class QueryLog:
    entries: list[QueryEntry] = field(default_factory=list)
    relaxed_engaged: bool = False

    def to_record(self) -> dict:
        return {
            "relaxed_engaged": self.relaxed_engaged,
            "entries": [e.to_record() for e in self.entries],
        }


ActionProposer = Callable[[SmoothingContext, Optional[Feedback]], object]


def _action_dict(action) -> dict:
    return {
        "pick_corner": list(action.pick_corner),
        "pull_angle": float(action.pull_angle),
        "pull_fraction": float(action.pull_fraction),
    }


def _failed_action_image(context: SmoothingContext, action) -> AnnotatedImage | None:
    """Arrow visualization of a rejected action, for the correction payload."""
    cam = context.observation.camera
    edge_px = context.edge_length / cam.meters_per_pixel
    c, r = action.pick_corner
    place_c = c + action.pull_fraction * edge_px * math.cos(action.pull_angle)
    place_r = r - action.pull_fraction * edge_px * math.sin(action.pull_angle)
    place = (
        int(min(max(round(place_c), 0), cam.width_px - 1)),
        int(min(max(round(place_r), 0), cam.height_px - 1)),
    )
    try:
        return annotate_subgoal_arrow(context.observation.rgb, (c, r), place)
    except Exception:  # drawing must never break the retry protocol
        return None


def run_verified_query(
    proposer: ActionProposer,
    context: SmoothingContext,
    params: VerifyParams | None = None,
):
    """Query the proposer until an action passes verification.

    Strict phase: up to ``max_queries`` proposals must pass both the proximity
    and direction checks; each failure feeds a correction message (and a
    rendered visualization of the failed action) into the next query. After
    ``max_queries`` consecutive failures the proximity check is dropped and a
    fresh ``max_queries`` budget applies to the direction check alone. Raises
    :class:`ProposerExhausted` when the relaxed phase also runs out.

    Returns ``(action, QueryLog)``. No action failing the direction check is
    ever returned, in either phase.
    """
    params = params or VerifyParams()
    if not context.summary.corners:
        raise ValueError("context has no detected corners")
    log = QueryLog()
    feedback: Feedback | None = None
    center = context.summary.center

    for phase in ("strict", "relaxed"):
        if phase == "relaxed":
            log.relaxed_engaged = True
        for _ in range(params.max_queries):
            action = proposer(context, feedback)
            prox = (
                proximity_check(action.pick_corner, context.prior_pick, center, params)
                if phase == "strict"
                else None
            )
            note = ""
            try:
                direc = direction_check(action.pick_corner, center, action.pull_angle, params)
            except DegeneratePick as exc:
                direc = None
                note = f"DegeneratePick: {exc}"
            entry = QueryEntry(
                phase=phase,
                action=_action_dict(action),
                proximity=prox,
                direction=direc,
                note=note,
            )
            log.entries.append(entry)
            prox_ok = prox is None or prox.passed
            dir_ok = direc is not None and direc.passed
            if prox_ok and dir_ok:
                entry.accepted = True
                return action, log
            corrections = []
            if prox is not None and not prox.passed:
                corrections.append(prox.correction_text)
            if direc is not None and not direc.passed:
                corrections.append(direc.correction_text)
            if note:
                corrections.append(
                    "The picking point coincides with the fabric center, so no "
                    "outward pull direction exists. Pick a corner away from the center."
                )
            feedback = Feedback(
                correction_text=" ".join(corrections),
                failed_action_image=_failed_action_image(context, action),
            )
    raise ProposerExhausted(
        f"no acceptable action after {len(log.entries)} queries "
        f"({params.max_queries} strict + {params.max_queries} relaxed)",
        query_log=log,
    )


__all__ = [
    "VerifyParams",
    "CheckResult",
    "SmoothingContext",
    "Feedback",
    "QueryEntry",
    "QueryLog",
    "DegeneratePick",
    "ProposerExhausted",
    "proximity_check",
    "direction_check",
    "outward_angle",
    "circular_difference",
    "run_verified_query",
    "default_params",
    "REASON_OK",
    "REASON_TOO_CLOSE_PRIOR",
    "REASON_TOO_CLOSE_SYMMETRIC",
    "REASON_DIRECTION",
]
