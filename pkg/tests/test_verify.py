"""Action verification protocol tests with scripted proposers."""

import math

import numpy as np
import pytest

from fabriclab import percept, render, verify
from fabriclab.policy import SmoothAction, random_propose

CORNERS = [(47, 47), (177, 47), (47, 177), (177, 177)]
CENTER = (112, 112)


def make_context(prior_pick=None, corners=None):
    cam = render.Camera()
    rgb = np.full((cam.height_px, cam.width_px, 3), 40, dtype=np.uint8)
    depth = np.full((cam.height_px, cam.width_px), cam.camera_height, dtype=np.float32)
    obs = render.Observation(rgb=rgb, depth=depth, camera=cam)
    mask = np.zeros((cam.height_px, cam.width_px), dtype=bool)
    mask[45:180, 45:180] = True
    summary = percept.PerceptSummary(
        corners=list(corners if corners is not None else CORNERS),
        bbox=((45, 45), (179, 179)),
        center=CENTER,
        mask=mask,
    )
    return verify.SmoothingContext(summary=summary, observation=obs, prior_pick=prior_pick)


def outward(pick):
    return verify.outward_angle(pick, CENTER)


def scripted(actions):
    """Proposer that replays a fixed action list, recording received feedback."""
    seen = []

    def propose(context, feedback):
        seen.append(feedback)
        return actions[min(len(seen) - 1, len(actions) - 1)]

    propose.seen = seen
    return propose


def test_proximity_passes_without_prior():
    res = verify.proximity_check((62, 61), None, CENTER)
    assert res.passed and res.reason == verify.REASON_OK


def test_proximity_too_close_to_prior():
    params = verify.VerifyParams(proximity_threshold=20.0)
    res = verify.proximity_check((62, 61), (60, 60), CENTER, params)
    assert not res.passed
    assert res.reason == verify.REASON_TOO_CLOSE_PRIOR
    assert f"{math.sqrt(5):.1f}" in res.correction_text
    assert "previous picking point" in res.correction_text


def test_proximity_too_close_to_symmetric_point():
    params = verify.VerifyParams(proximity_threshold=20.0)
    res = verify.proximity_check((164, 164), (60, 60), CENTER, params)
    assert not res.passed
    assert res.reason == verify.REASON_TOO_CLOSE_SYMMETRIC
    assert "symmetric" in res.correction_text


def test_proximity_equidistant_tie_blames_prior():
    params = verify.VerifyParams(proximity_threshold=80.0)
    res = verify.proximity_check(CENTER, (60, 60), CENTER, params)
    assert res.reason == verify.REASON_TOO_CLOSE_PRIOR


def test_proximity_respects_threshold_boundary():
    params = verify.VerifyParams(proximity_threshold=20.0)
    assert verify.proximity_check((60, 80), (60, 60), CENTER, params).passed
    assert not verify.proximity_check((60, 79), (60, 60), CENTER, params).passed


def test_proximity_reflection_symmetry():
    rng = np.random.default_rng(11)
    params = verify.VerifyParams(proximity_threshold=25.0)
    for _ in range(200):
        prior = tuple(rng.integers(0, 224, size=2).tolist())
        pick = tuple(rng.integers(0, 224, size=2).tolist())
        mirrored = (2 * CENTER[0] - pick[0], 2 * CENTER[1] - pick[1])
        res = verify.proximity_check(pick, prior, CENTER, params)
        mres = verify.proximity_check(mirrored, prior, CENTER, params)
        assert res.passed == mres.passed
        if not res.passed and res.reason != mres.reason:
            swap = {
                verify.REASON_TOO_CLOSE_PRIOR: verify.REASON_TOO_CLOSE_SYMMETRIC,
                verify.REASON_TOO_CLOSE_SYMMETRIC: verify.REASON_TOO_CLOSE_PRIOR,
            }
            assert mres.reason == swap[res.reason]


def test_outward_angle_cardinal_directions():
    assert outward((162, 112)) == pytest.approx(0.0)
    assert outward((112, 62)) == pytest.approx(math.pi / 2)
    assert outward((62, 112)) == pytest.approx(math.pi)
    assert outward((112, 162)) == pytest.approx(-math.pi / 2)
    assert outward((47, 47)) == pytest.approx(3 * math.pi / 4)


def test_outward_angle_degenerate_pick():
    with pytest.raises(verify.DegeneratePick):
        outward(CENTER)


def test_circular_difference_wraps():
    assert verify.circular_difference(0.1, 2 * math.pi - 0.1) == pytest.approx(0.2)
    assert verify.circular_difference(0.0, math.pi) == pytest.approx(math.pi)
    assert verify.circular_difference(-math.pi / 2, 3 * math.pi / 2) == pytest.approx(0.0)


def test_direction_check_examples():
    assert verify.direction_check((162, 112), CENTER, 0.0).passed
    res = verify.direction_check((162, 112), CENTER, math.pi)
    assert not res.passed and res.reason == verify.REASON_DIRECTION
    assert "outward" in res.correction_text
    # pi/4 sits exactly on the default tolerance; a bit beyond fails
    assert verify.direction_check((162, 112), CENTER, math.pi / 4).passed
    assert not verify.direction_check((162, 112), CENTER, math.pi / 4 + 0.1).passed


def test_params_validation():
    with pytest.raises(ValueError):
        verify.VerifyParams(proximity_threshold=0.0)
    with pytest.raises(ValueError):
        verify.VerifyParams(direction_tolerance=0.0)
    with pytest.raises(ValueError):
        verify.VerifyParams(direction_tolerance=math.pi)
    with pytest.raises(ValueError):
        verify.VerifyParams(max_queries=0)


def test_default_params_scale_with_edge_length():
    params = verify.default_params(0.3125)
    assert params.proximity_threshold == pytest.approx(0.2 * 0.3125 / 0.00235)
    bigger = verify.default_params(0.36875)
    assert bigger.proximity_threshold > params.proximity_threshold


def test_valid_action_accepted_first_query():
    # (177, 47) is far from both the prior pick and its reflection (47, 47)
    ctx = make_context(prior_pick=(177, 177))
    action = SmoothAction((177, 47), math.pi / 4, 0.5)
    got, log = verify.run_verified_query(scripted([action]), ctx)
    assert got is action
    assert len(log.entries) == 1
    assert not log.relaxed_engaged
    assert log.entries[0].accepted
    assert log.entries[0].phase == "strict"


def test_proximity_block_lifted_in_relaxed_phase():
    ctx = make_context(prior_pick=(177, 177))
    blocked = SmoothAction((177, 177), 7 * math.pi / 4, 0.5)
    proposer = scripted([blocked, blocked, blocked, blocked])
    got, log = verify.run_verified_query(proposer, ctx)
    assert got.pick_corner == (177, 177)
    assert log.relaxed_engaged
    assert len(log.entries) == 4
    assert [e.phase for e in log.entries] == ["strict"] * 3 + ["relaxed"]
    for e in log.entries[:3]:
        assert e.proximity.reason == verify.REASON_TOO_CLOSE_PRIOR
        assert e.direction.passed
    assert log.entries[-1].proximity is None
    assert log.entries[-1].accepted


def test_symmetric_block_lifted_in_relaxed_phase():
    ctx = make_context(prior_pick=(177, 177))
    blocked = SmoothAction((47, 47), 3 * math.pi / 4, 0.25)
    got, log = verify.run_verified_query(scripted([blocked] * 4), ctx)
    assert got.pick_corner == (47, 47)
    assert log.entries[0].proximity.reason == verify.REASON_TOO_CLOSE_SYMMETRIC
    assert log.relaxed_engaged


def test_direction_failure_never_returned():
    ctx = make_context(prior_pick=None)
    inward = SmoothAction((47, 47), 7 * math.pi / 4, 0.5)
    with pytest.raises(verify.ProposerExhausted) as exc_info:
        verify.run_verified_query(scripted([inward] * 10), ctx)
    log = exc_info.value.query_log
    assert len(log.entries) == 6
    assert log.relaxed_engaged
    for e in log.entries:
        assert not e.accepted
        assert e.direction.reason == verify.REASON_DIRECTION
    assert "6" in str(exc_info.value)


def test_feedback_carries_correction_and_arrow():
    ctx = make_context(prior_pick=(47, 47))
    blocked = SmoothAction((47, 47), 3 * math.pi / 4, 0.5)
    fine = SmoothAction((177, 177), 7 * math.pi / 4, 0.5)
    proposer = scripted([blocked, fine])
    got, log = verify.run_verified_query(proposer, ctx)
    assert got is fine
    assert proposer.seen[0] is None
    fb = proposer.seen[1]
    assert isinstance(fb, verify.Feedback)
    assert "px" in fb.correction_text
    assert fb.failed_action_image is not None
    assert fb.failed_action_image.metadata["pick"] == [47, 47]


def test_degenerate_pick_noted_and_retried():
    corners = CORNERS + [CENTER]
    ctx = make_context(prior_pick=None, corners=corners)
    degenerate = SmoothAction(CENTER, 0.0, 0.5)
    fine = SmoothAction((177, 47), 0.0, 0.25)
    proposer = scripted([degenerate, fine])
    got, log = verify.run_verified_query(proposer, ctx)
    assert got is fine
    assert len(log.entries) == 2
    assert log.entries[0].note.startswith("DegeneratePick")
    assert log.entries[0].direction is None
    assert "center" in proposer.seen[1].correction_text
    assert log.entries[1].accepted


def test_no_corners_rejected_up_front():
    ctx = make_context(corners=[])
    with pytest.raises(ValueError):
        verify.run_verified_query(scripted([SmoothAction((47, 47), 0.0, 0.1)]), ctx)


def test_query_log_serializes_to_plain_types():
    ctx = make_context(prior_pick=(177, 177))
    blocked = SmoothAction((177, 177), 7 * math.pi / 4, 0.5)
    _, log = verify.run_verified_query(scripted([blocked] * 4), ctx)
    record = log.to_record()
    assert record["relaxed_engaged"] is True
    assert len(record["entries"]) == 4
    entry = record["entries"][0]
    assert entry["action"]["pick_corner"] == [177, 177]
    assert entry["proximity"]["reason"] == verify.REASON_TOO_CLOSE_PRIOR
    import json

    json.dumps(record)


def test_random_proposals_obey_protocol_invariants():
    params = verify.VerifyParams(max_queries=3)
    accepted = 0
    for seed in range(40):
        ctx = make_context(prior_pick=CORNERS[seed % 4])
        rng_state = {"n": 0}

        def propose(context, feedback, seed=seed, rng_state=rng_state):
            rng_state["n"] += 1
            return random_propose(context.summary, seed * 100 + rng_state["n"])

        try:
            action, log = verify.run_verified_query(propose, ctx, params)
        except verify.ProposerExhausted as exc:
            assert len(exc.query_log.entries) == 2 * params.max_queries
            continue
        accepted += 1
        assert len(log.entries) <= 2 * params.max_queries
        assert verify.direction_check(
            action.pick_corner, ctx.summary.center, action.pull_angle, params
        ).passed
        final = log.entries[-1]
        assert final.accepted
        assert final.action["pull_fraction"] == action.pull_fraction
        for e in log.entries[:-1]:
            assert not e.accepted
    assert accepted >= 10
