"""Rollout orchestration: config validation, ablation switches, scripted chat
rollouts, archives, reports, and reproducibility."""

import json
import math
import pathlib
import re

import numpy as np
import pytest

from fabriclab import harness, policy
from fabriclab.harness import RolloutConfig, RolloutRecord, StepRecord
from fabriclab.metrics import EmptyInput, MetricsRecord, normalized_improvement
from fabriclab.verify import REASON_DIRECTION, REASON_TOO_CLOSE_PRIOR


@pytest.fixture(scope="module")
def heuristic_record(tmp_path_factory):
    adir = tmp_path_factory.mktemp("smooth-archive")
    config = RolloutConfig(kind="smooth", backend="heuristic", max_actions=5, seed=3)
    return harness.run_smoothing_rollout(config, archive_dir=adir)


@pytest.fixture(scope="module")
def oracle_fold_record(task_cache, tmp_path_factory):
    adir = tmp_path_factory.mktemp("fold-archive")
    config = RolloutConfig(kind="fold:DoubleTriangle", backend="oracle", seed=0)
    return harness.run_folding_rollout(config, archive_dir=adir, cache_dir=task_cache)


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------


def test_config_rejects_bad_kind():
    with pytest.raises(harness.ConfigError):
        RolloutConfig(kind="tidy")
    with pytest.raises(harness.ConfigError):
        RolloutConfig(kind="fold:Origami")


def test_config_rejects_backend_kind_mismatch():
    with pytest.raises(harness.ConfigError):
        RolloutConfig(kind="smooth", backend="oracle")
    with pytest.raises(harness.ConfigError):
        RolloutConfig(kind="smooth", backend="llm:in-context")
    with pytest.raises(harness.ConfigError):
        RolloutConfig(kind="fold:DoubleTriangle", backend="heuristic")


def test_config_rejects_mismatched_ablations():
    with pytest.raises(harness.ConfigError):
        RolloutConfig(kind="smooth", ablations=("no-arrow",))
    with pytest.raises(harness.ConfigError):
        RolloutConfig(
            kind="fold:DoubleTriangle", backend="oracle", ablations=("no-eval-module",)
        )
    with pytest.raises(harness.ConfigError):
        RolloutConfig(kind="smooth", ablations=("no-preprocess", "no-preprocess"))


def test_config_budget_rules():
    assert RolloutConfig(kind="smooth").max_actions == 10
    assert RolloutConfig(kind="fold:AllCornersInward", backend="oracle").max_actions == 4
    with pytest.raises(harness.ConfigError):
        RolloutConfig(kind="smooth", max_actions=7)
    with pytest.raises(harness.ConfigError):
        RolloutConfig(kind="fold:DoubleTriangle", backend="oracle", max_actions=3)
    with pytest.raises(harness.ConfigError):
        RolloutConfig(kind="smooth", trials=5)
    with pytest.raises(harness.ConfigError):
        RolloutConfig(kind="smooth", size_index=2)
    with pytest.raises(harness.ConfigError):
        RolloutConfig(kind="fold:DoubleTriangle", backend="oracle", trials=0)
    with pytest.raises(harness.ConfigError):
        RolloutConfig(kind="fold:DoubleTriangle", backend="oracle", size_index=10)


def test_config_roundtrip_and_unknown_keys():
    config = RolloutConfig(
        kind="fold:DoubleStraight", backend="random", seed=7, trials=2, rotation_deg=30.0
    )
    assert RolloutConfig.from_dict(config.to_dict()) == config
    with pytest.raises(harness.ConfigError):
        RolloutConfig.from_dict({"kind": "smooth", "budget": 5})
    with pytest.raises(harness.ConfigError):
        RolloutConfig.from_dict({"backend": "random"})


def test_rollout_ids_are_distinct_and_path_safe():
    configs = [RolloutConfig(kind="smooth", seed=0)]
    for flag in harness.SMOOTHING_ABLATIONS:
        configs.append(RolloutConfig(kind="smooth", seed=0, ablations=(flag,)))
    configs.append(RolloutConfig(kind="fold:DoubleTriangle", backend="oracle", seed=0))
    for flag in harness.FOLDING_ABLATIONS:
        configs.append(
            RolloutConfig(
                kind="fold:DoubleTriangle", backend="llm:zero-shot", seed=0,
                ablations=(flag,),
            )
        )
    ids = [c.rollout_id() for c in configs]
    assert len(set(ids)) == len(ids)
    for rid in ids:
        assert re.fullmatch(r"[\w.+-]+", rid), rid


# ---------------------------------------------------------------------------
# Record invariants
# ---------------------------------------------------------------------------


def _final(ni=0.0):
    return MetricsRecord(s0=0.5, smax=1.0, s=0.5 + 0.5 * ni, ni=ni)


def test_record_rejects_budget_overflow():
    config = RolloutConfig(kind="smooth", max_actions=5)
    steps = [StepRecord(index=i) for i in range(6)]
    with pytest.raises(harness.HarnessError):
        RolloutRecord(config=config, steps=steps, final=_final())


def test_record_budget_is_per_trial():
    config = RolloutConfig(kind="fold:DoubleTriangle", backend="oracle", trials=2)
    steps = [StepRecord(index=i, trial=0) for i in range(2)]
    steps += [StepRecord(index=i, trial=1) for i in range(3)]
    with pytest.raises(harness.HarnessError):
        RolloutRecord(config=config, steps=steps, final=_final())


def test_record_requires_accepted_verification():
    executed = StepRecord(index=0, action={"pick": [0, 0, 0], "place": [0, 0, 0]})
    config = RolloutConfig(kind="smooth", max_actions=5)
    with pytest.raises(harness.HarnessError):
        RolloutRecord(config=config, steps=[executed], final=_final())
    ablated = RolloutConfig(kind="smooth", max_actions=5, ablations=("no-eval-module",))
    RolloutRecord(config=ablated, steps=[executed], final=_final())


# ---------------------------------------------------------------------------
# Scripted chat responders
# ---------------------------------------------------------------------------

_MENU_LINE = re.compile(r"^\s*(\d+): \((\d+), (\d+)\)$", re.MULTILINE)
_CENTER_LINE = re.compile(r"Fabric center: \((\d+), (\d+)\)")
_FOLD_CORNER_LINE = re.compile(r"^\s*- \((\d+), (\d+)\)$", re.MULTILINE)


def _menu_angle(value):
    k = round(value / (math.pi / 4)) % 8
    return policy.PULL_ANGLES[k]


class _OutwardResponder:
    """Answers smoothing prompts with an outward pull from a rotating corner."""

    def __init__(self, fraction=0.25):
        self.fraction = fraction
        self.calls = 0

    def pick_index(self, corners):
        return self.calls % len(corners)

    def __call__(self, payload):
        corners = [(int(c), int(r)) for _, c, r in _MENU_LINE.findall(payload.text)]
        cc, cr = map(int, _CENTER_LINE.search(payload.text).groups())
        idx = self.pick_index(corners)
        self.calls += 1
        col, row = corners[idx]
        angle = _menu_angle(math.atan2(cr - row, col - cc))
        return f"1. {idx}\n2. {angle:.8f}\n3. {self.fraction}"


class _InwardResponder(_OutwardResponder):
    """Always pulls toward the center, so every proposal fails verification."""

    def __call__(self, payload):
        corners = [(int(c), int(r)) for _, c, r in _MENU_LINE.findall(payload.text)]
        cc, cr = map(int, _CENTER_LINE.search(payload.text).groups())
        idx = self.pick_index(corners)
        self.calls += 1
        col, row = corners[idx]
        angle = _menu_angle(math.atan2(cr - row, col - cc) + math.pi)
        return f"1. {idx}\n2. {angle:.8f}\n3. {self.fraction}"


class _StubbornResponder:
    """Keeps picking the corner nearest its previous pick with a short pull,
    so the strict proximity check rejects every retry after the first step."""

    def __init__(self):
        self.calls = 0
        self.last_pick = None

    def __call__(self, payload):
        self.calls += 1
        corners = [(int(c), int(r)) for _, c, r in _MENU_LINE.findall(payload.text)]
        cc, cr = map(int, _CENTER_LINE.search(payload.text).groups())
        if self.last_pick is None:
            idx = 0
        else:
            qc, qr = self.last_pick
            idx = min(
                range(len(corners)),
                key=lambda i: (corners[i][0] - qc) ** 2 + (corners[i][1] - qr) ** 2,
            )
        col, row = corners[idx]
        self.last_pick = (col, row)
        angle = _menu_angle(math.atan2(cr - row, col - cc))
        return f"1. {idx}\n2. {angle:.8f}\n3. 0.1"


class _FoldResponder:
    """Two-stage folding replies: echo an instruction, then fold the first
    listed corner onto the fabric center."""

    def __call__(self, payload):
        if payload.metadata["kind"] == "folding_instruction":
            return "Instruction: fold the top corner to the center"
        corners = [(int(c), int(r)) for c, r in _FOLD_CORNER_LINE.findall(payload.text)]
        cc, cr = map(int, _CENTER_LINE.search(payload.text).groups())
        c, r = corners[0]
        return (
            f"Grasping near ({c}, {r}) and moving inward.\n"
            f"Pick point: ({c}, {r})\nPlace point: ({cc}, {cr})"
        )


# ---------------------------------------------------------------------------
# Smoothing rollouts
# ---------------------------------------------------------------------------


def test_smoothing_rollout_structure(heuristic_record):
    record = heuristic_record
    assert 1 <= len(record.steps) <= 5
    executed = [s for s in record.steps if s.action is not None]
    assert executed, "no action executed in five slots"
    for step in executed:
        assert step.query_log["entries"][-1]["accepted"]
        assert tuple(step.pick_px) in {tuple(c) for c in step.corners}
        assert step.coverage is not None
    trace = [s.coverage for s in record.steps if s.coverage is not None]
    assert record.final.coverage_trace == pytest.approx(trace)
    assert record.final.s == pytest.approx(trace[-1])
    assert record.final.ni == pytest.approx(
        normalized_improvement(trace[-1], record.final.s0, record.final.smax)
    )


def test_smoothing_archive_layout(heuristic_record):
    root = pathlib.Path(heuristic_record.archive_dir)
    assert root.name == heuristic_record.config.rollout_id()
    data = json.loads((root / "record.json").read_text())
    assert data["config"] == heuristic_record.config.to_dict()
    assert data["final"] == heuristic_record.final.to_record()
    for step in heuristic_record.steps:
        if step.observation_ref:
            assert (root / step.observation_ref).exists()
        if step.annotated_ref:
            assert (root / step.annotated_ref).exists()
    assert (root / "transcripts.jsonl").read_text() == ""


def test_rerun_reproduces_metrics(heuristic_record):
    again = harness.rerun(heuristic_record.to_dict())
    assert again.final.to_record() == heuristic_record.final.to_record()


def test_early_stop_threshold(monkeypatch):
    monkeypatch.setattr(harness, "EARLY_STOP_NI", -10.0)
    config = RolloutConfig(kind="smooth", backend="heuristic", max_actions=5, seed=3)
    record = harness.run_smoothing_rollout(config)
    assert len(record.steps) == 1
    assert record.steps[0].ni is not None


def test_smoothing_llm_roundtrip(tmp_path):
    config = RolloutConfig(kind="smooth", backend="llm:zero-shot", max_actions=5, seed=1)
    record = harness.run_smoothing_rollout(
        config, chat_fn=_OutwardResponder(), archive_dir=tmp_path
    )
    executed = [s for s in record.steps if s.action is not None]
    assert executed
    for step in record.steps:
        assert step.exchanges
        assert step.exchanges[0]["stage"] == "smoothing"
        assert "Candidate corners" in step.exchanges[0]["prompt"]
    rows = [
        json.loads(line)
        for line in (pathlib.Path(record.archive_dir) / "transcripts.jsonl")
        .read_text()
        .splitlines()
    ]
    assert len(rows) == sum(len(s.exchanges) for s in record.steps)
    assert {row["stage"] for row in rows} == {"smoothing"}


def test_smoothing_rejected_actions_consume_slots():
    config = RolloutConfig(kind="smooth", backend="llm:zero-shot", max_actions=5, seed=1)
    record = harness.run_smoothing_rollout(config, chat_fn=_InwardResponder())
    assert len(record.steps) == 5
    for step in record.steps:
        assert step.aborted and step.action is None
        qlog = step.query_log
        assert qlog["relaxed_engaged"]
        assert [e["phase"] for e in qlog["entries"]] == ["strict"] * 3 + ["relaxed"] * 3
        assert not any(e["accepted"] for e in qlog["entries"])
        for entry in qlog["entries"]:
            direction = entry["direction"]
            assert direction is None or direction["reason"] == REASON_DIRECTION
    assert record.final.ni == pytest.approx(0.0)


def test_smoothing_unparseable_response_aborts_steps():
    config = RolloutConfig(kind="smooth", backend="llm:zero-shot", max_actions=5, seed=1)
    record = harness.run_smoothing_rollout(config, chat_fn=lambda payload: "no idea")
    assert len(record.steps) == 5
    for step in record.steps:
        assert step.aborted
        assert "ParseError" in step.note
        assert len(step.exchanges) == 1
    assert record.final.ni == pytest.approx(0.0)


def test_no_eval_module_executes_first_proposal():
    config = RolloutConfig(
        kind="smooth", backend="llm:zero-shot", max_actions=5, seed=1,
        ablations=("no-eval-module",),
    )
    responder = _InwardResponder()
    record = harness.run_smoothing_rollout(config, chat_fn=responder)
    executed = [s for s in record.steps if s.action is not None]
    assert executed, "inward pulls must execute once verification is ablated"
    assert all(s.query_log is None for s in record.steps)
    assert responder.calls == len(record.steps)


def test_no_proximity_check_blinds_strict_phase():
    base = RolloutConfig(kind="smooth", backend="llm:zero-shot", max_actions=5, seed=1)
    checked = harness.run_smoothing_rollout(base, chat_fn=_StubbornResponder())
    second = checked.steps[1]
    assert second.action is not None
    assert second.query_log["relaxed_engaged"]
    strict = [e for e in second.query_log["entries"] if e["phase"] == "strict"]
    assert all(e["proximity"]["reason"] == REASON_TOO_CLOSE_PRIOR for e in strict)

    ablated = RolloutConfig(
        kind="smooth", backend="llm:zero-shot", max_actions=5, seed=1,
        ablations=("no-proximity-check",),
    )
    blind = harness.run_smoothing_rollout(ablated, chat_fn=_StubbornResponder())
    for step in blind.steps:
        if step.query_log is None:
            continue
        assert not step.query_log["relaxed_engaged"]
        assert all(e["proximity"]["passed"] for e in step.query_log["entries"])


def test_no_preprocess_uses_raw_pixels():
    config = RolloutConfig(
        kind="smooth", backend="llm:zero-shot", max_actions=5, seed=1,
        ablations=("no-preprocess",),
    )
    angle = _menu_angle(math.pi / 4)
    record = harness.run_smoothing_rollout(
        config, chat_fn=lambda payload: f"1. (160, 63)\n2. {angle:.8f}\n3. 0.25"
    )
    executed = [s for s in record.steps if s.action is not None]
    assert executed
    assert executed[0].pick_px == (160, 63)
    for step in record.steps:
        assert "Candidate corners" not in step.exchanges[0]["prompt"]


def test_random_action_ablation_is_verified_and_reproducible():
    config = RolloutConfig(
        kind="smooth", backend="heuristic", max_actions=5, seed=5,
        ablations=("random-action",),
    )
    first = harness.run_smoothing_rollout(config)
    second = harness.run_smoothing_rollout(config)
    assert first.final.to_record() == second.final.to_record()
    logs = [s.query_log for s in first.steps if s.query_log is not None]
    assert logs, "verification stays active under the random-action ablation"


# ---------------------------------------------------------------------------
# Folding rollouts
# ---------------------------------------------------------------------------


def test_folding_oracle_matches_goal(oracle_fold_record):
    record = oracle_fold_record
    assert len(record.steps) == 2
    assert all(s.action is not None for s in record.steps)
    assert record.trial_errors_mm == [pytest.approx(record.final.particle_error_mm)]
    assert record.final.particle_error_mm < 15.0


def test_folding_archive_layout(oracle_fold_record):
    root = pathlib.Path(oracle_fold_record.archive_dir)
    data = json.loads((root / "record.json").read_text())
    assert data["trial_errors_mm"] == oracle_fold_record.trial_errors_mm
    for step in oracle_fold_record.steps:
        assert (root / step.observation_ref).exists()
    assert (root / "transcripts.jsonl").read_text() == ""


def test_folding_llm_two_stage(task_cache, tmp_path):
    config = RolloutConfig(kind="fold:DoubleTriangle", backend="llm:zero-shot", seed=0)
    record = harness.run_folding_rollout(
        config, chat_fn=_FoldResponder(), archive_dir=tmp_path, cache_dir=task_cache
    )
    assert len(record.steps) == 2
    for step in record.steps:
        assert step.action is not None
        assert [e["stage"] for e in step.exchanges] == ["instruction", "action"]
        assert tuple(step.pick_px) in {tuple(c) for c in step.corners}
    rows = (
        (pathlib.Path(record.archive_dir) / "transcripts.jsonl").read_text().splitlines()
    )
    assert len(rows) == 4
    assert np.isfinite(record.final.particle_error_mm)


def test_folding_in_context_demo_payloads(task_cache):
    config = RolloutConfig(kind="fold:DoubleTriangle", backend="llm:in-context", seed=0)
    record = harness.run_folding_rollout(
        config, chat_fn=_FoldResponder(), cache_dir=task_cache
    )
    for step in record.steps:
        instruction, action = step.exchanges
        assert instruction["num_images"] == 2 * 10 + 2
        assert len(re.findall(r"Pick point: \(\d", action["prompt"])) == 2 * 10


def test_folding_random_trial_averaging(task_cache):
    config = RolloutConfig(
        kind="fold:DoubleTriangle", backend="random", seed=2, trials=2
    )
    first = harness.run_folding_rollout(config, cache_dir=task_cache)
    assert len(first.trial_errors_mm) == 2
    assert first.trial_errors_mm[0] != first.trial_errors_mm[1]
    assert first.final.particle_error_mm == pytest.approx(
        float(np.mean(first.trial_errors_mm))
    )
    second = harness.run_folding_rollout(config, cache_dir=task_cache)
    assert second.trial_errors_mm == pytest.approx(first.trial_errors_mm)


# ---------------------------------------------------------------------------
# Batch running and reports
# ---------------------------------------------------------------------------


def test_run_many_parallel_matches_sequential():
    configs = [
        RolloutConfig(kind="smooth", backend="random", max_actions=5, seed=s)
        for s in (0, 1)
    ]
    sequential = harness.run_many(configs, workers=1)
    parallel = harness.run_many(configs, workers=2)
    for a, b in zip(sequential, parallel):
        assert a.final.to_record() == b.final.to_record()
    with pytest.raises(harness.ConfigError):
        harness.run_many(configs, workers=2, chat_fn=lambda payload: "x")


def _smooth_record_dict(ni, backend="heuristic", budget=5, ablations=()):
    return {
        "config": {
            "kind": "smooth",
            "backend": backend,
            "max_actions": budget,
            "ablations": list(ablations),
        },
        "final": {"ni": ni},
    }


def _fold_record_dict(err, task="DoubleTriangle", backend="oracle", ablations=()):
    return {
        "config": {
            "kind": f"fold:{task}",
            "backend": backend,
            "ablations": list(ablations),
        },
        "final": {"particle_error_mm": err},
    }


def test_report_single_record_identity():
    rep = harness.report([_smooth_record_dict(0.42)])
    row = rep.smoothing_rows[0]
    assert (row["group"], row["budget"], row["n"]) == ("heuristic", 5, 1)
    assert row["ni_q50"] == pytest.approx(0.42)
    assert row["ni_spread"] == pytest.approx(0.0)


def test_report_groups_by_backend_and_flags():
    records = [
        _smooth_record_dict(0.1),
        _smooth_record_dict(0.3),
        _smooth_record_dict(0.2, ablations=("no-eval-module",)),
        _fold_record_dict(5.0),
        _fold_record_dict(9.0, task="DoubleStraight", backend="random"),
    ]
    rep = harness.report(records)
    assert {r["group"] for r in rep.smoothing_rows} == {
        "heuristic",
        "heuristic [no-eval-module]",
    }
    base = next(r for r in rep.smoothing_rows if r["group"] == "heuristic")
    assert base["n"] == 2
    assert {(r["group"], r["task"]) for r in rep.folding_rows} == {
        ("oracle", "DoubleTriangle"),
        ("random", "DoubleStraight"),
    }


def test_report_formats():
    rep = harness.report(
        [
            _smooth_record_dict(0.1),
            _smooth_record_dict(0.3),
            _fold_record_dict(5.0),
        ]
    )
    csv = rep.to_csv().splitlines()
    assert csv[0] == "table,group,column,n,value,spread"
    assert any(line.startswith("smoothing,heuristic,budget=5,2,") for line in csv)
    assert any(line.startswith("folding,oracle,task=DoubleTriangle,1,") for line in csv)
    text = rep.to_text()
    assert "#5" in text and "DoubleTriangle" in text
    rows = [json.loads(line) for line in rep.to_jsonl().splitlines()]
    assert {r["table"] for r in rows} == {"smoothing", "folding"}


def test_report_empty_raises():
    with pytest.raises(EmptyInput):
        harness.report([])


def test_load_records_globs_recursively(tmp_path):
    for i, ni in enumerate((0.2, 0.4)):
        root = tmp_path / f"run{i}" / "rollout"
        root.mkdir(parents=True)
        (root / "record.json").write_text(json.dumps(_smooth_record_dict(ni)))
    records = harness.load_records(str(tmp_path / "**" / "record.json"))
    assert [r["final"]["ni"] for r in records] == [0.2, 0.4]


class _TemperatureProbe:
    def __init__(self):
        self.temps = []

    def complete(self, text, images=None, system=None, temperature=None, max_tokens=None):
        self.temps.append(temperature)
        return "ok"


def test_chat_fn_picks_stage_temperature():
    client = _TemperatureProbe()
    chat = harness.chat_fn_from_client(client)
    chat(policy.PromptPayload(text="a", images=[], metadata={"kind": "folding_instruction"}))
    chat(policy.PromptPayload(text="b", images=[], metadata={"kind": "smoothing"}))
    chat(policy.PromptPayload(text="c", images=[], metadata={"kind": "folding_action"}))
    assert client.temps == [
        policy.INSTRUCTION_TEMPERATURE,
        policy.ACTION_TEMPERATURE,
        policy.ACTION_TEMPERATURE,
    ]
