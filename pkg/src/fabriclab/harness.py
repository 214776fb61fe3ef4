"""Experiment orchestration: configured rollouts, ablation switches, archive
layout, and report tables.

A rollout is fully described by a RolloutConfig; running one produces a
RolloutRecord whose snapshot suffices to re-run it. Archives are per-rollout
directories holding the record, observation images, and prompt transcripts.
"""

import dataclasses
import glob as globlib
import json
import logging
import pathlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image

from . import policy, tasks
from .metrics import (
    EmptyInput,
    MetricsRecord,
    coverage,
    mean_particle_distance,
    normalized_improvement,
    summarize_mean_std,
    summarize_ni,
)
from .percept import AnnotatedImage, EmptyMask, annotate_smoothing, summarize
from .render import Camera, ClothOutOfView, render_topdown, world_to_pixel, pixel_to_world
from .sim import (
    ClothSpec,
    SimParams,
    WorldAction,
    crumple,
    execute_pick_place,
    make_flat_cloth,
    nearest_particle,
    settle,
)
from .verify import (
    ProposerExhausted,
    SmoothingContext,
    VerifyParams,
    default_params,
    run_verified_query,
)

log = logging.getLogger("fabriclab.harness")

SMOOTH = "smooth"
FOLD_PREFIX = "fold:"

# A rollout stops early once normalized improvement exceeds this.
EARLY_STOP_NI = 0.95

SMOOTHING_BUDGETS = (5, 10, 20)
FOLDING_TRIALS = 5

BACKENDS = ("heuristic", "random", "oracle", "llm:zero-shot", "llm:in-context")
_SMOOTH_BACKENDS = ("heuristic", "random", "llm:zero-shot")
_FOLD_BACKENDS = ("oracle", "random", "llm:zero-shot", "llm:in-context")

# Smoothing pipeline ablations: replace the model's action with a random menu
# choice, drop image preprocessing, drop the verification loop, or drop only
# its proximity check.
SMOOTHING_ABLATIONS = (
    "random-action",
    "no-preprocess",
    "no-eval-module",
    "no-proximity-check",
)
# Folding ablations remove one instruction-prompt component each.
FOLDING_ABLATIONS = tuple(
    "no-" + name.replace("_", "-") for name in policy.INSTRUCTION_COMPONENTS
)

ChatFn = Callable[[policy.PromptPayload], str]


class HarnessError(Exception):
    pass


class ConfigError(HarnessError):
    """Invalid rollout configuration; maps to CLI exit code 2."""


@dataclass(frozen=True)
class RolloutConfig:
    """Everything needed to reproduce one rollout.

    ``kind`` is ``"smooth"`` or ``"fold:<TaskName>"``. ``max_actions``
    defaults to 10 for smoothing and to the task horizon for folding.
    ``trials`` repeats a folding rollout and averages the particle error.
    Verification overrides left at None use the defaults scaled to the cloth.
    """

    kind: str
    backend: str = "heuristic"
    max_actions: Optional[int] = None
    seed: int = 0
    size_index: int = 0
    rotation_deg: float = 0.0
    trials: int = 1
    ablations: tuple[str, ...] = ()
    proximity_threshold: Optional[float] = None
    direction_tolerance: Optional[float] = None
    max_queries: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "ablations", tuple(self.ablations))
        if self.kind != SMOOTH and not self.kind.startswith(FOLD_PREFIX):
            raise ConfigError(f"kind must be 'smooth' or 'fold:<task>', got {self.kind!r}")
        if self.is_folding and self.task not in tasks.TASKS:
            raise ConfigError(f"unknown folding task {self.task!r}; options: {tasks.TASKS}")
        allowed = _SMOOTH_BACKENDS if self.kind == SMOOTH else _FOLD_BACKENDS
        if self.backend not in allowed:
            raise ConfigError(
                f"backend {self.backend!r} not valid for {self.kind!r}; options: {allowed}"
            )
        valid_flags = SMOOTHING_ABLATIONS if self.kind == SMOOTH else FOLDING_ABLATIONS
        for flag in self.ablations:
            if flag not in valid_flags:
                raise ConfigError(
                    f"ablation {flag!r} not valid for {self.kind!r}; options: {valid_flags}"
                )
        if len(set(self.ablations)) != len(self.ablations):
            raise ConfigError("duplicate ablation flags")
        if self.kind == SMOOTH:
            if self.max_actions is None:
                object.__setattr__(self, "max_actions", 10)
            if self.max_actions not in SMOOTHING_BUDGETS:
                raise ConfigError(
                    f"smoothing max_actions must be one of {SMOOTHING_BUDGETS}"
                )
            if self.trials != 1:
                raise ConfigError("trial averaging applies to folding only")
            if self.size_index != 0 or self.rotation_deg != 0.0:
                raise ConfigError(
                    "the smoothing protocol fixes the default cloth; "
                    "the size/rotation sweep drives folding"
                )
        else:
            horizon = tasks.TASK_HORIZON[self.task]
            if self.max_actions is None:
                object.__setattr__(self, "max_actions", horizon)
            if not 1 <= self.max_actions <= horizon:
                raise ConfigError(
                    f"folding max_actions must be in 1..{horizon} for {self.task}"
                )
            if self.trials < 1:
                raise ConfigError("trials must be >= 1")
            if not 0 <= self.size_index < len(tasks.SQUARE_SIDES):
                raise ConfigError(
                    f"size_index {self.size_index} outside 0..{len(tasks.SQUARE_SIDES) - 1}"
                )

    @property
    def is_folding(self) -> bool:
        return self.kind.startswith(FOLD_PREFIX)

    @property
    def task(self) -> Optional[str]:
        return self.kind[len(FOLD_PREFIX):] if self.is_folding else None

    def rollout_id(self) -> str:
        parts = [
            self.kind.replace(":", "-"),
            self.backend.replace(":", "-"),
            f"seed{self.seed}",
        ]
        if self.is_folding:
            parts.append(f"size{self.size_index}")
            parts.append(f"rot{self.rotation_deg:g}")
            parts.append(f"trials{self.trials}")
        parts.append(f"budget{self.max_actions}")
        if self.ablations:
            parts.append("ab-" + "+".join(self.ablations))
        return "_".join(parts)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablations"] = list(self.ablations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RolloutConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        if "kind" not in d:
            raise ConfigError("config needs a 'kind'")
        d = dict(d)
        if "ablations" in d:
            d["ablations"] = tuple(d["ablations"])
        return cls(**d)


@dataclass
class StepRecord:
    """One action slot of a rollout (executed or aborted)."""

    index: int
    trial: int = 0
    observation_ref: Optional[str] = None
    annotated_ref: Optional[str] = None
    corners: list = field(default_factory=list)
    bbox: Optional[tuple] = None
    center: Optional[tuple] = None
    exchanges: list = field(default_factory=list)
    query_log: Optional[dict] = None
    action: Optional[dict] = None
    pick_px: Optional[tuple] = None
    place_px: Optional[tuple] = None
    coverage: Optional[float] = None
    ni: Optional[float] = None
    aborted: bool = False
    note: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _last_entry_accepted(query_log: Optional[dict]) -> bool:
    return bool(query_log and query_log["entries"] and query_log["entries"][-1]["accepted"])


@dataclass
class RolloutRecord:
    """Config snapshot plus everything the rollout produced."""

    config: RolloutConfig
    steps: list[StepRecord]
    final: MetricsRecord
    trial_errors_mm: list[float] = field(default_factory=list)
    archive_dir: Optional[str] = None

    def __post_init__(self) -> None:
        per_trial: dict[int, int] = {}
        for step in self.steps:
            per_trial[step.trial] = per_trial.get(step.trial, 0) + 1
        for trial, count in per_trial.items():
            if count > self.config.max_actions:
                raise HarnessError(
                    f"trial {trial} has {count} steps, budget {self.config.max_actions}"
                )
        if self.config.kind == SMOOTH and "no-eval-module" not in self.config.ablations:
            for step in self.steps:
                if step.action is not None and not _last_entry_accepted(step.query_log):
                    raise HarnessError(
                        f"step {step.index} executed without an accepted verification entry"
                    )

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "steps": [s.to_dict() for s in self.steps],
            "final": self.final.to_record(),
            "trial_errors_mm": list(self.trial_errors_mm),
            "archive_dir": self.archive_dir,
        }

    def save(self, path) -> None:
        pathlib.Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def chat_fn_from_client(client) -> ChatFn:
    """Adapt a chat client to the harness callback, picking the sampling
    temperature by prompt stage."""

    def chat(payload: policy.PromptPayload) -> str:
        if payload.metadata.get("kind") == "folding_instruction":
            temperature = policy.INSTRUCTION_TEMPERATURE
        else:
            temperature = policy.ACTION_TEMPERATURE
        return client.complete(payload.text, payload.images, temperature=temperature)

    return chat


# ---------------------------------------------------------------------------
# Smoothing rollouts
# ---------------------------------------------------------------------------


def _resolve_verify(config: RolloutConfig, spec: ClothSpec, camera: Camera) -> VerifyParams:
    base = default_params(spec.edge_length, camera)
    overrides = {}
    for name in ("proximity_threshold", "direction_tolerance", "max_queries"):
        value = getattr(config, name)
        if value is not None:
            overrides[name] = value
    return dataclasses.replace(base, **overrides) if overrides else base


def _make_smooth_proposer(
    config: RolloutConfig,
    chat_fn: Optional[ChatFn],
    rng: np.random.Generator,
    spec: ClothSpec,
    camera: Camera,
    vparams: VerifyParams,
    exchanges: list,
):
    if config.backend == "random" or "random-action" in config.ablations:

        def propose(context, feedback):
            return policy.random_propose(context.summary, int(rng.integers(2**31)))

        return propose

    if config.backend == "heuristic":

        def propose(context, feedback):
            return policy.heuristic_smooth_propose(
                context.summary, context.prior_pick, spec, camera, vparams
            )

        return propose

    if chat_fn is None:
        raise ConfigError(f"backend {config.backend!r} needs a chat function")
    marks = "no-preprocess" not in config.ablations

    def propose(context, feedback):
        shown = context.annotated if marks else AnnotatedImage(rgb=context.observation.rgb)
        payload = policy.build_smoothing_prompt(
            shown,
            context.summary,
            correction=feedback.correction_text if feedback else None,
            include_marks=marks,
        )
        if feedback and feedback.failed_action_image is not None:
            payload.images.append(feedback.failed_action_image.rgb)
        response = chat_fn(payload)
        exchanges.append(
            {
                "stage": "smoothing",
                "prompt": payload.text,
                "num_images": len(payload.images),
                "response": response,
            }
        )
        corners = context.summary.corners if marks else None
        return policy.parse_smoothing_response(response, corners)

    return propose


def _prepare_archive(archive_dir, config: RolloutConfig) -> Optional[pathlib.Path]:
    if archive_dir is None:
        return None
    root = pathlib.Path(archive_dir) / config.rollout_id()
    root.mkdir(parents=True, exist_ok=True)
    return root


def _save_png(root: Optional[pathlib.Path], name: str, rgb: np.ndarray) -> Optional[str]:
    if root is None:
        return None
    Image.fromarray(rgb).save(root / name)
    return name


def _finish_archive(record: RolloutRecord, root: Optional[pathlib.Path]) -> None:
    if root is None:
        return
    record.archive_dir = str(root)
    record.save(root / "record.json")
    with open(root / "transcripts.jsonl", "w") as fh:
        for step in record.steps:
            for exchange in step.exchanges:
                row = {"trial": step.trial, "step": step.index, **exchange}
                fh.write(json.dumps(row) + "\n")


def run_smoothing_rollout(
    config: RolloutConfig,
    chat_fn: Optional[ChatFn] = None,
    archive_dir=None,
    params: SimParams | None = None,
) -> RolloutRecord:
    """Crumple, then loop render / summarize / annotate / verified query /
    execute until the action budget runs out or NI exceeds EARLY_STOP_NI.

    A step whose proposer is exhausted (or whose response cannot be parsed)
    is logged as aborted and consumes its action slot. An action that drags
    the cloth out of camera view leaves coverage unmeasurable from then on:
    the step keeps its executed action with no coverage reading, every later
    step aborts at the render, and the final coverage is the last measurable
    value.
    """
    if config.kind != SMOOTH:
        raise ConfigError(f"run_smoothing_rollout got kind {config.kind!r}")
    params = params or SimParams()
    spec = ClothSpec()
    camera = Camera()
    root_rng = np.random.default_rng(config.seed)
    vparams = _resolve_verify(config, spec, camera)
    adir = _prepare_archive(archive_dir, config)

    flat = settle(make_flat_cloth(spec, params), params)
    state = crumple(flat, params, seed=config.seed)
    s0 = coverage(state, camera)
    smax = 1.0
    use_eval = "no-eval-module" not in config.ablations
    track_prior = "no-proximity-check" not in config.ablations

    exchanges: list = []
    proposer = _make_smooth_proposer(
        config, chat_fn, root_rng, spec, camera, vparams, exchanges
    )
    steps: list[StepRecord] = []
    trace: list[float] = []
    prior_pick = prior_place = None

    for i in range(config.max_actions):
        exchanges.clear()
        step = StepRecord(index=i)
        try:
            obs = render_topdown(state, camera)
            summary = summarize(obs)
            annotated = annotate_smoothing(obs, summary, prior_place)
            step.observation_ref = _save_png(adir, f"step_{i:02d}_obs.png", obs.rgb)
            step.annotated_ref = _save_png(
                adir, f"step_{i:02d}_annotated.png", annotated.rgb
            )
            step.corners = [list(c) for c in summary.corners]
            step.bbox = summary.bbox
            step.center = summary.center
            context = SmoothingContext(
                summary=summary,
                observation=obs,
                annotated=annotated,
                prior_pick=prior_pick if track_prior else None,
                prior_place=prior_place if track_prior else None,
                edge_length=spec.edge_length,
            )
            if use_eval:
                action, qlog = run_verified_query(proposer, context, vparams)
                step.query_log = qlog.to_record()
            else:
                action = proposer(context, None)
            world = policy.smooth_action_to_world(action, camera, spec, state)
            state = execute_pick_place(state, world, params)
            step.action = {"pick": list(world.pick), "place": list(world.place)}
            step.pick_px = tuple(action.pick_corner)
            step.place_px = world_to_pixel(camera, world.place[:2])
            prior_pick, prior_place = step.pick_px, step.place_px
        except ClothOutOfView as exc:
            # The opening render failed, so nothing ran and nothing changed.
            step.aborted = True
            step.note = f"ClothOutOfView: {exc}"
            log.info("smoothing step %d aborted: %s", i, step.note)
            steps.append(step)
            continue
        except ProposerExhausted as exc:
            step.aborted = True
            step.note = str(exc)
            step.query_log = exc.query_log.to_record()
            log.info("smoothing step %d aborted: %s", i, exc)
        except (EmptyMask, policy.ParseError, policy.InvalidChoice, policy.NoCorners) as exc:
            step.aborted = True
            step.note = f"{type(exc).__name__}: {exc}"
            log.info("smoothing step %d aborted: %s", i, step.note)
        step.exchanges = list(exchanges)
        try:
            cov = coverage(state, camera)
        except ClothOutOfView as exc:
            step.note = (step.note + "; " if step.note else "") + f"ClothOutOfView: {exc}"
            log.info("smoothing step %d left the camera view", i)
            steps.append(step)
            continue
        ni = normalized_improvement(cov, s0, smax)
        step.coverage, step.ni = cov, ni
        trace.append(cov)
        steps.append(step)
        if ni > EARLY_STOP_NI:
            break

    final = MetricsRecord(
        s0=s0,
        smax=smax,
        s=trace[-1] if trace else s0,
        ni=normalized_improvement(trace[-1] if trace else s0, s0, smax),
        coverage_trace=trace,
    )
    record = RolloutRecord(config=config, steps=steps, final=final)
    _finish_archive(record, adir)
    return record


# ---------------------------------------------------------------------------
# Folding rollouts
# ---------------------------------------------------------------------------


def _fold_pixels_to_world(
    pick_px, place_px, camera: Camera, state
) -> WorldAction:
    """Lift a pixel pick/place pair into a world action; the pick snaps to
    the nearest cloth particle."""
    pick_xy = pixel_to_world(camera, pick_px)
    idx, _ = nearest_particle(state, pick_xy)
    pick = state.positions[idx]
    place_xy = pixel_to_world(camera, place_px)
    return WorldAction(
        pick=(float(pick[0]), float(pick[1]), float(pick[2])),
        place=(float(place_xy[0]), float(place_xy[1]), 0.0),
    )


def _snap_to_corner(pick_px, corners):
    """Model picks are constrained to the detected-corner menu."""
    if not corners:
        return pick_px
    c, r = pick_px
    return min(corners, key=lambda q: ((q[0] - c) ** 2 + (q[1] - r) ** 2, corners.index(q)))


def _omit_components(config: RolloutConfig) -> frozenset:
    return frozenset(
        flag[len("no-"):].replace("-", "_") for flag in config.ablations
    )


def run_folding_rollout(
    config: RolloutConfig,
    chat_fn: Optional[ChatFn] = None,
    archive_dir=None,
    cache_dir=None,
    params: SimParams | None = None,
) -> RolloutRecord:
    """Run the two-stage folding pipeline against a task's subgoal sequence.

    Starts from the sequence's flat state; each step derives an instruction
    from the subgoal image pair, perceives the current cloth, asks for (or is
    given) a pick/place pixel pair, and executes it. The final mean particle
    distance to the goal state is averaged over ``config.trials`` trials.

    The oracle backend is privileged: it replays the scripted actions through
    their pixel projections. The in-context backend embeds the full demo
    store (10 per action) in every action prompt.
    """
    if not config.is_folding:
        raise ConfigError(f"run_folding_rollout got kind {config.kind!r}")
    if config.backend.startswith("llm") and chat_fn is None:
        raise ConfigError(f"backend {config.backend!r} needs a chat function")
    params = params or tasks.TASK_SIM_PARAMS
    task = config.task
    spec = tasks.task_spec(task, config.size_index, config.rotation_deg)
    seq = tasks.make_subgoal_sequence(task, spec, params=params, cache_dir=cache_dir)
    camera = seq.camera
    adir = _prepare_archive(archive_dir, config)

    in_context = config.backend == "llm:in-context"
    demo_store = (
        tasks.build_demonstrations(task, params=params, cache_dir=cache_dir)
        if in_context
        else None
    )
    flat_demos = [d for per_step in demo_store for d in per_step] if demo_store else []
    omit = _omit_components(config)

    steps: list[StepRecord] = []
    trace: list[float] = []
    trial_errors: list[float] = []
    n_steps = config.max_actions

    for trial in range(config.trials):
        rng = np.random.default_rng([config.seed, trial])
        state = seq.goal_states[0].copy()
        for t in range(n_steps):
            step = StepRecord(index=t, trial=trial)
            exchanges: list = []
            try:
                obs = render_topdown(state, camera)
                step.observation_ref = _save_png(
                    adir, f"trial{trial}_step_{t:02d}_obs.png", obs.rgb
                )
                summary = summarize(obs, detector="harris")
                step.corners = [list(c) for c in summary.corners]
                step.bbox = summary.bbox
                step.center = summary.center
                pair = (seq.subgoal_images[t], seq.subgoal_images[t + 1])

                if config.backend == "oracle":
                    scripted = seq.scripted_actions[t]
                    pick_px = world_to_pixel(camera, scripted.pick[:2])
                    place_px = world_to_pixel(camera, scripted.place[:2])
                elif config.backend == "random":
                    pick_px = _snap_to_corner(
                        (
                            int(rng.integers(camera.width_px)),
                            int(rng.integers(camera.height_px)),
                        ),
                        summary.corners,
                    )
                    place_px = (
                        int(rng.integers(camera.width_px)),
                        int(rng.integers(camera.height_px)),
                    )
                else:
                    instr_demos = demo_store[t] if in_context else ()
                    ipayload = policy.build_instruction_prompt(pair, instr_demos, omit=omit)
                    itext = chat_fn(ipayload)
                    exchanges.append(
                        {
                            "stage": "instruction",
                            "prompt": ipayload.text,
                            "num_images": len(ipayload.images),
                            "response": itext,
                        }
                    )
                    instruction = policy.parse_instruction_response(itext, (t, t + 1))
                    apayload = policy.build_folding_action_prompt(
                        instruction, summary, flat_demos
                    )
                    atext = chat_fn(apayload)
                    exchanges.append(
                        {
                            "stage": "action",
                            "prompt": apayload.text,
                            "num_images": len(apayload.images),
                            "response": atext,
                        }
                    )
                    fold = policy.parse_folding_response(
                        atext, camera.width_px, camera.height_px
                    )
                    pick_px = _snap_to_corner(fold.pick_px, summary.corners)
                    place_px = fold.place_px

                world = _fold_pixels_to_world(pick_px, place_px, camera, state)
                state = execute_pick_place(state, world, params)
                step.action = {"pick": list(world.pick), "place": list(world.place)}
                step.pick_px = tuple(pick_px)
                step.place_px = tuple(place_px)
            except (ClothOutOfView, EmptyMask, policy.ParseError, policy.NoCorners) as exc:
                step.aborted = True
                step.note = f"{type(exc).__name__}: {exc}"
                log.info("folding step %d aborted: %s", t, step.note)
            step.exchanges = exchanges
            try:
                cov = coverage(state, camera)
                step.coverage = cov
                trace.append(cov)
            except ClothOutOfView:
                pass  # particle error below needs no camera
            steps.append(step)
        trial_errors.append(mean_particle_distance(state, seq.goal_states[n_steps]))

    error = float(np.mean(trial_errors))
    final = MetricsRecord(
        s0=coverage(seq.goal_states[0], camera),
        smax=1.0,
        s=trace[-1] if trace else 0.0,
        particle_error_mm=error,
        coverage_trace=trace,
    )
    record = RolloutRecord(
        config=config, steps=steps, final=final, trial_errors_mm=trial_errors
    )
    _finish_archive(record, adir)
    return record


def run_rollout(config: RolloutConfig, **kwargs) -> RolloutRecord:
    """Dispatch on the config's task kind."""
    if config.kind == SMOOTH:
        kwargs.pop("cache_dir", None)
        return run_smoothing_rollout(config, **kwargs)
    return run_folding_rollout(config, **kwargs)


def _run_one(config_dict: dict, archive_dir, cache_dir):
    config = RolloutConfig.from_dict(config_dict)
    return run_rollout(config, archive_dir=archive_dir, cache_dir=cache_dir)


def run_many(
    configs: Sequence[RolloutConfig],
    workers: int = 1,
    chat_fn: Optional[ChatFn] = None,
    archive_dir=None,
    cache_dir=None,
) -> list[RolloutRecord]:
    """Run a batch of rollouts, optionally across worker processes.

    Worker processes only apply to backends that need no chat function; each
    worker owns its simulator state and archive shard (distinct rollout ids).
    """
    if workers > 1:
        if chat_fn is not None:
            raise ConfigError("parallel rollouts are limited to non-chat backends")
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_one, c.to_dict(), archive_dir, cache_dir)
                for c in configs
            ]
            return [f.result() for f in futures]
    return [
        run_rollout(c, chat_fn=chat_fn, archive_dir=archive_dir, cache_dir=cache_dir)
        for c in configs
    ]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def load_records(pattern: str) -> list[dict]:
    """Read archived record.json files matching a glob pattern."""
    paths = sorted(globlib.glob(pattern, recursive=True))
    return [json.loads(pathlib.Path(p).read_text()) for p in paths]


def _as_dict(record) -> dict:
    return record.to_dict() if isinstance(record, RolloutRecord) else record


def _group_label(config: dict) -> str:
    label = config["backend"]
    if config["ablations"]:
        label += " [" + "+".join(config["ablations"]) + "]"
    return label


@dataclass
class Report:
    """Aggregated rollout metrics: NI percentiles per smoothing budget and
    particle error mean and σ per folding task, grouped by backend and
    ablation flags."""

    smoothing_rows: list[dict]
    folding_rows: list[dict]

    def to_jsonl(self) -> str:
        rows = [
            {"table": "smoothing", **row} for row in self.smoothing_rows
        ] + [{"table": "folding", **row} for row in self.folding_rows]
        return "\n".join(json.dumps(r) for r in rows)

    def to_csv(self) -> str:
        lines = ["table,group,column,n,value,spread"]
        for row in self.smoothing_rows:
            lines.append(
                f"smoothing,{row['group']},budget={row['budget']},"
                f"{row['n']},{row['ni_q50']:.6f},{row['ni_spread']:.6f}"
            )
        for row in self.folding_rows:
            lines.append(
                f"folding,{row['group']},task={row['task']},"
                f"{row['n']},{row['error_mean_mm']:.3f},{row['error_std_mm']:.3f}"
            )
        return "\n".join(lines)

    def to_text(self) -> str:
        out = []
        if self.smoothing_rows:
            groups = sorted({r["group"] for r in self.smoothing_rows})
            by_key = {(r["group"], r["budget"]): r for r in self.smoothing_rows}
            out.append("Smoothing: median NI +/- spread by action budget")
            header = f"{'group':32s}" + "".join(
                f"{'#' + str(b):>18s}" for b in SMOOTHING_BUDGETS
            )
            out.append(header)
            for g in groups:
                cells = []
                for b in SMOOTHING_BUDGETS:
                    row = by_key.get((g, b))
                    cells.append(
                        f"{row['ni_q50']:.3f} +/- {row['ni_spread']:.3f}"
                        if row
                        else "-"
                    )
                out.append(f"{g:32s}" + "".join(f"{c:>18s}" for c in cells))
        if self.folding_rows:
            if out:
                out.append("")
            tasks_seen = [t for t in tasks.TASKS if any(
                r["task"] == t for r in self.folding_rows
            )]
            groups = sorted({r["group"] for r in self.folding_rows})
            by_key = {(r["group"], r["task"]): r for r in self.folding_rows}
            out.append("Folding: mean particle error mm +/- std by task")
            out.append(
                f"{'group':32s}" + "".join(f"{t:>24s}" for t in tasks_seen)
            )
            for g in groups:
                cells = []
                for t in tasks_seen:
                    row = by_key.get((g, t))
                    cells.append(
                        f"{row['error_mean_mm']:.1f} +/- {row['error_std_mm']:.1f}"
                        if row
                        else "-"
                    )
                out.append(f"{g:32s}" + "".join(f"{c:>24s}" for c in cells))
        return "\n".join(out)


def report(records) -> Report:
    """Aggregate rollout records into the two summary tables."""
    records = [_as_dict(r) for r in records]
    if not records:
        raise EmptyInput("no records to report on")
    smooth_groups: dict[tuple, list[float]] = {}
    fold_groups: dict[tuple, list[float]] = {}
    for rec in records:
        config = rec["config"]
        label = _group_label(config)
        if config["kind"] == SMOOTH:
            key = (label, config["max_actions"])
            smooth_groups.setdefault(key, []).append(rec["final"]["ni"])
        else:
            task = config["kind"][len(FOLD_PREFIX):]
            key = (label, task)
            fold_groups.setdefault(key, []).append(rec["final"]["particle_error_mm"])
    smoothing_rows = []
    for (label, budget), values in sorted(smooth_groups.items()):
        q50, spread = summarize_ni(values)
        smoothing_rows.append(
            {
                "group": label,
                "budget": budget,
                "n": len(values),
                "ni_q50": q50,
                "ni_spread": spread,
            }
        )
    folding_rows = []
    for (label, task), values in sorted(fold_groups.items()):
        mean, std = summarize_mean_std(values)
        folding_rows.append(
            {
                "group": label,
                "task": task,
                "n": len(values),
                "error_mean_mm": mean,
                "error_std_mm": std,
            }
        )
    return Report(smoothing_rows=smoothing_rows, folding_rows=folding_rows)


def rerun(record: dict, chat_fn: Optional[ChatFn] = None, cache_dir=None) -> RolloutRecord:
    """Re-run an archived record from its config snapshot."""
    config = RolloutConfig.from_dict(_as_dict(record)["config"])
    return run_rollout(config, chat_fn=chat_fn, cache_dir=cache_dir)


__all__ = [
    "SMOOTH",
    "FOLD_PREFIX",
    "EARLY_STOP_NI",
    "SMOOTHING_BUDGETS",
    "FOLDING_TRIALS",
    "BACKENDS",
    "SMOOTHING_ABLATIONS",
    "FOLDING_ABLATIONS",
    "HarnessError",
    "ConfigError",
    "RolloutConfig",
    "StepRecord",
    "RolloutRecord",
    "chat_fn_from_client",
    "run_smoothing_rollout",
    "run_folding_rollout",
    "run_rollout",
    "run_many",
    "load_records",
    "Report",
    "report",
    "rerun",
]
