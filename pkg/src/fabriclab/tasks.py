"""Folding task scripts, subgoal sequences, the spec sweep, and demo store.

Each task is a fixed list of particle-to-target fold waypoints executed from a
flat settled start. The intermediate settled states, their rendered images
(with pick-to-place arrows on transition frames), and the executed actions
together form a SubgoalSequence, which can be cached on disk and replayed.
"""

import hashlib
import json
import logging
import math
import pathlib
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .metrics import mean_particle_distance
from .percept import annotate_subgoal_arrow
from .policy import Demonstration
from .render import Camera, render_topdown, world_to_pixel
from .sim import (
    ClothSpec,
    ClothState,
    SimParams,
    WorldAction,
    execute_pick_place,
    load_state,
    make_flat_cloth,
    save_state,
    settle,
    spec_from_sides,
)

log = logging.getLogger("fabriclab.tasks")

DOUBLE_TRIANGLE = "DoubleTriangle"
DOUBLE_STRAIGHT = "DoubleStraight"
ALL_CORNERS_INWARD = "AllCornersInward"
CORNERS_EDGES_INWARD = "CornersEdgesInward"

TASKS = (DOUBLE_TRIANGLE, DOUBLE_STRAIGHT, ALL_CORNERS_INWARD, CORNERS_EDGES_INWARD)

TASK_HORIZON = {
    DOUBLE_TRIANGLE: 2,
    DOUBLE_STRAIGHT: 3,
    ALL_CORNERS_INWARD: 4,
    CORNERS_EDGES_INWARD: 4,
}

# Bump when a script's waypoints, execution parameters, or the cache layout
# change; cached sequences key on it.
SCRIPT_VERSION = 3

ROTATIONS_DEG = (0, 30, 45, 60)
SQUARE_SIDES = tuple(np.linspace(0.3125, 0.36875, 10))
RECT_SIDES_X = tuple(np.linspace(0.3125, 0.36875, 10))
RECT_SIDES_Y = tuple(np.linspace(0.275, 0.325, 10))
DEMOS_PER_ACTION = 10

# The half fold drags slightly past the far edge so the trailing corners
# relax onto the lower half instead of falling short.
_EDGE_FOLD_OVERSHOOT = 0.08

# Folds keep fabric near the flat footprint, but a released flap slides past
# its target (worst measured: 30 mm on the long diagonal fold); the sequence
# camera leaves this much room beyond the rotated footprint.
CAMERA_FOLD_MARGIN_M = 0.06

# Folding lifts the grasped point well clear of the stack so the flap swings
# over instead of plowing through layer contact; with the default lift the
# long folds land chaotically (millimetre place changes move the outcome by
# centimetres). Every sequence is generated, replayed, and rolled out with
# these parameters.
TASK_SIM_PARAMS = SimParams(lift_height=0.02)

TASK_INSTRUCTIONS = {
    DOUBLE_TRIANGLE: (
        "Fold the fabric in half along its diagonal by picking one corner and "
        "placing it onto the opposite corner.",
        "Fold the triangle in half by picking one sharp corner of the folded "
        "edge and placing it onto the other sharp corner.",
    ),
    DOUBLE_STRAIGHT: (
        "Fold the fabric in half by picking the middle of one edge and "
        "placing it onto the middle of the opposite edge.",
        "Fold the left quarter of the folded fabric inward by picking the "
        "middle of its left edge and placing it onto the fabric center.",
        "Fold the right quarter of the folded fabric inward by picking the "
        "middle of its right edge and placing it onto the fabric center.",
    ),
    ALL_CORNERS_INWARD: (
        "Fold the top-left corner of the fabric onto the fabric center.",
        "Fold the top-right corner of the fabric onto the fabric center.",
        "Fold the bottom-right corner of the fabric onto the fabric center.",
        "Fold the bottom-left corner of the fabric onto the fabric center.",
    ),
    CORNERS_EDGES_INWARD: (
        "Fold the top-left corner of the fabric onto the fabric center.",
        "Fold the bottom-right corner of the fabric onto the fabric center.",
        "Fold the middle of the right edge of the fabric onto the fabric center.",
        "Fold the middle of the left edge of the fabric onto the fabric center.",
    ),
}


class TaskError(Exception):
    pass


def _require_task(task: str) -> None:
    if task not in TASK_HORIZON:
        raise TaskError(f"unknown task {task!r}; expected one of {TASKS}")


def task_spec(task: str, size_index: int, rotation_deg: float = 0.0) -> ClothSpec:
    """Cloth spec for one point of the per-task size/rotation sweep."""
    _require_task(task)
    if not 0 <= size_index < len(SQUARE_SIDES):
        raise TaskError(f"size_index {size_index} outside 0..{len(SQUARE_SIDES) - 1}")
    rotation = float(np.deg2rad(rotation_deg))
    if task == DOUBLE_STRAIGHT:
        return spec_from_sides(RECT_SIDES_X[size_index], RECT_SIDES_Y[size_index], rotation=rotation)
    side = SQUARE_SIDES[size_index]
    return spec_from_sides(side, side, rotation=rotation)


def sweep_specs(task: str) -> list[ClothSpec]:
    """The 40 spec/rotation combinations evaluated per task."""
    return [
        task_spec(task, i, rot)
        for i in range(len(SQUARE_SIDES))
        for rot in ROTATIONS_DEG
    ]


def _check_spec(task: str, spec: ClothSpec) -> None:
    if spec.rows % 2 == 0 or spec.cols % 2 == 0:
        raise TaskError("task scripts need odd grid dimensions (a center particle)")
    square = abs(spec.side_x - spec.side_y) < 1e-9
    if task != DOUBLE_STRAIGHT and not square:
        raise TaskError(f"{task} requires a square cloth, got {spec.side_x}x{spec.side_y}")


def sequence_camera(spec: ClothSpec, base: Camera | None = None) -> Camera:
    """Camera used to render a task sequence.

    The default frame is kept unless the cloth's rotated footprint plus
    CAMERA_FOLD_MARGIN_M would not fit, in which case the view zooms out
    just enough (same frame size, coarser meters per pixel). Large rotated
    specs otherwise poke out of frame mid-task.
    """
    base = base or Camera()
    cos, sin = abs(math.cos(spec.rotation)), abs(math.sin(spec.rotation))
    half_x = (spec.side_x * cos + spec.side_y * sin) / 2.0
    half_y = (spec.side_x * sin + spec.side_y * cos) / 2.0
    needed = max(half_x, half_y) + CAMERA_FOLD_MARGIN_M
    frame_half_px = min(base.width_px, base.height_px) / 2.0
    if needed <= frame_half_px * base.meters_per_pixel:
        return base
    return replace(base, meters_per_pixel=needed / frame_half_px)


def _script_waypoints(task: str, s0: ClothState) -> list[tuple[int, np.ndarray]]:
    """(pick particle index, world xy place target) per action, from the flat
    settled geometry. Picks are resolved against the current state at
    execution time; targets stay fixed."""
    spec = s0.spec
    P = s0.positions

    def idx(r: int, c: int) -> int:
        return r * spec.cols + c

    top, bot = spec.rows - 1, 0
    left, right = 0, spec.cols - 1
    mr, mc = (spec.rows - 1) // 2, (spec.cols - 1) // 2
    center = P[idx(mr, mc), :2]

    if task == DOUBLE_TRIANGLE:
        return [
            (idx(top, left), P[idx(bot, right), :2]),
            (idx(top, right), P[idx(bot, left), :2]),
        ]
    if task == DOUBLE_STRAIGHT:
        near = P[idx(bot, mc), :2]
        far = P[idx(top, mc), :2]
        halffold = near + _EDGE_FOLD_OVERSHOOT * (near - far)
        qr = mr // 2  # mid-height row of the folded (half) footprint
        quarter_mid = (P[idx(qr, left), :2] + P[idx(qr, right), :2]) / 2.0
        return [
            (idx(top, mc), halffold),
            (idx(qr, left), quarter_mid),
            (idx(qr, right), quarter_mid),
        ]
    if task == ALL_CORNERS_INWARD:
        corners = [idx(top, left), idx(top, right), idx(bot, right), idx(bot, left)]
        return [(c, center) for c in corners]
    if task == CORNERS_EDGES_INWARD:
        points = [idx(top, left), idx(bot, right), idx(mr, right), idx(mr, left)]
        return [(p, center) for p in points]
    raise TaskError(f"unknown task {task!r}")


@dataclass
class SubgoalSequence:
    """T+1 settled goal states with rendered images and the T scripted
    actions that connect them. Images 0..T-1 carry that step's arrow."""

    task: str
    spec: ClothSpec
    goal_states: list[ClothState]
    subgoal_images: list[np.ndarray]
    scripted_actions: list[WorldAction]
    instructions: tuple[str, ...] = ()
    camera: Camera | None = None

    def __post_init__(self) -> None:
        _require_task(self.task)
        horizon = TASK_HORIZON[self.task]
        if len(self.scripted_actions) != horizon:
            raise TaskError(
                f"{self.task} needs {horizon} actions, got {len(self.scripted_actions)}"
            )
        if len(self.goal_states) != horizon + 1 or len(self.subgoal_images) != horizon + 1:
            raise TaskError("goal_states and subgoal_images must have T+1 entries")
        if not self.instructions:
            self.instructions = TASK_INSTRUCTIONS[self.task]
        if self.camera is None:
            self.camera = sequence_camera(self.spec)

    @property
    def horizon(self) -> int:
        return len(self.scripted_actions)


def cache_key(task: str, spec: ClothSpec, camera: Camera | None = None) -> str:
    """Content address for a cached sequence: task, spec, camera, script
    version."""
    camera = camera or sequence_camera(spec)
    blob = json.dumps(
        {
            "task": task,
            "rows": spec.rows,
            "cols": spec.cols,
            "rest_spacing": spec.rest_spacing,
            "rest_spacing_y": spec.rest_spacing_y,
            "rotation": spec.rotation,
            "mass_per_particle": spec.mass_per_particle,
            "camera": [
                camera.height_px,
                camera.width_px,
                camera.meters_per_pixel,
                list(camera.world_origin_px),
                camera.camera_height,
            ],
            "script_version": SCRIPT_VERSION,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _generate(task, spec, camera, params):
    state = settle(make_flat_cloth(spec, params), params)
    script = _script_waypoints(task, state)
    states = [state]
    actions = []
    for pick_idx, place_xy in script:
        p = state.positions[pick_idx]
        action = WorldAction(
            pick=(float(p[0]), float(p[1]), float(p[2])),
            place=(float(place_xy[0]), float(place_xy[1]), 0.0),
        )
        state = execute_pick_place(state, action, params)
        actions.append(action)
        states.append(state)
    images = []
    for t, st in enumerate(states):
        obs = render_topdown(st, camera)
        if t < len(actions):
            pick_px = world_to_pixel(camera, actions[t].pick[:2])
            place_px = world_to_pixel(camera, actions[t].place[:2])
            images.append(annotate_subgoal_arrow(obs.rgb, pick_px, place_px).rgb)
        else:
            images.append(obs.rgb)
    return SubgoalSequence(
        task=task,
        spec=spec,
        goal_states=states,
        subgoal_images=images,
        scripted_actions=actions,
        camera=camera,
    )


def _store(seq: SubgoalSequence, root: pathlib.Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for t, state in enumerate(seq.goal_states):
        save_state(state, root / f"state_{t:02d}.bin")
    for t, img in enumerate(seq.subgoal_images):
        Image.fromarray(img).save(root / f"subgoal_{t:02d}.png")
    manifest = {
        "task": seq.task,
        "script_version": SCRIPT_VERSION,
        "spec": {
            "rows": seq.spec.rows,
            "cols": seq.spec.cols,
            "rest_spacing": seq.spec.rest_spacing,
            "rest_spacing_y": seq.spec.rest_spacing_y,
            "rotation": seq.spec.rotation,
            "mass_per_particle": seq.spec.mass_per_particle,
        },
        "camera": {
            "height_px": seq.camera.height_px,
            "width_px": seq.camera.width_px,
            "meters_per_pixel": seq.camera.meters_per_pixel,
            "world_origin_px": list(seq.camera.world_origin_px),
            "camera_height": seq.camera.camera_height,
        },
        "actions": [
            {"pick": list(a.pick), "place": list(a.place)} for a in seq.scripted_actions
        ],
        "instructions": list(seq.instructions),
        "states": [f"state_{t:02d}.bin" for t in range(len(seq.goal_states))],
        "images": [f"subgoal_{t:02d}.png" for t in range(len(seq.subgoal_images))],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _load(root: pathlib.Path) -> SubgoalSequence:
    manifest = json.loads((root / "manifest.json").read_text())
    s = manifest["spec"]
    spec = ClothSpec(
        rows=s["rows"],
        cols=s["cols"],
        rest_spacing=s["rest_spacing"],
        rest_spacing_y=s["rest_spacing_y"],
        rotation=s["rotation"],
        mass_per_particle=s["mass_per_particle"],
    )
    c = manifest["camera"]
    camera = Camera(
        height_px=c["height_px"],
        width_px=c["width_px"],
        meters_per_pixel=c["meters_per_pixel"],
        world_origin_px=tuple(c["world_origin_px"]),
        camera_height=c["camera_height"],
    )
    states = [load_state(root / name, spec) for name in manifest["states"]]
    images = [np.asarray(Image.open(root / name).convert("RGB")) for name in manifest["images"]]
    actions = [
        WorldAction(pick=tuple(a["pick"]), place=tuple(a["place"]))
        for a in manifest["actions"]
    ]
    return SubgoalSequence(
        task=manifest["task"],
        spec=spec,
        goal_states=states,
        subgoal_images=images,
        scripted_actions=actions,
        instructions=tuple(manifest["instructions"]),
        camera=camera,
    )


def make_subgoal_sequence(
    task: str,
    spec: ClothSpec,
    camera: Camera | None = None,
    params: SimParams | None = None,
    cache_dir: str | pathlib.Path | None = None,
) -> SubgoalSequence:
    """Execute the task script from a flat start, or load the cached result.

    ``camera`` defaults to :func:`sequence_camera` for the spec; the camera
    actually used travels with the sequence. With ``cache_dir`` set,
    sequences are stored under a directory named by :func:`cache_key` and
    reloaded on later calls.
    """
    _require_task(task)
    _check_spec(task, spec)
    camera = camera or sequence_camera(spec)
    params = params or TASK_SIM_PARAMS
    root = None
    if cache_dir is not None:
        root = pathlib.Path(cache_dir) / f"{task}-{cache_key(task, spec, camera)}"
        if (root / "manifest.json").exists():
            return _load(root)
    seq = _generate(task, spec, camera, params)
    if root is not None:
        _store(seq, root)
        log.info("cached %s sequence at %s", task, root)
    return seq


def replay_error_mm(seq: SubgoalSequence, params: SimParams | None = None) -> float:
    """Re-execute the scripted actions from the stored start state and
    measure the mean particle distance to the stored final state."""
    params = params or TASK_SIM_PARAMS
    state = seq.goal_states[0].copy()
    for action in seq.scripted_actions:
        state = execute_pick_place(state, action, params)
    return mean_particle_distance(state, seq.goal_states[-1])


def build_demonstrations(
    task: str,
    camera: Camera | None = None,
    params: SimParams | None = None,
    cache_dir: str | pathlib.Path | None = None,
    rotation_deg: float = 0.0,
) -> list[list[Demonstration]]:
    """Demo store for in-context prompting: DEMOS_PER_ACTION exemplars for
    each of the T actions, from the 10 sweep sizes at one rotation.

    Returns a list indexed by action step; flattening it yields exactly
    10*T demonstrations. Pixel coordinates use each sequence's own camera,
    the one its images were rendered with.
    """
    _require_task(task)
    per_step: list[list[Demonstration]] = [[] for _ in range(TASK_HORIZON[task])]
    for size_index in range(DEMOS_PER_ACTION):
        seq = make_subgoal_sequence(
            task, task_spec(task, size_index, rotation_deg), camera, params, cache_dir
        )
        for t, action in enumerate(seq.scripted_actions):
            per_step[t].append(
                Demonstration(
                    annotated_pair=(seq.subgoal_images[t], seq.subgoal_images[t + 1]),
                    instruction=seq.instructions[t],
                    pick_px=world_to_pixel(seq.camera, action.pick[:2]),
                    place_px=world_to_pixel(seq.camera, action.place[:2]),
                )
            )
    return per_step


__all__ = [
    "DOUBLE_TRIANGLE",
    "DOUBLE_STRAIGHT",
    "ALL_CORNERS_INWARD",
    "CORNERS_EDGES_INWARD",
    "TASKS",
    "TASK_HORIZON",
    "TASK_INSTRUCTIONS",
    "SCRIPT_VERSION",
    "ROTATIONS_DEG",
    "SQUARE_SIDES",
    "RECT_SIDES_X",
    "RECT_SIDES_Y",
    "DEMOS_PER_ACTION",
    "CAMERA_FOLD_MARGIN_M",
    "TASK_SIM_PARAMS",
    "TaskError",
    "SubgoalSequence",
    "task_spec",
    "sweep_specs",
    "sequence_camera",
    "cache_key",
    "make_subgoal_sequence",
    "replay_error_mm",
    "build_demonstrations",
]
