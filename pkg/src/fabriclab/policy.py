"""Action proposal: prompt construction, response parsing, scripted proposers.

The pull action is discretized: 8 angles in pi/4 steps and 5 pull distances
as fractions of the flat fabric edge. Parsers only ever emit actions on that
menu; free-form model output is never executed directly.
"""

import math
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .percept import AnnotatedImage, PerceptSummary
from .render import Camera, pixel_to_world, visible_world_bounds
from .sim import ClothSpec, ClothState, WorldAction, nearest_particle
from .verify import proximity_check, VerifyParams

PULL_ANGLES = tuple(k * math.pi / 4.0 for k in range(8))
ANGLE_TOKENS = ("0", "pi/4", "pi/2", "3*pi/4", "pi", "5*pi/4", "3*pi/2", "7*pi/4")
PULL_FRACTIONS = (0.1, 0.25, 0.5, 0.75, 1.0)
FRACTION_TOKENS = ("0.1", "0.25", "0.5", "0.75", "1.0")

# Place targets are clamped to the visible extent shrunk by this frame
# fraction, so a full-length pull cannot drag fabric off camera.
WORKSPACE_MARGIN_FRAC = 0.03

CORNER_SNAP_PX = 3.0  # a coordinate reply may be this far from a listed corner

INSTRUCTION_TEMPERATURE = 0.2
ACTION_TEMPERATURE = 0.0


class PolicyError(Exception):
    pass


class NoCorners(PolicyError):
    """The percept summary has no corners to choose from."""


class ParseError(PolicyError):
    """The response does not contain the requested structured answer."""


class InvalidChoice(PolicyError):
    """The response names an off-menu corner, angle, or distance."""


@dataclass(frozen=True)
class SmoothAction:
    """Discretized smoothing pull: grasp a corner pixel, pull at one of the
    8 angles for one of the 5 fractions of the flat edge length."""

    pick_corner: tuple[int, int]
    pull_angle: float
    pull_fraction: float

    def __post_init__(self) -> None:
        if self.pull_angle not in PULL_ANGLES:
            raise InvalidChoice(f"pull_angle {self.pull_angle} not on the menu")
        if self.pull_fraction not in PULL_FRACTIONS:
            raise InvalidChoice(f"pull_fraction {self.pull_fraction} not on the menu")
        object.__setattr__(
            self, "pick_corner", (int(self.pick_corner[0]), int(self.pick_corner[1]))
        )


@dataclass(frozen=True)
class FoldAction:
    pick_px: tuple[int, int]
    place_px: tuple[int, int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "pick_px", (int(self.pick_px[0]), int(self.pick_px[1])))
        object.__setattr__(
            self, "place_px", (int(self.place_px[0]), int(self.place_px[1]))
        )


@dataclass(frozen=True)
class FoldingInstruction:
    text: str
    source_pair: tuple[int, int]

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("instruction text must be non-empty")


@dataclass
class Demonstration:
    """One in-context exemplar: an annotated subgoal pair, the instruction
    describing it, and the executed pick/place pixels."""

    annotated_pair: tuple[np.ndarray, np.ndarray]
    instruction: str
    pick_px: tuple[int, int]
    place_px: tuple[int, int]

    def __post_init__(self) -> None:
        h, w = self.annotated_pair[0].shape[:2]
        for name, (c, r) in (("pick", self.pick_px), ("place", self.place_px)):
            if not (0 <= c < w and 0 <= r < h):
                raise ValueError(f"demonstration {name} pixel ({c}, {r}) outside {w}x{h}")


@dataclass
class PromptPayload:
    """Prompt text plus the images it references, in reference order."""

    text: str
    images: list[np.ndarray] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Smoothing prompt
# ---------------------------------------------------------------------------

_SMOOTHING_TASK = (
    "You are controlling a single robot arm that smooths a piece of fabric "
    "lying on a dark workspace, seen from directly above. One pick-and-place "
    "pull is executed per turn: the arm grasps the fabric at a picking point, "
    "lifts it slightly, drags it parallel to the workspace, and releases."
)

_SMOOTHING_LEGEND = (
    "Annotated image legend:\n"
    "- Red circles with white numbers: candidate fabric corners, indexed from 0.\n"
    "- Yellow rectangle: bounding box of the detected fabric.\n"
    "- Green cross: estimated fabric center.\n"
    "- Magenta dot (if present): the previous placing point.\n"
    "- Cyan dot (if present): the point symmetric to the previous placing "
    "point about the fabric center."
)

_SMOOTHING_STRATEGY = (
    "Strategy:\n"
    "1. Choose one of the numbered candidate corners as the picking point.\n"
    "2. Choose a pull angle that moves that corner outward, away from the "
    "fabric center.\n"
    "3. Choose the largest pull distance which avoids dragging the fabric "
    "center too far from the image center."
)


def _smoothing_answer_format(free_pick: bool) -> str:
    pick_line = (
        "1. Picking point: <col, row pixel coordinates>"
        if free_pick
        else "1. Picking point: <corner index>"
    )
    return (
        "Answer with exactly three numbered lines:\n"
        f"{pick_line}\n"
        f"2. Pull angle: <one of {', '.join(ANGLE_TOKENS)}>\n"
        f"3. Pull distance: <one of {', '.join(FRACTION_TOKENS)}, as a fraction "
        "of the flattened fabric edge length>"
    )


def build_smoothing_prompt(
    annotated: AnnotatedImage,
    summary: PerceptSummary,
    correction: Optional[str] = None,
    include_marks: bool = True,
) -> PromptPayload:
    """Compose the smoothing query: task, legend, strategy, correction slot,
    keypoint coordinates, option menus, and the answer schema.

    ``include_marks=False`` is the no-preprocessing ablation: the legend and
    corner list are dropped and the picking point is requested as a raw pixel.
    """
    if include_marks and not summary.corners:
        raise NoCorners("cannot build a smoothing prompt without corners")
    parts = [_SMOOTHING_TASK]
    if include_marks:
        parts.append(_SMOOTHING_LEGEND)
    parts.append(_SMOOTHING_STRATEGY)
    if correction:
        parts.append("Correction from the previous attempt:\n" + correction)
    if include_marks:
        corner_lines = "\n".join(
            f"  {i}: ({c}, {r})" for i, (c, r) in enumerate(summary.corners)
        )
        parts.append(
            "Candidate corners (pixel coordinates as (col, row)):\n"
            + corner_lines
            + f"\nFabric center: ({summary.center[0]}, {summary.center[1]})\n"
            + f"Bounding box: ({summary.bbox[0][0]}, {summary.bbox[0][1]}) to "
            + f"({summary.bbox[1][0]}, {summary.bbox[1][1]})"
        )
    parts.append(_smoothing_answer_format(free_pick=not include_marks))
    return PromptPayload(
        text="\n\n".join(parts),
        images=[annotated.rgb],
        metadata={
            "kind": "smoothing",
            "corners": [list(c) for c in summary.corners] if include_marks else [],
            "correction": correction,
            "include_marks": include_marks,
        },
    )


_NUMBERED_LINE = re.compile(r"^\s*([123])[.):]\s*(.+?)\s*$", re.MULTILINE)
_PIXEL_PAIR = re.compile(r"\(?\s*(\d+)\s*,\s*(\d+)\s*\)?")
_ANGLE_EXPR = re.compile(
    r"(\d+\s*\*?\s*pi\s*/\s*\d+|pi\s*/\s*\d+|\d+\s*\*?\s*pi|pi|-?\d+(?:\.\d+)?)",
    re.IGNORECASE,
)
_FLOAT = re.compile(r"-?\d+(?:\.\d+)?")


def _numbered_answers(text: str) -> dict[str, str]:
    found: dict[str, str] = {}
    for num, body in _NUMBERED_LINE.findall(text):
        found[num] = body  # keep the last occurrence of each number
    return found


def _parse_angle(body: str) -> float:
    m = _ANGLE_EXPR.search(body.replace("π", "pi"))
    if not m:
        raise ParseError(f"no pull angle in {body!r}")
    token = m.group(1).lower().replace(" ", "").replace("*", "")
    if "pi" in token:
        mult = 1.0
        div = 1.0
        head, _, tail = token.partition("pi")
        if head:
            mult = float(head)
        if tail.startswith("/"):
            div = float(tail[1:])
        value = mult * math.pi / div
    else:
        value = float(token)
    for angle in PULL_ANGLES:
        if abs(value - angle) < 1e-6:
            return angle
    raise InvalidChoice(f"pull angle {m.group(1)!r} is not one of the 8 options")


def _parse_fraction(body: str) -> float:
    m = _FLOAT.search(body)
    if not m:
        raise ParseError(f"no pull distance in {body!r}")
    value = float(m.group(0))
    for frac in PULL_FRACTIONS:
        if abs(value - frac) < 1e-9:
            return frac
    raise InvalidChoice(f"pull distance {m.group(0)!r} is not one of the 5 options")


def _parse_pick(body: str, corners: Optional[Sequence[tuple[int, int]]]):
    pair = _PIXEL_PAIR.search(body)
    if pair and ("," in body):
        px = (int(pair.group(1)), int(pair.group(2)))
        if corners is None:
            return px
        best = None
        best_d = math.inf
        for c, r in corners:
            d = math.hypot(px[0] - c, px[1] - r)
            if d < best_d:
                best, best_d = (c, r), d
        if best is None or best_d > CORNER_SNAP_PX:
            raise InvalidChoice(
                f"picking point {px} is not within {CORNER_SNAP_PX:.0f} px of any "
                "listed corner"
            )
        return best
    m = re.search(r"\d+", body)
    if not m:
        raise ParseError(f"no picking point in {body!r}")
    if corners is None:
        raise ParseError(f"expected pixel coordinates, got {body!r}")
    idx = int(m.group(0))
    if not 0 <= idx < len(corners):
        raise InvalidChoice(f"corner index {idx} out of range 0..{len(corners) - 1}")
    return tuple(corners[idx])


def parse_smoothing_response(
    text: str, corners: Optional[Sequence[tuple[int, int]]]
) -> SmoothAction:
    """Extract the three numbered answers into a menu-validated action.

    Free text around the numbered schema is ignored; when each number appears
    more than once the last occurrence wins. ``corners=None`` enables the
    no-preprocessing ablation where the pick is a raw pixel.
    """
    answers = _numbered_answers(text)
    missing = [n for n in ("1", "2", "3") if n not in answers]
    if missing:
        raise ParseError(f"response is missing numbered answer(s) {missing}")
    pick = _parse_pick(answers["1"], corners)
    angle = _parse_angle(answers["2"])
    fraction = _parse_fraction(answers["3"])
    return SmoothAction(pick_corner=pick, pull_angle=angle, pull_fraction=fraction)


def smooth_action_to_world(
    action: SmoothAction,
    camera: Camera | None = None,
    spec: ClothSpec | None = None,
    state: ClothState | None = None,
) -> WorldAction:
    """Convert a pixel-space pull into a world pick-and-place.

    The pick maps through the camera and, when ``state`` is given, snaps to
    the nearest cloth particle. The place extends from the pick by
    ``pull_fraction`` of the flat edge length along ``pull_angle`` and is
    clamped to the camera's workspace.
    """
    camera = camera or Camera()
    spec = spec or ClothSpec()
    pick_xy = pixel_to_world(camera, action.pick_corner)
    pick_z = 0.0
    if state is not None:
        idx, _ = nearest_particle(state, pick_xy)
        pick_xy = state.positions[idx, :2].copy()
        pick_z = float(state.positions[idx, 2])
    dist = action.pull_fraction * spec.edge_length
    place = pick_xy + dist * np.array(
        [math.cos(action.pull_angle), math.sin(action.pull_angle)]
    )
    x0, y0, x1, y1 = visible_world_bounds(camera, WORKSPACE_MARGIN_FRAC)
    place[0] = min(max(place[0], x0), x1)
    place[1] = min(max(place[1], y0), y1)
    return WorldAction(
        pick=(float(pick_xy[0]), float(pick_xy[1]), pick_z),
        place=(float(place[0]), float(place[1]), 0.0),
    )


# ---------------------------------------------------------------------------
# Folding prompts (two stages)
# ---------------------------------------------------------------------------

INSTRUCTION_COMPONENTS = (
    "visual_context",
    "arrow",
    "center_pivot",
    "instruction_constraint",
    "output_format",
)

_INSTRUCTION_SECTIONS = {
    "visual_context": (
        "Visual context: you are given two top-down images of the same piece "
        "of fabric on a dark workspace. The first image shows the fabric "
        "before a single fold step; the second shows it after."
    ),
    "arrow": (
        "Pick-and-place arrow: the first image is annotated with a black "
        "arrow from the grasped point to the released point of the fold step "
        "(a black dot if the two coincide)."
    ),
    "center_pivot": (
        "Center pivoting: describe motion relative to the fabric center, for "
        "example which corner or edge moves toward, across, or away from the "
        "center."
    ),
    "instruction_constraint": (
        "Instruction constraint: reply with a single imperative sentence that "
        "says which part of the fabric is grasped and where it is placed. Do "
        "not mention pixels, images, or the arrow."
    ),
    "output_format": "Output format:\nInstruction: <one sentence>",
}


def build_instruction_prompt(
    subgoal_pair: tuple[np.ndarray, np.ndarray],
    demos: Sequence[Demonstration] = (),
    omit: frozenset[str] = frozenset(),
) -> PromptPayload:
    """Compose the instruction-stage query over a consecutive subgoal pair.

    The five prompt components are individually removable via ``omit`` for
    the ablation harness. Demonstration pairs precede the query pair.
    """
    unknown = set(omit) - set(INSTRUCTION_COMPONENTS)
    if unknown:
        raise ValueError(f"unknown prompt component(s): {sorted(unknown)}")
    parts = ["Describe the fold step shown by a pair of fabric images."]
    for name in INSTRUCTION_COMPONENTS:
        if name not in omit:
            parts.append(_INSTRUCTION_SECTIONS[name])
    images: list[np.ndarray] = []
    if demos:
        for i, demo in enumerate(demos):
            parts.append(f"Example {i + 1} (two images follow):\nInstruction: {demo.instruction}")
            images.extend(demo.annotated_pair)
    parts.append("Now describe the fold step shown by the final two images.")
    images.extend(subgoal_pair)
    return PromptPayload(
        text="\n\n".join(parts),
        images=images,
        metadata={
            "kind": "folding_instruction",
            "components": [c for c in INSTRUCTION_COMPONENTS if c not in omit],
            "num_demos": len(demos),
        },
    )


def parse_instruction_response(text: str, source_pair: tuple[int, int]) -> FoldingInstruction:
    """Pull the 'Instruction:' line out of the instruction-stage reply."""
    matches = re.findall(r"Instruction:\s*(.+)", text)
    if not matches:
        raise ParseError("no 'Instruction:' line in response")
    return FoldingInstruction(text=matches[-1].strip(), source_pair=source_pair)


_FOLDING_SYSTEM = (
    "You are controlling a single robot arm that folds a piece of fabric on a "
    "dark workspace, seen from directly above. Each step grasps the fabric at "
    "a pick point, lifts it slightly, drags it parallel to the workspace, and "
    "releases it at a place point. Corners listed below were detected on the "
    "current fabric image; the center is the middle of the fabric's bounding "
    "box. Pixel coordinates are (col, row) with (0, 0) at the top-left."
)


def build_folding_action_prompt(
    instruction: FoldingInstruction,
    summary: PerceptSummary,
    demos: Sequence[Demonstration] = (),
) -> PromptPayload:
    """Compose the action-stage query: universal folding context, the
    instruction, keypoints, a chain-of-thought request, and the fixed
    pick/place answer schema."""
    if not summary.corners:
        raise NoCorners("cannot build a folding action prompt without corners")
    corner_lines = "\n".join(
        f"  - ({c}, {r})" for c, r in summary.corners
    )
    parts = [_FOLDING_SYSTEM]
    if demos:
        demo_lines = []
        for demo in demos:
            demo_lines.append(
                f"Instruction: {demo.instruction}\n"
                f"Pick point: ({demo.pick_px[0]}, {demo.pick_px[1]})\n"
                f"Place point: ({demo.place_px[0]}, {demo.place_px[1]})"
            )
        parts.append("Examples of executed folds:\n\n" + "\n\n".join(demo_lines))
    parts.append(f"Instruction: {instruction.text}")
    parts.append(
        "Detected corners:\n"
        + corner_lines
        + f"\nFabric center: ({summary.center[0]}, {summary.center[1]})"
    )
    parts.append(
        "Think step by step about which point to grasp and where it must land "
        "to follow the instruction. End your reply with exactly two lines:\n"
        "Pick point: (<col>, <row>)\n"
        "Place point: (<col>, <row>)"
    )
    return PromptPayload(
        text="\n\n".join(parts),
        images=[],
        metadata={
            "kind": "folding_action",
            "num_demos": len(demos),
            "instruction": instruction.text,
        },
    )


def parse_folding_response(text: str, width: int = 224, height: int = 224) -> FoldAction:
    """Extract the pick/place pixel pair; reasoning text is left to the log."""
    pick = re.findall(r"Pick point:\s*\(?\s*(\d+)\s*,\s*(\d+)\s*\)?", text)
    place = re.findall(r"Place point:\s*\(?\s*(\d+)\s*,\s*(\d+)\s*\)?", text)
    if not pick:
        raise ParseError("no 'Pick point:' line in response")
    if not place:
        raise ParseError("no 'Place point:' line in response")
    pick_px = (int(pick[-1][0]), int(pick[-1][1]))
    place_px = (int(place[-1][0]), int(place[-1][1]))
    for name, (c, r) in (("pick", pick_px), ("place", place_px)):
        if not (0 <= c < width and 0 <= r < height):
            raise ParseError(
                f"OutOfFrame: {name} point ({c}, {r}) outside {width}x{height}"
            )
    return FoldAction(pick_px=pick_px, place_px=place_px)


# ---------------------------------------------------------------------------
# Scripted proposers
# ---------------------------------------------------------------------------


def _nearest_menu_angle(angle: float) -> float:
    return min(PULL_ANGLES, key=lambda a: min(abs(a - angle), 2 * math.pi - abs(a - angle)))


def heuristic_smooth_propose(
    summary: PerceptSummary,
    prior_pick: Optional[tuple[int, int]] = None,
    spec: ClothSpec | None = None,
    camera: Camera | None = None,
    params: VerifyParams | None = None,
) -> SmoothAction:
    """Deterministic outward pull: farthest proximity-passing corner, snapped
    outward angle, and a quarter-edge pull distance.

    The farthest detected corner is a true convex cloth corner, and a
    moderate fixed pull spreads the material behind it without dragging the
    whole cloth across the workspace the way longer pulls do; the world
    conversion clamps the place point to the workspace, so no frame check is
    needed here. Falls back to ignoring proximity when every corner is
    blocked, mirroring the relaxed verification phase.
    """
    if not summary.corners:
        raise NoCorners("heuristic proposer needs at least one corner")
    params = params or VerifyParams()
    center = summary.center

    passing = [
        c
        for c in summary.corners
        if proximity_check(c, prior_pick, center, params).passed
    ]
    pool = passing if passing else list(summary.corners)

    def dist_to_center(px):
        return math.hypot(px[0] - center[0], px[1] - center[1])

    best = max(enumerate(pool), key=lambda ic: (dist_to_center(ic[1]), -ic[0]))[1]

    dx = best[0] - center[0]
    dy = center[1] - best[1]
    if dx == 0 and dy == 0:
        angle = PULL_ANGLES[0]
    else:
        angle = _nearest_menu_angle(math.atan2(dy, dx) % (2 * math.pi))

    return SmoothAction(pick_corner=best, pull_angle=angle, pull_fraction=0.25)


def random_propose(summary: PerceptSummary, seed: int) -> SmoothAction:
    """Uniform choice over detected corners x 8 angles x 5 fractions."""
    if not summary.corners:
        raise NoCorners("random proposer needs at least one corner")
    rng = np.random.default_rng(seed)
    corner = summary.corners[int(rng.integers(len(summary.corners)))]
    angle = PULL_ANGLES[int(rng.integers(len(PULL_ANGLES)))]
    fraction = PULL_FRACTIONS[int(rng.integers(len(PULL_FRACTIONS)))]
    return SmoothAction(pick_corner=corner, pull_angle=angle, pull_fraction=fraction)


__all__ = [
    "PULL_ANGLES",
    "ANGLE_TOKENS",
    "PULL_FRACTIONS",
    "FRACTION_TOKENS",
    "INSTRUCTION_COMPONENTS",
    "INSTRUCTION_TEMPERATURE",
    "ACTION_TEMPERATURE",
    "SmoothAction",
    "FoldAction",
    "FoldingInstruction",
    "Demonstration",
    "PromptPayload",
    "PolicyError",
    "NoCorners",
    "ParseError",
    "InvalidChoice",
    "build_smoothing_prompt",
    "parse_smoothing_response",
    "smooth_action_to_world",
    "build_instruction_prompt",
    "parse_instruction_response",
    "build_folding_action_prompt",
    "parse_folding_response",
    "heuristic_smooth_propose",
    "random_propose",
]
