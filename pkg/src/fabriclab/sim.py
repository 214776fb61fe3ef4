"""Mass-spring cloth simulation with a quasi-static pick-and-place primitive.

World frame: right-handed, z up, ground plane at z = 0, cloth centered on the
origin. A cloth is a rows x cols grid of point masses joined by structural
(grid-neighbour), shear (diagonal) and bend (two-apart) springs, integrated
with semi-implicit Euler. Particle-particle repulsion gives folded regions a
finite thickness; the ground plane applies Coulomb-style tangential friction.

All public operations are pure: they return new states and never mutate their
inputs. Identical inputs produce bit-identical outputs (no hidden RNG).
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

DEFAULT_SIDE = 0.3125  # meters, flat edge length of the default square cloth


class SimError(Exception):
    pass


class NoParticleNearPick(SimError):
    """No cloth particle within the grasp radius of the requested pick point."""


class NonFiniteState(SimError):
    """Integration produced NaN or infinite positions/velocities."""


@dataclass(frozen=True)
class ClothSpec:
    """Geometry of a rectangular cloth grid.

    ``rest_spacing`` is the grid pitch along x; ``rest_spacing_y`` the pitch
    along y (``None`` means square pitch). The flat footprint is
    ``side_x = (cols - 1) * rest_spacing`` by ``side_y = (rows - 1) * pitch_y``.
    ``rotation`` spins the flat grid about z before any simulation happens.
    """

    rows: int = 25
    cols: int = 25
    rest_spacing: float = DEFAULT_SIDE / 24.0
    rest_spacing_y: float | None = None
    rotation: float = 0.0
    mass_per_particle: float = 4.0e-4

    def __post_init__(self) -> None:
        if self.rows < 2 or self.cols < 2:
            raise ValueError("cloth grid needs at least 2x2 particles")
        if self.rest_spacing <= 0:
            raise ValueError("rest_spacing must be positive")

    @property
    def pitch_x(self) -> float:
        return self.rest_spacing

    @property
    def pitch_y(self) -> float:
        return self.rest_spacing if self.rest_spacing_y is None else self.rest_spacing_y

    @property
    def side_x(self) -> float:
        return (self.cols - 1) * self.pitch_x

    @property
    def side_y(self) -> float:
        return (self.rows - 1) * self.pitch_y

    @property
    def num_particles(self) -> int:
        return self.rows * self.cols

    @property
    def edge_length(self) -> float:
        """Length of the longer flat edge (the unit for pull distances)."""
        return max(self.side_x, self.side_y)


def spec_from_sides(
    side_x: float,
    side_y: float,
    rows: int = 25,
    cols: int = 25,
    rotation: float = 0.0,
    mass_per_particle: float = 4.0e-4,
) -> ClothSpec:
    """Build a spec for a cloth with the given flat side lengths in meters."""
    sx = side_x / (cols - 1)
    sy = side_y / (rows - 1)
    return ClothSpec(
        rows=rows,
        cols=cols,
        rest_spacing=sx,
        rest_spacing_y=None if sy == sx else sy,
        rotation=rotation,
        mass_per_particle=mass_per_particle,
    )


def flat_area(spec: ClothSpec) -> float:
    """Area of the flat cloth footprint in square meters."""
    return spec.side_x * spec.side_y


@dataclass
class ClothState:
    spec: ClothSpec
    positions: np.ndarray  # (N, 3) float64
    velocities: np.ndarray  # (N, 3) float64
    pinned_index: int | None = None

    def copy(self) -> "ClothState":
        return ClothState(
            spec=self.spec,
            positions=self.positions.copy(),
            velocities=self.velocities.copy(),
            pinned_index=self.pinned_index,
        )


@dataclass(frozen=True)
class WorldAction:
    """A pick-and-place command in world coordinates (meters).

    ``pick`` selects the grasped particle (nearest in xy); ``place`` gives the
    xy release target. Heights travel with the primitive's lift, so only the
    xy components of ``place`` matter to the simulator.
    """

    pick: tuple[float, float, float]
    place: tuple[float, float, float]

    def __post_init__(self) -> None:
        p = np.asarray(self.pick, dtype=float)
        q = np.asarray(self.place, dtype=float)
        if p.shape != (3,) or q.shape != (3,):
            raise ValueError("pick and place must be 3-vectors")
        if not (np.isfinite(p).all() and np.isfinite(q).all()):
            raise ValueError("pick and place must be finite")
        object.__setattr__(self, "pick", tuple(float(v) for v in p))
        object.__setattr__(self, "place", tuple(float(v) for v in q))


@dataclass(frozen=True)
class SimParams:
    """Integration and material constants.

    ``dt`` is the outer (control) step; each outer step runs ``substeps``
    equal Euler substeps. Stiffnesses were tuned so the default cloth is
    stable at these steps; if you stiffen the springs, raise ``substeps``.
    """

    dt: float = 1.0 / 240.0
    substeps: int = 4
    stretch_stiffness: float = 180.0
    shear_stiffness: float = 18.0
    bend_stiffness: float = 1.0
    spring_damping: float = 0.03  # N*s/m; explicit dashpots must stay small
    damping: float = 8.0  # 1/s, global velocity decay
    gravity: float = 9.81
    ground_friction: float = 0.7
    particle_radius: float = 0.002
    contact_stiffness: float = 400.0
    contact_damping: float = 0.05  # N*s/m along the contact normal
    contact_friction: float = 0.08  # N*s/m tangential, Coulomb-capped
    lift_height: float = 0.005
    drag_speed: float = 0.25
    settle_velocity_eps: float = 1.0e-3
    settle_max_steps: int = 2000
    grasp_radius_factor: float = 1.5  # grasp radius = factor * grid pitch
    contact_refresh: int = 2  # outer steps between neighbour-pair rebuilds
    stick_speed: float = 0.01  # m/s, below this static friction may latch
    static_friction_ratio: float = 1.5  # static over kinetic threshold


def make_flat_cloth(spec: ClothSpec, params: SimParams | None = None) -> ClothState:
    """Flat cloth at rest on the ground, centered on the origin.

    The grid lies at the contact height (one particle radius) with zero
    velocity, rotated about z by ``spec.rotation``.
    """
    params = params or SimParams()
    xs = (np.arange(spec.cols) - (spec.cols - 1) / 2.0) * spec.pitch_x
    ys = (np.arange(spec.rows) - (spec.rows - 1) / 2.0) * spec.pitch_y
    gx, gy = np.meshgrid(xs, ys)
    pos = np.zeros((spec.num_particles, 3), dtype=np.float64)
    c, s = math.cos(spec.rotation), math.sin(spec.rotation)
    pos[:, 0] = c * gx.ravel() - s * gy.ravel()
    pos[:, 1] = s * gx.ravel() + c * gy.ravel()
    pos[:, 2] = params.particle_radius
    vel = np.zeros_like(pos)
    return ClothState(spec=spec, positions=pos, velocities=vel)


# ---------------------------------------------------------------------------
# Spring construction and the integrator core
# ---------------------------------------------------------------------------

_SPRING_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _grid_springs(spec: ClothSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Spring endpoint indices, rest lengths and stiffness group ids.

    Groups: 0 = structural, 1 = shear, 2 = bend.
    """
    key = (spec.rows, spec.cols, spec.pitch_x, spec.pitch_y)
    cached = _SPRING_CACHE.get(key)
    if cached is not None:
        return cached

    rows, cols = spec.rows, spec.cols
    px, py = spec.pitch_x, spec.pitch_y
    idx = np.arange(rows * cols).reshape(rows, cols)
    pairs: list[np.ndarray] = []
    rests: list[np.ndarray] = []
    groups: list[np.ndarray] = []

    def add(a: np.ndarray, b: np.ndarray, rest: float, group: int) -> None:
        p = np.stack([a.ravel(), b.ravel()], axis=1)
        pairs.append(p)
        rests.append(np.full(len(p), rest))
        groups.append(np.full(len(p), group, dtype=np.int64))

    add(idx[:, :-1], idx[:, 1:], px, 0)  # structural along x
    add(idx[:-1, :], idx[1:, :], py, 0)  # structural along y
    diag = math.hypot(px, py)
    add(idx[:-1, :-1], idx[1:, 1:], diag, 1)  # shear
    add(idx[1:, :-1], idx[:-1, 1:], diag, 1)
    add(idx[:, :-2], idx[:, 2:], 2.0 * px, 2)  # bend
    add(idx[:-2, :], idx[2:, :], 2.0 * py, 2)

    ij = np.concatenate(pairs, axis=0)
    rest = np.concatenate(rests)
    group = np.concatenate(groups)
    _SPRING_CACHE[key] = (ij, rest, group)
    return ij, rest, group


@njit(cache=True)
def _advance_outer(
    pos,
    vel,
    substeps,
    h,
    inv_mass,
    gravity,
    vel_decay,
    si,
    sj,
    rest,
    stiff,
    spring_damping,
    ci,
    cj,
    contact_d0,
    contact_stiffness,
    contact_damping,
    contact_friction,
    fric_mu,
    radius,
    fric_dv,
    stick_speed,
    static_ratio,
    pin,
    pin_a,
    pin_b,
):  # pragma: no cover - exercised through the public sim API
    """One outer step: ``substeps`` Euler substeps with fixed contact pairs.

    ``pin`` < 0 means no particle is pinned; otherwise the pinned particle
    tracks the segment pin_a -> pin_b linearly over the outer step.
    """
    n = pos.shape[0]
    ns = si.shape[0]
    nc = ci.shape[0]
    force = np.zeros((n, 3))
    pvx = pvy = pvz = 0.0
    if pin >= 0:
        dt = h * substeps
        pvx = (pin_b[0] - pin_a[0]) / dt
        pvy = (pin_b[1] - pin_a[1]) / dt
        pvz = (pin_b[2] - pin_a[2]) / dt
    for sub in range(substeps):
        for a in range(n):
            force[a, 0] = 0.0
            force[a, 1] = 0.0
            force[a, 2] = 0.0
        for s in range(ns):
            i = si[s]
            j = sj[s]
            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            dz = pos[j, 2] - pos[i, 2]
            length = math.sqrt(dx * dx + dy * dy + dz * dz)
            if length < 1e-12:
                length = 1e-12
            rvn = (
                (vel[j, 0] - vel[i, 0]) * dx
                + (vel[j, 1] - vel[i, 1]) * dy
                + (vel[j, 2] - vel[i, 2]) * dz
            ) / length
            fm = (stiff[s] * (length - rest[s]) + spring_damping * rvn) / length
            fx = fm * dx
            fy = fm * dy
            fz = fm * dz
            force[i, 0] += fx
            force[i, 1] += fy
            force[i, 2] += fz
            force[j, 0] -= fx
            force[j, 1] -= fy
            force[j, 2] -= fz
        for c in range(nc):
            i = ci[c]
            j = cj[c]
            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            dz = pos[j, 2] - pos[i, 2]
            length = math.sqrt(dx * dx + dy * dy + dz * dz)
            if length >= contact_d0:
                continue
            if length < 1e-9:
                length = 1e-9
            nx = dx / length
            ny = dy / length
            nz = dz / length
            rvx = vel[j, 0] - vel[i, 0]
            rvy = vel[j, 1] - vel[i, 1]
            rvz = vel[j, 2] - vel[i, 2]
            rvn = rvx * nx + rvy * ny + rvz * nz
            fn = contact_stiffness * (contact_d0 - length)
            fm = fn - contact_damping * rvn
            fx = fm * nx
            fy = fm * ny
            fz = fm * nz
            # Layer-to-layer Coulomb friction: viscous in the tangent plane,
            # capped by the elastic normal force. Without it piles slump flat.
            tvx = rvx - rvn * nx
            tvy = rvy - rvn * ny
            tvz = rvz - rvn * nz
            tv = math.sqrt(tvx * tvx + tvy * tvy + tvz * tvz)
            if tv > 1e-9:
                ft = contact_friction * tv
                cap = fric_mu * fn
                if ft > cap:
                    ft = cap
                fx -= ft * tvx / tv
                fy -= ft * tvy / tv
                fz -= ft * tvz / tv
            force[i, 0] -= fx
            force[i, 1] -= fy
            force[i, 2] -= fz
            force[j, 0] += fx
            force[j, 1] += fy
            force[j, 2] += fz
        alpha = (sub + 1.0) / substeps
        for a in range(n):
            vx = (vel[a, 0] + h * inv_mass * force[a, 0]) * vel_decay
            vy = (vel[a, 1] + h * inv_mass * force[a, 1]) * vel_decay
            vz = (vel[a, 2] + h * (inv_mass * force[a, 2] - gravity)) * vel_decay
            if a == pin:
                vx, vy, vz = pvx, pvy, pvz
            px = pos[a, 0] + h * vx
            py = pos[a, 1] + h * vy
            pz = pos[a, 2] + h * vz
            if a == pin:
                px = pin_a[0] + (pin_b[0] - pin_a[0]) * alpha
                py = pin_a[1] + (pin_b[1] - pin_a[1]) * alpha
                pz = pin_a[2] + (pin_b[2] - pin_a[2]) * alpha
            if pz < radius and a != pin:
                pz = radius
                if vz < 0.0:
                    vz = 0.0
                # Coulomb threshold scales with the actual normal load, so
                # particles pressed down by folded layers hold still. A
                # static-friction margin above the kinetic threshold stops
                # slow creep under near-critical tangential drive.
                a_norm = gravity - inv_mass * force[a, 2]
                if a_norm < 0.0:
                    a_norm = 0.0
                fric = fric_dv * a_norm
                sp = math.sqrt(vx * vx + vy * vy)
                drive = (
                    h
                    * inv_mass
                    * math.sqrt(force[a, 0] * force[a, 0] + force[a, 1] * force[a, 1])
                )
                if sp <= fric or (sp <= stick_speed and drive <= static_ratio * fric):
                    vx = 0.0
                    vy = 0.0
                elif sp > fric:
                    scale = 1.0 - fric / sp
                    vx *= scale
                    vy *= scale
            vel[a, 0] = vx
            vel[a, 1] = vy
            vel[a, 2] = vz
            pos[a, 0] = px
            pos[a, 1] = py
            pos[a, 2] = pz


class _Engine:
    """Precomputed arrays for stepping one (spec geometry, params) pair."""

    def __init__(self, spec: ClothSpec, params: SimParams):
        self.spec = spec
        self.params = params
        ij, rest, group = _grid_springs(spec)
        self.si = np.ascontiguousarray(ij[:, 0], dtype=np.int64)
        self.sj = np.ascontiguousarray(ij[:, 1], dtype=np.int64)
        self.rest = rest
        k_groups = np.array(
            [params.stretch_stiffness, params.shear_stiffness, params.bend_stiffness]
        )
        self.stiff = k_groups[group]
        self.n = spec.num_particles
        self.inv_mass = 1.0 / spec.mass_per_particle
        self.h = params.dt / params.substeps
        self.vel_decay = math.exp(-params.damping * self.h)
        self.contact_d0 = 2.0 * params.particle_radius
        self.fric_dv = params.ground_friction * self.h  # per unit normal accel
        self._no_pin = np.zeros(3)
        self._pair_age = 10**9
        self._ci = np.empty(0, dtype=np.int64)
        self._cj = np.empty(0, dtype=np.int64)

    def reset_contacts(self) -> None:
        """Drop the cached pair set so results never depend on prior calls."""
        self._pair_age = 10**9

    def refresh_contacts(self, pos: np.ndarray, vel: np.ndarray) -> None:
        """Rebuild the candidate contact pair set if it has gone stale."""
        p = self.params
        if self._pair_age < p.contact_refresh:
            self._pair_age += 1
            return
        self._pair_age = 0
        # Single-layer cloth whose grid pitch exceeds the contact diameter
        # cannot self-contact; skip the tree entirely.
        zspan = pos[:, 2].max() - p.particle_radius
        if zspan < 0.9 * self.contact_d0 and min(
            self.spec.pitch_x, self.spec.pitch_y
        ) > 1.5 * self.contact_d0:
            self._ci = self._cj = np.empty(0, dtype=np.int64)
            return
        if not np.isfinite(pos).all():
            raise NonFiniteState("cloth state diverged to NaN/inf")
        speed = float(np.abs(vel).max()) if len(vel) else 0.0
        margin = 2.0 * speed * p.dt * p.contact_refresh + 1e-4
        tree = cKDTree(pos)
        pairs = tree.query_pairs(self.contact_d0 + margin, output_type="ndarray")
        if len(pairs) == 0:
            self._ci = self._cj = np.empty(0, dtype=np.int64)
        else:
            self._ci = np.ascontiguousarray(pairs[:, 0], dtype=np.int64)
            self._cj = np.ascontiguousarray(pairs[:, 1], dtype=np.int64)

    def step_outer(
        self,
        pos: np.ndarray,
        vel: np.ndarray,
        pin: int | None = None,
        pin_from: np.ndarray | None = None,
        pin_to: np.ndarray | None = None,
    ) -> None:
        """Advance one outer step in place. A pinned particle moves from
        pin_from to pin_to linearly across the substeps."""
        p = self.params
        self.refresh_contacts(pos, vel)
        _advance_outer(
            pos,
            vel,
            p.substeps,
            self.h,
            self.inv_mass,
            p.gravity,
            self.vel_decay,
            self.si,
            self.sj,
            self.rest,
            self.stiff,
            p.spring_damping,
            self._ci,
            self._cj,
            self.contact_d0,
            p.contact_stiffness,
            p.contact_damping,
            p.contact_friction,
            p.ground_friction,
            p.particle_radius,
            self.fric_dv,
            p.stick_speed,
            p.static_friction_ratio,
            -1 if pin is None else pin,
            self._no_pin if pin_from is None else pin_from,
            self._no_pin if pin_to is None else pin_to,
        )


_ENGINE_CACHE: dict[tuple, _Engine] = {}


def _engine(spec: ClothSpec, params: SimParams) -> _Engine:
    key = (spec.rows, spec.cols, spec.pitch_x, spec.pitch_y, spec.mass_per_particle, params)
    eng = _ENGINE_CACHE.get(key)
    if eng is None:
        eng = _Engine(spec, params)
        _ENGINE_CACHE[key] = eng
    return eng


def _check_finite(pos: np.ndarray, vel: np.ndarray) -> None:
    if not (np.isfinite(pos).all() and np.isfinite(vel).all()):
        raise NonFiniteState("cloth state diverged to NaN/inf")


def settle(state: ClothState, params: SimParams | None = None) -> ClothState:
    """Step until the fastest particle is slower than ``settle_velocity_eps``.

    Speed is measured as displacement per control step, which stays honest
    under the stick-slip sawtooth that Coulomb friction produces. Stops with
    a warning after ``settle_max_steps`` outer steps if quiescence is not
    reached. Raises :class:`NonFiniteState` on divergence.
    """
    params = params or SimParams()
    eng = _engine(state.spec, params)
    eng.reset_contacts()
    pos = state.positions.copy()
    vel = state.velocities.copy()
    window = 16
    anchor = pos.copy()
    moved = math.inf
    for step in range(params.settle_max_steps):
        eng.step_outer(pos, vel)
        if (step + 1) % window == 0:
            moved = float(np.abs(pos - anchor).max()) / (window * params.dt)
            if moved < params.settle_velocity_eps:
                break
            anchor[:] = pos
    else:
        log.warning(
            "settle: still moving after %d steps (displacement rate %.4f m/s)",
            params.settle_max_steps,
            moved,
        )
    _check_finite(pos, vel)
    return ClothState(spec=state.spec, positions=pos, velocities=vel)


def _kinematic_move(
    eng: _Engine,
    pos: np.ndarray,
    vel: np.ndarray,
    pin: int,
    target: np.ndarray,
    speed: float,
) -> None:
    """Drag the pinned particle to ``target`` in a straight line at ``speed``."""
    p = eng.params
    eng.reset_contacts()
    start = pos[pin].copy()
    dist = float(np.linalg.norm(target - start))
    if dist < 1e-12:
        return
    n_steps = max(1, math.ceil(dist / (speed * p.dt)))
    for k in range(n_steps):
        a = start + (target - start) * (k / n_steps)
        b = start + (target - start) * ((k + 1) / n_steps)
        eng.step_outer(pos, vel, pin=pin, pin_from=a, pin_to=b)


def grasp_radius(spec: ClothSpec, params: SimParams) -> float:
    return params.grasp_radius_factor * max(spec.pitch_x, spec.pitch_y)


def nearest_particle(state: ClothState, xy: np.ndarray) -> tuple[int, float]:
    """Index of the particle nearest to ``xy`` in the ground plane, and its
    distance. Ties resolve to the lowest index."""
    d = state.positions[:, :2] - np.asarray(xy, dtype=float)[None, :]
    dist = np.sqrt(np.einsum("ij,ij->i", d, d))
    i = int(np.argmin(dist))
    return i, float(dist[i])


def execute_pick_place(
    state: ClothState, action: WorldAction, params: SimParams | None = None
) -> ClothState:
    """Run the pick, lift, drag, release, settle primitive.

    The particle nearest ``action.pick`` (in xy, within the grasp radius) is
    pinned, raised by ``lift_height``, dragged straight to ``action.place``'s
    xy at ``drag_speed``, released, and the cloth settled.
    """
    params = params or SimParams()
    pick_xy = np.asarray(action.pick[:2], dtype=float)
    place_xy = np.asarray(action.place[:2], dtype=float)
    idx, dist = nearest_particle(state, pick_xy)
    if dist > grasp_radius(state.spec, params):
        raise NoParticleNearPick(
            f"nearest particle is {dist * 1000:.1f} mm from pick, "
            f"grasp radius {grasp_radius(state.spec, params) * 1000:.1f} mm"
        )
    eng = _engine(state.spec, params)
    pos = state.positions.copy()
    vel = state.velocities.copy()

    up = pos[idx] + np.array([0.0, 0.0, params.lift_height])
    _kinematic_move(eng, pos, vel, idx, up, params.drag_speed)
    across = np.array([place_xy[0], place_xy[1], pos[idx, 2]])
    _kinematic_move(eng, pos, vel, idx, across, params.drag_speed)
    vel[idx] = 0.0
    _check_finite(pos, vel)
    released = ClothState(spec=state.spec, positions=pos, velocities=vel)
    return settle(released, params)


# ---------------------------------------------------------------------------
# Crumpling
# ---------------------------------------------------------------------------


def projected_coverage(state: ClothState, cell_frac: float = 0.4) -> float:
    """Projected cloth footprint area over the flat area.

    Rasterizes the xy projection of the grid's triangles onto a local lattice
    (cell edge ``cell_frac`` times the grid pitch). Independent of any camera.
    """
    area = _projected_area(state, cell_frac)
    return area / flat_area(state.spec)


def _projected_area(state: ClothState, cell_frac: float = 0.4) -> float:
    spec = state.spec
    cell = cell_frac * min(spec.pitch_x, spec.pitch_y)
    xy = state.positions[:, :2]
    lo = xy.min(axis=0) - cell
    hi = xy.max(axis=0) + cell
    nx = max(4, int(math.ceil((hi[0] - lo[0]) / cell)))
    ny = max(4, int(math.ceil((hi[1] - lo[1]) / cell)))
    mask = np.zeros((ny, nx), dtype=bool)
    tri = _grid_triangles(spec.rows, spec.cols)
    pts = (xy - lo) / cell  # continuous cell coords
    _fill_triangles_2d(mask, pts, tri)
    return float(mask.sum()) * cell * cell


_TRI_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _grid_triangles(rows: int, cols: int) -> np.ndarray:
    """Vertex index triples covering the grid with two triangles per quad."""
    key = (rows, cols)
    cached = _TRI_CACHE.get(key)
    if cached is not None:
        return cached
    idx = np.arange(rows * cols).reshape(rows, cols)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, :-1].ravel()
    d = idx[1:, 1:].ravel()
    tri = np.concatenate([np.stack([a, b, c], 1), np.stack([b, d, c], 1)])
    _TRI_CACHE[key] = tri
    return tri


def _fill_triangles_2d(mask: np.ndarray, pts: np.ndarray, tri: np.ndarray) -> None:
    """Mark lattice cells whose centers fall inside any triangle."""
    h, w = mask.shape
    v0 = pts[tri[:, 0]]
    v1 = pts[tri[:, 1]]
    v2 = pts[tri[:, 2]]
    lo = np.floor(np.minimum(np.minimum(v0, v1), v2)).astype(int)
    hi = np.ceil(np.maximum(np.maximum(v0, v1), v2)).astype(int)
    np.clip(lo, 0, [w - 1, h - 1], out=lo)
    np.clip(hi, 0, [w - 1, h - 1], out=hi)
    for t in range(len(tri)):
        x0, y0 = lo[t]
        x1, y1 = hi[t]
        if x1 < x0 or y1 < y0:
            continue
        gx = np.arange(x0, x1 + 1) + 0.5
        gy = np.arange(y0, y1 + 1) + 0.5
        px, py = np.meshgrid(gx, gy)
        inside = _points_in_triangle(px, py, v0[t], v1[t], v2[t])
        mask[y0 : y1 + 1, x0 : x1 + 1] |= inside


def _points_in_triangle(
    px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray
) -> np.ndarray:
    d1 = (px - b[0]) * (a[1] - b[1]) - (a[0] - b[0]) * (py - b[1])
    d2 = (px - c[0]) * (b[1] - c[1]) - (b[0] - c[0]) * (py - c[1])
    d3 = (px - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (py - a[1])
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def crumple(
    state: ClothState,
    params: SimParams | None = None,
    seed: int = 0,
    num_perturbations: int = 3,
    coverage_ceiling: float = 0.85,
    max_redraws: int = 12,
) -> ClothState:
    """Seeded random crumpling by repeated lift-shift-drop perturbations.

    Each perturbation lifts a random particle 2 to 6 cm, shifts it by a random
    xy offset of at most 0.4 of the longer side, drops it and settles. A
    perturbation is redrawn if the result's projected coverage is not below
    both ``coverage_ceiling`` and the input state's coverage, so crumpling
    never increases coverage. Deterministic for a given seed.
    """
    params = params or SimParams()
    rng = np.random.default_rng(seed)
    current = state
    if num_perturbations <= 0:
        return state.copy()
    cov_in = projected_coverage(state)
    eng = _engine(state.spec, params)
    for round_ in range(num_perturbations):
        # The final perturbation holds a tighter ceiling so crumpled starts
        # end clearly short of flat.
        last = round_ == num_perturbations - 1
        ceiling = min(coverage_ceiling - (0.05 if last else 0.0), cov_in + 1e-9)
        accepted: ClothState | None = None
        for _attempt in range(max_redraws):
            idx = int(rng.integers(state.spec.num_particles))
            height = float(rng.uniform(0.02, 0.06))
            angle = float(rng.uniform(0.0, 2.0 * math.pi))
            radius = float(rng.uniform(0.15, 0.4)) * state.spec.edge_length
            pos = current.positions.copy()
            vel = current.velocities.copy()
            lift_to = pos[idx] + np.array([0.0, 0.0, height])
            _kinematic_move(eng, pos, vel, idx, lift_to, params.drag_speed)
            over = np.array(
                [
                    pos[idx, 0] + radius * math.cos(angle),
                    pos[idx, 1] + radius * math.sin(angle),
                    pos[idx, 2],
                ]
            )
            _kinematic_move(eng, pos, vel, idx, over, params.drag_speed)
            vel[idx] = 0.0
            _check_finite(pos, vel)
            cand = settle(ClothState(state.spec, pos, vel), params)
            if projected_coverage(cand) < ceiling:
                accepted = cand
                break
        if accepted is not None:
            current = accepted
        # else: keep the current state for this round rather than raise coverage
    return current


# ---------------------------------------------------------------------------
# Binary state serialization
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<II")


def save_state(state: ClothState, path) -> None:
    """Write positions to ``path``: header ``<II`` rows, cols; then N
    little-endian float64 (x, y, z) triples in row-major particle order."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(state.spec.rows, state.spec.cols))
        fh.write(np.ascontiguousarray(state.positions, dtype="<f8").tobytes())


def load_state(path, spec: ClothSpec) -> ClothState:
    """Read a state written by :func:`save_state`. Velocities load as zero."""
    with open(path, "rb") as fh:
        rows, cols = _HEADER.unpack(fh.read(_HEADER.size))
        if (rows, cols) != (spec.rows, spec.cols):
            raise ValueError(
                f"state file is {rows}x{cols}, spec is {spec.rows}x{spec.cols}"
            )
        payload = fh.read()
    pos = np.frombuffer(payload, dtype="<f8").reshape(rows * cols, 3).astype(np.float64)
    return ClothState(
        spec=spec, positions=pos, velocities=np.zeros_like(pos), pinned_index=None
    )
