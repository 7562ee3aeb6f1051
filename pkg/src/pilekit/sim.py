"""Deterministic 2-D pile simulator: disks in a planar workspace pushed by a
rectangular-footprint sweep.

The pusher sweeps a ``pusher_width x length`` rectangle from ``start`` along
``angle``. Pieces whose centers fall inside the swept rectangle are carried
toward the pusher's final edge (at most ``max_push_carry``), scattered
laterally by a seeded noise term (clipped at 3 sigma), then separated by
iterative pairwise repulsion until no pair is closer than
``repulsion_radius``. Everything is a pure function of its inputs, so
episodes replay bit-for-bit.

Locality bound: a push never moves a piece whose center is farther than
``length + max_push_carry + 3*spread_sigma + relax_iters*repulsion_radius/2``
from the sweep rectangle (the last term bounds repulsion chain propagation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class SimConfig:
    n_pieces: int = 100
    piece_radius: float = 0.005
    workspace: tuple = (0.0, 0.0, 0.5, 0.5)  # x0, y0, x1, y1 (meters)
    grid_h: int = 64
    grid_w: int = 64
    spread_sigma: float = 0.004
    repulsion_radius: float = 0.011
    max_push_carry: float = 0.08
    len_min: float = 0.05
    len_max: float = 0.25
    pusher_width: float = 0.06
    relax_iters: int = 200
    # initial piece layout: "uniform" scatter, one "blob", or k "blobs"
    init_kind: str = "uniform"
    blob_center: tuple | None = None
    blob_radius: float = 0.06
    n_blobs: int = 2
    blob_centers: tuple | None = None
    material_per_blob: bool = True
    # per-material multiplier on carry distance and lateral scatter
    material_scale: tuple = (1.0,)

    def validate(self):
        x0, y0, x1, y1 = self.workspace
        if not (x1 > x0 and y1 > y0):
            raise ValueError("workspace must have positive extent")
        for name in ("piece_radius", "repulsion_radius", "max_push_carry",
                     "len_min", "len_max", "pusher_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.spread_sigma < 0:
            raise ValueError("spread_sigma must be >= 0")
        if self.n_pieces < 1:
            raise ValueError("n_pieces must be >= 1")
        # crude packing feasibility: disks of half the repulsion radius must fit
        need = self.n_pieces * math.pi * (self.repulsion_radius / 2.0) ** 2
        area = (x1 - x0) * (y1 - y0)
        if need > 0.6 * area:
            raise ValueError(
                f"{self.n_pieces} pieces at repulsion_radius "
                f"{self.repulsion_radius} cannot fit the workspace"
            )
        return self


@dataclass(frozen=True)
class Action:
    """Straight push: sweep starts at `start`, heads along `angle` for `length`."""

    start: tuple
    angle: float
    length: float
    pusher_width: float = 0.06

    def as_array(self):
        return np.array([self.start[0], self.start[1], self.angle, self.length])


@dataclass(frozen=True)
class PileState:
    positions: np.ndarray  # (n, 2) meters
    material: np.ndarray  # (n,) int labels
    piece_radius: float
    workspace: tuple
    rng_seed: int
    step: int = 0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        mat = np.asarray(self.material, dtype=int)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "material", mat)
        if pos.ndim != 2 or pos.shape[1] != 2 or len(pos) == 0:
            raise ValueError("positions must be a non-empty (n, 2) array")
        if len(mat) != len(pos):
            raise ValueError("material labels must match piece count")
        x0, y0, x1, y1 = self.workspace
        r = self.piece_radius
        inside = ((pos[:, 0] >= x0 - r) & (pos[:, 0] <= x1 + r)
                  & (pos[:, 1] >= y0 - r) & (pos[:, 1] <= y1 + r))
        if not inside.all():
            raise ValueError("piece positions outside inflated workspace")

    @property
    def n_pieces(self):
        return len(self.positions)


@dataclass(frozen=True)
class Observation:
    """Top-down view of a state: occupancy grid plus the labeled foreground
    point set. `origin` and `cell` give the pixel<->meter transform:
    px = (x - origin) / cell, with cell centers at half-integer pixels."""

    grid: np.ndarray  # (H, W) uint8, row i ~ y, col j ~ x
    points: np.ndarray  # (n, 2) meters
    material: np.ndarray  # (n,) int
    cell: float
    origin: np.ndarray  # (2,) meters, workspace lower corner
    piece_radius: float

    def to_pixels(self, points_m):
        return (np.asarray(points_m, dtype=float) - self.origin) / self.cell

    def filter_material(self, label: int) -> "Observation":
        mask = self.material == label
        grid = rasterize(self.points[mask], self.piece_radius, self.grid.shape,
                         self.cell, self.origin)
        return Observation(grid, self.points[mask], self.material[mask],
                           self.cell, self.origin, self.piece_radius)


def _clamp_to_workspace(positions, workspace, radius):
    x0, y0, x1, y1 = workspace
    out = positions.copy()
    out[:, 0] = np.clip(out[:, 0], x0 + radius, x1 - radius)
    out[:, 1] = np.clip(out[:, 1], y0 + radius, y1 - radius)
    return out


def relax_overlaps(positions, min_dist, workspace, radius, iters):
    """Jacobi-style pairwise separation until no pair is closer than min_dist.

    Only pieces participating in an overlapping pair move, so settled regions
    of the pile stay put. Worst-case displacement per iteration is min_dist/2.
    """
    pos = positions.copy()
    n = len(pos)
    if n < 2:
        return _clamp_to_workspace(pos, workspace, radius)
    for _ in range(iters):
        delta = pos[:, None, :] - pos[None, :, :]
        dist = np.sqrt((delta ** 2).sum(axis=2))
        np.fill_diagonal(dist, np.inf)
        close = dist < min_dist
        if not close.any():
            break
        ii, jj = np.nonzero(np.triu(close, k=1))
        d = dist[ii, jj]
        u = np.zeros((len(ii), 2))
        ok = d > 1e-12
        u[ok] = delta[ii[ok], jj[ok]] / d[ok, None]
        # coincident pieces separate along x, direction fixed by index order
        u[~ok] = np.array([1.0, 0.0])
        push = 0.5 * (min_dist - d)[:, None] * u
        disp = np.zeros_like(pos)
        np.add.at(disp, ii, push)
        np.add.at(disp, jj, -push)
        pos = _clamp_to_workspace(pos + disp, workspace, radius)
    return pos


def init_scene(config: SimConfig, seed: int) -> PileState:
    """Scatter pieces per config.init_kind; deterministic given (config, seed)."""
    config.validate()
    rng = np.random.default_rng([seed, 0])
    x0, y0, x1, y1 = config.workspace
    r = config.piece_radius
    n = config.n_pieces
    if config.init_kind == "uniform":
        pos = np.column_stack([
            rng.uniform(x0 + r, x1 - r, n),
            rng.uniform(y0 + r, y1 - r, n),
        ])
        mat = np.zeros(n, dtype=int)
    elif config.init_kind == "blob":
        center = config.blob_center or ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
        pos = center + _blob_offsets(rng, n, config.blob_radius)
        mat = np.zeros(n, dtype=int)
    elif config.init_kind == "blobs":
        k = config.n_blobs
        centers = config.blob_centers
        if centers is None:
            # ring of blob centers around the workspace middle
            cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
            rad = 0.3 * min(x1 - x0, y1 - y0)
            centers = [(cx + rad * math.cos(2 * math.pi * i / k),
                        cy + rad * math.sin(2 * math.pi * i / k)) for i in range(k)]
        counts = [n // k + (1 if i < n % k else 0) for i in range(k)]
        chunks, mats = [], []
        for i, (c, m) in enumerate(zip(centers, counts)):
            chunks.append(np.asarray(c) + _blob_offsets(rng, m, config.blob_radius))
            mats.append(np.full(m, i if config.material_per_blob else 0, dtype=int))
        pos = np.concatenate(chunks)
        mat = np.concatenate(mats)
    else:
        raise ValueError(f"unknown init_kind {config.init_kind!r}")
    pos = _clamp_to_workspace(pos, config.workspace, r)
    pos = relax_overlaps(pos, config.repulsion_radius, config.workspace, r,
                         config.relax_iters)
    return PileState(pos, mat, r, config.workspace, rng_seed=seed, step=0)


def _blob_offsets(rng, n, radius):
    """Uniform-in-disk offsets recentered so the blob centroid is exact."""
    theta = rng.uniform(0, 2 * math.pi, n)
    rho = radius * np.sqrt(rng.uniform(0, 1, n))
    off = np.column_stack([rho * np.cos(theta), rho * np.sin(theta)])
    return off - off.mean(axis=0)


def sweep_frame(action: Action):
    """Unit push direction and left-normal of the sweep rectangle."""
    d = np.array([math.cos(action.angle), math.sin(action.angle)])
    nrm = np.array([-d[1], d[0]])
    return d, nrm


def sweep_mask(points, action: Action):
    """Boolean mask of points inside the swept rectangle, plus along-push coords."""
    d, nrm = sweep_frame(action)
    rel = np.asarray(points, dtype=float) - np.asarray(action.start)
    along = rel @ d
    lateral = rel @ nrm
    inside = (along >= 0.0) & (along <= action.length) \
        & (np.abs(lateral) <= action.pusher_width / 2.0)
    return inside, along


def apply_push(state: PileState, action: Action, config: SimConfig) -> PileState:
    """One sweep: carry swept pieces to the pusher end line (clamped), scatter
    laterally, resolve overlaps. Pieces outside the sweep never gain overlap
    and therefore stay put."""
    d, nrm = sweep_frame(action)
    inside, along = sweep_mask(state.positions, action)
    scale = np.asarray(config.material_scale, dtype=float)[
        np.minimum(state.material, len(config.material_scale) - 1)]
    carry = np.minimum(action.length - along, config.max_push_carry * scale)
    pos = state.positions.copy()
    pos[inside] += carry[inside, None] * d

    if config.spread_sigma > 0:
        rng = np.random.default_rng([state.rng_seed, 7, state.step])
        noise = rng.normal(0.0, config.spread_sigma, len(pos)) * scale
        noise = np.clip(noise, -3 * config.spread_sigma, 3 * config.spread_sigma)
        pos[inside] += noise[inside, None] * nrm

    pos = _clamp_to_workspace(pos, state.workspace, state.piece_radius)
    pos = relax_overlaps(pos, config.repulsion_radius, state.workspace,
                         state.piece_radius, config.relax_iters)
    return replace(state, positions=pos, step=state.step + 1)


def rasterize(points, radius, shape, cell, origin):
    """Occupancy grid: cell = 1 iff any piece disk overlaps the cell square."""
    h, w = shape
    grid = np.zeros((h, w), dtype=np.uint8)
    ox, oy = origin
    for x, y in np.asarray(points, dtype=float):
        j0 = max(0, int(math.floor((x - radius - ox) / cell)))
        j1 = min(w - 1, int(math.floor((x + radius - ox) / cell)))
        i0 = max(0, int(math.floor((y - radius - oy) / cell)))
        i1 = min(h - 1, int(math.floor((y + radius - oy) / cell)))
        for i in range(i0, i1 + 1):
            cy0 = oy + i * cell
            dy = max(cy0 - y, 0.0, y - (cy0 + cell))
            for j in range(j0, j1 + 1):
                cx0 = ox + j * cell
                dx = max(cx0 - x, 0.0, x - (cx0 + cell))
                if dx * dx + dy * dy <= radius * radius:
                    grid[i, j] = 1
    return grid


def observe(state: PileState, config: SimConfig) -> Observation:
    x0, y0, x1, y1 = state.workspace
    cell = (x1 - x0) / config.grid_w
    if abs((y1 - y0) / config.grid_h - cell) > 1e-12:
        raise ValueError("grid cells must be square; adjust grid_h/grid_w")
    origin = np.array([x0, y0])
    grid = rasterize(state.positions, state.piece_radius,
                     (config.grid_h, config.grid_w), cell, origin)
    return Observation(grid, state.positions.copy(), state.material.copy(),
                       cell, origin, state.piece_radius)


def sample_action(rng, config: SimConfig, workspace=None) -> Action:
    """Uniform random action within bounds."""
    x0, y0, x1, y1 = workspace or config.workspace
    return Action(
        start=(rng.uniform(x0, x1), rng.uniform(y0, y1)),
        angle=rng.uniform(0.0, 2 * math.pi),
        length=rng.uniform(config.len_min, config.len_max),
        pusher_width=config.pusher_width,
    )
