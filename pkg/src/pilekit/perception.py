"""Observation -> particle graph: farthest point sampling at a chosen
resolution, center biasing, sweep displacements, and kNN-within-radius edges.

Graphs store the center-biased (unshifted) particle positions; edges are
built from sweep-shifted positions, since pieces about to be pushed will
interact with whatever lies along the push.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sim


@dataclass(frozen=True)
class PerceptionParams:
    r_center: float = 0.02
    r_edge: float = 0.06
    k: int = 8

    def validate(self):
        if self.r_center <= 0 or self.r_edge <= 0:
            raise ValueError("r_center and r_edge must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        return self


@dataclass(frozen=True)
class ParticleGraph:
    particles: np.ndarray  # (omega, 2) meters
    edges: np.ndarray  # (E, 2) int, rows (receiver, sender)
    resolution: int
    material: np.ndarray | None = None  # (omega,) labels of the FPS source points

    def __post_init__(self):
        object.__setattr__(self, "particles", np.asarray(self.particles, dtype=float))
        object.__setattr__(self, "edges",
                           np.asarray(self.edges, dtype=int).reshape(-1, 2))
        if len(self.particles) != self.resolution or self.resolution < 1:
            raise ValueError("particle count must equal resolution >= 1")
        if len(self.edges):
            if self.edges.min() < 0 or self.edges.max() >= self.resolution:
                raise ValueError("edge index out of range")
            if (self.edges[:, 0] == self.edges[:, 1]).any():
                raise ValueError("self-edges are not allowed")


def segment_foreground(obs: sim.Observation):
    """All foreground points with material labels; errors on an empty scene."""
    x0, y0 = obs.origin
    x1 = x0 + obs.grid.shape[1] * obs.cell
    y1 = y0 + obs.grid.shape[0] * obs.cell
    p = obs.points
    keep = (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)
    if not keep.any():
        raise ValueError("degenerate scene: empty foreground")
    return p[keep].copy(), obs.material[keep].copy()


def fps(points, omega: int, start: int):
    """Greedy farthest point sampling: each pick maximizes the minimum distance
    to the points already selected. Ties go to the lowest index."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    if not 1 <= omega <= n:
        raise ValueError(f"resolution {omega} out of range for {n} points")
    if not 0 <= start < n:
        raise ValueError("invalid start index")
    chosen = [start]
    d2 = ((points - points[start]) ** 2).sum(axis=1)
    for _ in range(omega - 1):
        idx = int(np.argmax(d2))  # argmax returns the first (lowest) index on ties
        chosen.append(idx)
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(chosen, dtype=int)


def fps_start_index(points) -> int:
    """Default FPS seed: the point nearest the foreground centroid."""
    points = np.asarray(points, dtype=float)
    d2 = ((points - points.mean(axis=0)) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def center_bias(sampled, all_points, r_center: float):
    """Replace each sample by the mass center of foreground points within
    r_center (the sample itself always qualifies)."""
    sampled = np.asarray(sampled, dtype=float)
    all_points = np.asarray(all_points, dtype=float)
    d2 = ((sampled[:, None, :] - all_points[None, :, :]) ** 2).sum(axis=2)
    mask = d2 <= r_center * r_center
    counts = mask.sum(axis=1)
    out = (mask[:, :, None] * all_points[None, :, :]).sum(axis=1) / counts[:, None]
    return out


def sweep_displacements(particles, action: sim.Action):
    """Vector from each in-sweep particle to its projection on the pusher's
    final edge line; zero for particles outside the sweep."""
    particles = np.asarray(particles, dtype=float)
    d, _ = sim.sweep_frame(action)
    inside, along = sim.sweep_mask(particles, action)
    disp = np.zeros_like(particles)
    disp[inside] = (action.length - along[inside])[:, None] * d
    return disp


def build_edges(shifted, params: PerceptionParams):
    """Directed edge (i, j): j is within r_edge of i and among i's k nearest
    neighbors (ties by lower index). i receives, j sends."""
    shifted = np.asarray(shifted, dtype=float)
    n = len(shifted)
    if n < 2:
        return np.zeros((0, 2), dtype=int)
    delta = shifted[:, None, :] - shifted[None, :, :]
    dist = np.sqrt((delta ** 2).sum(axis=2))
    edges = []
    idx = np.arange(n)
    for i in range(n):
        order = np.lexsort((idx, dist[i]))
        order = order[order != i][: params.k]
        for j in sorted(order):
            if dist[i, j] < params.r_edge:
                edges.append((i, j))
    if not edges:
        return np.zeros((0, 2), dtype=int)
    return np.array(edges, dtype=int)


def build_graph(obs: sim.Observation, action: sim.Action | None, omega: int,
                params: PerceptionParams, *, bias: bool = True,
                start: int | None = None) -> ParticleGraph:
    """segment -> fps -> center_bias -> sweep shift -> edges."""
    points, labels = segment_foreground(obs)
    if start is None:
        start = fps_start_index(points)
    picks = fps(points, omega, start)
    particles = points[picks]
    if bias:
        particles = center_bias(particles, points, params.r_center)
    shifted = particles if action is None else particles + sweep_displacements(particles, action)
    edges = build_edges(shifted, params)
    return ParticleGraph(particles, edges, omega, material=labels[picks])


def covering_radius(points, selected) -> float:
    """max over the foreground of the distance to the nearest selected point."""
    points = np.asarray(points, dtype=float)
    sel = np.asarray(selected, dtype=float)
    d2 = ((points[:, None, :] - sel[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1).max()))
