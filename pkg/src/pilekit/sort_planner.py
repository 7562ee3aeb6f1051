"""High-level planner for the Sort task.

Each material pile is abstracted as a fixed-radius disk whose center lives on
a sparse pixel grid. A* searches over joint blob-center configurations where
a move shifts one blob by one grid step without collisions; the resulting
path is compressed into per-blob waypoint subgoals that the MPC layer
executes as material-restricted Gather problems.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from . import perception, planner, sim


@dataclass(frozen=True)
class BlobWorld:
    """Sparse-grid geometry shared by a Sort instance. Grid node (gx, gy) sits
    at pixel (gx + 0.5, gy + 0.5) * pitch."""

    radius_px: float
    pitch_px: float
    grid_w: int  # grid nodes per axis
    grid_h: int
    bounds_px: tuple  # (x0, y0, x1, y1) pixel workspace

    def to_px(self, node):
        return np.array([(node[0] + 0.5) * self.pitch_px,
                         (node[1] + 0.5) * self.pitch_px])

    def snap(self, point_px):
        gx = int(round(point_px[0] / self.pitch_px - 0.5))
        gy = int(round(point_px[1] / self.pitch_px - 0.5))
        return (int(np.clip(gx, 0, self.grid_w - 1)),
                int(np.clip(gy, 0, self.grid_h - 1)))

    def in_bounds(self, node):
        x, y = self.to_px(node)
        x0, y0, x1, y1 = self.bounds_px
        r = self.radius_px
        return x0 + r <= x <= x1 - r and y0 + r <= y <= y1 - r

    def collision_free(self, centers):
        pts = np.array([self.to_px(c) for c in centers])
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                if np.hypot(*(pts[i] - pts[j])) < 2 * self.radius_px:
                    return False
        return True


def default_world(grid_shape, radius_px: float, pitch_px: float | None = None) -> BlobWorld:
    h, w = grid_shape
    pitch = pitch_px if pitch_px is not None else 2 * radius_px
    return BlobWorld(radius_px, pitch, int(w / pitch), int(h / pitch),
                     (0.0, 0.0, float(w), float(h)))


@dataclass
class SortPlan:
    nodes: list  # sequence of center tuples, nodes[0] = start
    moves: list  # (blob index, from node, to node) per transition

    def __len__(self):
        return len(self.moves)


def blob_extract(obs: sim.Observation, k: int, world: BlobWorld):
    """Per-material blob centers: centroid of each material's points snapped
    to the sparse grid. Materials 0..k-1 must all be present."""
    points, material = perception.segment_foreground(obs)
    centers = []
    for label in range(k):
        mask = material == label
        if not mask.any():
            raise ValueError(f"material {label} missing from the scene")
        centroid_px = obs.to_pixels(points[mask]).mean(axis=0)
        centers.append(world.snap(centroid_px))
    return tuple(centers)


_MOVES4 = ((1, 0), (-1, 0), (0, 1), (0, -1))
_MOVES8 = _MOVES4 + ((1, 1), (1, -1), (-1, 1), (-1, -1))


def _heuristic(node, goal, eight: bool, step_cost: float):
    total = 0
    for (ax, ay), (bx, by) in zip(node, goal):
        dx, dy = abs(ax - bx), abs(ay - by)
        total += max(dx, dy) if eight else dx + dy
    return total * step_cost


def astar(start, goal, world: BlobWorld, *, eight_connected: bool = False,
          step_cost: float = 1.0, max_expansions: int = 200000):
    """Minimal-step joint plan, or None when no collision-free path exists."""
    start, goal = tuple(start), tuple(goal)
    for name, node in (("start", start), ("goal", goal)):
        if not all(world.in_bounds(c) for c in node) or not world.collision_free(node):
            raise ValueError(f"{name} configuration is out of bounds or colliding")
    if start == goal:
        return SortPlan([start], [])
    moves = _MOVES8 if eight_connected else _MOVES4
    g_cost = {start: 0.0}
    came = {}
    counter = 0
    open_list = [(_heuristic(start, goal, eight_connected, step_cost), counter, start)]
    expanded = 0
    while open_list:
        _, _, node = heapq.heappop(open_list)
        if node == goal:
            path = [node]
            while path[-1] in came:
                path.append(came[path[-1]][0])
            path.reverse()
            plan_moves = [came[path[i + 1]][1] for i in range(len(path) - 1)]
            return SortPlan(path, plan_moves)
        expanded += 1
        if expanded > max_expansions:
            return None
        for b in range(len(node)):
            for dx, dy in moves:
                c = (node[b][0] + dx, node[b][1] + dy)
                if not world.in_bounds(c):
                    continue
                nxt = node[:b] + (c,) + node[b + 1:]
                if not world.collision_free(nxt):
                    continue
                tentative = g_cost[node] + step_cost
                if nxt not in g_cost or tentative < g_cost[nxt]:
                    g_cost[nxt] = tentative
                    came[nxt] = (node, (b, node[b], c))
                    counter += 1
                    heapq.heappush(open_list, (
                        tentative + _heuristic(nxt, goal, eight_connected, step_cost),
                        counter, nxt))
    return None


def to_subgoals(plan: SortPlan, merge_horizon: int, world: BlobWorld,
                grid_shape, cell: float, origin, m_sub: int = 32):
    """Compress consecutive same-blob moves (up to merge_horizon each) into
    waypoints; each waypoint becomes a disk GoalSpec for that blob's material."""
    waypoints = []  # (blob index, target node)
    run_blob, run_len = None, 0
    for blob, _, to in plan.moves:
        if blob == run_blob and run_len < merge_horizon:
            waypoints[-1] = (blob, to)
            run_len += 1
        else:
            waypoints.append((blob, to))
            run_blob, run_len = blob, 1
    out = []
    for blob, node in waypoints:
        center_px = world.to_px(node)
        center_m = np.asarray(origin) + center_px * cell
        goal = planner.goal_disk(center_m, world.radius_px * cell, grid_shape,
                                 cell, origin, m_sub)
        out.append((blob, goal))
    return out


def run_sort(state: sim.PileState, goal_nodes, model, budget, seed, *,
             world: BlobWorld, sim_config: sim.SimConfig,
             pp: perception.PerceptionParams, cfg: planner.PlannerConfig,
             merge_horizon: int = 3, steps_per_subgoal: int = 6,
             subgoal_threshold: float = 8.0, fixed_omega: int | None = None,
             regressor=None):
    """Plan with A*, then drive each waypoint with material-restricted MPC.
    Advances to the next waypoint once the blob's distribution distance to the
    waypoint disk drops below `subgoal_threshold`. Returns
    (per-material final goals and distances, logs, final state) or None when
    A* finds no path."""
    k = len(goal_nodes)
    obs = sim.observe(state, sim_config)
    start = blob_extract(obs, k, world)
    plan = astar(start, tuple(tuple(g) for g in goal_nodes), world)
    if plan is None:
        return None
    grid_shape = obs.grid.shape
    subgoals = to_subgoals(plan, merge_horizon, world, grid_shape, obs.cell,
                           obs.origin)
    logs = []
    for idx, (blob, goal) in enumerate(subgoals):
        log, state = planner.run_mpc(
            state, goal, model, regressor, steps_per_subgoal, budget,
            [seed, 211, idx], sim_config=sim_config, pp=pp, cfg=cfg,
            fixed_omega=fixed_omega, success_threshold=subgoal_threshold,
            material=blob)
        logs.append((blob, log))
    # final per-material distances against each blob's goal disk
    finals = {}
    obs = sim.observe(state, sim_config)
    for blob, node in enumerate(goal_nodes):
        center_px = world.to_px(tuple(node))
        center_m = np.asarray(obs.origin) + center_px * obs.cell
        goal = planner.goal_disk(center_m, world.radius_px * obs.cell,
                                 grid_shape, obs.cell, obs.origin)
        finals[blob] = planner.distribution_distance(
            obs.filter_material(blob), goal)
    return finals, logs, state
