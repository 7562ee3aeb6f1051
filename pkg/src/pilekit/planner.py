"""Task objectives, per-step trajectory optimization (sampling + gradient
descent), the closed MPC loop, and evaluation metrics.

The task objective is a bidirectional nearest-neighbor cost in pixel space:
particles to the full goal set, plus an FPS-subsampled goal set back to the
particles (the subsample keeps the two terms at comparable magnitude).
Gradient steps on the action parameters use a fixed base step along the
range-scaled gradient direction and are rejected when they worsen the cost
(the step shrinks on rejection), so per-sample cost is monotone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import gnn, perception, sim


@dataclass(frozen=True)
class GoalSpec:
    """Binary goal heatmap plus its extracted point sets, all in pixel space."""

    heatmap: np.ndarray  # (H, W) uint8
    q: np.ndarray  # (m, 2) pixel coords of active cell centers
    q_sub: np.ndarray  # (m', 2) FPS subsample of q
    cell: float
    origin: np.ndarray

    def to_pixels(self, points_m):
        return (np.asarray(points_m, dtype=float) - self.origin) / self.cell

    def to_meters(self, points_px):
        return np.asarray(points_px, dtype=float) * self.cell + self.origin


def goal_from_mask(mask, cell, origin, m_sub: int = 32) -> GoalSpec:
    mask = np.asarray(mask).astype(np.uint8)
    ii, jj = np.nonzero(mask)
    if len(ii) == 0:
        raise ValueError("malformed goal: empty heatmap")
    q = np.column_stack([jj + 0.5, ii + 0.5]).astype(float)
    m_sub = min(m_sub, len(q))
    picks = perception.fps(q, m_sub, perception.fps_start_index(q))
    return GoalSpec(mask, q, q[picks], cell, np.asarray(origin, dtype=float))


def goal_disk(center_m, radius_m, grid_shape, cell, origin, m_sub: int = 32) -> GoalSpec:
    h, w = grid_shape
    jx = origin[0] + (np.arange(w) + 0.5) * cell
    iy = origin[1] + (np.arange(h) + 0.5) * cell
    dx = jx[None, :] - center_m[0]
    dy = iy[:, None] - center_m[1]
    mask = (dx ** 2 + dy ** 2) <= radius_m ** 2
    return goal_from_mask(mask, cell, origin, m_sub)


def goal_letter(letter: str, grid_shape, cell, origin, m_sub: int = 32,
                thickness: int = 8) -> GoalSpec:
    """Block letters built from axis-aligned bars on the grid."""
    h, w = grid_shape
    mask = np.zeros((h, w), dtype=np.uint8)
    t = thickness
    i0, i1 = h // 4, 3 * h // 4  # vertical extent
    j0, j1 = w // 4, 3 * w // 4
    if letter == "T":
        mask[i0:i0 + t, j0:j1] = 1
        mask[i0:i1, (j0 + j1 - t) // 2:(j0 + j1 + t) // 2] = 1
    elif letter == "L":
        mask[i0:i1, j0:j0 + t] = 1
        mask[i1 - t:i1, j0:j1] = 1
    elif letter == "U":
        mask[i0:i1, j0:j0 + t] = 1
        mask[i0:i1, j1 - t:j1] = 1
        mask[i1 - t:i1, j0:j1] = 1
    elif letter == "I":
        mask[i0:i1, (j0 + j1 - t) // 2:(j0 + j1 + t) // 2] = 1
    else:
        raise ValueError(f"no mask for letter {letter!r}")
    return goal_from_mask(mask, cell, origin, m_sub)


# ---------------------------------------------------------------------------
# objectives and metrics


def _nn_sum(a, b):
    """sum over rows of a of the distance to the nearest row of b."""
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1)).sum())


def task_objective(graph: perception.ParticleGraph, goal: GoalSpec,
                   normalized: bool = False) -> float:
    """c = sum_p min_q |p-q| + sum_{q in Q'} min_p |p-q| in pixel space."""
    if len(goal.q) == 0:
        raise ValueError("malformed goal: empty Q")
    p = goal.to_pixels(graph.particles)
    t1 = _nn_sum(p, goal.q)
    t2 = _nn_sum(goal.q_sub, p)
    if normalized:
        return t1 / len(p) + t2 / len(goal.q_sub)
    return t1 + t2


def positions_objective(positions_m, goal: GoalSpec, normalized: bool = False) -> float:
    """task_objective on a bare (n, 2) meter-space position array."""
    p = goal.to_pixels(positions_m)
    t1 = _nn_sum(p, goal.q)
    t2 = _nn_sum(goal.q_sub, p)
    if normalized:
        return t1 / len(p) + t2 / len(goal.q_sub)
    return t1 + t2


def objective_on_tape(tape, pos_node: int, goal: GoalSpec):
    """Tape version of the task objective; nearest-neighbor matchings are
    frozen at the current values (subgradient, lowest index on ties)."""
    pos = tape.value(pos_node)
    px_scale = 1.0 / goal.cell
    p_px = tape.scale(tape.add_row(pos_node, tape.const(-goal.origin.reshape(1, 2))),
                      px_scale)
    p_val = (pos - goal.origin) / goal.cell
    ones = tape.const(np.ones((2, 1)))

    d2 = ((p_val[:, None, :] - goal.q[None, :, :]) ** 2).sum(axis=2)
    nn_q = goal.q[np.argmin(d2, axis=1)]
    diff1 = tape.sub(p_px, tape.const(nn_q))
    term1 = tape.sum(tape.sqrt(tape.matmul(tape.square(diff1), ones)))

    d2b = ((goal.q_sub[:, None, :] - p_val[None, :, :]) ** 2).sum(axis=2)
    nn_p = np.argmin(d2b, axis=1)
    diff2 = tape.sub(tape.gather_rows(p_px, nn_p), tape.const(goal.q_sub))
    term2 = tape.sum(tape.sqrt(tape.matmul(tape.square(diff2), ones)))
    return tape.add(term1, term2)


def distribution_distance(obs: sim.Observation, goal: GoalSpec,
                          normalized: bool = True) -> float:
    """Bidirectional nearest-neighbor distance between ALL foreground pixels
    and ALL goal cells (full Q, unlike the task objective)."""
    ii, jj = np.nonzero(obs.grid)
    if len(ii) == 0:
        raise ValueError("empty foreground")
    if len(goal.q) == 0:
        raise ValueError("empty goal")
    f = np.column_stack([jj + 0.5, ii + 0.5]).astype(float)
    d = _nn_sum(f, goal.q) + _nn_sum(goal.q, f)
    if normalized:
        return d / (len(f) + len(goal.q))
    return d


def task_score(final_distances, tau: float) -> float:
    final_distances = list(final_distances)
    if not final_distances:
        raise ValueError("empty distance list")
    return sum(1 for d in final_distances if d < tau) / len(final_distances)


def curve_auc(distances) -> float:
    """Trapezoidal area under a per-step distance curve."""
    d = np.asarray(distances, dtype=float)
    return float((0.5 * (d[1:] + d[:-1])).sum())


# ---------------------------------------------------------------------------
# trajectory optimization (one MPC step)


@dataclass(frozen=True)
class PlannerConfig:
    m_samples: int = 20
    n_iters: int = 200
    horizon: int = 1
    step_size: float = 0.2
    step_decay: float = 0.5
    pusher_width: float = 0.06
    len_min: float = 0.05
    len_max: float = 0.25
    m_sub: int = 32


@dataclass
class PlanResult:
    actions: list  # optimized action sequence (length T)
    cost: float  # its predicted final task objective
    initial_costs: list  # cost of each raw sample before optimization
    final_positions: np.ndarray  # predicted z_T particle positions (meters)


def _clamp_actions(u, workspace, cfg: PlannerConfig):
    x0, y0, x1, y1 = workspace
    u = u.copy()
    u[:, 0] = np.clip(u[:, 0], x0, x1)
    u[:, 1] = np.clip(u[:, 1], y0, y1)
    u[:, 2] = np.mod(u[:, 2], 2 * math.pi)
    u[:, 3] = np.clip(u[:, 3], cfg.len_min, cfg.len_max)
    return u


def _to_actions(u, cfg: PlannerConfig):
    return [sim.Action((row[0], row[1]), row[2], row[3], cfg.pusher_width)
            for row in u]


def _sequence_cost(graph, u, cfg, model, pp, goal):
    traj = gnn.rollout(graph, _to_actions(u, cfg), cfg.horizon, model, pp)
    return positions_objective(traj[-1], goal), traj[-1]


def plan_actions(obs: sim.Observation, omega: int, goal: GoalSpec,
                 model: gnn.GnnParams, m_samples: int, n_iters: int,
                 horizon: int, seed, *, pp: perception.PerceptionParams,
                 cfg: PlannerConfig, workspace) -> PlanResult:
    """Sample M action sequences, refine each with N gradient iterations
    (re-clamped to bounds, reject-if-worse), return the best."""
    graph = perception.build_graph(obs, None, omega, pp)
    rng = np.random.default_rng(seed)
    x0, y0, x1, y1 = workspace
    ranges = np.array([x1 - x0, y1 - y0, 2 * math.pi, cfg.len_max - cfg.len_min])

    best = None
    initial_costs = []
    for _ in range(m_samples):
        u = np.column_stack([
            rng.uniform(x0, x1, horizon),
            rng.uniform(y0, y1, horizon),
            rng.uniform(0, 2 * math.pi, horizon),
            rng.uniform(cfg.len_min, cfg.len_max, horizon),
        ])
        cost, final = _sequence_cost(graph, u, cfg, model, pp, goal)
        initial_costs.append(cost)
        step = cfg.step_size
        for _ in range(1, n_iters):
            grads, _ = gnn.action_gradient(
                graph, _to_actions(u, cfg), horizon, model, pp,
                lambda tape, node: objective_on_tape(tape, node, goal))
            d = grads * ranges[None, :]
            norm = np.sqrt((d ** 2).sum())
            if norm < 1e-12:
                break
            u_try = _clamp_actions(u - step * ranges[None, :] * d / norm,
                                   workspace, cfg)
            cost_try, final_try = _sequence_cost(graph, u_try, cfg, model, pp, goal)
            if cost_try < cost:
                u, cost, final = u_try, cost_try, final_try
            else:
                step *= cfg.step_decay
        if best is None or cost < best.cost:
            best = PlanResult(_to_actions(u, cfg), cost, initial_costs, final)
    return best


# ---------------------------------------------------------------------------
# closed-loop MPC


@dataclass
class StepRecord:
    step: int
    omega: int
    action: sim.Action
    distance: float


@dataclass
class EpisodeLog:
    initial_distance: float
    records: list = field(default_factory=list)
    success: bool = False

    @property
    def distances(self):
        return [self.initial_distance] + [r.distance for r in self.records]

    @property
    def final_distance(self):
        return self.records[-1].distance if self.records else self.initial_distance

    @property
    def omegas(self):
        return [r.omega for r in self.records]


def run_mpc(state: sim.PileState, goal: GoalSpec, model: gnn.GnnParams,
            regressor, steps: int, budget, seed, *,
            sim_config: sim.SimConfig, pp: perception.PerceptionParams,
            cfg: PlannerConfig, fixed_omega: int | None = None,
            oracle_omega: int | None = None,
            success_threshold: float = math.inf,
            material: int | None = None, on_step=None):
    """observe -> select resolution -> plan under the compute budget -> execute
    the first action; stops early once the distribution distance beats the
    success threshold. Returns (EpisodeLog, final PileState)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")

    def looked(st):
        obs = sim.observe(st, sim_config)
        return obs if material is None else obs.filter_material(material)

    obs = looked(state)
    log = EpisodeLog(initial_distance=distribution_distance(obs, goal))
    for step_i in range(steps):
        foreground = len(perception.segment_foreground(obs)[0])
        if fixed_omega is not None:
            omega = fixed_omega
        elif oracle_omega is not None:
            omega = oracle_omega
        else:
            from . import selector  # local import to avoid a module cycle
            omega = selector.predict_resolution(regressor, obs, goal)
        omega = max(1, min(omega, foreground))
        n_iters = budget.iterations(omega)
        plan = plan_actions(obs, omega, goal, model, cfg.m_samples, n_iters,
                            cfg.horizon, [seed, 101, step_i],
                            pp=pp, cfg=cfg, workspace=state.workspace)
        state = sim.apply_push(state, plan.actions[0], sim_config)
        obs = looked(state)
        dist = distribution_distance(obs, goal)
        log.records.append(StepRecord(step_i, omega, plan.actions[0], dist))
        if on_step:
            on_step(step_i, omega, dist)
        if dist < success_threshold:
            log.success = True
            break
    return log, state
