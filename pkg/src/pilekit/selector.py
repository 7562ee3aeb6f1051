"""Self-supervised resolution selection.

For a scene/goal pair, the budgeted cost of a resolution is the best task
objective trajectory optimization can reach when the compute budget fixes the
iteration count (higher resolutions get fewer iterations). A Gaussian process
fit to evaluated (resolution, cost) pairs drives expected-improvement
sampling; the label is the integer resolution minimizing the posterior mean.
A small MLP regressor trained on such labels then predicts the resolution
directly from the observation and the goal.

The cost recorded for the GP is the per-term mean of the achieved objective
(term1 / omega + term2 / |Q'|): the raw objective sums omega terms and so
grows mechanically with resolution, which would pin every label at the lower
bound. Planning itself still minimizes the raw objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import ndtr

from . import gnn, perception, planner, sim
from .autodiff import Param, Tape


@dataclass(frozen=True)
class ComputeBudget:
    """Abstract per-planning-call budget in cost units; one gradient iteration
    at resolution w costs w + k*w (node plus estimated edge work)."""

    total: float = 4500.0
    edge_factor: int = 8

    def cost(self, omega: int) -> float:
        return omega + self.edge_factor * omega

    def iterations(self, omega: int) -> int:
        return max(1, int(self.total / self.cost(omega)))


@dataclass(frozen=True)
class SelectorConfig:
    omega_min: int = 10
    omega_max: int = 100
    w_r: float = 1e-3
    xi: float = 0.01
    n_init: int = 5
    n_iter: int = 10
    gp_signal: float = 1.0
    gp_lengthscale: float = 0.2
    gp_noise: float = 0.1


# ---------------------------------------------------------------------------
# Gaussian process over resolutions


class GpModel:
    """RBF-kernel GP over resolutions normalized to [0, 1]; observations are
    standardized to zero mean / unit variance before the solve."""

    def __init__(self, bounds, signal=1.0, lengthscale=0.2, noise=0.1,
                 standardize=True):
        self.lo, self.hi = bounds
        self.signal = signal
        self.lengthscale = lengthscale
        self.noise = noise
        self.standardize = standardize
        self.omegas = None

    def _norm(self, omegas):
        span = max(1, self.hi - self.lo)
        return (np.asarray(omegas, dtype=float) - self.lo) / span

    def _kernel(self, xa, xb):
        d = xa[:, None] - xb[None, :]
        return self.signal ** 2 * np.exp(-(d ** 2) / (2 * self.lengthscale ** 2))

    def fit(self, omegas, values):
        omegas = np.asarray(omegas, dtype=float)
        values = np.asarray(values, dtype=float)
        if len(omegas) < 1 or len(omegas) != len(values):
            raise ValueError("need >= 1 (omega, value) pair")
        self.omegas = omegas
        if self.standardize:
            self.y_mean = float(values.mean())
            self.y_std = float(values.std())
            if self.y_std < 1e-12:
                self.y_std = 1.0
        else:
            self.y_mean, self.y_std = 0.0, 1.0
        self.c_train = (values - self.y_mean) / self.y_std
        x = self._norm(omegas)
        k = self._kernel(x, x) + self.noise ** 2 * np.eye(len(x))
        jitter = 1e-8
        while True:
            try:
                self.chol = cho_factor(k + jitter * np.eye(len(x)), lower=True)
                break
            except np.linalg.LinAlgError:
                jitter *= 10
                if jitter > 1e-4:
                    raise
        self.alpha = cho_solve(self.chol, self.c_train)
        return self

    def posterior(self, omegas_test):
        """De-standardized posterior mean and variance at the test resolutions."""
        if self.omegas is None:
            raise ValueError("GP not fitted")
        xs = self._norm(self.omegas)
        xt = self._norm(omegas_test)
        k_star = self._kernel(xs, xt)
        mean = k_star.T @ self.alpha
        v = cho_solve(self.chol, k_star)
        var = self._kernel(xt, xt).diagonal() - (k_star * v).sum(axis=0)
        var = np.maximum(var, 0.0)
        return mean * self.y_std + self.y_mean, var * self.y_std ** 2


def gp_posterior(gp: GpModel, omegas_test):
    return gp.posterior(omegas_test)


def expected_improvement(gp: GpModel, candidates, best: float, xi: float = 0.0):
    """Minimization EI under the GP posterior."""
    mean, var = gp.posterior(candidates)
    sigma = np.sqrt(var)
    improve = best - mean - xi
    ei = np.where(improve > 0, improve, 0.0)
    ok = sigma > 1e-12
    z = np.zeros_like(mean)
    z[ok] = improve[ok] / sigma[ok]
    phi = np.exp(-0.5 * z ** 2) / math.sqrt(2 * math.pi)
    ei_ok = improve * ndtr(z) + sigma * phi
    return np.where(ok, ei_ok, ei)


# ---------------------------------------------------------------------------
# budgeted cost and BO labeling


def budgeted_cost(obs: sim.Observation, goal: planner.GoalSpec, omega: int,
                  model: gnn.GnnParams, budget: ComputeBudget, seed, *,
                  pp: perception.PerceptionParams, cfg: planner.PlannerConfig,
                  workspace) -> float:
    """Best achieved task objective at this resolution under the budget,
    reported as the per-term mean (see module docstring)."""
    plan = planner.plan_actions(obs, omega, goal, model, cfg.m_samples,
                                budget.iterations(omega), cfg.horizon, seed,
                                pp=pp, cfg=cfg, workspace=workspace)
    return planner.positions_objective(plan.final_positions, goal, normalized=True)


def regularizer(omega: int, c0: float, w_r: float) -> float:
    """Linear resolution penalty scaled by the scene's initial objective."""
    return w_r * c0 * omega


@dataclass
class LabelRecord:
    y0_ref: str
    yg_ref: str
    omega_star: int
    curve: list  # evaluated (omega, c_plus) samples, audit trail
    features: np.ndarray | None = None  # cached featurize(y0, yg)


def bo_label(obs: sim.Observation, goal: planner.GoalSpec, model: gnn.GnnParams,
             budget: ComputeBudget, bounds, n_init: int, n_iter: int, seed, *,
             pp: perception.PerceptionParams, cfg: planner.PlannerConfig,
             workspace, sel: SelectorConfig = SelectorConfig(),
             cost_fn=None, y0_ref: str = "", yg_ref: str = "") -> LabelRecord:
    """Bayesian optimization over the resolution; the label is the integer in
    bounds minimizing the fitted GP posterior mean (ties toward smaller)."""
    lo, hi = int(bounds[0]), int(bounds[1])
    if lo > hi:
        raise ValueError("invalid bounds")
    foreground = len(perception.segment_foreground(obs)[0])
    hi = min(hi, foreground)
    lo = min(lo, hi)

    if cost_fn is None:
        c0 = budgeted_cost(obs, goal, hi, model, budget, [seed, 0],
                           pp=pp, cfg=cfg, workspace=workspace)

        def cost_fn(omega):
            c_star = budgeted_cost(obs, goal, int(omega), model, budget,
                                   [seed, int(omega)], pp=pp, cfg=cfg,
                                   workspace=workspace)
            return c_star + regularizer(int(omega), c0, sel.w_r)

    evaluated = {}
    for omega in np.unique(np.linspace(lo, hi, max(1, n_init)).round().astype(int)):
        evaluated[int(omega)] = float(cost_fn(int(omega)))

    grid = np.arange(lo, hi + 1)

    def fit():
        om = sorted(evaluated)
        return GpModel((lo, hi), sel.gp_signal, sel.gp_lengthscale,
                       sel.gp_noise).fit(om, [evaluated[o] for o in om])

    for _ in range(n_iter):
        if len(evaluated) >= len(grid):
            break
        gp = fit()
        ei = expected_improvement(gp, grid, min(evaluated.values()), sel.xi)
        cand = int(grid[np.argmax(ei)])  # argmax -> first (smallest) on ties
        if cand in evaluated:  # perturb to the nearest unevaluated integer
            free = np.array([o for o in grid if o not in evaluated])
            cand = int(free[np.argmin(np.abs(free - cand))])
        evaluated[cand] = float(cost_fn(cand))

    gp = fit()
    mean, _ = gp.posterior(grid)
    omega_star = int(grid[np.argmin(mean)])
    curve = [(int(o), evaluated[o]) for o in sorted(evaluated)]
    return LabelRecord(y0_ref, yg_ref, omega_star, curve)


# ---------------------------------------------------------------------------
# featurization and the resolution regressor


def _pool16(grid):
    grid = np.asarray(grid, dtype=float)
    h, w = grid.shape
    if h % 16 or w % 16:
        raise ValueError("grid dims must be divisible by 16")
    return grid.reshape(16, h // 16, 16, w // 16).mean(axis=(1, 3))


def featurize(obs: sim.Observation, goal: planner.GoalSpec) -> np.ndarray:
    """516-dim feature: pooled occupancy, pooled goal heatmap, plus scalars
    (normalized foreground count, normalized distance, centroid offset)."""
    pooled_obs = _pool16(obs.grid).ravel()
    pooled_goal = _pool16(goal.heatmap).ravel()
    points, _ = perception.segment_foreground(obs)
    n_cells = obs.grid.size
    count = len(points) / n_cells
    diag = math.hypot(*obs.grid.shape)
    dist = distribution_distance_feature(obs, goal) / diag
    fg_c = obs.to_pixels(points).mean(axis=0)
    goal_c = goal.q.mean(axis=0)
    off = (fg_c - goal_c) / diag
    return np.concatenate([pooled_obs, pooled_goal, [count, dist, off[0], off[1]]])


def distribution_distance_feature(obs, goal):
    try:
        return planner.distribution_distance(obs, goal)
    except ValueError:
        return 0.0


@dataclass
class RegressorConfig:
    hidden: int = 128
    lr: float = 1e-3
    epochs: int = 300
    val_fraction: float = 0.2


class ResolutionRegressor:
    """2-layer MLP from the 516-dim feature to a normalized resolution."""

    def __init__(self, w1, b1, w2, b2, omega_min: int, omega_max: int):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2
        self.omega_min = int(omega_min)
        self.omega_max = int(omega_max)

    @classmethod
    def init(cls, seed, n_features=516, hidden=128, omega_min=10, omega_max=100):
        rng = np.random.default_rng([seed, 31])
        return cls(
            Param(rng.normal(0, 1 / math.sqrt(n_features), (n_features, hidden)), "reg.W1"),
            Param(np.zeros((1, hidden)), "reg.b1"),
            Param(rng.normal(0, 1 / math.sqrt(hidden), (hidden, 1)), "reg.W2"),
            Param(np.zeros((1, 1)), "reg.b2"),
            omega_min, omega_max,
        )

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def raw_predict(self, features) -> float:
        x = np.asarray(features, dtype=float).reshape(1, -1)
        h = np.maximum(x @ self.w1.value + self.b1.value, 0.0)
        return float((h @ self.w2.value + self.b2.value)[0, 0])

    def save(self, path):
        from . import io
        meta = np.array([[self.omega_min, self.omega_max]], dtype=float)
        tensors = {"_meta": meta}
        for p in self.params():
            tensors[p.name] = p.value
        io.save_checkpoint(path, tensors)

    @classmethod
    def load(cls, path):
        from . import io
        t = io.load_checkpoint(path)
        meta = t["_meta"][0]
        return cls(Param(t["reg.W1"], "reg.W1"), Param(t["reg.b1"], "reg.b1"),
                   Param(t["reg.W2"], "reg.W2"), Param(t["reg.b2"], "reg.b2"),
                   int(meta[0]), int(meta[1]))


def train_regressor(labels, config: RegressorConfig, seed, *,
                    omega_min=10, omega_max=100):
    """Supervised fit of the regressor on BO labels (normalized to [0, 1]).
    Returns (regressor, report dict with train/val MSE)."""
    labels = [l for l in labels if l.features is not None]
    if not labels:
        raise ValueError("need at least one label with cached features")
    x = np.stack([np.asarray(l.features, dtype=float) for l in labels])
    span = max(1, omega_max - omega_min)
    y = np.array([(l.omega_star - omega_min) / span for l in labels]).reshape(-1, 1)

    rng = np.random.default_rng([seed, 41])
    order = rng.permutation(len(x))
    n_val = int(len(x) * config.val_fraction) if len(x) >= 5 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if n_val == 0:
        val_idx = train_idx

    reg = ResolutionRegressor.init(seed, x.shape[1], config.hidden,
                                   omega_min, omega_max)
    opt = gnn.Adam(reg.params(), config.lr)
    xt, yt = x[train_idx], y[train_idx]
    for _ in range(config.epochs):
        tape = Tape()
        w1, b1, w2, b2 = (tape.param(p) for p in reg.params())
        h = tape.relu(tape.add_row(tape.matmul(tape.const(xt), w1), b1))
        pred = tape.add_row(tape.matmul(h, w2), b2)
        diff = tape.sub(pred, tape.const(yt))
        root = tape.scale(tape.sum(tape.square(diff)), 1.0 / len(xt))
        tape.backward(root)
        opt.step()

    def mse(idx):
        err = [(reg.raw_predict(x[i]) - y[i, 0]) ** 2 for i in idx]
        return float(np.mean(err))

    report = {"train_mse": mse(train_idx), "val_mse": mse(val_idx),
              "label_variance": float(y.var())}
    return reg, report


def predict_resolution(reg: ResolutionRegressor, obs: sim.Observation,
                       goal: planner.GoalSpec) -> int:
    """De-normalize, round, clamp to the feasible range."""
    raw = reg.raw_predict(featurize(obs, goal))
    omega = round(reg.omega_min + raw * (reg.omega_max - reg.omega_min))
    foreground = len(perception.segment_foreground(obs)[0])
    return int(np.clip(omega, reg.omega_min, min(reg.omega_max, foreground)))
