"""Resolution-conditioned particle-graph dynamics model.

Node and edge encoders run once per step; the decode/aggregate stage then
iterates `message_steps` times: each round decodes edge messages from the
edge latent plus the two endpoint latents, sums them at the receiver, and
updates the node latent. A final linear head emits a per-node position delta
(residual prediction), so a zeroed head is exact identity dynamics.

The action enters as a per-node feature: the sweep displacement of each
particle plus an inside-sweep flag, built on the tape so task objectives can
be differentiated back to the action parameters (sweep membership and edge
topology are held fixed during differentiation).

Training minimizes the multi-step MSE between predicted and tracked particle
positions with Adam (beta1=0.9, beta2=0.999, eps=1e-8, bias-corrected).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import io, perception, sim
from .autodiff import Param, Tape

_MLPS = ("node_enc", "edge_enc", "edge_dec", "node_dec")


@dataclass
class TrainConfig:
    horizon: int = 2  # T of the multi-step loss
    lr: float = 1e-3
    batch_size: int = 4
    epochs: int = 10
    batches_per_epoch: int = 100
    omega_range: tuple = (10, 100)
    val_fraction: float = 0.1

    def validate(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        return self


class GnnParams:
    """Weights of the four networks plus the residual output head."""

    def __init__(self, mlps, out_head, hidden, message_steps, n_material_slots,
                 pos_mean, pos_scale, omega_min, omega_max):
        self.mlps = mlps  # name -> [W1, b1, W2, b2] Params
        self.out_head = out_head  # [W, b]
        self.hidden = int(hidden)
        self.message_steps = int(message_steps)
        self.n_material_slots = int(n_material_slots)
        self.pos_mean = np.asarray(pos_mean, dtype=float).reshape(1, 2)
        self.pos_scale = float(pos_scale)
        self.omega_min = int(omega_min)
        self.omega_max = int(omega_max)

    @property
    def node_in_dim(self):
        # pos (2) + sweep displacement (2) + inside flag + omega + material one-hot
        return 6 + self.n_material_slots

    @classmethod
    def init(cls, seed: int, *, hidden: int = 64, message_steps: int = 3,
             n_material_slots: int = 2, workspace=(0.0, 0.0, 0.5, 0.5),
             omega_range=(10, 100)) -> "GnnParams":
        rng = np.random.default_rng([seed, 11])
        x0, y0, x1, y1 = workspace
        obj = cls({}, [], hidden, message_steps, n_material_slots,
                  [(x0 + x1) / 2, (y0 + y1) / 2], max(x1 - x0, y1 - y0) / 2,
                  omega_range[0], omega_range[1])
        dims = {
            "node_enc": (obj.node_in_dim, hidden, hidden),
            "edge_enc": (5, hidden, hidden),
            "edge_dec": (3 * hidden, hidden, hidden),
            "node_dec": (2 * hidden, hidden, hidden),
        }
        for name in _MLPS:
            d_in, d_hid, d_out = dims[name]
            obj.mlps[name] = [
                Param(rng.normal(0, 1 / math.sqrt(d_in), (d_in, d_hid)), f"{name}.W1"),
                Param(np.zeros((1, d_hid)), f"{name}.b1"),
                Param(rng.normal(0, 1 / math.sqrt(d_hid), (d_hid, d_out)), f"{name}.W2"),
                Param(np.zeros((1, d_out)), f"{name}.b2"),
            ]
        # zero head: the untrained model is exact identity dynamics
        obj.out_head = [Param(np.zeros((hidden, 2)), "out.W"),
                        Param(np.zeros((1, 2)), "out.b")]
        return obj

    def all_params(self):
        out = []
        for name in _MLPS:
            out.extend(self.mlps[name])
        out.extend(self.out_head)
        return out

    def tensors(self):
        meta = np.array([[self.hidden, self.message_steps, self.n_material_slots,
                          self.pos_mean[0, 0], self.pos_mean[0, 1], self.pos_scale,
                          self.omega_min, self.omega_max]])
        out = {"_meta": meta}
        for p in self.all_params():
            out[p.name] = p.value
        return out

    def save(self, path):
        io.save_checkpoint(path, self.tensors())

    @classmethod
    def load(cls, path) -> "GnnParams":
        t = io.load_checkpoint(path)
        meta = t.pop("_meta")[0]
        obj = cls({}, [], meta[0], meta[1], meta[2], meta[3:5], meta[5],
                  meta[6], meta[7])
        for name in _MLPS:
            obj.mlps[name] = [Param(t[f"{name}.W1"], f"{name}.W1"),
                              Param(t[f"{name}.b1"], f"{name}.b1"),
                              Param(t[f"{name}.W2"], f"{name}.W2"),
                              Param(t[f"{name}.b2"], f"{name}.b2")]
        obj.out_head = [Param(t["out.W"], "out.W"), Param(t["out.b"], "out.b")]
        return obj


# ---------------------------------------------------------------------------
# tape builders


def _bind(tape: Tape, params: GnnParams, frozen: bool):
    bound = {name: [tape.param(p, frozen) for p in params.mlps[name]]
             for name in _MLPS}
    bound["out"] = [tape.param(p, frozen) for p in params.out_head]
    return bound


def _mlp(tape: Tape, x: int, weights) -> int:
    w1, b1, w2, b2 = weights
    h = tape.relu(tape.add_row(tape.matmul(x, w1), b1))
    return tape.add_row(tape.matmul(h, w2), b2)


def _action_nodes(tape: Tape, action) -> tuple:
    """Tape leaves (sx, sy, angle, length); accepts Action or existing node ids."""
    if isinstance(action, tuple):
        return action
    a = action.as_array()
    return tuple(tape.const([[v]]) for v in a)


def _sweep_feature(tape: Tape, pos: int, action_nodes, action_concrete: sim.Action):
    """On-tape sweep displacement of each particle and the inside-sweep mask
    (mask is a constant: membership does not participate in gradients)."""
    sx, sy, ang, ln = action_nodes
    inside, _ = sim.sweep_mask(tape.value(pos), action_concrete)
    mask = tape.const(inside.astype(float).reshape(-1, 1))
    dirx, diry = tape.cos(ang), tape.sin(ang)
    px = tape.slice_cols(pos, 0, 1)
    py = tape.slice_cols(pos, 1, 2)
    relx = tape.add_row(px, tape.scale(sx, -1.0))
    rely = tape.add_row(py, tape.scale(sy, -1.0))
    along = tape.add(tape.matmul(relx, dirx), tape.matmul(rely, diry))
    carry = tape.mul(tape.add_row(tape.scale(along, -1.0), ln), mask)
    disp = tape.concat_cols([tape.matmul(carry, dirx), tape.matmul(carry, diry)])
    return disp, mask


def _concrete_action(tape: Tape, action_nodes) -> sim.Action:
    sx, sy, ang, ln = (float(tape.value(n)[0, 0]) for n in action_nodes)
    return sim.Action(start=(sx, sy), angle=ang, length=ln)


def _material_onehot(material, omega, slots):
    oh = np.zeros((omega, slots))
    if material is not None:
        lab = np.clip(np.asarray(material, dtype=int), 0, slots - 1)
        oh[np.arange(omega), lab] = 1.0
    return oh


def _step(tape: Tape, bound, pos: int, material, action_nodes, omega: int,
          params: GnnParams, pp: perception.PerceptionParams,
          edges=None, probe=None):
    """One dynamics step on the tape; edges are rebuilt from the current
    (possibly predicted) positions shifted by this step's sweep unless an
    explicit edge set is given."""
    act = _concrete_action(tape, action_nodes)
    cur = tape.value(pos)
    if edges is None:
        shifted = cur + perception.sweep_displacements(cur, act)
        edges = perception.build_edges(shifted, pp)

    omega_t = (omega - params.omega_min) / max(1, params.omega_max - params.omega_min)
    pos_n = tape.scale(tape.add_row(pos, tape.const(-params.pos_mean)),
                       1.0 / params.pos_scale)
    disp, mask = _sweep_feature(tape, pos, action_nodes, act)
    disp_n = tape.scale(disp, 1.0 / params.pos_scale)
    node_in = tape.concat_cols([
        pos_n, disp_n, mask,
        tape.const(np.full((omega, 1), omega_t)),
        tape.const(_material_onehot(material, omega, params.n_material_slots)),
    ])
    p = _mlp(tape, node_in, bound["node_enc"])

    recv, send = edges[:, 0], edges[:, 1]
    edge_in = tape.concat_cols([
        tape.gather_rows(pos_n, recv), tape.gather_rows(pos_n, send),
        tape.const(np.full((len(edges), 1), omega_t)),
    ])
    q = _mlp(tape, edge_in, bound["edge_enc"])

    h = p
    for round_i in range(params.message_steps):
        r = _mlp(tape, tape.concat_cols([q, tape.gather_rows(h, recv),
                                         tape.gather_rows(h, send)]),
                 bound["edge_dec"])
        msg = tape.scatter_add_rows(r, recv, omega)
        if probe is not None and round_i == 0:
            probe["aggregated"] = tape.value(msg).copy()
        h = _mlp(tape, tape.concat_cols([p, msg]), bound["node_dec"])

    delta = tape.add_row(tape.matmul(h, bound["out"][0]), bound["out"][1])
    return tape.add(pos, delta), (p, q)


# ---------------------------------------------------------------------------
# public operations


def encode(graph: perception.ParticleGraph, action: sim.Action, omega: int,
           params: GnnParams):
    """Node and edge latents for one step (graph's own edge set is used)."""
    if omega != graph.resolution:
        raise ValueError(f"resolution mismatch: {omega} != {graph.resolution}")
    tape = Tape()
    bound = _bind(tape, params, frozen=True)
    pos = tape.const(graph.particles)
    act_nodes = _action_nodes(tape, action)
    act = _concrete_action(tape, act_nodes)
    omega_t = (omega - params.omega_min) / max(1, params.omega_max - params.omega_min)
    pos_n = tape.scale(tape.add_row(pos, tape.const(-params.pos_mean)),
                       1.0 / params.pos_scale)
    disp, mask = _sweep_feature(tape, pos, act_nodes, act)
    node_in = tape.concat_cols([
        pos_n, tape.scale(disp, 1.0 / params.pos_scale), mask,
        tape.const(np.full((omega, 1), omega_t)),
        tape.const(_material_onehot(graph.material, omega, params.n_material_slots)),
    ])
    p = _mlp(tape, node_in, bound["node_enc"])
    recv, send = graph.edges[:, 0], graph.edges[:, 1]
    edge_in = tape.concat_cols([
        tape.gather_rows(pos_n, recv), tape.gather_rows(pos_n, send),
        tape.const(np.full((len(graph.edges), 1), omega_t)),
    ])
    q = _mlp(tape, edge_in, bound["edge_enc"])
    return tape.value(p).copy(), tape.value(q).copy()


def forward(graph: perception.ParticleGraph, action: sim.Action, omega: int,
            params: GnnParams, pp: perception.PerceptionParams | None = None):
    """Predicted next-step particle positions (omega, 2)."""
    if omega != graph.resolution:
        raise ValueError(f"resolution mismatch: {omega} != {graph.resolution}")
    pp = pp or perception.PerceptionParams()
    tape = Tape()
    bound = _bind(tape, params, frozen=True)
    pos = tape.const(graph.particles)
    out, _ = _step(tape, bound, pos, graph.material, _action_nodes(tape, action),
                   omega, params, pp)
    return tape.value(out).copy()


def rollout(graph0: perception.ParticleGraph, actions, horizon: int,
            params: GnnParams, pp: perception.PerceptionParams):
    """Iterate the model `horizon` steps, rebuilding edges from predictions.
    Returns positions (horizon + 1, omega, 2) including the initial step."""
    if len(actions) < horizon:
        raise ValueError("need at least `horizon` actions")
    tape = Tape()
    bound = _bind(tape, params, frozen=True)
    pos = tape.const(graph0.particles)
    traj = [tape.value(pos).copy()]
    for t in range(horizon):
        pos, _ = _step(tape, bound, pos, graph0.material,
                       _action_nodes(tape, actions[t]), graph0.resolution,
                       params, pp)
        traj.append(tape.value(pos).copy())
    return np.stack(traj)


def loss(predicted, truth) -> float:
    """Mean squared prediction error over a (T, omega, 2) trajectory pair."""
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predicted.shape != truth.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    t, omega = predicted.shape[0], predicted.shape[1]
    return float(((predicted - truth) ** 2).sum() / (t * omega))


def _window_loss_tape(tape, bound, window_pos, window_actions, picks, material,
                      omega, params, pp):
    """Tracked-particle rollout loss for one training window (on tape)."""
    horizon = len(window_pos) - 1
    pos = tape.const(window_pos[0][picks])
    total = None
    for t in range(horizon):
        pos, _ = _step(tape, bound, pos, material,
                       _action_nodes(tape, window_actions[t]), omega, params, pp)
        diff = tape.sub(pos, tape.const(window_pos[t + 1][picks]))
        term = tape.sum(tape.square(diff))
        total = term if total is None else tape.add(total, term)
    return tape.scale(total, 1.0 / (horizon * omega))


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m[:] = self.b1 * m + (1 - self.b1) * g
            v[:] = self.b2 * v + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.zero_grad()


def _load_dataset(paths, horizon):
    episodes, skipped = [], 0
    for path in paths:
        header, records = io.read_episode(path)
        pos, actions = io.episode_positions(records)
        if len(pos) < horizon + 1:
            skipped += 1
            continue
        material = None
        if "material" in header:
            material = np.array([int(v) for v in header["material"].split(",")])
        episodes.append((pos, actions, material))
    if skipped:
        warnings.warn(f"skipped {skipped} episodes shorter than horizon+1")
    if not episodes:
        raise ValueError("no usable episodes (all shorter than horizon+1)")
    return episodes


def _sample_window(rng, episodes, horizon, omega_range):
    pos, actions, material = episodes[rng.integers(len(episodes))]
    t0 = int(rng.integers(len(pos) - horizon))
    n = pos.shape[1]
    omega = int(rng.integers(omega_range[0], min(omega_range[1], n) + 1))
    window_pos = pos[t0:t0 + horizon + 1]
    window_actions = [sim.Action((a[0], a[1]), a[2], a[3])
                      for a in actions[t0 + 1:t0 + horizon + 1]]
    start = perception.fps_start_index(window_pos[0])
    picks = perception.fps(window_pos[0], omega, start)
    mat = material[picks] if material is not None else None
    return window_pos, window_actions, picks, mat, omega


def train(dataset_paths, config: TrainConfig, pp: perception.PerceptionParams,
          seed: int, *, params: GnnParams | None = None, log=None):
    """Stochastic training on episode files; returns (params, loss_curve) where
    loss_curve rows are (epoch, train_mse, val_mse)."""
    config.validate()
    episodes = _load_dataset(dataset_paths, config.horizon)
    rng = np.random.default_rng([seed, 23])
    n_val = max(1, int(len(episodes) * config.val_fraction)) if len(episodes) > 1 else 0
    val_eps = episodes[:n_val]
    train_eps = episodes[n_val:] or episodes
    if params is None:
        params = GnnParams.init(seed, omega_range=config.omega_range)
    opt = Adam(params.all_params(), config.lr)
    curve = []
    for epoch in range(config.epochs):
        losses = []
        for _ in range(config.batches_per_epoch):
            tape = Tape()
            bound = _bind(tape, params, frozen=False)
            total = None
            for _ in range(config.batch_size):
                window = _sample_window(rng, train_eps, config.horizon,
                                        config.omega_range)
                term = _window_loss_tape(tape, bound, *window, params, pp)
                total = term if total is None else tape.add(total, term)
            root = tape.scale(total, 1.0 / config.batch_size)
            tape.backward(root)
            opt.step()
            losses.append(float(tape.value(root)[0, 0]))
        train_mse = float(np.mean(losses))
        val_mse = _eval_windows(params, val_eps or train_eps, config, pp,
                                np.random.default_rng([seed, 57, epoch]))
        curve.append((epoch, train_mse, val_mse))
        if log:
            log(f"epoch {epoch}: train_mse={train_mse:.3e} val_mse={val_mse:.3e}")
    return params, curve


def _eval_windows(params, episodes, config, pp, rng, n_windows=20):
    losses = []
    for _ in range(n_windows):
        window_pos, window_actions, picks, mat, omega = _sample_window(
            rng, episodes, config.horizon, config.omega_range)
        g0 = perception.ParticleGraph(window_pos[0][picks],
                                      np.zeros((0, 2), dtype=int), omega, material=mat)
        traj = rollout(g0, window_actions, config.horizon, params, pp)
        losses.append(loss(traj[1:], window_pos[1:][:, picks]))
    return float(np.mean(losses))


def one_step_mse(params, episode_paths, omega: int,
                 pp: perception.PerceptionParams, max_transitions=200):
    """Tracked one-step MSE of the model and of the persistence baseline
    (predict no motion) over a dataset, at a fixed resolution."""
    episodes = _load_dataset(episode_paths, 1)
    model_err, persist_err, seen = [], [], 0
    for pos, actions, material in episodes:
        n = pos.shape[1]
        w = min(omega, n)
        start = perception.fps_start_index(pos[0])
        for t in range(len(pos) - 1):
            if seen >= max_transitions:
                break
            picks = perception.fps(pos[t], w, perception.fps_start_index(pos[t]))
            mat = material[picks] if material is not None else None
            g = perception.ParticleGraph(pos[t][picks], np.zeros((0, 2), dtype=int),
                                         w, material=mat)
            a = actions[t + 1]
            act = sim.Action((a[0], a[1]), a[2], a[3])
            pred = forward(g, act, w, params, pp)
            model_err.append(loss(pred[None], pos[t + 1][picks][None]))
            persist_err.append(loss(pos[t][picks][None], pos[t + 1][picks][None]))
            seen += 1
        if seen >= max_transitions:
            break
    return float(np.mean(model_err)), float(np.mean(persist_err))


def action_gradient(graph: perception.ParticleGraph, actions, horizon: int,
                    params: GnnParams, pp: perception.PerceptionParams,
                    objective):
    """Gradient of `objective(tape, final_pos_node)` w.r.t. the (T, 4) action
    parameters (start x, start y, angle, length). Edge topology and sweep
    membership are fixed at the current action values."""
    act_arr = np.array([a.as_array() if isinstance(a, sim.Action) else a
                        for a in actions], dtype=float)
    tape = Tape()
    bound = _bind(tape, params, frozen=True)
    act_params = [Param(act_arr[t:t + 1].copy(), f"u{t}") for t in range(horizon)]
    pos = tape.const(graph.particles)
    for t in range(horizon):
        nid = tape.param(act_params[t])
        nodes = tuple(tape.slice_cols(nid, j, j + 1) for j in range(4))
        pos, _ = _step(tape, bound, pos, graph.material, nodes,
                       graph.resolution, params, pp)
    root = objective(tape, pos)
    tape.backward(root)
    grads = np.concatenate([p.grad for p in act_params], axis=0)
    return grads, float(tape.value(root)[0, 0])
