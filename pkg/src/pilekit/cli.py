"""Command-line entry point: dataset generation, training, labeling,
regressor training, evaluation, and single-episode rollouts.

Every output embeds the config hash and master seed, and reruns with
identical inputs reproduce identical bytes. Evaluation reports refuse to
overwrite existing files unless --force is given.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import gnn, io, perception, planner, selector, sim, sort_planner
from .config import RunConfig, load_config


class UsageError(Exception):
    pass


def _sim_config(cfg: RunConfig, **over) -> sim.SimConfig:
    s = cfg.sim
    kw = dict(
        n_pieces=s.n_pieces, piece_radius=s.piece_radius,
        workspace=tuple(s.workspace), grid_h=s.grid_h, grid_w=s.grid_w,
        spread_sigma=s.spread_sigma, repulsion_radius=s.repulsion_radius,
        max_push_carry=s.max_push_carry, len_min=s.len_min, len_max=s.len_max,
        pusher_width=s.pusher_width, relax_iters=s.relax_iters,
        init_kind=s.init_kind, blob_radius=s.blob_radius, n_blobs=s.n_blobs,
        material_scale=tuple(s.material_scale),
    )
    kw.update(over)
    return sim.SimConfig(**kw)


def _pp(cfg: RunConfig) -> perception.PerceptionParams:
    p = cfg.perception
    return perception.PerceptionParams(p.r_center, p.r_edge, p.k)


def _planner_cfg(cfg: RunConfig) -> planner.PlannerConfig:
    p = cfg.planner
    return planner.PlannerConfig(
        m_samples=p.m_samples, n_iters=p.n_iters, horizon=p.horizon,
        step_size=p.step_size, step_decay=p.step_decay,
        pusher_width=cfg.sim.pusher_width, len_min=cfg.sim.len_min,
        len_max=cfg.sim.len_max, m_sub=p.m_sub)


def _budget(cfg: RunConfig) -> selector.ComputeBudget:
    return selector.ComputeBudget(cfg.selector.budget, cfg.perception.k)


def _sel(cfg: RunConfig) -> selector.SelectorConfig:
    s = cfg.selector
    return selector.SelectorConfig(
        omega_min=s.omega_min, omega_max=s.omega_max, w_r=s.w_r, xi=s.xi,
        n_init=s.n_init, n_iter=s.n_iter, gp_lengthscale=s.gp_lengthscale,
        gp_noise=s.gp_noise)


def _meta(cfg: RunConfig) -> dict:
    return {"config": cfg.hash(), "seed": cfg.seed}


def _episode_seed(master: int, index: int) -> int:
    return master * 100003 + index


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    sim_cfg = _sim_config(cfg)
    episodes_dir = out / "episodes"
    episodes_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(cfg.data.n_episodes):
        seed = _episode_seed(cfg.seed, i)
        state = sim.init_scene(sim_cfg, seed)
        rng = np.random.default_rng([seed, 3])
        records = [(0, None, state.positions)]
        for step in range(cfg.data.episode_steps):
            action = _random_push_near_pile(rng, sim_cfg, state)
            state = sim.apply_push(state, action, sim_cfg)
            records.append((step + 1, action, state.positions))
        path = episodes_dir / f"episode_{i:05d}.txt"
        header = dict(_meta(cfg), episode=i,
                      material=",".join(str(m) for m in state.material),
                      piece_radius=io.fmt(state.piece_radius))
        io.write_episode(path, records, header)
        paths.append(path.name)
    manifest = dict(_meta(cfg), n_episodes=cfg.data.n_episodes, files=paths)
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(paths)} episodes to {episodes_dir}")


def _random_push_near_pile(rng, sim_cfg, state):
    """Random actions biased to start near a random piece so sweeps usually
    touch the pile; keeps generated data informative."""
    x0, y0, x1, y1 = sim_cfg.workspace
    piece = state.positions[rng.integers(len(state.positions))]
    start = piece + rng.normal(0, 0.05, 2)
    start = np.clip(start, [x0, y0], [x1, y1])
    return sim.Action((start[0], start[1]), rng.uniform(0, 2 * math.pi),
                      rng.uniform(sim_cfg.len_min, sim_cfg.len_max),
                      sim_cfg.pusher_width)


def _dataset_paths(data_dir: Path):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    return [data_dir / "episodes" / name for name in manifest["files"]]


def cmd_train(cfg: RunConfig, out: Path, data_dir: Path) -> None:
    paths = _dataset_paths(data_dir)
    tc = gnn.TrainConfig(
        horizon=cfg.train.horizon, lr=cfg.train.lr,
        batch_size=cfg.train.batch_size, epochs=cfg.train.epochs,
        batches_per_epoch=cfg.train.batches_per_epoch,
        omega_range=tuple(cfg.train.omega_range),
        val_fraction=cfg.train.val_fraction)
    params = gnn.GnnParams.init(
        cfg.seed, hidden=cfg.model.hidden,
        message_steps=cfg.model.message_steps,
        n_material_slots=cfg.model.n_material_slots,
        workspace=tuple(cfg.sim.workspace),
        omega_range=tuple(cfg.train.omega_range))
    params, curve = gnn.train(paths, tc, _pp(cfg), cfg.seed, params=params,
                              log=print)
    out.mkdir(parents=True, exist_ok=True)
    params.save(out / "gnn.ckpt")
    io.write_csv(out / "loss_curve.csv", ["epoch", "train_mse", "val_mse"],
                 curve, _meta(cfg))
    print(f"saved checkpoint to {out / 'gnn.ckpt'}")


def _goal_for(cfg: RunConfig, obs, center=None, radius=None):
    grid_shape = obs.grid.shape
    if cfg.tasks.kind == "redistribute":
        return planner.goal_letter(cfg.tasks.letter, grid_shape, obs.cell,
                                   obs.origin, cfg.planner.m_sub)
    x0, y0, x1, y1 = cfg.sim.workspace
    center = center or ((x0 + x1) / 2, (y0 + y1) / 2)
    radius = radius or cfg.tasks.goal_radius
    return planner.goal_disk(center, radius, grid_shape, obs.cell, obs.origin,
                             cfg.planner.m_sub)


def _label_scene(cfg: RunConfig, index: int):
    """Scene/goal pairs spanning the spread -> concentrated progression."""
    kind = index % 4
    seed = _episode_seed(cfg.seed, 7000 + index)
    rng = np.random.default_rng([seed, 5])
    x0, y0, x1, y1 = cfg.sim.workspace
    center = ((x0 + x1) / 2, (y0 + y1) / 2)
    radius = cfg.tasks.goal_radius
    if kind == 0:  # spread-out scatter
        sc = _sim_config(cfg, init_kind="uniform")
        state = sim.init_scene(sc, seed)
    elif kind == 1:  # loose blob offset from the goal
        off = rng.uniform(-0.08, 0.08, 2)
        sc = _sim_config(cfg, init_kind="blob", blob_radius=radius * 2.2,
                         blob_center=(center[0] + off[0], center[1] + off[1]))
        state = sim.init_scene(sc, seed)
    elif kind == 2:  # concentrated on the goal (late-task look)
        sc = _sim_config(cfg, init_kind="blob",
                         blob_radius=radius * rng.uniform(1.0, 1.5),
                         blob_center=center)
        state = sim.init_scene(sc, seed)
    else:  # blob on goal plus outlying pieces (mid-task look)
        n_out = max(1, cfg.sim.n_pieces // 5)
        sc = _sim_config(cfg, init_kind="blob", blob_radius=radius * 1.3,
                         blob_center=center,
                         n_pieces=cfg.sim.n_pieces - n_out)
        state = sim.init_scene(sc, seed)
        extra = np.column_stack([rng.uniform(x0, x1, n_out),
                                 rng.uniform(y0, y1, n_out)])
        pos = np.vstack([state.positions, extra])
        pos = sim.relax_overlaps(pos, sc.repulsion_radius, sc.workspace,
                                 sc.piece_radius, sc.relax_iters)
        state = sim.PileState(pos, np.zeros(len(pos), dtype=int),
                              sc.piece_radius, sc.workspace, seed)
    obs = sim.observe(state, _sim_config(cfg))
    goal = _goal_for(cfg, obs, center=center, radius=radius)
    return state, obs, goal


def cmd_label(cfg: RunConfig, out: Path, model_path: Path) -> None:
    model = gnn.GnnParams.load(model_path)
    sel = _sel(cfg)
    budget = _budget(cfg)
    pp, pcfg = _pp(cfg), _planner_cfg(cfg)
    out.mkdir(parents=True, exist_ok=True)
    scenes_dir = out / "scenes"
    scenes_dir.mkdir(exist_ok=True)
    lines = []
    for i in range(cfg.label.n_pairs):
        state, obs, goal = _label_scene(cfg, i)
        scene_path = scenes_dir / f"scene_{i:04d}.txt"
        io.write_episode(scene_path, [(0, None, state.positions)],
                         dict(_meta(cfg), material=",".join(
                             str(m) for m in state.material),
                             piece_radius=io.fmt(state.piece_radius)))
        rec = selector.bo_label(
            obs, goal, model, budget, (sel.omega_min, sel.omega_max),
            sel.n_init, sel.n_iter, [cfg.seed, 13, i], pp=pp, cfg=pcfg,
            workspace=tuple(cfg.sim.workspace), sel=sel,
            y0_ref=f"{scene_path.name}:0", yg_ref=f"goal:{cfg.tasks.kind}")
        feats = selector.featurize(obs, goal)
        lines.append(json.dumps({
            "y0": rec.y0_ref, "yg": rec.yg_ref, "omega": rec.omega_star,
            "curve": [[o, round(c, 9)] for o, c in rec.curve],
            "features": [round(float(v), 9) for v in feats],
        }, sort_keys=True))
        print(f"pair {i}: omega*={rec.omega_star}")
    (out / "labels.jsonl").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} labels to {out / 'labels.jsonl'}")


def load_labels(path):
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        records.append(selector.LabelRecord(
            d["y0"], d["yg"], d["omega"], [tuple(c) for c in d["curve"]],
            np.array(d["features"])))
    return records


def cmd_train_regressor(cfg: RunConfig, out: Path, labels_path: Path) -> None:
    labels = load_labels(labels_path)
    rc = selector.RegressorConfig(hidden=cfg.selector.regressor_hidden,
                                  lr=cfg.selector.regressor_lr,
                                  epochs=cfg.selector.regressor_epochs)
    reg, report = selector.train_regressor(
        labels, rc, cfg.seed, omega_min=cfg.selector.omega_min,
        omega_max=cfg.selector.omega_max)
    out.mkdir(parents=True, exist_ok=True)
    reg.save(out / "regressor.ckpt")
    io.write_csv(out / "regressor_report.csv", ["metric", "value"],
                 sorted(report.items()), _meta(cfg))
    print(f"regressor: {report}")


def _parse_modes(mode: str, cfg: RunConfig):
    modes = []
    for part in mode.split(","):
        part = part.strip()
        if part == "dynamic" or part == "oracle":
            modes.append((part, None))
        elif part.startswith("fixed:"):
            modes.append(("fixed", int(part.split(":", 1)[1])))
        else:
            raise UsageError(f"unknown mode {part!r}")
    return modes


def _gather_tasks(cfg: RunConfig):
    sim_cfg = _sim_config(cfg, init_kind="uniform")
    for i in range(cfg.tasks.n_tasks):
        yield i, sim.init_scene(sim_cfg, _episode_seed(cfg.seed, 40000 + i))


def cmd_eval(cfg: RunConfig, out: Path, model_path: Path, mode: str,
             regressor_path: Path | None, force: bool) -> None:
    if cfg.tasks.kind == "sort":
        _eval_sort(cfg, out, model_path, mode, force)
        return
    model = gnn.GnnParams.load(model_path)
    modes = _parse_modes(mode, cfg)
    reg = None
    if any(m[0] == "dynamic" for m in modes):
        if regressor_path is None:
            raise UsageError("dynamic mode requires --regressor")
        reg = selector.ResolutionRegressor.load(regressor_path)
    pp, pcfg, budget, sel = _pp(cfg), _planner_cfg(cfg), _budget(cfg), _sel(cfg)
    sim_cfg = _sim_config(cfg)
    out.mkdir(parents=True, exist_ok=True)
    steps_csv = out / "eval_steps.csv"
    scores_csv = out / "eval_scores.csv"
    for path in (steps_csv, scores_csv):
        if path.exists() and not force:
            raise RuntimeError(f"{path} exists; rerun with --force to replace")

    threshold = cfg.tasks.success_threshold
    threshold = threshold if threshold > 0 else math.inf
    step_rows, finals = [], {}
    for mode_name, fixed in modes:
        label = mode_name if fixed is None else f"fixed:{fixed}"
        finals[label] = []
        for task_i, state in _gather_tasks(cfg):
            obs0 = sim.observe(state, sim_cfg)
            goal = _goal_for(cfg, obs0)
            oracle_omega = None
            if mode_name == "oracle":
                rec = selector.bo_label(
                    obs0, goal, model, budget, (sel.omega_min, sel.omega_max),
                    sel.n_init, sel.n_iter, [cfg.seed, 17, task_i], pp=pp,
                    cfg=pcfg, workspace=tuple(cfg.sim.workspace), sel=sel)
                oracle_omega = rec.omega_star
            log, end_state = planner.run_mpc(
                state, goal, model, reg, cfg.tasks.mpc_steps, budget,
                [cfg.seed, 19, task_i], sim_config=sim_cfg, pp=pp, cfg=pcfg,
                fixed_omega=fixed, oracle_omega=oracle_omega,
                success_threshold=threshold)
            step_rows.append((task_i, label, 0, log.initial_distance, 0))
            for rec_ in log.records:
                step_rows.append((task_i, label, rec_.step + 1, rec_.distance,
                                  rec_.omega))
            finals[label].append(log.final_distance)
            if mode_name == "dynamic":
                _save_eval_episode(cfg, out, task_i, state, log)
            print(f"eval {label} task {task_i}: "
                  f"d0={log.initial_distance:.3f} -> {log.final_distance:.3f}")
    io.write_csv(steps_csv, ["task", "method", "step", "distance", "omega"],
                 step_rows, _meta(cfg))
    taus = np.linspace(0.0, cfg.tasks.tau_max, cfg.tasks.tau_count)
    score_rows = [(label, tau, planner.task_score(ds, tau))
                  for label, ds in finals.items() for tau in taus]
    io.write_csv(scores_csv, ["method", "tau", "score"], score_rows, _meta(cfg))
    print(f"wrote {steps_csv} and {scores_csv}")


def _save_eval_episode(cfg, out, task_i, state0, log):
    """Replayable record of a dynamic episode: initial state plus actions."""
    sim_cfg = _sim_config(cfg)
    state = state0
    records = [(0, None, state.positions)]
    for rec in log.records:
        state = sim.apply_push(state, rec.action, sim_cfg)
        records.append((rec.step + 1, rec.action, state.positions))
    ep_dir = out / "episodes"
    ep_dir.mkdir(exist_ok=True)
    io.write_episode(ep_dir / f"dynamic_task_{task_i:03d}.txt", records,
                     dict(_meta(cfg), material=",".join(
                         str(m) for m in state.material),
                         piece_radius=io.fmt(state.piece_radius)))


def _eval_sort(cfg: RunConfig, out: Path, model_path: Path, mode: str,
               force: bool) -> None:
    model = gnn.GnnParams.load(model_path)
    modes = _parse_modes(mode, cfg)
    pp, pcfg, budget = _pp(cfg), _planner_cfg(cfg), _budget(cfg)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "eval_sort.csv"
    if csv_path.exists() and not force:
        raise RuntimeError(f"{csv_path} exists; rerun with --force to replace")
    rows = []
    for mode_name, fixed in modes:
        label = mode_name if fixed is None else f"fixed:{fixed}"
        for task_i in range(cfg.tasks.n_tasks):
            state, world, goal_nodes, sim_cfg = _sort_instance(cfg, task_i)
            result = sort_planner.run_sort(
                state, goal_nodes, model, budget, [cfg.seed, 29, task_i],
                world=world, sim_config=sim_cfg, pp=pp, cfg=pcfg,
                merge_horizon=cfg.tasks.sort_merge_horizon,
                steps_per_subgoal=cfg.tasks.sort_steps_per_subgoal,
                subgoal_threshold=cfg.tasks.sort_subgoal_threshold,
                fixed_omega=fixed if fixed is not None else 50)
            if result is None:
                rows.append((task_i, label, -1, float("nan"), 0))
                continue
            finals, _, _ = result
            for material, dist in sorted(finals.items()):
                ok = int(dist < cfg.tasks.sort_final_threshold)
                rows.append((task_i, label, material, dist, ok))
            print(f"sort {label} task {task_i}: {finals}")
    io.write_csv(csv_path, ["task", "method", "material", "distance", "ok"],
                 rows, _meta(cfg))
    print(f"wrote {csv_path}")


def _sort_instance(cfg: RunConfig, task_i: int):
    """Two blobs on opposite sides that must swap x positions (rows differ so
    the straight-line paths do not conflict)."""
    x0, y0, x1, y1 = cfg.sim.workspace
    w = x1 - x0
    cell = w / cfg.sim.grid_w
    centers = ((x0 + 0.25 * w, y0 + 0.3 * w), (x0 + 0.75 * w, y0 + 0.7 * w))
    sim_cfg = _sim_config(cfg, init_kind="blobs", n_blobs=2,
                          blob_radius=cfg.tasks.sort_blob_radius_px * cell * 0.8,
                          blob_centers=centers,
                          material_scale=tuple(cfg.sim.material_scale) * 2)
    state = sim.init_scene(sim_cfg, _episode_seed(cfg.seed, 60000 + task_i))
    obs = sim.observe(state, sim_cfg)
    world = sort_planner.default_world(obs.grid.shape,
                                       cfg.tasks.sort_blob_radius_px)
    start = sort_planner.blob_extract(obs, 2, world)
    # goals: swap x positions, keep rows
    goal_nodes = ((start[1][0], start[0][1]), (start[0][0], start[1][1]))
    return state, world, goal_nodes, sim_cfg


def cmd_rollout(cfg: RunConfig, out: Path, model_path: Path, mode: str,
                regressor_path: Path | None) -> None:
    model = gnn.GnnParams.load(model_path)
    modes = _parse_modes(mode, cfg)
    if len(modes) != 1:
        raise UsageError("rollout takes exactly one mode")
    mode_name, fixed = modes[0]
    reg = None
    if mode_name == "dynamic":
        if regressor_path is None:
            raise UsageError("dynamic mode requires --regressor")
        reg = selector.ResolutionRegressor.load(regressor_path)
    sim_cfg = _sim_config(cfg)
    state = next(_gather_tasks(cfg))[1]
    obs0 = sim.observe(state, sim_cfg)
    goal = _goal_for(cfg, obs0)
    log, _ = planner.run_mpc(
        state, goal, model, reg, cfg.tasks.mpc_steps, _budget(cfg),
        [cfg.seed, 19, 0], sim_config=sim_cfg, pp=_pp(cfg),
        cfg=_planner_cfg(cfg), fixed_omega=fixed)
    out.mkdir(parents=True, exist_ok=True)
    rows = [(0, 0, log.initial_distance)]
    rows += [(r.step + 1, r.omega, r.distance) for r in log.records]
    io.write_csv(out / "rollout.csv", ["step", "omega", "distance"], rows,
                 _meta(cfg))
    print(f"rollout distances: {[round(d, 3) for d in log.distances]}")


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="pilekit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "label", "train-regressor", "eval",
                 "rollout"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=None)
        if name in ("train",):
            p.add_argument("--data", type=Path, required=True)
        if name in ("label", "eval", "rollout"):
            p.add_argument("--model", type=Path, required=True)
        if name == "train-regressor":
            p.add_argument("--labels", type=Path, required=True)
        if name in ("eval", "rollout"):
            p.add_argument("--mode", default="fixed:50")
            p.add_argument("--regressor", type=Path, default=None)
            p.add_argument("--tasks",
                           choices=["gather", "redistribute", "sort"],
                           default=None)
        if name == "eval":
            p.add_argument("--force", action="store_true")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        cfg = load_config(args.config, {"seed": args.seed,
                                        "out": str(args.out) if args.out else None})
        if getattr(args, "tasks", None):
            cfg.tasks.kind = args.tasks
        out = Path(cfg.out)
        if args.command == "gen-data":
            out.mkdir(parents=True, exist_ok=True)
            cmd_gen_data(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out, args.data)
        elif args.command == "label":
            cmd_label(cfg, out, args.model)
        elif args.command == "train-regressor":
            cmd_train_regressor(cfg, out, args.labels)
        elif args.command == "eval":
            cmd_eval(cfg, out, args.model, args.mode, args.regressor,
                     args.force)
        elif args.command == "rollout":
            cmd_rollout(cfg, out, args.model, args.mode, args.regressor)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure -> exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
