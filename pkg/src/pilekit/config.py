"""Run configuration: nested dataclasses with YAML loading.

Every field has a default; unknown keys anywhere in the tree are rejected so
typos fail fast instead of silently running with defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import yaml

from . import io


@dataclass
class SimSection:
    n_pieces: int = 100
    piece_radius: float = 0.005
    workspace: list = field(default_factory=lambda: [0.0, 0.0, 0.5, 0.5])
    grid_h: int = 64
    grid_w: int = 64
    spread_sigma: float = 0.004
    repulsion_radius: float = 0.011
    max_push_carry: float = 0.08
    len_min: float = 0.05
    len_max: float = 0.25
    pusher_width: float = 0.06
    relax_iters: int = 200
    init_kind: str = "uniform"
    blob_radius: float = 0.06
    n_blobs: int = 2
    material_scale: list = field(default_factory=lambda: [1.0])


@dataclass
class PerceptionSection:
    r_center: float = 0.02
    r_edge: float = 0.06
    k: int = 8


@dataclass
class ModelSection:
    hidden: int = 64
    message_steps: int = 3
    n_material_slots: int = 2


@dataclass
class DataSection:
    n_episodes: int = 200
    episode_steps: int = 20


@dataclass
class TrainSection:
    horizon: int = 2
    lr: float = 1e-3
    batch_size: int = 4
    epochs: int = 10
    batches_per_epoch: int = 100
    omega_range: list = field(default_factory=lambda: [10, 100])
    val_fraction: float = 0.1


@dataclass
class PlannerSection:
    m_samples: int = 20
    n_iters: int = 200
    horizon: int = 1
    step_size: float = 0.2
    step_decay: float = 0.5
    m_sub: int = 32


@dataclass
class SelectorSection:
    omega_min: int = 10
    omega_max: int = 100
    budget: float = 4500.0
    w_r: float = 1e-3
    xi: float = 0.01
    n_init: int = 5
    n_iter: int = 10
    gp_lengthscale: float = 0.2
    gp_noise: float = 0.1
    regressor_hidden: int = 128
    regressor_lr: float = 1e-3
    regressor_epochs: int = 300


@dataclass
class LabelSection:
    n_pairs: int = 60


@dataclass
class TasksSection:
    kind: str = "gather"
    n_tasks: int = 10
    mpc_steps: int = 20
    goal_radius: float = 0.07
    letter: str = "T"
    success_threshold: float = 0.0  # <= 0 disables early stopping
    tau_max: float = 30.0
    tau_count: int = 61
    sort_blob_radius_px: float = 8.0
    sort_steps_per_subgoal: int = 6
    sort_subgoal_threshold: float = 8.0
    sort_merge_horizon: int = 3
    sort_final_threshold: float = 6.0


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/out"
    sim: SimSection = field(default_factory=SimSection)
    perception: PerceptionSection = field(default_factory=PerceptionSection)
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    planner: PlannerSection = field(default_factory=PlannerSection)
    selector: SelectorSection = field(default_factory=SelectorSection)
    label: LabelSection = field(default_factory=LabelSection)
    tasks: TasksSection = field(default_factory=TasksSection)

    def to_dict(self):
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return io.config_hash(self.to_dict())


def _build(cls, data, path="config"):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        if f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
            if dataclasses.is_dataclass(default):
                kwargs[name] = _build(type(default), value, f"{path}.{name}")
                continue
        kwargs[name] = value
    return cls(**kwargs)


def load_config(path=None, overrides=None) -> RunConfig:
    data = {}
    if path is not None:
        data = yaml.safe_load(open(path)) or {}
    cfg = _build(RunConfig, data)
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg
