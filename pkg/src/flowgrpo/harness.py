"""Experiment orchestration: config schema, the pretrain -> GRPO pipeline,
held-out evaluation, ablation sweeps and curve files.

Configs are JSON documents mirroring :class:`ExperimentConfig`. Unknown keys
are rejected and every default is materialized in ``resolved_config.json``
next to the outputs.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import time
import typing
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from . import flow_matching as fm
from .grpo import GrpoConfig, PosttrainResult, posttrain
from .metrics import MetricLog
from .model import ModelConfig, ParamSet, init_params, load_checkpoint, save_checkpoint
from .optim import Adam, LinearSchedule
from .rewards import RewardModel, RewardSpec, make_projection
from .samplers import TimeGrid, rollout
from .tasks import TaskSpec, sample_pairs

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    code = "CONFIG_INVALID"


# ------------------------------------------------------------------ schema


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 256
    learning_rate: float = 3e-3
    warmup_steps: int = 100


@dataclass(frozen=True)
class RewardEntry:
    name: str = "loglik"
    weight: float = 1.0
    kind: str = "builtin"
    command: tuple[str, ...] = ()
    timeout: float = 30.0


@dataclass(frozen=True)
class GrpoSection:
    steps: int = 500
    G: int = 8
    clip_eps: float = 0.2
    beta: float = 0.01
    prompts_per_round: int = 6
    repeats: int = 4
    batch_size: int = 12
    updates_per_iteration: int = 4
    noise_level: float = 0.3
    window_size: int = 2
    s_min_range: tuple[int, int] = (1, 3)
    T_range: tuple[int, int] = (7, 10)
    full_path: bool = False
    learning_rate: float = 1e-3
    guidance_scale: float = 1.0
    frozen: tuple[str, ...] = ()
    rewards: tuple[RewardEntry, ...] = (RewardEntry(),)
    calibration_groups: int = 24

    def grpo_config(self) -> GrpoConfig:
        names = {f.name for f in dataclasses.fields(GrpoConfig)}
        return GrpoConfig(**{k: v for k, v in asdict(self).items() if k in names})


@dataclass(frozen=True)
class EvalConfig:
    n_heldout: int = 256
    inference_steps: int = 10
    eval_interval: int = 5
    checkpoint_interval: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    grpo: GrpoSection = field(default_factory=GrpoSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs/default"


def _build(cls, data: Any, where: str):
    """Strictly construct nested frozen dataclasses from JSON data."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{where}.{name}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _coerce(tp, value, where):
    if tp is tuple:
        return tuple(value) if isinstance(value, (list, tuple)) else value
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if tp is tuple or not args:
            return tuple(value)
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} items")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    data = copy.deepcopy(data)
    task = data.get("task")
    if isinstance(task, dict) and "components" in task:
        try:
            task["components"] = tuple((float(w), tuple(map(float, m)), float(sd)) for w, m, sd in task["components"])
        except (TypeError, ValueError):
            raise ConfigError("config.task.components: expected [[weight, [mean...], std], ...]") from None
    return _build(ExperimentConfig, data, "config")


def _jsonable(obj):
    if isinstance(obj, tuple):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _jsonable(asdict(cfg))


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


PRESETS = ("gauss1d", "circle_loglik", "circle_fidelity", "circle_multi")


def preset_dict(name: str) -> dict:
    try:
        text = resources.files("flowgrpo.presets").joinpath(f"{name}.json").read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"unknown preset '{name}'") from None
    return json.loads(text)


def load_config(source, overrides: dict | None = None) -> ExperimentConfig:
    """Load from a path, a preset name (``preset:NAME``) or a dict."""
    if isinstance(source, dict):
        data = source
    elif isinstance(source, str) and source.startswith("preset:"):
        data = preset_dict(source.split(":", 1)[1])
    else:
        try:
            data = json.loads(Path(source).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {source}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    if overrides:
        data = merge(data, overrides)
    return config_from_dict(data)


def write_resolved(cfg: ExperimentConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.json"
    path.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- pipeline


def task_sampler(task: TaskSpec):
    return lambda n, rng: sample_pairs(task, n, rng)


class CheckpointMismatch(ValueError):
    code = "CHECKPOINT_MISMATCH"


def check_compatible(cfg: ExperimentConfig, params: ParamSet, what: str = "checkpoint") -> None:
    if params.cfg != cfg.model:
        raise CheckpointMismatch(f"{what} model config {asdict(params.cfg)} does not match config {asdict(cfg.model)}")


def _optim_path(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.name + ".optim.npz")


def save_optimizer(opt: Adam, ckpt: Path) -> Path:
    state = opt.state_dict()
    arrays = {f"m.{k}": v for k, v in state["m"].items()}
    arrays.update({f"v.{k}": v for k, v in state["v"].items()})
    path = _optim_path(ckpt)
    with open(path, "wb") as fh:
        np.savez(fh, t=np.array(state["t"]), **arrays)
    return path


def load_optimizer(opt: Adam, ckpt: Path) -> bool:
    path = _optim_path(Path(ckpt))
    if not path.exists():
        return False
    with np.load(path) as z:
        m = {k[2:]: z[k] for k in z.files if k.startswith("m.")}
        v = {k[2:]: z[k] for k in z.files if k.startswith("v.")}
        opt.load_state_dict({"t": int(z["t"]), "m": m, "v": v})
    return True


def pretrain(
    cfg: ExperimentConfig,
    out_dir: Path | None = None,
    resume: Path | None = None,
    stop_step: int | None = None,
) -> tuple[ParamSet, MetricLog]:
    """Flow-matching pretraining.

    The minibatch at step s depends only on (seed, s), and the optimizer
    state travels with the checkpoint, so stopping at ``stop_step`` and
    resuming reproduces an uninterrupted run exactly.
    """
    pc = cfg.pretrain
    start = 0
    if resume is not None:
        params, meta = load_checkpoint(resume)
        check_compatible(cfg, params)
        start = int(meta.get("step", 0))
    else:
        params = init_params(cfg.model, cfg.seed)
    opt = Adam(params, LinearSchedule(pc.learning_rate, pc.steps, pc.warmup_steps))
    if resume is not None and not load_optimizer(opt, resume):
        log.warning("no optimizer state next to %s; moments restart from zero", resume)
        opt.t = start
    end = pc.steps if stop_step is None else min(stop_step, pc.steps)
    loss_log = MetricLog(["loss", "lr"])
    for step in range(start, end):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101, step]))
        batch, c = fm.make_batch(cfg.task, pc.batch_size, rng, cfg.model.cond_dropout_prob)
        lr = opt.lr
        loss = fm.pretrain_step(params, opt, batch, c)
        loss_log.append(step + 1, {"loss": loss, "lr": lr})
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_resolved(cfg, out_dir)
        ckpt = out_dir / "pretrain.ckpt"
        save_checkpoint(ckpt, params, {"step": end, "config_hash": config_hash(cfg), "stage": "pretrain"})
        save_optimizer(opt, ckpt)
        log_path = out_dir / "pretrain_loss.csv"
        if resume is not None and log_path.exists():
            # keep earlier rows of the same run, drop anything past the resume point
            prior = MetricLog.read(log_path)
            merged = MetricLog(["loss", "lr"])
            for s, row in zip(prior.steps, prior.rows):
                if s <= start:
                    merged.append(s, row)
            for s, row in zip(loss_log.steps, loss_log.rows):
                merged.append(s, row)
            merged.write(log_path)
        else:
            loss_log.write(log_path)
    return params, loss_log


def make_reward_model(cfg: ExperimentConfig, entries=None) -> RewardModel:
    entries = cfg.grpo.rewards if entries is None else entries
    specs = [RewardSpec(e.name, e.kind, e.weight, None, tuple(e.command), e.timeout) for e in entries]
    return RewardModel(cfg.task, specs, make_projection(cfg.task.data_dim, 8, cfg.seed))


def heldout_pairs(cfg: ExperimentConfig, n: int | None = None, seed: int | None = None):
    """Held-out conditions come from a stream disjoint from every training round."""
    n = cfg.eval.n_heldout if n is None else n
    seed = cfg.seed if seed is None else seed
    return sample_pairs(cfg.task, n, np.random.default_rng(np.random.SeedSequence([seed, 9001])))


def calibrate(cfg: ExperimentConfig, params: ParamSet, reward: RewardModel) -> RewardModel:
    """Estimate per-reward stds from one round of base-policy SDE rollouts."""
    gc = cfg.grpo.grpo_config()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4242]))
    pairs = sample_pairs(cfg.task, cfg.grpo.calibration_groups, rng)
    cond = np.repeat(pairs.c, gc.G, axis=0)
    ref = np.repeat(pairs.x1, gc.G, axis=0)
    from .grpo import sample_window

    grid, window = sample_window(gc, rng)
    traj = rollout(params, cond, grid, window, gc.noise_level, gc.guidance_scale, seed=int(rng.integers(2**31)))
    return reward.calibrate(traj.final, cond, ref)


def sample_heldout(cfg: ExperimentConfig, params: ParamSet, pairs=None, seed: int | None = None) -> np.ndarray:
    pairs = heldout_pairs(cfg) if pairs is None else pairs
    seed = cfg.seed if seed is None else seed
    traj = rollout(
        params, pairs.c, TimeGrid(cfg.eval.inference_steps), None, 0.0, cfg.grpo.guidance_scale,
        seed=int(np.random.SeedSequence([seed, 9002]).generate_state(1)[0]),
    )
    return traj.final


def make_evaluator(cfg: ExperimentConfig, reward: RewardModel, n: int | None = None):
    """All-ODE held-out evaluation returning the mean of every metric."""
    pairs = heldout_pairs(cfg, n)

    def evaluate(params: ParamSet) -> dict[str, float]:
        x = sample_heldout(cfg, params, pairs)
        combined, raw = reward(x, pairs.c, pairs.x1)
        out = {k: float(np.mean(v)) for k, v in raw.items()}
        out["reward"] = float(np.mean(combined))
        return out

    return evaluate


def run_grpo(
    cfg: ExperimentConfig,
    params: ParamSet,
    out_dir: Path | None = None,
    dump_trajectories: bool = False,
) -> tuple[PosttrainResult, RewardModel]:
    """Post-train ``params`` in place and write logs, curves and checkpoints."""
    reward = calibrate(cfg, params, make_reward_model(cfg))
    evaluator = make_evaluator(cfg, reward)
    ckpt_every = cfg.eval.checkpoint_interval
    digest = config_hash(cfg)

    timing = MetricLog(["wall_time"])
    t0 = time.perf_counter()

    def on_step(step, p):
        # wall time lives in its own file so the metric logs stay bit-reproducible
        timing.append(step, {"wall_time": time.perf_counter() - t0})
        if out_dir is not None and ckpt_every and step % ckpt_every == 0:
            save_checkpoint(Path(out_dir) / f"grpo_step{step:06d}.ckpt", p, {"step": step, "config_hash": digest, "stage": "grpo"})

    result = posttrain(
        params, cfg.grpo.grpo_config(), reward, task_sampler(cfg.task), cfg.grpo.steps, cfg.seed,
        evaluator=evaluator, eval_interval=cfg.eval.eval_interval, on_step=on_step,
        keep_trajectories=dump_trajectories,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_resolved(cfg, out_dir)
        result.train_log.write(out_dir / "train_log.csv")
        result.eval_log.write(out_dir / "eval_log.csv")
        if len(timing):
            timing.write(out_dir / "wall_time.csv")
        emit_curves(result.eval_log, out_dir / "curves")
        save_checkpoint(out_dir / "grpo_final.ckpt", params, {"step": cfg.grpo.steps, "config_hash": digest, "stage": "grpo"})
        stds = {s.name: s.std for s in reward.active}
        (out_dir / "reward_stds.json").write_text(json.dumps(stds, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if dump_trajectories:
            tdir = out_dir / "trajectories"
            tdir.mkdir(exist_ok=True)
            for i, tr in enumerate(result.trajectories):
                (tdir / f"round{i:04d}.json").write_text(json.dumps(tr.to_dict()), encoding="utf-8")
    return result, reward


def evaluate(cfg: ExperimentConfig, params: ParamSet, n: int, seed: int | None = None) -> tuple[dict, dict]:
    """Fresh held-out conditions, all-ODE inference; returns (summary, per-sample scores)."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    seed = cfg.seed if seed is None else seed
    pairs = heldout_pairs(cfg, n, seed)
    reward = make_reward_model(cfg)
    x = sample_heldout(cfg, params, pairs, seed)
    raw = reward.raw_scores(x, pairs.c, pairs.x1)
    summary = {k: {"mean": float(np.mean(v)), "std": float(np.std(v))} for k, v in raw.items()}
    per_sample = {k: v.tolist() for k, v in raw.items()}
    per_sample["x"] = x.tolist()
    return summary, per_sample


def comparison_table(summaries: dict[str, dict]) -> str:
    names = list(summaries)
    metrics = list(next(iter(summaries.values())))
    lines = ["metric\t" + "\t".join(names)]
    for m in metrics:
        cells = [f"{summaries[n][m]['mean']:.6f}+-{summaries[n][m]['std']:.6f}" for n in names]
        lines.append(m + "\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- ablations

ABLATIONS = ("noise_level", "window", "single_vs_multi")


def ablation_arms(preset: str, cfg: ExperimentConfig) -> dict[str, dict]:
    """Config overrides per arm; every arm shares the base seed."""
    if preset == "noise_level":
        return {f"a{a}": {"grpo": {"noise_level": a}} for a in (0.2, 0.3, 0.4)}
    if preset == "window":
        return {
            "window": {"grpo": {"full_path": False, "window_size": 2, "s_min_range": [1, 3]}},
            "full_path": {"grpo": {"full_path": True}},
        }
    if preset == "single_vs_multi":
        single = {n: {"grpo": {"rewards": [{"name": n, "weight": 1.0}]}} for n in ("loglik", "similarity", "fidelity")}
        single["multi"] = {
            "grpo": {
                "rewards": [
                    {"name": "loglik", "weight": 0.6},
                    {"name": "similarity", "weight": 1.0},
                    {"name": "fidelity", "weight": 1.0},
                ]
            }
        }
        return single
    raise ConfigError(f"unknown ablation preset '{preset}'")


def run_ablation(
    preset: str,
    cfg: ExperimentConfig,
    base_params: ParamSet | None = None,
    out_dir: Path | None = None,
) -> dict[str, PosttrainResult]:
    arms = ablation_arms(preset, cfg)
    if base_params is None:
        base_params, _ = pretrain(cfg, None if out_dir is None else Path(out_dir) / "base")
    base = config_to_dict(cfg)
    results = {}
    for name, override in arms.items():
        arm_cfg = config_from_dict(merge(base, override))
        t0 = time.perf_counter()
        res, _ = run_grpo(arm_cfg, base_params.clone(), None if out_dir is None else Path(out_dir) / name)
        log.info("arm %s finished in %.1fs", name, time.perf_counter() - t0)
        results[name] = res
        if out_dir is not None:
            emit_curves(res.eval_log, Path(out_dir) / "curves", prefix=f"{name}.")
    return results


# ------------------------------------------------------------------ curves


def emit_curves(metric_log: MetricLog, out_dir, prefix: str = "") -> list[Path]:
    """One ``step,value`` file per metric column."""
    if len(metric_log) == 0:
        raise ValueError("cannot emit curves from an empty metric log")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for col in metric_log.columns:
        path = out_dir / f"{prefix}{col}.csv"
        body = "".join(f"{s},{v!r}\n" for s, v in zip(metric_log.steps, metric_log.column(col)))
        path.write_text("step,value\n" + body, encoding="utf-8")
        paths.append(path)
    return paths


def read_curve(path) -> tuple[list[int], list[float]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if lines[0] != "step,value":
        raise ValueError(f"{path}: not a curve file")
    steps, values = [], []
    for line in lines[1:]:
        s, v = line.split(",")
        steps.append(int(s))
        values.append(float(v))
    return steps, values


def load_params(path) -> tuple[ParamSet, dict]:
    return load_checkpoint(path)
