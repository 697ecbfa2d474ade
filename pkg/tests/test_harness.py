import json

import numpy as np
import pytest

from flowgrpo import cli
from flowgrpo import flow_matching as fm
from flowgrpo import harness as H
from flowgrpo.metrics import MetricLog
from flowgrpo.model import load_checkpoint
from flowgrpo.tasks import sample_pairs

MINI = {
    "task": {"kind": "circle2d", "sigma_c": 0.5},
    "model": {"data_dim": 2, "hidden_dim": 8, "num_layers": 1, "time_embed_dim": 2},
    "pretrain": {"steps": 40, "batch_size": 32, "warmup_steps": 5},
    "grpo": {"steps": 8, "G": 4, "prompts_per_round": 2, "repeats": 1, "batch_size": 4, "updates_per_iteration": 2,
             "calibration_groups": 4, "learning_rate": 0.003},
    "eval": {"n_heldout": 16, "eval_interval": 2},
    "seed": 3,
}


def mini(**over):
    return H.load_config(H.merge(MINI, over))


def test_unknown_keys_rejected_at_every_level():
    for bad in ({"extra": 1}, {"grpo": {"lr": 0.1}}, {"grpo": {"rewards": [{"name": "loglik", "lambda": 1}]}}):
        with pytest.raises(H.ConfigError, match="unknown key"):
            H.load_config(H.merge(MINI, bad))


def test_type_errors_rejected():
    for bad in ({"seed": "x"}, {"grpo": {"T_range": [7]}}, {"grpo": {"full_path": 1}}, {"model": {"hidden_dim": 0}}):
        with pytest.raises(H.ConfigError):
            H.load_config(H.merge(MINI, bad))


def test_resolved_config_materializes_defaults(tmp_path):
    cfg = H.load_config({"seed": 1})
    path = H.write_resolved(cfg, tmp_path)
    data = json.loads(path.read_text())
    assert data["grpo"]["T_range"] == [7, 10] and data["grpo"]["s_min_range"] == [1, 3]
    assert data["grpo"]["G"] == 8 and data["eval"]["inference_steps"] == 10
    assert H.load_config(str(path)) == cfg
    assert H.config_hash(H.load_config(str(path))) == H.config_hash(cfg)


def test_presets_load():
    for name in H.PRESETS:
        cfg = H.load_config(f"preset:{name}")
        assert cfg.model.data_dim == cfg.task.data_dim
    multi = H.load_config("preset:circle_multi")
    assert [(r.name, r.weight) for r in multi.grpo.rewards] == [("loglik", 0.6), ("similarity", 1.0), ("fidelity", 1.0)]
    with pytest.raises(H.ConfigError):
        H.load_config("preset:nope")


def test_rerun_from_resolved_config_is_bit_identical(tmp_path):
    cfg = mini()
    p1, l1 = H.pretrain(cfg, tmp_path / "a")
    r1, _ = H.run_grpo(cfg, p1, tmp_path / "a")
    cfg2 = H.load_config(str(tmp_path / "a" / "resolved_config.json"))
    p2, l2 = H.pretrain(cfg2, tmp_path / "b")
    r2, _ = H.run_grpo(cfg2, p2, tmp_path / "b")
    assert l1 == l2
    for name in ("pretrain_loss.csv", "train_log.csv", "eval_log.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert r1.params.equal(r2.params)


def test_pretrain_resume_continues_step_counter(tmp_path):
    cfg = mini()
    full, full_log = H.pretrain(cfg, tmp_path / "full")
    H.pretrain(cfg, tmp_path / "part", stop_step=15)
    _, meta = load_checkpoint(tmp_path / "part" / "pretrain.ckpt")
    assert meta["step"] == 15 and meta["config_hash"] == H.config_hash(cfg)
    resumed, tail = H.pretrain(cfg, tmp_path / "part", resume=tmp_path / "part" / "pretrain.ckpt")
    assert tail.steps[0] == 16 and tail.steps[-1] == 40
    assert resumed.equal(full)
    assert MetricLog.read(tmp_path / "part" / "pretrain_loss.csv") == full_log


def test_grpo_rejects_mismatched_checkpoint(tmp_path):
    cfg = mini()
    params, _ = H.pretrain(mini(model={"hidden_dim": 6}))
    with pytest.raises(H.CheckpointMismatch):
        H.check_compatible(cfg, params)


def test_eval_log_cadence_and_columns(tmp_path):
    cfg = mini(grpo={"rewards": [{"name": "loglik", "weight": 0.6}, {"name": "similarity"}, {"name": "fidelity"}]})
    params, _ = H.pretrain(cfg)
    res, reward = H.run_grpo(cfg, params, tmp_path)
    assert res.eval_log.steps == [0, 2, 4, 6, 8]
    assert res.eval_log.columns == ["loglik", "similarity", "fidelity", "reward"]
    assert len(res.train_log) == cfg.grpo.steps
    assert all(s.std is not None and s.std > 0 for s in reward.active)
    stds = json.loads((tmp_path / "reward_stds.json").read_text())
    assert set(stds) == {"loglik", "similarity", "fidelity"}
    assert MetricLog.read(tmp_path / "wall_time.csv").steps == list(range(1, 9))


def test_heldout_conditions_disjoint_from_training():
    cfg = mini()
    held = H.heldout_pairs(cfg).c
    gc = cfg.grpo.grpo_config()
    for round_index in range(5):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, round_index, 0]))
        from flowgrpo.grpo import sample_window

        sample_window(gc, rng)
        train = sample_pairs(cfg.task, gc.groups_per_round, rng).c
        assert not any(np.any(np.all(held == row, axis=1)) for row in train)


def test_evaluate_repeatable_and_loop_oracle():
    cfg = mini()
    params, _ = H.pretrain(cfg)
    s1, d1 = H.evaluate(cfg, params, 20)
    s2, _ = H.evaluate(cfg, params, 20)
    assert s1 == s2
    for name in ("loglik", "similarity", "fidelity"):
        vals = d1[name]
        total = 0.0
        for v in vals:
            total += v
        assert s1[name]["mean"] == pytest.approx(total / len(vals), rel=1e-12)
    with pytest.raises(H.ConfigError):
        H.evaluate(cfg, params, 0)
    table = H.comparison_table({"base": s1, "other": s2})
    assert table.splitlines()[0] == "metric\tbase\tother"


def test_emit_curves_roundtrip_and_empty(tmp_path):
    log = MetricLog(["a", "b"])
    for s in (0, 5, 10):
        log.append(s, {"a": s * 0.5, "b": -float(s)})
    paths = H.emit_curves(log, tmp_path, prefix="x.")
    assert [p.name for p in paths] == ["x.a.csv", "x.b.csv"]
    raw = paths[0].read_bytes()
    assert raw.endswith(b"\n") and b"\r" not in raw
    assert len(raw.decode().splitlines()) == len(log) + 1
    steps, values = H.read_curve(paths[0])
    assert steps == log.steps and values == log.column("a")
    with pytest.raises(ValueError):
        H.emit_curves(MetricLog(["a"]), tmp_path / "empty")
    assert not (tmp_path / "empty").exists()


def test_ablation_noise_level_emits_aligned_logs(tmp_path):
    cfg = mini()
    results = H.run_ablation("noise_level", cfg, out_dir=tmp_path)
    assert list(results) == ["a0.2", "a0.3", "a0.4"]
    steps = {tuple(r.eval_log.steps) for r in results.values()}
    assert len(steps) == 1
    (shared,) = steps
    for arm in results:
        assert H.read_curve(tmp_path / "curves" / f"{arm}.loglik.csv")[0] == list(shared)
    with pytest.raises(H.ConfigError):
        H.ablation_arms("bogus", cfg)


def test_ablation_arm_definitions():
    cfg = mini()
    win = H.ablation_arms("window", cfg)
    assert win["window"]["grpo"]["window_size"] == 2 and win["full_path"]["grpo"]["full_path"] is True
    svm = H.ablation_arms("single_vs_multi", cfg)
    assert set(svm) == {"loglik", "similarity", "fidelity", "multi"}


def test_gauss1d_preset_reaches_analytic_residual():
    cfg = H.load_config("preset:gauss1d")
    params, _ = H.pretrain(cfg)
    rng = np.random.default_rng(12345)
    batch, c = fm.make_batch(cfg.task, 200_000, rng, cfg.model.cond_dropout_prob)
    loss = fm.fm_loss(params, batch, c).item()
    floor = fm.gaussian_fm_residual(cfg.task.sigma1)
    assert floor <= loss * 1.01 and loss <= 1.10 * floor


# --------------------------------------------------------------------- CLI


def _write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def test_cli_pipeline(tmp_path, capsys):
    cfg = _write(tmp_path, MINI)
    assert cli.main(["pretrain", "--config", cfg, "--out", str(tmp_path / "pre")]) == 0
    ckpt = str(tmp_path / "pre" / "pretrain.ckpt")
    assert cli.main(["grpo", "--config", cfg, "--init", ckpt, "--out", str(tmp_path / "g"), "--dump-trajectories"]) == 0
    assert (tmp_path / "g" / "curves" / "loglik.csv").exists()
    dumps = sorted((tmp_path / "g" / "trajectories").iterdir())
    assert dumps and json.loads(dumps[0].read_text())["format"] == "flowgrpo-trajectory/1"
    capsys.readouterr()
    assert cli.main(["eval", "--ckpt", str(tmp_path / "g" / "grpo_final.ckpt"), "--compare", ckpt,
                     "--config", cfg, "--n", "8", "--out", str(tmp_path / "e")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "metric\tgrpo_final.ckpt\tpretrain.ckpt"
    assert json.loads((tmp_path / "e" / "eval_summary.json").read_text())["pretrain.ckpt"]["loglik"]["std"] >= 0


def test_cli_seed_override_changes_resolved_config(tmp_path):
    cfg = _write(tmp_path, MINI)
    assert cli.main(["pretrain", "--config", cfg, "--out", str(tmp_path / "p"), "--seed", "11"]) == 0
    assert json.loads((tmp_path / "p" / "resolved_config.json").read_text())["seed"] == 11


@pytest.mark.parametrize(
    "argv,code,status",
    [
        (["pretrain", "--config", "/no/such.json"], "CONFIG_INVALID", 2),
        (["grpo", "--config", "{cfg}", "--init", "/no/such.ckpt"], "NOT_FOUND", 5),
        (["ablate", "--preset", "bogus", "--config", "{cfg}"], "CONFIG_INVALID", 2),
        (["eval", "--ckpt", "{junk}", "--config", "{cfg}", "--n", "2"], "CHECKPOINT_INVALID", 4),
        (["pretrain", "--config", "{bad}"], "CONFIG_INVALID", 2),
    ],
)
def test_cli_errors_are_one_parsable_line(tmp_path, capsys, argv, code, status):
    cfg = _write(tmp_path, MINI)
    bad = _write(tmp_path, {**MINI, "oops": True}, "bad.json")
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"garbage")
    argv = [a.format(cfg=cfg, bad=bad, junk=junk) for a in argv]
    assert cli.main(argv) == status
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(f"error: {code}: ")


def test_cli_checkpoint_mismatch(tmp_path, capsys):
    cfg = _write(tmp_path, MINI)
    other = _write(tmp_path, H.merge(MINI, {"model": {"hidden_dim": 5}}), "other.json")
    assert cli.main(["pretrain", "--config", other, "--out", str(tmp_path / "o")]) == 0
    capsys.readouterr()
    assert cli.main(["grpo", "--config", cfg, "--init", str(tmp_path / "o" / "pretrain.ckpt")]) == 3
    assert capsys.readouterr().err.startswith("error: CHECKPOINT_MISMATCH: ")


def test_mixture_config_roundtrip(tmp_path):
    cfg = H.load_config({"task": {"kind": "mixture", "components": [[0.4, [0, 1], 0.5], [0.6, [1, 0], 0.3]]}})
    assert cfg.task.components == ((0.4, (0.0, 1.0), 0.5), (0.6, (1.0, 0.0), 0.3))
    assert H.load_config(str(H.write_resolved(cfg, tmp_path))) == cfg
    with pytest.raises(H.ConfigError):
        H.load_config({"task": {"kind": "mixture", "components": [[0.4, 1]]}})
