import csv
import dataclasses
import json
import math

import numpy as np
import pytest
from sklearn.base import clone

from fixtures import curve_records, reacher_fixture
from repaint.cli import main
from repaint.estimators import PPOAgent, RepaintAgent
from repaint.harness import (
    ConfigError,
    ExperimentConfig,
    compare_selection_rules,
    compute_report,
    config_from_dict,
    iterations_to_target,
    load_config,
    load_run_records,
    parse_config_text,
    parse_rule,
    run_experiment,
    train_teacher,
)
from repaint.approximator import PolicyNetwork, load_checkpoint
from repaint.ppo import PpoConfig
from repaint.transfer import BetaSchedule, Threshold, TopFraction

TINY = """
task.env = goal-reacher-1d
task.student_weights = [1, -1, 1]
task.teacher_weights = [1, -0.3, 1]
experiment.arm = baseline
experiment.iterations = 2
experiment.eval_episodes = 3
experiment.seeds = [0, 1]
ppo.rollout_steps = 64
ppo.epochs = 2
ppo.minibatch_size = 32
ppo.hidden_sizes = [8]
teacher.iterations = 2
transfer.zeta = 0.0
"""


def tiny_cfg(tmp_path, **changes):
    cfg = config_from_dict(parse_config_text(TINY))
    return dataclasses.replace(cfg, out=str(tmp_path), **changes)


# ---------------------------------------------------------------- config


def test_config_parsing():
    cfg = config_from_dict(parse_config_text(TINY))
    assert cfg.env_id == "goal-reacher-1d"
    assert cfg.seeds == (0, 1)
    assert cfg.ppo.hidden_sizes == (8,)
    assert cfg.transfer.selection == Threshold(0.0)
    assert cfg.n_eval_episodes == 3


def test_default_eval_episodes():
    assert ExperimentConfig().n_eval_episodes == 20
    assert ExperimentConfig(env_id="lane-grid", student_weights=(1, 0, 0, -1)).n_eval_episodes == 5


def test_unknown_key_is_an_error():
    with pytest.raises(ConfigError, match="unknown config keys"):
        parse_config_text("transfer.zetta = 0.8\n")


def test_malformed_config():
    with pytest.raises(ConfigError):
        parse_config_text("just some words\n")
    with pytest.raises(ConfigError):
        config_from_dict(parse_config_text("experiment.iterations = 0\n"))
    with pytest.raises(ConfigError):
        config_from_dict(parse_config_text('task.student_weights = [1, 2]\n'))
    with pytest.raises(ConfigError):
        config_from_dict(parse_config_text("experiment.arm = distill\n"))


def test_baseline_forbids_teacher_checkpoint():
    with pytest.raises(ConfigError):
        ExperimentConfig(arm="baseline", teacher_checkpoint="t.json")
    cfg = ExperimentConfig(arm="ks", teacher_checkpoint="t.json")
    assert cfg.with_arm("baseline").teacher_checkpoint is None


def test_warm_start_copies_teacher(tmp_path):
    cfg = tiny_cfg(tmp_path, iterations=1, seeds=(0,))
    path = tmp_path / "t.json"
    teacher = train_teacher(cfg.teacher_task(), cfg.ppo, 5, 1, path)
    warm = dataclasses.replace(cfg.with_arm("ks"), teacher_checkpoint=str(path), warm_start=True,
                               ppo=dataclasses.replace(cfg.ppo, actor_lr=0.0),
                               transfer=dataclasses.replace(cfg.transfer, betas=(BetaSchedule(0.0),)))
    run_experiment(warm)
    final, _ = load_checkpoint(tmp_path / "ks" / "policy_seed_0.json")
    assert final.params.values.tobytes() == teacher.params.values.tobytes()
    with pytest.raises(ConfigError):
        dataclasses.replace(cfg, warm_start=True)
    assert warm.with_arm("baseline").warm_start is False


def test_preset_then_overrides():
    flat = parse_config_text("experiment.preset = reacher\ntransfer.zeta = 0.5\nppo.rollout_steps = 256\n")
    cfg = config_from_dict(flat)
    assert cfg.transfer.selection == Threshold(0.5)
    assert cfg.transfer.repaint_iterations == 15
    assert cfg.ppo.rollout_steps == 256 and cfg.ppo.actor_lr == 3e-4


def test_episode_budget_override():
    cfg = config_from_dict(parse_config_text("ppo.rollout_episodes = 4\n"))
    assert cfg.ppo.rollout_steps is None and cfg.ppo.rollout_episodes == 4


def test_arm_transfer_schedules():
    cfg = ExperimentConfig(transfer=dataclasses.replace(ExperimentConfig().transfer, schedule="combined"))
    assert cfg.with_arm("ks").arm_transfer().ins_steps == 0
    assert cfg.with_arm("it").arm_transfer().rep_steps == 0
    assert cfg.with_arm("repaint").arm_transfer().schedule == "combined"


def test_parse_rule():
    assert parse_rule("threshold:0.8") == Threshold(0.8)
    assert parse_rule("top_fraction:0.2") == TopFraction(0.2)
    with pytest.raises(ConfigError):
        parse_rule("best:1")


# ---------------------------------------------------------------- report arithmetic


def test_report_identical_arm_zero_reduction():
    c = {0: [0.1, 0.5, 0.4], 1: [0.2, 0.3, 0.9]}
    rep = compute_report({"baseline": curve_records(c), "repaint": curve_records(c)})
    assert rep.arms["repaint"].reduction == 0.0


def test_report_definition_arithmetic():
    rep = compute_report({"baseline": curve_records({0: [1, 2, 3]}), "repaint": curve_records({0: [3, 3, 3]})})
    assert rep.target_score == 3
    assert rep.arms["baseline"].K == 3
    assert rep.arms["repaint"].K == 1
    assert rep.arms["repaint"].reduction == pytest.approx(2 / 3)


def test_reacher_fixture_reduction_label():
    records = reacher_fixture()
    rep = compute_report(records)
    assert rep.arms["baseline"].K == 173
    assert rep.arms["repaint"].K == 42
    assert rep.to_dict()["arms"]["repaint"]["percent_reduction_label"] == "76%"


def test_not_achieved_and_missing_baseline():
    records = {"baseline": curve_records({0: [1, 2, 3]}), "ks": curve_records({0: [0, 0, 1]})}
    rep = compute_report(records)
    assert rep.arms["ks"].K is None
    assert rep.to_dict()["arms"]["ks"]["K"] == "Not achieved"
    assert rep.to_dict()["arms"]["ks"]["percent_reduction_label"] == "Not achieved"
    with pytest.raises(ValueError):
        compute_report({"ks": records["ks"]})
    assert compute_report({"ks": records["ks"]}, target_score=0.5).arms["ks"].K == 3


def test_iterations_to_target():
    assert iterations_to_target([0, 1, 2], 1) == 2
    assert iterations_to_target([0, 1, 2], 5) is None


# ---------------------------------------------------------------- runs


def test_baseline_one_iteration_one_row(tmp_path):
    cfg = tiny_cfg(tmp_path, iterations=1, seeds=(0,))
    run_experiment(cfg)
    rows = (tmp_path / "baseline" / "seed_0.csv").read_text().splitlines()
    assert rows[0] == "iteration,seed,mean_return,aux_metric,wall_ms"
    assert len(rows) == 2


def test_rerun_gives_identical_bytes(tmp_path):
    for name in ("a", "b"):
        run_experiment(tiny_cfg(tmp_path / name))
    for seed in (0, 1):
        a = (tmp_path / "a" / "baseline" / f"seed_{seed}.csv").read_bytes()
        b = (tmp_path / "b" / "baseline" / f"seed_{seed}.csv").read_bytes()
        assert a == b


def test_ks_with_zero_beta_matches_baseline(tmp_path):
    cfg = tiny_cfg(tmp_path)
    teacher_path = tmp_path / "teacher.json"
    train_teacher(cfg.teacher_task(), cfg.ppo, 5, 1, teacher_path)
    run_experiment(cfg)
    zero = dataclasses.replace(
        cfg.with_arm("ks"),
        teacher_checkpoint=str(teacher_path),
        transfer=dataclasses.replace(cfg.transfer, betas=(dataclasses.replace(cfg.transfer.betas[0], beta0=0.0),)),
    )
    run_experiment(zero)
    for seed in (0, 1):
        assert (tmp_path / "ks" / f"seed_{seed}.csv").read_bytes() == (
            tmp_path / "baseline" / f"seed_{seed}.csv"
        ).read_bytes()


def test_report_recomputable_from_csv(tmp_path):
    cfg = tiny_cfg(tmp_path, iterations=3)
    teacher_path = tmp_path / "teacher.json"
    train_teacher(cfg.teacher_task(), cfg.ppo, 5, 1, teacher_path)
    run_experiment(cfg)
    run_experiment(dataclasses.replace(cfg.with_arm("repaint"), teacher_checkpoint=str(teacher_path)))
    rep = compute_report(load_run_records(tmp_path))

    # independent recomputation with the csv module only
    def mean_curve(arm):
        scores = {}
        for seed in (0, 1):
            with open(tmp_path / arm / f"seed_{seed}.csv") as fh:
                for row in csv.DictReader(fh):
                    scores.setdefault(int(row["iteration"]), []).append(float(row["mean_return"]))
        return [sum(v) / len(v) for _, v in sorted(scores.items())]

    base, arm = mean_curve("baseline"), mean_curve("repaint")
    target = max(base)
    assert rep.target_score == target
    k_b = next(i + 1 for i, v in enumerate(base) if v >= target)
    k_a = next((i + 1 for i, v in enumerate(arm) if v >= target), None)
    assert rep.arms["baseline"].K == k_b and rep.arms["repaint"].K == k_a
    if k_a is not None:
        assert rep.arms["repaint"].reduction == (k_b - k_a) / k_b
    assert rep.arms["repaint"].best_score == max(arm)


def test_non_baseline_arm_needs_loadable_teacher(tmp_path):
    with pytest.raises(ConfigError):
        run_experiment(tiny_cfg(tmp_path, arm="ks"))
    with pytest.raises(ValueError):
        run_experiment(tiny_cfg(tmp_path, arm="ks", teacher_checkpoint=str(tmp_path / "missing.json")))


def test_teacher_for_wrong_environment_rejected(tmp_path):
    other = ExperimentConfig(env_id="lane-grid", student_weights=(1, 0, 0, -1))
    train_teacher(other.student_task(), PpoConfig(rollout_steps=32, hidden_sizes=(4,)), 0, 0, tmp_path / "t.json")
    with pytest.raises(ConfigError):
        run_experiment(tiny_cfg(tmp_path, arm="repaint", teacher_checkpoint=str(tmp_path / "t.json")))


def test_train_teacher_zero_iterations_is_initialisation(tmp_path):
    cfg = tiny_cfg(tmp_path)
    net = train_teacher(cfg.teacher_task(), cfg.ppo, 3, 0, tmp_path / "t.json")
    fresh = PolicyNetwork(2, n_actions=5, hidden_sizes=(8,), seed=3)
    assert net.params.values.tobytes() == fresh.params.values.tobytes()
    loaded, meta = load_checkpoint(tmp_path / "t.json")
    x = np.random.default_rng(0).normal(size=(4, 2))
    assert loaded.distribution(x).probs.tobytes() == net.distribution(x).probs.tobytes()
    assert meta["task"]["weights"] == [1.0, -0.3, 1.0]


def test_compare_rules(tmp_path):
    cfg = tiny_cfg(tmp_path)
    teacher_path = tmp_path / "teacher.json"
    train_teacher(cfg.teacher_task(), cfg.ppo, 5, 1, teacher_path)
    rcfg = dataclasses.replace(cfg.with_arm("repaint"), teacher_checkpoint=str(teacher_path))
    res = compare_selection_rules(rcfg, [Threshold(-math.inf), TopFraction(1.0)])
    a, b = res["threshold(-inf)"], res["top_fraction(1)"]
    assert [r.mean_return for r in a[0]] == [r.mean_return for r in b[0]]
    lines = (tmp_path / "rules.csv").read_text().splitlines()
    assert lines[0] == "iteration,seed,rule,mean_return,aux_metric"
    assert len(lines) == 1 + 2 * 2 * 2

    single = compare_selection_rules(dataclasses.replace(rcfg, out=str(tmp_path / "one")), [Threshold(0.0)])
    direct = run_experiment(dataclasses.replace(rcfg, out=str(tmp_path / "direct")))
    assert single["threshold(0)"] == direct
    with pytest.raises(ConfigError):
        compare_selection_rules(tiny_cfg(tmp_path), [Threshold(0.0)])


# ---------------------------------------------------------------- CLI


def test_cli_end_to_end(tmp_path, capsys):
    config = tmp_path / "exp.cfg"
    config.write_text(TINY)
    out = tmp_path / "run"
    assert main(["train-teacher", "--config", str(config), "--seed", "7", "--out", str(out)]) == 0
    teacher = out / "teacher_seed_7.json"
    assert teacher.exists()
    assert main(["run", "--config", str(config), "--seeds", "0,1", "--out", str(out)]) == 0
    config.write_text(TINY.replace("experiment.arm = baseline\n", "") + f"teacher.checkpoint = {json.dumps(str(teacher))}\n")
    assert main(["run", "--config", str(config), "--arm", "repaint", "--out", str(out)]) == 0
    assert main(["run", "--config", str(config), "--arm", "baseline", "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    assert main(["report", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["arms"]) == {"baseline", "repaint"}
    assert main(["compare-rules", "--config", str(config), "--arm", "repaint", "--rules",
                 "threshold:0.0,top_fraction:0.5", "--seed", "0", "--out", str(tmp_path / "rules")]) == 0
    assert main(["describe-env", "avoid-grid"]) == 0
    assert "collision" in capsys.readouterr().out


def test_cli_config_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("experiment.arms = baseline\n")
    assert main(["run", "--config", str(bad)]) != 0
    assert "unknown config keys" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "nope.cfg")]) != 0
    good = tmp_path / "good.cfg"
    good.write_text(TINY)
    assert main(["run", "--config", str(good), "--arm", "ks", "--out", str(tmp_path)]) != 0
    assert main(["describe-env", "mujoco"]) != 0
    with pytest.raises(SystemExit) as exc:
        main(["run", "--config", str(good), "--seeds", "a,b"])
    assert exc.value.code != 0


def test_load_config_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nexperiment.iterations = 4\ntransfer.selection = top_fraction\ntransfer.top_fraction = 0.3\n")
    cfg = load_config(p)
    assert cfg.iterations == 4 and cfg.transfer.selection == TopFraction(0.3)


# ---------------------------------------------------------------- estimators


def test_estimator_params_and_clone():
    est = RepaintAgent(beta0=0.1, iterations=3)
    params = est.get_params()
    assert params["beta0"] == 0.1 and params["iterations"] == 3 and "teacher" in params
    assert clone(est).get_params()["beta0"] == 0.1
    assert PPOAgent().set_params(learning_rate=0.01).learning_rate == 0.01


def test_estimator_fit_predict_score():
    kw = dict(iterations=2, rollout_steps=64, epochs=2, hidden_sizes=(8,))
    teacher = PPOAgent(weights=(1, -0.3, 1), random_state=1, **kw).fit()
    student = RepaintAgent(teacher=teacher, selection=Threshold(0.0), **kw).fit()
    x = np.array([[0.0, 0.5], [0.3, -0.2]])
    assert student.predict(x).shape == (2,)
    np.testing.assert_allclose(student.predict_proba(x).sum(axis=1), 1.0)
    assert np.isfinite(student.score(episodes=3))
    assert len(student.history_) == 2
    with pytest.raises(ValueError):
        student.predict([[0.0, 0.1, 0.2]])


def test_unfitted_estimator_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        PPOAgent().predict([[0.0, 0.0]])
