"""Experiment harness: config files, multi-seed runs for each arm, evaluation CSVs and reports."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._validation import ContractError
from .approximator import PolicyNetwork, load_checkpoint, save_checkpoint
from .envs import ENVIRONMENTS, TaskSpec, cosine_similarity, make_env, make_task
from .ppo import ActorCritic, PpoConfig, ppo_iteration
from .rollout import evaluate
from .transfer import (
    SELECTION_RULES,
    AbsThreshold,
    BetaSchedule,
    Prioritized,
    TeacherPolicy,
    Threshold,
    TopFraction,
    TransferConfig,
    preset,
    transfer_iteration,
)

ARMS = ("baseline", "ks", "it", "repaint")
CSV_COLUMNS = ("iteration", "seed", "mean_return", "aux_metric", "wall_ms")
NOT_ACHIEVED = "Not achieved"
REACHER_CLASS = ("goal-reacher-1d", "goal-reacher-2d", "goal-reacher-1d-continuous", "goal-reacher-2d-continuous")


class ConfigError(ContractError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    env_id: str = "goal-reacher-1d"
    student_weights: tuple = (1.0, -1.0, 1.0)
    teacher_weights: tuple | None = None
    teacher_checkpoint: str | None = None
    teacher_iterations: int = 80
    teacher_seed: int = 100
    warm_start: bool = False
    gamma: float = 0.99
    horizon: int | None = None
    arm: str = "baseline"
    ppo: PpoConfig = field(default_factory=PpoConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    iterations: int = 30
    eval_episodes: int | None = None
    eval_deterministic: bool = False
    seeds: tuple = (0,)
    out: str = "runs"
    timing: bool = False

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "student_weights", tuple(float(w) for w in self.student_weights))
        if self.teacher_weights is not None:
            object.__setattr__(self, "teacher_weights", tuple(float(w) for w in self.teacher_weights))
        if self.env_id not in ENVIRONMENTS:
            raise ConfigError(f"unknown environment {self.env_id!r}")
        if self.arm not in ARMS:
            raise ConfigError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.eval_episodes is not None and self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be at least 1")
        if self.teacher_iterations < 0:
            raise ConfigError("teacher iterations must be non-negative")
        if self.arm == "baseline" and self.teacher_checkpoint is not None:
            raise ConfigError("the baseline arm must not reference a teacher checkpoint")
        if self.arm == "baseline" and self.warm_start:
            raise ConfigError("the baseline arm cannot warm-start from a teacher")
        try:
            self.student_task()
            if self.teacher_weights is not None:
                self.teacher_task()
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def n_eval_episodes(self):
        if self.eval_episodes is not None:
            return self.eval_episodes
        return 20 if self.env_id in REACHER_CLASS else 5

    def student_task(self) -> TaskSpec:
        return make_task(self.env_id, self.student_weights, gamma=self.gamma, horizon=self.horizon)

    def teacher_task(self) -> TaskSpec:
        if self.teacher_weights is None:
            raise ConfigError("task.teacher_weights is not set")
        return make_task(self.env_id, self.teacher_weights, gamma=self.gamma, horizon=self.horizon)

    def with_arm(self, arm):
        """Copy for another arm; switching to baseline drops the teacher checkpoint."""
        if arm == "baseline":
            return dataclasses.replace(self, arm=arm, teacher_checkpoint=None, warm_start=False)
        return dataclasses.replace(self, arm=arm)

    def arm_transfer(self) -> TransferConfig:
        """Transfer settings realised by this arm.

        ks runs representation slots only, it runs instance slots only, and
        repaint uses the configured schedule.
        """
        t = self.transfer
        if self.arm == "ks":
            return dataclasses.replace(t, schedule="alternating", rep_steps=1, ins_steps=0)
        if self.arm == "it":
            return dataclasses.replace(t, schedule="alternating", rep_steps=0, ins_steps=1)
        return t

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name not in ("ppo", "transfer")}
        d["ppo"] = dataclasses.asdict(self.ppo)
        d["transfer"] = transfer_to_dict(self.transfer)
        return json.loads(json.dumps(d))


def transfer_to_dict(t: TransferConfig):
    rule = t.selection
    return {
        "betas": [[b.beta0, b.decay] for b in t.betas],
        "selection": type(rule).__name__,
        "selection_params": list(rule),
        "alpha_rep": t.alpha_rep,
        "alpha_ins": t.alpha_ins,
        "schedule": t.schedule,
        "rep_steps": t.rep_steps,
        "ins_steps": t.ins_steps,
        "repaint_iterations": t.repaint_iterations,
        "teacher_rollout_steps": t.teacher_rollout_steps,
        "teacher_rollout_episodes": t.teacher_rollout_episodes,
        "teacher_gae_lambda": t.teacher_gae_lambda,
    }


# ------------------------------------------------------------------ config files

_TOP_KEYS = {
    "experiment.arm": "arm",
    "experiment.iterations": "iterations",
    "experiment.eval_episodes": "eval_episodes",
    "experiment.eval_deterministic": "eval_deterministic",
    "experiment.seeds": "seeds",
    "experiment.out": "out",
    "experiment.timing": "timing",
    "task.env": "env_id",
    "task.student_weights": "student_weights",
    "task.teacher_weights": "teacher_weights",
    "task.gamma": "gamma",
    "task.horizon": "horizon",
    "teacher.checkpoint": "teacher_checkpoint",
    "teacher.iterations": "teacher_iterations",
    "teacher.seed": "teacher_seed",
    "teacher.warm_start": "warm_start",
}
_PPO_KEYS = {f.name for f in dataclasses.fields(PpoConfig)}
_TRANSFER_KEYS = {
    "beta0", "beta_decay", "selection", "zeta", "top_fraction", "priority_exponent", "priority_samples",
    "alpha_rep", "alpha_ins", "schedule", "rep_steps", "ins_steps", "repaint_iterations",
    "teacher_rollout_steps", "teacher_rollout_episodes", "teacher_gae_lambda",
}
CONFIG_KEYS = sorted(
    ["experiment.preset", *_TOP_KEYS, *(f"ppo.{k}" for k in _PPO_KEYS), *(f"transfer.{k}" for k in _TRANSFER_KEYS)]
)


def _decode(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip().strip('"')


def parse_config_text(text):
    """``key = value`` lines with dotted keys; values are JSON or bare strings. Returns a flat dict."""
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[root]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    flat = {k: _decode(v) for k, v in parser["root"].items()}
    unknown = sorted(set(flat) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return flat


def selection_from_values(name, values):
    """Build a selection rule from its name and the transfer.* values that parameterise it."""
    if name not in SELECTION_RULES:
        raise ConfigError(f"unknown selection rule {name!r}; choose from {sorted(SELECTION_RULES)}")
    if name == "threshold":
        return Threshold(float(values.get("zeta", 0.8)))
    if name == "abs_threshold":
        return AbsThreshold(float(values.get("zeta", 0.8)))
    if name == "top_fraction":
        return TopFraction(float(values.get("top_fraction", 0.2)))
    samples = values.get("priority_samples")
    return Prioritized(float(values.get("priority_exponent", 0.6)), None if samples is None else int(samples))


def config_from_dict(flat):
    """ExperimentConfig from a flat dotted-key mapping (as produced by :func:`parse_config_text`)."""
    unknown = sorted(set(flat) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        ppo_kw, transfer_kw, gamma = {}, {}, None
        if "experiment.preset" in flat:
            ppo_cfg, tcfg, gamma = preset(flat["experiment.preset"])
            ppo_kw = dataclasses.asdict(ppo_cfg)
            transfer_kw = {f.name: getattr(tcfg, f.name) for f in dataclasses.fields(tcfg)}
        for key, value in flat.items():
            if key.startswith("ppo."):
                name = key[4:]
                if name in ("rollout_steps", "rollout_episodes") and value is not None:
                    other = "rollout_episodes" if name == "rollout_steps" else "rollout_steps"
                    if f"ppo.{other}" not in flat:
                        ppo_kw[other] = None
                ppo_kw[name] = tuple(value) if name == "hidden_sizes" else value
        tvals = {k[9:]: v for k, v in flat.items() if k.startswith("transfer.")}
        base_beta = transfer_kw.get("betas", (BetaSchedule(),))[0]
        beta = BetaSchedule(float(tvals.get("beta0", base_beta.beta0)), float(tvals.get("beta_decay", base_beta.decay)))
        transfer_kw["betas"] = (beta,)
        if "selection" in tvals or {"zeta", "top_fraction", "priority_exponent", "priority_samples"} & set(tvals):
            name = tvals.get("selection", "threshold")
            transfer_kw["selection"] = selection_from_values(name, tvals)
        for name in ("alpha_rep", "alpha_ins", "schedule", "rep_steps", "ins_steps", "repaint_iterations",
                     "teacher_rollout_steps", "teacher_rollout_episodes", "teacher_gae_lambda"):
            if name in tvals:
                transfer_kw[name] = tvals[name]
        top = {_TOP_KEYS[k]: v for k, v in flat.items() if k in _TOP_KEYS}
        if gamma is not None and "gamma" not in top:
            top["gamma"] = gamma
        return ExperimentConfig(ppo=PpoConfig(**ppo_kw), transfer=TransferConfig(**transfer_kw), **top)
    except ConfigError:
        raise
    except (ContractError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(parse_config_text(text))


# ------------------------------------------------------------------ records


class EvalRecord(NamedTuple):
    iteration: int
    seed: int
    mean_return: float
    aux_metric: float
    wall_ms: int


def eval_seeds(seed, k, n):
    """Reset seeds for the evaluation after iteration ``k``; shared by every arm."""
    return [int(x) for x in np.random.SeedSequence([int(seed), int(k), 0xE7A1]).generate_state(n)]


def evaluate_iteration(policy, env, cfg: ExperimentConfig, seed, k):
    rng = None if cfg.eval_deterministic else np.random.default_rng([int(seed), int(k), 0xE7A2])
    n = cfg.n_eval_episodes
    return evaluate(policy, env, n, eval_seeds(seed, k, n), deterministic=cfg.eval_deterministic, rng=rng)


def write_records(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.iteration, r.seed, repr(float(r.mean_return)), repr(float(r.aux_metric)), int(r.wall_ms)])
    return path


def read_records(path):
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ContractError(f"{path} does not have the columns {','.join(CSV_COLUMNS)}")
        return [
            EvalRecord(int(r["iteration"]), int(r["seed"]), float(r["mean_return"]), float(r["aux_metric"]),
                       int(r["wall_ms"]))
            for r in reader
        ]


def load_run_records(out_dir):
    """``{arm: [EvalRecord, ...]}`` from ``<out>/<arm>/seed_*.csv``."""
    out_dir = Path(out_dir)
    records = {}
    for arm in ARMS:
        files = sorted((out_dir / arm).glob("seed_*.csv"))
        if files:
            records[arm] = [r for f in files for r in read_records(f)]
    if not records:
        raise ContractError(f"no evaluation CSVs under {out_dir}")
    return records


# ------------------------------------------------------------------ training


def train_teacher(spec: TaskSpec, ppo_cfg: PpoConfig, seed, iterations, path=None):
    """Baseline PPO on the teacher task. Returns the trained policy (and saves it when ``path`` is given)."""
    if iterations < 0:
        raise ContractError("iterations must be non-negative")
    env = make_env(spec)
    agent = ActorCritic.create(env, ppo_cfg, seed=seed)
    for k in range(1, iterations + 1):
        ppo_iteration(agent, env, ppo_cfg, seed, k)
    if path is not None:
        meta = {"task": spec.to_dict(), "iterations": int(iterations), "seed": int(seed), "role": "teacher"}
        save_checkpoint(agent.actor, path, metadata=meta)
    return agent.actor


def load_teacher(path, student: TaskSpec):
    """Teacher policy from a checkpoint, checked against the student's environment."""
    net, meta = load_checkpoint(path)
    if not isinstance(net, PolicyNetwork):
        raise ConfigError(f"{path} does not hold a policy network")
    env = make_env(student)
    if net.obs_dim != env.obs_dim or (net.head == "gaussian") != env.continuous:
        raise ConfigError(f"teacher in {path} does not fit environment {student.env_id!r}")
    task = meta.get("task")
    if task and task.get("env_id") != student.env_id:
        raise ConfigError(f"teacher in {path} was trained on {task.get('env_id')!r}, not {student.env_id!r}")
    return TeacherPolicy(net, teacher_id=str(path)), meta


_TRAIN_COLUMNS = ("iteration", "slot", "mean_return", "value_loss", "objective", "kl", "entropy", "beta",
                  "n_teacher", "n_selected", "F")


def run_seed(cfg: ExperimentConfig, seed, teachers=None, out_dir=None):
    """Train one seed of ``cfg.arm``; returns ``(eval_records, train_metrics, agent)``."""
    env = make_env(cfg.student_task())
    if cfg.arm != "baseline" and not teachers:
        raise ConfigError(f"arm {cfg.arm!r} needs a teacher")
    tcfg = cfg.arm_transfer()
    start_from = teachers[0].network if cfg.warm_start and teachers else None
    agent = ActorCritic.create(env, cfg.ppo, seed=seed, actor=start_from)
    records, metrics = [], []
    for k in range(1, cfg.iterations + 1):
        start = time.perf_counter()
        if cfg.arm == "baseline":
            m = ppo_iteration(agent, env, cfg.ppo, seed, k)
        else:
            m = transfer_iteration(agent, env, teachers, cfg.ppo, tcfg, k, seed)
        wall = int(round((time.perf_counter() - start) * 1000)) if cfg.timing else 0
        mean_return, aux = evaluate_iteration(agent.actor, env, cfg, seed, k)
        records.append(EvalRecord(k, int(seed), mean_return, aux, wall))
        metrics.append({"iteration": k, **m})
    if out_dir is not None:
        arm_dir = Path(out_dir) / cfg.arm
        write_records(arm_dir / f"seed_{seed}.csv", records)
        with (arm_dir / f"train_seed_{seed}.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=_TRAIN_COLUMNS, extrasaction="ignore", restval="", lineterminator="\n")
            w.writeheader()
            w.writerows(metrics)
        save_checkpoint(agent.actor, arm_dir / f"policy_seed_{seed}.json", metadata={"arm": cfg.arm, "seed": seed})
    return records, metrics, agent


def run_experiment(cfg: ExperimentConfig, teachers=None, write=True):
    """Run every seed of ``cfg`` and return ``{seed: [EvalRecord, ...]}``.

    Non-baseline arms load ``cfg.teacher_checkpoint`` unless ``teachers`` is given.
    """
    if cfg.arm != "baseline" and teachers is None:
        if cfg.teacher_checkpoint is None:
            raise ConfigError(f"arm {cfg.arm!r} needs teacher.checkpoint")
        teachers = [load_teacher(cfg.teacher_checkpoint, cfg.student_task())[0]]
    if cfg.arm == "baseline":
        teachers = None
    out = Path(cfg.out) if write else None
    if out is not None:
        (out / cfg.arm).mkdir(parents=True, exist_ok=True)
        (out / cfg.arm / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return {seed: run_seed(cfg, seed, teachers, out)[0] for seed in cfg.seeds}


# ------------------------------------------------------------------ reports


def seed_curves(records):
    """``{seed: array of mean_return by iteration}`` from a flat record list."""
    by_seed = {}
    for r in records:
        by_seed.setdefault(r.seed, {})[r.iteration] = r.mean_return
    curves = {}
    for seed, points in sorted(by_seed.items()):
        its = sorted(points)
        if its != list(range(1, len(its) + 1)):
            raise ContractError(f"seed {seed} is missing iterations")
        curves[seed] = np.array([points[i] for i in its])
    return curves


def averaged_curve(records):
    curves = seed_curves(records)
    lengths = {len(c) for c in curves.values()}
    if len(lengths) != 1:
        raise ContractError("seeds have different numbers of iterations")
    return np.mean(np.stack(list(curves.values())), axis=0)


def iterations_to_target(curve, target):
    """First 1-based iteration with score >= target, or None."""
    hits = np.flatnonzero(np.asarray(curve) >= target)
    return int(hits[0]) + 1 if len(hits) else None


def percent_reduction(k_baseline, k_arm):
    if k_baseline is None or k_arm is None:
        return None
    return (k_baseline - k_arm) / k_baseline


@dataclass
class ArmSummary:
    K: int | None
    reduction: float | None
    best_score: float
    curve: list
    seed_curves: dict

    def to_dict(self):
        return {
            "K": self.K if self.K is not None else NOT_ACHIEVED,
            "percent_reduction": None if self.reduction is None else self.reduction,
            "percent_reduction_label": format_reduction(self.reduction),
            "best_score": self.best_score,
            "curve": self.curve,
            "seed_curves": {str(s): c for s, c in self.seed_curves.items()},
        }


def format_reduction(reduction):
    if reduction is None:
        return NOT_ACHIEVED
    return f"{int(round(reduction * 100))}%"


@dataclass
class ExperimentReport:
    target_score: float
    target_source: str
    arms: dict

    def to_dict(self):
        return {
            "target_score": self.target_score,
            "target_source": self.target_source,
            "arms": {a: s.to_dict() for a, s in self.arms.items()},
        }

    def summary_lines(self):
        lines = [f"target score {self.target_score:.6g} ({self.target_source})"]
        for arm, s in self.arms.items():
            k = NOT_ACHIEVED if s.K is None else str(s.K)
            lines.append(f"{arm:9s} K={k:>13s} reduction={format_reduction(s.reduction):>13s} best={s.best_score:.6g}")
        return lines


def compute_report(records, target_score="auto"):
    """Iterations-to-target report over seed-averaged curves.

    ``records`` maps arm name to its EvalRecords. With ``target_score='auto'`` the
    target is the best seed-averaged baseline score.
    """
    if not records:
        raise ContractError("no records to report on")
    curves = {arm: averaged_curve(recs) for arm, recs in records.items()}
    if target_score == "auto":
        if "baseline" not in curves:
            raise ContractError("an automatic target needs baseline records")
        target, source = float(np.max(curves["baseline"])), "best baseline score"
    else:
        target, source = float(target_score), "given"
    k_base = iterations_to_target(curves["baseline"], target) if "baseline" in curves else None
    arms = {}
    for arm in [a for a in ARMS if a in curves] + [a for a in curves if a not in ARMS]:
        k = iterations_to_target(curves[arm], target)
        arms[arm] = ArmSummary(
            K=k,
            reduction=percent_reduction(k_base, k),
            best_score=float(np.max(curves[arm])),
            curve=[float(x) for x in curves[arm]],
            seed_curves={s: [float(x) for x in c] for s, c in seed_curves(records[arm]).items()},
        )
    return ExperimentReport(target, source, arms)


def write_report(report: ExperimentReport, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return path


# ------------------------------------------------------------------ selection-rule comparison


def parse_rule(text):
    """``name`` or ``name:param`` (e.g. ``threshold:0.8``, ``top_fraction:0.2``, ``prioritized:0.6``)."""
    name, _, param = text.strip().partition(":")
    values = {}
    if param:
        key = {"threshold": "zeta", "abs_threshold": "zeta", "top_fraction": "top_fraction",
               "prioritized": "priority_exponent"}.get(name)
        if key is None:
            raise ConfigError(f"unknown selection rule {name!r}")
        try:
            values[key] = float(param)
        except ValueError as exc:
            raise ConfigError(f"bad parameter in selection rule {text!r}") from exc
    return selection_from_values(name, values)


def compare_selection_rules(cfg: ExperimentConfig, rules, teachers=None, write=True):
    """One run per rule on shared seeds; returns ``{rule label: {seed: records}}``.

    Writes ``<out>/rules/<label>/...`` per rule and an overlay CSV ``<out>/rules.csv``.
    """
    if cfg.arm not in ("it", "repaint"):
        raise ConfigError("selection rules only matter for the it and repaint arms")
    if not rules:
        raise ConfigError("no selection rules given")
    if teachers is None:
        if cfg.teacher_checkpoint is None:
            raise ConfigError(f"arm {cfg.arm!r} needs teacher.checkpoint")
        teachers = [load_teacher(cfg.teacher_checkpoint, cfg.student_task())[0]]
    results = {}
    for rule in rules:
        rule_cfg = dataclasses.replace(
            cfg,
            transfer=dataclasses.replace(cfg.transfer, selection=rule),
            out=str(Path(cfg.out) / "rules" / rule.label),
        )
        results[rule.label] = run_experiment(rule_cfg, teachers=teachers, write=write)
    if write:
        path = Path(cfg.out) / "rules.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("iteration", "seed", "rule", "mean_return", "aux_metric"))
            for label, by_seed in results.items():
                for seed, recs in by_seed.items():
                    for r in recs:
                        w.writerow([r.iteration, seed, label, repr(r.mean_return), repr(r.aux_metric)])
    return results


def task_similarity(cfg: ExperimentConfig):
    if cfg.teacher_weights is None:
        return None
    return cosine_similarity(cfg.teacher_weights, cfg.student_weights)


def flatten(by_seed):
    return [r for seed in sorted(by_seed) for r in by_seed[seed]]

