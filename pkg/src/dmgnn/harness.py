"""Experiment orchestration: configs, training runs, evaluation, aggregation, chat and checks."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import pickle
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from . import __version__
from . import nncore as nn
from .belief import initial_belief, select_domain, update, update_system
from .dialogue import GENERAL, AgendaUser, DialogueAct, sample_goal, validate_act
from .episode import (
    METRIC_FIELDS,
    MetricsReport,
    OracleAgent,
    PolicyAgent,
    episode_result,
    evaluate_agent,
    metrics,
    run_episode,
)
from .featurize import dip_state, flat_state
from .learn import LOSS_COLUMNS, MODES, Learner, LossWeights, Transition, ilfod_collect, mode_loss
from .ontology import Ontology, load_ontology
from .policy import POLICY_KINDS, make_policy, parameter_table

PRESETS = {"ACGOS": {"policy": "UHGNN", "mode": "ILfOS"}}
METRICS_COLUMNS = ("config", "seed", "dialogues_trained", "inform_p", "inform_r", "inform_f1", "book_rate",
                   "success", "complete", "avg_turns_success", "avg_turns_all", "avg_reward")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    policy: str = "UHGNN"
    mode: str = "ILfOS"
    seeds: tuple[int, ...] = tuple(range(10))
    train_dialogues: int = 10_000
    eval_every: int = 1_000
    eval_dialogues: int = 500
    lr: float = 1e-3
    dropout: float = 0.1
    batch_size: int = 64
    buffer_capacity: int = 50_000
    patience: int = 40
    mix: float = 0.5
    max_domains: int = 3
    weights: LossWeights = field(default_factory=LossWeights)
    ontology: str | None = None
    domains: tuple[str, ...] | None = None
    name: str = ""

    def __post_init__(self):
        if self.policy not in POLICY_KINDS:
            raise ConfigError(f"policy must be one of {POLICY_KINDS}, got {self.policy!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for k in ("train_dialogues", "eval_every", "eval_dialogues", "batch_size", "buffer_capacity",
                  "patience", "max_domains"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive")
        if self.train_dialogues % self.eval_every:
            raise ConfigError("train_dialogues must be a multiple of eval_every")
        if not 0.0 <= self.mix <= 1.0:
            raise ConfigError("mix must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    @property
    def label(self) -> str:
        return self.name or f"{self.mode}-{self.policy}"

    def to_document(self) -> dict:
        doc = asdict(self)
        doc["seeds"] = list(self.seeds)
        doc["domains"] = list(self.domains) if self.domains is not None else None
        return doc

    @classmethod
    def from_document(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        preset = doc.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}")
            for k, v in PRESETS[preset].items():
                doc.setdefault(k, v)
            doc.setdefault("name", preset)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "weights" in doc:
            try:
                doc["weights"] = LossWeights(**doc["weights"])
            except TypeError as exc:
                raise ConfigError(f"bad weights: {exc}") from None
        if "seeds" in doc:
            doc["seeds"] = tuple(int(s) for s in doc["seeds"])
        if doc.get("domains") is not None:
            doc["domains"] = tuple(doc["domains"])
        return cls(**doc)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_document(), sort_keys=True).encode()).hexdigest()[:16]

    def build_ontology(self) -> Ontology:
        onto = load_ontology(self.ontology)
        return onto.restrict(self.domains) if self.domains else onto


def preset(name: str, **overrides) -> ExperimentConfig:
    return ExperimentConfig(**{**PRESETS[name], "name": name, **overrides})


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_document(doc)


# ---------------------------------------------------------------------------
# runs


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.6f}"


def _streams(seed: int):
    init, learn, episodes, evals = np.random.SeedSequence(seed).spawn(4)
    return init, learn, episodes, evals


def _eval_seed(seed: int) -> int:
    return int(np.random.SeedSequence([seed, 0xE7A1]).generate_state(1)[0])


def checkpoint_meta(cfg: ExperimentConfig, onto: Ontology, seed: int, dialogues: int) -> dict:
    return {
        "format": "dmgnn-policy",
        "version": __version__,
        "policy": cfg.policy,
        "mode": cfg.mode,
        "dropout": cfg.dropout,
        "ontology": cfg.ontology,
        "domains": list(cfg.domains) if cfg.domains else None,
        "ontology_digest": onto.digest(),
        "seed": seed,
        "dialogues_trained": dialogues,
    }


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _metric_row(cfg: ExperimentConfig, seed: int, n: int, m: MetricsReport) -> list[str]:
    return [cfg.label, str(seed), str(n)] + [_fmt(getattr(m, k)) for k in METRIC_FIELDS]


def collect_episode(policy, learner: Learner, onto: Ontology, cfg: ExperimentConfig,
                    rng: np.random.Generator) -> list[Transition]:
    """Sample a goal and roll out one training dialogue under the configured mode."""
    goal = sample_goal(onto, rng, cfg.max_domains)
    user = AgendaUser(goal, onto, patience=cfg.patience)

    def run(by_oracle: bool) -> list[Transition]:
        agent = OracleAgent(policy) if by_oracle else PolicyAgent(policy, "boltzmann", cfg.weights.tau)
        _, ts = run_episode(agent, user, rng=rng, label=learner.needs_labels)
        return ts

    if cfg.mode in ("ILfOD", "BC"):
        ts, _ = ilfod_collect(run, learner.buffer, cfg.mix, rng)
        return ts
    ts = run(False)
    learner.buffer.extend(ts)
    return ts


def train_seed(cfg: ExperimentConfig, seed: int, run_dir: Path, onto: Ontology | None = None,
               stop_after: int | None = None) -> list[list[str]]:
    """Train one seed, resuming from ``resume/seed<k>.pkl`` when present.

    ``stop_after`` interrupts the run after that many dialogues (used to
    exercise resumption).
    """
    onto = onto or cfg.build_ontology()
    init, learn_ss, ep_ss, _ = _streams(seed)
    policy = make_policy(cfg.policy, onto, np.random.default_rng(init), cfg.dropout)
    learner = Learner(policy, cfg.mode, cfg.weights, cfg.lr, cfg.batch_size, cfg.buffer_capacity,
                      seed=int(learn_ss.generate_state(1)[0]))
    rng = np.random.default_rng(ep_ss)
    rows: list[list[str]] = []
    resume_path = run_dir / "resume" / f"seed{seed}.pkl"
    start = 0
    if resume_path.exists():
        with open(resume_path, "rb") as fh:
            state = pickle.load(fh)
        if state["config"] != cfg.digest():
            raise ConfigError(f"{resume_path} belongs to a different configuration")
        policy.load_state_dict(state["params"])
        learner.restore(state["learner"])
        rng.bit_generator.state = state["rng"]
        rows = state["rows"]
        start = state["episode"]
        if state.get("done"):
            return rows
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    resume_path.parent.mkdir(parents=True, exist_ok=True)
    eval_seed = _eval_seed(seed)
    for ep in range(start, cfg.train_dialogues):
        ts = collect_episode(policy, learner, onto, cfg, rng)
        learner.observe(ts, stored=True)
        n = ep + 1
        if n % cfg.eval_every == 0:
            m = evaluate_policy(policy, onto, cfg.eval_dialogues, eval_seed, cfg.max_domains, cfg.patience)
            rows.append(_metric_row(cfg, seed, n, m))
            nn.save_checkpoint(ckpt_dir / f"seed{seed}_d{n}.ckpt",
                               {**policy.state_dict(), **learner.optimizer.state_dict()},
                               checkpoint_meta(cfg, onto, seed, n))
            _write_csv(run_dir / f"losses_seed{seed}.csv", LOSS_COLUMNS,
                       ([str(r[0])] + [_fmt(float(x)) for x in r[1:5]] + [str(r[5]), _fmt(r[6]), _fmt(r[7])]
                        for r in learner.loss_rows))
            state = {"config": cfg.digest(), "params": policy.state_dict(), "learner": learner.state(),
                     "rng": rng.bit_generator.state, "rows": rows, "episode": n,
                     "done": n == cfg.train_dialogues}
            tmp = resume_path.with_suffix(".tmp")
            with open(tmp, "wb") as fh:
                pickle.dump(state, fh)
            os.replace(tmp, resume_path)
        if stop_after is not None and n >= stop_after and n < cfg.train_dialogues:
            break
    return rows


def write_manifest(cfg: ExperimentConfig, run_dir: Path, onto: Ontology) -> None:
    doc = {
        "version": __version__,
        "config": cfg.to_document(),
        "config_digest": cfg.digest(),
        "ontology_digest": onto.digest(),
        "hyperparameters": {
            "lr": cfg.lr, "dr": cfg.dropout, "bs": cfg.batch_size, "tau": cfg.weights.tau,
            "lambda_Q": cfg.weights.q, "lambda_pi": cfg.weights.pi, "lambda_IL": cfg.weights.il,
            "lambda_ent": cfg.weights.ent, "margin": cfg.weights.margin, "gamma": cfg.weights.gamma,
            "truncation": cfg.weights.truncation, "buffer_capacity": cfg.buffer_capacity,
            "patience": cfg.patience, "mix": cfg.mix,
        },
    }
    (run_dir / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def train(cfg: ExperimentConfig, run_dir, stop_after: int | None = None) -> Path:
    """Train every seed of ``cfg`` into ``run_dir`` (resumable) and return it."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    onto = cfg.build_ontology()
    manifest = run_dir / "manifest.json"
    if manifest.exists():
        old = json.loads(manifest.read_text(encoding="utf-8"))
        if old.get("config_digest") != cfg.digest():
            raise ConfigError(f"{run_dir} already holds a different configuration")
    write_manifest(cfg, run_dir, onto)
    rows: list[list[str]] = []
    for seed in cfg.seeds:
        rows.extend(train_seed(cfg, seed, run_dir, onto, stop_after))
        _write_csv(run_dir / "metrics.csv", METRICS_COLUMNS, rows)
        if stop_after is not None:
            break
    return run_dir


def train_from_manifest(manifest_path, run_dir) -> Path:
    doc = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    return train(ExperimentConfig.from_document(doc["config"]), run_dir)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_policy(policy, onto: Ontology, n: int, seed: int, max_domains: int = 3,
                    patience: int = 40) -> MetricsReport:
    return metrics(evaluate_agent(PolicyAgent(policy, "greedy"), onto, n, seed, max_domains, patience))


def load_policy(path, ontology_path: str | None = None):
    """Rebuild a policy from a checkpoint; returns (policy, ontology, meta)."""
    tensors, meta = nn.load_checkpoint(path)
    if meta.get("format") != "dmgnn-policy":
        raise ValueError(f"{path} is not a policy checkpoint")
    onto = load_ontology(ontology_path if ontology_path is not None else meta.get("ontology"))
    if meta.get("domains"):
        onto = onto.restrict(meta["domains"])
    if onto.digest() != meta.get("ontology_digest"):
        raise ValueError("checkpoint is incompatible with the ontology")
    policy = make_policy(meta["policy"], onto, 0, meta.get("dropout", 0.1))
    policy.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    return policy, onto, meta


def evaluate(checkpoint, n: int, seed: int, ontology_path: str | None = None,
             domains: Sequence[str] | None = None, log: IO[str] | None = None) -> MetricsReport:
    """Greedy evaluation of a checkpoint, or of the teacher when ``checkpoint`` is None/"oracle"."""
    if n < 1:
        raise ValueError("evaluation needs at least one dialogue")
    if checkpoint in (None, "oracle"):
        onto = load_ontology(ontology_path)
        if domains:
            onto = onto.restrict(domains)
        return metrics(evaluate_agent(OracleAgent(), onto, n, seed, log=log))
    policy, onto, _ = load_policy(checkpoint, ontology_path)
    return metrics(evaluate_agent(PolicyAgent(policy, "greedy"), onto, n, seed, log=log))


def parameter_checksum(policy) -> str:
    return hashlib.sha256(nn.dump_checkpoint(policy.state_dict())).hexdigest()


# ---------------------------------------------------------------------------
# aggregation


def quartiles(values: Sequence[float]) -> dict:
    """Box-plot statistics with linearly interpolated quartiles and 1.5 IQR whiskers."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=float)
    if v.size == 0:
        return {"n": 0, "q1": math.nan, "median": math.nan, "q3": math.nan,
                "whisker_low": math.nan, "whisker_high": math.nan, "outliers": []}
    q1, q2, q3 = np.percentile(v, [25, 50, 75], method="linear")
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo) & (v <= hi)]
    return {"n": int(v.size), "q1": float(q1), "median": float(q2), "q3": float(q3),
            "whisker_low": float(inside.min()), "whisker_high": float(inside.max()),
            "outliers": sorted(float(x) for x in v[(v < lo) | (v > hi)])}


def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


AGGREGATE_COLUMNS = ("config", "dialogues_trained", "metric", "n", "q1", "median", "q3",
                     "whisker_low", "whisker_high", "outliers")


def aggregate(run_dirs: Sequence, out_path=None) -> list[list[str]]:
    """Per (config, dialogues-trained, metric) box-plot statistics across seeds."""
    if not run_dirs:
        raise ValueError("aggregate needs at least one run")
    rows = [r for d in run_dirs for r in read_metrics(d)]
    by_cfg: dict[str, dict[str, dict[int, float]]] = {}
    for r in rows:
        by_cfg.setdefault(r["config"], {}).setdefault(r["seed"], {})[int(r["dialogues_trained"])] = r
    out: list[list[str]] = []
    for cfg_name in sorted(by_cfg):
        seeds = by_cfg[cfg_name]
        schedules = {tuple(sorted(s)) for s in seeds.values()}
        if len(schedules) != 1:
            raise ValueError(f"mismatched evaluation schedules across runs of {cfg_name}")
        for n in schedules.pop():
            for metric in METRIC_FIELDS:
                st = quartiles([float(seeds[s][n][metric]) for s in seeds])
                out.append([cfg_name, str(n), metric, str(st["n"])]
                           + [_fmt(st[k]) for k in ("q1", "median", "q3", "whisker_low", "whisker_high")]
                           + [" ".join(_fmt(x) for x in st["outliers"])])
    if out_path is not None:
        _write_csv(Path(out_path), AGGREGATE_COLUMNS, out)
    return out


# ---------------------------------------------------------------------------
# chat

ACT_RE = re.compile(r"^(?P<intent>[a-z][a-z_-]*)(?:\[(?P<domain>[a-z_]+)(?:\.(?P<slot>[a-z_]+))?"
                    r"(?:=(?P<value>[^\]]+))?\])?$")
CHAT_USAGE = ("usage: one or more acts separated by spaces, each written intent[domain.slot=value]\n"
              "  e.g. inform[restaurant.food=italian]  request[restaurant.phone]  thank  bye\n"
              "  'quit' leaves the session")


def parse_acts(line: str) -> list[DialogueAct]:
    acts = []
    for tok in line.split():
        m = ACT_RE.match(tok)
        if m is None:
            raise ValueError(f"cannot parse {tok!r}")
        d = m.group("domain") or GENERAL
        acts.append(DialogueAct(m.group("intent"), d, m.group("slot"), m.group("value")))
    if not acts:
        raise ValueError("empty input")
    return acts


def chat(agent, onto: Ontology, stdin: IO[str], stdout: IO[str], seed: int = 0,
         dump_features: bool = False) -> dict | None:
    """Interactive session; a goal is drawn from ``seed`` and used to judge the dialogue.

    A shadow simulated user with that goal follows the system's acts so the
    user-side completion verdict can be reported.
    """
    rng = np.random.default_rng(seed)
    goal = sample_goal(onto, rng)
    shadow = AgendaUser(goal, onto)
    stdout.write("goal: " + json.dumps(goal.to_json()) + "\n" + CHAT_USAGE + "\n")
    belief = initial_belief(onto)
    turns = 0
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        if line == "quit":
            stdout.write("session closed\n")
            return None
        try:
            acts = parse_acts(line)
            for a in acts:
                validate_act(a, onto, "user")
            nxt = update(belief, acts)
        except (ValueError, KeyError) as exc:
            stdout.write(f"error: {exc}\n{CHAT_USAGE}\n")
            continue
        nxt.active_domain = select_domain(belief, acts)
        belief = nxt
        if any(a.intent == "bye" for a in acts):
            res = episode_result(belief, goal, turns, all(shadow.satisfied(d) for d in goal.domain_names))
            verdict = {"success": res.success, "complete": res.complete, "turns": turns}
            stdout.write(f"system: bye\nverdict: {json.dumps(verdict)}\n")
            return verdict
        dec = agent.decide(belief, belief.active_domain, rng)
        if dump_features:
            stdout.write("features: " + json.dumps(_feature_dump(belief, onto)) + "\n")
        for a in dec.acts:
            shadow._process(a)
        belief = update_system(belief, dec.acts)
        turns += 1
        stdout.write("system: " + " ".join(str(a) for a in dec.acts) + "\n")
        stdout.write("belief: " + belief.digest_json() + "\n")
    return None


def _feature_dump(belief, onto: Ontology) -> dict:
    d = belief.active_domain
    dip = dip_state(belief, d, onto)
    return {"domain": d, "independent": dip.independent.astype(int).tolist(),
            "slots": {s: row.astype(int).tolist() for s, row in zip(dip.slot_names, dip.slots)},
            "flat_nonzero": np.flatnonzero(flat_state(belief, onto)).tolist()}


# ---------------------------------------------------------------------------
# describe / gradcheck


def describe(onto: Ontology, stdout: IO[str]) -> dict[str, int]:
    totals = {}
    for kind in POLICY_KINDS:
        pol = make_policy(kind, onto, 0)
        table = parameter_table(pol)
        totals[kind] = sum(n for _, _, n in table)
        stdout.write(f"{kind}: {totals[kind]} parameters\n")
        for name, shape, n in table:
            stdout.write(f"  {name:<40} {'x'.join(map(str, shape)):>10} {n:>8}\n")
    return totals


def gradcheck_batch(policy, onto: Ontology, seed: int, size: int = 6) -> list[Transition]:
    """A small mixed batch (teacher and Boltzmann turns, labelled, some terminal)."""
    rng = np.random.default_rng(seed)
    batch: list[Transition] = []
    while len(batch) < size or not any(t.terminal for t in batch):
        agent = OracleAgent(policy) if len(batch) % 2 else PolicyAgent(policy, "boltzmann")
        goal = sample_goal(onto, rng, 2)
        _, ts = run_episode(agent, AgendaUser(goal, onto, patience=4), rng=rng, label=True)
        batch.extend(ts)
    keep = [t for t in batch if not t.terminal][: size - 1] + [t for t in batch if t.terminal][:1]
    return keep


def gradient_check(kind: str, mode: str, onto: Ontology, seed: int, eps: float = 1e-5,
                   coords: int = 4, floor: float = 1e-8) -> float:
    """Max relative error between backprop and central differences on sampled coordinates.

    Detached quantities (bootstrap targets, ratio-weighted advantages) and the
    dropout masks are held fixed between the analytic and numeric passes.
    """
    policy = make_policy(kind, onto, seed)
    batch = gradcheck_batch(policy, onto, seed)
    w = LossWeights()

    def loss(constants):
        return mode_loss(policy, batch, mode, w, np.random.default_rng(seed + 1), constants)

    policy.zero_grad()
    total, _, constants = loss(None)
    total.backward()
    rng = np.random.default_rng(seed + 2)
    worst = 0.0
    for _, p in policy.named_parameters():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1) if p.grad is not None else np.zeros_like(flat)
        for i in rng.choice(flat.size, size=min(coords, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            up = loss(constants)[0].item()
            flat[i] = old - eps
            down = loss(constants)[0].item()
            flat[i] = old
            num = (up - down) / (2 * eps)
            err = abs(num - grad[i]) / max(abs(num), abs(grad[i]), floor)
            worst = max(worst, err)
    return worst
