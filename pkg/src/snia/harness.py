"""Experiment orchestration: attack suites, aggregate tables, sweeps, manifests."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import baselines as B
from .env import AttackEnv, AttackGoal, build_label_bank
from .graph import Graph
from .models import BlackBoxVictim, VictimModel
from .ppo import greedy_rollout

log = logging.getLogger(__name__)

ALL_ATTACKERS = ("clean", "random", "mostattr", "oneshot", "greedy", "gsnia")


def derive_seed(master: int, *names) -> int:
    """Stable 32-bit seed for a named stochastic component."""
    key = [zlib.crc32(str(n).encode()) for n in names]
    return int(np.random.SeedSequence([int(master), *key]).generate_state(1)[0])


def select_targets(target_ids, count: int | None, seed: int) -> np.ndarray:
    """Seeded uniform subsample (sorted) of the target set; all of it if ``count`` is None."""
    target_ids = np.asarray(target_ids)
    if count is None or count >= target_ids.shape[0]:
        return np.sort(target_ids)
    rng = np.random.default_rng(derive_seed(seed, "targets"))
    return np.sort(rng.choice(target_ids, size=count, replace=False))


def goals_for(targets, labels) -> list:
    return [AttackGoal(int(t), int(y)) for y in labels for t in targets]


@dataclass
class ExperimentConfig:
    dataset_dir: str
    out_dir: str
    attackers: tuple = ("clean", "random", "mostattr")
    seed: int = 0
    budget: int | None = None
    num_targets: int | None = None
    labels: tuple | None = None
    grad_source: str = "victim"
    budgets: tuple = ()
    workers: int = 1
    timings: bool = False

    def __post_init__(self):
        if not Path(self.dataset_dir).is_dir():
            raise FileNotFoundError(f"dataset directory not found: {self.dataset_dir}")
        unknown = set(self.attackers) - set(ALL_ATTACKERS)
        if unknown:
            raise ValueError(f"unknown attacker(s) {sorted(unknown)}; choose from {ALL_ATTACKERS}")
        if self.budget is not None and self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.grad_source not in ("victim", "surrogate"):
            raise ValueError("grad_source must be 'victim' or 'surrogate'")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class AttackReport:
    victim: str
    attacker: str
    target: int
    label: int
    original_label: int
    clean_prediction: int
    success: bool
    clean_prob: float
    final_prob: float
    delta_prob: float
    steps: int
    victim_queries: int
    features: list = field(default_factory=list)
    wall_time: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        if d["wall_time"] is None:
            del d["wall_time"]
        return json.dumps(d, sort_keys=True)


def _report(victim_name, attacker, g, goal, clean_proba, pred, final_proba, ig, queries, t0, timings):
    clean_p = float(clean_proba[goal.target, goal.label])
    final_p = float(final_proba[goal.label])
    return AttackReport(
        victim=victim_name, attacker=attacker, target=goal.target, label=goal.label,
        original_label=int(g.labels[goal.target]), clean_prediction=int(pred[goal.target]),
        success=int(np.argmax(final_proba)) == goal.label, clean_prob=clean_p,
        final_prob=final_p, delta_prob=final_p - clean_p,
        steps=0 if ig is None else len(ig.features), victim_queries=queries,
        features=[] if ig is None else [int(f) for f in ig.feature_indices()],
        wall_time=(time.perf_counter() - t0) if timings else None)


def run_attack_suite(g: Graph, victims: dict, goals, attackers, budget: int, seed: int,
                     surrogate: VictimModel | None = None, agents: dict | None = None,
                     grad_source: str = "victim", workers: int = 1,
                     timings: bool = False) -> list:
    """Run every attacker on every goal against every victim.

    ``victims`` maps a name to a :class:`VictimModel`; ``agents`` maps the same
    names to trained agents (needed only for ``gsnia``).  Reports come back
    ordered by victim, attacker, then goal, whatever the worker count.
    """
    goals = list(goals)
    reports = []
    for vname, model in victims.items():
        bb = BlackBoxVictim(model)
        clean_proba = bb.clean_proba()
        pred = clean_proba.argmax(axis=1)
        for attacker in attackers:
            if attacker == "gsnia":
                reports.extend(_run_agent(g, vname, model, bb, (agents or {}).get(vname),
                                          goals, budget, clean_proba, pred, timings))
                continue
            grad_model = None
            if attacker in ("oneshot", "greedy"):
                grad_model = model if grad_source == "victim" else surrogate
                if grad_model is None:
                    raise ValueError("surrogate gradients requested but no surrogate model given")

            def one(goal, attacker=attacker, grad_model=grad_model):
                t0 = time.perf_counter()
                if attacker == "clean":
                    return _report(vname, attacker, g, goal, clean_proba, pred,
                                   clean_proba[goal.target], None, 0, t0, timings)
                if attacker == "random":
                    rng = np.random.default_rng(derive_seed(seed, "random", vname,
                                                            goal.target, goal.label))
                    ig = B.random_attack(g, pred, goal, budget, rng)
                elif attacker == "mostattr":
                    ig = B.mostattr_attack(g, pred, goal, budget)
                elif attacker == "oneshot":
                    ig = B.oneshot_grad_attack(g, grad_model, goal, budget)
                else:
                    ig = B.greedy_grad_attack(g, grad_model, goal, budget)
                return _report(vname, attacker, g, goal, clean_proba, pred,
                               bb.target_proba(ig), ig, 1, t0, timings)

            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    reports.extend(pool.map(one, goals))
            else:
                reports.extend(one(goal) for goal in goals)
    return reports


def _run_agent(g, vname, model, bb, agent, goals, budget, clean_proba, pred, timings):
    if agent is None:
        raise ValueError(f"attacker 'gsnia' needs a trained agent for victim {vname!r}")
    t0 = time.perf_counter()
    env = AttackEnv(g, bb, build_label_bank(g, bb), budget)
    states, _ = greedy_rollout(agent, env, goals, budget)
    out = []
    for goal, st in zip(goals, states):
        out.append(_report(vname, "gsnia", g, goal, clean_proba, pred,
                           np.exp(st.last_log_proba), st.injected, budget + 1, t0, timings))
    return out


# --------------------------------------------------------------------------
# aggregation


def success_table(reports, num_labels: int):
    """{(victim, attacker): per-label success rate in percent (NaN where no goals)}."""
    hits, counts = {}, {}
    for r in reports:
        key = (r.victim, r.attacker)
        hits.setdefault(key, np.zeros(num_labels))
        counts.setdefault(key, np.zeros(num_labels))
        hits[key][r.label] += r.success
        counts[key][r.label] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return {k: 100.0 * hits[k] / counts[k] for k in hits}


def _fmt(x: float) -> str:
    return "nan" if np.isnan(x) else f"{x:.4f}"


def success_rates_csv(reports, num_labels: int) -> str:
    """Rows: victim and targeted label (plus a ``mean`` row); columns: attackers."""
    table = success_table(reports, num_labels)
    victims = list(dict.fromkeys(r.victim for r in reports))
    attackers = list(dict.fromkeys(r.attacker for r in reports))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["victim", "label"] + attackers)
    for v in victims:
        for y in range(num_labels):
            w.writerow([v, y] + [_fmt(table[(v, a)][y]) if (v, a) in table else "nan"
                                 for a in attackers])
        w.writerow([v, "mean"] + [_fmt(np.nanmean(table[(v, a)])) if (v, a) in table else "nan"
                                  for a in attackers])
    return buf.getvalue()


def heatmap_matrix(reports, num_labels: int, attacker: str | None = None) -> np.ndarray:
    """Cell (i, j): mean probability change over goals whose target has true label i
    and forced label j, pooled over victims.  Empty cells are NaN."""
    sums = np.zeros((num_labels, num_labels))
    counts = np.zeros((num_labels, num_labels))
    for r in reports:
        if attacker is not None and r.attacker != attacker:
            continue
        sums[r.original_label, r.label] += r.delta_prob
        counts[r.original_label, r.label] += 1
    empty = counts == 0
    if empty.any():
        log.warning("%d heatmap cell(s) have no reports", int(empty.sum()))
    with np.errstate(invalid="ignore"):
        return np.where(empty, np.nan, sums / np.where(empty, 1, counts))


def matrix_csv(m: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["original_label"] + [f"target_{j}" for j in range(m.shape[1])])
    for i, row in enumerate(m):
        w.writerow([i] + [_fmt(x) for x in row])
    return buf.getvalue()


def budget_sweep(agent, env: AttackEnv, goals, budgets) -> dict:
    """Mean target-label probability per forced label after each budget's worth of greedy steps.

    One greedy rollout per goal runs to the largest budget; because the greedy
    policy is deterministic, its prefix of length b is exactly the rollout
    with budget b.  Returns {label: array aligned with ``budgets``}.
    """
    F = env.graph.num_features
    budgets = [int(b) for b in budgets]
    if any(b < 0 for b in budgets):
        raise ValueError("budgets must be >= 0")
    if any(b > F for b in budgets):
        log.warning("budgets above the feature count %d are capped", F)
        budgets = [min(b, F) for b in budgets]
    goals = list(goals)
    top = max(budgets)
    if top == 0:
        probs = np.array([[np.exp(env.reset(g, 1).last_log_prob)] * len(budgets) for g in goals])
    else:
        _, probs = greedy_rollout(agent, env, goals, top, record=budgets)
    labels = np.array([g.label for g in goals])
    return {int(y): probs[labels == y].mean(axis=0) for y in np.unique(labels)}


def sweep_csv(curves: dict, budgets) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "budget", "mean_prob"])
    for y in sorted(curves):
        for b, p in zip(budgets, curves[y]):
            w.writerow([y, int(b), f"{p:.10f}"])
    return buf.getvalue()


# --------------------------------------------------------------------------
# output files


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, files, config: dict) -> Path:
    out_dir = Path(out_dir)
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    manifest = {
        "config": config,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "files": {Path(f).name: sha256_file(f) for f in sorted(files, key=lambda p: Path(p).name)},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2, default=str) + "\n")
    return path


def write_reports(reports, out_dir, num_labels: int) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = out_dir / "reports.jsonl"
    raw.write_text("".join(r.to_json() + "\n" for r in reports))
    rates = out_dir / "success_rates.csv"
    rates.write_text(success_rates_csv(reports, num_labels))
    return [raw, rates]


def read_reports(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(AttackReport(**json.loads(line)))
    return out
