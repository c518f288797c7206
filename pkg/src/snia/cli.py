"""Command-line entry point: ``snia <group> <command> [flags]``.

Every command accepts ``--config FILE``: a text file of ``key = value`` lines
(``#`` starts a comment) whose keys are flag names with dashes or
underscores.  Values from the file become defaults; flags given on the
command line win.  ``--seed`` is the single master seed; every stochastic
component derives its own stream from it.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import harness as H
from .graph import (load_dataset_dir, make_splits, max_feature_budget, read_splits,
                    write_dataset, write_splits)
from .models import KINDS, BlackBoxVictim, GnnArchitecture, VictimModel, train_victim

log = logging.getLogger("snia")


class UsageError(Exception):
    pass


def _int_list(s: str):
    return [int(x) for x in str(s).replace(",", " ").split()]


def _str_list(s: str):
    return [x for x in str(s).replace(",", " ").split()]


def read_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    out = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


# --------------------------------------------------------------------------
# commands


def cmd_dataset_prep(a) -> None:
    from .datasets import prepare, read_cora, read_planetoid

    if a.format == "cora":
        g = read_cora(a.raw)
    else:
        order = _int_list(a.label_order) if a.label_order else None
        g = read_planetoid(a.raw, a.name, order)
    g = prepare(g)
    split = make_splits(g, a.seed)
    write_dataset(g, a.out)
    write_splits(split, a.out)
    log.info("wrote %s: N=%d E=%d F=%d Y=%d max L0=%d", a.out, g.num_nodes, g.num_edges,
             g.num_features, g.num_labels, max_feature_budget(g))


def _load(dataset_dir):
    g = load_dataset_dir(dataset_dir)
    return g, read_splits(dataset_dir)


def _load_victim(path, g) -> VictimModel:
    if not Path(path).exists():
        raise UsageError(f"victim checkpoint not found: {path} (run `snia victim train` first)")
    return VictimModel.load(path, g)


def cmd_victim_train(a) -> None:
    g, split = _load(a.dataset_dir)
    arch = GnnArchitecture.default(a.arch)
    m = train_victim(g, split, arch, H.derive_seed(a.seed, "victim", a.arch),
                     epochs=a.epochs, lr=a.lr, weight_decay=a.weight_decay)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{a.arch}.ckpt"
    m.save(ckpt)
    summary = {"arch": a.arch, "seed": a.seed,
               "train_acc": m.accuracy(split.train_ids), "val_acc": m.accuracy(split.val_ids),
               "test_acc": m.accuracy(split.test_ids)}
    (out / f"{a.arch}.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    log.info("%s test accuracy %.2f%%", a.arch, 100 * summary["test_acc"])


def _ppo_config(a):
    from .ppo import PpoConfig

    kw = {}
    names = {f.name: f.type for f in fields(PpoConfig)}
    for item in a.ppo or []:
        if "=" not in item:
            raise UsageError(f"--ppo expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        k = k.strip().replace("-", "_")
        if k not in names:
            raise UsageError(f"unknown PPO setting {k!r}")
        kw[k] = v.strip() if k == "lr_schedule" else float(v) if "." in v or "e" in v else int(v)
    if a.epochs is not None:
        kw["epochs"] = a.epochs
    return PpoConfig(**kw)


def cmd_agent_train(a) -> None:
    from .env import AttackEnv, build_label_bank
    from .ppo import train

    g, split = _load(a.dataset_dir)
    victim = BlackBoxVictim(_load_victim(a.victim, g))
    budget = a.budget or max_feature_budget(g)
    cfg = _ppo_config(a)
    targets = H.select_targets(split.target_ids, a.num_targets, a.seed)
    goals = H.goals_for(targets, range(g.num_labels))
    env = AttackEnv(g, victim, build_label_bank(g, victim), budget)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(env, goals, cfg, H.derive_seed(a.seed, "agent"),
                log_path=out / "train_log.jsonl")
    res.agent.meta.update({"victim": Path(a.victim).name, "budget": budget,
                           "best_epoch": res.best_epoch,
                           "best_eval_success": res.best_success})
    res.agent.save(out / "agent.ckpt")
    files = [out / "agent.ckpt", out / "train_log.jsonl"]
    H.write_manifest(out, files, {"command": "agent train", **_plain(a)})
    log.info("best greedy success %.2f%% at epoch %d", 100 * res.best_success, res.best_epoch)


def cmd_attack_run(a) -> None:
    from .ppo import load_agent

    g, split = _load(a.dataset_dir)
    attackers = _str_list(a.attacker)
    cfg = H.ExperimentConfig(dataset_dir=a.dataset_dir, out_dir=a.out, attackers=tuple(attackers),
                             seed=a.seed, budget=a.budget, num_targets=a.num_targets,
                             labels=tuple(_int_list(a.labels)) if a.labels else None,
                             grad_source=a.grad_source, workers=a.workers, timings=a.timings)
    budget = cfg.budget or max_feature_budget(g)
    victims = {Path(p).stem: _load_victim(p, g) for p in a.victim}
    surrogate = _load_victim(a.surrogate, g) if a.surrogate else None
    if a.grad_source == "surrogate" and surrogate is None and {"oneshot", "greedy"} & set(attackers):
        raise UsageError("--grad-source surrogate needs --surrogate CKPT")
    agents = None
    if "gsnia" in attackers:
        if not a.agent:
            raise UsageError("attacker gsnia needs --agent CKPT (one per --victim, same order)")
        if len(a.agent) != len(a.victim):
            raise UsageError("give one --agent per --victim")
        agents = {name: load_agent(p) for name, p in zip(victims, a.agent)}
    targets = H.select_targets(split.target_ids, cfg.num_targets, cfg.seed)
    labels = cfg.labels if cfg.labels is not None else range(g.num_labels)
    goals = H.goals_for(targets, labels)
    reports = H.run_attack_suite(g, victims, goals, attackers, budget, cfg.seed,
                                 surrogate=surrogate, agents=agents, grad_source=cfg.grad_source,
                                 workers=cfg.workers, timings=cfg.timings)
    files = H.write_reports(reports, a.out, g.num_labels)
    H.write_manifest(a.out, files, {"command": "attack run", **_plain(a)})
    log.info("wrote %d report(s) to %s", len(reports), a.out)
    sys.stdout.write(H.success_rates_csv(reports, g.num_labels))


def cmd_report_heatmap(a) -> None:
    reports = H.read_reports(a.reports)
    if not reports:
        raise UsageError(f"{a.reports}: no reports")
    Y = a.num_labels or (max(max(r.label, r.original_label) for r in reports) + 1)
    if a.attacker:
        known = {r.attacker for r in reports}
        if a.attacker not in known:
            raise UsageError(f"attacker {a.attacker!r} not in {a.reports} (have {sorted(known)})")
    m = H.heatmap_matrix(reports, Y, a.attacker)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(H.matrix_csv(m))
    H.write_manifest(out.parent, [out], {"command": "report heatmap", **_plain(a)})


def cmd_report_sweep(a) -> None:
    from .env import AttackEnv, build_label_bank
    from .ppo import load_agent

    g, split = _load(a.dataset_dir)
    victim = BlackBoxVictim(_load_victim(a.victim, g))
    agent = load_agent(a.agent)
    budget = int(agent.meta.get("budget") or max_feature_budget(g))
    budgets = _int_list(a.budgets) if a.budgets else list(range(1, 2 * budget + 1))
    env = AttackEnv(g, victim, build_label_bank(g, victim), budget)
    targets = H.select_targets(split.target_ids, a.num_targets, a.seed)
    goals = H.goals_for(targets, range(g.num_labels))
    curves = H.budget_sweep(agent, env, goals, budgets)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "budget_sweep.csv"
    path.write_text(H.sweep_csv(curves, [min(b, g.num_features) for b in budgets]))
    H.write_manifest(out, [path], {"command": "report sweep", **_plain(a)})


def _plain(a) -> dict:
    return {k: v for k, v in sorted(vars(a).items())
            if k not in ("func", "config", "verbose") and not callable(v)}


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snia", description="Single-node feature injection attacks on GNN classifiers.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    groups = p.add_subparsers(dest="group", required=True)

    def command(group, name, func, help_):
        sp = group.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="key = value file supplying defaults for any flag")
        sp.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        sp.set_defaults(func=func)
        return sp

    ds = groups.add_parser("dataset", help="dataset preparation").add_subparsers(dest="cmd", required=True)
    sp = command(ds, "prep", cmd_dataset_prep, "convert a raw dump to TSV, keep the LCC, write splits")
    sp.add_argument("--format", choices=("cora", "planetoid"), required=True, help="raw layout")
    sp.add_argument("--raw", required=True, help="directory holding the raw files")
    sp.add_argument("--name", default="citeseer", help="planetoid dataset name (file prefix)")
    sp.add_argument("--label-order", help="planetoid class renumbering, e.g. 0,4,3,5,2,1")
    sp.add_argument("--out", required=True, help="output dataset directory")

    vg = groups.add_parser("victim", help="victim classifiers").add_subparsers(dest="cmd", required=True)
    sp = command(vg, "train", cmd_victim_train, "train a victim (or surrogate) classifier")
    sp.add_argument("--dataset-dir", required=True, help="prepared dataset directory")
    sp.add_argument("--arch", choices=KINDS, default="gcn", help="architecture")
    sp.add_argument("--epochs", type=int, help="override the architecture's epoch count")
    sp.add_argument("--lr", type=float, help="override the learning rate")
    sp.add_argument("--weight-decay", type=float, help="override the weight decay (no grid search)")
    sp.add_argument("--out", required=True, help="output directory for <arch>.ckpt and <arch>.json")

    ag = groups.add_parser("agent", help="PPO attack agent").add_subparsers(dest="cmd", required=True)
    sp = command(ag, "train", cmd_agent_train, "train the PPO feature-selection agent against a victim")
    sp.add_argument("--dataset-dir", required=True, help="prepared dataset directory")
    sp.add_argument("--victim", required=True, help="victim checkpoint")
    sp.add_argument("--budget", type=int, help="feature budget (default: max L0 of the graph)")
    sp.add_argument("--num-targets", type=int, help="train on a seeded subsample of this many targets")
    sp.add_argument("--epochs", type=int, help="collection/update phases")
    sp.add_argument("--ppo", action="append", metavar="KEY=VALUE",
                    help="override a PPO setting (repeatable), e.g. update_steps=40")
    sp.add_argument("--out", required=True, help="output directory")

    at = groups.add_parser("attack", help="attack evaluation").add_subparsers(dest="cmd", required=True)
    sp = command(at, "run", cmd_attack_run, "run attackers over a goal grid and write success rates")
    sp.add_argument("--dataset-dir", required=True, help="prepared dataset directory")
    sp.add_argument("--victim", action="append", required=True, help="victim checkpoint (repeatable)")
    sp.add_argument("--attacker", default="clean,random,mostattr",
                    help=f"comma list from {','.join(H.ALL_ATTACKERS)}")
    sp.add_argument("--grad-source", choices=("victim", "surrogate"), default="victim",
                    help="whose gradients the oneshot/greedy attackers use")
    sp.add_argument("--surrogate", help="surrogate checkpoint for --grad-source surrogate")
    sp.add_argument("--agent", action="append", help="agent checkpoint per victim (for gsnia)")
    sp.add_argument("--budget", type=int, help="feature budget (default: max L0 of the graph)")
    sp.add_argument("--num-targets", type=int, help="seeded subsample of the target set")
    sp.add_argument("--labels", help="comma list of targeted labels (default: all)")
    sp.add_argument("--workers", type=int, default=1, help="goal-level worker threads")
    sp.add_argument("--timings", action="store_true",
                    help="record per-attack wall time (outputs are then not reproducible)")
    sp.add_argument("--out", required=True, help="output directory")

    rp = groups.add_parser("report", help="derived tables").add_subparsers(dest="cmd", required=True)
    sp = command(rp, "heatmap", cmd_report_heatmap, "original-label x targeted-label mean probability change")
    sp.add_argument("--reports", required=True, help="reports.jsonl from `attack run`")
    sp.add_argument("--attacker", help="restrict to one attacker")
    sp.add_argument("--num-labels", type=int, help="matrix size (default: inferred)")
    sp.add_argument("--out", required=True, help="output CSV path")
    sp = command(rp, "sweep", cmd_report_sweep, "mean target-label probability versus budget")
    sp.add_argument("--dataset-dir", required=True, help="prepared dataset directory")
    sp.add_argument("--victim", required=True, help="victim checkpoint")
    sp.add_argument("--agent", required=True, help="agent checkpoint")
    sp.add_argument("--budgets", help="comma list (default 1..2x the training budget)")
    sp.add_argument("--num-targets", type=int, help="seeded subsample of the target set")
    sp.add_argument("--out", required=True, help="output directory")
    return p


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Parse ``argv`` with defaults taken from --config, rejecting unknown keys."""
    path = _config_path(argv)
    if path is None:
        return parser.parse_args(argv)
    cfg = read_config(path)
    sub = _leaf_parser(parser, argv)
    known = {a.dest: a for a in sub._actions}
    for k, v in cfg.items():
        if k not in known or k in ("help", "config", "func"):
            raise UsageError(f"{path}: unknown key {k!r}")
        act = known[k]
        if act.nargs == 0:
            v = v.lower() in ("1", "true", "yes", "on")
        elif isinstance(act, argparse._AppendAction):
            v = _str_list(v)
        elif act.type is not None:
            v = act.type(v)
        sub.set_defaults(**{k: v})
        act.required = False
    return parser.parse_args(argv)


def _leaf_parser(parser, argv):
    p = parser
    for tok in argv:
        sub = next((a for a in p._actions if isinstance(a, argparse._SubParsersAction)), None)
        if sub is None:
            break
        if tok in sub.choices:
            p = sub.choices[tok]
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"snia: error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, FileNotFoundError) as e:
        print(f"snia: error: {e}", file=sys.stderr)
        return 2
    return 0
