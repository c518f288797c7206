"""Acceptance criteria 1-9.

Each test records one PASS/FAIL line (echoed in the terminal summary and
printed with ``-s``) before asserting.  Criteria 1 and 6-8 run on the shipped
Cora graph and are marked slow.
"""
import pickle
import time

import numpy as np
import pytest

import gradcheck as G
from conftest import ACCEPTANCE_LINES, CORA, random_graph
from oracles import (dense_adjacency, gae_direct, injected_target_proba, two_hop_embedding)
from snia import harness as H
from snia.cli import main
from snia.env import AttackEnv, AttackGoal, build_label_bank, embed_state
from snia.graph import (InjectedGraph, load_dataset_dir, max_feature_budget,
                        read_splits)
from snia.models import (BlackBoxVictim, GnnArchitecture, VictimModel, init_params,
                         query_target_prob, train_victim)
from snia.ppo import (Agent, PpoConfig, RolloutBuffer, clip_ratio, compute_gae, make_optimizer,
                      policy_distribution, ppo_update, sample_action, train)
from snia.synthetic import planted_partition

# Reference values the reproduction is held to.
ACCURACY_REF = {"gcn": 83.71, "sgc": 84.26, "surrogate": 83.56}
ACCURACY_TOL = 2.0
SEEDS = range(5)
TABLE_GCN_CORA = {
    "clean": [9.3, 18.3, 27.8, 12.6, 8.6, 3.5, 19.9],
    "random": [13.6, 26.9, 37.4, 18.9, 15.3, 7.3, 27.3],
    "mostattr": [37.5, 50.3, 45.8, 45.0, 36.7, 25.9, 47.1],
}
GREEDY_WHITE_BOX_REF = 76.41
BASELINE_TOL = 5.0
AGENT_GAP = 10.0

# Agent training for criteria 7 and 8: S = 32 x 128 = 4096 transitions per epoch.
AGENT_CFG = dict(parallel_envs=32, steps_per_env=128, epochs=100, update_steps=80,
                 eval_every=10, patience=20)


def record(k, name, ok, detail):
    line = f"criterion {k} ({name}): {'PASS' if ok else 'FAIL'}; {detail}"
    ACCEPTANCE_LINES[k] = line
    print(line)
    return ok


def _fmt(xs):
    return "[" + " ".join(f"{x:.1f}" for x in xs) + "]"


# --------------------------------------------------------------------------
# shared Cora fixtures


@pytest.fixture(scope="module")
def cora():
    return load_dataset_dir(CORA), read_splits(CORA)


@pytest.fixture(scope="module")
def cora_gcn(cora):
    g, split = cora
    return train_victim(g, split, GnnArchitecture.default("gcn"), H.derive_seed(0, "victim", "gcn"))


@pytest.fixture(scope="module")
def trained_agent(cora, cora_gcn):
    g, split = cora
    bb = BlackBoxVictim(cora_gcn)
    budget = max_feature_budget(g)
    env = AttackEnv(g, bb, build_label_bank(g, bb), budget)
    targets = H.select_targets(split.target_ids, 100, 0)
    goals = H.goals_for(targets, range(g.num_labels))
    t0 = time.perf_counter()
    res = train(env, goals, PpoConfig(**AGENT_CFG), H.derive_seed(0, "agent"))
    return res, env, goals, time.perf_counter() - t0


# --------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_1_victim_accuracy(cora):
    g, split = cora
    means, worst_time, parts = {}, 0.0, []
    for arch in ACCURACY_REF:
        accs = []
        for s in SEEDS:
            t0 = time.perf_counter()
            m = train_victim(g, split, GnnArchitecture.default(arch), H.derive_seed(s, "victim", arch))
            worst_time = max(worst_time, time.perf_counter() - t0)
            accs.append(100 * m.accuracy(split.test_ids))
        means[arch] = float(np.mean(accs))
        parts.append(f"{arch} {means[arch]:.2f} (ref {ACCURACY_REF[arch]}, seeds {_fmt(accs)})")
    ok = all(abs(means[a] - ACCURACY_REF[a]) <= ACCURACY_TOL for a in means) and worst_time < 120
    record(1, "victim accuracy", ok,
           "; ".join(parts) + f"; slowest single run {worst_time:.1f}s")
    assert ok


def test_criterion_2_gradient_engine():
    rng = np.random.default_rng(2)
    worst, count = 0.0, 0
    for _ in range(100):
        for _, build, inputs in G.op_cases(rng):
            worst = max(worst, G.check(build, inputs, rng))
            count += 1
        for case in (G.gcn_loss_case, G.mlp_loss_case):
            build, inputs = case(rng)
            worst = max(worst, G.check(build, inputs, rng))
            count += 1
    ok = worst < 1e-5
    record(2, "gradient engine", ok, f"{count} checks, worst relative error {worst:.2e}")
    assert ok


def test_criterion_3_environment_exactness():
    rng = np.random.default_rng(3)
    worst_p, worst_e = 0.0, 0.0
    for i in range(200):
        n = int(rng.integers(2, 13))
        F, Y = int(rng.integers(2, 8)), int(rng.integers(2, 5))
        g = random_graph(rng, n, F, Y)
        kind = ("gcn", "sgc", "surrogate")[i % 3]
        arch = GnnArchitecture.default(kind)
        m = VictimModel(arch, {k: 2 * v for k, v in init_params(arch, F, Y, rng).items()}, g)
        goal = AttackGoal(int(rng.integers(n)), int(rng.integers(Y)))
        feats = frozenset(int(f) for f in rng.choice(F, size=int(rng.integers(0, F + 1)), replace=False))
        A = dense_adjacency(n, g.edge_list())
        ref = injected_target_proba(kind, m.params, A, g.dense_features, goal.target, feats)
        got = query_target_prob(m, InjectedGraph(g, goal.target, feats), goal.label)
        worst_p = max(worst_p, abs(got - ref[goal.label]))

        bb = BlackBoxVictim(m)
        env = AttackEnv(g, bb, build_label_bank(g, bb), F)
        st = env.reset(goal)
        for a in sorted(feats):
            st, _, _ = env.step(st, a)
        e = embed_state(st, env.bank)
        worst_e = max(worst_e, float(np.max(np.abs(
            e[:F] - two_hop_embedding(A, g.dense_features, goal.target, feats)))))
    ok = worst_p <= 1e-10 and worst_e <= 1e-10
    record(3, "environment exactness", ok,
           f"200 instances, max |dP| {worst_p:.1e}, max |d embedding| {worst_e:.1e}")
    assert ok


def test_criterion_4_reward_telescoping():
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(1000):
        if i % 50 == 0:
            g = random_graph(rng, int(rng.integers(3, 13)), 8, 3)
            arch = GnnArchitecture.default(("gcn", "sgc")[i // 50 % 2])
            m = VictimModel(arch, {k: 3 * v for k, v in init_params(arch, 8, 3, rng).items()}, g)
            bb = BlackBoxVictim(m)
            bank = build_label_bank(g, bb)
        budget = int(rng.integers(1, 9))
        env = AttackEnv(g, bb, bank, budget)
        st = env.reset(AttackGoal(int(rng.integers(g.num_nodes)), int(rng.integers(3))))
        first, total, done = st.last_log_prob, 0.0, False
        while not done:
            st, r, done = env.step(st, int(rng.choice(np.flatnonzero(st.mask))))
            total += r
        worst = max(worst, abs(total - (st.last_log_prob - first)))
    ok = worst <= 1e-9
    record(4, "reward telescoping", ok, f"1000 episodes, max |sum r - log ratio| {worst:.1e}")
    assert ok


def test_criterion_5_ppo_machinery():
    rng = np.random.default_rng(5)
    gamma, lam = 0.99, 0.95
    worst_gae = 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 40))
        r, v = rng.standard_normal(T), rng.standard_normal(T)
        d = (rng.random(T) < 0.15).astype(float)
        last = float(rng.standard_normal())
        buf = RolloutBuffer(T, 1, 1, 1)
        buf.rewards, buf.values, buf.dones, buf.pos = r[:, None], v[:, None], d[:, None], T
        buf.last_values = np.array([last])
        compute_gae(buf, PpoConfig(gamma=gamma, lam=lam))
        ref = gae_direct(r, v, d, last, gamma, lam)
        worst_gae = max(worst_gae, float(np.max(np.abs(buf.advantages[:, 0] - ref))))
    gae_ok = worst_gae <= 1e-12

    cfg = PpoConfig(hidden=32, batch_size=64, update_steps=2)
    F = 10
    agent = Agent.create(F, cfg, rng)
    buf = RolloutBuffer(16, 8, 2 * F, F)
    for _ in range(16):
        s = rng.standard_normal((8, 2 * F))
        mk = rng.random((8, F)) < 0.6
        mk[:, 0] = True
        lp = agent.log_probs(s, mk)
        a = sample_action(np.exp(lp), rng)
        buf.add(s, mk, a, rng.standard_normal(8), lp[np.arange(8), a],
                agent.value.predict(s)[:, 0], (rng.random(8) < 0.1).astype(float))
    compute_gae(buf, cfg)
    stats = ppo_update(agent.policy, agent.value, make_optimizer(agent.policy, agent.value, cfg),
                       buf, cfg, rng)
    ratio_ok = stats["first_ratio_max_dev"] <= 1e-12

    table = [((1.3, 0.1), 1.1), ((0.5, 0.1), 0.9), ((1.0, 0.1), 1.0), ((1.1, 0.1), 1.1),
             ((0.9, 0.1), 0.9), ((1.05, 0.2), 1.05), ((2.0, 0.2), 1.2), ((0.0, 0.2), 0.8)]
    clip_ok = all(clip_ratio(*args) == want for args, want in table)

    mask = np.zeros(F, dtype=bool)
    mask[[1, 4, 7]] = True
    probs = policy_distribution(rng.standard_normal(F) * 5, mask)
    draws = sample_action(np.tile(probs, (1_000_000, 1)), np.random.default_rng(55))
    mask_ok = bool(mask[draws].all())

    ok = gae_ok and ratio_ok and clip_ok and mask_ok
    record(5, "PPO machinery", ok,
           f"GAE max err {worst_gae:.1e} over 1000 trajectories; first ratio dev "
           f"{stats['first_ratio_max_dev']:.1e}; clip table {'exact' if clip_ok else 'WRONG'}; "
           f"masked draws in 1e6: {int((~mask[draws]).sum())}")
    assert ok


@pytest.mark.slow
def test_criterion_6_baselines(cora, cora_gcn):
    g, split = cora
    targets = H.select_targets(split.target_ids, 200, 0)
    goals = H.goals_for(targets, range(g.num_labels))
    t0 = time.perf_counter()
    reports = H.run_attack_suite(g, {"gcn": cora_gcn}, goals,
                                 ["clean", "random", "mostattr", "greedy"],
                                 max_feature_budget(g), seed=0)
    elapsed = time.perf_counter() - t0
    table = H.success_table(reports, g.num_labels)
    parts, misses = [], []
    for name, ref in TABLE_GCN_CORA.items():
        got = table[("gcn", name)]
        bad = [y for y in range(g.num_labels) if abs(got[y] - ref[y]) > BASELINE_TOL]
        misses += [f"{name}/y={y}" for y in bad]
        parts.append(f"{name} {_fmt(got)} vs {_fmt(ref)}")
    greedy = float(np.mean(table[("gcn", "greedy")]))
    if abs(greedy - GREEDY_WHITE_BOX_REF) > BASELINE_TOL:
        misses.append("greedy mean")
    parts.append(f"greedy mean {greedy:.2f} vs {GREEDY_WHITE_BOX_REF}")
    ok = not misses and elapsed < 1800
    record(6, "baseline reproduction", ok,
           "; ".join(parts) + f"; outside tolerance: {misses or 'none'}; {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_7_ordering(cora, cora_gcn, trained_agent):
    g, _ = cora
    res, env, goals, train_time = trained_agent
    reports = H.run_attack_suite(g, {"gcn": cora_gcn}, goals,
                                 ["random", "mostattr", "greedy", "gsnia"], env.budget, seed=0,
                                 agents={"gcn": res.agent})
    rate = {a: float(np.mean(H.success_table(reports, g.num_labels)[("gcn", a)]))
            for a in ("random", "mostattr", "greedy", "gsnia")}
    ok = (rate["gsnia"] > rate["mostattr"] > rate["random"]
          and rate["gsnia"] >= rate["greedy"] - AGENT_GAP and train_time < 7200)
    record(7, "ordering", ok,
           f"agent {rate['gsnia']:.2f} > mostattr {rate['mostattr']:.2f} > random "
           f"{rate['random']:.2f}; white-box greedy {rate['greedy']:.2f}; "
           f"trained {len(res.log)} epochs (best {res.best_epoch}) in {train_time / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_8_budget_trend(trained_agent):
    res, env, goals, _ = trained_agent
    curves = H.budget_sweep(res.agent, env, goals, [1, env.budget])
    rising = {y: c[1] > c[0] for y, c in curves.items()}
    ok = all(rising.values())
    detail = "; ".join(f"y={y} {c[0]:.3f}->{c[1]:.3f}" for y, c in sorted(curves.items()))
    record(8, "budget trend", ok, f"mean target prob at budget 1 -> {env.budget}: {detail}")
    assert ok


# --------------------------------------------------------------------------
# criterion 9


def _write_raw_cora(path, g):
    with open(path / "cora.content", "w") as fh:
        X = g.dense_features.astype(int)
        for v in range(g.num_nodes):
            fh.write(f"{1000 + v} {' '.join(map(str, X[v]))} class_{g.labels[v]}\n")
    with open(path / "cora.cites", "w") as fh:
        for u, v in g.edge_list():
            fh.write(f"{1000 + u} {1000 + v}\n")


def _write_raw_planetoid(path):
    import scipy.sparse as sp
    rng = np.random.default_rng(0)
    n, F = 14, 6
    X = (rng.random((n, F)) < 0.4).astype(np.float32)
    Y = np.eye(3)[np.arange(n) % 3]
    test_idx = [13, 11, 12]
    train_idx = list(range(11))
    graph = {v: [(v + 1) % n, (v + 3) % n] for v in range(n)}
    objs = {"allx": sp.csr_matrix(X[train_idx]), "ally": Y[train_idx],
            "tx": sp.csr_matrix(X[test_idx]), "ty": Y[test_idx], "graph": graph}
    for k, v in objs.items():
        with open(path / f"ind.toy.{k}", "wb") as fh:
            pickle.dump(v, fh)
    (path / "ind.toy.test.index").write_text("\n".join(map(str, test_idx)) + "\n")


def _snapshot(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path):
    raw = tmp_path / "raw"
    raw.mkdir()
    _write_raw_cora(raw, planted_partition(60, 3, 15, seed=9))
    _write_raw_planetoid(raw)
    out = tmp_path / "out"
    d, m = out / "data", out / "models"
    commands = {
        "dataset prep (cora)": ["dataset", "prep", "--format", "cora", "--raw", str(raw),
                                "--out", str(d)],
        "dataset prep (planetoid)": ["dataset", "prep", "--format", "planetoid", "--raw", str(raw),
                                     "--name", "toy", "--out", str(out / "planetoid")],
        "victim train": ["victim", "train", "--dataset-dir", str(d), "--arch", "gcn",
                         "--epochs", "30", "--out", str(m)],
        "victim train (surrogate)": ["victim", "train", "--dataset-dir", str(d),
                                     "--arch", "surrogate", "--epochs", "30", "--out", str(m)],
        "agent train": ["agent", "train", "--dataset-dir", str(d), "--victim", str(m / "gcn.ckpt"),
                        "--budget", "3", "--num-targets", "6", "--epochs", "2",
                        "--ppo", "hidden=16", "--ppo", "parallel_envs=4", "--ppo", "steps_per_env=6",
                        "--ppo", "batch_size=8", "--ppo", "update_steps=2", "--ppo", "eval_every=1",
                        "--out", str(out / "agent")],
        "attack run": ["attack", "run", "--dataset-dir", str(d), "--victim", str(m / "gcn.ckpt"),
                       "--attacker", "clean,random,mostattr,oneshot,greedy,gsnia",
                       "--agent", str(out / "agent" / "agent.ckpt"), "--budget", "3",
                       "--num-targets", "6", "--workers", "2", "--out", str(out / "attack")],
        "attack run (surrogate)": ["attack", "run", "--dataset-dir", str(d),
                                   "--victim", str(m / "gcn.ckpt"), "--attacker", "greedy",
                                   "--grad-source", "surrogate",
                                   "--surrogate", str(m / "surrogate.ckpt"), "--budget", "3",
                                   "--num-targets", "6", "--out", str(out / "attack_sur")],
        "report heatmap": ["report", "heatmap", "--reports", str(out / "attack" / "reports.jsonl"),
                           "--attacker", "gsnia", "--out", str(out / "heatmap" / "gsnia.csv")],
        "report sweep": ["report", "sweep", "--dataset-dir", str(d), "--victim", str(m / "gcn.ckpt"),
                         "--agent", str(out / "agent" / "agent.ckpt"), "--num-targets", "6",
                         "--out", str(out / "sweep")],
    }
    differing = []
    for name, argv in commands.items():
        assert main(argv + ["--seed", "7"]) == 0, name
        first = _snapshot(out)
        assert main(argv + ["--seed", "7"]) == 0, name
        if _snapshot(out) != first:
            differing.append(name)
    ok = not differing
    record(9, "determinism", ok, f"{len(commands)} commands rerun; differing outputs: "
           f"{differing or 'none'}")
    assert ok
