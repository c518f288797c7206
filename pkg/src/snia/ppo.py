"""Masked-action PPO agent that picks the injected node's features.

The policy maps a 2F state embedding to F logits; features already placed are
masked out of the softmax.  Training alternates vectorized rollout collection
with clipped-surrogate updates on minibatches drawn from the fresh buffer.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from . import autodiff as ad
from .checkpoint import load_tensors, save_tensors
from .env import AttackEnv, AttackGoal

log = logging.getLogger(__name__)


class DegenerateDistributionError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.1
    entropy_coef: float = 0.02
    value_coef: float = 1.0
    batch_size: int = 512
    lr: float = 2e-4
    lr_schedule: str = "linear"
    parallel_envs: int = 32
    steps_per_env: int = 128
    update_steps: int = 10
    epochs: int = 100
    eval_every: int = 400
    patience: int = 20
    max_grad_norm: float = 0.5
    hidden: int = 512
    policy_layers: int = 6
    value_layers: int = 4
    eval_goals: int = 600

    def __post_init__(self):
        for name in ("gamma", "lam", "clip_eps", "batch_size", "lr", "parallel_envs",
                     "steps_per_env", "update_steps", "epochs", "eval_every", "patience",
                     "max_grad_norm", "hidden", "policy_layers", "value_layers", "eval_goals"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.clip_eps >= 1:
            raise ValueError("clip_eps must be < 1")
        if self.gamma > 1 or self.lam > 1:
            raise ValueError("gamma and lam must be <= 1")

    @property
    def rollout_size(self) -> int:
        return self.parallel_envs * self.steps_per_env


# --------------------------------------------------------------------------
# networks


def orthogonal(rng, rows, cols, gain=1.0) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class MLP:
    """Tanh multilayer perceptron; ``sizes`` lists every layer width."""

    def __init__(self, sizes, rng, final_gain=1.0, hidden_gain=np.sqrt(2.0)):
        self.sizes = list(sizes)
        self.weights, self.biases = [], []
        last = len(sizes) - 2
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = final_gain if i == last else hidden_gain
            self.weights.append(ad.Tensor(orthogonal(rng, a, b, gain), requires_grad=True))
            self.biases.append(ad.Tensor(np.zeros((1, b)), requires_grad=True))

    def parameters(self):
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x) -> ad.Tensor:
        h = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        n = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, W), b)
            if i < n - 1:
                h = ad.tanh(h)
        return h

    def predict(self, x) -> np.ndarray:
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.data + b.data
            if i < n - 1:
                h = np.tanh(h)
        return h

    def state(self, prefix: str) -> dict:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{i}.W"] = W.data
            out[f"{prefix}.{i}.b"] = b.data
        return out

    def load_state(self, prefix: str, tensors: dict) -> None:
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            W.data = np.array(tensors[f"{prefix}.{i}.W"], dtype=np.float64)
            b.data = np.array(tensors[f"{prefix}.{i}.b"], dtype=np.float64)


def make_policy_net(num_features: int, cfg: PpoConfig, rng) -> MLP:
    sizes = [2 * num_features] + [cfg.hidden] * (cfg.policy_layers - 1) + [num_features]
    return MLP(sizes, rng, final_gain=0.01)


def make_value_net(num_features: int, cfg: PpoConfig, rng) -> MLP:
    sizes = [2 * num_features] + [cfg.hidden] * (cfg.value_layers - 1) + [1]
    return MLP(sizes, rng, final_gain=1.0)


# --------------------------------------------------------------------------
# masked distributions


def masked_log_softmax(logits, mask) -> np.ndarray:
    """Log-probabilities restricted to ``mask``; masked entries are -inf."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise DegenerateDistributionError("every action is masked")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    with np.errstate(under="ignore"):
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return z - lse


def policy_distribution(logits, mask) -> np.ndarray:
    """Softmax over the selectable actions; masked actions get probability 0."""
    with np.errstate(under="ignore"):
        return np.exp(masked_log_softmax(logits, mask))


def sample_action(dist, rng):
    """Gumbel-max draw from a probability vector (or a batch of them)."""
    dist = np.asarray(dist, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logp = np.log(dist)
    return gumbel_argmax(logp, rng)


def gumbel_argmax(logp, rng):
    g = rng.gumbel(size=np.shape(logp))
    out = np.argmax(logp + g, axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def greedy_action(dist):
    """Most probable action; the lowest index wins ties."""
    out = np.argmax(np.asarray(dist), axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def value_loss_printed(diff):
    """Piecewise value loss with a jump: 0.5 d^2 for |d| < 1, |d| otherwise.

    Not used for training.  ``huber_value`` is the continuous version (offset
    by 0.5 outside the unit interval) and has the same gradient.
    """
    d = np.abs(np.asarray(diff, dtype=np.float64))
    return np.where(d < 1.0, 0.5 * d * d, d)


def huber_value(diff) -> np.ndarray:
    d = np.abs(np.asarray(diff, dtype=np.float64))
    return np.where(d < 1.0, 0.5 * d * d, d - 0.5)


def clip_ratio(r, eps: float):
    return np.clip(r, 1.0 - eps, 1.0 + eps)


# --------------------------------------------------------------------------
# rollout storage and advantages


class RolloutBuffer:
    """(T, E)-shaped storage for one collection phase."""

    def __init__(self, steps: int, envs: int, state_dim: int, num_actions: int):
        self.T, self.E = steps, envs
        self.states = np.zeros((steps, envs, state_dim))
        self.masks = np.zeros((steps, envs, num_actions), dtype=bool)
        self.actions = np.zeros((steps, envs), dtype=np.int64)
        self.rewards = np.zeros((steps, envs))
        self.log_probs = np.zeros((steps, envs))
        self.values = np.zeros((steps, envs))
        self.dones = np.zeros((steps, envs))
        self.last_values = np.zeros(envs)
        self.advantages = None
        self.returns = None
        self.pos = 0

    def add(self, states, masks, actions, rewards, log_probs, values, dones) -> None:
        if self.pos >= self.T:
            raise IndexError("rollout buffer is full")
        t = self.pos
        self.states[t] = states
        self.masks[t] = masks
        self.actions[t] = actions
        self.rewards[t] = rewards
        self.log_probs[t] = log_probs
        self.values[t] = values
        self.dones[t] = dones
        self.pos += 1

    @property
    def full(self) -> bool:
        return self.pos == self.T

    def clear(self) -> None:
        self.pos = 0
        self.advantages = None
        self.returns = None

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape((self.T * self.E,) + a.shape[2:])


def compute_gae(buffer: RolloutBuffer, cfg: PpoConfig) -> None:
    if not buffer.full:
        raise ValueError("advantages need a complete collection phase")
    buffer.advantages = _kernels.gae(buffer.rewards, buffer.values, buffer.dones,
                                     buffer.last_values, cfg.gamma, cfg.lam)
    buffer.returns = buffer.advantages + buffer.values


# --------------------------------------------------------------------------
# losses and the update phase


def policy_terms(policy: MLP, states, masks, actions, old_log_probs, advantages, clip_eps):
    """Per-sample clipped policy loss and sum(pi ln pi) as (B, 1) tensors, plus the ratios."""
    logits = policy.forward(states)
    logp_all = ad.log_softmax_row(logits, masks)
    logp = ad.pick(logp_all, actions)
    ratio = ad.exp(ad.sub(logp, old_log_probs[:, None]))
    adv = advantages[:, None]
    surr = ad.minimum(ad.hadamard(ratio, adv), ad.hadamard(ad.clip(ratio, 1 - clip_eps, 1 + clip_eps), adv))
    lp = ad.scale(surr, -1.0)
    neg_entropy = ad.sum_rows(ad.hadamard(ad.exp(logp_all), logp_all))
    return lp, neg_entropy, ratio.data[:, 0]


def value_terms(value: MLP, states, returns) -> ad.Tensor:
    v = value.forward(states)
    return ad.huber(ad.sub(v, returns[:, None]))


@dataclass
class Optimizer:
    params: list
    state: ad.AdamState
    max_grad_norm: float


def make_optimizer(policy: MLP, value: MLP, cfg: PpoConfig) -> Optimizer:
    total = cfg.epochs * cfg.update_steps
    st = ad.AdamState(lr=cfg.lr, eps=1e-5, schedule=cfg.lr_schedule, total_steps=total)
    return Optimizer(policy.parameters() + value.parameters(), st, cfg.max_grad_norm)


def ppo_update(policy: MLP, value: MLP, opt: Optimizer, buffer: RolloutBuffer,
               cfg: PpoConfig, rng) -> dict:
    """``cfg.update_steps`` Adam steps on random minibatches of the buffer."""
    if buffer.advantages is None:
        raise ValueError("compute_gae must run before ppo_update")
    S = buffer.T * buffer.E
    states, masks = buffer.flat("states"), buffer.flat("masks")
    actions, old_lp = buffer.flat("actions"), buffer.flat("log_probs")
    adv_all, ret_all = buffer.flat("advantages"), buffer.flat("returns")
    B = min(cfg.batch_size, S)
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "clip_frac": [],
             "approx_kl": [], "grad_norm": []}
    first_ratio = None
    for _ in range(cfg.update_steps):
        idx = np.sort(rng.choice(S, size=B, replace=False))
        adv = adv_all[idx]
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        lp, le, ratio = policy_terms(policy, states[idx], masks[idx], actions[idx],
                                     old_lp[idx], adv, cfg.clip_eps)
        lv = value_terms(value, states[idx], ret_all[idx])
        lp_m, lv_m, le_m = ad.mean(lp), ad.mean(lv), ad.mean(le)
        loss = ad.add(ad.add(lp_m, ad.scale(lv_m, cfg.value_coef)), ad.scale(le_m, cfg.entropy_coef))
        if not np.isfinite(loss.item()):
            raise TrainingError(
                f"non-finite PPO loss: policy={lp_m.item()} value={lv_m.item()} "
                f"entropy={le_m.item()} max|adv|={np.abs(adv).max()} "
                f"ratio range=[{ratio.min()}, {ratio.max()}]")
        if first_ratio is None:
            first_ratio = ratio
        ad.zero_grad(opt.params)
        loss.backward()
        gnorm = ad.clip_grad_norm(opt.params, opt.max_grad_norm)
        ad.adam_step(opt.params, opt.state)
        stats["policy_loss"].append(lp_m.item())
        stats["value_loss"].append(lv_m.item())
        stats["entropy"].append(-le_m.item())
        stats["clip_frac"].append(float((np.abs(ratio - 1.0) > cfg.clip_eps).mean()))
        stats["approx_kl"].append(float(np.mean((ratio - 1.0) - np.log(ratio))))
        stats["grad_norm"].append(gnorm)
    out = {k: float(np.mean(v)) for k, v in stats.items()}
    out["first_ratio_max_dev"] = float(np.abs(first_ratio - 1.0).max())
    out["lr"] = opt.state.current_lr()
    return out


# --------------------------------------------------------------------------
# agent, rollouts, training


class Agent:
    def __init__(self, policy: MLP, value: MLP, cfg: PpoConfig, meta: dict | None = None):
        self.policy = policy
        self.value = value
        self.cfg = cfg
        self.meta = dict(meta or {})

    @classmethod
    def create(cls, num_features: int, cfg: PpoConfig, rng, meta=None) -> Agent:
        return cls(make_policy_net(num_features, cfg, rng), make_value_net(num_features, cfg, rng),
                   cfg, meta)

    def log_probs(self, states, masks) -> np.ndarray:
        return masked_log_softmax(self.policy.predict(states), masks)

    def greedy(self, states, masks) -> np.ndarray:
        return greedy_action(self.log_probs(states, masks))

    def snapshot(self) -> dict:
        return {**self.policy.state("policy"), **self.value.state("value")}

    def restore(self, tensors: dict) -> None:
        self.policy.load_state("policy", tensors)
        self.value.load_state("value", tensors)

    def save(self, path) -> None:
        save_tensors(path, self.snapshot(), {"config": asdict(self.cfg), **self.meta})

    @classmethod
    def load(cls, path) -> Agent:
        tensors, meta = load_tensors(path)
        cfg = PpoConfig(**meta.pop("config"))
        F = tensors[f"policy.{cfg.policy_layers - 1}.W"].shape[1]
        agent = cls.create(F, cfg, np.random.default_rng(0), meta)
        agent.restore(tensors)
        return agent


def greedy_rollout(agent: Agent, env: AttackEnv, goals, budget: int | None = None,
                   record=None):
    """Run the greedy policy on every goal in lockstep.

    Returns the terminal states and, if ``record`` lists step counts, a
    (len(goals), len(record)) array of target-label probabilities after that
    many steps.
    """
    budget = env.budget if budget is None else int(budget)
    states = [env.reset(g, budget) for g in goals]
    record = [] if record is None else list(record)
    probs = np.full((len(states), len(record)), np.nan)

    def note(step):
        for j, r in enumerate(record):
            if r == step:
                probs[:, j] = [s.last_prob for s in states]

    note(0)
    for step in range(budget):
        emb = np.stack([env.embed(s) for s in states])
        masks = np.stack([s.mask for s in states])
        acts = agent.greedy(emb, masks)
        states = [env.step(s, a)[0] for s, a in zip(states, acts)]
        note(step + 1)
    return states, probs


def evaluate(agent: Agent, env: AttackEnv, goals) -> float:
    states, _ = greedy_rollout(agent, env, goals)
    return float(np.mean([AttackEnv.success(s) for s in states]))


def eval_goal_grid(goals, limit: int, seed: int):
    goals = list(goals)
    if len(goals) <= limit:
        return goals
    rng = np.random.default_rng(seed)
    return [goals[i] for i in np.sort(rng.choice(len(goals), size=limit, replace=False))]


@dataclass
class TrainResult:
    agent: Agent
    log: list = field(default_factory=list)
    best_success: float = -1.0
    best_epoch: int = -1


def train(env: AttackEnv, goals, cfg: PpoConfig, seed: int, log_path=None,
          checkpoint_path=None, eval_goals=None) -> TrainResult:
    """Collect/update loop with periodic greedy evaluation and early stopping.

    ``goals`` is the pool episodes are drawn from (uniformly, at every reset).
    Evaluation runs after every ``cfg.eval_every`` collection phases and after
    the last one; the parameters with the best evaluation success are kept.
    """
    goals = list(goals)
    if not goals:
        raise ValueError("no training goals")
    seeds = np.random.SeedSequence(seed).spawn(3)
    init_rng, act_rng, batch_rng = (np.random.default_rng(s) for s in seeds)
    F = env.graph.num_features
    agent = Agent.create(F, cfg, init_rng, {"budget": env.budget, "num_features": F})
    opt = make_optimizer(agent.policy, agent.value, cfg)
    eval_goals = eval_goal_grid(goals if eval_goals is None else eval_goals,
                                cfg.eval_goals, seed)
    E, T = cfg.parallel_envs, cfg.steps_per_env
    buf = RolloutBuffer(T, E, 2 * F, F)

    def new_goal():
        return goals[int(act_rng.integers(len(goals)))]

    states = [env.reset(new_goal()) for _ in range(E)]
    ep_return = np.zeros(E)
    result = TrainResult(agent)
    best_snapshot, stale = None, 0
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            finished_returns, finished_success = [], []
            buf.clear()
            for _ in range(T):
                emb = np.stack([env.embed(s) for s in states])
                masks = np.stack([s.mask for s in states])
                logp = agent.log_probs(emb, masks)
                acts = gumbel_argmax(logp, act_rng)
                vals = agent.value.predict(emb)[:, 0]
                rewards, dones = np.zeros(E), np.zeros(E)
                for e in range(E):
                    nxt, r, done = env.step(states[e], acts[e])
                    rewards[e] = r
                    ep_return[e] += r
                    if done:
                        dones[e] = 1.0
                        finished_returns.append(ep_return[e])
                        finished_success.append(AttackEnv.success(nxt))
                        ep_return[e] = 0.0
                        nxt = env.reset(new_goal())
                    states[e] = nxt
                buf.add(emb, masks, acts, rewards, logp[np.arange(E), acts], vals, dones)
            buf.last_values = agent.value.predict(np.stack([env.embed(s) for s in states]))[:, 0]
            compute_gae(buf, cfg)
            stats = ppo_update(agent.policy, agent.value, opt, buf, cfg, batch_rng)
            rec = {"epoch": epoch, **stats,
                   "episodes": len(finished_returns),
                   "mean_return": float(np.mean(finished_returns)) if finished_returns else None,
                   "train_success": float(np.mean(finished_success)) if finished_success else None}
            if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
                sr = evaluate(agent, env, eval_goals)
                rec["eval_success"] = sr
                if sr > result.best_success:
                    result.best_success, result.best_epoch = sr, epoch
                    best_snapshot = {k: v.copy() for k, v in agent.snapshot().items()}
                    stale = 0
                    if checkpoint_path:
                        agent.save(checkpoint_path)
                else:
                    stale += 1
            result.log.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                log_fh.flush()
            log.info("epoch %d: %s", epoch, {k: v for k, v in rec.items() if v is not None})
            if stale >= cfg.patience:
                log.info("early stop after %d evaluations without improvement", stale)
                break
    finally:
        if log_fh:
            log_fh.close()
    if best_snapshot is not None:
        agent.restore(best_snapshot)
    return result


def goal_grid(targets, num_labels: int):
    return [AttackGoal(int(t), y) for t in targets for y in range(num_labels)]


def load_agent(path) -> Agent:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"agent checkpoint not found: {p} (run `snia agent train` first)")
    return Agent.load(p)
