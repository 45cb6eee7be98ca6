"""Learning stack: constrained PPO with dual advantages, plus baselines.

The constrained agent maximizes reward subject to an episode-cost budget.
Each epoch the non-negative multiplier climbs on the observed mean episode
cost, then 40 minibatch iterations ascend a clipped importance-ratio
surrogate built from the combined advantage A_r - lambda * A_c (normalized
after combination), updating actor, reward critic and cost critic in that
order on the same minibatch. Baselines share the env and network substrate:
nearest-station greedy, DQN, REINFORCE, one-step actor-critic, reward-only
PPO, and PPO on a min-max penalty-shaped reward calibrated on its first
epoch. The full method pairs the constrained agent with the online demand
predictor; with augmentation disabled it reduces exactly to the
constrained-PPO baseline.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .env import CouplingEnv, EnvError, EpisodeMetrics, greedy_station
from .nn import (Adam, DenseNet, assign_params, categorical_sample,
                 load_params, log_softmax, save_params)
from .power import PowerFlowError
from .predictor import OnlinePredictor
from .scenario import ScenarioConfig, TrainConfig

METHODS = ("opsrl", "ppolag", "ppo", "ppopenalty", "dqn", "reinforce",
           "actorcritic", "greedy")
AUGMENTED = ("opsrl", "ppolag")     # padded state layout, constrained agent


# ---------------------------------------------------------------------------
# Advantage and multiplier math
# ---------------------------------------------------------------------------

def compute_gae(rewards, values, gamma, lam):
    """Recursive generalized advantage estimation over one episode.

    ``values`` holds one more entry than ``rewards``; the final entry is the
    bootstrap value (zero at a terminal state).
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.shape[0] != r.shape[0] + 1:
        raise ValueError(f"need {r.shape[0] + 1} values (with bootstrap), "
                         f"got {v.shape[0]}")
    adv = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv


def combined_advantage(adv_r, adv_c, lam):
    """Reward advantage penalized by the multiplier-weighted cost advantage."""
    a_r = np.asarray(adv_r, dtype=float)
    a_c = np.asarray(adv_c, dtype=float)
    if a_r.shape != a_c.shape:
        raise ValueError("advantage streams differ in length")
    return a_r - lam * a_c


def lagrangian_update(lam, j_c, b=0.0, alpha=0.035):
    """Projected ascent on the constraint violation: never goes negative."""
    return max(0.0, lam + alpha * (j_c - b))


def clipped_surrogate(zeta, adv, clip):
    """Per-sample objective contributions min(zeta*A, clip(zeta)*A)."""
    z = np.asarray(zeta, dtype=float)
    a = np.asarray(adv, dtype=float)
    return np.minimum(z * a, np.clip(z, 1.0 - clip, 1.0 + clip) * a)


def actor_objective(logits, actions, logp_old, adv, clip, ent_coef):
    """Minibatch actor loss and its exact gradient w.r.t. the logits.

    Gradient flows through the ratio only where the unclipped branch is the
    active minimum; the entropy bonus pulls toward uniform.
    Returns (loss, dloss/dlogits, info).
    """
    lp = log_softmax(np.asarray(logits, dtype=float))
    p = np.exp(lp)
    rows = np.arange(len(actions))
    zeta = np.exp(lp[rows, actions] - logp_old)
    contrib = clipped_surrogate(zeta, adv, clip)
    ent = -(p * lp).sum(axis=1)
    loss = -float(contrib.mean()) - ent_coef * float(ent.mean())

    unclipped = zeta * adv <= np.clip(zeta, 1.0 - clip, 1.0 + clip) * adv
    onehot = np.zeros_like(p)
    onehot[rows, actions] = 1.0
    g_sur = (unclipped * zeta * adv)[:, None] * (onehot - p)
    g_ent = -p * (lp + ent[:, None])
    dlogits = -(g_sur + ent_coef * g_ent) / len(actions)
    info = {"zeta": zeta, "contrib": contrib, "entropy": float(ent.mean()),
            "surrogate": float(contrib.mean())}
    return loss, dlogits, info


# ---------------------------------------------------------------------------
# Episode container
# ---------------------------------------------------------------------------

@dataclass
class EpisodeData:
    states: np.ndarray          # (T, D) as fed to the networks
    actions: np.ndarray         # (T,) int
    logps: np.ndarray           # (T,) log-prob of the taken action
    rewards: np.ndarray
    costs: np.ndarray
    values_r: np.ndarray        # critic outputs at collection time
    values_c: np.ndarray
    metrics: EpisodeMetrics


def episode_cost_return(ep: EpisodeData, gamma, discounted):
    if not discounted:
        return float(ep.costs.sum())
    return float(np.polynomial.polynomial.polyval(gamma, ep.costs))


# ---------------------------------------------------------------------------
# Constrained clipped-surrogate agent
# ---------------------------------------------------------------------------

class LagrangePPOAgent:
    """Actor with reward and cost critics and a non-negative multiplier.

    With ``constrained=False`` the cost critic and multiplier stay frozen
    and the agent is plain reward-only PPO.
    """

    def __init__(self, state_dim, n_actions, tc: TrainConfig, rng,
                 constrained=True):
        hidden = list(tc.hidden)
        self.actor = DenseNet([state_dim, *hidden, n_actions], rng)
        self.critic_r = DenseNet([state_dim, *hidden, 1], rng)
        self.critic_c = DenseNet([state_dim, *hidden, 1], rng)
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.tc = tc
        self.constrained = constrained
        self.lam = 0.0
        self.opt_actor = Adam(self.actor.param_dict(), tc.lr)
        self.opt_critic_r = Adam(self.critic_r.param_dict(), tc.lr)
        self.opt_critic_c = Adam(self.critic_c.param_dict(), tc.lr)

    def act(self, state, rng):
        """Sample an action; returns (action, logp, V_r, V_c)."""
        s = np.asarray(state, dtype=float)
        logits, _ = self.actor.forward(s)
        lp = log_softmax(logits)
        a = categorical_sample(np.exp(lp), rng)
        vr = float(self.critic_r.forward(s)[0][0])
        vc = float(self.critic_c.forward(s)[0][0])
        return a, float(lp[a]), vr, vc

    def act_greedy(self, state) -> int:
        logits, _ = self.actor.forward(np.asarray(state, dtype=float))
        return int(np.argmax(logits))

    def param_dict(self):
        out = {}
        for prefix, net in (("actor.", self.actor), ("vr.", self.critic_r),
                            ("vc.", self.critic_c)):
            for k, v in net.param_dict().items():
                out[prefix + k] = v
        return out


def ppo_update(agent: LagrangePPOAgent, episodes, rng):
    """One epoch of updates on a batch of complete episodes.

    Order per epoch: multiplier, then ``iters_per_epoch`` minibatch rounds of
    actor, reward critic, cost critic. Advantages are estimated against the
    collection-time values, combined, then normalized. Returns loss stats.
    """
    tc = agent.tc
    stats = {"j_c": 0.0}
    if agent.constrained:
        j_c = float(np.mean([episode_cost_return(ep, tc.gamma, tc.discounted_dual)
                             for ep in episodes]))
        agent.lam = lagrangian_update(agent.lam, j_c, tc.cost_budget,
                                      tc.lambda_lr)
        stats["j_c"] = j_c

    adv_r, adv_c, ret_r, ret_c = [], [], [], []
    for ep in episodes:
        a_r = compute_gae(ep.rewards, np.append(ep.values_r, 0.0),
                          tc.gamma, tc.gae_lambda)
        a_c = compute_gae(ep.costs, np.append(ep.values_c, 0.0),
                          tc.gamma, tc.gae_lambda)
        adv_r.append(a_r)
        adv_c.append(a_c)
        ret_r.append(a_r + ep.values_r)
        ret_c.append(a_c + ep.values_c)
    states = np.concatenate([ep.states for ep in episodes])
    actions = np.concatenate([ep.actions for ep in episodes])
    logp_old = np.concatenate([ep.logps for ep in episodes])
    ret_r = np.concatenate(ret_r)
    ret_c = np.concatenate(ret_c)
    adv = combined_advantage(np.concatenate(adv_r), np.concatenate(adv_c),
                             agent.lam) if agent.constrained \
        else np.concatenate(adv_r)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    n = len(states)
    batch = min(tc.batch, n)
    for it in range(tc.iters_per_epoch):
        mb = rng.choice(n, size=batch, replace=False) if n > batch \
            else np.arange(n)
        logits, cache = agent.actor.forward(states[mb])
        loss, dlogits, info = actor_objective(
            logits, actions[mb], logp_old[mb], adv[mb], tc.clip,
            tc.entropy_coef)
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite actor loss at minibatch {it}: "
                               f"surrogate {info['surrogate']}, "
                               f"entropy {info['entropy']}")
        if it == 0:
            stats["ratio_dev_first"] = float(np.abs(info["zeta"] - 1.0).mean())
            stats["surrogate_first"] = info["surrogate"]
        grads, _ = agent.actor.backward(cache, dlogits)
        agent.opt_actor.step(agent.actor.param_dict(), grads)
        stats["actor_loss"] = loss
        stats["entropy"] = info["entropy"]

        critic_plan = [(agent.critic_r, agent.opt_critic_r, ret_r, "critic_r_loss")]
        if agent.constrained:
            critic_plan.append((agent.critic_c, agent.opt_critic_c, ret_c,
                                "critic_c_loss"))
        for critic, opt, ret, key in critic_plan:
            v, vcache = critic.forward(states[mb])
            diff = v[:, 0] - ret[mb]
            vloss = float(np.mean(diff * diff))
            if not np.isfinite(vloss):
                raise RuntimeError(f"non-finite {key} at minibatch {it}")
            vgrads, _ = critic.backward(vcache, (2.0 * diff / len(mb))[:, None])
            opt.step(critic.param_dict(), vgrads)
            stats[key] = vloss
    stats["lam"] = agent.lam
    return stats


# ---------------------------------------------------------------------------
# Baseline agents
# ---------------------------------------------------------------------------

class ReinforceAgent:
    """Monte-Carlo policy gradient on discounted episode returns."""

    def __init__(self, state_dim, n_actions, tc: TrainConfig, rng):
        self.actor = DenseNet([state_dim, *tc.hidden, n_actions], rng)
        self.tc = tc
        self.n_actions = n_actions
        self.opt = Adam(self.actor.param_dict(), tc.lr)

    def act(self, state, rng):
        logits, _ = self.actor.forward(np.asarray(state, dtype=float))
        lp = log_softmax(logits)
        a = categorical_sample(np.exp(lp), rng)
        return a, float(lp[a])

    def act_greedy(self, state) -> int:
        logits, _ = self.actor.forward(np.asarray(state, dtype=float))
        return int(np.argmax(logits))

    def update(self, states, actions, rewards):
        """One gradient step on a complete episode."""
        g = np.empty(len(rewards))
        acc = 0.0
        for t in range(len(rewards) - 1, -1, -1):
            acc = rewards[t] + self.tc.gamma * acc
            g[t] = acc
        if len(g) > 1 and g.std() > 1e-8:
            g = (g - g.mean()) / g.std()
        logits, cache = self.actor.forward(np.asarray(states, dtype=float))
        lp = log_softmax(logits)
        p = np.exp(lp)
        onehot = np.zeros_like(p)
        rows = np.arange(len(actions))
        onehot[rows, actions] = 1.0
        dlogits = -(g[:, None] * (onehot - p)) / len(actions)
        grads, _ = self.actor.backward(cache, dlogits)
        self.opt.step(self.actor.param_dict(), grads)
        return float(-(lp[rows, actions] * g).mean())

    def param_dict(self):
        return {"actor." + k: v for k, v in self.actor.param_dict().items()}


class ActorCriticAgent:
    """One-step TD actor-critic; updates once per episode, batched."""

    def __init__(self, state_dim, n_actions, tc: TrainConfig, rng):
        self.actor = DenseNet([state_dim, *tc.hidden, n_actions], rng)
        self.critic = DenseNet([state_dim, *tc.hidden, 1], rng)
        self.tc = tc
        self.n_actions = n_actions
        self.opt_actor = Adam(self.actor.param_dict(), tc.lr)
        self.opt_critic = Adam(self.critic.param_dict(), tc.lr)

    act = ReinforceAgent.act
    act_greedy = ReinforceAgent.act_greedy

    def update(self, states, actions, rewards):
        s = np.asarray(states, dtype=float)
        r = np.asarray(rewards, dtype=float)
        v, vcache = self.critic.forward(s)
        v = v[:, 0]
        v_next = np.append(v[1:], 0.0)          # terminal bootstrap
        td = r + self.tc.gamma * v_next - v

        logits, cache = self.actor.forward(s)
        lp = log_softmax(logits)
        p = np.exp(lp)
        onehot = np.zeros_like(p)
        onehot[np.arange(len(actions)), actions] = 1.0
        dlogits = -(td[:, None] * (onehot - p)) / len(actions)
        grads, _ = self.actor.backward(cache, dlogits)
        self.opt_actor.step(self.actor.param_dict(), grads)

        # critic chases the frozen TD target
        vgrads, _ = self.critic.backward(vcache, (-2.0 * td / len(td))[:, None])
        self.opt_critic.step(self.critic.param_dict(), vgrads)
        return float(np.mean(td * td))

    def param_dict(self):
        out = {"actor." + k: v for k, v in self.actor.param_dict().items()}
        out.update({"critic." + k: v for k, v in self.critic.param_dict().items()})
        return out


class DQNAgent:
    """Q-learning with replay, a periodically synced target net and
    linearly annealed epsilon-greedy exploration."""

    REPLAY_CAP = 10_000
    TARGET_SYNC = 200
    EPS_START, EPS_END = 1.0, 0.05

    def __init__(self, state_dim, n_actions, tc: TrainConfig, rng):
        self.q = DenseNet([state_dim, *tc.hidden, n_actions], rng)
        self.target = DenseNet([state_dim, *tc.hidden, n_actions], rng)
        self._sync_target()
        self.tc = tc
        self.n_actions = n_actions
        self.opt = Adam(self.q.param_dict(), tc.lr)
        self.replay = deque(maxlen=self.REPLAY_CAP)
        self.updates = 0

    def _sync_target(self):
        assign_params(self.target.param_dict(),
                      {k: v.copy() for k, v in self.q.param_dict().items()})

    def epsilon(self, progress):
        """progress: fraction of planned episodes done; anneal over first 80%."""
        frac = min(1.0, progress / 0.8) if progress >= 0 else 0.0
        return self.EPS_START + (self.EPS_END - self.EPS_START) * frac

    def act(self, state, rng, eps):
        if rng.random() < eps:
            return int(rng.integers(self.n_actions))
        return self.act_greedy(state)

    def act_greedy(self, state) -> int:
        qv, _ = self.q.forward(np.asarray(state, dtype=float))
        return int(np.argmax(qv))

    def push(self, s, a, r, s_next, done):
        self.replay.append((s, a, r, s_next, done))

    def update_step(self, rng):
        batch = self.tc.batch
        if len(self.replay) < batch:
            return None
        idx = rng.choice(len(self.replay), size=batch, replace=False)
        s = np.stack([self.replay[i][0] for i in idx])
        a = np.array([self.replay[i][1] for i in idx], dtype=int)
        r = np.array([self.replay[i][2] for i in idx])
        s2 = np.stack([self.replay[i][3] for i in idx])
        done = np.array([float(self.replay[i][4]) for i in idx])

        q_next, _ = self.target.forward(s2)
        target = r + self.tc.gamma * (1.0 - done) * q_next.max(axis=1)
        q, cache = self.q.forward(s)
        rows = np.arange(batch)
        diff = q[rows, a] - target
        loss = float(np.mean(diff * diff))
        dq = np.zeros_like(q)
        dq[rows, a] = 2.0 * diff / batch
        grads, _ = self.q.backward(cache, dq)
        self.opt.step(self.q.param_dict(), grads)
        self.updates += 1
        if self.updates % self.TARGET_SYNC == 0:
            self._sync_target()
        return loss

    def param_dict(self):
        out = {"q." + k: v for k, v in self.q.param_dict().items()}
        out.update({"tgt." + k: v for k, v in self.target.param_dict().items()})
        return out


# ---------------------------------------------------------------------------
# Rollout collection
# ---------------------------------------------------------------------------

def pad_width(cfg: ScenarioConfig) -> int:
    """Forecast slots appended to the state for the augmented methods."""
    return cfg.predictor.dec_len * cfg.n_stations


def _net_input(state, predictor, pad):
    if predictor is not None:
        return predictor.augment(state)
    if pad:
        return np.concatenate([state, np.zeros(pad)])
    return state


def run_ppo_episode(env: CouplingEnv, agent, rng, ep_seed,
                    predictor: OnlinePredictor | None = None,
                    pad: int = 0) -> EpisodeData:
    """Collect one on-policy episode, timing only the decision portion."""
    state = env.reset(ep_seed)
    if predictor is not None:
        predictor.start_episode()
        predictor.observe(env.minute_log)
    cols = ([], [], [], [], [], [], [])
    while True:
        t0 = time.perf_counter()
        s_in = _net_input(state, predictor, pad)
        a, lp, vr, vc = agent.act(s_in, rng)
        dt = time.perf_counter() - t0
        out = env.apply_action(a, decision_s=dt)
        if predictor is not None:
            predictor.observe(env.minute_log)
        for col, val in zip(cols, (s_in, a, lp, out.reward, vr, vc, out.cost)):
            col.append(val)
        if out.terminal:
            break
        state = out.state
    s, a, lp, r, vr, vc, c = cols
    return EpisodeData(np.array(s), np.array(a, dtype=int), np.array(lp),
                       np.array(r), np.array(c), np.array(vr), np.array(vc),
                       env.episode_metrics())


def greedy_action(env: CouplingEnv) -> int:
    return greedy_station(env.road, env.stations, env.pending_vehicle.origin)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    method: str
    seed: int
    agent: object
    predictor: OnlinePredictor | None
    curve: list                  # one dict per epoch


def _curve_row(epoch, episodes, lam, predictor):
    ploss = float("nan")
    if predictor is not None and predictor.model.losses:
        ploss = predictor.model.losses[-1]
    return {
        "epoch": epoch,
        "mean_ttt": float(np.mean([ep.metrics.ttt_s for ep in episodes])),
        "mean_cvv": float(np.mean([ep.metrics.cvv for ep in episodes])),
        "lam": lam,
        "predictor_loss": ploss,
        "mean_reward": float(np.mean([ep.rewards.sum() for ep in episodes])),
        "mean_cost": float(np.mean([ep.costs.sum() for ep in episodes])),
    }


def _minmax_norm(x, lo, hi):
    span = hi - lo
    if span <= 1e-12:
        return np.zeros_like(x)
    return (x - lo) / span


def train(cfg: ScenarioConfig, method: str, seed: int, epochs=None,
          episodes_per_epoch=None, progress=None) -> TrainResult:
    """Train one method on one seed; returns the agent and per-epoch curve.

    Episode seeds advance deterministically from ``seed``; the policy,
    update and predictor random streams are seeded independently so that
    disabling augmentation leaves trajectories bit-identical.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method '{method}'")
    if method == "greedy":
        raise ValueError("greedy has no training phase; evaluate it directly")
    tc = cfg.training
    epochs = tc.epochs if epochs is None else int(epochs)
    n_ep = tc.episodes_per_epoch if episodes_per_epoch is None \
        else int(episodes_per_epoch)
    env = CouplingEnv(cfg)
    pad = pad_width(cfg) if method in AUGMENTED else 0
    dim = env.state_dim + pad
    agent_rng = np.random.default_rng([seed, cfg.seed, 4])
    act_rng = np.random.default_rng([seed, cfg.seed, 2])
    upd_rng = np.random.default_rng([seed, cfg.seed, 5])
    predictor = OnlinePredictor(cfg, seed) if method == "opsrl" else None

    if method in ("opsrl", "ppolag", "ppo", "ppopenalty"):
        agent = LagrangePPOAgent(dim, env.action_dim, tc, agent_rng,
                                 constrained=method in AUGMENTED)
        return _train_ppo_family(cfg, method, seed, env, agent, predictor,
                                 pad, epochs, n_ep, act_rng, upd_rng, progress)
    if method == "dqn":
        agent = DQNAgent(dim, env.action_dim, tc, agent_rng)
        return _train_dqn(cfg, seed, env, agent, epochs, n_ep, act_rng,
                          upd_rng, progress)
    agent_cls = ReinforceAgent if method == "reinforce" else ActorCriticAgent
    agent = agent_cls(dim, env.action_dim, tc, agent_rng)
    return _train_episodic_pg(cfg, method, seed, env, agent, epochs, n_ep,
                              act_rng, progress)


def _wrap_env_error(exc, epoch, episode, method):
    return RuntimeError(f"{method} epoch {epoch} episode {episode}: {exc}")


def _train_ppo_family(cfg, method, seed, env, agent, predictor, pad, epochs,
                      n_ep, act_rng, upd_rng, progress):
    curve = []
    bounds = None        # penalty shaping calibrated on the first epoch
    ep_index = 0
    for epoch in range(epochs):
        episodes = []
        for k in range(n_ep):
            try:
                episodes.append(run_ppo_episode(
                    env, agent, act_rng, seed * 1_000_000 + ep_index,
                    predictor, pad))
            except (EnvError, PowerFlowError) as exc:
                raise _wrap_env_error(exc, epoch, k, method) from exc
            ep_index += 1
        update_eps = episodes
        if method == "ppopenalty":
            if bounds is None:
                all_r = np.concatenate([ep.rewards for ep in episodes])
                all_c = np.concatenate([ep.costs for ep in episodes])
                bounds = (all_r.min(), all_r.max(), all_c.min(), all_c.max())
            update_eps = [replace(ep, rewards=_minmax_norm(ep.rewards, *bounds[:2])
                                  - _minmax_norm(ep.costs, *bounds[2:]))
                          for ep in episodes]
        stats = ppo_update(agent, update_eps, upd_rng)
        curve.append(_curve_row(epoch, episodes, agent.lam, predictor))
        curve[-1]["ratio_dev_first"] = stats["ratio_dev_first"]
        if progress:
            progress(curve[-1])
    return TrainResult(method, seed, agent, predictor, curve)


def _train_dqn(cfg, seed, env, agent, epochs, n_ep, act_rng, upd_rng,
               progress):
    curve = []
    total = max(1, epochs * n_ep)
    ep_index = 0
    for epoch in range(epochs):
        episodes = []
        for k in range(n_ep):
            eps = agent.epsilon(ep_index / total)
            try:
                state = env.reset(seed * 1_000_000 + ep_index)
                rewards, costs = [], []
                while True:
                    t0 = time.perf_counter()
                    a = agent.act(state, act_rng, eps)
                    dt = time.perf_counter() - t0
                    out = env.apply_action(a, decision_s=dt)
                    nxt = out.state if not out.terminal \
                        else np.zeros_like(state)
                    agent.push(state, a, out.reward, nxt, out.terminal)
                    agent.update_step(upd_rng)
                    rewards.append(out.reward)
                    costs.append(out.cost)
                    if out.terminal:
                        break
                    state = out.state
            except (EnvError, PowerFlowError) as exc:
                raise _wrap_env_error(exc, epoch, k, "dqn") from exc
            episodes.append(EpisodeData(
                np.empty(0), np.empty(0, dtype=int), np.empty(0),
                np.array(rewards), np.array(costs), np.empty(0), np.empty(0),
                env.episode_metrics()))
            ep_index += 1
        curve.append(_curve_row(epoch, episodes, 0.0, None))
        if progress:
            progress(curve[-1])
    return TrainResult("dqn", seed, agent, None, curve)


def _train_episodic_pg(cfg, method, seed, env, agent, epochs, n_ep, act_rng,
                       progress):
    curve = []
    ep_index = 0
    for epoch in range(epochs):
        episodes = []
        for k in range(n_ep):
            try:
                state = env.reset(seed * 1_000_000 + ep_index)
                S, A, R, C = [], [], [], []
                while True:
                    t0 = time.perf_counter()
                    a, _ = agent.act(state, act_rng)
                    dt = time.perf_counter() - t0
                    out = env.apply_action(a, decision_s=dt)
                    S.append(state)
                    A.append(a)
                    R.append(out.reward)
                    C.append(out.cost)
                    if out.terminal:
                        break
                    state = out.state
            except (EnvError, PowerFlowError) as exc:
                raise _wrap_env_error(exc, epoch, k, method) from exc
            agent.update(S, A, R)
            episodes.append(EpisodeData(
                np.empty(0), np.empty(0, dtype=int), np.empty(0),
                np.array(R), np.array(C), np.empty(0), np.empty(0),
                env.episode_metrics()))
            ep_index += 1
        curve.append(_curve_row(epoch, episodes, 0.0, None))
        if progress:
            progress(curve[-1])
    return TrainResult(method, seed, agent, None, curve)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalEpisode:
    seed: int
    metrics: EpisodeMetrics
    rewards: np.ndarray
    costs: np.ndarray
    minute_log: list
    droop_log: list
    trace: list | None


def evaluate(cfg: ScenarioConfig, method: str, agent=None, predictor=None,
             seeds=(0,), compliance=None, trace=False):
    """Deterministic greedy-action rollouts; returns one record per seed.

    The predictor, when present, keeps forecasting but never trains during
    evaluation.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method '{method}'")
    if method != "greedy" and agent is None:
        raise ValueError(f"method '{method}' needs a trained agent")
    env = CouplingEnv(cfg, trace=trace)
    if compliance is not None:
        env.set_compliance(compliance)
    pad = pad_width(cfg) if method in AUGMENTED else 0
    if predictor is not None:
        predictor.model.converged = True      # freeze learning, keep predicting
    records = []
    for es in seeds:
        state = env.reset(int(es))
        if predictor is not None:
            predictor.start_episode()
            predictor.observe(env.minute_log)
        rewards, costs = [], []
        while True:
            t0 = time.perf_counter()
            if method == "greedy":
                a = greedy_action(env)
            else:
                a = agent.act_greedy(_net_input(state, predictor, pad))
            dt = time.perf_counter() - t0
            out = env.apply_action(a, decision_s=dt)
            if predictor is not None:
                predictor.observe(env.minute_log)
            rewards.append(out.reward)
            costs.append(out.cost)
            if out.terminal:
                break
            state = out.state
        records.append(EvalEpisode(int(es), env.episode_metrics(),
                                   np.array(rewards), np.array(costs),
                                   list(env.minute_log), list(env.droop_log),
                                   list(env.trace) if trace else None))
    return records


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, agent, predictor: OnlinePredictor | None = None):
    params = dict(agent.param_dict())
    if hasattr(agent, "lam"):
        params["meta.lam"] = np.array([agent.lam])
    if hasattr(agent, "updates"):
        params["meta.updates"] = np.array([agent.updates], dtype=float)
    if predictor is not None:
        for k, v in predictor.model.param_dict().items():
            params["pred." + k] = v
        params["predmeta.losses"] = np.array(predictor.model.losses)
        params["predmeta.converged"] = np.array(
            [float(predictor.model.converged)])
    save_params(path, params)


def load_checkpoint(path, agent, predictor: OnlinePredictor | None = None):
    loaded = load_params(path)
    assign_params(agent.param_dict(), loaded)
    if hasattr(agent, "lam"):
        agent.lam = float(loaded["meta.lam"][0])
    if hasattr(agent, "updates"):
        agent.updates = int(loaded["meta.updates"][0])
    if predictor is not None:
        assign_params(predictor.model.param_dict(), loaded, prefix="pred.")
        predictor.model.losses = list(loaded["predmeta.losses"])
        predictor.model.converged = bool(loaded["predmeta.converged"][0])
