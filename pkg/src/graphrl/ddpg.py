"""Deterministic policy-gradient machinery: replay buffer, exploration,
the closed-form safe layer, the actor-critic step for the streaming problem,
and the critic-free step for link scheduling (whose reward is closed form and
differentiable, so no value network is needed).

Network "nets" objects bundle actor/critic specs, parameters, target copies,
and optimizers; two families exist per problem: graph-based (shared
processors over the state graph) and dense (flattened state matrix).
"""

from dataclasses import dataclass

import numpy as np

from . import env_d2d
from .hetgraph import (
    PRA_USER,
    build_d2d_state_graph,
    build_pra_state_graph,
)
from .numcore import AdamState, adam_step, fnn_apply, fnn_backward_from_cache, init_fnn
from .pegnn import (
    FnnReadout,
    d2d_actor_readout,
    d2d_actor_spec,
    gnn_backward,
    gnn_forward_stacked,
    init_gnn_params,
    pra_actor_readout,
    pra_actor_spec,
    pra_critic_readout,
    pra_critic_spec,
    readout,
    readout_backward,
)


@dataclass
class Experience:
    """One transition; extras ride on the observation snapshots."""

    state: object
    action: np.ndarray
    reward: float
    next_state: object
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring with uniform batch sampling (no replacement)."""

    def __init__(self, capacity=1_000_000):
        self.capacity = capacity
        self._items = []
        self._cursor = 0

    def append(self, item):
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._cursor] = item
            self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, batch_size, rng):
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]

    def __len__(self):
        return len(self._items)


@dataclass
class AgentConfig:
    gamma: float = 1.0
    actor_lr: float = 0.001
    critic_lr: float = 0.0001
    batch_size: int = 1024
    buffer_capacity: int = 1_000_000
    noise_var: float = 0.1            # initial exploration variance, decays to 0
    target_tau: float = 0.001
    penalty_weight: float = 0.1       # lambda in the streaming reward
    lambda1: float = 1.0              # critic readout weights
    lambda2: float = 0.0
    xi: float = 0.5                   # schedule quantization threshold
    eta1: float = 0.1                 # barrier weights in the scheduling reward
    eta2: float = 0.0001
    # action map: physical = (bias + net_output) * scale, clipped to bounds
    action_scale: float = 1.0
    action_bias: float = 1.0
    reward_scale: float = 1.0
    huber_delta: float = 1.0          # critic error scale beyond which loss is linear
    grad_clip: float = 1.0            # global-norm clip for each optimizer step; 0 = off
    # link-scheduling edge features: (snr_db - center) / spread
    feat_center_db: float = 70.0
    feat_spread_db: float = 15.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.noise_var < 0:
            raise ValueError("noise variance must be >= 0")
        if not 0.0 < self.xi < 1.0:
            raise ValueError("xi must be in (0, 1)")


def qos_threshold(buffer_bits, next_seg_bits, playing_seg_bits, frame_s):
    """Minimum rate that keeps the next segment fully buffered in time."""
    return (next_seg_bits + playing_seg_bits - buffer_bits) / frame_s


def safe_layer(action, buffer_bits, next_seg_bits, playing_seg_bits, frame_s):
    """Replace any rate that would violate the buffer deadline by the exact
    threshold; rates already above it pass through unchanged."""
    a = np.asarray(action, dtype=np.float64)
    thr = qos_threshold(
        np.asarray(buffer_bits, dtype=np.float64),
        np.asarray(next_seg_bits, dtype=np.float64),
        np.asarray(playing_seg_bits, dtype=np.float64),
        frame_s,
    )
    ok = a >= thr
    return thr * (1.0 - ok) + a * ok


def quantize(rho_relaxed, xi):
    """psi(x; xi): 0 below the threshold, 1 otherwise (boundary maps to 1)."""
    return (np.asarray(rho_relaxed, dtype=np.float64) >= xi).astype(np.float64)


def noise_variance(step, budget, initial=0.1):
    """Exploration variance decayed linearly from `initial` to 0."""
    if budget <= 0:
        return 0.0
    return initial * max(0.0, 1.0 - step / budget)


def select_action(policy, obs, noise_var, rng, noise_scale=1.0, lo=0.0, hi=None):
    """Deterministic policy output plus Gaussian exploration, clamped to the
    valid range. With noise_var = 0 this is exactly policy(obs)."""
    a = np.asarray(policy(obs), dtype=np.float64)
    if noise_var > 0.0:
        a = a + rng.normal(0.0, np.sqrt(noise_var), size=a.shape) * noise_scale
    return np.clip(a, lo, hi)


# -- streaming problem: actor-critic over state graphs -------------------------


def _effective_bounds(obs_list, cfg):
    """Per-sample action bounds: non-negative, safe threshold on boundary
    frames, capped by the power-budget rate."""
    lo = np.stack([np.maximum(o.safe_threshold, 0.0) for o in obs_list])
    hi = np.stack([o.rate_max for o in obs_list])
    return lo, hi


class GnnVideoNets:
    """Graph actor + critic for the streaming problem."""

    kind = "gnn"

    def __init__(self, k, m, history_len, cfg, rng, dims=(128, 128, 1),
                 proc_hidden=(128,)):
        self.k, self.m = k, m
        self.cfg = cfg
        self.actor_spec = pra_actor_spec(k, m, history_len, dims, proc_hidden)
        self.critic_spec = pra_critic_spec(k, m, history_len, dims, proc_hidden)
        self.actor = init_gnn_params(self.actor_spec, rng)
        self.critic = init_gnn_params(self.critic_spec, rng)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_readout = pra_actor_readout()
        self.critic_readout = pra_critic_readout(cfg.lambda1, cfg.lambda2)
        self.actor_opt = AdamState(lr=cfg.actor_lr)
        self.critic_opt = AdamState(lr=cfg.critic_lr)
        self._template = build_pra_state_graph(
            np.zeros((k, 3)), np.zeros((k, m, history_len + 1)), k, m
        )
        self._groups = {
            key: (agg, nbr)
            for key, (agg, nbr, _) in self._template.edge_groups().items()
        }

    def _group_feats(self, edge_stack):
        out = {}
        for key, (agg, nbr) in self._groups.items():
            if key[0] == PRA_USER:
                out[key] = edge_stack[:, agg, nbr, :]
            else:
                out[key] = edge_stack[:, nbr, agg, :]
        return out

    def _vfeats(self, obs_list, actions=None):
        users = np.stack([o.user_features for o in obs_list])
        if actions is not None:
            users = np.concatenate([users, actions[..., None]], axis=2)
        edges = np.stack([o.edge_features for o in obs_list])
        return users, self._group_feats(edges)

    def mu(self, obs_list, which="online"):
        """Actor forward; returns (net outputs (B, K), cache)."""
        params = self.actor if which == "online" else self.actor_target
        users, groups = self._vfeats(obs_list)
        reps, cache = gnn_forward_stacked(
            self.actor_spec, params, self._template,
            {"user": users, "du": np.zeros((len(obs_list), self.m, 0))}, groups,
        )
        return readout(self.actor_readout, reps), (cache, reps, which)

    def mu_backward(self, mu_cache, d_out):
        cache, reps, which = mu_cache
        upstream = readout_backward(self.actor_readout, reps, d_out)
        params = self.actor if which == "online" else self.actor_target
        grads, _ = gnn_backward(self.actor_spec, params, cache, upstream)
        return grads

    def q(self, obs_list, actions_norm, which="online"):
        params = self.critic if which == "online" else self.critic_target
        users, groups = self._vfeats(obs_list, actions=actions_norm)
        reps, cache = gnn_forward_stacked(
            self.critic_spec, params, self._template,
            {"user": users, "du": np.zeros((len(obs_list), self.m, 0))}, groups,
        )
        return readout(self.critic_readout, reps), (cache, reps, which)

    def q_backward(self, q_cache, d_q, with_action_grad=False):
        cache, reps, which = q_cache
        upstream = readout_backward(self.critic_readout, reps, d_q)
        params = self.critic if which == "online" else self.critic_target
        grads, feat_grads = gnn_backward(self.critic_spec, params, cache, upstream)
        d_action = feat_grads["user"][:, :, 3] if with_action_grad else None
        return grads, d_action

    def soft_update(self, tau):
        for name, arr in self.actor_target.named().items():
            arr += tau * (self.actor.named()[name] - arr)
        for name, arr in self.critic_target.named().items():
            arr += tau * (self.critic.named()[name] - arr)

    def actor_params(self):
        return self.actor.named()

    def critic_params(self):
        return self.critic.named()

    def n_params(self):
        return self.actor.n_params() + self.critic.n_params()


class FnnVideoNets:
    """Dense actor + critic over the flattened state matrix."""

    kind = "fnn"

    def __init__(self, k, m, history_len, cfg, rng, widths=(200, 200)):
        self.k, self.m = k, m
        self.cfg = cfg
        state_dim = k * (3 + m * (history_len + 1))
        self.actor_fnn = init_fnn(
            [state_dim, *widths, k], ["relu"] * len(widths) + ["identity"], rng
        )
        self.critic_fnn = init_fnn(
            [state_dim + k, *widths, 1], ["relu"] * len(widths) + ["identity"], rng
        )
        self.actor_target = self.actor_fnn.copy()
        self.critic_target = self.critic_fnn.copy()
        self.actor_opt = AdamState(lr=cfg.actor_lr)
        self.critic_opt = AdamState(lr=cfg.critic_lr)

    @staticmethod
    def flatten(obs_list):
        return np.stack(
            [
                np.concatenate(
                    [
                        np.concatenate([o.user_features, o.edge_features.reshape(
                            o.user_features.shape[0], -1)], axis=1).reshape(-1)
                    ]
                )
                for o in obs_list
            ]
        )

    def mu(self, obs_list, which="online"):
        params = self.actor_fnn if which == "online" else self.actor_target
        x = self.flatten(obs_list)
        y, cache = fnn_apply(params, x)
        return y, (cache, which)

    def mu_backward(self, mu_cache, d_out):
        cache, which = mu_cache
        params = self.actor_fnn if which == "online" else self.actor_target
        w_g, b_g, _ = fnn_backward_from_cache(params, cache, d_out)
        return _fnn_grad_dict(params, w_g, b_g)

    def q(self, obs_list, actions_norm, which="online"):
        params = self.critic_fnn if which == "online" else self.critic_target
        x = np.concatenate([self.flatten(obs_list), actions_norm], axis=1)
        y, cache = fnn_apply(params, x)
        return y[:, 0], (cache, which)

    def q_backward(self, q_cache, d_q, with_action_grad=False):
        cache, which = q_cache
        params = self.critic_fnn if which == "online" else self.critic_target
        w_g, b_g, dx = fnn_backward_from_cache(params, cache, d_q[:, None])
        d_action = dx[:, -self.k:] if with_action_grad else None
        return _fnn_grad_dict(params, w_g, b_g), d_action

    def soft_update(self, tau):
        for src, dst in (
            (self.actor_fnn, self.actor_target),
            (self.critic_fnn, self.critic_target),
        ):
            for name, arr in dst.named().items():
                arr += tau * (src.named()[name] - arr)

    def actor_params(self):
        return self.actor_fnn.named()

    def critic_params(self):
        return self.critic_fnn.named()

    def n_params(self):
        return sum(a.size for a in self.actor_fnn.named().values()) + sum(
            a.size for a in self.critic_fnn.named().values()
        )


def _fnn_grad_dict(params, w_grads, b_grads):
    grads = {}
    for i in range(params.n_layers):
        grads[f"W{i}"] = w_grads[i]
        grads[f"b{i}"] = b_grads[i]
    return grads


class GnnFnnReadoutVideoNets(GnnVideoNets):
    """Ablation: graph bodies with dense readouts over concatenated vertex
    representations. Breaks the permutation property on purpose."""

    kind = "gnn-fnn-readout"

    def __init__(self, k, m, history_len, cfg, rng, dims=(32, 32, 8),
                 proc_hidden=(32,), readout_hidden=(64,)):
        super().__init__(k, m, history_len, cfg, rng, dims=dims,
                         proc_hidden=proc_hidden)
        d_last = dims[-1]
        self.actor_head = FnnReadout.build(
            self.actor_spec.schema, d_last, k, readout_hidden, rng
        )
        self.critic_head = FnnReadout.build(
            self.critic_spec.schema, d_last, 1, readout_hidden, rng
        )
        self.actor_head_target = FnnReadout(self.actor_head.params.copy())
        self.critic_head_target = FnnReadout(self.critic_head.params.copy())

    def _heads(self, which):
        if which == "online":
            return self.actor_head, self.critic_head
        return self.actor_head_target, self.critic_head_target

    def mu(self, obs_list, which="online"):
        params = self.actor if which == "online" else self.actor_target
        users, groups = self._vfeats(obs_list)
        reps, cache = gnn_forward_stacked(
            self.actor_spec, params, self._template,
            {"user": users, "du": np.zeros((len(obs_list), self.m, 0))}, groups,
        )
        head, _ = self._heads(which)
        out, head_cache = head.forward(self.actor_spec.schema, reps)
        return out, (cache, head_cache, which)

    def mu_backward(self, mu_cache, d_out):
        cache, head_cache, which = mu_cache
        head, _ = self._heads(which)
        head_grads, upstream = head.backward(self.actor_spec.schema, head_cache, d_out)
        params = self.actor if which == "online" else self.actor_target
        grads, _ = gnn_backward(self.actor_spec, params, cache, upstream)
        grads.update({f"actor_head.{k}": v for k, v in head_grads.items()})
        return grads

    def q(self, obs_list, actions_norm, which="online"):
        params = self.critic if which == "online" else self.critic_target
        users, groups = self._vfeats(obs_list, actions=actions_norm)
        reps, cache = gnn_forward_stacked(
            self.critic_spec, params, self._template,
            {"user": users, "du": np.zeros((len(obs_list), self.m, 0))}, groups,
        )
        _, head = self._heads(which)
        out, head_cache = head.forward(self.critic_spec.schema, reps)
        return out[:, 0], (cache, head_cache, which)

    def q_backward(self, q_cache, d_q, with_action_grad=False):
        cache, head_cache, which = q_cache
        _, head = self._heads(which)
        head_grads, upstream = head.backward(
            self.critic_spec.schema, head_cache, d_q[:, None]
        )
        params = self.critic if which == "online" else self.critic_target
        grads, feat_grads = gnn_backward(self.critic_spec, params, cache, upstream)
        grads.update({f"critic_head.{k}": v for k, v in head_grads.items()})
        d_action = feat_grads["user"][:, :, 3] if with_action_grad else None
        return grads, d_action

    def actor_params(self):
        out = dict(self.actor.named())
        out.update({f"actor_head.{k}": v for k, v in self.actor_head.named().items()})
        return out

    def critic_params(self):
        out = dict(self.critic.named())
        out.update({f"critic_head.{k}": v for k, v in self.critic_head.named().items()})
        return out

    def soft_update(self, tau):
        super().soft_update(tau)
        for src, dst in (
            (self.actor_head, self.actor_head_target),
            (self.critic_head, self.critic_head_target),
        ):
            for name, arr in dst.params.named().items():
                arr += tau * (src.params.named()[name] - arr)

    def n_params(self):
        return (
            super().n_params()
            + sum(a.size for a in self.actor_head.named().values())
            + sum(a.size for a in self.critic_head.named().values())
        )


def physical_action(net_out, cfg, lo, hi):
    """Map network output to a physical rate inside [lo, hi]."""
    return np.clip((cfg.action_bias + net_out) * cfg.action_scale, lo, hi)


def clip_gradients(grads, max_norm):
    """Scale a named gradient set so its global norm is at most max_norm."""
    if not max_norm:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return grads


def train_step_actor_critic(nets, buffer, cfg, rng):
    """One DDPG update: critic regression to the bootstrapped target, actor
    ascent through the critic (and through the safe layer's pass-through
    branch), then soft target updates.

    Returns None when the buffer cannot fill a batch yet (no-op signal).
    """
    if len(buffer) < cfg.batch_size:
        return None
    batch = buffer.sample(cfg.batch_size, rng)
    obs = [e.state for e in batch]
    next_obs = [e.next_state for e in batch]
    actions = np.stack([e.action for e in batch])
    rewards = np.array([e.reward for e in batch]) / cfg.reward_scale
    not_done = 1.0 - np.array([float(e.done) for e in batch])

    # critic target from the target policy's safe, clipped action
    mu_next, _ = nets.mu(next_obs, which="target")
    lo_n, hi_n = _effective_bounds(next_obs, cfg)
    a_next = physical_action(mu_next, cfg, lo_n, hi_n)
    q_next, _ = nets.q(next_obs, a_next / cfg.action_scale, which="target")
    target = rewards + cfg.gamma * not_done * q_next

    q_val, q_cache = nets.q(obs, actions / cfg.action_scale, which="online")
    err = q_val - target
    # Huber loss: quadratic near zero, linear beyond delta (robust to the
    # occasional saturated-frame reward spike)
    delta = cfg.huber_delta
    critic_loss = float(
        np.mean(np.where(np.abs(err) <= delta, 0.5 * err ** 2,
                         delta * (np.abs(err) - 0.5 * delta)))
    )
    d_err = np.clip(err, -delta, delta) / cfg.batch_size
    c_grads, _ = nets.q_backward(q_cache, d_err)
    adam_step(nets.critic_params(), clip_gradients(c_grads, cfg.grad_clip),
              nets.critic_opt)

    # actor: maximize Q(s, mu(s)) through the physical clamp and safe layer
    mu_out, mu_cache = nets.mu(obs, which="online")
    thr = np.stack([o.safe_threshold for o in obs])
    hi = np.stack([o.rate_max for o in obs])
    a_phys = (cfg.action_bias + mu_out) * cfg.action_scale
    a_clipped = np.clip(a_phys, 0.0, hi)
    passed = a_clipped >= thr
    a_safe = np.where(passed, a_clipped, thr)
    q_actor, qa_cache = nets.q(obs, a_safe / cfg.action_scale, which="online")
    actor_loss = float(-np.mean(q_actor))
    _, d_action = nets.q_backward(
        qa_cache, np.full(cfg.batch_size, -1.0 / cfg.batch_size),
        with_action_grad=True,
    )
    # the safe layer's replaced branch is constant in the action: zero
    # gradient there. At the physical bounds, gradients pass only when they
    # point back inside (d_action is d(loss)/da: positive means "decrease a").
    inside = (a_phys > 0.0) & (a_phys < hi)
    unpin = ((a_phys >= hi) & (d_action > 0)) | ((a_phys <= 0.0) & (d_action < 0))
    d_mu = d_action * passed * (inside | unpin)
    a_grads = nets.mu_backward(mu_cache, d_mu)
    adam_step(nets.actor_params(), clip_gradients(a_grads, cfg.grad_clip),
              nets.actor_opt)

    nets.soft_update(cfg.target_tau)
    return {
        "critic_loss": critic_loss,
        "actor_loss": actor_loss,
        "target_mean": float(np.mean(target)),
        "q_mean": float(np.mean(q_val)),
    }


# -- link scheduling: critic-free ascent on the closed-form reward -------------


class GnnD2dActor:
    """Graph actor mapping a gain matrix to a relaxed schedule in (0, 1)."""

    kind = "gnn"

    def __init__(self, k, cfg, rng, dims=(8, 8, 8, 8, 8, 1), proc_hidden=(16,)):
        self.k = k
        self.cfg = cfg
        self.spec = d2d_actor_spec(k, dims, proc_hidden)
        self.params = init_gnn_params(self.spec, rng)
        self.readout_spec = d2d_actor_readout()
        self.opt = AdamState(lr=cfg.actor_lr)
        self._template = build_d2d_state_graph(np.ones((k, k)))
        self._groups = {
            key: (agg, nbr)
            for key, (agg, nbr, _) in self._template.edge_groups().items()
        }

    def edge_features(self, instances):
        """Gain matrices to standardized SNR-dB features, (B, K, K)."""
        gains = np.stack([inst.gains for inst in instances])
        power = instances[0].tx_power
        noise = instances[0].noise_power
        snr_db = 10.0 * np.log10(gains * power / noise)
        return (snr_db - self.cfg.feat_center_db) / self.cfg.feat_spread_db

    def act(self, instances):
        feats = self.edge_features(instances)
        groups = {}
        for key, (agg, nbr) in self._groups.items():
            if key[0] == "tx":  # feature tensor is indexed [rx, tx]
                groups[key] = feats[:, nbr, agg, None]
            else:
                groups[key] = feats[:, agg, nbr, None]
        b = len(instances)
        vfeats = {
            "tx": np.zeros((b, self.k, 0)),
            "rx": np.zeros((b, self.k, 0)),
        }
        reps, cache = gnn_forward_stacked(
            self.spec, self.params, self._template, vfeats, groups
        )
        rho = readout(self.readout_spec, reps)
        return rho, (cache, reps)

    def backward(self, act_cache, d_rho):
        cache, reps = act_cache
        upstream = readout_backward(self.readout_spec, reps, d_rho)
        grads, _ = gnn_backward(self.spec, self.params, cache, upstream)
        return grads

    def named_params(self):
        return self.params.named()

    def n_params(self):
        return self.params.n_params()


class FnnD2dActor:
    """Dense actor over the flattened gain matrix."""

    kind = "fnn"

    def __init__(self, k, cfg, rng, widths=(400, 400, 400)):
        self.k = k
        self.cfg = cfg
        self.fnn = init_fnn(
            [k * k, *widths, k], ["relu"] * len(widths) + ["sigmoid"], rng
        )
        self.opt = AdamState(lr=cfg.actor_lr)

    def edge_features(self, instances):
        gains = np.stack([inst.gains for inst in instances])
        power = instances[0].tx_power
        noise = instances[0].noise_power
        snr_db = 10.0 * np.log10(gains * power / noise)
        return (snr_db - self.cfg.feat_center_db) / self.cfg.feat_spread_db

    def act(self, instances):
        x = self.edge_features(instances).reshape(len(instances), -1)
        rho, cache = fnn_apply(self.fnn, x)
        return rho, cache

    def backward(self, cache, d_rho):
        w_g, b_g, _ = fnn_backward_from_cache(self.fnn, cache, d_rho)
        return _fnn_grad_dict(self.fnn, w_g, b_g)

    def named_params(self):
        return self.fnn.named()

    def n_params(self):
        return sum(a.size for a in self.fnn.named().values())


def train_step_critic_free(actor, instances, cfg):
    """Ascend the mean closed-form reward over a batch of fresh instances.

    The relaxed schedule is kept strictly inside (0, 1) for the barrier
    terms; the analytic reward gradient is pushed through the actor.
    """
    rho, cache = actor.act(instances)
    batch = len(instances)
    rewards = np.zeros(batch)
    d_rho = np.zeros_like(rho)
    for i, inst in enumerate(instances):
        r, _ = env_d2d.clamp_relaxed(rho[i])
        rewards[i] = env_d2d.reward(
            inst.gains, r, cfg.eta1, cfg.eta2, inst.tx_power, inst.noise_power
        )
        d_rho[i] = env_d2d.reward_grad(
            inst.gains, r, cfg.eta1, cfg.eta2, inst.tx_power, inst.noise_power
        )
    grads = actor.backward(cache, -d_rho / batch)  # minimize the negation
    adam_step(actor.named_params(), grads, actor.opt)
    return {"reward_mean": float(rewards.mean()), "rho": rho}
