"""Simulated C-RAN video streaming: mobility on a road grid, per-frame
large-scale channels, association, per-slot fading and power allocation, and
the buffer/playback dynamics that define the sequential decision problem.

Conventions:
  * One environment step = one frame of duration frame_s; each frame holds
    slots_per_frame fading samples, so the slot duration is
    frame_s / slots_per_frame.
  * The buffer ledger advances with the requested (safe-layer adjusted)
    rates; any realized-rate deficit under the per-transmitter power cap is
    charged through the reward penalty instead. This is what makes the
    segment-boundary buffer guarantee exact rather than probabilistic.
  * The ledger counts whole bits (int64): a frame delivers
    floor(rate * frame_s) bits, and the safe layer's replacement branch
    delivers exactly the missing bit count, so the boundary buffer bound
    holds in exact integer arithmetic, not merely to float precision.
  * State features exposed to agents use scale-free units: buffer in
    segments, delivered ratio in [0, 1], channel history as
    log10(gain / gain_ref) masked by association (masked entries are
    exactly zero; gain_ref is the gain at a fixed reference distance).
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np



def path_loss_db(distance_m, carrier_ghz):
    """Urban path loss in dB as a function of distance and carrier frequency."""
    d = np.asarray(distance_m, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    return 13.54 + 39.08 * np.log10(d) + 20.0 * np.log10(carrier_ghz)


def associate(gains):
    """One-hot association to the strongest gain; ties to the lowest index."""
    gains = np.asarray(gains, dtype=np.float64)
    ind = np.zeros_like(gains)
    ind[np.arange(gains.shape[0]), np.argmax(gains, axis=1)] = 1.0
    return ind


@dataclass(frozen=True)
class RoadGrid:
    """Orthogonal road grid: horizontal roads at each y, vertical at each x."""

    xs: tuple = (0.0, 500.0, 1000.0)
    ys: tuple = (0.0, 500.0, 1000.0)


@dataclass(frozen=True)
class ScenarioConfig:
    n_users: int = 5
    du_positions: tuple = (
        (250.0, 250.0),
        (750.0, 250.0),
        (500.0, 500.0),
        (250.0, 750.0),
        (750.0, 750.0),
    )
    grid: RoadGrid = field(default_factory=RoadGrid)
    n_segments: int = 15              # includes the best-effort segment 0
    frames_per_segment: int = 10
    slots_per_frame: int = 1000
    frame_s: float = 1.0
    segment_bits: float = 8e6
    bandwidth_hz: float = 2e6
    p_max: float = 200.0
    carrier_ghz: float = 3.5
    noise_dbm_hz: float = -174.0
    history_len: int = 2              # T; edge features span T+1 frames
    n_antennas: int = 64
    # Gauss-Markov mobility (velocity bounds from the scenario; memory and
    # noise scale are exposed here with documented defaults)
    speed_init: float = 16.0
    speed_min: float = 12.0
    speed_max: float = 20.0
    gm_memory: float = 0.9
    gm_std: float = 2.0
    red_light_prob: float = 0.5
    stop_max_s: float = 30.0
    reference_distance: float = 200.0

    @property
    def n_dus(self):
        return len(self.du_positions)

    @property
    def slot_s(self):
        return self.frame_s / self.slots_per_frame

    @property
    def noise_power(self):
        return 10.0 ** (self.noise_dbm_hz / 10.0) / 1000.0 * self.bandwidth_hz

    @property
    def antenna_gain_db(self):
        return 10.0 * math.log10(self.n_antennas)

    @property
    def horizon(self):
        return (self.n_segments - 1) * self.frames_per_segment

    @property
    def gain_ref(self):
        pl = 13.54 + 39.08 * math.log10(self.reference_distance)
        pl += 20.0 * math.log10(self.carrier_ghz)
        return 10.0 ** ((-pl + self.antenna_gain_db) / 10.0)

    @property
    def rate_ref(self):
        """Constant rate that delivers one segment per segment duration."""
        return self.segment_bits / (self.frames_per_segment * self.frame_s)

    def to_json(self):
        data = {k: getattr(self, k) for k in self.__dataclass_fields__}
        data["grid"] = {"xs": list(self.grid.xs), "ys": list(self.grid.ys)}
        data["du_positions"] = [list(p) for p in self.du_positions]
        return json.dumps(data, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        data["grid"] = RoadGrid(tuple(data["grid"]["xs"]), tuple(data["grid"]["ys"]))
        data["du_positions"] = tuple(tuple(p) for p in data["du_positions"])
        return cls(**data)


def desk_scenario(n_users=2):
    """Small preset for fast acceptance runs; full-size physics, short video."""
    return ScenarioConfig(n_users=n_users, n_segments=5, slots_per_frame=50)


def full_scenario(n_users=5):
    return ScenarioConfig(n_users=n_users)


class UserMotion:
    """Position/velocity state of one user on the road grid.

    Moves along one road at a time; at intersections it stops for a uniform
    0..stop_max_s beat with probability red_light_prob, then turns onto a
    uniformly chosen outgoing road (no U-turn unless at a dead end).
    """

    def __init__(self, cfg, rng):
        self.cfg = cfg
        grid = cfg.grid
        if rng.random() < 0.5:
            y = grid.ys[rng.integers(len(grid.ys))]
            x = rng.uniform(grid.xs[0], grid.xs[-1])
            self.axis, self.pos = "h", np.array([x, y])
        else:
            x = grid.xs[rng.integers(len(grid.xs))]
            y = rng.uniform(grid.ys[0], grid.ys[-1])
            self.axis, self.pos = "v", np.array([x, y])
        self.direction = 1 if rng.random() < 0.5 else -1
        self.speed = cfg.speed_init
        self.stop_timer = 0.0

    def _next_crossing(self):
        grid = self.cfg.grid
        if self.axis == "h":
            lines, coord = grid.xs, self.pos[0]
        else:
            lines, coord = grid.ys, self.pos[1]
        if self.direction > 0:
            ahead = [v for v in lines if v > coord + 1e-9]
            return min(ahead) if ahead else None
        ahead = [v for v in lines if v < coord - 1e-9]
        return max(ahead) if ahead else None

    def _choices_at(self, x, y, arrived_axis, arrived_dir):
        grid = self.cfg.grid
        on_h = any(abs(y - v) < 1e-9 for v in grid.ys)
        on_v = any(abs(x - v) < 1e-9 for v in grid.xs)
        options = []
        if on_h:
            if x < grid.xs[-1] - 1e-9:
                options.append(("h", 1))
            if x > grid.xs[0] + 1e-9:
                options.append(("h", -1))
        if on_v:
            if y < grid.ys[-1] - 1e-9:
                options.append(("v", 1))
            if y > grid.ys[0] + 1e-9:
                options.append(("v", -1))
        reverse = (arrived_axis, -arrived_dir)
        forward = [o for o in options if o != reverse]
        return forward or options

    def step(self, dt, rng):
        """Advance dt seconds: Gauss-Markov speed update, then piecewise motion."""
        cfg = self.cfg
        a = cfg.gm_memory
        noise = math.sqrt(max(1.0 - a * a, 0.0)) * cfg.gm_std * rng.standard_normal()
        self.speed = a * self.speed + (1.0 - a) * cfg.speed_init + noise
        self.speed = float(np.clip(self.speed, cfg.speed_min, cfg.speed_max))

        remaining = dt
        while remaining > 1e-12:
            if self.stop_timer > 0.0:
                wait = min(self.stop_timer, remaining)
                self.stop_timer -= wait
                remaining -= wait
                continue
            crossing = self._next_crossing()
            idx = 0 if self.axis == "h" else 1
            if crossing is None:
                # dead end: turn around
                self.direction = -self.direction
                continue
            dist = abs(crossing - self.pos[idx])
            reach = self.speed * remaining
            if reach < dist:
                self.pos[idx] += self.direction * reach
                remaining = 0.0
            else:
                self.pos[idx] = crossing
                remaining -= dist / self.speed
                if rng.random() < cfg.red_light_prob:
                    self.stop_timer = rng.uniform(0.0, cfg.stop_max_s)
                choices = self._choices_at(
                    self.pos[0], self.pos[1], self.axis, self.direction
                )
                self.axis, self.direction = choices[rng.integers(len(choices))]
        return self.pos.copy(), self.speed


def mobility_step(motion, dt, rng):
    """Advance one user's Gauss-Markov road motion by dt seconds."""
    return motion.step(dt, rng)


def inner_power_alloc(alpha, g_slots, rates, p_max, noise_power, bandwidth,
                      mode="inversion", p3=None):
    """Per-slot power allocation for the users of one transmitter.

    alpha: (n,) large-scale gains; g_slots: (n, n_slots) small-scale power
    gains; rates: (n,) requested average rates (bit/s).

    mode "inversion" inverts the rate formula per slot, then scales every
    user's power down proportionally in slots where the total would exceed
    p_max (saturation); achieved rates are recomputed after scaling.
    mode "learned" asks an offline-trained allocator (see ``train_p3``).
    Returns (powers (n, n_slots), achieved_rates (n,), saturated).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    rates = np.asarray(rates, dtype=np.float64)
    g = np.asarray(g_slots, dtype=np.float64)
    if mode == "learned":
        if p3 is None:
            raise ValueError("mode='learned' requires a trained allocator")
        powers = p3.allocate(alpha, g, rates)
    else:
        snr_target = 2.0 ** (rates / bandwidth) - 1.0
        powers = snr_target[:, None] * noise_power / (alpha[:, None] * g)
    totals = powers.sum(axis=0)
    over = totals > p_max
    saturated = bool(np.any(over))
    if saturated:
        scale = np.where(over, p_max / np.maximum(totals, 1e-300), 1.0)
        powers = powers * scale[None, :]
    achieved = bandwidth * np.log2(1.0 + alpha[:, None] * g * powers / noise_power)
    return powers, achieved.mean(axis=1), saturated


@dataclass
class VideoObs:
    """Snapshot handed to agents before each frame.

    user_features: (K, 3) rows [buffer_segments, playback_index,
    delivered_ratio]; edge_features: (K, M, T+1) association-masked channel
    history in units of the scenario's reference gain.
    """

    t: int
    boundary: bool
    user_features: np.ndarray
    edge_features: np.ndarray
    safe_threshold: np.ndarray   # requested-rate floor; -inf off boundaries
    rate_max: np.ndarray         # cap implied by the power budget
    buffer_bits: np.ndarray
    delivered_ratio: np.ndarray


@dataclass
class StepOutcome:
    reward: float
    energy_per_du: np.ndarray
    penalty: float
    obs: VideoObs
    done: bool
    info: dict


class VideoStreamingEnv:
    """One episode = delivery of segments 1..N_v-1 to every user.

    All randomness comes from the per-instance seeded generator; instances
    share no mutable state.
    """

    def __init__(self, cfg, seed=0, penalty_weight=0.1, use_safe_layer=True,
                 inner_mode="inversion", p3=None, penalty_rate_unit=None):
        self.cfg = cfg
        self.seed = seed
        self.penalty_weight = penalty_weight
        self.use_safe_layer = use_safe_layer
        self.inner_mode = inner_mode
        self.p3 = p3
        # rate shortfalls are charged in units of the per-segment streaming
        # rate so the penalty is commensurate with the energy term
        self.penalty_rate_unit = penalty_rate_unit or cfg.rate_ref
        self.rng = None
        self._obs = None

    # -- state assembly ---------------------------------------------------

    def _gains(self):
        du = np.asarray(self.cfg.du_positions)
        pos = np.stack([m.pos for m in self.motions])
        d = np.linalg.norm(pos[:, None, :] - du[None, :, :], axis=2)
        d = np.maximum(d, 1.0)
        pl = path_loss_db(d, self.cfg.carrier_ghz)
        return 10.0 ** ((-pl + self.cfg.antenna_gain_db) / 10.0)

    def _advance_channel(self):
        alpha = self._gains()
        ind = associate(alpha)
        self.alpha = alpha
        self.assoc = ind
        self.history.append(np.log10(alpha / self.cfg.gain_ref) * ind)
        if len(self.history) > self.cfg.history_len + 1:
            self.history.pop(0)

    def _snapshot(self):
        cfg = self.cfg
        t = self.t
        boundary = t % cfg.frames_per_segment == 0
        seg = (t - 1) // cfg.frames_per_segment
        users = np.stack(
            [
                self.buffer / cfg.segment_bits,
                np.full(cfg.n_users, float(seg)),
                self.delivered / self.total_bits,
            ],
            axis=1,
        )
        hist = np.stack(self.history, axis=2)  # (K, M, T+1), masked log ratios
        if boundary:
            # equal-size segments: next + playing segment bits = 2 * d
            thr = (2.0 * cfg.segment_bits - self.buffer) / cfg.frame_s
        else:
            thr = np.full(cfg.n_users, -np.inf)
        assoc_gain = (self.alpha * self.assoc).sum(axis=1)
        rmax = cfg.bandwidth_hz * np.log2(
            1.0 + cfg.p_max * assoc_gain / cfg.noise_power
        )
        return VideoObs(
            t=t,
            boundary=bool(boundary),
            user_features=users,
            edge_features=hist,
            safe_threshold=thr,
            rate_max=rmax,
            buffer_bits=self.buffer.copy(),
            delivered_ratio=self.delivered / self.total_bits,
        )

    # -- episode control ----------------------------------------------------

    def reset(self):
        cfg = self.cfg
        self.rng = np.random.default_rng(self.seed)
        self.motions = [UserMotion(cfg, self.rng) for _ in range(cfg.n_users)]
        self.history = []
        # warm-up frames: segment 0 is delivered best effort while the
        # channel history fills up; its energy is outside the return
        for _ in range(cfg.history_len + 1):
            for m in self.motions:
                m.step(cfg.frame_s, self.rng)
            self._advance_channel()
        self.t = 1
        self.seg_bits = int(round(cfg.segment_bits))
        self.buffer = np.full(cfg.n_users, self.seg_bits, dtype=np.int64)
        self.delivered = np.full(cfg.n_users, self.seg_bits, dtype=np.int64)
        self.total_bits = self.seg_bits * cfg.n_segments
        self.stalls = 0
        self._obs = self._snapshot()
        return self._obs

    def nonpredictive_rate(self):
        """Constant per-segment rate for the next segment still to deliver."""
        cfg = self.cfg
        remaining = self.total_bits - self.delivered
        base = np.full(cfg.n_users, cfg.rate_ref)
        return np.where(remaining > 1e-9, base, 0.0)

    def step(self, action):
        cfg = self.cfg
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (cfg.n_users,):
            raise ValueError(f"action shape {action.shape}, expected {(cfg.n_users,)}")
        if not np.all(np.isfinite(action)):
            raise ValueError("action must be finite")
        t = self.t
        boundary = t % cfg.frames_per_segment == 0
        req = np.maximum(action, 0.0)

        # whole-bit ledger: a frame delivers floor(rate * frame_s) bits; on a
        # boundary the safe layer's replaced coordinates deliver exactly the
        # missing bits, making the buffer bound exact in integer arithmetic
        delta = np.floor(req * cfg.frame_s).astype(np.int64)
        if boundary and self.use_safe_layer:
            needed = 2 * self.seg_bits - self.buffer
            delta = np.where(delta >= needed, delta, needed)
        # never request beyond what is left of the video
        remaining = self.total_bits - self.delivered
        delta = np.minimum(delta, np.maximum(remaining, 0))
        req = delta / cfg.frame_s

        # per-slot fading, inner allocation per transmitter
        g = self.rng.exponential(1.0, size=(cfg.n_users, cfg.slots_per_frame))
        energy = np.zeros(cfg.n_dus)
        achieved = np.zeros(cfg.n_users)
        saturated = False
        for m in range(cfg.n_dus):
            users = np.nonzero(self.assoc[:, m] > 0)[0]
            if users.size == 0:
                continue
            powers, rates, sat = inner_power_alloc(
                self.alpha[users, m], g[users], req[users], cfg.p_max,
                cfg.noise_power, cfg.bandwidth_hz, self.inner_mode, self.p3,
            )
            energy[m] = cfg.slot_s * powers.sum()
            achieved[users] = rates
            saturated = saturated or sat
        shortfall = np.maximum(req - achieved, 0.0) / self.penalty_rate_unit
        penalty = self.penalty_weight * shortfall.sum()
        reward = -energy.sum() - penalty

        # ledger: requested bits enter the buffer; finished segment leaves it
        self.buffer = self.buffer + delta
        self.delivered = self.delivered + delta
        if boundary:
            short = self.buffer < self.seg_bits
            if np.any(short):
                self.stalls += int(short.sum())
            self.buffer = np.maximum(self.buffer - self.seg_bits, 0)

        done = t >= cfg.horizon
        self.t = t + 1
        if not done:
            for m in self.motions:
                m.step(cfg.frame_s, self.rng)
            self._advance_channel()
        self._obs = self._snapshot()
        return StepOutcome(
            reward=float(reward),
            energy_per_du=energy,
            penalty=float(penalty),
            obs=self._obs,
            done=done,
            info={
                "requested": req,
                "achieved": achieved,
                "saturated": saturated,
                "boundary": boundary,
                "stalls": self.stalls,
            },
        )

    def run_episode(self, policy, trace_path=None):
        """Roll one episode with policy(obs) -> rate vector; returns the
        summed reward. Optionally writes a per-frame trace CSV."""
        obs = self.reset()
        total = 0.0
        rows = []
        done = False
        while not done:
            action = policy(obs)
            out = self.step(action)
            total += out.reward
            if trace_path is not None:
                rows.append(
                    [obs.t]
                    + [float(b) for b in obs.buffer_bits]
                    + [float(a) for a in out.info["requested"]]
                    + [float(out.energy_per_du.sum()), out.penalty]
                )
            obs = out.obs
            done = out.done
        if trace_path is not None:
            k = self.cfg.n_users
            header = (
                ["t"]
                + [f"buffer_{i}" for i in range(k)]
                + [f"rate_{i}" for i in range(k)]
                + ["energy", "penalty"]
            )
            with open(trace_path, "w") as fh:
                fh.write(",".join(header) + "\n")
                for row in rows:
                    fh.write(",".join(repr(v) for v in row) + "\n")
        return total


# -- offline-trained inner allocator ------------------------------------------


class LearnedInnerAllocator:
    """Zero-padded dense allocator for one transmitter's users.

    Input per slot: [gains/gain_ref, fading, rates/rate_ref], each padded to
    max_users; output: per-user power in units of power_unit.
    """

    def __init__(self, params, max_users, gain_ref, rate_ref, power_unit):
        self.params = params
        self.max_users = max_users
        self.gain_ref = gain_ref
        self.rate_ref = rate_ref
        self.power_unit = power_unit

    def features(self, alpha, g_col, rates):
        n = alpha.shape[0]
        x = np.zeros(3 * self.max_users)
        x[:n] = alpha / self.gain_ref
        x[self.max_users : self.max_users + n] = g_col
        x[2 * self.max_users : 2 * self.max_users + n] = rates / self.rate_ref
        return x

    def allocate(self, alpha, g_slots, rates):
        from .numcore import fnn_apply

        n, n_slots = g_slots.shape
        xs = np.stack(
            [self.features(alpha, g_slots[:, j], rates) for j in range(n_slots)]
        )
        out, _ = fnn_apply(self.params, xs)
        return (out[:, :n] * self.power_unit).T.clip(min=0.0)


def train_p3(cfg, max_users=4, hidden=(64, 64), iters=2000, batch=64,
             lr=1e-3, seed=0, rate_penalty=4.0, power_penalty=1.0):
    """Offline, unsupervised training of the learned inner allocator.

    Minimizes slot energy plus quadratic rate-tracking and power-budget
    penalties on randomly drawn (gain, fading, rate) profiles.
    """
    from .numcore import AdamState, adam_step, fnn_apply, fnn_backward_from_cache, init_fnn

    rng = np.random.default_rng(seed)
    gain_ref, rate_ref = cfg.gain_ref, cfg.rate_ref
    power_unit = cfg.noise_power / gain_ref
    dims = [3 * max_users, *hidden, max_users]
    params = init_fnn(dims, ["relu"] * len(hidden) + ["relu"], rng)
    alloc = LearnedInnerAllocator(params, max_users, gain_ref, rate_ref, power_unit)
    state = AdamState(lr=lr)
    named = params.named()
    w = cfg.bandwidth_hz
    losses = []
    for _ in range(iters):
        n_active = int(rng.integers(1, max_users + 1))
        xs = np.zeros((batch, 3 * max_users))
        alphas = gain_ref * 10.0 ** rng.uniform(-1.5, 1.5, size=(batch, n_active))
        gs = rng.exponential(1.0, size=(batch, n_active))
        rates = rng.uniform(0.0, 2.0 * rate_ref, size=(batch, n_active))
        xs[:, :n_active] = alphas / gain_ref
        xs[:, max_users : max_users + n_active] = gs
        xs[:, 2 * max_users : 2 * max_users + n_active] = rates / rate_ref

        out, cache = fnn_apply(params, xs)
        p = out[:, :n_active] * power_unit
        snr = alphas * gs * p / cfg.noise_power
        r = w * np.log2(1.0 + snr)
        r_err = (r - rates) / rate_ref
        over = np.maximum(p.sum(axis=1) - cfg.p_max, 0.0)
        loss = (
            (p / power_unit).sum(axis=1).mean()
            + rate_penalty * (r_err ** 2).sum(axis=1).mean()
            + power_penalty * ((over / cfg.p_max) ** 2).mean()
        )
        losses.append(float(loss))

        dr_dp = w / np.log(2.0) * alphas * gs / cfg.noise_power / (1.0 + snr)
        dp = (
            1.0 / power_unit
            + rate_penalty * 2.0 * r_err / rate_ref * dr_dp
            + power_penalty * (2.0 * over / cfg.p_max ** 2)[:, None]
        ) / batch
        d_out = np.zeros_like(out)
        d_out[:, :n_active] = dp * power_unit
        w_g, b_g, _ = fnn_backward_from_cache(params, cache, d_out)
        grads = {}
        for i in range(params.n_layers):
            grads[f"W{i}"] = w_g[i]
            grads[f"b{i}"] = b_g[i]
        adam_step(named, grads, state)
    return alloc, losses
