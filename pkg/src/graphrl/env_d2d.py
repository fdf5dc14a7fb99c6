"""Device-to-device link scheduling: random layouts, channel gains, sum-rate
and reward evaluation, an exhaustive-search oracle, and naive baselines.

The channel model is a documented stand-in: log-distance LOS path loss with a
configurable exponent and constant offset, plus an optional Rayleigh
small-scale factor. All comparisons (learned vs oracle vs baselines) use the
same model, so they stay internally consistent.
"""

from dataclasses import dataclass, replace
import itertools

import numpy as np

LN2 = np.log(2.0)


@dataclass(frozen=True)
class D2DConfig:
    n_pairs: int = 50
    area_side: float = 500.0          # square deployment area, meters
    pair_distance: tuple = (2.0, 65.0)
    tx_power_dbm: float = 40.0
    noise_dbm_hz: float = -169.0
    bandwidth_hz: float = 5e6
    # dual-slope LOS stand-in: exponent below the breakpoint distance,
    # far_exponent beyond it, continuous at the breakpoint
    pl_exponent: float = 2.0
    pl_far_exponent: float = 4.5
    pl_breakpoint_m: float = 100.0
    pl_offset_db: float = 40.0        # path loss at 1 m
    rayleigh: bool = False            # optional small-scale factor

    @property
    def tx_power(self):
        return 10.0 ** (self.tx_power_dbm / 10.0) / 1000.0

    @property
    def noise_power(self):
        return 10.0 ** (self.noise_dbm_hz / 10.0) / 1000.0 * self.bandwidth_hz

    def with_pairs(self, k):
        return replace(self, n_pairs=k)


@dataclass
class D2DInstance:
    tx: np.ndarray          # (K, 2) transmitter coordinates
    rx: np.ndarray          # (K, 2) receiver coordinates
    gains: np.ndarray       # (K, K); gains[k, m] = |h from tx m to rx k|^2
    tx_power: float
    noise_power: float

    @property
    def n_pairs(self):
        return self.gains.shape[0]


def path_loss_db(d, cfg):
    """Dual-slope log-distance path loss, continuous at the breakpoint."""
    d = np.asarray(d, dtype=np.float64)
    near = cfg.pl_offset_db + 10.0 * cfg.pl_exponent * np.log10(d)
    at_bp = cfg.pl_offset_db + 10.0 * cfg.pl_exponent * np.log10(cfg.pl_breakpoint_m)
    far = at_bp + 10.0 * cfg.pl_far_exponent * np.log10(d / cfg.pl_breakpoint_m)
    return np.where(d <= cfg.pl_breakpoint_m, near, far)


def gen_instance(k, seed, config=None):
    """Random layout: uniform transmitters, receivers at a uniform distance
    within the configured range and uniform angle. Deterministic per seed."""
    cfg = (config or D2DConfig()).with_pairs(k)
    rng = np.random.default_rng(seed)
    tx = rng.uniform(0.0, cfg.area_side, size=(k, 2))
    dist = rng.uniform(*cfg.pair_distance, size=k)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=k)
    rx = tx + np.stack([dist * np.cos(angle), dist * np.sin(angle)], axis=1)

    d = np.linalg.norm(rx[:, None, :] - tx[None, :, :], axis=2)  # (rx k, tx m)
    d = np.maximum(d, 1.0)
    pl_db = path_loss_db(d, cfg)
    gains = 10.0 ** (-pl_db / 10.0)
    if cfg.rayleigh:
        gains = gains * rng.exponential(1.0, size=gains.shape)
    return D2DInstance(tx, rx, gains, cfg.tx_power, cfg.noise_power)


def sum_rate(gains, rho, power, noise):
    """Sum of log2(1 + SINR_k) for a (possibly relaxed) activation vector."""
    rho = np.asarray(rho, dtype=np.float64)
    signal = power * rho * np.diag(gains)
    interference = power * (gains @ rho) - power * rho * np.diag(gains)
    sinr = signal / (interference + noise)
    return float(np.sum(np.log2(1.0 + sinr)))


def clamp_relaxed(rho, eps=1e-7):
    """Keep a relaxed schedule strictly inside (0, 1); flags if clamping hit."""
    rho = np.asarray(rho, dtype=np.float64)
    clamped = np.clip(rho, eps, 1.0 - eps)
    return clamped, bool(np.any(clamped != rho))


def reward(gains, rho_relaxed, eta1, eta2, power, noise):
    """Sum rate of the relaxed action plus two log-barrier terms."""
    rho, _ = clamp_relaxed(rho_relaxed)
    barrier = eta1 * np.sum(np.log(rho)) + eta2 * np.sum(np.log(1.0 - rho))
    return sum_rate(gains, rho, power, noise) + float(barrier)


def reward_grad(gains, rho_relaxed, eta1, eta2, power, noise):
    """Closed-form gradient of reward() w.r.t. the relaxed action."""
    rho, _ = clamp_relaxed(rho_relaxed)
    diag = np.diag(gains)
    signal = power * rho * diag
    denom = power * (gains @ rho) - signal + noise  # interference + noise
    total = denom + signal

    grad = np.zeros_like(rho)
    # own-rate term: d/d rho_k log2(1 + P rho_k g_kk / denom_k)
    grad += power * diag / (denom * (1.0 + signal / denom)) / LN2
    # interference terms: rho_j raises denom_k for every k != j
    cross = power * gains * (signal / (denom * total))[:, None] / LN2
    np.fill_diagonal(cross, 0.0)
    grad -= cross.sum(axis=0)
    grad += eta1 / rho - eta2 / (1.0 - rho)
    return grad


def brute_force_schedule(gains, power, noise, max_pairs=20):
    """Exact maximizer of the binary sum rate; ties go to the
    lexicographically smallest schedule."""
    k = gains.shape[0]
    if k > max_pairs:
        raise ValueError(f"exhaustive search limited to {max_pairs} pairs, got {k}")
    best_rho, best_rate = None, -np.inf
    for bits in itertools.product((0, 1), repeat=k):
        rho = np.array(bits, dtype=np.float64)
        rate = sum_rate(gains, rho, power, noise)
        if rate > best_rate:
            best_rho, best_rate = rho, rate
    return best_rho, best_rate


def baselines(gains, power, noise, n_random=64, seed=0):
    """Comparison anchors: the all-active rate and a random-schedule mean."""
    k = gains.shape[0]
    all_active = sum_rate(gains, np.ones(k), power, noise)
    rng = np.random.default_rng(seed)
    rates = [
        sum_rate(gains, rng.integers(0, 2, size=k).astype(np.float64), power, noise)
        for _ in range(n_random)
    ]
    return {"all_active": all_active, "random_mean": float(np.mean(rates))}


# Instance file format: a line-oriented text blob.
#   d2d v1
#   pairs <K> <tx_power> <noise_power>
#   tx <k> <x> <y>
#   rx <k> <x> <y>
#   gain <k> <m> <value>
#   end


def instance_to_text(inst):
    lines = [
        "d2d v1",
        f"pairs {inst.n_pairs} {float(inst.tx_power)!r} {float(inst.noise_power)!r}",
    ]
    for k in range(inst.n_pairs):
        lines.append(f"tx {k} {float(inst.tx[k, 0])!r} {float(inst.tx[k, 1])!r}")
        lines.append(f"rx {k} {float(inst.rx[k, 0])!r} {float(inst.rx[k, 1])!r}")
    for k in range(inst.n_pairs):
        for m in range(inst.n_pairs):
            lines.append(f"gain {k} {m} {float(inst.gains[k, m])!r}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def instance_from_text(text):
    lines = text.strip().splitlines()
    if not lines or lines[0] != "d2d v1":
        raise ValueError("not a d2d v1 instance blob")
    n = None
    tx = rx = gains = None
    power = noise = None
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "pairs":
            n = int(parts[1])
            power, noise = float(parts[2]), float(parts[3])
            tx = np.zeros((n, 2))
            rx = np.zeros((n, 2))
            gains = np.zeros((n, n))
        elif parts[0] == "tx":
            tx[int(parts[1])] = [float(parts[2]), float(parts[3])]
        elif parts[0] == "rx":
            rx[int(parts[1])] = [float(parts[2]), float(parts[3])]
        elif parts[0] == "gain":
            gains[int(parts[1]), int(parts[2])] = float(parts[3])
        elif parts[0] == "end":
            break
    return D2DInstance(tx, rx, gains, power, noise)
