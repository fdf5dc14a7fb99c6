"""Experiment runner: seeded end-to-end training for both problems and agent
variants, deterministic metrics CSV emission, structural complexity
accounting, and cross-run comparison tables.

Metrics CSV schema (v1), one row per environment step:
    step, episode, return, critic_loss, actor_loss, noise_variance
`return` is the return of the most recently completed episode (the running
partial return before the first episode completes); loss columns are empty
when the trainer has no such loss (e.g. no critic). Reruns with the same
config and seed produce byte-identical CSV files.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import env_d2d
from .ddpg import (
    AgentConfig,
    Experience,
    FnnD2dActor,
    FnnVideoNets,
    GnnD2dActor,
    GnnFnnReadoutVideoNets,
    GnnVideoNets,
    ReplayBuffer,
    noise_variance,
    physical_action,
    quantize,
    train_step_actor_critic,
    train_step_critic_free,
)
from .env_video import ScenarioConfig, VideoStreamingEnv, desk_scenario, full_scenario

PROBLEMS = ("video", "d2d")
AGENTS = ("gnn", "fnn", "gnn-fnn-readout")
METRICS_HEADER = "step,episode,return,critic_loss,actor_loss,noise_variance"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    problem: str
    agent: str
    steps: int
    seeds: tuple
    scenario: dict = field(default_factory=dict)
    agent_cfg: dict = field(default_factory=dict)
    smoothing_window: int = 10        # episodes per smoothing bin

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem must be one of {PROBLEMS}, got {self.problem!r}")
        if self.agent not in AGENTS:
            raise ConfigError(f"agent must be one of {AGENTS}, got {self.agent!r}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")


def load_experiment(path):
    """Parse a JSON experiment file with config-path-qualified errors."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as err:
        raise ConfigError(f"{path}: cannot read ({err})") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    try:
        return ExperimentConfig(
            problem=data["problem"],
            agent=data.get("agent", "gnn"),
            steps=int(data["steps"]),
            seeds=tuple(data.get("seeds", [0])),
            scenario=data.get("scenario", {}),
            agent_cfg=data.get("agent_cfg", {}),
            smoothing_window=int(data.get("smoothing_window", 10)),
        )
    except KeyError as err:
        raise ConfigError(f"{path}: missing required field {err}") from err


def video_scenario_from(config):
    data = dict(config)
    preset = data.pop("preset", "desk")
    if preset == "desk":
        base = desk_scenario()
    elif preset == "full":
        base = full_scenario()
    else:
        raise ConfigError(f"unknown scenario preset {preset!r}")
    if not data:
        return base
    merged = {k: getattr(base, k) for k in base.__dataclass_fields__}
    for key, value in data.items():
        if key not in merged:
            raise ConfigError(f"unknown scenario field {key!r}")
        merged[key] = value
    return ScenarioConfig(**merged)


def d2d_config_from(config):
    data = dict(config)
    k = int(data.pop("k", 6))
    fields = set(env_d2d.D2DConfig.__dataclass_fields__)
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown d2d scenario fields {sorted(unknown)}")
    if "pair_distance" in data:
        data["pair_distance"] = tuple(data["pair_distance"])
    return k, env_d2d.D2DConfig(**data)


def agent_config_from(config, defaults):
    data = dict(defaults)
    data.update(config)
    def grab(key):
        # distinguish "absent" (None: use the agent family default) from an
        # explicitly empty tuple (e.g. linear processors via proc_hidden: [])
        return tuple(data.pop(key)) if key in data else None

    arch = {
        "dims": grab("dims"),
        "proc_hidden": grab("proc_hidden"),
        "widths": grab("widths"),
        "readout_hidden": grab("readout_hidden"),
        "body_dim": data.pop("body_dim", 8),
    }
    unknown = set(data) - set(AgentConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown agent_cfg fields {sorted(unknown)}")
    return AgentConfig(**data), arch


# Desk-scale settings are tuned for the CI-speed presets (small batches and
# replay, measured stable); the full preset keeps the paper-scale values that
# AgentConfig documents as defaults (batch 1024, actor 1e-3 / critic 1e-4).
VIDEO_DESK_AGENT_DEFAULTS = dict(
    actor_lr=1e-4, critic_lr=1e-3, batch_size=64, buffer_capacity=20_000,
    reward_scale=0.05, action_bias=1.0, noise_var=0.1, target_tau=0.001,
)
VIDEO_FULL_AGENT_DEFAULTS = dict(reward_scale=0.05, action_bias=1.0)
D2D_DESK_AGENT_DEFAULTS = dict(actor_lr=0.0015, batch_size=16, xi=0.3)


def video_agent_defaults(scenario_config):
    if scenario_config.get("preset", "desk") == "full":
        return VIDEO_FULL_AGENT_DEFAULTS
    return VIDEO_DESK_AGENT_DEFAULTS


@dataclass
class RunMetrics:
    problem: str
    agent: str
    seed: int
    steps: int
    returns: list                    # per-step as written to the CSV
    episode_returns: list            # (end_step, return) per completed episode
    convergence_step: object         # int or None
    final_smoothed: float
    wall_time_s: float
    param_count: int
    mult_count: int
    updates: int


def smoothed_episode_returns(episode_returns, window):
    """Non-overlapping windows of `window` successive episode returns.

    Returns [(end_step, mean_return)] per full window.
    """
    out = []
    for i in range(0, len(episode_returns) - window + 1, window):
        chunk = episode_returns[i : i + window]
        out.append((chunk[-1][0], float(np.mean([r for _, r in chunk]))))
    return out


def convergence_step(smoothed, threshold):
    """First window-end step whose smoothed return reaches the threshold."""
    for step, value in smoothed:
        if value >= threshold:
            return step
    return None


def self_convergence(smoothed):
    """Steps to within 10% of the run's own best smoothed return."""
    if not smoothed:
        return None, float("nan")
    best = max(v for _, v in smoothed)
    threshold = best - 0.1 * abs(best)
    return convergence_step(smoothed, threshold), smoothed[-1][1]


def _fmt(value):
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return ""
    return repr(float(value))


def build_video_nets(k, m, history_len, acfg, arch, agent, rng):
    def pick(value, default):
        return default if value is None else value

    if agent == "gnn":
        dims = pick(arch["dims"], (32, 32, 1))
        proc = pick(arch["proc_hidden"], (32,))
        return GnnVideoNets(k, m, history_len, acfg, rng, dims=dims, proc_hidden=proc)
    if agent == "fnn":
        widths = pick(arch["widths"], (64, 64))
        return FnnVideoNets(k, m, history_len, acfg, rng, widths=widths)
    dims = pick(arch["dims"], (32, 32, arch["body_dim"]))
    proc = pick(arch["proc_hidden"], (32,))
    head = pick(arch["readout_hidden"], (64,))
    return GnnFnnReadoutVideoNets(
        k, m, history_len, acfg, rng, dims=dims, proc_hidden=proc, readout_hidden=head
    )


def _run_video(config, seed, rows):
    scenario = video_scenario_from(config.scenario)
    acfg, arch = agent_config_from(config.agent_cfg,
                                   video_agent_defaults(config.scenario))
    if "action_scale" not in config.agent_cfg:
        acfg.action_scale = scenario.rate_ref
    rng = np.random.default_rng([seed, 1])
    nets = build_video_nets(
        scenario.n_users, scenario.n_dus, scenario.history_len, acfg, arch,
        config.agent, rng,
    )
    buffer = ReplayBuffer(acfg.buffer_capacity)
    episode = 0
    env = VideoStreamingEnv(scenario, seed=[seed, 2, episode],
                            penalty_weight=acfg.penalty_weight)
    obs = env.reset()
    ep_return = 0.0
    last_return = 0.0
    episode_returns = []
    updates = 0
    for step in range(config.steps):
        mu_out, _ = nets.mu([obs])
        var = noise_variance(step, config.steps, acfg.noise_var)
        noisy = mu_out[0] + rng.normal(0.0, np.sqrt(var), size=scenario.n_users)
        action = physical_action(
            noisy, acfg, np.maximum(obs.safe_threshold, 0.0), obs.rate_max
        )
        out = env.step(action)
        buffer.append(
            Experience(obs, out.info["requested"], out.reward, out.obs, out.done)
        )
        ep_return += out.reward
        stats = train_step_actor_critic(nets, buffer, acfg, rng)
        if stats is not None:
            updates += 1
        if out.done:
            episode_returns.append((step + 1, ep_return))
            last_return = ep_return
            ep_return = 0.0
            episode += 1
            env = VideoStreamingEnv(scenario, seed=[seed, 2, episode],
                                    penalty_weight=acfg.penalty_weight)
            obs = env.reset()
        else:
            obs = out.obs
        current = last_return if episode_returns else ep_return
        rows.append(
            f"{step + 1},{episode},{_fmt(current)},"
            f"{_fmt(stats['critic_loss']) if stats else ''},"
            f"{_fmt(stats['actor_loss']) if stats else ''},{_fmt(var)}"
        )
    return nets, acfg, scenario, episode_returns, updates


def _run_d2d(config, seed, rows):
    k, d2d_cfg = d2d_config_from(config.scenario)
    acfg, arch = agent_config_from(config.agent_cfg, D2D_DESK_AGENT_DEFAULTS)
    rng = np.random.default_rng([seed, 1])
    if config.agent == "gnn":
        dims = (8, 8, 8, 8, 8, 1) if arch["dims"] is None else arch["dims"]
        proc = (16,) if arch["proc_hidden"] is None else arch["proc_hidden"]
        actor = GnnD2dActor(k, acfg, rng, dims=dims, proc_hidden=proc)
    elif config.agent == "fnn":
        widths = (64, 64) if arch["widths"] is None else arch["widths"]
        actor = FnnD2dActor(k, acfg, rng, widths=widths)
    else:
        raise ConfigError("agent 'gnn-fnn-readout' applies to the video problem")
    episode_returns = []
    updates = 0
    for step in range(config.steps):
        instances = [
            env_d2d.gen_instance(k, [seed, 3, step, i], d2d_cfg)
            for i in range(acfg.batch_size)
        ]
        stats = train_step_critic_free(actor, instances, acfg)
        updates += 1
        episode_returns.append((step + 1, stats["reward_mean"]))
        rows.append(
            f"{step + 1},{step},{_fmt(stats['reward_mean'])},,"
            f"{_fmt(-stats['reward_mean'])},"
        )
    return actor, acfg, d2d_cfg, episode_returns, updates


def run(config, seed, out_dir=None, render=True):
    """Execute one seeded training run; optionally write CSV/JSON/figure."""
    t0 = time.time()
    rows = []
    _, arch = agent_config_from(config.agent_cfg,
                                video_agent_defaults(config.scenario)
                                if config.problem == "video"
                                else D2D_DESK_AGENT_DEFAULTS)
    if config.problem == "video":
        nets, acfg, scenario, episode_returns, updates = _run_video(config, seed, rows)
        k, m = scenario.n_users, scenario.n_dus
        edge_dim = scenario.history_len + 1
        if config.agent == "fnn":
            widths = (64, 64) if arch["widths"] is None else arch["widths"]
            l_count, width = len(widths), widths[0]
        else:
            dims = (32, 32, 1) if arch["dims"] is None else arch["dims"]
            l_count, width = len(dims), dims[0]
        n_params = nets.n_params()
        mult = flop_count(config.agent, k, m, l_count, width, edge_dim=edge_dim)
    else:
        nets, acfg, d2d_cfg, episode_returns, updates = _run_d2d(config, seed, rows)
        k = d2d_cfg.n_pairs
        if config.agent == "fnn":
            widths = (64, 64) if arch["widths"] is None else arch["widths"]
            l_count, width = len(widths), widths[0]
        else:
            dims = (8, 8, 8, 8, 8, 1) if arch["dims"] is None else arch["dims"]
            l_count, width = len(dims), dims[0]
        n_params = nets.n_params()
        mult = flop_count(config.agent, k, k, l_count, width, edge_dim=1)

    smoothed = smoothed_episode_returns(episode_returns, config.smoothing_window)
    conv, final = self_convergence(smoothed)
    metrics = RunMetrics(
        problem=config.problem,
        agent=config.agent,
        seed=seed,
        steps=config.steps,
        returns=rows,
        episode_returns=episode_returns,
        convergence_step=conv,
        final_smoothed=final,
        wall_time_s=time.time() - t0,
        param_count=int(n_params),
        mult_count=int(mult),
        updates=updates,
    )
    if out_dir is not None:
        write_run(out_dir, config, seed, metrics, render=render)
    return metrics, nets


def write_run(out_dir, config, seed, metrics, render=True):
    import os

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in metrics.returns:
            fh.write(row + "\n")
    summary = {
        "schema": "run-summary-v1",
        "problem": metrics.problem,
        "agent": metrics.agent,
        "seed": metrics.seed,
        "steps": metrics.steps,
        "convergence_step": metrics.convergence_step,
        "final_smoothed_return": metrics.final_smoothed,
        "wall_time_s": metrics.wall_time_s,
        "param_count": metrics.param_count,
        "mult_count_per_inference": metrics.mult_count,
        "updates": metrics.updates,
        "seconds_per_update": metrics.wall_time_s / max(metrics.updates, 1),
        "smoothing_window": config.smoothing_window,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    if render:
        from .report import render_learning_curve

        render_learning_curve(
            csv_path,
            os.path.join(out_dir, "learning_curve.png"),
            window=config.smoothing_window,
            title=f"{metrics.problem}/{metrics.agent} seed {metrics.seed}",
        )


# -- structural complexity accounting -------------------------------------------


def flop_count(agent, k, m, layers, width, edge_dim=3):
    """Inference multiplication count by structural accounting.

    Graph agents are counted in linear-processor mode: per layer, each
    directed edge runs one (width + edge_dim) x width linear map, and each
    vertex pays a width x width combiner plus a pooling scale. Dense agents
    are counted as `layers` dense layers of `width` units, so the count does
    not depend on the vertex counts.
    """
    if agent == "fnn":
        return layers * width * width
    per_edge = (width + edge_dim) * width
    per_vertex = width * width + width
    return layers * (2 * k * m * per_edge + (k + m) * per_vertex)


def video_param_counts(k, m, history_len=2, gnn_dims=(128, 128, 1),
                       gnn_proc=(128,), fnn_widths=(200, 200)):
    """Trainable parameter counts of both video agents at a given size."""
    cfg = AgentConfig()
    rng = np.random.default_rng(0)
    gnn = GnnVideoNets(k, m, history_len, cfg, rng, dims=gnn_dims, proc_hidden=gnn_proc)
    fnn = FnnVideoNets(k, m, history_len, cfg, rng, widths=fnn_widths)
    return gnn.n_params(), fnn.n_params()


# -- comparison -----------------------------------------------------------------


def read_run_dir(path):
    import os

    with open(os.path.join(path, "summary.json")) as fh:
        summary = json.load(fh)
    episode_returns = []
    with open(os.path.join(path, "metrics.csv")) as fh:
        header = fh.readline().strip()
        if header != METRICS_HEADER:
            raise ConfigError(f"{path}: unexpected metrics schema {header!r}")
        last_episode = None
        prev = None
        for line in fh:
            parts = line.rstrip("\n").split(",")
            step, episode = int(parts[0]), int(parts[1])
            ret = float(parts[2]) if parts[2] else float("nan")
            if last_episode is not None and episode != last_episode:
                episode_returns.append((prev[0], prev[1]))
            prev = (step, ret)
            last_episode = episode
    return summary, episode_returns


def compare(run_dirs, optimal_energy=None, window=10):
    """Cross-run table: sample complexity (steps to the shared threshold),
    space complexity (parameters), time complexity (seconds per update).

    The threshold is 10% above the best smoothed return in the set, or, when
    an optimal energy is supplied, a 10% performance-loss band around it.
    """
    runs = []
    problems = set()
    for path in run_dirs:
        summary, episode_returns = read_run_dir(path)
        smoothed = smoothed_episode_returns(episode_returns, window)
        runs.append({"dir": path, "summary": summary, "smoothed": smoothed})
        problems.add(summary["problem"])
    if len(problems) > 1:
        raise ConfigError(f"runs mix problems {sorted(problems)}")
    if len(runs) < 2:
        raise ConfigError("compare needs at least two runs")

    if optimal_energy is not None:
        threshold = -1.1 * abs(optimal_energy)
    else:
        best = max(v for r in runs for _, v in r["smoothed"])
        threshold = best - 0.1 * abs(best)

    by_agent = {}
    for r in runs:
        agent = r["summary"]["agent"]
        conv = convergence_step(r["smoothed"], threshold)
        entry = by_agent.setdefault(agent, {
            "convergence": [], "params": [], "sec_per_update": [], "final": [],
        })
        entry["convergence"].append(conv)
        entry["params"].append(r["summary"]["param_count"])
        entry["sec_per_update"].append(r["summary"]["seconds_per_update"])
        entry["final"].append(r["smoothed"][-1][1] if r["smoothed"] else float("nan"))

    rows = []
    for agent in sorted(by_agent):
        e = by_agent[agent]
        reached = [c for c in e["convergence"] if c is not None]
        rows.append({
            "agent": agent,
            "runs": len(e["params"]),
            "sample_complexity": float(np.mean(reached)) if reached else None,
            "reached": f"{len(reached)}/{len(e['convergence'])}",
            "space_complexity": float(np.mean(e["params"])),
            "time_per_update_s": float(np.mean(e["sec_per_update"])),
            "final_smoothed": float(np.mean(e["final"])),
        })
    return {"threshold": threshold, "rows": rows}


def format_compare_table(result):
    head = (
        f"{'agent':<18}{'runs':>5}{'steps-to-thr':>14}{'reached':>9}"
        f"{'params':>10}{'s/update':>10}{'final':>12}"
    )
    lines = [head, "-" * len(head)]
    for r in result["rows"]:
        sc = f"{r['sample_complexity']:.0f}" if r["sample_complexity"] else "-"
        lines.append(
            f"{r['agent']:<18}{r['runs']:>5}{sc:>14}{r['reached']:>9}"
            f"{r['space_complexity']:>10.0f}{r['time_per_update_s']:>10.4f}"
            f"{r['final_smoothed']:>12.4f}"
        )
    lines.append(f"threshold: {result['threshold']!r}")
    return "\n".join(lines)


def write_compare(result, out_dir, render=True):
    import os

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "compare.csv")
    with open(csv_path, "w") as fh:
        fh.write(
            "agent,runs,sample_complexity,reached,space_complexity,"
            "time_per_update_s,final_smoothed\n"
        )
        for r in result["rows"]:
            fh.write(
                f"{r['agent']},{r['runs']},"
                f"{_fmt(r['sample_complexity'])},{r['reached']},"
                f"{_fmt(r['space_complexity'])},{_fmt(r['time_per_update_s'])},"
                f"{_fmt(r['final_smoothed'])}\n"
            )
    if render:
        from .report import render_compare_bars

        render_compare_bars(result, os.path.join(out_dir, "compare.png"))
    return csv_path


def oracle_d2d_table(k, n_instances, config=None, seed_base=0, actor=None):
    """Benchmark rows: per-seed oracle / learned / all-active / random rates.

    The learned column is filled when a trained actor is supplied (its
    quantized schedule is evaluated per instance) and left None otherwise.
    """
    cfg = config or env_d2d.D2DConfig()
    rows = []
    for i in range(n_instances):
        inst = env_d2d.gen_instance(k, [seed_base, i], cfg)
        _, opt = env_d2d.brute_force_schedule(inst.gains, inst.tx_power, inst.noise_power)
        base = env_d2d.baselines(inst.gains, inst.tx_power, inst.noise_power, seed=i)
        learned = None
        if actor is not None:
            rho_rel, _ = actor.act([inst])
            rho = quantize(rho_rel[0], actor.cfg.xi)
            learned = env_d2d.sum_rate(inst.gains, rho, inst.tx_power, inst.noise_power)
        rows.append({
            "seed": i, "k": k, "oracle": opt, "learned": learned,
            "all_active": base["all_active"], "random_mean": base["random_mean"],
        })
    return rows
