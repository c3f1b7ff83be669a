"""Benchmark scenario runner: shielded/unshielded SAC training with artifacts.

Scenarios: "sac" trains the performance agent with no safety filter;
"sac_bcbf" adds the safety filter over the two designed backups;
"sac_learned_backup" additionally trains the neural backup policy online
from the filter's own backup trajectories, enlarging the certified set while
training the performance agent.

Every run writes metrics.csv (episode, return, violations, wall_time_s,
h3_area), set-snapshot CSVs and weight checkpoints at configured episodes,
and a run_manifest.json echoing the configuration with a content hash.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import benchmark as bench
from .backup import MlpPolicy, load_mlp_policy, save_mlp_policy
from .barrier import box_max_linear
from .engine import make_engine
from .rl import ReplayBuffer, assign_backup_rewards
from .sac import SacAgent, SacConfig, sac_update
from .shield import ShieldState, apply_filter

SCENARIOS = ("sac", "sac_bcbf", "sac_learned_backup")

SETS_COLUMNS = ("x1", "x2", "h_s", "h_b1", "h_b2", "h_b3",
                "h_1", "h_2", "h_3", "h", "V_hj")


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending field."""


@dataclass
class RunConfig:
    scenario: str = "sac_bcbf"
    seed: int = 0
    episodes: int = 100
    steps_per_episode: int = 200
    dt: float = 0.01
    zoh_substeps: int = 2
    train_every: int = 1
    buffer_capacity: int = 1_000_000
    # Barrier / flow configuration (benchmark defaults unless overridden).
    horizon_T: float = 1.5
    num_samples_N: int = 150
    substeps_per_sample: int = 1
    rho1: float = 1000.0
    rho2: float = 100.0
    rho3: float = 2000.0
    alpha: float = 50.0
    kappa_h: float = 0.002
    kappa_beta: float = 0.05
    epsilon: str | float = "auto"
    nu: float = 0.005
    gain_k1: float = -13.0
    gain_k2: float = -25.0
    mlp_hidden: tuple = (24, 24)
    # SAC settings (shared shape for both agents).
    sac_lr: float = 3e-4
    sac_batch: int = 256
    sac_updates_per_episode: int = 150
    sac_tau: float = 0.005
    discount: float = 0.99
    backup_sac_updates: int = 400
    backup_reward_scale: float = 10.0
    backup_discount: float = 0.9
    backup_sac_lr: float = 1e-3
    backup_tau: float = 0.02
    # Artifacts.
    snapshot_episodes: tuple = (0, 25, 50, 75, 100)
    snapshot_grid: tuple = (61, 41)
    out_dir: str = "runs/latest"
    deterministic: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        for name in ("episodes", "steps_per_episode", "num_samples_N"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if not 0.0 < self.discount < 1.0:
            raise ConfigError("discount must be in (0, 1)")
        if self.epsilon != "auto":
            try:
                object.__setattr__(self, "epsilon", float(self.epsilon))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"epsilon must be 'auto' or a number") from exc

    def to_dict(self):
        d = asdict(self)
        for key in ("mlp_hidden", "snapshot_episodes", "snapshot_grid"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_mapping(cls, mapping):
        """Build from a flat string mapping (INI values); unknown keys error."""
        kwargs = {}
        fields = {f: t for f, t in cls.__dataclass_fields__.items()}
        for key, raw in mapping.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            default = fields[key].default
            if key == "epsilon":
                kwargs[key] = raw if raw == "auto" else float(raw)
            elif key in ("mlp_hidden", "snapshot_episodes", "snapshot_grid"):
                kwargs[key] = tuple(int(v) for v in str(raw).replace(",", " ").split())
            elif isinstance(default, bool):
                kwargs[key] = str(raw).lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            elif isinstance(default, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        return cls(**kwargs)


def config_hash(config_dict):
    """Git-blob style content hash of the canonical config JSON."""
    blob = json.dumps(config_dict, sort_keys=True).encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


def _fmt(value):
    """IEEE-754 round-trip decimal formatting for CSV cells."""
    return repr(float(value))


def build_stack(cfg: RunConfig, neural=None):
    return bench.make_benchmark(
        neural=neural,
        gain_K=np.array([[cfg.gain_k1, cfg.gain_k2]]),
        rho1=cfg.rho1,
        nu=cfg.nu,
        flow_overrides=dict(horizon_T=cfg.horizon_T, num_samples_N=cfg.num_samples_N,
                            substeps_per_sample=cfg.substeps_per_sample),
        soft_overrides=dict(rho2=cfg.rho2, rho3=cfg.rho3),
        shield_overrides=dict(alpha=cfg.alpha, kappa_h=cfg.kappa_h,
                              kappa_beta=cfg.kappa_beta),
        epsilon=cfg.epsilon,
    )


def sample_certified(engine, rng, epsilon, state_box, batch=32, max_batches=60,
                     designed_only=False):
    """Uniform rejection sample from a certified set {h >= epsilon}.

    With designed_only the acceptance test uses the soft maximum over the
    designed indices alone, giving the fixed start distribution over the
    pre-designed invariant subset that all scenarios share.
    """
    from .barrier import softmax_rho

    n_designed = engine.suite.n_designed
    for _ in range(max_batches):
        cand = rng.uniform(state_box.lower, state_box.upper, size=(batch, 2))
        out = engine.barrier_batch(cand, want_grad=False)
        if designed_only:
            h = softmax_rho(engine.cfg.soft.rho3, out["h_j"][:, :n_designed], axis=-1)
        else:
            h = out["h"]
        ok = np.nonzero(h >= epsilon)[0]
        if ok.size:
            return cand[ok[0]]
    # Certified set too thin to hit by rejection; fall back to a backup center.
    centers = [s.center for s, _ in engine.suite.designed]
    return centers[rng.integers(len(centers))] + rng.normal(0.0, 0.02, size=2)


def shield_step(engine, cfg_barrier, x, u_d, state, want_samples=False):
    """One filter query through an engine; returns (u, state, info)."""
    out = engine.barrier_batch(x[None], want_grad=True, want_samples=want_samples)
    h_j = out["h_j"][0]
    h = float(out["h"][0])
    lfh = float(out["L_f_h"][0])
    lgh = np.atleast_1d(out["L_g_h"][0])
    box = engine.sys.control_box
    beta = lfh + cfg_barrier.alpha * (h - cfg_barrier.epsilon) + box_max_linear(lgh, box)
    gamma = min((h - cfg_barrier.epsilon) / cfg_barrier.kappa_h,
                beta / cfg_barrier.kappa_beta)
    if state is None:
        state = ShieldState(q=int(np.argmax(h_j)), prev_gamma_sign=None)
    u_backups = engine.backup_controls(x[None])[0][:, None]
    u, state = apply_filter(h_j, gamma, lfh, lgh, h, u_backups, u_d, state,
                            cfg_barrier, box)
    info = {"h_j": h_j, "h": h, "beta": beta, "gamma": gamma, "q": state.q}
    if want_samples:
        info.update(bundle=out["bundle"][0], u_at_samples=out["u_at_samples"][0],
                    extra_next=out["extra_next"][0])
    return u, state, info


def measure_h3_area(engine, grid_shape, state_box):
    """Grid area of {h_(last index) >= 0} over the state box."""
    ax0 = np.linspace(state_box.lower[0], state_box.upper[0], grid_shape[0])
    ax1 = np.linspace(state_box.lower[1], state_box.upper[1], grid_shape[1])
    pts = np.stack(np.meshgrid(ax0, ax1, indexing="ij"), axis=-1).reshape(-1, 2)
    h_j = engine.barrier_batch(pts, want_grad=False)["h_j"]
    cell = ((state_box.upper - state_box.lower) / (np.array(grid_shape) - 1.0)).prod()
    return float(np.sum(h_j[:, -1] >= 0.0) * cell), h_j, pts


def write_sets_csv(path, stack, pts, h_j, value_grid=None):
    """Set-snapshot CSV with the documented column schema.

    h_b3 is the softmax backup-set value attached to the neural policy; when
    the suite has no neural policy the h_b3/h_3 cells are left empty. The
    V_hj column is included only when a value grid is supplied.
    """
    from .backup import neural_backup_set_value
    from .barrier import softmax_rho
    from .hj import query_value

    has_neural = stack.suite.neural is not None
    cols = list(SETS_COLUMNS)
    if value_grid is None:
        cols.remove("V_hj")
    nan = np.full(pts.shape[0], np.nan)
    columns = [pts[:, 0], pts[:, 1], stack.h_s(pts),
               stack.suite.designed[0][0].h_b(pts),
               stack.suite.designed[1][0].h_b(pts),
               neural_backup_set_value(stack.suite, pts) if has_neural else nan,
               h_j[:, 0], h_j[:, 1],
               h_j[:, 2] if h_j.shape[1] > 2 else nan,
               softmax_rho(stack.cfg.soft.rho3, h_j, axis=-1)]
    if value_grid is not None:
        columns.append(query_value(value_grid, pts))
    table = np.column_stack(columns)
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in table:
            fh.write(",".join("" if np.isnan(c) else _fmt(c) for c in row) + "\n")


class MetricsWriter:
    COLUMNS = ("episode", "return", "violations", "wall_time_s", "h3_area")

    def __init__(self, path):
        self.path = Path(path)
        self.path.write_text(",".join(self.COLUMNS) + "\n")

    def row(self, episode, ep_return, violations, wall_time_s, h3_area=None):
        cells = [str(int(episode)), _fmt(ep_return), str(int(violations)),
                 _fmt(wall_time_s), "" if h3_area is None else _fmt(h3_area)]
        with open(self.path, "a") as fh:
            fh.write(",".join(cells) + "\n")


def run_scenario(cfg: RunConfig, progress=False):
    """Train one scenario; returns the artifact directory path."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    # Independent streams per component so matched seeds give identical
    # initial agents and start states across scenarios.
    seeds = np.random.SeedSequence(cfg.seed).spawn(6)
    (rng_init, rng_act, rng_sac_perf, rng_sac_backup, rng_weights_perf,
     rng_weights_backup) = (np.random.default_rng(s) for s in seeds)

    learned = cfg.scenario == "sac_learned_backup"
    shielded = cfg.scenario != "sac"
    neural = (bench.fresh_neural_policy(rng_weights_backup, hidden=cfg.mlp_hidden)
              if learned else None)
    stack = build_stack(cfg, neural=neural)
    engine = make_engine(stack)

    sac_kwargs = dict(hidden=cfg.mlp_hidden, lr_actor=cfg.sac_lr, lr_critic=cfg.sac_lr,
                      lr_alpha=cfg.sac_lr, tau=cfg.sac_tau, discount=cfg.discount,
                      batch_size=cfg.sac_batch)
    perf_agent = SacAgent(2, stack.sys.control_box,
                          SacConfig(updates_per_call=cfg.sac_updates_per_episode,
                                    **sac_kwargs), rng_weights_perf)
    perf_buffer = ReplayBuffer(cfg.buffer_capacity, 2, 1)
    backup_agent = None
    backup_buffer = None
    if learned:
        backup_kwargs = dict(sac_kwargs, lr_actor=cfg.backup_sac_lr,
                             lr_critic=cfg.backup_sac_lr, lr_alpha=cfg.backup_sac_lr,
                             discount=cfg.backup_discount, tau=cfg.backup_tau)
        backup_agent = SacAgent(2, stack.sys.control_box,
                                SacConfig(updates_per_call=cfg.backup_sac_updates,
                                          reward_scale=cfg.backup_reward_scale,
                                          **backup_kwargs), rng_weights_backup)
        backup_agent.load_policy_weights(neural)
        backup_buffer = ReplayBuffer(cfg.buffer_capacity, 2, 1)

    metrics = MetricsWriter(out_dir / "metrics.csv")
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "scenario": cfg.scenario,
        "epsilon": stack.cfg.epsilon,
        "epsilon_s": stack.cfg.epsilon_s,
        "engine": type(engine).__name__,
    }
    manifest["content_hash"] = config_hash(manifest["config"])
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2))

    def snapshot(tag):
        if not learned:
            return None
        area, h_j, pts = measure_h3_area(engine, cfg.snapshot_grid, stack.state_box)
        write_sets_csv(out_dir / f"sets_ep{tag:03d}.csv", stack.with_suite(engine.suite),
                       pts, h_j)
        save_mlp_policy(out_dir / f"backup_policy_ep{tag:03d}.bin",
                        engine.suite.neural)
        save_mlp_policy(out_dir / f"perf_policy_ep{tag:03d}.bin",
                        perf_agent.deterministic_policy())
        return area

    area0 = snapshot(0) if 0 in cfg.snapshot_episodes else None
    if area0 is not None:
        metrics.row(0, 0.0, 0, 0.0, area0)

    incident = None
    for ep in range(1, cfg.episodes + 1):
        t_start = time.perf_counter()
        # All scenarios share a fixed start distribution: uniform over the
        # certified set of the pre-designed backups, so returns are
        # comparable across scenarios.
        x = sample_certified(engine, rng_init, stack.cfg.epsilon, stack.state_box,
                             designed_only=True)
        state = None
        ep_return = 0.0
        violations = 0
        for _ in range(cfg.steps_per_episode):
            u_d = perf_agent.act(x[None], rng_act)[0]
            if shielded:
                u_exec, state, info = shield_step(engine, stack.cfg, x, u_d, state,
                                                  want_samples=learned)
                if learned:
                    bx, bu, br, bxn = assign_backup_rewards(
                        stack.sys, engine.suite, info["bundle"], info["h_j"],
                        stack.cfg.flow, u_at_samples=info["u_at_samples"],
                        extra_next=info["extra_next"])
                    backup_buffer.append_batch(bx, bu, br, bxn)
            else:
                u_exec = u_d
            if stack.h_s(x) < 0.0:
                violations += 1
            r = bench.performance_reward(x, u_d)
            x_next = engine.zoh_step(x[None], np.atleast_1d(u_exec).reshape(1, -1),
                                     cfg.dt, substeps=cfg.zoh_substeps)[0]
            if not np.all(np.isfinite(x_next)):
                incident = {"episode": ep, "reason": "integration diverged"}
                break
            perf_buffer.append_batch(x, u_d, r, x_next)
            ep_return += float(r)
            x = x_next

        if ep % cfg.train_every == 0:
            sac_update(perf_buffer, perf_agent, rng_sac_perf)
            if learned and len(backup_buffer) >= backup_agent.cfg.batch_size:
                sac_update(backup_buffer, backup_agent, rng_sac_backup)
                engine.set_weights(backup_agent.deterministic_policy())

        area = snapshot(ep) if ep in cfg.snapshot_episodes else None
        wall = 0.0 if cfg.deterministic else time.perf_counter() - t_start
        metrics.row(ep, ep_return, violations, wall, area)
        if progress and (ep % 10 == 0 or ep == 1):
            print(f"  ep {ep:3d} return {ep_return:8.2f} violations {violations}"
                  + (f" h3_area {area:.3f}" if area is not None else ""))
        if incident:
            (out_dir / "incident.json").write_text(json.dumps(incident))
            break

    if learned:
        save_mlp_policy(out_dir / "backup_policy_final.bin", engine.suite.neural)
    save_mlp_policy(out_dir / "perf_policy_final.bin",
                    perf_agent.deterministic_policy())
    return out_dir


def export_sets(cfg: RunConfig, checkpoint=None, out_path=None, grid_shape=(201, 201),
                hj_csv=None, hj_sidecar=None):
    """Grid CSV of all set functions, optionally with the value-grid column."""
    neural = load_mlp_policy(checkpoint) if checkpoint else None
    stack = build_stack(cfg, neural=neural)
    engine = make_engine(stack)
    value_grid = None
    if hj_csv is not None:
        from .hj import load_value_grid

        if hj_sidecar is None:
            hj_sidecar = str(hj_csv).replace(".csv", "_spec.json")
        value_grid = load_value_grid(hj_csv, hj_sidecar)
    ax0 = np.linspace(stack.state_box.lower[0], stack.state_box.upper[0], grid_shape[0])
    ax1 = np.linspace(stack.state_box.lower[1], stack.state_box.upper[1], grid_shape[1])
    pts = np.stack(np.meshgrid(ax0, ax1, indexing="ij"), axis=-1).reshape(-1, 2)
    h_j = engine.barrier_batch(pts, want_grad=False)["h_j"]
    out_path = out_path or (Path(cfg.out_dir) / "sets_export.csv")
    write_sets_csv(out_path, stack, pts, h_j, value_grid=value_grid)
    return Path(out_path)
