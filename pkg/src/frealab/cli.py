"""Command line entry point: collect, train-feasibility, oracle, train-cbv, evaluate.

Each command reads defaults, then an optional JSON config file, then flag
overrides (``--set section.key=value`` or the named shortcuts).  The resolved
configuration is written to ``<out>/config.json``.
Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, metrics, plots
from .adversary.policy import ACTION_BOUNDS, obs_scale
from .adversary.ppo import MODES, ConfigError, TrainConfig, config_from_dict, select_mode
from .feasibility.dataset import format_report, read_dataset, to_offline_data, validate_dataset
from .feasibility.grid import ConvergenceError, LongitudinalInstance, infeasible_counts_by_speed
from .feasibility.offline import ConstantFeasibility, FeasibilityNets, OfflineTrainer, grid_dataset, train_offline
from .scenario.episode import EpisodeConfig, LearnedCbvPolicy, RuleCbvPolicy, collect_offline, run_episode
from .scenario.training import load_cbv_checkpoint, save_cbv_checkpoint, substream, train_cbv
from .world.layout import get_layout

GRID_OBS_SCALE = [40.0, 12.0, 12.0]


class UsageError(Exception):
    """Bad configuration; reported with exit code 1."""


def _episode_defaults() -> dict:
    return asdict(EpisodeConfig())


DEFAULTS = {
    "collect": {
        "out": "runs/collect", "seed": 0, "total": 30_000, "mix": [1 / 3, 1 / 3, 1 / 3],
        "episode": _episode_defaults(),
    },
    "train-feasibility": {
        "out": "runs/feasibility", "dataset": "runs/collect/dataset.csv", "seed": 0, "steps": 60_000,
        "batch_size": 1024, "lr": 3e-4, "tau": 0.9, "gamma": 0.98, "rho": 5e-3, "hidden": [64, 64],
        "resume": False, "checkpoint_every": 5000,
    },
    "oracle": {
        "out": "runs/oracle", "gap_max": 40.0, "gap_step": 0.1, "speed_max": 12.0, "speed_step": 0.5,
        "hazard_speeds": [0.0, 12.0, 13], "dt": 0.5, "gamma": 0.98, "tol": 1e-6, "max_iter": 10_000,
        "slice_speeds": [2.0, 6.0, 10.0],
    },
    "train-cbv": {
        "out": "runs/cbv", "mode": "FREA", "feasibility": None, "resume": False, "checkpoint_every": 10,
        "ppo": asdict(TrainConfig()), "episode": _episode_defaults(),
    },
    "evaluate": {
        "out": "runs/eval", "modes": ["Standard", "PPO", "FREA"], "checkpoints": {}, "feasibility": None,
        "seeds": list(range(10)), "policy": "sample", "write_logs": True, "workers": 1,
        "episode": _episode_defaults(),
    },
}

# sections whose keys are open (mode -> path)
OPEN_SECTIONS = {("evaluate", "checkpoints")}


# ------------------------------------------------------------------ config

def merge(base: dict, override: dict, command: str, prefix: str = "") -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        path = f"{prefix}{k}"
        if (command, prefix.rstrip(".")) in OPEN_SECTIONS:
            out[k] = v
        elif k not in base:
            raise UsageError(f"unknown config key {path!r} for {command}")
        elif isinstance(base[k], dict) and (command, path) not in OPEN_SECTIONS:
            if not isinstance(v, dict):
                raise UsageError(f"config key {path!r} must be a mapping")
            out[k] = merge(base[k], v, command, path + ".")
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _nested(key: str, value) -> dict:
    d: dict = {}
    cur = d
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return d


def resolve_config(command: str, file: str | None, overrides: list[tuple[str, object]]) -> dict:
    cfg = DEFAULTS[command]
    if file:
        try:
            cfg = merge(cfg, json.loads(Path(file).read_text()), command)
        except FileNotFoundError as e:
            raise UsageError(f"config file not found: {file}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {file} is not valid JSON: {e}") from e
    for key, value in overrides:
        cfg = merge(cfg, _nested(key, value), command)
    return cfg


def write_resolved(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "version": __version__, "config": cfg}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _episode_config(d: dict) -> EpisodeConfig:
    try:
        return EpisodeConfig(**d)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid episode config: {e}") from e


def _need_file(path, what: str) -> Path:
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _load_feasibility(spec):
    """``None``, the literal ``"constant"`` (all feasible) or a checkpoint path."""
    if spec is None:
        return None
    if spec == "constant":
        return ConstantFeasibility(-1.0)
    nets, _ = FeasibilityNets.load(_need_file(spec, "feasibility checkpoint"))
    return nets


# ---------------------------------------------------------------- commands

def cmd_collect(cfg: dict, log=print) -> dict:
    if int(cfg["total"]) <= 0:
        raise UsageError("total must be a positive number of records")
    ep = _episode_config(cfg["episode"])
    get_layout(ep.layout)
    out = Path(cfg["out"])
    write_resolved(out, "collect", cfg)
    path = out / "dataset.csv"
    try:
        summary = collect_offline(ep, cfg["mix"], int(cfg["total"]), int(cfg["seed"]), path)
    except ValueError as e:
        raise UsageError(str(e)) from e
    report = validate_dataset(read_dataset(path))
    text = format_report(report)
    (out / "report.txt").write_text(text + "\n")
    log(text)
    return {"dataset": str(path), "summary": summary, "report": report}


def _grid_instance_eval(nets, instance, grid_values) -> dict:
    v_true = grid_values.ravel()
    mesh = np.meshgrid(*(a.nodes for a in instance.axes), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    v = nets.values(pts)
    mask = np.abs(v_true) >= 1.0
    return {"sign_agreement": float(np.mean((v[mask] > 0) == (v_true[mask] > 0))),
            "mean_difference": float(v.mean() - v_true.mean()), "mae": float(np.abs(v - v_true).mean())}


def cmd_train_feasibility(cfg: dict, log=print) -> dict:
    tau, gamma = float(cfg["tau"]), float(cfg["gamma"])
    if not 0.5 < tau < 1.0:
        raise UsageError("tau must lie in (0.5, 1)")
    if not 0.0 < gamma < 1.0:
        raise UsageError("gamma must lie in (0, 1)")
    seed = int(cfg["seed"])
    instance = None
    if cfg["dataset"] == "grid":
        instance = LongitudinalInstance()
        data = grid_dataset(instance)
        o_scale, a_scale = GRID_OBS_SCALE, [3.0]
    else:
        data = to_offline_data(read_dataset(_need_file(cfg["dataset"], "dataset")))
        o_scale, a_scale = obs_scale(data.obs.shape[1] // 6), ACTION_BOUNDS
    out = Path(cfg["out"])
    write_resolved(out, "train-feasibility", cfg)
    ck_path = out / "feasibility.npz"
    curve_path = out / "losses.csv"
    steps = int(cfg["steps"])
    rng = substream(seed, "minibatch")
    rows: list[list] = []
    if cfg["resume"] and ck_path.exists():
        nets, ck = FeasibilityNets.load(ck_path)
        trainer = OfflineTrainer(nets, ck["optimizers"]["v"], ck["optimizers"]["q"], steps_done=ck["meta"]["steps_done"])
        rng.bit_generator.state = ck["meta"]["rng"]
        rows = [[int(r["step"]), float(r["v_loss"]), float(r["q_loss"]), float(r["v_mean"])]
                for r in metrics.read_csv(curve_path)][: trainer.steps_done]
        log(f"resuming at step {trainer.steps_done}")
    else:
        nets = FeasibilityNets.init(data.obs.shape[1], data.act.shape[1], substream(seed, "init"), tuple(cfg["hidden"]),
                                    o_scale, a_scale, tau, gamma)
        trainer = OfflineTrainer.create(nets, steps, float(cfg["lr"]))

    def save():
        trainer.nets.save(ck_path, {"v": trainer.v_opt, "q": trainer.q_opt},
                          {"steps_done": trainer.steps_done, "rng": json.loads(json.dumps(rng.bit_generator.state)),
                           "dataset": str(cfg["dataset"])})
        with open(curve_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "v_loss", "q_loss", "v_mean"])
            w.writerows([[r[0]] + [repr(x) for x in r[1:]] for r in rows])

    def on_step(tr):
        c = tr.curves
        rows.append([tr.steps_done, c.v_loss[-1], c.q_loss[-1], c.v_mean[-1]])
        if tr.steps_done % int(cfg["checkpoint_every"]) == 0:
            save()
            log(f"step {tr.steps_done}: v_loss {np.mean(c.v_loss[-100:]):.4g} q_loss {np.mean(c.q_loss[-100:]):.4g}")

    train_offline(data, trainer.nets, steps, int(cfg["batch_size"]), rng, float(cfg["lr"]), float(cfg["rho"]),
                  trainer, on_step)
    save()
    arr = np.array(rows) if rows else np.zeros((0, 4))
    if len(arr):
        plots.curves(out / "losses.svg", arr[:, 0], {"V_h loss": arr[:, 1], "Q_h loss": arr[:, 2], "mean V_h": arr[:, 3]})
    result = {"checkpoint": str(ck_path), "steps": trainer.steps_done}
    if instance is not None:
        result["oracle"] = _grid_instance_eval(trainer.nets, instance, instance.solve(gamma).values)
        (out / "oracle_check.json").write_text(json.dumps(result["oracle"], indent=2, sort_keys=True) + "\n")
        log(f"oracle agreement: {result['oracle']}")
    return result


def cmd_oracle(cfg: dict, log=print) -> dict:
    gamma = float(cfg["gamma"])
    if not 0.0 < gamma < 1.0:
        raise UsageError("gamma must lie in (0, 1)")
    hz = cfg["hazard_speeds"]
    try:
        inst = LongitudinalInstance(float(cfg["gap_max"]), float(cfg["gap_step"]), float(cfg["speed_max"]),
                                    float(cfg["speed_step"]), None if hz is None else (float(hz[0]), float(hz[1]), int(hz[2])),
                                    float(cfg["dt"]))
        inst.axes
    except ValueError as e:
        raise UsageError(f"invalid grid bounds: {e}") from e
    out = Path(cfg["out"])
    write_resolved(out, "oracle", cfg)
    grid = inst.solve(gamma, float(cfg["tol"]), int(cfg["max_iter"]))
    grid.save(out / "grid.npz")
    counts = infeasible_counts_by_speed(grid)
    speeds = grid.axes[1].nodes
    with open(out / "infeasible_by_speed.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["av_speed", "infeasible_cells"])
        w.writerows([[repr(float(s)), int(c)] for s, c in zip(speeds, counts)])
    for v in cfg["slice_speeds"]:
        if len(grid.axes) == 3:
            grid.slice_csv(out / f"slice_speed_{v:g}.csv", {"av_speed": float(v)})
    if len(grid.axes) == 3:
        plots.level_sets(out / "level_sets.svg", grid, [float(v) for v in cfg["slice_speeds"]])
    monotone = bool(np.all(np.diff(counts) >= 0))
    log(f"converged in {len(grid.residuals)} sweeps, residual {grid.iteration_residual:.2e}; "
        f"infeasible cells non-decreasing in speed: {monotone}")
    return {"grid": str(out / "grid.npz"), "residual": grid.iteration_residual, "monotone": monotone}


def cmd_train_cbv(cfg: dict, log=print) -> dict:
    mode = cfg["mode"]
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; choose from {list(MODES)}")
    try:
        tcfg = config_from_dict(cfg["ppo"])
    except (ConfigError, TypeError) as e:
        raise UsageError(f"invalid ppo config: {e}") from e
    ep = _episode_config(cfg["episode"])
    feas = _load_feasibility(cfg["feasibility"])
    try:
        select_mode(mode, feas)
    except ConfigError as e:
        raise UsageError(str(e)) from e
    out = Path(cfg["out"])
    write_resolved(out, "train-cbv", cfg)
    ck = out / "cbv.npz"

    def progress(row):
        log(f"step {row['step']} return {row['episode_return']:.3f} clip {row['clip_fraction']:.3f} "
            f"entropy {row['entropy']:.3f} collisions {row['collisions']}")

    learner, state = train_cbv(mode, ep, tcfg, feas, out / "telemetry.csv", ck, bool(cfg["resume"]),
                               int(cfg["checkpoint_every"]), progress,
                               {"episode_config": asdict(ep), "feasibility": cfg["feasibility"]})
    if not Path(ck).exists():
        # Standard mode never updates; save the untouched policy so evaluate can load it uniformly
        save_cbv_checkpoint(ck, learner, mode, state, {}, {"episode_config": asdict(ep)})
    tel = out / "telemetry.csv"
    if tel.exists():
        rows = [r for r in metrics.read_csv(tel) if r["episode_return"] not in ("", "nan")]
        if rows:
            plots.curves(out / "returns.svg", [int(r["step"]) for r in rows],
                         {"episode return": [float(r["episode_return"]) for r in rows],
                          "entropy": [float(r["entropy"]) for r in rows]})
    return {"checkpoint": str(ck), "steps": state.steps, "updates": state.updates}


def _controller(mode: str, checkpoint, policy: str):
    if mode == "Standard":
        return RuleCbvPolicy()
    learner, _ = load_cbv_checkpoint(checkpoint)
    return LearnedCbvPolicy(learner.policy, deterministic=policy == "mean")


def _eval_one(args):
    mode, checkpoint, feas_spec, ep_dict, seed, policy, log_path = args
    ep = EpisodeConfig(**ep_dict)
    controller = _controller(mode, checkpoint, policy)
    feas = _load_feasibility(feas_spec)
    res = run_episode(ep, controller, seed, feas, substream(seed, "eval-action"), log_path)
    lane = get_layout(ep.layout).lanes[res.av_lane]
    return metrics.evaluate_episode(res.records, lane, ep.dt, seed, mode)


def cmd_evaluate(cfg: dict, log=print) -> dict:
    seeds = [int(s) for s in cfg["seeds"]]
    if not seeds:
        raise UsageError("seed list is empty")
    modes = list(cfg["modes"])
    if not modes:
        raise UsageError("no modes to evaluate")
    for m in modes:
        if m not in MODES:
            raise UsageError(f"unknown mode {m!r}")
        if m != "Standard":
            _need_file(cfg["checkpoints"].get(m), f"checkpoint for mode {m}")
    if cfg["policy"] not in ("sample", "mean"):
        raise UsageError("policy must be 'sample' or 'mean'")
    ep = _episode_config(cfg["episode"])
    if cfg["feasibility"] not in (None, "constant"):
        _need_file(cfg["feasibility"], "feasibility checkpoint")
    out = Path(cfg["out"])
    write_resolved(out, "evaluate", cfg)
    logs = out / "logs"
    if cfg["write_logs"]:
        logs.mkdir(exist_ok=True)
    jobs = [(m, cfg["checkpoints"].get(m), cfg["feasibility"], asdict(ep), s, cfg["policy"],
             str(logs / f"{m}_seed{s}.jsonl") if cfg["write_logs"] else None) for m in modes for s in seeds]
    workers = int(cfg["workers"])
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            reports = list(pool.map(_eval_one, jobs))
    else:
        reports = [_eval_one(j) for j in jobs]
    by_mode = {m: [r for r in reports if r.mode == m] for m in modes}
    mcfg = metrics.MetricConfig()
    summaries = {m: metrics.aggregate(rs, mcfg) for m, rs in by_mode.items()}
    metrics.write_summary_csv(out / "summary.csv", summaries)
    metrics.write_episode_csv(out / "episodes.csv", reports)
    metrics.write_histograms_csv(out / "histograms.csv", by_mode, mcfg)
    plots.surrogate_histograms(out / "ttc_pet.svg", by_mode, mcfg.ttc_bins, mcfg.pet_bins)
    plots.severity_histogram(out / "severity.svg", by_mode)
    inputs = {k: _file_digest(p) for k, p in sorted(cfg["checkpoints"].items()) if k in modes}
    if cfg["feasibility"] not in (None, "constant"):
        inputs["feasibility"] = _file_digest(cfg["feasibility"])
    # paths are left out of the hash; the inputs they name are hashed by content above
    hashed = {k: v for k, v in cfg.items() if k not in ("out", "checkpoints")}
    if "feasibility" in inputs:
        hashed["feasibility"] = inputs["feasibility"]
    manifest = {"config_sha256": hashlib.sha256(json.dumps(hashed, sort_keys=True).encode()).hexdigest()[:16],
                "inputs": inputs, "version": __version__}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for m in modes:
        s = summaries[m]
        log(f"{m:9s} CR {s['CR']:.2f}  IR {_fmt(s['IR'])}  ID {_fmt(s['ID'])}  near-misses {s['near_misses']}  "
            f"OS {s['OS']:.1f}")
    return {"summaries": summaries, "reports": reports, "manifest": manifest}


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.2f}"


COMMANDS = {
    "collect": cmd_collect,
    "train-feasibility": cmd_train_feasibility,
    "oracle": cmd_oracle,
    "train-cbv": cmd_train_cbv,
    "evaluate": cmd_evaluate,
}

# flag -> (config key, parser)
SHORTCUTS = {
    "collect": {"total": ("total", int)},
    "train-feasibility": {"dataset": ("dataset", str), "steps": ("steps", int), "tau": ("tau", float),
                          "gamma": ("gamma", float)},
    "oracle": {"gamma": ("gamma", float), "tol": ("tol", float)},
    "train-cbv": {"mode": ("mode", str), "feasibility": ("feasibility", str), "steps": ("ppo.total_steps", int)},
    "evaluate": {"modes": ("modes", lambda s: [m for m in s.split(",") if m]),
                 "seeds": ("seeds", lambda s: [int(x) for x in s.split(",") if x.strip()]),
                 "feasibility": ("feasibility", str), "workers": ("workers", int)},
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frealab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"frealab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted path; value parsed as JSON)")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        for flag in SHORTCUTS[name]:
            sp.add_argument(f"--{flag}")
        if name in ("train-feasibility", "train-cbv"):
            sp.add_argument("--resume", action="store_true")
        if name == "evaluate":
            sp.add_argument("--checkpoint", action="append", default=[], metavar="MODE=PATH")
    return p


def _overrides(args) -> list[tuple[str, object]]:
    out = []
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out.append((k.strip(), _parse_value(v)))
    if args.out is not None:
        out.append(("out", args.out))
    if args.seed is not None:
        out.append(("ppo.seed" if args.command == "train-cbv" else "seed", args.seed))
    for flag, (key, conv) in SHORTCUTS[args.command].items():
        v = getattr(args, flag.replace("-", "_"))
        if v is not None:
            try:
                out.append((key, conv(v)))
            except ValueError as e:
                raise UsageError(f"--{flag}: {e}") from e
    if getattr(args, "resume", False):
        out.append(("resume", True))
    for item in getattr(args, "checkpoint", []):
        if "=" not in item:
            raise UsageError(f"--checkpoint expects MODE=PATH, got {item!r}")
        m, path = item.split("=", 1)
        out.append((f"checkpoints.{m}", path))
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args.config, _overrides(args))
        COMMANDS[args.command](cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ConvergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
