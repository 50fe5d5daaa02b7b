"""Command-line front end: train, sample, bench, trace, and gradcheck
subcommands over a single flat JSON config. Exit codes: 0 ok, 2 bad config,
3 numeric abort, 4 I/O failure (gradcheck returns 1 when the check fails)."""

from __future__ import annotations

import argparse
import json
import pathlib
import sys
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .tensor import NumericError, grad_check, no_grad
from .flow import SynthConfig, euler_sample, gen_batch, fm_loss
from .model import CheckpointError, DiTConfig, model_forward_dense, random_params
from .elastic import (ElasticConfig, WidthMenu, build_model, decision_signature,
                      elastic_forward_train, gating_loss, load_model, save_model,
                      total_loss, width_loss)
from .infer_cache import InferenceConfig, denoise_full, write_trace_csv
from .metrics import trace_summary, write_bench_csv, write_grid_csv, write_summary_csv
from .trainer import TrainConfig, evaluate, train, write_snapshots, _stack_batch


class ConfigError(Exception):
    """Malformed or out-of-range configuration; maps to exit code 2."""


DEFAULT_CONFIG = {
    # backbone dimensions
    "n_blocks": 8,
    "dim": 32,
    "width_factor": 4,
    "router_hidden": 8,
    "n_heads": 4,
    "tokens": 16,
    "embed_period": 1000.0,
    # routing
    "tau": 0.5,
    "rho_g": 0.6,
    "rho_w": 0.65,
    "lambda_eff": 1.0,
    "width_menu": [0.25, 0.5, 0.75, 1.0],
    # synthetic data
    "modes": 4,
    "data_seed": 1234,
    "data_scale": 0.1,
    # training
    "train_steps": 4300,
    "batch_size": 32,
    "warmup_frac": 0.3,
    "learning_rate": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "grad_clip": 1.0,
    "eval_every": 100,
    "router_init": "full_capacity",
    # inference engine
    "delta_margin": 0.1,
    "max_reuse": 5,
    "sample_steps": 32,
    "dense_override": False,
    # sample / trace / bench workloads
    "n_trajectories": 8,
    "bench_trajectories": 16,
    "bench_data": 256,
    "bench_deltas": [0.0, 0.05, 0.1, 0.15],
    "bench_reuses": [0, 1, 5, 10],
    # gradient check
    "gradcheck_coords": 20,
    "gradcheck_h": 1e-6,
    "gradcheck_batch": 4,
    # rng
    "seed": 0,
}


def _typed(key: str, value, default):
    """Coerce a JSON value to the default's type, rejecting mismatches."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key {key!r} must be a list, got {value!r}")
        return value
    return value


def load_config(path: Optional[str]) -> dict:
    """Defaults overlaid with the JSON file at `path`; unknown keys rejected."""
    cfg = dict(DEFAULT_CONFIG)
    if path is None:
        return cfg
    with open(path) as fh:
        try:
            user = json.load(fh)
        except ValueError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    for key, value in user.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _typed(key, value, DEFAULT_CONFIG[key])
    return cfg


@dataclass
class RunConfig:
    """Everything a subcommand needs, built once from the flat config dict."""
    raw: dict
    dit: DiTConfig
    elastic: ElasticConfig
    synth: SynthConfig
    train: TrainConfig
    infer: InferenceConfig

    @property
    def seed(self) -> int:
        return self.raw["seed"]


def build_run_config(raw: dict) -> RunConfig:
    try:
        menu = WidthMenu(tuple(float(r) for r in raw["width_menu"]))
        dit = DiTConfig(n_blocks=raw["n_blocks"], dim=raw["dim"],
                        width_factor=raw["width_factor"],
                        router_hidden=raw["router_hidden"], n_heads=raw["n_heads"],
                        tokens=raw["tokens"], embed_period=raw["embed_period"])
        ecfg = ElasticConfig(tau=raw["tau"], rho_g=raw["rho_g"], rho_w=raw["rho_w"],
                             lambda_eff=raw["lambda_eff"], menu=menu)
        synth = SynthConfig(tokens=raw["tokens"], dim=raw["dim"], modes=raw["modes"],
                            seed=raw["data_seed"], scale=raw["data_scale"])
        tcfg = TrainConfig(dit=dit, elastic=ecfg, synth=synth,
                           steps=raw["train_steps"], batch_size=raw["batch_size"],
                           warmup_frac=raw["warmup_frac"],
                           learning_rate=raw["learning_rate"], beta1=raw["beta1"],
                           beta2=raw["beta2"], adam_eps=raw["adam_eps"],
                           grad_clip=raw["grad_clip"], eval_every=raw["eval_every"],
                           seed=raw["seed"], router_init=raw["router_init"])
        icfg = InferenceConfig(tau=raw["tau"], delta_margin=raw["delta_margin"],
                               max_reuse=raw["max_reuse"], steps=raw["sample_steps"],
                               dense_override=raw["dense_override"])
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    return RunConfig(raw=raw, dit=dit, elastic=ecfg, synth=synth,
                     train=tcfg, infer=icfg)


def _icfg(**kw) -> InferenceConfig:
    try:
        return InferenceConfig(**kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def write_effective_config(path, raw: dict) -> None:
    with open(path, "w") as fh:
        json.dump(raw, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_samples_csv(path, samples: List[np.ndarray]) -> None:
    # one flattened tokens*dim vector per row, full float64 precision
    with open(path, "w") as fh:
        for x in samples:
            fh.write(",".join(repr(float(v)) for v in x.reshape(-1)) + "\n")


def _checkpoint_path(args, out: pathlib.Path) -> pathlib.Path:
    return pathlib.Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"


def _positive(raw: dict, key: str) -> int:
    v = raw[key]
    if v < 1:
        raise ConfigError(f"{key} must be >= 1, got {v}")
    return v


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args, rc: RunConfig, out: pathlib.Path) -> int:
    result = train(rc.train)
    save_model(result.model, out / "model.ckpt")
    write_snapshots(out / "snapshots.ndjson", result.snapshots)
    last = result.snapshots[-1]
    print(f"train: {rc.train.steps} steps done, final perf={last.perf:.6f} "
          f"p_bar={last.p_bar:.4f} r_bar={last.r_bar:.4f} "
          f"flop_ratio={last.flop_ratio:.3f}")
    print(f"train: checkpoint {out / 'model.ckpt'}, log {out / 'snapshots.ndjson'}")
    return 0


def cmd_sample(args, rc: RunConfig, out: pathlib.Path) -> int:
    n = _positive(rc.raw, "n_trajectories")
    model = load_model(_checkpoint_path(args, out), rc.dit, rc.elastic)
    shape = (rc.dit.tokens, rc.dit.dim)
    samples: List[np.ndarray] = []
    if args.mode == "dense":
        def velocity(x, t):
            with no_grad():
                return model_forward_dense(x, t, model.params, rc.dit).values
        for k in range(n):
            samples.append(euler_sample(velocity, rc.infer.steps, rc.seed + k, shape))
    else:
        trace = []
        for k in range(n):
            x, records = denoise_full(model, rc.infer, rc.seed + k)
            samples.append(x)
            trace.extend(records)
        write_trace_csv(out / "trace.csv", trace)
    _write_samples_csv(out / "samples.csv", samples)
    print(f"sample: wrote {n} {args.mode} trajectories to {out / 'samples.csv'}")
    return 0


def cmd_bench(args, rc: RunConfig, out: pathlib.Path) -> int:
    n_traj = _positive(rc.raw, "bench_trajectories")
    n_data = _positive(rc.raw, "bench_data")
    model = load_model(_checkpoint_path(args, out), rc.dit, rc.elastic)
    tau, steps = rc.elastic.tau, rc.infer.steps
    rows = []

    def run(label: str, icfg: InferenceConfig):
        rep = evaluate(model, rc.synth, icfg, n_traj, n_data, rc.seed)
        rows.append((label, rep.flop_ratio, rep.energy_distance))

    # component ablation: gate skipping alone, + width reduction, + caching
    run("skip_only", _icfg(tau=tau, delta_margin=0.0, max_reuse=0, steps=steps,
                           force_full_width=True))
    run("skip_width", _icfg(tau=tau, delta_margin=0.0, max_reuse=0, steps=steps))
    run("skip_width_cache", _icfg(tau=tau, delta_margin=rc.infer.delta_margin,
                                  max_reuse=rc.infer.max_reuse, steps=steps))
    # caching sweep over the (delta_margin, max_reuse) grid
    for d in rc.raw["bench_deltas"]:
        for k in rc.raw["bench_reuses"]:
            if not isinstance(k, int) or isinstance(k, bool):
                raise ConfigError(f"bench_reuses entries must be integers, got {k!r}")
            run(f"delta{float(d):g}_K{k}",
                _icfg(tau=tau, delta_margin=float(d), max_reuse=k, steps=steps))
    write_bench_csv(out / "bench.csv", rows)
    print(f"bench: wrote {len(rows)} rows to {out / 'bench.csv'}")
    return 0


def cmd_trace(args, rc: RunConfig, out: pathlib.Path) -> int:
    n = _positive(rc.raw, "n_trajectories")
    model = load_model(_checkpoint_path(args, out), rc.dit, rc.elastic)
    all_records = []
    for k in range(n):
        _, records = denoise_full(model, rc.infer, rc.seed + k)
        write_grid_csv(out / f"grid_{k:03d}.csv", records)
        all_records.extend(records)
    write_summary_csv(out / "summary.csv", trace_summary(all_records))
    print(f"trace: wrote {n} probability grids and {out / 'summary.csv'}")
    return 0


def cmd_gradcheck(args, rc: RunConfig, out: pathlib.Path) -> int:
    coords = _positive(rc.raw, "gradcheck_coords")
    batch = _positive(rc.raw, "gradcheck_batch")
    h = rc.raw["gradcheck_h"]
    if h <= 0:
        raise ConfigError(f"gradcheck_h must be > 0, got {h}")
    model = build_model(rc.dit, rc.elastic, np.random.default_rng(rc.seed),
                        rc.raw["router_init"])
    # a random backbone exercises every reverse rule; the trained init would
    # leave zero-gradient regions (zeroed head and modulation)
    model.params = random_params(rc.dit, np.random.default_rng(rc.seed + 1))
    xt, x0, x1, t = _stack_batch(gen_batch(rc.synth, batch,
                                           np.random.default_rng(rc.seed + 2)))
    ecfg = rc.elastic

    def f():
        pred, ros = elastic_forward_train(model, xt, t)
        perf = fm_loss(pred, x0, x1)
        gating = gating_loss([ro.gate_prob for ro in ros], ecfg.rho_g)
        width = width_loss(ros, ecfg.tau, ecfg.rho_w)
        return (total_loss(perf, gating, width, ecfg.lambda_eff),
                decision_signature(ros, ecfg.tau))

    names = [name for name, _ in model.named_parameters()]
    report = grad_check(f, model.parameters(), h=h, num_coords=coords,
                        rng=np.random.default_rng(rc.seed + 3), names=names)
    print(f"gradcheck: compared={report.compared} "
          f"excluded_opaque={report.excluded_opaque} "
          f"excluded_crossings={report.excluded_crossings}")
    if report.worst is not None:
        name, idx, analytic, numeric, rel = report.worst
        print(f"gradcheck: worst {name}[{idx}] analytic={analytic!r} "
              f"numeric={numeric!r} rel_err={rel:.3e}")
    if report.ok(1e-4):
        print(f"gradcheck: PASS (max rel err {report.max_rel_err:.3e} < 1e-04)")
        return 0
    print(f"gradcheck: FAIL (max rel err {report.max_rel_err:.3e} >= 1e-04)")
    return 1


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "bench": cmd_bench,
            "trace": cmd_trace, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edit",
        description="Elastic diffusion transformer: train, sample, and analyze.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--out", default=".", help="output directory")
        return sp

    add("train", "train a model; writes model.ckpt and snapshots.ndjson")
    sp = add("sample", "draw trajectories; writes samples.csv (+ trace.csv)")
    sp.add_argument("--checkpoint", default=None, help="model checkpoint path")
    sp.add_argument("--n", type=int, default=None, help="number of trajectories")
    sp.add_argument("--mode", choices=["dense", "elastic"], default="elastic")
    sp = add("bench", "sweep engine settings; writes bench.csv")
    sp.add_argument("--checkpoint", default=None, help="model checkpoint path")
    sp = add("trace", "export router probability grids; writes grid_*.csv + summary.csv")
    sp.add_argument("--checkpoint", default=None, help="model checkpoint path")
    sp.add_argument("--n", type=int, default=None, help="number of trajectories")
    add("gradcheck", "finite-difference check of the full training gradient")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = load_config(args.config)
        if args.seed is not None:
            raw["seed"] = args.seed
        if getattr(args, "n", None) is not None:
            raw["n_trajectories"] = args.n
        rc = build_run_config(raw)
        out = pathlib.Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_effective_config(out / "effective_config.json", raw)
        return COMMANDS[args.command](args, rc, out)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
