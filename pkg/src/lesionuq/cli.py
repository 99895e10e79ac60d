"""``lesionuq`` command line.

Every command writes its outputs and exactly one ``manifest.json`` under
``--out``.  The manifest records the command line, the effective settings
and seeds, the inputs, a SHA-256 of every output and the wall time; all
but the wall time are identical when a run is repeated.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .aggregate import (
    LEVELS, RocTable, Scan, check_eta, cohort_lesion_uncertainty,
    lesion_eta_for_retention, roc_sweep,
)
from .experiment import DEFAULT_THETAS
from .lesions import BINS
from .measures import MEASURES, compute_measure
from .metrics import match_lesions
from .phantom import PhantomConfig, PhantomError, generate_scene, load_scene, save_scene, scene_config, scene_statistics
from .toynet import (
    LOSS_FORMS, ToyNet, TrainConfig, TrainingError, load_weights, loss_trace_csv,
    mc_predict, noisy_clean_dataset, save_weights, train,
)
from .volume import LabelMask, atomic_write_bytes, load_volume, mean_prediction, save_volume

THREADS_ENV = "LESIONUQ_THREADS"


class CliError(Exception):
    pass


# --- helpers ---------------------------------------------------------------------

def _threads(n_tasks: int) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError:
            raise CliError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
        if cap < 1:
            raise CliError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return max(1, min(cap, n_tasks))


def _pmap(fn, items):
    """Ordered map over items, threaded up to the configured cap."""
    items = list(items)
    n = _threads(len(items))
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def _float_list(text: str, what: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be comma-separated numbers, got {text!r}") from None


def _thetas(text):
    vals = _float_list(text, "thetas")
    for v in vals:
        if not 0.0 <= v <= 1.0:
            raise argparse.ArgumentTypeError(f"theta must lie in [0, 1], got {v}")
    return vals


def _etas(text):
    vals = []
    for x in text.split(","):
        x = x.strip()
        if x:
            try:
                vals.append(check_eta(math.inf if x == "inf" else float(x)))
            except ValueError as e:
                raise argparse.ArgumentTypeError(str(e)) from None
    return vals


def _names(allowed, what):
    def parse(text):
        vals = [x.strip() for x in text.split(",") if x.strip()]
        for v in vals:
            if v not in allowed:
                raise argparse.ArgumentTypeError(f"unknown {what} {v!r}; choose from {', '.join(allowed)}")
        if not vals:
            raise argparse.ArgumentTypeError(f"no {what} given")
        return vals
    return parse


def _json_value(v):
    if isinstance(v, float):
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
    if isinstance(v, dict):
        return {str(k): _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    if isinstance(v, np.generic):
        return _json_value(v.item())
    if isinstance(v, Path):
        return str(v)
    return v


def _dumps(obj) -> bytes:
    return (json.dumps(_json_value(obj), indent=1, sort_keys=True) + "\n").encode()


class Run:
    """Collects outputs of one command and writes its manifest."""

    def __init__(self, command: str, args: argparse.Namespace, argv: list[str]):
        self.command = command
        self.out = Path(args.out)
        self.argv = list(argv)
        self.config: dict = {}
        self.seeds: dict = {}
        self.inputs: list[str] = []
        self.outputs: list[Path] = []
        self.started = time.perf_counter()
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise CliError(f"cannot create output directory {self.out}: {e.strerror}") from None

    def write(self, rel, data: bytes) -> Path:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(path, data)
        self.outputs.append(path)
        return path

    def record(self, path) -> None:
        self.outputs.append(Path(path))

    def finish(self) -> Path:
        outputs = []
        for p in self.outputs:
            data = p.read_bytes()
            outputs.append({"path": os.path.relpath(p, self.out), "bytes": len(data),
                            "sha256": hashlib.sha256(data).hexdigest()})
        manifest = {
            "tool": "lesionuq", "version": __version__, "command": self.command,
            "argv": self.argv, "config": self.config, "seeds": self.seeds,
            "inputs": self.inputs, "outputs": outputs,
            "wall_time_s": round(time.perf_counter() - self.started, 3),
        }
        path = self.out / "manifest.json"
        atomic_write_bytes(path, _dumps(manifest))
        return path


def _load_scene(d):
    try:
        return load_scene(d)
    except FileNotFoundError as e:
        raise CliError(str(e)) from None


def _map_path(scene_dir, measure) -> Path:
    return Path(scene_dir) / f"unc_{measure}.uvol"


def _load_scan(scene_dir, measures) -> Scan:
    scene = _load_scene(scene_dir)
    maps = {}
    for m in measures:
        p = _map_path(scene_dir, m)
        if not p.exists():
            raise CliError(f"missing uncertainty map {p}; run `lesionuq uncertainty` first")
        maps[m] = load_volume(p)
    return Scan(scene.gt_mask, mean_prediction(scene.stack), maps, Path(scene_dir).name)


# --- commands --------------------------------------------------------------------

def cmd_generate(args, run: Run):
    if args.config:
        try:
            cfg = PhantomConfig.from_text(Path(args.config).read_text())
        except OSError as e:
            raise CliError(f"cannot read config {args.config}: {e.strerror}") from None
        run.inputs.append(args.config)
    else:
        cfg = PhantomConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.count < 1:
        raise CliError("--count must be >= 1")
    run.config = {"phantom": cfg.to_text(), "count": args.count}
    run.seeds = {"series": cfg.seed}
    run.write("phantom.ini", cfg.to_text().encode())

    def one(i):
        scfg = scene_config(cfg, i)
        d = run.out / f"scene_{i:03d}"
        save_scene(generate_scene(scfg), d)
        return scfg.seed, d

    for i, (seed, d) in enumerate(_pmap(one, range(args.count))):
        run.seeds[f"scene_{i:03d}"] = seed
        for p in sorted(d.iterdir()):
            run.record(p)


def cmd_uncertainty(args, run: Run):
    run.inputs = list(args.scenes)
    run.config = {"measures": args.measures}

    def one(d):
        scene = _load_scene(d)
        if "predvar" in args.measures and not scene.stack.has_variances:
            raise CliError(f"predvar needs var_###.uvol files, none found in {d}")
        paths = []
        for m in args.measures:
            p = _map_path(d, m)
            save_volume(compute_measure(scene.stack, m), p)
            paths.append(p)
        return paths

    for paths in _pmap(one, args.scenes):
        for p in paths:
            run.record(p)


def _lesion_json(les):
    return {"id": les.id, "size": les.size, "bin": les.bin, "voxels": les.voxels.tolist()}


def cmd_detect(args, run: Run):
    run.inputs = list(args.scenes)
    measures = args.measures or []
    run.config = {"thetas": args.thetas, "measures": measures}
    scans = _pmap(lambda d: _load_scan(d, measures), args.scenes)
    cohorts = {m: cohort_lesion_uncertainty(scans, m, args.thetas) for m in measures}
    report = []
    for k, (d, s) in enumerate(zip(args.scenes, scans)):
        per_theta = []
        for t in args.thetas:
            cands = s.candidates(t)
            entries = [_lesion_json(c) for c in cands]
            for m in measures:
                raw = s.raw_lesion_uncertainty(m, t)
                for e, r, sc in zip(entries, raw, cohorts[m][t][k]):
                    e.setdefault("uncertainty", {})[m] = {"raw": float(r), "scaled": float(sc)}
            per_theta.append({"theta": t, "candidates": entries,
                              "match": match_lesions(cands, s.gt_lesions).to_json()})
        report.append({"scene": str(d), "gt": [_lesion_json(g) for g in s.gt_lesions],
                       "detections": per_theta})
    run.write("detections.json", _dumps({"scenes": report}))


def cmd_evaluate(args, run: Run):
    run.inputs = list(args.scenes)
    if args.level == "voxel" and args.retention is not None:
        raise CliError("--retention picks a lesion-level eta; use --etas at voxel level")
    scans = _pmap(lambda d: _load_scan(d, args.measures), args.scenes)
    rows, etas_used = [], {}
    for m in args.measures:
        etas = list(args.etas)
        if args.retention is not None:
            etas.append(lesion_eta_for_retention(scans, m, args.thetas, args.retention))
        etas_used[m] = sorted(set(etas), reverse=True)
        bins = args.bins if args.level == "lesion" else ["all"]
        rows += roc_sweep(scans, m, args.level, etas, args.thetas, bins).rows
    run.config = {"measures": args.measures, "etas": args.etas, "retention": args.retention,
                  "etas_used": etas_used, "thetas": args.thetas, "level": args.level,
                  "bins": args.bins}
    table = RocTable(rows)
    run.write("roc.csv", table.to_csv().encode())
    run.write("roc.json", table.to_json().encode())


def cmd_train_toy(args, run: Run):
    ds = noisy_clean_dataset(seed=args.seed, flip_rate=args.flip_rate)
    X, y = ds.patches(), ds.flat(ds.labels)
    net = ToyNet.init(X.shape[1], hidden=args.hidden, dropout_p=args.dropout,
                      seed=args.seed, variance_bias=args.variance_bias)
    cfg = TrainConfig(T_train=args.T_train, learning_rate=args.lr, steps=args.steps,
                      class_weight=args.class_weight, seed=args.seed, loss=args.loss)
    try:
        net, trace = train(net, X, y, cfg)
    except TrainingError as e:
        raise CliError(str(e)) from None
    run.seeds = {"data": args.seed, "init": args.seed, "train": args.seed}
    run.config = {"hidden": args.hidden, "dropout": args.dropout, "variance_bias": args.variance_bias,
                  "flip_rate": args.flip_rate, "T_train": args.T_train, "lr": args.lr,
                  "steps": args.steps, "class_weight": args.class_weight, "loss": args.loss}
    save_weights(net, run.out / "weights.tnet")
    run.record(run.out / "weights.tnet")
    run.write("loss.csv", loss_trace_csv(trace).encode())


def cmd_predict_toy(args, run: Run):
    try:
        net = load_weights(args.weights)
    except OSError as e:
        raise CliError(f"cannot read weights {args.weights}: {e.strerror}") from None
    run.inputs = [args.weights]
    data_seed = args.data_seed if args.data_seed is not None else args.seed
    ds = noisy_clean_dataset(seed=data_seed, flip_rate=args.flip_rate)
    stack = mc_predict(net, ds.patches(), args.T, seed=args.seed, grid_shape=ds.shape)
    run.seeds = {"data": data_seed, "predict": args.seed}
    run.config = {"T": args.T, "flip_rate": args.flip_rate}
    as3d = lambda a: np.asarray(a, dtype=bool)[:, :, None]
    for name, mask in (("gt.uvol", ds.truth), ("noisy_region.uvol", ds.noisy)):
        save_volume(LabelMask(as3d(mask)).to_grid(), run.out / name)
        run.record(run.out / name)
    for t in range(stack.T):
        for name, grid in ((f"sample_{t:03d}.uvol", stack.sample(t)), (f"var_{t:03d}.uvol", stack.variance(t))):
            save_volume(grid, run.out / name)
            run.record(run.out / name)


def cmd_stats(args, run: Run):
    run.inputs = list(args.scenes)
    scenes = _pmap(_load_scene, args.scenes)
    run.write("stats.json", _dumps(scene_statistics(scenes)))


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lesionuq", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"lesionuq {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(fn=fn)
        sp.add_argument("--out", required=True, help="output directory (receives manifest.json)")
        return sp

    g = add("generate", cmd_generate, "write phantom scenes")
    g.add_argument("--config", help="phantom config file (key = value text)")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, help="override the config seed")

    u = add("uncertainty", cmd_uncertainty, "write unc_<measure>.uvol maps into scene dirs")
    u.add_argument("scenes", nargs="+")
    u.add_argument("--measures", type=_names(MEASURES, "measure"), default=list(MEASURES))

    d = add("detect", cmd_detect, "candidate lesions and matches per theta")
    d.add_argument("scenes", nargs="+")
    d.add_argument("--thetas", type=_thetas, default=[0.5])
    d.add_argument("--measures", type=_names(MEASURES, "measure"), default=None)

    e = add("evaluate", cmd_evaluate, "ROC sweep over etas and thetas")
    e.add_argument("scenes", nargs="+")
    e.add_argument("--measures", type=_names(MEASURES, "measure"), default=["entropy"])
    e.add_argument("--etas", type=_etas, default=[])
    e.add_argument("--retention", type=float, default=None,
                   help="also sweep the eta keeping this share of candidate lesions")
    e.add_argument("--thetas", type=_thetas, default=list(DEFAULT_THETAS))
    e.add_argument("--level", choices=LEVELS, default="lesion")
    e.add_argument("--bins", type=_names(("all", *BINS), "bin"), default=["all", *BINS])

    t = add("train-toy", cmd_train_toy, "train the toy dropout net on the noisy/clean image")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, default=TrainConfig.steps)
    t.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    t.add_argument("--T-train", dest="T_train", type=int, default=TrainConfig.T_train)
    t.add_argument("--loss", choices=LOSS_FORMS, default="mean_prob")
    t.add_argument("--class-weight", type=float, default=None)
    t.add_argument("--hidden", type=lambda s: [int(x) for x in s.split(",")], default=[2])
    t.add_argument("--dropout", type=float, default=0.1)
    t.add_argument("--variance-bias", type=float, default=-4.0)
    t.add_argument("--flip-rate", type=float, default=0.25)

    pt = add("predict-toy", cmd_predict_toy, "MC dropout passes of a trained toy net, as a scene dir")
    pt.add_argument("--weights", required=True)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--data-seed", type=int, default=None, help="dataset seed (default: --seed)")
    pt.add_argument("--T", type=int, default=10)
    pt.add_argument("--flip-rate", type=float, default=0.25)

    s = add("stats", cmd_stats, "per-bin lesion counts and disagreement")
    s.add_argument("scenes", nargs="+")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        run = Run(args.command, args, argv)
        args.fn(args, run)
        run.finish()
    except (CliError, PhantomError, ValueError, OSError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"lesionuq: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
