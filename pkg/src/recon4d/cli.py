"""Command-line interface: ``recon4d <command> [flags]``.

Exit codes: 0 success, 2 missing input file or bad usage, 3 malformed input
or violated precondition, 4 training diverged, 1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import threading
import time
from contextlib import contextmanager, nullcontext
from pathlib import Path

import numpy as np
import psutil
from PIL import Image
from threadpoolctl import threadpool_limits

from . import numerics as nx
from . import synthdata
from .encoders import AuxTokens
from .errors import ContractError, DivergenceError, FormatError
from .geometry import CameraPose
from .splatter import at_time, set_backend
from .tokenstore import restore, snapshot
from .trainer import (Reconstruction, ReconModel, TrainConfig, decode, desk_train_config, evaluate, load_model,
                      reconstruct, render_view, train)
from .update_net import SequenceResult, UpdateNetConfig, run_sequence

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3, 4
BENCH_COLUMNS = ["length", "mode", "ms_median", "ms_p90", "peak_bytes", "tokens"]


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise CliError(f"{what} is required", EXIT_USAGE)
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}", EXIT_USAGE)
    return p


def _thread_limit(n: int | None):
    if n is None:
        env = os.environ.get("UFO_THREADS")
        n = int(env) if env else None
    return threadpool_limits(limits=n) if n else nullcontext()


# -- gen-data ----------------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    path = _require_file(args.spec, "spec file")
    spec = synthdata.SceneSpec.from_file(path)
    if args.seed is not None:
        spec.seed = args.seed
    data = synthdata.generate(spec, args.out)
    print(f"wrote {len(data.frames)} frames ({len(data.context)} context) to {args.out}")
    return EXIT_OK


# -- train -------------------------------------------------------------------------------
def _net_config(args) -> UpdateNetConfig:
    over = {}
    if args.gaussians_per_token is not None:
        over["gaussians_per_token"] = args.gaussians_per_token
    if getattr(args, "no_boxes", False):
        over["use_boxes"] = False
    return UpdateNetConfig.preset(args.preset, **over)


def cmd_train(args) -> int:
    _require_file(os.path.join(args.data, "spec.txt"), "dataset manifest")
    data = synthdata.load(args.data)
    base = dict(seed=args.seed, checkpoint_every=args.checkpoint_every, eval_every=args.eval_every,
                use_lifespan=not args.no_lifespan, use_boxes=not args.no_boxes)
    if args.unroll_window:
        base["unroll_window"] = args.unroll_window
    if args.lr is not None:
        base["lr"] = args.lr
    if args.warmup is not None:
        base["warmup_iters"] = args.warmup
    phases = []
    if args.short_iterations:
        short = desk_train_config(args.short_iterations, sequence_frames=args.short_frames, **base) \
            if args.schedule == "desk" else TrainConfig(iterations=args.short_iterations,
                                                        sequence_frames=args.short_frames, **base)
        phases.append(short)
    phases.append(desk_train_config(args.iterations, **base) if args.schedule == "desk"
                  else TrainConfig(iterations=args.iterations, **base))
    dtype = np.float64 if args.float64 else np.float32

    def log(row):
        if args.log_every and row["iter"] % args.log_every == 0:
            print(f"iter {row['iter']} loss {row['total']:.5f} lr {row['lr']:.2e}", flush=True)

    with nx.precision(dtype):
        res = train(data, phases, _net_config(args), args.out, resume=args.resume, log=log)
    print(f"final checkpoint: {res.checkpoints[-1] if res.checkpoints else '-'}")
    return EXIT_OK


# -- reconstruct / render ------------------------------------------------------------------
def _save_recon(out: Path, recon: Reconstruction) -> None:
    out.mkdir(parents=True, exist_ok=True)
    snapshot(recon.store, out / "tokens.snap")
    tensors = {"aux/sky": recon.aux.sky.data, "aux/affine": recon.aux.affine.data,
               "fx": np.array([recon.fx])}
    for idx, pose in recon.references.items():
        tensors[f"ref/{idx}"] = np.append(pose.world_from_camera.reshape(-1), pose.timestamp)
    nx.save_tensors(out / "state.ufo", tensors)


def _load_recon(path: Path, tracks) -> Reconstruction:
    _require_file(str(path / "tokens.snap"), "token snapshot")
    _require_file(str(path / "state.ufo"), "reconstruction state")
    store = restore(path / "tokens.snap")
    t = nx.load_tensors(path / "state.ufo")
    dtype = nx.get_default_dtype()
    aux = AuxTokens(nx.Tensor(t["aux/sky"].astype(dtype)), nx.Tensor(t["aux/affine"].astype(dtype)))
    refs = {int(k.split("/", 1)[1]): CameraPose(v[:16].astype(np.float64).reshape(4, 4), float(v[16]))
            for k, v in t.items() if k.startswith("ref/")}
    return Reconstruction(SequenceResult(store, aux), refs, float(t["fx"][0]), list(tracks))


def cmd_reconstruct(args) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    _require_file(os.path.join(args.data, "spec.txt"), "dataset manifest")
    data = synthdata.load(args.data)
    model, _ = load_model(ckpt)
    with nx.no_grad():
        recon = reconstruct(model, data.context_frames(), data.tracks)
    _save_recon(Path(args.out), recon)
    print(f"{len(recon.store)} scene tokens written to {args.out}")
    return EXIT_OK


def read_pose_file(path: Path, timestamp: float) -> CameraPose:
    vals = path.read_text().split()
    if len(vals) != 16:
        raise FormatError(f"{path}: expected 16 values, got {len(vals)}")
    return CameraPose(np.array([float(v) for v in vals]).reshape(4, 4), timestamp)


def cmd_render(args) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    _require_file(os.path.join(args.data, "spec.txt"), "dataset manifest")
    data = synthdata.load(args.data)
    model, _ = load_model(ckpt)
    K = data.frames[0].intrinsics[args.camera]
    if args.pose:
        pose = read_pose_file(_require_file(args.pose, "pose file"), args.time)
    else:
        nearest = min(data.frames, key=lambda f: abs(f.timestamp - args.time))
        pose = CameraPose(nearest.poses[args.camera].world_from_camera, args.time)
    with nx.no_grad():
        if args.recon:
            recon = _load_recon(Path(args.recon), data.tracks)
        else:
            recon = reconstruct(model, data.context_frames(), data.tracks)
        gs = at_time(decode(model, recon), data.tracks, args.time)
        out = render_view(model, recon, gs, pose, K, args.camera)
    rgb = np.clip(out.rgb.data.astype(np.float64), 0, 1)
    Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(args.out)
    if args.depth_out:
        np.save(args.depth_out, out.depth.data.astype(np.float32))
    print(f"rendered t={args.time:.3f}s camera {args.camera} to {args.out}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------------------
def cmd_eval(args) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    _require_file(os.path.join(args.data, "spec.txt"), "dataset manifest")
    data = synthdata.load(args.data)
    model, _ = load_model(ckpt)
    report = evaluate(model, data, args.out, split=args.split, use_boxes=not args.no_boxes,
                      use_lifespan=not args.no_lifespan)
    agg = report.aggregate()
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in agg.items()))
    return EXIT_OK


# -- bench --------------------------------------------------------------------------------
@contextmanager
def peak_rss(interval: float = 0.005):
    """Sample resident memory in a background thread; yields a dict filled with ``peak``."""
    proc = psutil.Process()
    box = {"peak": proc.memory_info().rss}
    stop = threading.Event()

    def poll():
        while not stop.is_set():
            box["peak"] = max(box["peak"], proc.memory_info().rss)
            stop.wait(interval)

    th = threading.Thread(target=poll, daemon=True)
    th.start()
    try:
        yield box
    finally:
        stop.set()
        th.join()
        box["peak"] = max(box["peak"], proc.memory_info().rss)


def bench_sequence(max_length: int, seed: int, num_cameras: int = 3) -> list:
    frame_rate = 10.0
    spec = synthdata.SceneSpec(seed=seed, duration=max_length / frame_rate, frame_rate=frame_rate,
                               num_cameras=num_cameras)
    return synthdata.build(spec).frames


def run_bench(lengths, mode: str, net, frames, repeats: int = 3) -> list[dict]:
    """Time reconstruction (no rendering) over the first T frames for each T."""
    lengths = [int(x) for x in lengths]
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ContractError("bench lengths must be strictly increasing")
    if repeats < 3:
        raise ContractError("bench needs at least 3 repetitions")
    rows = []
    for T in lengths:
        if T > len(frames):
            raise ContractError(f"length {T} exceeds the {len(frames)} available frames")
        seq = frames[:T]
        times, peak, tokens = [], 0, sum(fr.num_cameras * (fr.intrinsics[0].width // net.config.patch)
                                         * (fr.intrinsics[0].height // net.config.patch) for fr in seq)
        try:
            for _ in range(repeats):
                with nx.no_grad(), peak_rss() as mem:
                    t0 = time.perf_counter()
                    run_sequence(seq, None, net, filtered=(mode == "filtered"))
                    times.append((time.perf_counter() - t0) * 1000.0)
                peak = max(peak, mem["peak"])
            rows.append({"length": T, "mode": mode, "ms_median": float(np.median(times)),
                         "ms_p90": float(np.percentile(times, 90)), "peak_bytes": int(peak), "tokens": tokens})
        except MemoryError:
            print(f"bench: out of memory at length {T} ({mode})", file=sys.stderr)
            rows.append({"length": T, "mode": mode, "ms_median": float("nan"), "ms_p90": float("nan"),
                         "peak_bytes": -1, "tokens": tokens})
    return rows


def write_bench_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (f"{r[k]:.3f}" if isinstance(r[k], float) else r[k]) for k in BENCH_COLUMNS})


def cmd_bench(args) -> int:
    lengths = [int(x) for x in args.lengths.split(",") if x]
    if args.checkpoint:
        model, _ = load_model(_require_file(args.checkpoint, "checkpoint"))
        net = model.update_net
    elif args.random_init:
        net = ReconModel(UpdateNetConfig.preset(args.preset), args.seed).update_net
    else:
        raise CliError("bench needs --checkpoint or --random-init", EXIT_USAGE)
    if args.data:
        _require_file(os.path.join(args.data, "spec.txt"), "dataset manifest")
        frames = synthdata.load(args.data).frames
    else:
        frames = bench_sequence(max(lengths), args.seed, net.config.num_cameras)
    rows = []
    for mode in args.mode.split(","):
        if mode not in ("filtered", "unfiltered"):
            raise CliError(f"unknown mode {mode!r}", EXIT_USAGE)
        rows += run_bench(lengths, mode, net, frames, args.repeats)
    write_bench_csv(args.out, rows)
    for r in rows:
        print(f"{r['mode']:>10} T={r['length']:<3d} median {r['ms_median']:.1f} ms  tokens {r['tokens']}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="recon4d", description="Recurrent feed-forward 4D driving-scene reconstruction.")
    p.add_argument("--config", help="key=value override file (explicit flags win)")
    p.add_argument("--threads", type=int, help="kernel thread count (default: UFO_THREADS or library default)")
    p.add_argument("--backend", choices=["cython", "numpy"], help="rasterizer backend")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iterations", type=int, default=2000)
    t.add_argument("--preset", default="desk")
    t.add_argument("--gaussians-per-token", type=int)
    t.add_argument("--schedule", choices=["desk", "full"], default="desk")
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--unroll-window", type=int)
    t.add_argument("--short-iterations", type=int, default=0, help="first curriculum phase length (0 = none)")
    t.add_argument("--short-frames", type=int, default=10)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--eval-every", type=int, default=0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume")
    t.add_argument("--no-boxes", action="store_true")
    t.add_argument("--no-lifespan", action="store_true")
    t.add_argument("--float64", action="store_true")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="run the recurrent update over the context frames")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    n = sub.add_parser("render", help="render a (possibly novel) time and view")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--time", type=float, required=True)
    n.add_argument("--pose", help="16-value world-from-camera matrix file")
    n.add_argument("--camera", type=int, default=0)
    n.add_argument("--recon", help="directory written by reconstruct")
    n.add_argument("--out", required=True)
    n.add_argument("--depth-out")
    n.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score renders and write metric CSV plus diagnostic maps")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=["targets", "context", "all"], default="targets")
    e.add_argument("--no-boxes", action="store_true")
    e.add_argument("--no-lifespan", action="store_true")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time reconstruction against sequence length")
    b.add_argument("--lengths", default="2,4,8,16")
    b.add_argument("--mode", default="filtered", help="filtered, unfiltered, or both comma-separated")
    b.add_argument("--out", required=True)
    b.add_argument("--checkpoint")
    b.add_argument("--random-init", action="store_true")
    b.add_argument("--preset", default="desk")
    b.add_argument("--data")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def _apply_config_file(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return parser.parse_args(argv)
    kv = synthdata.read_kv(_require_file(known.config, "config file"))
    choices = parser._subparsers._group_actions[0].choices  # noqa: SLF001
    command = next((a for a in argv if a in choices), None)
    targets = [parser] + ([choices[command]] if command else [])
    for key, val in kv.items():
        dest = key.replace("-", "_")
        owner = next((t for t in reversed(targets) if any(a.dest == dest for a in t._actions)), None)  # noqa: SLF001
        if owner is None:
            raise CliError(f"config file: unknown option {key!r}", EXIT_USAGE)
        action = next(a for a in owner._actions if a.dest == dest)  # noqa: SLF001
        if action.nargs == 0:
            value = val.lower() in ("1", "true", "yes", "on")
        else:
            value = action.type(val) if action.type else val
        action.required = False
        owner.set_defaults(**{dest: value})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
        if args.backend:
            set_backend(args.backend)
        with _thread_limit(args.threads):
            return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
