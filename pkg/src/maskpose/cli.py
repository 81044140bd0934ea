"""Operator entry points: one executable, five subcommands.

synth generates a puppet dataset, train runs the optimization, eval scores
a checkpoint, viz writes diagnostic panels, gradcheck probes every
differentiable operation against finite differences. Commands that produce
a one-shot output directory (synth, eval, viz) build it in a hidden
sibling and rename it into place on success, so a crashed run never leaves
a half-written result under the requested path. Training instead owns its
output directory across invocations because interrupted runs resume from
the checkpoint inside it. Concurrent runs must use distinct output
directories; a lock file enforces that.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Flag values override the MASKPOSE_OUT / MASKPOSE_SEED environment
variables, which override the config file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

from .config import load_synth_config, load_train_config
from .errors import ConfigError, DataError, MaskPoseError, NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextmanager
def output_lock(directory: Path):
    """Exclusive marker guarding one output directory.

    A live lock from another process is an error; a lock whose process is
    gone is stale and gets replaced.
    """
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / "run.lock"
    for attempt in (0, 1):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                owner = int(lock.read_text().strip())
            except (ValueError, OSError):
                owner = None
            if attempt == 0 and (owner is None or not _pid_alive(owner)):
                lock.unlink(missing_ok=True)
                continue
            raise ConfigError(
                f"{directory} is locked by a running command (pid {owner}); "
                "concurrent runs need distinct output directories")
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@contextmanager
def staged_output(final: Path):
    """Temp directory that atomically becomes ``final`` on success."""
    final = Path(final)
    if final.exists() and any(final.iterdir()):
        raise ConfigError(f"output directory {final} already exists")
    final.parent.mkdir(parents=True, exist_ok=True)
    lock = final.parent / f"{final.name}.lock"
    tmp = final.parent / f".{final.name}.partial-{os.getpid()}"
    for attempt in (0, 1):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                owner = int(lock.read_text().strip())
            except (ValueError, OSError):
                owner = None
            if attempt == 0 and (owner is None or not _pid_alive(owner)):
                lock.unlink(missing_ok=True)
                continue
            raise ConfigError(
                f"{final} is locked by a running command (pid {owner}); "
                "concurrent runs need distinct output directories")
    os.write(fd, f"{os.getpid()}\n".encode())
    os.close(fd)
    try:
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir()
        yield tmp
        if final.exists():
            final.rmdir()
        os.replace(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    finally:
        lock.unlink(missing_ok=True)


def _env_seed() -> int | None:
    raw = os.environ.get("MASKPOSE_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"MASKPOSE_SEED must be an integer, got {raw!r}")


def _resolve_seed(flag: int | None, fallback: int | None = None) -> int | None:
    if flag is not None:
        return flag
    env = _env_seed()
    if env is not None:
        return env
    return fallback


def _resolve_out(flag: str | None, fallback: str | None = None) -> str | None:
    if flag is not None:
        return flag
    env = os.environ.get("MASKPOSE_OUT")
    if env:
        return env
    return fallback


def _require_out(flag: str | None) -> Path:
    out = _resolve_out(flag)
    if out is None:
        raise ConfigError("an output directory is required "
                          "(--out or MASKPOSE_OUT)")
    return Path(out)


def cmd_synth(args) -> int:
    from .puppet import default_rig, make_dataset

    cfg = load_synth_config(args.config)
    seed = _resolve_seed(args.seed, cfg.seed)
    out = Path(_resolve_out(args.out, cfg.out_dir))
    size = cfg.image_size
    rig = default_rig(n_views=cfg.n_views, focal=140.0 * size / 128.0,
                      image_size=(size, size))
    with staged_output(out) as tmp:
        manifest = make_dataset(tmp, n_samples=cfg.n_samples, seed=seed,
                                rig=rig, allow_occlusion=cfg.allow_occlusion)
    print(json.dumps({"dataset": str(out), "n_samples": manifest["n_samples"],
                      "n_views": manifest["n_views"],
                      "image_size": manifest["image_size"]}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import fit

    cfg = load_train_config(args.config)
    overrides = {}
    seed = _resolve_seed(args.seed)
    if seed is not None:
        overrides["seed"] = seed
    out = _resolve_out(args.out)
    if out is not None:
        overrides["out_dir"] = out
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    with output_lock(Path(cfg.out_dir)):
        summary = fit(cfg, resume=not args.fresh, verbose=not args.quiet,
                      stage_override=args.stage_override)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import evaluate_checkpoint

    out = _require_out(args.out)
    with staged_output(out) as tmp:
        report = evaluate_checkpoint(
            args.checkpoint, args.dataset, out_dir=tmp, spp=args.spp,
            single_view=args.single_view, eval_fraction=args.eval_fraction)
    print(report.to_json(), end="")
    return EXIT_OK


def cmd_viz(args) -> int:
    from .viz import visualize_samples

    out = _require_out(args.out)
    try:
        indices = [int(tok) for tok in args.samples.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"--samples must be comma-separated integers, "
                          f"got {args.samples!r}")
    if not indices:
        raise ConfigError("--samples selected no samples")
    with staged_output(out) as tmp:
        paths = visualize_samples(args.checkpoint, args.dataset, indices, tmp)
    print(json.dumps({"out": str(out), "n_images": len(paths),
                      "samples": len(indices)}, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradient_suite, format_rows

    if args.probes < 1:
        raise ConfigError("--probes must be at least 1")
    seed = _resolve_seed(args.seed, 0)
    rows = run_gradient_suite(n_probes=args.probes, seed=seed)
    print(format_rows(rows))
    failed = [r for r in rows if not r.ok]
    if failed:
        print(f"{len(failed)} of {len(rows)} checks failed", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(rows)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskpose",
        description="Unsupervised 3D pose estimation from silhouette masks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic puppet dataset")
    p.add_argument("--config", required=True, help="synth config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="dataset directory")
    p.set_defaults(run=cmd_synth)

    p = sub.add_parser("train", help="train a detector on a dataset")
    p.add_argument("--config", required=True, help="train config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="run directory")
    p.add_argument("--stage-override", type=int, default=None,
                   help="pin the cascade to one stage index")
    p.add_argument("--fresh", action="store_true",
                   help="ignore an existing checkpoint instead of resuming")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", default=None, help="report directory")
    p.add_argument("--spp", choices=("linear", "two-layer"), default=None,
                   help="fit supervised post-processing on the train split")
    p.add_argument("--single-view", action="store_true",
                   help="score per-camera 3D readouts instead of triangulation")
    p.add_argument("--eval-fraction", type=float, default=None)
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("viz", help="write diagnostic panels for samples")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--samples", required=True,
                   help="comma-separated sample indices")
    p.add_argument("--out", default=None, help="image directory")
    p.set_defaults(run=cmd_viz)

    p = sub.add_parser("gradcheck",
                       help="finite-difference probes of every gradient path")
    p.add_argument("--probes", type=int, default=32)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(run=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MaskPoseError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
