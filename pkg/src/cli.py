"""
HeadGAN Lab command line.

Usage:
    python src/cli.py synth --seed 0 --num-sequences 4 --frames 8 --out data/
    python src/cli.py train --config example_config.yaml --data data/ --out runs/desk
    python src/cli.py reenact --checkpoint runs/desk/final.hgar \\
        --source data/sequences/seq_0000.hgar --driver data/sequences/seq_0001.hgar --out out/
    python src/cli.py eval --checkpoint runs/desk/final.hgar --data data/ --report report.yaml
    python src/cli.py preview --in out/ --out previews/ --grid 4

Exit codes: 0 success, 1 unexpected failure, 2 usage, 3 config, 4 data,
5 runtime (divergence, checkpoint mismatch), 130 interrupted.
"""

import argparse
import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

import torch
import yaml

from src import console
from src.config import SynthConfig, TrainConfig, resolve_threads
from src.errors import DataError, LabError
from src.inference import DriverClip, SourceBundle, export_frames, file_digest, reenact
from src.metrics import METRIC_NAMES, check_metric_names, evaluate
from src.morphable import (
    MIN_SEQUENCE_FRAMES, MorphableModel, SyntheticSequence, make_synthetic_model, make_synthetic_sequence,
)
from src.preview import write_previews
from src.training import SequenceDataset, load_checkpoint, train


MANIFEST_NAME = "manifest.yaml"


def _write_yaml(path: Path, data: dict) -> Path:
    path.write_text(yaml.safe_dump(data, sort_keys=True), encoding="utf-8")
    return path


# -----------------------------------------------------------------------------
# Commands
# -----------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace, threads: int) -> int:
    console.banner("HeadGAN Lab - synth")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"Output directory {out} is not empty (use --force to overwrite)")
    if args.num_sequences < 1:
        raise DataError("--num-sequences must be >= 1")
    if args.frames < MIN_SEQUENCE_FRAMES:
        raise DataError(f"--frames must be >= {MIN_SEQUENCE_FRAMES}, got {args.frames}")

    synth = SynthConfig(resolution=args.resolution, n_vertices=args.vertices)
    model = make_synthetic_model(args.seed, N=synth.n_vertices, n_id=synth.n_id, n_exp=synth.n_exp)

    (out / "sequences").mkdir(parents=True, exist_ok=True)
    # Drop sequences left by an earlier run
    for stale in sorted((out / "sequences").glob("seq_*.hgar")):
        stale.unlink()
    model.save(out / "model.hgar")
    console.ok(f"Morphable model: {model.N} vertices, {model.n_triangles} triangles")

    sequences = []
    for i in range(args.num_sequences):
        seed = args.seed + 1 + i
        seq = make_synthetic_sequence(model, seed, args.frames, synth, threads)
        name = f"seq_{i:04d}.hgar"
        seq.save(out / "sequences" / name)
        sequences.append({"file": f"sequences/{name}", "seed": seed, "frames": seq.T})
        console.step(f"{name}: {seq.T} frames, reference frame {seq.reference_index}")

    manifest = {
        "seed": args.seed,
        "num_sequences": args.num_sequences,
        "frames": args.frames,
        "resolution": synth.resolution,
        "sample_rate": synth.sample_rate,
        "fps": synth.fps,
        "model": {"file": "model.hgar", "vertices": model.N, "n_id": model.n_id, "n_exp": model.n_exp},
        "sequences": sequences,
    }
    _write_yaml(out / MANIFEST_NAME, manifest)
    console.ok(f"Wrote {args.num_sequences} sequences to {out}")
    return 0


def _load_config(path: str | None) -> TrainConfig:
    return TrainConfig.from_yaml(path) if path else TrainConfig()


def cmd_train(args: argparse.Namespace, threads: int) -> int:
    config = _load_config(args.config)
    if args.steps is not None:
        config = config.with_overrides(steps=args.steps)
    if args.print_config:
        print(config.to_yaml(), end="")
        return 0
    if not args.data or not args.out:
        raise DataError("train needs --data and --out (or --print-config)")

    threads = resolve_threads(args.threads, config.threads)
    torch.set_num_threads(threads)
    console.banner("HeadGAN Lab - train")
    console.info(f"Config: {config!r}")
    dataset = SequenceDataset.load(args.data, config, threads)
    console.ok(f"{len(dataset)} training sequences")
    result = train(config, dataset, args.out, resume=args.resume)
    console.ok(f"Step {result.step}: checkpoint {result.checkpoint}")
    console.info(console.dim(f"Loss log: {result.loss_log}"))
    return 0


def _model_for(path: Path, explicit: str | None) -> MorphableModel:
    """Explicit --model, else the model.hgar of the dataset the file belongs to."""
    model_path = Path(explicit) if explicit else path.parent.parent / "model.hgar"
    if not model_path.exists():
        raise DataError(f"Morphable model not found: {model_path} (pass --model)")
    return MorphableModel.load(model_path)


def cmd_reenact(args: argparse.Namespace, threads: int) -> int:
    console.banner("HeadGAN Lab - reenact")
    config = TrainConfig.from_yaml(args.config) if args.config else None
    checkpoint = load_checkpoint(args.checkpoint, config)
    source_seq = SyntheticSequence.load(args.source)
    driver_seq = SyntheticSequence.load(args.driver)
    model = _model_for(Path(args.source), args.model)

    source = SourceBundle.from_sequence(source_seq, args.source_frame)
    driver = DriverClip.from_sequence(driver_seq)
    if args.frames is not None:
        driver = driver.head(args.frames)

    result = reenact(checkpoint, source, driver, model, threads)
    manifest = {
        "checkpoint": str(args.checkpoint),
        "checkpoint_id": file_digest(args.checkpoint),
        "step": checkpoint.step,
        "preset": checkpoint.config.preset,
        "ablation": checkpoint.config.ablation,
        "source": str(args.source),
        "source_frame": source_seq.reference_index if args.source_frame is None else args.source_frame,
        "source_seed": source_seq.seed,
        "driver": str(args.driver),
        "driver_seed": driver_seq.seed,
    }
    export_frames(result, args.out, manifest)
    console.ok(f"Wrote {len(result.frames)} frames to {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace, threads: int) -> int:
    console.banner("HeadGAN Lab - eval")
    names = [n.strip() for n in args.metrics.split(",") if n.strip()]
    check_metric_names(names)
    checkpoint = load_checkpoint(args.checkpoint)
    dataset = SequenceDataset.load(args.data, checkpoint.config, threads)
    report = evaluate(checkpoint, dataset, names, threads)

    console.warn("Absolute values are NOT comparable to published benchmark numbers")
    for name in names:
        console.info(f"  {name.upper():<6} {report.metrics[name]:.6f}")
    if args.report:
        path = _write_yaml(Path(args.report), report.to_dict())
        console.ok(f"Report written to {path}")
    return 0


def cmd_preview(args: argparse.Namespace, threads: int) -> int:
    console.banner("HeadGAN Lab - preview")
    for path in write_previews(args.input, args.out, args.grid):
        console.ok(f"Wrote {path}")
    return 0


# -----------------------------------------------------------------------------
# Entry point
# -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="headgan-lab", description="Desk-scale talking-head reenactment lab")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $HEADGAN_LAB_THREADS or 1; 1 is deterministic)")
    parser.add_argument("--debug", action="store_true", help="print debug lines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-sequences", type=int, default=4)
    p.add_argument("--frames", type=int, default=8, help="frames per sequence (>= 3)")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--vertices", type=int, default=300)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a synthetic dataset")
    p.add_argument("--config", help="YAML config (defaults when omitted)")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, default=None, help="override config steps")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reenact", help="animate a source with a driver clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="sequence container holding the source frame")
    p.add_argument("--source-frame", type=int, default=None, help="default: the sequence's reference frame")
    p.add_argument("--driver", required=True, help="driving sequence container")
    p.add_argument("--model", help="morphable model (default: model.hgar of the source's dataset)")
    p.add_argument("--config", help="config the checkpoint must match")
    p.add_argument("--frames", type=int, default=None, help="only the first N driver frames")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reenact)

    p = sub.add_parser("eval", help="self-reenactment metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", default=",".join(METRIC_NAMES), help="comma-separated subset of " + ",".join(METRIC_NAMES))
    p.add_argument("--report", help="write the report as YAML")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("preview", help="frame grids and loss plots")
    p.add_argument("--in", dest="input", required=True, help="frame directory, training run, loss log or sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=4, help="grid columns")
    p.set_defaults(func=cmd_preview)
    return parser


def main(argv: list[str] | None = None) -> int:
    """Parse arguments, run one command and return its exit code."""
    args = build_parser().parse_args(argv)
    console.set_debug(args.debug)
    try:
        threads = resolve_threads(args.threads)
        torch.set_num_threads(threads)
        return args.func(args, threads)
    except LabError as e:
        console.error(str(e))
        return e.exit_code
    except KeyboardInterrupt:
        print("\n")
        return 130


if __name__ == "__main__":
    sys.exit(main())
