"""Command-line entry point for dataset generation, training, and analysis."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import format_run_config, load_run_config
from .data import DatasetSpec, Domain, SHIFT_KINDS, generate_dataset, load_dataset, save_dataset
from .errors import ConfigurationError, DadetError, DataError
from .evaluation import domain_distance, export_features
from .icr import normalized_heatmaps
from .model import load_checkpoint
from .trainer import RunConfig, Trainer, evaluate_checkpoint


# --- experiment manifests ------------------------------------------------------


@dataclasses.dataclass
class ExperimentManifest:
    run_id: str
    config: dict
    dataset_spec: dict
    code_version: str
    seed: int
    started: str
    finished: str | None = None
    artifacts: dict[str, str] = dataclasses.field(default_factory=dict)

    def write(self, path: Path) -> None:
        """Atomic write: the manifest is either absent or complete, never partial."""
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")
        tmp.replace(path)


def _timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def _start_manifest(out_dir: Path, config: RunConfig, spec: DatasetSpec) -> ExperimentManifest:
    manifest = ExperimentManifest(
        run_id=f"{out_dir.name}-{config.mode}-seed{config.seed}",
        config=dataclasses.asdict(config),
        dataset_spec=dataclasses.asdict(spec),
        code_version=__version__,
        seed=config.seed,
        started=_timestamp(),
    )
    manifest.write(out_dir / "manifest.json")
    return manifest


# --- subcommands ----------------------------------------------------------------


def _cmd_generate_data(args: argparse.Namespace) -> int:
    spec = DatasetSpec(
        num_classes=args.num_classes,
        image_size=args.image_size,
        samples_per_domain=args.samples,
        shift_kind=args.shift,
        shift_strength=args.strength,
        rng_seed=args.seed,
    )
    spec.validate()
    source, target = generate_dataset(spec)
    save_dataset(source, target, spec, args.out)
    n_src = sum(len(s.eval_instances) for s in source)
    n_tgt = sum(len(s.eval_instances) for s in target)
    print(
        f"wrote {len(source)} source / {len(target)} target images "
        f"({n_src} / {n_tgt} instances) to {args.out}"
    )
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    source, target, spec = load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(format_run_config(config))
    manifest = _start_manifest(out_dir, config, spec)

    trainer = Trainer(config, spec, source, target, out_dir)
    records = trainer.train()

    manifest.finished = _timestamp()
    manifest.artifacts = {
        "checkpoint": str(out_dir / "checkpoint.pt"),
        "metrics": str(out_dir / "metrics.jsonl"),
        "config": str(out_dir / "config.txt"),
    }
    manifest.write(out_dir / "manifest.json")
    guard = source[0].guard
    last = records[-1]
    print(
        f"finished {config.mode} run ({config.total_iters} iterations); "
        f"final total loss {last['total']:.4f}; target-annotation reads: {guard.target_reads}"
    )
    print(f"checkpoint: {out_dir / 'checkpoint.pt'}")
    return 0


def _split_samples(data_dir: str, split: str):
    source, target, spec = load_dataset(data_dir)
    return (source if split == "source" else target), spec


def _cmd_eval(args: argparse.Namespace) -> int:
    samples, spec = _split_samples(args.data, args.split)
    result = evaluate_checkpoint(args.checkpoint, samples, spec.num_classes, args.iou)
    for c in sorted(result.per_class):
        print(f"class {c}: AP = {result.per_class[c]:.4f}")
    print(f"mAP@{args.iou:.2f} ({args.split}) = {result.mean_ap:.4f}")
    if args.out:
        Path(args.out).write_text(
            json.dumps(
                {"map": result.mean_ap, "per_class": result.per_class, "split": args.split},
                indent=2,
            )
            + "\n"
        )
    return 0


def _cmd_emd(args: argparse.Namespace) -> int:
    source, target, spec = load_dataset(args.data)
    model, _ = load_checkpoint(args.checkpoint)
    value = domain_distance(model, source, target, args.per_class, args.seed)
    print(f"EMD(source, target) = {value:.4f}  (per-class sample size {args.per_class})")
    record = {
        "emd": value,
        "per_class_count": args.per_class,
        "seed": args.seed,
        "checkpoint": str(args.checkpoint),
    }
    if args.out:
        Path(args.out).write_text(json.dumps(record, indent=2) + "\n")
    if args.features_out:
        paths = export_features(model, source, target, args.features_out, args.per_class, args.seed)
        print("feature exports: " + ", ".join(str(p) for p in paths.values()))
    return 0


def _cmd_heatmap(args: argparse.Namespace) -> int:
    from PIL import Image

    samples, spec = _split_samples(args.data, args.split)
    model, _ = load_checkpoint(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for sample in samples[: args.count]:
        features = model.detector.backbone_forward(sample.image)
        evidence = model.icr_head.evidence_maps(features.feature_map)
        maps = normalized_heatmaps(evidence)
        for c in range(maps.shape[0]):
            img = Image.fromarray((maps[c] * 255).astype(np.uint8), mode="L")
            img = img.resize((spec.image_size, spec.image_size), Image.NEAREST)
            img.save(out_dir / f"{sample.sample_id}_class{c}.png")
            written += 1
    print(f"wrote {written} heatmaps to {out_dir}")
    return 0


ABLATION_MODES = ("source_only", "da_faster", "da_faster_icr", "da_faster_icr_ccr")


def run_ablation(
    data_dir: str | Path,
    out_dir: str | Path,
    seeds: list[int],
    iters_phase1: int = 1500,
    iters_phase2: int = 500,
    per_class_count: int = 50,
) -> dict:
    """Train the four-mode ladder for each seed; return mAP/EMD per run plus means."""
    source, target, spec = load_dataset(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict[str, dict] = {m: {"map": {}, "emd": {}} for m in ABLATION_MODES}
    for seed in seeds:
        for mode in ABLATION_MODES:
            config = RunConfig(
                mode=mode, seed=seed, iters_phase1=iters_phase1, iters_phase2=iters_phase2
            )
            run_dir = out_dir / f"{mode}_seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            manifest = _start_manifest(run_dir, config, spec)
            trainer = Trainer(config, spec, source, target, run_dir)
            trainer.train()
            result = evaluate_checkpoint(trainer.model, target, spec.num_classes)
            emd = domain_distance(trainer.model, source, target, per_class_count, seed=0)
            results[mode]["map"][seed] = result.mean_ap
            results[mode]["emd"][seed] = emd
            manifest.finished = _timestamp()
            manifest.artifacts = {
                "checkpoint": str(run_dir / "checkpoint.pt"),
                "metrics": str(run_dir / "metrics.jsonl"),
            }
            manifest.write(run_dir / "manifest.json")
            print(f"[{mode} seed={seed}] target mAP = {result.mean_ap:.4f}, EMD = {emd:.4f}")
    summary = {
        "modes": ABLATION_MODES,
        "seeds": seeds,
        "target_map": {m: results[m]["map"] for m in ABLATION_MODES},
        "emd": {m: results[m]["emd"] for m in ABLATION_MODES},
        "mean_target_map": {
            m: float(np.mean(list(results[m]["map"].values()))) for m in ABLATION_MODES
        },
        "mean_emd": {m: float(np.mean(list(results[m]["emd"].values()))) for m in ABLATION_MODES},
    }
    (out_dir / "ablation.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def format_ablation_table(summary: dict) -> str:
    lines = [f"{'mode':<22}" + "".join(f"seed {s:<6}" for s in summary["seeds"]) + "mean mAP  mean EMD"]
    for mode in summary["modes"]:
        per_seed = "".join(f"{summary['target_map'][mode][s]:<11.4f}" for s in summary["seeds"])
        lines.append(
            f"{mode:<22}{per_seed}{summary['mean_target_map'][mode]:<10.4f}"
            f"{summary['mean_emd'][mode]:.4f}"
        )
    return "\n".join(lines)


def _cmd_ablate(args: argparse.Namespace) -> int:
    seeds = list(range(args.seeds))
    summary = run_ablation(
        args.data, args.out, seeds, args.iters_phase1, args.iters_phase2, args.per_class
    )
    print(format_ablation_table(summary))
    return 0


# --- dispatch --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dadet",
        description="Domain-adaptive detection with categorical regularization on a synthetic benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render the paired-domain synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", type=int, default=3)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--samples", type=int, default=100, help="images per domain")
    p.add_argument("--shift", choices=sorted(SHIFT_KINDS), default="fog_blend")
    p.add_argument("--strength", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_generate_data)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="mAP of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("source", "target"), default="target")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", default=None, help="optional JSON output path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("emd", help="domain distance over balanced GT-instance features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional JSON output path")
    p.add_argument("--features-out", default=None, help="also export feature matrices here")
    p.set_defaults(func=_cmd_emd)

    p = sub.add_parser("heatmap", help="export per-class evidence maps as grayscale images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("source", "target"), default="source")
    p.add_argument("--count", type=int, default=4, help="number of samples to render")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_heatmap)

    p = sub.add_parser("ablate", help="train the four-mode ladder and tabulate target mAP")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--iters-phase1", type=int, default=1500)
    p.add_argument("--iters-phase2", type=int, default=500)
    p.add_argument("--per-class", type=int, default=50)
    p.set_defaults(func=_cmd_ablate)
    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints its own usage message
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except (ConfigurationError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DadetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
