"""
Command line entry point.

    aligndiff gen-corpus --out DIR --n COUNT --categories K --seed S
    aligndiff train      --config FILE --data DIR --out CKPT [--resume CKPT]
    aligndiff sample     --ckpt CKPT --prompt TEXT --n N --seed S --out DIR
    aligndiff evaluate   --real DIR --synth DIR --provider NAME --seed S --out report.csv
    aligndiff ablate     --config FILE --data DIR --seeds 0 1 2 --out ablation.csv

Every command writes run_manifest.json next to its outputs. Exit codes:
0 success, 2 usage or configuration error, 3 numerical abort, 4 I/O or integrity error.
"""

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .__version__ import __version__
from .AlignDiff import AlignDiff
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import generate_corpus, load_pairs, read_dataset, read_meta, write_dataset, write_prompt_samples
from .embeddings import VALID_PROVIDERS, get_provider
from .errors import ConfigError, NumericalError
from .metrics import evaluate_sets
from .trainer import TrainingData, load_config, restore_models, sample_images, train
from .utils import atomic_write_text, directory_checksum, sha256_file, seed_everything

logger = logging.getLogger("aligndiff")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4
MANIFEST_NAME = "run_manifest.json"
TRAIN_LOG_NAME = "train_log.jsonl"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: Optional[int]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    artifacts: Dict[str, str] = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    version: str = __version__

    def record_outputs(self, paths: Sequence[Path]) -> None:
        for path in paths:
            path = Path(path)
            self.outputs.append(str(path))
            if path.is_dir():
                self.artifacts[str(path)] = directory_checksum(path)
            elif path.is_file():
                self.artifacts[str(path)] = sha256_file(path)

    def write(self, directory: Path) -> Path:
        target = Path(directory) / MANIFEST_NAME
        atomic_write_text(target, json.dumps(asdict(self), indent=2) + "\n")
        return target


def _fingerprint(path: Path) -> str:
    path = Path(path)
    return directory_checksum(path) if path.is_dir() else sha256_file(path)


def positive_int(value: str) -> int:
    try:
        n = int(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from e
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def non_negative_int(value: str) -> int:
    try:
        n = int(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from e
    if n < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {n}")
    return n


def cmd_gen_corpus(args: argparse.Namespace, manifest: RunManifest) -> Path:
    out = Path(args.out)
    samples = generate_corpus(args.n, n_categories=args.categories, seed=args.seed)
    write_dataset(samples, out, master_seed=args.seed, n_categories=args.categories)
    manifest.record_outputs([out])
    return out


def cmd_train(args: argparse.Namespace, manifest: RunManifest) -> Path:
    config = load_config(args.config, data=args.data, seed=args.seed)
    manifest.config = config.to_dict()
    manifest.seed = config.seed
    manifest.inputs = {args.config: _fingerprint(Path(args.config)), args.data: _fingerprint(Path(args.data))}
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        manifest.inputs[args.resume] = _fingerprint(Path(args.resume))

    samples = read_dataset(args.data)
    categories = read_meta(args.data)["categories"]
    data = TrainingData.from_samples(samples, categories)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / TRAIN_LOG_NAME, "w", encoding="utf-8", newline="\n") as log_file:
        ckpt = train(config, data, resume=resume, log_file=log_file)
    save_checkpoint(ckpt, out)
    manifest.record_outputs([out])
    return out


def cmd_sample(args: argparse.Namespace, manifest: RunManifest) -> Path:
    manifest.inputs = {args.ckpt: _fingerprint(Path(args.ckpt))}
    ckpt = load_checkpoint(args.ckpt)
    denoiser, conditioner, config = restore_models(ckpt)
    prompts = [args.prompt] * args.n
    images = sample_images(
        denoiser, conditioner, config.schedule(), prompts,
        steps=args.steps, guidance=args.guidance, seed=args.seed,
    )
    out = Path(args.out)
    write_prompt_samples(images, prompts, out)
    manifest.record_outputs([out])
    return out


def cmd_evaluate(args: argparse.Namespace, manifest: RunManifest) -> Path:
    out = Path(args.out)
    if out.suffix not in (".csv", ".json"):
        raise ConfigError(f"--out must end in .csv or .json, got {out.name}")
    manifest.inputs = {args.real: _fingerprint(Path(args.real)), args.synth: _fingerprint(Path(args.synth))}
    real_images, real_captions = load_pairs(args.real)
    synth_images, synth_prompts = load_pairs(args.synth)
    n_categories = args.categories
    if n_categories is None:
        meta_dir = Path(args.real)
        n_categories = len(read_meta(meta_dir)["categories"]) if (meta_dir / "meta.json").is_file() else 4
    try:
        provider = get_provider(args.provider, n_categories)
        report = evaluate_sets(
            real_images, real_captions, synth_images, synth_prompts, provider,
            n_categories=n_categories, seed=args.seed, text_metrics=True if args.plip_t else None,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    report.write(out)
    manifest.record_outputs([out])
    return out.parent


def cmd_ablate(args: argparse.Namespace, manifest: RunManifest) -> Path:
    config = load_config(args.config, data=args.data, seed=args.seed)
    manifest.config = config.to_dict()
    manifest.inputs = {args.config: _fingerprint(Path(args.config)), args.data: _fingerprint(Path(args.data))}
    samples = read_dataset(args.data)
    model = AlignDiff(
        random_state=config.seed,
        n_categories=len(read_meta(args.data)["categories"]),
        verbose=args.verbose,
        train_params={
            "model": {"base_channels": config.base_channels, "text_dim": config.text_dim, "max_length": config.max_length},
            "pretrain": {"steps": config.steps, "batch_size": config.batch_size, "learning_rate": config.learning_rate,
                         "lambda_corr": config.lambda_corr, "caption_dropout": config.caption_dropout,
                         "optimizer": config.optimizer, "max_grad_norm": config.max_grad_norm},
            "finetune": {"steps": config.finetune_steps, "batch_size": config.batch_size,
                         "learning_rate": config.learning_rate, "lambda_corr": config.lambda_corr,
                         "lambda_cate": config.lambda_cate, "caption_dropout": config.caption_dropout,
                         "optimizer": config.optimizer, "max_grad_norm": config.max_grad_norm},
        },
        sampler_params={"steps": config.sample_steps, "guidance": config.guidance_scale},
    )
    table = model.category_ablation(samples, seeds=args.seeds, n_per_category=args.n_per_category)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False, lineterminator="\n", float_format="%.10g")
    summary = table.groupby("lambda_cate", sort=False)["silhouette"].mean()
    for weight, score in summary.items():
        logger.info("mean silhouette at lambda_cate=%g: %.4f", weight, score)
    manifest.record_outputs([out])
    return out.parent


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aligndiff", description="Text-conditioned diffusion with alignment losses")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-corpus", help="generate a synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n", type=positive_int, required=True)
    gen.add_argument("--categories", type=int, default=4)
    gen.add_argument("--seed", type=non_negative_int, required=True)

    tr = sub.add_parser("train", help="train a checkpoint from a key=value config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--resume", default=None)
    tr.add_argument("--seed", type=non_negative_int, default=None, help="overrides the config seed")

    sm = sub.add_parser("sample", help="generate images for a prompt")
    sm.add_argument("--ckpt", required=True)
    sm.add_argument("--prompt", required=True)
    sm.add_argument("--n", type=positive_int, required=True)
    sm.add_argument("--steps", type=positive_int, default=50)
    sm.add_argument("--guidance", type=float, default=7.5)
    sm.add_argument("--seed", type=non_negative_int, required=True)
    sm.add_argument("--out", required=True)

    ev = sub.add_parser("evaluate", help="compare generated images with a real dataset")
    ev.add_argument("--real", required=True)
    ev.add_argument("--synth", required=True)
    ev.add_argument("--provider", choices=VALID_PROVIDERS, default="paramspace")
    ev.add_argument("--categories", type=int, default=None)
    ev.add_argument("--plip-t", action="store_true", help="require text metrics")
    ev.add_argument("--seed", type=non_negative_int, required=True)
    ev.add_argument("--out", required=True)

    ab = sub.add_parser("ablate", help="silhouette with and without category guidance")
    ab.add_argument("--config", required=True)
    ab.add_argument("--data", required=True)
    ab.add_argument("--seeds", type=non_negative_int, nargs="+", required=True)
    ab.add_argument("--n-per-category", type=positive_int, default=16)
    ab.add_argument("--seed", type=non_negative_int, default=None, help="overrides the config seed")
    ab.add_argument("--out", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logger.setLevel(logging.INFO if args.verbose else logging.WARNING)
    if getattr(args, "seed", None) is not None:
        seed_everything(args.seed)
    manifest = RunManifest(
        command=args.command,
        config={k: v for k, v in vars(args).items() if k != "verbose"},
        seed=getattr(args, "seed", None),
    )
    started = time.perf_counter()
    try:
        out_dir = COMMANDS[args.command](args, manifest)
    except NumericalError as e:
        logger.error("Numerical abort: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        logger.error("Invalid configuration: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        logger.error("I/O failure: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    manifest.wall_clock_seconds = round(time.perf_counter() - started, 3)
    manifest.write(out_dir)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
