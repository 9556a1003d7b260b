"""Command line: ``udd {distill,evaluate,baseline,mue,export}``.

Settings come from defaults, then the YAML file given with ``-c``, then
``--set section.key=value`` flags (and the few dedicated flags), later ones
winning. Failures exit with one line on stderr, ``udd: error <code> <kind>: <message>``,
and exit code 2 (config), 3 (io) or 4 (numeric divergence).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config
from .data_io import (
    ConfigHashWarning, DataFormatError, LabeledImages, METRICS_HEADER, SyntheticDataset, append_csv, channel_stats,
    denormalize, export_png_grid, load_split, load_synthetic, normalize, save_synthetic, write_csv,
)
from .engine import CHECKPOINT_STATE, Distiller, load_checkpoint
from .evaluation import (
    as_synthetic, coreset_herding, coreset_random, dataset_mue, evaluate_synthetic, export_embeddings,
    herding_extractor, train_classifier,
)
from .model import init_convnet
from .seeding import stream

log = logging.getLogger("udd")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
RESULTS_HEADER = ["source", "kind", "config_hash", "mean", "std", "repeats", "accuracies"]


class HashMismatch(ConfigError):
    pass


# ---------------------------------------------------------------- helpers

def _load_real(cfg: RunConfig) -> tuple[LabeledImages, LabeledImages, np.ndarray, np.ndarray]:
    train = load_split("train", cfg.data.name, cfg.data.root)
    test = load_split("test", cfg.data.name, cfg.data.root)
    mean, std = channel_stats(train.images)
    train = LabeledImages(normalize(train.images, mean, std), train.labels, train.classes)
    test = LabeledImages(normalize(test.images, mean, std), test.labels, test.classes)
    return train, test, mean, std


def _load_test(cfg: RunConfig, syn: SyntheticDataset) -> LabeledImages:
    test = load_split("test", cfg.data.name, cfg.data.root)
    return LabeledImages(normalize(test.images, syn.mean, syn.std), test.labels, test.classes)


def _open_synthetic(path, cfg: RunConfig, allow_mismatch: bool) -> SyntheticDataset:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConfigHashWarning)
        syn = load_synthetic(path, expected_hash=cfg.hash())
    for w in caught:
        if issubclass(w.category, ConfigHashWarning):
            if not allow_mismatch:
                raise HashMismatch(f"{path}: {w.message} (pass --allow-hash-mismatch to override)")
            log.warning("%s", w.message)
    return syn


def _prepare_out(cfg: RunConfig) -> Path:
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    return out


def _record_result(out: Path, cfg: RunConfig, source: str, kind: str, res) -> None:
    row = [source, kind, cfg.hash(), repr(res.mean), repr(res.std), len(res.accuracies),
           " ".join(repr(a) for a in res.accuracies)]
    append_csv(out / "results.csv", RESULTS_HEADER, [row], cfg.hash())


def _eval_network(syn: SyntheticDataset, cfg: RunConfig):
    """The first evaluation-repeat network trained on ``syn``."""
    e = cfg.eval
    flat = syn.flat()
    params = init_convnet(e.depth, e.width, tuple(flat.images.shape[1:]), flat.classes,
                          stream(e.seed, "eval/init/r=0"), dtype=e.precision)
    return train_classifier(params, flat, e.epochs, e.lr, e.batch_size, "eval/r=0", e.seed,
                            e.momentum, e.weight_decay)


def _write_pngs(syn: SyntheticDataset, directory: Path) -> int:
    from PIL import Image

    directory.mkdir(parents=True, exist_ok=True)
    c, k = syn.images.shape[:2]
    pix = denormalize(syn.images.reshape(c * k, *syn.images.shape[2:]), syn.mean, syn.std)
    pix = np.round(np.clip(pix, 0.0, 1.0) * 255.0).astype(np.uint8)
    for n, img in enumerate(pix):
        arr = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
        Image.fromarray(arr).save(directory / f"class{n // k:02d}_{n % k:03d}.png")
    return len(pix)


# ---------------------------------------------------------------- commands

def cmd_distill(cfg: RunConfig, resume: bool = False) -> Path:
    out = _prepare_out(cfg)
    real, _, mean, std = _load_real(cfg)
    digest = cfg.hash()
    ck = out / "checkpoint"
    metrics = out / "metrics.csv"
    if resume and (ck / CHECKPOINT_STATE).exists():
        runner = load_checkpoint(ck, cfg.distill, real, metrics_path=metrics, config_hash=digest)
        log.info("resumed at iteration %d", runner.state.iteration)
    else:
        if metrics.exists():
            metrics.unlink()
        runner = Distiller.fresh(cfg.distill, real, mean, std, metrics_path=metrics, config_hash=digest)
    started = time.monotonic()

    def progress(state):
        if state.iteration % 10 == 0:
            log.info("iteration %d/%d (%.0fs)", state.iteration, cfg.distill.iterations, time.monotonic() - started)

    syn = runner.run(checkpoint_dir=ck, progress=progress)
    syn.config_hash = digest
    save_synthetic(out / "synthetic.udds", syn)
    export_png_grid(syn, out / "synthetic.png")
    if not metrics.exists():
        write_csv(metrics, METRICS_HEADER, [], digest)
    print(f"wrote {out / 'synthetic.udds'} ({syn.classes}x{syn.ipc} images, iteration {syn.iteration})")
    return out / "synthetic.udds"


def cmd_evaluate(cfg: RunConfig, synthetic_path, allow_mismatch: bool = False):
    syn = _open_synthetic(synthetic_path, cfg, allow_mismatch)
    res = evaluate_synthetic(syn, _load_test(cfg, syn), cfg.eval)
    out = _prepare_out(cfg)
    _record_result(out, cfg, str(synthetic_path), "synthetic", res)
    print(f"accuracy {100 * res.mean:.2f} +- {100 * res.std:.2f} over {len(res.accuracies)} repeats")
    return res


def cmd_baseline(cfg: RunConfig, kind: str):
    real, test, mean, std = _load_real(cfg)
    ipc = cfg.distill.ipc
    if kind == "random":
        core = coreset_random(real, ipc, stream(cfg.distill.seed, "baseline/random"))
    elif kind == "herding":
        core = coreset_herding(real, ipc, herding_extractor(real, cfg.eval))
    else:
        raise ConfigError(f"unknown baseline {kind!r}")
    out = _prepare_out(cfg)
    syn = as_synthetic(core, mean, std, cfg.hash())
    path = out / f"baseline_{kind}.udds"
    save_synthetic(path, syn)
    res = evaluate_synthetic(syn, test, cfg.eval)
    _record_result(out, cfg, str(path), kind, res)
    print(f"{kind} baseline accuracy {100 * res.mean:.2f} +- {100 * res.std:.2f}")
    return res


def cmd_mue(cfg: RunConfig, synthetic_path, allow_mismatch: bool = False) -> np.ndarray:
    syn = _open_synthetic(synthetic_path, cfg, allow_mismatch)
    params = _eval_network(syn, cfg)
    flat = syn.flat()
    vals = dataset_mue(params, flat.images, cfg.mue)
    out = _prepare_out(cfg)
    rows = [[i, int(c), repr(float(v))] for i, (c, v) in enumerate(zip(flat.labels, vals))]
    rows.append(["mean", "", repr(float(vals.mean()))])
    write_csv(out / "mue.csv", ["image", "class", "mue"], rows, cfg.hash())
    print(f"mUE {vals.mean():.4f} over {len(vals)} images")
    return vals


def cmd_export(cfg: RunConfig, synthetic_path, out_dir, allow_mismatch: bool = False) -> Path:
    syn = _open_synthetic(synthetic_path, cfg, allow_mismatch)
    out_dir = Path(out_dir)
    n = _write_pngs(syn, out_dir / "images")
    export_png_grid(syn, out_dir / "grid.png")
    export_embeddings(syn, _eval_network(syn, cfg), out_dir / "embeddings.csv")
    print(f"exported {n} images and embeddings to {out_dir}")
    return out_dir


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for distill.seed and eval.seed")
    common.add_argument("--out", help="shorthand for output.dir")
    guard = argparse.ArgumentParser(add_help=False)
    guard.add_argument("--allow-hash-mismatch", action="store_true",
                       help="accept a synthetic set produced under a different config")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("distill", parents=[common], help="run distillation")
    d.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output dir")
    e = sub.add_parser("evaluate", parents=[common, guard], help="train on a synthetic set, report accuracy")
    e.add_argument("synthetic")
    b = sub.add_parser("baseline", parents=[common], help="coreset baseline, saved then evaluated")
    b.add_argument("kind", choices=["random", "herding"])
    m = sub.add_parser("mue", parents=[common, guard], help="per-image mUE of a synthetic set")
    m.add_argument("synthetic")
    x = sub.add_parser("export", parents=[common, guard], help="PNGs and embeddings of a synthetic set")
    x.add_argument("synthetic")
    x.add_argument("out_dir")
    return p


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"distill.seed={args.seed}", f"eval.seed={args.seed}"]
    if args.out is not None:
        overrides.append(f"output.dir={args.out}")
    return load_config(args.config, overrides)


def _fail(code: int, kind: str, msg) -> int:
    text = " ".join(str(msg).split())
    print(f"udd: error {code} {kind}: {text}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "distill":
            cmd_distill(cfg, args.resume)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.synthetic, args.allow_hash_mismatch)
        elif args.command == "baseline":
            cmd_baseline(cfg, args.kind)
        elif args.command == "mue":
            cmd_mue(cfg, args.synthetic, args.allow_hash_mismatch)
        elif args.command == "export":
            cmd_export(cfg, args.synthetic, args.out_dir, args.allow_hash_mismatch)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except FloatingPointError as exc:
        return _fail(EXIT_DIVERGED, "divergence", exc)
    except (OSError, DataFormatError) as exc:
        return _fail(EXIT_IO, "io", exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
