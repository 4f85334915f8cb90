"""Command-line surface: gen-data, train, eval, analyze-stats, ablate.

Every command is reproducible: flags, config file, and seed fully determine
the outputs. Exit codes: 0 success, 2 usage or validation error, 1 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .analysis import ABLATION_CELLS, PIPELINES, analysis_model_conv1, run_ablation, stats_spread
from .config import SCHEMA, ConfigError, RunConfig, resolve_config
from .data import (CORRUPTION_KINDS, DOMAINS, ContainerError, CorruptionSpec, DatasetContainer,
                   corrupt_batch, gen_domain_dataset, load_checkpoint, load_container,
                   save_checkpoint, save_container)
from .model import config_from_metadata, model_metadata, params_from_arrays, params_to_arrays
from .tensor import Rng
from .training import evaluate, fit

TRAIN_KEYS = (
    "seed", "epochs", "batch_size", "lr0", "momentum", "weight_decay", "lambda",
    "routes", "widths", "insertion_points", "perturb_kind", "perturb_scheme",
    "perturb_prob", "perturb_eps", "noise_enabled", "shuffle_enabled", "clamp_floor",
    "mixstyle_alpha", "flip_prob", "brightness", "contrast", "saturation", "grayscale_prob",
)
GEN_KEYS = ("seed", "domains", "per_class", "classes", "size")


def _add_schema_flags(parser: argparse.ArgumentParser, names) -> None:
    for name in names:
        parser.add_argument("--" + name.replace("_", "-"), dest=name, default=None,
                            metavar="V", help=SCHEMA[name].help)


def _flag_overrides(args: argparse.Namespace, names) -> dict:
    return {name: getattr(args, name) for name in names if getattr(args, name, None) is not None}


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _echo_config(out: Path, cfg: RunConfig, extra_comments: list[str] | None = None) -> None:
    text = "".join(f"# {line}\n" for line in (extra_comments or [])) + cfg.echo_text()
    (out / "effective.cfg").write_text(text)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args.config, _flag_overrides(args, GEN_KEYS))
    unknown = [d for d in cfg["domains"] if d not in DOMAINS]
    if unknown:
        raise ConfigError(f"unknown domain(s) {unknown}; valid domains: {sorted(DOMAINS)}")
    out = _out_dir(args)
    manifest_rows = []
    for index, name in enumerate(cfg["domains"]):
        seed = cfg["seed"] + index
        container = gen_domain_dataset(DOMAINS[name], cfg["per_class"], cfg["classes"],
                                       cfg["size"], Rng(seed))
        container.metadata["seed"] = str(seed)
        path = out / f"{name}.cptn"
        save_container(path, container)
        manifest_rows.append([path.name, name, seed, cfg["classes"], cfg["per_class"], cfg["size"]])
    _write_csv(out / "manifest.csv", ["file", "domain", "seed", "classes", "per_class", "size"],
               manifest_rows)
    print(f"wrote {len(manifest_rows)} container(s) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, _flag_overrides(args, TRAIN_KEYS))
    source = load_container(args.source)
    train_cfg = cfg.train_config(classes=source.classes, input_size=source.size)
    out = _out_dir(args)

    params, log = fit(source.images, source.labels, train_cfg)

    meta = model_metadata(train_cfg.model)
    meta["source_domain"] = source.metadata.get("domain", "?")
    meta["seed"] = str(train_cfg.seed)
    meta["epochs"] = str(train_cfg.epochs)
    save_checkpoint(out / "checkpoint.cptn", params_to_arrays(params), meta)
    _write_csv(out / "train_log.csv",
               ["epoch", "step", "lr", "l_cls", "l_cons", "total", "train_acc"],
               [[row["epoch"], row["step"], row["lr"], row["l_cls"], row["l_cons"],
                 row["total"], row["train_acc"]] for row in log])
    _echo_config(out, cfg)
    final = log[-1]
    print(f"trained {train_cfg.epochs} epochs; final total loss {final['total']:.4f}, "
          f"train acc {final['train_acc']:.3f}")
    return 0


def _parse_corruptions(text: str) -> list[str]:
    if text == "none":
        return []
    if text == "all":
        return list(CORRUPTION_KINDS)
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    unknown = [k for k in kinds if k not in CORRUPTION_KINDS]
    if unknown:
        raise ConfigError(f"unknown corruption(s) {unknown}; valid kinds: {list(CORRUPTION_KINDS)}")
    return kinds


def cmd_eval(args) -> int:
    arrays, meta = load_checkpoint(args.checkpoint)
    model_cfg = config_from_metadata(meta)
    params = params_from_arrays(arrays, model_cfg)
    kinds = _parse_corruptions(args.corruptions)
    targets = [Path(p) for p in args.targets.split(",") if p.strip()]
    if not targets:
        raise ConfigError("at least one target container is required")
    out = _out_dir(args)

    combos = len(targets) * len(kinds) * 5
    streams = iter(Rng(args.seed).split(combos)) if combos else iter(())

    rows: list[list] = []
    domain_corruption_means: list[float] = []
    clean_accs: list[float] = []
    for path in targets:
        container = load_container(path)
        domain = container.metadata.get("domain", path.stem)
        clean_acc, _ = evaluate(params, container.images, container.labels, model_cfg)
        clean_accs.append(clean_acc)
        rows.append([domain, "none", 0, len(container.labels), clean_acc])
        corrupted_accs = []
        for kind in kinds:
            for severity in range(1, 6):
                spec = CorruptionSpec(kind=kind, severity=severity)
                images = corrupt_batch(container.images, spec, next(streams))
                acc, _ = evaluate(params, images, container.labels, model_cfg)
                corrupted_accs.append(acc)
                rows.append([domain, kind, severity, len(container.labels), acc])
        if corrupted_accs:
            mean_acc = float(np.mean(corrupted_accs))
            domain_corruption_means.append(mean_acc)
            rows.append([domain, "average", "all", len(container.labels), mean_acc])
    rows.append(["all", "none", 0, "", float(np.mean(clean_accs))])
    if domain_corruption_means:
        rows.append(["all", "average", "all", "", float(np.mean(domain_corruption_means))])

    _write_csv(out / "metrics.csv", ["domain", "corruption", "severity", "n", "accuracy"], rows)
    print(f"evaluated {len(targets)} target(s); mean clean accuracy {float(np.mean(clean_accs)):.3f}")
    return 0


def cmd_analyze_stats(args) -> int:
    cfg = resolve_config(args.config, _flag_overrides(args, TRAIN_KEYS))
    container = load_container(args.data)
    m = args.images
    if m < 1 or m > len(container.images):
        raise ConfigError(f"--images must be in [1, {len(container.images)}], got {m}")

    checkpoint_arrays = None
    if args.checkpoint:
        checkpoint_arrays, _ = load_checkpoint(args.checkpoint)
    conv_w, conv_b = analysis_model_conv1(cfg, container.classes, container.size,
                                          cfg["seed"], checkpoint_arrays)

    spread = stats_spread(container.images[:m], conv_w, conv_b,
                          cfg.augment_config(), cfg.perturb_config(), cfg["seed"])
    rows = []
    for pipeline in PIPELINES:
        stats = spread[pipeline]
        for channel in range(len(stats["mean_of_means"])):
            rows.append([pipeline, channel,
                         float(stats["mean_of_means"][channel]),
                         float(stats["var_of_means"][channel]),
                         float(stats["mean_of_vars"][channel]),
                         float(stats["var_of_vars"][channel])])
    out = _out_dir(args)
    _write_csv(out / "stats_spread.csv",
               ["pipeline", "channel", "mean_of_means", "var_of_means", "mean_of_vars", "var_of_vars"],
               rows)
    extractor = "checkpoint first conv" if args.checkpoint else "seeded untrained first conv"
    _echo_config(out, cfg, [f"feature extractor: {extractor} over {m} images",
                            "pretrained backbones are out of scope at this scale"])
    print(f"analyzed {m} images across {len(rows)} (pipeline, channel) cells")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args.config, _flag_overrides(args, TRAIN_KEYS))
    seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    if not seeds:
        raise ConfigError("--seeds must list at least one integer seed")
    targets = tuple(p.strip() for p in args.targets.split(",") if p.strip())
    if not targets:
        raise ConfigError("at least one target container is required")
    results = run_ablation(args.source, targets, cfg, seeds, jobs=args.jobs)
    out = _out_dir(args)
    rows = [[r.cell, "+".join(r.routes), int(r.consistency),
             ";".join(str(s) for s in r.seeds), r.mean, r.std] for r in results]
    _write_csv(out / "ablation.csv",
               ["cell", "routes", "consistency", "seeds", "mean_acc", "std_acc"], rows)
    _echo_config(out, cfg)
    best = max(results, key=lambda r: r.mean)
    print(f"ran {len(ABLATION_CELLS)} cells x {len(seeds)} seed(s); "
          f"best cell {best.cell} at {best.mean:.3f}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossperturb",
                                     description="Cross-perturbation training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic domain datasets")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="key=value config file")
    _add_schema_flags(p, GEN_KEYS)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on one source domain")
    p.add_argument("--source", required=True, help="source-domain container")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="key=value config file")
    _add_schema_flags(p, TRAIN_KEYS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on target domains")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--targets", required=True, help="comma-separated target containers")
    p.add_argument("--corruptions", default="all",
                   help="'all', 'none', or a comma-separated list of corruption kinds")
    p.add_argument("--seed", type=int, default=0, help="seed for corruption noise")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-stats", help="statistics-diversity analysis of the four pipelines")
    p.add_argument("--data", required=True, help="dataset container")
    p.add_argument("--images", type=int, default=128, help="number of images to analyze")
    p.add_argument("--checkpoint", default=None, help="optional checkpoint for the first conv")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _add_schema_flags(p, TRAIN_KEYS)
    p.set_defaults(func=cmd_analyze_stats)

    p = sub.add_parser("ablate", help="route-mask x consistency ablation grid")
    p.add_argument("--source", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--jobs", type=int, default=1, help="parallel training jobs")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _add_schema_flags(p, TRAIN_KEYS)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContainerError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
