"""Statistics-diversity analysis and the route/consistency ablation grid."""

from __future__ import annotations

from dataclasses import dataclass, replace
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .augment import AugmentConfig, augment_batch
from .config import RunConfig
from .data import load_container
from .model import CnnConfig, init_params
from .perturb import PerturbConfig, mixpatch
from .tensor import Rng, Tensor, conv2d
from .training import evaluate, fit

PIPELINES = ("O", "I", "F", "IF")

# Route-mask x consistency grid: every combination of adding the I, IF, and F
# routes on top of the plain route, each with and without the consistency term
# where it can act (two or more routes enabled).
ABLATION_CELLS = (
    ("ERM", ("O",), False),
    ("F", ("O", "F"), False),
    ("I", ("O", "I"), False),
    ("IF", ("O", "IF"), False),
    ("I+F", ("O", "I", "F"), False),
    ("I+F+cons", ("O", "I", "F"), True),
    ("I+IF", ("O", "I", "IF"), False),
    ("I+IF+cons", ("O", "I", "IF"), True),
    ("IF+F", ("O", "IF", "F"), False),
    ("IF+F+cons", ("O", "IF", "F"), True),
    ("I+IF+F", ("O", "I", "IF", "F"), False),
    ("I+IF+F+cons", ("O", "I", "IF", "F"), True),
)


def first_conv_features(images: np.ndarray, conv_w: np.ndarray, conv_b: np.ndarray) -> Tensor:
    x = Tensor(np.asarray(images, dtype=np.float32))
    k = conv_w.shape[2]
    return conv2d(x, Tensor(conv_w), Tensor(conv_b), stride=1, pad=k // 2)


def stats_spread(images: np.ndarray, conv_w: np.ndarray, conv_b: np.ndarray,
                 aug_cfg: AugmentConfig, perturb_cfg: PerturbConfig, seed: int) -> dict[str, dict[str, np.ndarray]]:
    """Per-channel spread of first-conv feature statistics under the four pipelines.

    Passes all M images through the first conv layer as original (O),
    image-perturbed (I), feature-perturbed (F), and dual-perturbed (IF) views;
    the I and IF pipelines share one augmentation draw, and feature
    perturbation is forced on. For each pipeline and channel, returns the mean
    and population variance of the M per-image means and of the M per-image
    variances.
    """
    rng = Rng(seed)
    forced = replace(perturb_cfg, apply_probability=1.0)
    images = np.asarray(images, dtype=np.float32)
    augmented = augment_batch(images, rng, aug_cfg)

    feats = {
        "O": first_conv_features(images, conv_w, conv_b),
        "I": first_conv_features(augmented, conv_w, conv_b),
    }
    feats["F"] = mixpatch(feats["O"], forced, rng, training=True)
    feats["IF"] = mixpatch(feats["I"], forced, rng, training=True)

    out: dict[str, dict[str, np.ndarray]] = {}
    for name in PIPELINES:
        data = feats[name].data
        per_image_mean = data.mean(axis=(2, 3))   # (M, C)
        per_image_var = data.var(axis=(2, 3))
        out[name] = {
            "mean_of_means": per_image_mean.mean(axis=0),
            "var_of_means": per_image_mean.var(axis=0),
            "mean_of_vars": per_image_var.mean(axis=0),
            "var_of_vars": per_image_var.var(axis=0),
        }
    return out


def analysis_model_conv1(run_cfg: RunConfig, classes: int, input_size: int,
                         seed: int, checkpoint_arrays: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    """First-conv weights: from a checkpoint when given, else a seeded untrained model."""
    if checkpoint_arrays is not None:
        return checkpoint_arrays["conv1.weight"], checkpoint_arrays["conv1.bias"]
    cfg = run_cfg.model_config(classes=classes, input_size=input_size)
    params = init_params(cfg, Rng(seed))
    return params.conv_w[0].data, params.conv_b[0].data


@dataclass
class AblationResult:
    cell: str
    routes: tuple[str, ...]
    consistency: bool
    seeds: tuple[int, ...]
    accuracies: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


def train_and_eval_cell(source_path: str, target_paths: tuple[str, ...],
                        values: dict, routes: tuple[str, ...], lam: float,
                        seed: int) -> float:
    """Train one configuration and return the mean accuracy over target domains.

    Top-level so ablation cells can run as independent worker processes.
    """
    cfg = RunConfig(values)
    source = load_container(source_path)
    train_cfg = cfg.train_config(classes=source.classes, input_size=source.size)
    train_cfg.routes = tuple(routes)
    train_cfg.lam = lam
    train_cfg.seed = seed
    params, _ = fit(source.images, source.labels, train_cfg)
    accs = []
    for path in target_paths:
        target = load_container(path)
        acc, _ = evaluate(params, target.images, target.labels, train_cfg.model)
        accs.append(acc)
    return float(np.mean(accs))


def run_ablation(source_path: str, target_paths: tuple[str, ...], run_cfg: RunConfig,
                 seeds: tuple[int, ...], jobs: int = 1) -> list[AblationResult]:
    """Table of mean +/- std target accuracy for every ablation cell over the seeds."""
    if not seeds:
        raise ValueError("at least one seed is required")
    lam0 = run_cfg["lambda"]
    tasks = []
    for cell, routes, cons in ABLATION_CELLS:
        for seed in seeds:
            tasks.append((cell, routes, cons, seed,
                          (source_path, tuple(target_paths), dict(run_cfg.values),
                           routes, lam0 if cons else 0.0, seed)))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(train_and_eval_cell, *args) for _, _, _, _, args in tasks]
            accs = [f.result() for f in futures]
    else:
        accs = [train_and_eval_cell(*args) for _, _, _, _, args in tasks]

    results = []
    i = 0
    for cell, routes, cons in ABLATION_CELLS:
        cell_accs = tuple(accs[i:i + len(seeds)])
        i += len(seeds)
        results.append(AblationResult(cell=cell, routes=routes, consistency=cons,
                                      seeds=tuple(seeds), accuracies=cell_accs))
    return results
