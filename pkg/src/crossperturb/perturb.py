"""Feature-statistics perturbations.

The patch-level pipeline splits a feature map into non-overlapping spatial
patches, shuffles the per-channel (mean, std) pairs across patches, injects
Gaussian noise scaled by the across-patch spread of those statistics, and
re-normalizes each patch to the perturbed targets. Whole-instance baselines
(batch-statistics noise and cross-instance statistic mixing) share the same
re-normalization step.

Target statistics act as constants during backward; the normalization path
(x - mu) / sigma is differentiated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Rng, Tensor, concat, reduce_mean_std

SPLIT_SCHEMES = (
    "P2-UD-random",
    "P2-LR-random",
    "P2-UD-equal",
    "P2-LR-equal",
    "P4-equal",
    "P4-random",
    "P9-equal",
)
# Unequal 9-way splits can produce patches too small to train on; rejected at
# validation rather than allowed to diverge.
REJECTED_SCHEMES = ("P9-random",)

PERTURB_KINDS = ("mixpatch", "dsu", "mixstyle")


@dataclass(frozen=True)
class PatchPartition:
    """Axis-aligned grid partition of an H x W extent.

    ``row_splits``/``col_splits`` include the 0 and H (or W) endpoints;
    patches are enumerated row-major.
    """

    scheme: str
    row_splits: tuple[int, ...]
    col_splits: tuple[int, ...]

    @property
    def height(self) -> int:
        return self.row_splits[-1]

    @property
    def width(self) -> int:
        return self.col_splits[-1]

    @property
    def patch_count(self) -> int:
        return (len(self.row_splits) - 1) * (len(self.col_splits) - 1)

    def boundaries(self) -> list[tuple[int, int, int, int]]:
        """(h_start, h_end, w_start, w_end) per patch, row-major."""
        out = []
        for r in range(len(self.row_splits) - 1):
            for c in range(len(self.col_splits) - 1):
                out.append((self.row_splits[r], self.row_splits[r + 1],
                            self.col_splits[c], self.col_splits[c + 1]))
        return out


@dataclass
class PatchStats:
    """Per-instance, per-patch, per-channel feature statistics, shape (N, P, C)."""

    mu: np.ndarray
    sigma: np.ndarray
    eps: float

    def copy(self) -> "PatchStats":
        return PatchStats(self.mu.copy(), self.sigma.copy(), self.eps)


@dataclass
class UncertaintyStats:
    """Across-patch spread of means and stds per instance and channel, shape (N, C)."""

    sigma_mu: np.ndarray
    sigma_sigma: np.ndarray


@dataclass
class PerturbConfig:
    kind: str = "mixpatch"
    scheme: str = "P2-UD-random"
    eps: float = 1e-6
    apply_probability: float = 0.5
    noise_enabled: bool = True
    shuffle_enabled: bool = True
    clamp_floor: float = 1e-4
    mixstyle_alpha: float = 0.3

    def __post_init__(self):
        if self.kind not in PERTURB_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; choose from {PERTURB_KINDS}")
        if self.scheme in REJECTED_SCHEMES:
            raise ValueError(f"split scheme {self.scheme!r} is rejected (does not converge); "
                             f"choose from {SPLIT_SCHEMES}")
        if self.scheme not in SPLIT_SCHEMES:
            raise ValueError(f"unknown split scheme {self.scheme!r}; choose from {SPLIT_SCHEMES}")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError(f"apply_probability must be in [0, 1], got {self.apply_probability}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.clamp_floor <= 0:
            raise ValueError(f"clamp_floor must be positive, got {self.clamp_floor}")


def _middle_third_split(extent: int, rng: Rng) -> int:
    """Random split position in [ceil(extent/3), floor(2*extent/3)]."""
    lo = -(-extent // 3)
    hi = (2 * extent) // 3
    if extent < 3 or lo > hi:
        raise ValueError(f"extent {extent} too small for a random middle-third split (needs >= 3)")
    return rng.integers(lo, hi)


def make_partition(height: int, width: int, scheme: str, rng: Rng) -> PatchPartition:
    """Build the patch grid for one feature map; random schemes draw from ``rng``."""
    if scheme in REJECTED_SCHEMES:
        raise ValueError(f"split scheme {scheme!r} is rejected (does not converge)")
    if scheme not in SPLIT_SCHEMES:
        raise ValueError(f"unknown split scheme {scheme!r}; choose from {SPLIT_SCHEMES}")

    def need(dim: int, minimum: int, what: str):
        if dim < minimum:
            raise ValueError(f"{what} {dim} too small for scheme {scheme} (needs >= {minimum})")

    if scheme == "P2-UD-random":
        need(height, 3, "height")
        rows, cols = (0, _middle_third_split(height, rng), height), (0, width)
    elif scheme == "P2-LR-random":
        need(width, 3, "width")
        rows, cols = (0, height), (0, _middle_third_split(width, rng), width)
    elif scheme == "P2-UD-equal":
        need(height, 2, "height")
        rows, cols = (0, height // 2, height), (0, width)
    elif scheme == "P2-LR-equal":
        need(width, 2, "width")
        rows, cols = (0, height), (0, width // 2, width)
    elif scheme == "P4-equal":
        need(height, 2, "height")
        need(width, 2, "width")
        rows, cols = (0, height // 2, height), (0, width // 2, width)
    elif scheme == "P4-random":
        need(height, 3, "height")
        need(width, 3, "width")
        rows = (0, _middle_third_split(height, rng), height)
        cols = (0, _middle_third_split(width, rng), width)
    else:  # P9-equal: near-equal cells, remainder in the last row/column of cells
        need(height, 3, "height")
        need(width, 3, "width")
        bh, bw = height // 3, width // 3
        rows, cols = (0, bh, 2 * bh, height), (0, bw, 2 * bw, width)

    return PatchPartition(scheme=scheme, row_splits=rows, col_splits=cols)


def _check_partition(f: Tensor, part: PatchPartition) -> None:
    if f.ndim != 4:
        raise ValueError(f"expected an NCHW feature map, got rank {f.ndim}")
    if f.shape[2] != part.height or f.shape[3] != part.width:
        raise ValueError(f"partition covers {part.height}x{part.width} but feature map is "
                         f"{f.shape[2]}x{f.shape[3]}")


def patch_statistics(f: Tensor, part: PatchPartition, eps: float) -> PatchStats:
    """Per-patch per-channel mean and sqrt(population variance + eps) of ``f``."""
    _check_partition(f, part)
    n, c = f.shape[0], f.shape[1]
    bounds = part.boundaries()
    mu = np.empty((n, len(bounds), c), dtype=f.data.dtype)
    sigma = np.empty_like(mu)
    for p, (h0, h1, w0, w1) in enumerate(bounds):
        region = f.data[:, :, h0:h1, w0:w1]
        m = region.mean(axis=(2, 3))
        v = ((region - m[:, :, None, None]) ** 2).mean(axis=(2, 3))
        mu[:, p, :] = m
        sigma[:, p, :] = np.sqrt(v + eps)
    return PatchStats(mu=mu, sigma=sigma, eps=eps)


def shuffle_stats(stats: PatchStats, rng: Rng) -> tuple[PatchStats, np.ndarray]:
    """Reorder (mu, sigma) pairs across patches, independently per instance and channel.

    Returns the shuffled stats and the permutation record ``perms`` of shape
    (N, C, P) with ``shuffled.mu[n, p, c] == stats.mu[n, perms[n, c, p], c]``.
    """
    n, p, c = stats.mu.shape
    if p < 2:
        raise ValueError(f"shuffle needs at least 2 patches, got {p}")
    u = rng.uniform(shape=(n, c, p))
    perms = np.argsort(u, axis=-1, kind="stable")
    mu_t = stats.mu.transpose(0, 2, 1)
    sigma_t = stats.sigma.transpose(0, 2, 1)
    new_mu = np.take_along_axis(mu_t, perms, axis=-1).transpose(0, 2, 1)
    new_sigma = np.take_along_axis(sigma_t, perms, axis=-1).transpose(0, 2, 1)
    return PatchStats(mu=np.ascontiguousarray(new_mu),
                      sigma=np.ascontiguousarray(new_sigma),
                      eps=stats.eps), perms


def stats_uncertainty(stats: PatchStats) -> UncertaintyStats:
    """Across-patch population std of the patch means and patch stds, per channel."""
    mu_var = ((stats.mu - stats.mu.mean(axis=1, keepdims=True)) ** 2).mean(axis=1)
    sigma_var = ((stats.sigma - stats.sigma.mean(axis=1, keepdims=True)) ** 2).mean(axis=1)
    return UncertaintyStats(sigma_mu=np.sqrt(mu_var), sigma_sigma=np.sqrt(sigma_var))


def perturb_stats(stats: PatchStats, unc: UncertaintyStats, rng: Rng,
                  clamp_floor: float) -> PatchStats:
    """Gaussian-perturb patch statistics: value + N(0,1) * channel spread.

    Draw order: one (N, P, C) normal block for the means, then one for the
    stds. Perturbed stds are clamped to at least ``clamp_floor``.
    """
    if clamp_floor <= 0:
        raise ValueError(f"clamp_floor must be positive, got {clamp_floor}")
    dtype = stats.mu.dtype
    eps_mu = rng.normal(stats.mu.shape, dtype=dtype)
    eps_sigma = rng.normal(stats.sigma.shape, dtype=dtype)
    mu = stats.mu + eps_mu * unc.sigma_mu[:, None, :]
    sigma = stats.sigma + eps_sigma * unc.sigma_sigma[:, None, :]
    sigma = np.maximum(sigma, np.asarray(clamp_floor, dtype=dtype))
    return PatchStats(mu=mu, sigma=sigma, eps=stats.eps)


def apply_adain_patches(f: Tensor, part: PatchPartition, orig: PatchStats,
                        target: PatchStats) -> Tensor:
    """Re-normalize each patch from its own statistics to the target statistics.

    Per patch and channel: out = target_sigma * (x - mu) / sigma + target_mu,
    where (mu, sigma) are recomputed differentiably from ``f`` (x's own patch
    statistics) and the targets enter as constants.
    """
    _check_partition(f, part)
    n, c = f.shape[0], f.shape[1]
    expected = (n, part.patch_count, c)
    if orig.mu.shape != expected or target.mu.shape != expected:
        raise ValueError(f"stats shape mismatch: expected {expected}, got "
                         f"orig {orig.mu.shape}, target {target.mu.shape}")
    if np.any(orig.sigma <= 0):
        raise ValueError("original patch stds must be positive (use eps > 0)")

    ncols = len(part.col_splits) - 1
    bounds = part.boundaries()
    rows: list[Tensor] = []
    cells: list[Tensor] = []
    for p, (h0, h1, w0, w1) in enumerate(bounds):
        patch = f.crop(h0, h1, w0, w1)
        m, s = reduce_mean_std(patch, (2, 3), eps=orig.eps, keepdims=True)
        t_sigma = Tensor(target.sigma[:, p, :].reshape(n, c, 1, 1))
        t_mu = Tensor(target.mu[:, p, :].reshape(n, c, 1, 1))
        cells.append((patch - m) / s * t_sigma + t_mu)
        if len(cells) == ncols:
            rows.append(concat(cells, axis=3) if ncols > 1 else cells[0])
            cells = []
    return concat(rows, axis=2) if len(rows) > 1 else rows[0]


def mixpatch(f: Tensor, cfg: PerturbConfig, rng: Rng, training: bool) -> Tensor:
    """Full patch-statistics perturbation chain; identity outside training.

    When training, one Bernoulli gate draw decides whether the batch is
    perturbed at all. Draw order on the applied path: gate, partition split(s),
    shuffle permutations, mean noise, std noise.
    """
    if not training:
        return f
    if not rng.bernoulli(cfg.apply_probability):
        return f
    part = make_partition(f.shape[2], f.shape[3], cfg.scheme, rng)
    orig = patch_statistics(f, part, cfg.eps)
    stats = orig
    if cfg.shuffle_enabled:
        stats, _ = shuffle_stats(stats, rng)
    if cfg.noise_enabled:
        unc = stats_uncertainty(stats)
        stats = perturb_stats(stats, unc, rng, cfg.clamp_floor)
    return apply_adain_patches(f, part, orig, stats)


def dsu_perturb(f: Tensor, rng: Rng, eps: float = 1e-6) -> Tensor:
    """Whole-instance baseline: channel statistics + noise scaled by their across-batch spread.

    Draw order: one (N, C) normal block for the means, then one for the stds.
    """
    if f.ndim != 4:
        raise ValueError(f"expected an NCHW feature map, got rank {f.ndim}")
    n, c = f.shape[0], f.shape[1]
    if n < 2:
        raise ValueError("batch size must be >= 2 to estimate across-batch uncertainty")
    mu_t, sigma_t = reduce_mean_std(f, (2, 3), eps=eps, keepdims=True)
    mu = mu_t.data[:, :, 0, 0]
    sigma = sigma_t.data[:, :, 0, 0]
    dtype = mu.dtype
    sq_mu = np.sqrt(((mu - mu.mean(axis=0)) ** 2).mean(axis=0) + eps)
    sq_sigma = np.sqrt(((sigma - sigma.mean(axis=0)) ** 2).mean(axis=0) + eps)
    beta = mu + rng.normal((n, c), dtype=dtype) * sq_mu
    gamma = sigma + rng.normal((n, c), dtype=dtype) * sq_sigma
    out = (f - mu_t) / sigma_t * Tensor(gamma.reshape(n, c, 1, 1)) + Tensor(beta.reshape(n, c, 1, 1))
    return out


def mixstyle_perturb(f: Tensor, rng: Rng, alpha: float = 0.3, eps: float = 1e-6,
                     lam: np.ndarray | None = None,
                     partner: np.ndarray | None = None) -> Tensor:
    """Whole-instance baseline: convexly mix channel statistics with a shuffled batch partner.

    ``lam``/``partner`` override the Beta(alpha, alpha) coefficient and the
    batch permutation (used by tests); when None, draw order is lam then
    permutation.
    """
    if f.ndim != 4:
        raise ValueError(f"expected an NCHW feature map, got rank {f.ndim}")
    n, c = f.shape[0], f.shape[1]
    if n < 2:
        raise ValueError("batch size must be >= 2 to mix across instances")
    mu_t, sigma_t = reduce_mean_std(f, (2, 3), eps=eps, keepdims=True)
    mu = mu_t.data[:, :, 0, 0]
    sigma = sigma_t.data[:, :, 0, 0]
    if lam is None:
        lam = rng.beta(alpha, alpha, (n, 1))
    lam = np.asarray(lam, dtype=mu.dtype).reshape(n, 1)
    if partner is None:
        partner = rng.permutation(n)
    mu_mix = lam * mu + (1.0 - lam) * mu[partner]
    sigma_mix = lam * sigma + (1.0 - lam) * sigma[partner]
    out = (f - mu_t) / sigma_t * Tensor(sigma_mix.reshape(n, c, 1, 1)) + Tensor(mu_mix.reshape(n, c, 1, 1))
    return out


def feature_perturb(f: Tensor, cfg: PerturbConfig, rng: Rng, training: bool) -> Tensor:
    """Dispatch on the configured perturbation kind, with the shared training gate."""
    if cfg.kind == "mixpatch":
        return mixpatch(f, cfg, rng, training)
    if not training:
        return f
    if not rng.bernoulli(cfg.apply_probability):
        return f
    if cfg.kind == "dsu":
        return dsu_perturb(f, rng, cfg.eps)
    return mixstyle_perturb(f, rng, alpha=cfg.mixstyle_alpha, eps=cfg.eps)
