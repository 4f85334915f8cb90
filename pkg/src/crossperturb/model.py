"""Small plain CNN classifier with named feature-perturbation insertion points.

Each block is conv(3x3, pad 1) -> relu -> 2x2 max-pool; the head is global
average pooling followed by a linear layer. Batch norm is deliberately absent
so statistics perturbations act on raw feature maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .perturb import PerturbConfig, feature_perturb
from .tensor import Rng, Tensor, conv2d, matmul, maxpool2d

INSERTION_POINTS = ("after_block_1", "after_block_2", "after_block_3")


@dataclass
class CnnConfig:
    widths: tuple[int, ...] = (32, 64, 128)
    kernel: int = 3
    classes: int = 5
    in_channels: int = 3
    input_size: int = 32
    insertion_points: frozenset[str] = frozenset({"after_block_2"})

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.insertion_points = frozenset(self.insertion_points)
        if not self.widths:
            raise ValueError("at least one block is required")
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        valid = {f"after_block_{i + 1}" for i in range(len(self.widths))}
        unknown = self.insertion_points - valid
        if unknown:
            raise ValueError(f"insertion points {sorted(unknown)} refer to missing blocks "
                             f"(model has {len(self.widths)})")
        if self.input_size < 2 ** len(self.widths):
            raise ValueError(f"input size {self.input_size} too small for "
                             f"{len(self.widths)} pooling stages")


@dataclass
class ModelParams:
    """Gradient-tracked parameter set; iteration order is stable."""

    conv_w: list[Tensor]
    conv_b: list[Tensor]
    fc_w: Tensor
    fc_b: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out.append((f"conv{i + 1}.weight", w))
            out.append((f"conv{i + 1}.bias", b))
        out.append(("fc.weight", self.fc_w))
        out.append(("fc.bias", self.fc_b))
        return out

    def zero_grad(self) -> None:
        for _, p in self.named():
            p.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient per parameter name; parameters untouched by the loss get zeros."""
        return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in self.named()}


def init_params(cfg: CnnConfig, rng: Rng, dtype=np.float32) -> ModelParams:
    """He-initialized conv and linear weights, zero biases; deterministic per seed."""
    conv_w, conv_b = [], []
    c_in = cfg.in_channels
    for width in cfg.widths:
        fan_in = c_in * cfg.kernel * cfg.kernel
        w = rng.normal((width, c_in, cfg.kernel, cfg.kernel), dtype=dtype) * np.sqrt(2.0 / fan_in)
        conv_w.append(Tensor(w.astype(dtype), requires_grad=True))
        conv_b.append(Tensor(np.zeros(width, dtype=dtype), requires_grad=True))
        c_in = width
    fc = rng.normal((c_in, cfg.classes), dtype=dtype) * np.sqrt(2.0 / c_in)
    return ModelParams(
        conv_w=conv_w,
        conv_b=conv_b,
        fc_w=Tensor(fc.astype(dtype), requires_grad=True),
        fc_b=Tensor(np.zeros(cfg.classes, dtype=dtype), requires_grad=True),
    )


def forward(x: Tensor, params: ModelParams, cfg: CnnConfig,
            perturb: tuple[PerturbConfig, Rng] | None = None,
            training: bool = False) -> Tensor:
    """Logits for a batch; optionally perturbs feature maps at the insertion points."""
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected N x {cfg.in_channels} x H x W input, got {x.shape}")
    h = x
    for i, (w, b) in enumerate(zip(params.conv_w, params.conv_b)):
        h = maxpool2d(conv2d(h, w, b, stride=1, pad=cfg.kernel // 2).relu())
        if perturb is not None and f"after_block_{i + 1}" in cfg.insertion_points:
            p_cfg, p_rng = perturb
            h = feature_perturb(h, p_cfg, p_rng, training)
    pooled = h.mean(axis=(2, 3))
    return matmul(pooled, params.fc_w) + params.fc_b


def params_to_arrays(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in params.named()}


def params_from_arrays(arrays: dict[str, np.ndarray], cfg: CnnConfig) -> ModelParams:
    """Rebuild a parameter set from named arrays, validating against the config."""
    reference = init_params(cfg, Rng(0))
    loaded: dict[str, Tensor] = {}
    for name, ref in reference.named():
        if name not in arrays:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        arr = np.asarray(arrays[name])
        if arr.shape != ref.data.shape:
            raise ValueError(f"parameter {name!r} has shape {arr.shape}, expected {ref.data.shape}")
        loaded[name] = Tensor(arr.astype(ref.data.dtype), requires_grad=True)
    blocks = len(cfg.widths)
    return ModelParams(
        conv_w=[loaded[f"conv{i + 1}.weight"] for i in range(blocks)],
        conv_b=[loaded[f"conv{i + 1}.bias"] for i in range(blocks)],
        fc_w=loaded["fc.weight"],
        fc_b=loaded["fc.bias"],
    )


def model_metadata(cfg: CnnConfig) -> dict[str, str]:
    return {
        "widths": ",".join(str(w) for w in cfg.widths),
        "kernel": str(cfg.kernel),
        "classes": str(cfg.classes),
        "in_channels": str(cfg.in_channels),
        "input_size": str(cfg.input_size),
        "insertion_points": ",".join(sorted(cfg.insertion_points)),
    }


def config_from_metadata(meta: dict[str, str]) -> CnnConfig:
    try:
        return CnnConfig(
            widths=tuple(int(w) for w in meta["widths"].split(",")),
            kernel=int(meta["kernel"]),
            classes=int(meta["classes"]),
            in_channels=int(meta["in_channels"]),
            input_size=int(meta["input_size"]),
            insertion_points=frozenset(p for p in meta["insertion_points"].split(",") if p),
        )
    except KeyError as exc:
        raise ValueError(f"checkpoint metadata is missing {exc}") from None
