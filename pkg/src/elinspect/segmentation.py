"""Supervised U-Net segmentation trained with the dice loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .autolabel import check_no_leakage
from .dataset_core import DatasetManifest, ImageSample, Provenance, normalize, resize_image, resize_mask
from .errors import ConfigError, DataError, DomainError, NumericError, ShapeError
from .gan_training import TrainLog, TrainResult, _abort, _persist, _scalar
from .model_zoo import Checkpoint, build_model, instantiate, load_checkpoint

LABEL_SOURCES = ("manual", "automatic")


@dataclass
class DiceConfig:
    smoothing_epsilon: float = 1.0
    iterations: int = 1000
    lr: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    label_source: str = "manual"
    size: int = 64
    width: int = 8

    def __post_init__(self) -> None:
        if not self.smoothing_epsilon >= 0:
            raise ConfigError(f"smoothing_epsilon must be >= 0, got {self.smoothing_epsilon}")
        if self.label_source not in LABEL_SOURCES:
            raise ConfigError(f"label_source must be one of {LABEL_SOURCES}")
        if self.iterations < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("iterations >= 0, batch_size >= 1 and lr > 0 required")


def dice_loss(p: torch.Tensor, g: torch.Tensor, epsilon: float = 1.0) -> torch.Tensor:
    """``-(2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`` averaged over the batch.

    Tensors of shape (B, ...) are reduced per sample; 1-D or 2-D inputs are
    treated as a single sample. Result lies in [-1, 0].
    """
    p = torch.as_tensor(p)
    g = torch.as_tensor(g, dtype=p.dtype)
    if p.shape != g.shape:
        raise ShapeError(f"dice operands differ: {tuple(p.shape)} vs {tuple(g.shape)}")
    if epsilon < 0:
        raise DomainError(f"epsilon must be >= 0, got {epsilon}")
    with torch.no_grad():
        if p.numel() and (p.min() < 0 or p.max() > 1 or not torch.isfinite(p).all()):
            raise DomainError("probabilities must lie in [0, 1]")
        if not ((g == 0) | (g == 1)).all():
            raise DomainError("ground truth must be binary")
    if p.dim() <= 2:
        p, g = p.reshape(1, -1), g.reshape(1, -1)
    else:
        p, g = p.flatten(1), g.flatten(1)
    den = p.sum(1) + g.sum(1) + epsilon
    if (den == 0).any():
        raise DomainError("dice is undefined for empty p and g with epsilon = 0")
    return (-(2 * (p * g).sum(1) + epsilon) / den).mean()


def _check_labels(samples: Sequence[ImageSample], label_source: str) -> None:
    missing = [s.id for s in samples if s.mask is None]
    if missing:
        raise DataError(f"samples without masks: {missing}")
    want_auto = label_source == "automatic"
    wrong = [s.id for s in samples if (s.provenance is Provenance.AUTOLABELED) != want_auto]
    if wrong:
        kind = "auto-label" if want_auto else "manual"
        raise DataError(f"samples without {kind} masks: {wrong}")


def train_unet(
    data: DatasetManifest | Sequence[ImageSample], config: DiceConfig, out_dir: str | Path | None = None
) -> TrainResult:
    """Train a U-Net on the masks of ``data``; the checkpoint records ``label_source``."""
    samples = list(data.samples if isinstance(data, DatasetManifest) else data)
    if not samples:
        raise DataError("training set is empty")
    _check_labels(samples, config.label_source)
    if config.label_source == "automatic":
        check_no_leakage((s.mask for s in samples), (s.ground_truth for s in samples))
    x_all = torch.from_numpy(np.stack([resize_image(normalize(s.image), config.size) for s in samples])).unsqueeze(1)
    y_all = torch.from_numpy(np.stack([resize_mask(s.mask, config.size) for s in samples]).astype(np.float32)).unsqueeze(1)
    torch.manual_seed(config.seed)
    net = instantiate(build_model("unet", config.size, width=config.width), config.seed)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    log = TrainLog(("dice_loss",))
    meta = {"phase": 3, "iterations": 0, "seed": config.seed, "kind": "unet", "size": config.size,
            "label_source": config.label_source, "smoothing_epsilon": config.smoothing_epsilon}
    t0 = time.perf_counter()
    for it in range(1, config.iterations + 1):
        idx = torch.randint(0, len(samples), (config.batch_size,), generator=gen)
        loss = dice_loss(net(x_all[idx]), y_all[idx], config.smoothing_epsilon)
        if not torch.isfinite(loss):
            _abort(TrainResult({"unet": net.eval()}, meta, log), out_dir, config,
                   NumericError("non-finite dice loss", it))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        log.append(it, time.perf_counter() - t0, dice_loss=_scalar(loss))
        meta["iterations"] = it
    net.eval()
    return _persist(TrainResult({"unet": net}, meta, log), out_dir, config)


def _unet(model: nn.Module | Checkpoint | TrainResult | str | Path) -> nn.Module:
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)
    if isinstance(model, (Checkpoint, TrainResult)):
        if "unet" not in model.networks:
            raise ConfigError("not a U-Net checkpoint")
        model = model.networks["unet"]
    return model


def segment(
    image: np.ndarray, unet: nn.Module | Checkpoint | TrainResult | str | Path, binarize_at: float = 0.5
) -> tuple[np.ndarray, np.ndarray]:
    """Probability map and ``map >= binarize_at`` mask, both at input size."""
    net = _unet(unet)
    size = net.spec.size
    if np.ndim(image) != 2 or np.shape(image) != (size, size):
        raise ShapeError(f"U-Net expects a {size}x{size} image, got shape {np.shape(image)}")
    x = normalize(image) if np.asarray(image).dtype == np.uint8 else np.asarray(image, dtype=np.float32)
    was = net.training
    net.eval()
    with torch.no_grad():
        prob = net(torch.from_numpy(np.ascontiguousarray(x))[None, None])[0, 0].numpy()
    net.train(was)
    return prob, (prob >= binarize_at).astype(np.uint8)


def segment_samples(
    samples: Sequence[ImageSample], unet, binarize_at: float = 0.5
) -> dict[str, np.ndarray]:
    """Predicted masks keyed by sample id; images are resized to the model input."""
    net = _unet(unet)
    out = {}
    for s in samples:
        img = s.image if s.image.shape == (net.spec.size,) * 2 else resize_image(normalize(s.image), net.spec.size)
        out[s.id] = segment(img, net, binarize_at)[1]
    return out
