"""Reconstruction-based anomaly scoring and pixel-wise defect masks.

A trained model maps an image ``x`` to a reconstruction ``G(E(x))``. The
image score ``A_R`` is the mean squared pixel residual, the feature score
``A_D`` the mean squared residual of critic features, and the total score
is ``A = A_R + k * A_D``. Thresholding ``|x - G(E(x))|`` at ``c``
(inclusive) gives the binary defect mask.

Two inference protocols are supported: ``whole`` (the cell is resized to
the model input and processed in one pass) and ``patch`` (the cell is
resized to ``grid * size`` and every ``size`` x ``size`` tile is processed
separately; the cell is defective as soon as one tile is).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .dataset_core import assemble_patches, extract_patches, normalize, resize_image
from .errors import ConfigError, DataError, ShapeError
from .model_zoo import Checkpoint, load_checkpoint

MODES = ("whole", "patch")


def _to_tensor(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))[None, None]


class ReconstructionModel:
    """Common interface of the scored models.

    ``run`` takes a (B, 1, S, S) batch and returns the reconstruction plus
    per-sample image and feature residual terms. ``forward_passes`` counts
    invocations so the inference protocols can be audited.
    """

    size: int
    k: float = 1.0
    name: str = "model"

    def __init__(self) -> None:
        self.forward_passes = 0

    def _run(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def run(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if x.shape[-2:] != (self.size, self.size):
            raise ShapeError(f"{self.name} expects {self.size}x{self.size} input, got {tuple(x.shape[-2:])}")
        self.forward_passes += 1
        with torch.no_grad():
            return self._run(x)


class FAnoGANModel(ReconstructionModel):
    def __init__(self, encoder: nn.Module, generator: nn.Module, discriminator: nn.Module, k: float = 1.0):
        super().__init__()
        self.encoder = encoder.eval()
        self.generator = generator.eval()
        self.discriminator = discriminator.eval()
        self.k = float(k)
        self.size = generator.spec.size
        self.name = f"fanogan{self.size}"

    def _run(self, x):
        recon = self.generator(self.encoder(x))
        image = ((x - recon) ** 2).flatten(1).mean(1)
        feature = ((self.discriminator.features(x) - self.discriminator.features(recon)) ** 2).flatten(1).mean(1)
        return recon, image, feature


class AutoencoderModel(ReconstructionModel):
    """Autoencoder baseline; the feature term is identically zero."""

    def __init__(self, autoencoder: nn.Module):
        super().__init__()
        self.autoencoder = autoencoder.eval()
        self.size = autoencoder.spec.size
        self.k = 0.0
        self.name = autoencoder.spec.kind

    def _run(self, x):
        recon = self.autoencoder(x)
        image = ((x - recon) ** 2).flatten(1).mean(1)
        return recon, image, torch.zeros_like(image)


def model_from_checkpoint(ckpt: Checkpoint | str) -> ReconstructionModel:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    nets = ckpt.networks
    if "autoencoder" in nets:
        return AutoencoderModel(nets["autoencoder"])
    if "encoder" not in nets:
        raise ConfigError(f"{ckpt.path}: not a phase-2 anomaly checkpoint")
    return FAnoGANModel(nets["encoder"], nets["generator"], nets["discriminator"], ckpt.meta.get("k", 1.0))


# --------------------------------------------------------------------------
# results and thresholds


@dataclass
class AnomalyResult:
    score_total: float
    score_image: float
    score_feature: float
    residual_map: np.ndarray | None = None
    mask: np.ndarray | None = None
    elapsed_seconds: float = 0.0
    mode: str = "whole"
    k: float = 1.0
    defective: bool | None = None
    patch_scores: np.ndarray | None = None
    forward_passes: int = 1
    pass_seconds: list[float] | None = None

    @property
    def mask_pixels(self) -> int:
        return int(self.mask.sum()) if self.mask is not None else 0


@dataclass(frozen=True)
class Threshold:
    """Pixel threshold ``c`` and optional image-score threshold."""

    c: float
    quantile: float | None = None
    validation_set: str | None = None
    score_threshold: float | None = None

    def __post_init__(self) -> None:
        if not self.c >= 0:
            raise ConfigError(f"threshold c must be >= 0, got {self.c}")


# --------------------------------------------------------------------------
# elementary operations


def reconstruct(x: np.ndarray, encoder: Callable, generator: Callable) -> np.ndarray:
    """``G(E(x))`` for one normalized 2-D image."""
    if np.ndim(x) != 2:
        raise ShapeError(f"expected a 2-D image, got shape {np.shape(x)}")
    spec = getattr(encoder, "spec", None)
    if spec is not None and tuple(np.shape(x)) != tuple(spec.input_shape[-2:]):
        raise ShapeError(f"image {np.shape(x)} does not match encoder input {spec.input_shape[-2:]}")
    with torch.no_grad():
        out = generator(encoder(_to_tensor(x)))
    return out.reshape(np.shape(x)).numpy()


def residual_map(x: np.ndarray, recon: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    recon = np.asarray(recon)
    if x.shape != recon.shape:
        raise ShapeError(f"residual operands differ: {x.shape} vs {recon.shape}")
    return np.abs(x - recon)


def binarize(rmap: np.ndarray, c: float | Threshold) -> np.ndarray:
    """1 where ``rmap >= c`` (inclusive), else 0."""
    if isinstance(c, Threshold):
        c = c.c
    if not c >= 0:
        raise ConfigError(f"threshold c must be >= 0, got {c}")
    return (np.asarray(rmap) >= c).astype(np.uint8)


def _result(image: float, feature: float, k: float, **kw) -> AnomalyResult:
    return AnomalyResult(score_total=image + k * feature, score_image=image, score_feature=feature, k=k, **kw)


def anomaly_score(x: np.ndarray, model: ReconstructionModel, k: float | None = None) -> AnomalyResult:
    """Scores and residual map for one normalized image at model resolution."""
    if np.ndim(x) != 2:
        raise ShapeError(f"expected a 2-D image, got shape {np.shape(x)}")
    k = model.k if k is None else float(k)
    recon, image, feature = model.run(_to_tensor(x))
    rmap = residual_map(np.asarray(x, dtype=np.float32), recon[0, 0].numpy())
    return _result(float(image[0]), float(feature[0]), k, residual_map=rmap)


def calibrate_threshold(
    validation: Iterable[AnomalyResult | np.ndarray],
    quantile: float = 0.995,
    validation_set: str | None = None,
) -> Threshold:
    """Quantile of pooled residual values over defect-free validation images.

    When the inputs are :class:`AnomalyResult` objects the same quantile of
    their total scores becomes ``score_threshold``.
    """
    if not 0.0 < quantile < 1.0:
        raise ConfigError(f"quantile must lie in the open interval (0, 1), got {quantile}")
    maps, scores = [], []
    for item in validation:
        if isinstance(item, AnomalyResult):
            if item.residual_map is None:
                raise DataError("validation result carries no residual map")
            maps.append(np.ravel(item.residual_map))
            scores.append(item.score_total)
        else:
            maps.append(np.ravel(np.asarray(item)))
    if not maps:
        raise DataError("validation set is empty")
    c = float(np.quantile(np.concatenate(maps).astype(np.float64), quantile))
    score_t = float(np.quantile(np.asarray(scores, dtype=np.float64), quantile)) if scores else None
    return Threshold(c=max(c, 0.0), quantile=quantile, validation_set=validation_set, score_threshold=score_t)


# --------------------------------------------------------------------------
# cell inference


def _prepare(image: np.ndarray) -> np.ndarray:
    if np.ndim(image) != 2:
        raise ShapeError(f"expected a 2-D cell image, got shape {np.shape(image)}")
    return normalize(image) if np.asarray(image).dtype == np.uint8 else np.asarray(image, dtype=np.float32)


def infer_cell(
    image: np.ndarray,
    model: ReconstructionModel,
    mode: str = "whole",
    c: float | Threshold | None = None,
    score_threshold: float | None = None,
    grid: int = 16,
) -> AnomalyResult:
    """Score one cell under the whole-image or patch protocol.

    ``image`` is an 8-bit cell (normalized here) or an already normalized
    float image. In patch mode each tile is scored in its own forward pass;
    the cell score is that of the worst tile, so thresholding it flags the
    cell exactly when at least one tile is flagged. ``elapsed_seconds``
    covers model execution only.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if isinstance(c, Threshold):
        if score_threshold is None:
            score_threshold = c.score_threshold
        c = c.c
    x = _prepare(image)
    k = model.k
    before = model.forward_passes
    if mode == "whole":
        x = resize_image(x, model.size)
        t0 = time.perf_counter()
        recon, img, feat = model.run(_to_tensor(x))
        elapsed = time.perf_counter() - t0
        rmap = residual_map(x, recon[0, 0].numpy())
        res = _result(float(img[0]), float(feat[0]), k, residual_map=rmap, mode=mode)
    else:
        patches = extract_patches(x, model.size, grid)
        recons, imgs, feats, times = [], [], [], []
        for p in patches:
            t0 = time.perf_counter()
            recon, img, feat = model.run(_to_tensor(p))
            times.append(time.perf_counter() - t0)
            recons.append(recon[0, 0].numpy())
            imgs.append(float(img[0]))
            feats.append(float(feat[0]))
        totals = np.array([i + k * f for i, f in zip(imgs, feats)])
        worst = int(np.argmax(totals))
        rmap = residual_map(assemble_patches(np.stack(patches), grid), assemble_patches(np.stack(recons), grid))
        res = _result(imgs[worst], feats[worst], k, residual_map=rmap, mode=mode, patch_scores=totals)
        res.pass_seconds = times
        elapsed = float(sum(times))
    res.elapsed_seconds = elapsed
    res.forward_passes = model.forward_passes - before
    if c is not None:
        res.mask = binarize(res.residual_map, c)
    if score_threshold is not None:
        if mode == "patch":
            res.defective = bool((res.patch_scores >= score_threshold).any())
        else:
            res.defective = bool(res.score_total >= score_threshold)
    return res


def score_cells(
    images: Sequence[np.ndarray], model: ReconstructionModel, mode: str = "whole", **kw
) -> list[AnomalyResult]:
    return [infer_cell(im, model, mode, **kw) for im in images]
