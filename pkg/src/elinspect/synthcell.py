"""Procedural electroluminescence-like monocrystalline cell images.

A cell is a bright, slightly vignetted background crossed by dark vertical
busbar bands and faint horizontal finger lines, modulated by smooth
multiplicative grain noise. Defects are injected by multiplicative
darkening of a class-specific region; the returned mask is exactly the set
of pixels whose 8-bit value changed.

All randomness comes from ``numpy.random.PCG64`` streams derived from
``(master_seed, sample_index)`` so datasets regenerate bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .dataset_core import DatasetManifest, DefectClass, ImageSample, Provenance, _largest_remainder
from .errors import ConfigError, DomainError

GENERATOR = "numpy.random.PCG64"
SYNTHCELL_VERSION = "1"

REFERENCE_CLASS_MIX = {
    DefectClass.CRACK: 18,
    DefectClass.MICROCRACK: 240,
    DefectClass.FINGER_INTERRUPTION: 117,
}


@dataclass(frozen=True)
class CellParams:
    size: int = 64
    busbar_count: int = 2
    finger_spacing: int = 4
    grain_noise_scale: float = 0.04
    base_intensity: float = 0.75
    seed: int = 0

    def __post_init__(self) -> None:
        if self.size < 64:
            raise ConfigError(f"cell size must be >= 64, got {self.size}")
        if self.busbar_count < 0:
            raise ConfigError("busbar_count must be >= 0")
        if self.finger_spacing < 2:
            raise ConfigError("finger_spacing must be >= 2")
        if not 0.0 < self.base_intensity < 1.0:
            raise ConfigError("base_intensity must lie in (0, 1)")
        if self.grain_noise_scale < 0:
            raise ConfigError("grain_noise_scale must be >= 0")

    @property
    def busbar_width(self) -> int:
        return max(2, self.size // 32)

    def busbar_centers(self) -> list[int]:
        n = self.busbar_count
        return [int(round((i + 1) * self.size / (n + 1))) for i in range(n)]

    def finger_rows(self) -> np.ndarray:
        offset = self.finger_spacing // 2
        return np.arange(offset, self.size, self.finger_spacing)


@dataclass(frozen=True)
class DefectSpec:
    defect_class: DefectClass
    intensity_drop: float = 0.6
    geometry_seed: int = 0

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "defect_class", DefectClass(self.defect_class))
        except ValueError:
            raise DomainError(f"unknown defect class {self.defect_class!r}") from None
        if not 0.0 < self.intensity_drop <= 1.0:
            raise ConfigError(f"intensity_drop must lie in (0, 1], got {self.intensity_drop}")


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


def cell_template(params: CellParams) -> np.ndarray:
    """Noise-free cell intensity in ``(0, 1)`` as float64."""
    s = params.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    c = (s - 1) / 2.0
    r2 = ((yy - c) ** 2 + (xx - c) ** 2) / (c * c)
    img = params.base_intensity * (1.0 - 0.08 * r2)
    img[params.finger_rows(), :] *= 0.82
    half = params.busbar_width / 2.0
    for bx in params.busbar_centers():
        cols = np.abs(np.arange(s) + 0.5 - bx) <= half
        img[:, cols] *= 0.45
    return img


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_cell(params: CellParams, sample_id: str | None = None) -> ImageSample:
    """Render a defect-free cell; identical ``params`` give identical pixels."""
    img = cell_template(params)
    if params.grain_noise_scale > 0:
        rng = _rng(params.seed)
        grain = ndimage.gaussian_filter(rng.standard_normal(img.shape), sigma=1.5, mode="wrap")
        grain /= grain.std()
        img = img * (1.0 + params.grain_noise_scale * grain)
    image = _quantize(img)
    return ImageSample(
        id=sample_id or f"cell_seed{params.seed}",
        image=image,
        mask=np.zeros_like(image),
        classes=frozenset(),
        provenance=Provenance.SYNTHETIC,
    )


# --------------------------------------------------------------------------
# defect geometry


def _draw(size: int, painter) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    painter(ImageDraw.Draw(canvas))
    return np.asarray(canvas) > 0


def _curve(rng: np.random.Generator, size: int, length: float) -> list[tuple[float, float]]:
    """Densely sampled quadratic Bezier of roughly ``length`` pixels."""
    margin = size * 0.1
    start = rng.uniform(margin, size - margin, 2)
    angle = rng.uniform(0, 2 * np.pi)
    end = start + length * np.array([np.cos(angle), np.sin(angle)])
    end = np.clip(end, 1, size - 2)
    mid = (start + end) / 2 + rng.normal(0, length * 0.2, 2)
    t = np.linspace(0, 1, max(8, int(length * 2)))[:, None]
    pts = (1 - t) ** 2 * start + 2 * (1 - t) * t * mid + t**2 * end
    return [tuple(p) for p in pts]


def _crack_region(rng, size: int, params: CellParams) -> np.ndarray:
    length = rng.uniform(0.5, 0.75) * size
    width = max(3, size // 16)
    pts = _curve(rng, size, length)
    return _draw(size, lambda d: d.line(pts, fill=255, width=width, joint="curve"))


def _microcrack_region(rng, size: int, params: CellParams) -> np.ndarray:
    # Same draw order as a crack, so equal seeds give a shorter, thinner trace.
    length = rng.uniform(0.5, 0.75) * size * 0.4
    width = max(2, size // 32)
    pts = _curve(rng, size, length)
    region = _draw(size, lambda d: d.line(pts, fill=255, width=width, joint="curve"))
    labels, n = ndimage.label(region, structure=np.ones((3, 3)))
    if n > 1:
        sizes = ndimage.sum(region, labels, range(1, n + 1))
        region = labels == (int(np.argmax(sizes)) + 1)
    return region


def _finger_region(rng, size: int, params: CellParams) -> np.ndarray:
    n_fingers = int(rng.integers(3, 6))
    rows = params.finger_rows()
    first = int(rng.integers(0, max(1, len(rows) - n_fingers)))
    sp = params.finger_spacing
    y0 = max(0, int(rows[first]) - sp // 2)
    y1 = min(size, int(rows[min(first + n_fingers - 1, len(rows) - 1)]) + (sp + 1) // 2)
    gap = int(rng.uniform(0.12, 0.2) * size)
    x0 = int(rng.integers(1, size - gap - 1))
    region = np.zeros((size, size), dtype=bool)
    region[y0:y1, x0 : x0 + gap] = True
    return region


def _break_region(rng, size: int, params: CellParams) -> np.ndarray:
    a = rng.uniform(0.2, 0.35) * size
    b = rng.uniform(0.2, 0.35) * size
    corner = int(rng.integers(0, 4))
    e = size - 1
    tri = {
        0: [(0, 0), (a, 0), (0, b)],
        1: [(e, 0), (e - a, 0), (e, b)],
        2: [(0, e), (a, e), (0, e - b)],
        3: [(e, e), (e - a, e), (e, e - b)],
    }[corner]
    return _draw(size, lambda d: d.polygon(tri, fill=255))


def _soldering_region(rng, size: int, params: CellParams) -> np.ndarray:
    centers = params.busbar_centers() or [size // 2]
    bx = centers[int(rng.integers(0, len(centers)))]
    cy = rng.uniform(0.15, 0.85) * size
    rx = rng.uniform(0.04, 0.08) * size + params.busbar_width
    ry = rng.uniform(0.06, 0.12) * size
    cx = bx + rng.uniform(-0.5, 0.5) * params.busbar_width
    return _draw(size, lambda d: d.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255))


_REGIONS = {
    DefectClass.CRACK: _crack_region,
    DefectClass.MICROCRACK: _microcrack_region,
    DefectClass.FINGER_INTERRUPTION: _finger_region,
    DefectClass.BREAK: _break_region,
    DefectClass.BAD_SOLDERING: _soldering_region,
}


def defect_region(spec: DefectSpec, size: int, params: CellParams | None = None) -> np.ndarray:
    """Boolean footprint a defect would darken on a ``size`` x ``size`` cell."""
    params = params or CellParams(size=size)
    if params.size != size:
        params = replace(params, size=size)
    rng = _rng(spec.geometry_seed)
    return _REGIONS[spec.defect_class](rng, size, params)


def inject_defect(sample: ImageSample, spec: DefectSpec, params: CellParams | None = None) -> ImageSample:
    """Darken a class-specific region of ``sample`` and record it in the mask.

    ``params`` supplies the cell layout (finger pitch, busbar positions);
    defaults are used when omitted. Defects compose: the previous mask and
    classes are kept.
    """
    if not isinstance(spec, DefectSpec):
        raise DomainError(f"expected a DefectSpec, got {type(spec).__name__}")
    h, w = sample.image.shape
    if h != w:
        raise ConfigError("synthetic cells are square")
    region = defect_region(spec, h, params)
    before = sample.image
    after = before.copy()
    darkened = np.rint(before[region].astype(np.float64) * (1.0 - spec.intensity_drop))
    after[region] = darkened.astype(np.uint8)
    changed = after != before
    if not changed.any():
        raise DomainError(f"{spec.defect_class.value} injection changed no pixel")
    old = sample.mask if sample.mask is not None else np.zeros_like(before)
    return ImageSample(
        id=sample.id,
        image=after,
        mask=(old.astype(bool) | changed).astype(np.uint8),
        classes=sample.classes | {spec.defect_class},
        provenance=sample.provenance,
    )


# --------------------------------------------------------------------------
# benchmark


@dataclass
class BenchmarkConfig:
    size: int = 64
    total_defect_free: int = 400
    total_defective: int = 100
    class_mix: dict[DefectClass, int] = field(default_factory=lambda: dict(REFERENCE_CLASS_MIX))
    intensity_drop: tuple[float, float] = (0.5, 0.7)
    busbar_count: int = 2
    finger_spacing: int = 4
    grain_noise_scale: float = 0.04
    base_intensity_range: tuple[float, float] = (0.68, 0.82)
    master_seed: int = 0

    def __post_init__(self) -> None:
        self.class_mix = {DefectClass(k): int(v) for k, v in self.class_mix.items()}
        self.intensity_drop = tuple(self.intensity_drop)
        self.base_intensity_range = tuple(self.base_intensity_range)
        if self.total_defect_free < 0 or self.total_defective < 0:
            raise ConfigError("sample counts must be non-negative")
        if self.total_defect_free + self.total_defective == 0:
            raise ConfigError("benchmark must contain at least one sample")
        if self.total_defective and not any(self.class_mix.values()):
            raise ConfigError("class_mix is empty but defective samples were requested")

    def class_counts(self) -> dict[DefectClass, int]:
        alloc = _largest_remainder(self.total_defective, {k.value: v for k, v in self.class_mix.items()})
        return {DefectClass(k): v for k, v in alloc.items()}


def _cell_params(cfg: BenchmarkConfig, rng: np.random.Generator) -> CellParams:
    lo, hi = cfg.base_intensity_range
    return CellParams(
        size=cfg.size,
        busbar_count=cfg.busbar_count,
        finger_spacing=cfg.finger_spacing,
        grain_noise_scale=cfg.grain_noise_scale,
        base_intensity=float(rng.uniform(lo, hi)),
        seed=int(rng.integers(0, 2**63 - 1)),
    )


def make_sample(cfg: BenchmarkConfig, index: int, defect_class: DefectClass | None) -> ImageSample:
    """Sample ``index`` of the benchmark; depends only on (master_seed, index)."""
    rng = _rng(cfg.master_seed, index)
    params = _cell_params(cfg, rng)
    sample = generate_cell(params, sample_id=f"cell_{index:05d}")
    if defect_class is None:
        return sample
    lo, hi = cfg.intensity_drop
    spec = DefectSpec(
        defect_class=defect_class,
        intensity_drop=float(rng.uniform(lo, hi)),
        geometry_seed=int(rng.integers(0, 2**63 - 1)),
    )
    return inject_defect(sample, spec, params)


def build_benchmark(config: BenchmarkConfig) -> DatasetManifest:
    """Defect-free cells first, then defective cells grouped by class."""
    plan: list[DefectClass | None] = [None] * config.total_defect_free
    for cls, n in config.class_counts().items():
        plan.extend([cls] * n)
    samples = [make_sample(config, i, cls) for i, cls in enumerate(plan)]
    return DatasetManifest(samples=samples, seed=config.master_seed)
