"""Network architectures, shape contracts and checkpoints.

Every network is described by a :class:`ModelSpec` whose ``layer_plan``
lists the named top-level blocks and the per-sample output shape each block
must produce. :func:`instantiate` turns a spec into a ``torch.nn.Module``
whose blocks carry the same names, so :func:`forward_shape_check` can verify
the plan block by block.

Generator / discriminator / encoder follow a DCGAN layout: the generator
upsamples a 4x4 seed by factors of two up to the image size, the
discriminator (no normalization layers, as required by the gradient
penalty) mirrors it, and the encoder mirrors the discriminator with a
``latent_dim`` head. The discriminator's flattened last convolutional
block is the feature tap ``f(x)``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import torch
from safetensors.torch import load_file, save_file
from torch import nn

from .errors import ConfigError, ContractError, IntegrityError

KINDS = ("generator", "discriminator", "encoder", "autoencoder64", "autoencoder256", "unet")
GAN_SIZES = (64, 256)
DEFAULT_WIDTH = {"generator": 16, "discriminator": 16, "encoder": 16, "unet": 8}


@dataclass(frozen=True)
class LayerPlan:
    name: str
    description: str
    out_shape: tuple[int, ...]


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    size: int
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    layer_plan: tuple[LayerPlan, ...]
    latent_dim: int | None = None
    width: int | None = None
    feature_tap: int | None = None
    feature_dim: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_plan"] = [asdict(p) for p in self.layer_plan]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["output_shape"] = tuple(d["output_shape"])
        d["layer_plan"] = tuple(
            LayerPlan(p["name"], p["description"], tuple(p["out_shape"])) for p in d["layer_plan"]
        )
        return cls(**d)


def _stages(size: int) -> int:
    n = int(math.log2(size // 4))
    if 4 * 2**n != size:
        raise ConfigError(f"size {size} is not 4 * 2**k")
    return n


def _channels(width: int, stages: int) -> list[int]:
    """Channel count per resolution level, finest first, capped at 8*width."""
    return [min(width * 2**i, width * 8) for i in range(stages)]


def build_model(
    kind: str, size: int = 64, latent_dim: int = 128, width: int | None = None, feature_tap: int | None = None
) -> ModelSpec:
    """Declarative architecture for ``kind`` at the given input size."""
    if kind not in KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    if kind == "autoencoder64":
        return _ae64_spec(size)
    if kind == "autoencoder256":
        return _ae256_spec(size)
    if kind == "unet":
        return _unet_spec(size, width or DEFAULT_WIDTH["unet"])
    if size not in GAN_SIZES:
        raise ConfigError(f"unsupported {kind} size {size}; expected one of {GAN_SIZES}")
    width = width or DEFAULT_WIDTH[kind]
    n = _stages(size)
    ch = _channels(width, n)
    plan: list[LayerPlan] = []
    if kind == "generator":
        top = ch[-1]
        plan.append(LayerPlan("project", f"linear {latent_dim}->{top}x4x4, batchnorm, relu", (top, 4, 4)))
        res = 4
        for i in range(n - 1, -1, -1):
            res *= 2
            out = ch[i - 1] if i > 0 else ch[0]
            plan.append(LayerPlan(f"up{n - i}", f"upsample x2, conv3x3 ->{out}, batchnorm, relu", (out, res, res)))
        plan.append(LayerPlan("to_image", "conv3x3 ->1, tanh", (1, size, size)))
        return ModelSpec(kind, size, (latent_dim,), (1, size, size), tuple(plan), latent_dim, width)

    res = size
    prev = 1
    for i in range(n):
        res //= 2
        plan.append(LayerPlan(f"down{i + 1}", f"conv4x4/2 {prev}->{ch[i]}, leaky_relu", (ch[i], res, res)))
        prev = ch[i]
    feat = prev * 4 * 4
    plan.append(LayerPlan("flatten", "flatten", (feat,)))
    if kind == "discriminator":
        plan.append(LayerPlan("critic", f"linear {feat}->1", (1,)))
        tap = len(plan) - 2 if feature_tap is None else feature_tap
        if not 0 <= tap < len(plan) - 1:
            raise ConfigError(f"feature tap {tap} must index a pre-critic block")
        fdim = math.prod(plan[tap].out_shape)
        return ModelSpec(kind, size, (1, size, size), (1,), tuple(plan), None, width, tap, fdim)
    plan.append(LayerPlan("to_latent", f"linear {feat}->{latent_dim}", (latent_dim,)))
    return ModelSpec(kind, size, (1, size, size), (latent_dim,), tuple(plan), latent_dim, width)


def _ae_spec(kind: str, size: int, filters: list[int], dropout: float) -> ModelSpec:
    plan: list[LayerPlan] = []
    res, prev = size, 1
    for i, f in enumerate(filters):
        res //= 2
        plan.append(LayerPlan(f"enc{i + 1}", f"conv3x3/2 {prev}->{f}, relu", (f, res, res)))
        prev = f
    flat = prev * res * res
    drop = f", dropout {dropout}" if dropout else ""
    plan.append(LayerPlan("fc1", f"flatten, linear {flat}->128, relu{drop}", (128,)))
    for i in (2, 3, 4):
        plan.append(LayerPlan(f"fc{i}", f"linear 128->128, relu{drop}", (128,)))
    plan.append(LayerPlan("fc_out", f"linear 128->{flat}, relu, reshape", (prev, res, res)))
    rev = filters[::-1]
    for i, f in enumerate(rev):
        res *= 2
        out = rev[i + 1] if i + 1 < len(rev) else 1
        act = "relu" if out != 1 else "tanh"
        plan.append(LayerPlan(f"dec{i + 1}", f"convT4x4/2 {f}->{out}, {act}", (out, res, res)))
    return ModelSpec(kind, size, (1, size, size), (1, size, size), tuple(plan))


def _ae64_spec(size: int) -> ModelSpec:
    if size != 64:
        raise ConfigError("autoencoder64 takes 64x64 inputs")
    return _ae_spec("autoencoder64", 64, [64, 32], 0.0)


def _ae256_spec(size: int) -> ModelSpec:
    if size != 256:
        raise ConfigError("autoencoder256 takes 256x256 inputs")
    return _ae_spec("autoencoder256", 256, [8, 16, 32, 64], 0.25)


def _unet_spec(size: int, width: int) -> ModelSpec:
    if size % 16 or size < 16:
        raise ConfigError(f"unet input size must be a multiple of 16, got {size}")
    plan: list[LayerPlan] = []
    res, prev = size, 1
    chans = [width * 2**i for i in range(5)]
    for i in range(4):
        plan.append(
            LayerPlan(f"enc{i + 1}", f"2x(conv3x3 ->{chans[i]}, relu), maxpool/2, batchnorm", (chans[i], res // 2, res // 2))
        )
        res //= 2
    plan.append(LayerPlan("bottleneck", f"2x(conv3x3 ->{chans[4]}, relu)", (chans[4], res, res)))
    for i in range(4):
        res *= 2
        c = chans[3 - i]
        plan.append(LayerPlan(f"dec{i + 1}", f"upsample x2, concat skip, 2x(conv3x3 ->{c}, relu)", (c, res, res)))
    plan.append(LayerPlan("head", "conv1x1 ->1, sigmoid", (1, size, size)))
    return ModelSpec("unet", size, (1, size, size), (1, size, size), tuple(plan), width=width)


# --------------------------------------------------------------------------
# modules


class Generator(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        blocks = nn.ModuleDict()
        top = spec.layer_plan[0].out_shape
        blocks["project"] = nn.Sequential(
            nn.Linear(spec.latent_dim, math.prod(top)), nn.Unflatten(1, top), nn.BatchNorm2d(top[0]), nn.ReLU()
        )
        prev = top[0]
        for p in spec.layer_plan[1:-1]:
            out = p.out_shape[0]
            blocks[p.name] = nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(prev, out, 3, padding=1),
                nn.BatchNorm2d(out),
                nn.ReLU(),
            )
            prev = out
        blocks["to_image"] = nn.Sequential(nn.Conv2d(prev, 1, 3, padding=1), nn.Tanh())
        self.blocks = blocks

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        for block in self.blocks.values():
            z = block(z)
        return z


class _ConvStack(nn.Module):
    def _build_stack(self, spec: ModelSpec) -> nn.ModuleDict:
        blocks = nn.ModuleDict()
        prev = 1
        for p in spec.layer_plan:
            if not p.name.startswith("down"):
                break
            blocks[p.name] = nn.Sequential(nn.Conv2d(prev, p.out_shape[0], 4, 2, 1), nn.LeakyReLU(0.2))
            prev = p.out_shape[0]
        blocks["flatten"] = nn.Flatten()
        return blocks


class Discriminator(_ConvStack):
    """WGAN critic; :meth:`features` returns the tapped block, flattened."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.blocks = self._build_stack(spec)
        self.blocks["critic"] = nn.Linear(math.prod(spec.layer_plan[-2].out_shape), 1)

    def forward_with_features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feat = None
        for i, block in enumerate(self.blocks.values()):
            x = block(x)
            if i == self.spec.feature_tap:
                feat = x.flatten(1)
        return x, feat

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_features(x)[0]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        for i, block in enumerate(self.blocks.values()):
            x = block(x)
            if i == self.spec.feature_tap:
                return x.flatten(1)
        raise ContractError("feature tap index beyond the last block")


class Encoder(_ConvStack):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.blocks = self._build_stack(spec)
        self.blocks["to_latent"] = nn.Linear(math.prod(spec.layer_plan[-2].out_shape), spec.latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks.values():
            x = block(x)
        return x


class Autoencoder(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        drop = 0.25 if spec.kind == "autoencoder256" else 0.0
        blocks = nn.ModuleDict()
        prev = 1
        plan = spec.layer_plan
        for p in plan:
            if p.name.startswith("enc"):
                blocks[p.name] = nn.Sequential(nn.Conv2d(prev, p.out_shape[0], 3, 2, 1), nn.ReLU())
                prev_shape = p.out_shape
                prev = p.out_shape[0]
            elif p.name == "fc1":
                layers = [nn.Flatten(), nn.Linear(math.prod(prev_shape), 128), nn.ReLU()]
                blocks[p.name] = nn.Sequential(*layers, *([nn.Dropout(drop)] if drop else []))
            elif p.name.startswith("fc") and p.name != "fc_out":
                blocks[p.name] = nn.Sequential(nn.Linear(128, 128), nn.ReLU(), *([nn.Dropout(drop)] if drop else []))
            elif p.name == "fc_out":
                blocks[p.name] = nn.Sequential(
                    nn.Linear(128, math.prod(p.out_shape)), nn.ReLU(), nn.Unflatten(1, p.out_shape)
                )
                prev = p.out_shape[0]
            else:
                out = p.out_shape[0]
                act = nn.Tanh() if out == 1 else nn.ReLU()
                blocks[p.name] = nn.Sequential(nn.ConvTranspose2d(prev, out, 4, 2, 1), act)
                prev = out
        self.blocks = blocks

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks.values():
            x = block(x)
        return x


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(), nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU()
    )


class _EncoderBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = _double_conv(cin, cout)
        self.pool = nn.MaxPool2d(2)
        self.norm = nn.BatchNorm2d(cout)
        self.skip: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.skip = self.conv(x)
        return self.norm(self.pool(self.skip))


class _DecoderBlock(nn.Module):
    def __init__(self, cin: int, cskip: int, cout: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = _double_conv(cin + cskip, cout)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        return self.conv(torch.cat([self.up(x), skip], dim=1))


class UNet(nn.Module):
    """Four encoder blocks, a bottleneck, four decoder blocks with skips."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        c = [w * 2**i for i in range(5)]
        blocks = nn.ModuleDict()
        prev = 1
        for i in range(4):
            blocks[f"enc{i + 1}"] = _EncoderBlock(prev, c[i])
            prev = c[i]
        blocks["bottleneck"] = _double_conv(prev, c[4])
        prev = c[4]
        for i in range(4):
            blocks[f"dec{i + 1}"] = _DecoderBlock(prev, c[3 - i], c[3 - i])
            prev = c[3 - i]
        blocks["head"] = nn.Sequential(nn.Conv2d(prev, 1, 1), nn.Sigmoid())
        self.blocks = blocks

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = self.blocks
        encs = [b[f"enc{i + 1}"] for i in range(4)]
        for e in encs:
            x = e(x)
        x = b["bottleneck"](x)
        for i in range(4):
            x = b[f"dec{i + 1}"](x, encs[3 - i].skip)
        for e in encs:
            e.skip = None
        return b["head"](x)


_CLASSES = {
    "generator": Generator,
    "discriminator": Discriminator,
    "encoder": Encoder,
    "autoencoder64": Autoencoder,
    "autoencoder256": Autoencoder,
    "unet": UNet,
}


def instantiate(spec: ModelSpec, seed: int | None = None) -> nn.Module:
    """Build the module for ``spec``; ``seed`` pins weight initialization."""
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return _CLASSES[spec.kind](spec)
    return _CLASSES[spec.kind](spec)


# --------------------------------------------------------------------------
# shape checking


@dataclass
class ShapeReport:
    kind: str
    batch: int
    input_shape: tuple[int, ...]
    layers: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)
    output_shape: tuple[int, ...] = ()
    output_range: tuple[float, float] = (0.0, 0.0)
    feature_dim: int | None = None


_RANGES = {"generator": (-1.0, 1.0), "autoencoder64": (-1.0, 1.0), "autoencoder256": (-1.0, 1.0), "unet": (0.0, 1.0)}


def forward_shape_check(spec: ModelSpec, batch: int = 2, module: nn.Module | None = None, seed: int = 0) -> ShapeReport:
    """One forward pass on random input, verifying every planned block shape."""
    module = module if module is not None else instantiate(spec, seed)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((batch, *spec.input_shape), generator=gen)
    report = ShapeReport(spec.kind, batch, tuple(x.shape))
    seen: list[tuple[str, tuple[int, ...]]] = []
    planned = {p.name: (batch, *p.out_shape) for p in spec.layer_plan}

    def check(name: str, output: torch.Tensor) -> None:
        shape = tuple(output.shape)
        seen.append((name, shape))
        if planned.get(name, shape) != shape:
            raise ContractError(f"{spec.kind} layer {name!r}: expected {planned[name]}, got {shape}")

    hooks = [
        blk.register_forward_hook(lambda m, i, o, name=name: check(name, o))
        for name, blk in module.blocks.items()
    ]
    was_training = module.training
    module.eval()
    try:
        with torch.no_grad():
            y = module(x)
            if spec.kind == "discriminator":
                report.feature_dim = int(module.features(x).shape[1])
    finally:
        for h in hooks:
            h.remove()
        module.train(was_training)
    report.layers = seen[: len(spec.layer_plan)]
    for plan, (name, shape) in zip(spec.layer_plan, report.layers):
        expected = (batch, *plan.out_shape)
        if name != plan.name or shape != expected:
            raise ContractError(f"{spec.kind} layer {plan.name!r}: expected {expected}, got {name!r} {shape}")
    if len(report.layers) != len(spec.layer_plan):
        raise ContractError(f"{spec.kind}: executed {len(report.layers)} blocks, plan has {len(spec.layer_plan)}")
    report.output_shape = tuple(y.shape)
    report.output_range = (float(y.min()), float(y.max()))
    if report.output_shape != (batch, *spec.output_shape):
        raise ContractError(f"{spec.kind} output {report.output_shape} != {(batch, *spec.output_shape)}")
    lo, hi = _RANGES.get(spec.kind, (-math.inf, math.inf))
    if report.output_range[0] < lo or report.output_range[1] > hi:
        raise ContractError(f"{spec.kind} output range {report.output_range} outside [{lo}, {hi}]")
    return report


# --------------------------------------------------------------------------
# checkpoints

WEIGHTS_FILE = "weights.safetensors"
META_FILE = "meta.json"


@dataclass
class Checkpoint:
    path: Path
    networks: dict[str, nn.Module]
    meta: dict

    @property
    def specs(self) -> dict[str, ModelSpec]:
        return {k: m.spec for k, m in self.networks.items()}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_checkpoint(path: str | Path, networks: Mapping[str, nn.Module], meta: Mapping) -> Path:
    """Atomically write ``networks`` (each carrying ``.spec``) plus ``meta``.

    The directory holds ``weights.safetensors`` (tensor names prefixed by
    role) and ``meta.json`` with the specs and a SHA-256 of the weights.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for role, net in networks.items():
        for name, t in net.state_dict().items():
            tensors[f"{role}.{name}"] = t.detach().contiguous().clone()
    tmp = Path(tempfile.mkdtemp(prefix=".ckpt-", dir=path.parent))
    try:
        save_file(tensors, str(tmp / WEIGHTS_FILE))
        doc = dict(meta)
        doc["specs"] = {role: net.spec.to_dict() for role, net in networks.items()}
        doc["weights_sha256"] = _sha256(tmp / WEIGHTS_FILE)
        (tmp / META_FILE).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        meta = json.loads((path / META_FILE).read_text())
        weights = path / WEIGHTS_FILE
        if _sha256(weights) != meta.get("weights_sha256"):
            raise IntegrityError(f"{path}: weights hash does not match meta")
        tensors = load_file(str(weights))
    except IntegrityError:
        raise
    except Exception as exc:
        raise IntegrityError(f"{path}: unreadable checkpoint ({exc})") from exc
    networks: dict[str, nn.Module] = {}
    for role, sd in meta["specs"].items():
        spec = ModelSpec.from_dict(sd)
        net = instantiate(spec)
        prefix = f"{role}."
        state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        try:
            net.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise IntegrityError(f"{path}: weights do not match the {role} spec ({exc})") from exc
        net.eval()
        networks[role] = net
    return Checkpoint(path, networks, meta)


def weights_hash(module: nn.Module) -> str:
    """SHA-256 over parameter and buffer bytes in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().contiguous().cpu().numpy().tobytes())
    return h.hexdigest()
