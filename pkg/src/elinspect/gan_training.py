"""Adversarial (WGAN-GP) training, encoder training and autoencoder baselines.

Phase 1 trains a generator and critic on defect-free images with the
gradient-penalty Wasserstein loss. Phase 2 freezes the critic and trains an
encoder so that ``G(E(x))`` reconstructs ``x``, minimizing the image MSE
plus ``k`` times the MSE of critic features. With ``modified_scheme`` the
generator is also updated every ``generator_update_period`` encoder steps
with a smaller step size; the critic never changes in phase 2.

Config keys (all flat, written next to each checkpoint as ``config.json``):

* phase 1: ``size, width, latent_dim, lambda_gp, critic_steps_per_gen,
  batch_size, iterations, lr, beta1, beta2, seed, mode, patch, grid``
* phase 2: ``k, iterations, batch_size, encoder_lr, generator_lr,
  generator_update_period, modified_scheme, seed, mode, patch, grid``
* autoencoder: ``variant, iterations, batch_size, lr, seed, mode, patch, grid``
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset_core import ImageSample, extract_patches, normalize, resize_image
from .errors import ConfigError, DataError, NumericError, ProtocolViolation
from .model_zoo import Checkpoint, build_model, instantiate, load_checkpoint, save_checkpoint

LOG_FILE = "train_log.csv"
CONFIG_FILE = "config.json"


# --------------------------------------------------------------------------
# configs and logs


@dataclass
class Phase1Config:
    size: int = 64
    width: int = 16
    latent_dim: int = 128
    lambda_gp: float = 10.0
    critic_steps_per_gen: int = 5
    batch_size: int = 16
    iterations: int = 2000
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    seed: int = 0
    mode: str = "whole"
    patch: int = 64
    grid: int = 16

    def __post_init__(self) -> None:
        if self.lambda_gp < 0:
            raise ConfigError("lambda_gp must be >= 0")
        if self.iterations < 1 or self.critic_steps_per_gen < 1 or self.batch_size < 1:
            raise ConfigError("iterations, critic_steps_per_gen and batch_size must be >= 1")
        _check_mode(self.mode)


@dataclass
class Phase2Config:
    k: float = 1.0
    iterations: int = 1000
    batch_size: int = 16
    encoder_lr: float = 1e-3
    generator_lr: float = 1e-4
    generator_update_period: int = 5
    modified_scheme: bool = True
    seed: int = 0
    mode: str = "whole"
    patch: int = 64
    grid: int = 16

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        if self.iterations < 1 or self.batch_size < 1 or self.generator_update_period < 1:
            raise ConfigError("iterations, batch_size and generator_update_period must be >= 1")
        if self.modified_scheme and not self.generator_lr < self.encoder_lr:
            raise ConfigError("modified scheme needs generator_lr < encoder_lr")
        _check_mode(self.mode)


@dataclass
class AEConfig:
    variant: str = "autoencoder64"
    iterations: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    mode: str | None = None
    patch: int = 64
    grid: int = 16

    def __post_init__(self) -> None:
        if self.variant not in ("autoencoder64", "autoencoder256"):
            raise ConfigError(f"unknown autoencoder variant {self.variant!r}")
        if self.mode is None:
            self.mode = "patch" if self.variant == "autoencoder64" else "whole"
        _check_mode(self.mode)
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be >= 1")

    @property
    def size(self) -> int:
        return 64 if self.variant == "autoencoder64" else 256


def _check_mode(mode: str) -> None:
    if mode not in ("whole", "patch"):
        raise ConfigError(f"mode must be 'whole' or 'patch', got {mode!r}")


@dataclass
class TrainLog:
    columns: tuple[str, ...]
    records: list[dict] = field(default_factory=list)

    def append(self, iteration: int, seconds: float, **losses: float) -> None:
        if self.records and iteration <= self.records[-1]["iteration"]:
            raise ValueError("train log iterations must increase")
        bad = [k for k, v in losses.items() if not math.isfinite(v)]
        if bad:
            raise NumericError(f"non-finite loss {bad}", iteration)
        self.records.append({"iteration": iteration, **losses, "seconds": seconds})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", *self.columns, "seconds"])
            for r in self.records:
                w.writerow([r["iteration"], *(repr(float(r[c])) for c in self.columns), f"{r['seconds']:.6f}"])
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainLog":
        with Path(path).open() as fh:
            rows = list(csv.DictReader(fh))
        cols = tuple(c for c in (rows[0].keys() if rows else ()) if c not in ("iteration", "seconds"))
        log = cls(cols)
        for r in rows:
            log.records.append({"iteration": int(r["iteration"]), **{c: float(r[c]) for c in cols}, "seconds": float(r["seconds"])})
        return log


@dataclass
class TrainResult:
    networks: dict[str, nn.Module]
    meta: dict
    log: TrainLog
    path: Path | None = None

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.path, self.networks, self.meta)


def _persist(result: TrainResult, out_dir: str | Path | None, config) -> TrainResult:
    if out_dir is None:
        return result
    out = Path(out_dir)
    save_checkpoint(out, result.networks, result.meta)
    result.log.write_csv(out / LOG_FILE)
    (out / CONFIG_FILE).write_text(json.dumps(asdict(config), indent=1, sort_keys=True) + "\n")
    result.path = out
    return result


# --------------------------------------------------------------------------
# data


def require_defect_free(samples: Sequence[ImageSample]) -> None:
    """Anomaly-model training sees defect-free data only."""
    if len(samples) == 0:
        raise DataError("training set is empty")
    bad = [s.id for s in samples if s.classes]
    if bad:
        raise ProtocolViolation(f"defective samples in defect-free training data: {bad[:5]}")


class ImageSource:
    """Random batches of normalized whole images or patches, shape (B,1,S,S)."""

    def __init__(self, samples: Sequence[ImageSample], size: int, mode: str = "whole", grid: int = 16):
        _check_mode(mode)
        self.mode = mode
        self.size = size
        self.grid = grid
        if mode == "whole":
            arr = np.stack([resize_image(normalize(s.image), size) for s in samples])
            self._whole = torch.from_numpy(arr).unsqueeze(1)
        else:
            self._cells = [normalize(s.image) for s in samples]
            self._patches = lru_cache(maxsize=32)(self._cell_patches)

    def _cell_patches(self, index: int) -> np.ndarray:
        return np.stack(extract_patches(self._cells[index], self.size, self.grid))

    def __len__(self) -> int:
        return len(self._whole) if self.mode == "whole" else len(self._cells) * self.grid**2

    def batch(self, n: int, gen: torch.Generator) -> torch.Tensor:
        idx = torch.randint(0, len(self), (n,), generator=gen)
        if self.mode == "whole":
            return self._whole[idx]
        per = self.grid**2
        out = [self._patches(int(i) // per)[int(i) % per] for i in idx]
        return torch.from_numpy(np.stack(out)).unsqueeze(1)


# --------------------------------------------------------------------------
# losses


def _as_generator(seed: int | torch.Generator | None) -> torch.Generator | None:
    if seed is None or isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


def critic_gradient_norms(discriminator: Callable, x_hat: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    """Per-sample ``||grad_x D(x)||_2`` at ``x_hat``."""
    x_hat = x_hat.detach().requires_grad_(True)
    out = discriminator(x_hat)
    (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=create_graph, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x_hat)
    return grad.flatten(1).norm(2, dim=1)


def gradient_penalty(
    discriminator: Callable,
    x_real: torch.Tensor,
    x_fake: torch.Tensor,
    lambda_gp: float = 10.0,
    seed: int | torch.Generator | None = None,
    iteration: int | None = None,
) -> torch.Tensor:
    """``lambda * E[(||grad D(x_hat)||_2 - 1)^2]`` on random interpolates.

    ``x_hat = a * x_real + (1 - a) * x_fake`` with one ``a ~ U(0, 1)`` per
    sample. The result stays on the autograd graph so it can be minimized
    with respect to the critic parameters.
    """
    if x_real.shape != x_fake.shape:
        raise DataError(f"real {tuple(x_real.shape)} and fake {tuple(x_fake.shape)} batches differ")
    if lambda_gp == 0:
        return x_real.new_zeros(())
    gen = _as_generator(seed)
    alpha = torch.rand((x_real.shape[0],) + (1,) * (x_real.ndim - 1), generator=gen, dtype=x_real.dtype)
    x_hat = alpha * x_real.detach() + (1 - alpha) * x_fake.detach()
    norms = critic_gradient_norms(discriminator, x_hat, create_graph=True)
    if not torch.isfinite(norms).all():
        raise NumericError("non-finite critic gradient in penalty", iteration)
    return lambda_gp * ((norms - 1.0) ** 2).mean()


def izi_f_terms(
    x: torch.Tensor, recon: torch.Tensor, feat_x: torch.Tensor, feat_recon: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample (image MSE, feature MSE) residual terms."""
    if x.shape != recon.shape or feat_x.shape != feat_recon.shape:
        raise DataError("residual operands differ in shape")
    image = ((x - recon) ** 2).flatten(1).mean(1)
    feature = ((feat_x - feat_recon) ** 2).flatten(1).mean(1)
    return image, feature


def izi_f_loss(
    x: torch.Tensor, generator: Callable, encoder: Callable, features: Callable, k: float = 1.0
) -> torch.Tensor:
    """Batch mean of ``MSE(x, G(E(x))) + k * MSE(f(x), f(G(E(x))))``."""
    if k < 0:
        raise ConfigError("k must be >= 0")
    recon = generator(encoder(x))
    image, feature = izi_f_terms(x, recon, features(x), features(recon))
    return (image + k * feature).mean()


# --------------------------------------------------------------------------
# phase 1


def _scalar(t) -> float:
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)


def _latent(n: int, dim: int, gen: torch.Generator | None) -> torch.Tensor:
    if n < 1:
        raise DataError("latent batch must be non-empty")
    return torch.randn((n, dim), generator=gen)


def wgan_step(
    generator: nn.Module | Callable,
    discriminator: nn.Module | Callable,
    real_batch: torch.Tensor,
    config: Phase1Config,
    opt_d: torch.optim.Optimizer | None = None,
    opt_g: torch.optim.Optimizer | None = None,
    gen: torch.Generator | None = None,
    iteration: int | None = None,
) -> dict[str, float]:
    """One critic update followed by one generator update.

    Each optimizer is optional: without it the corresponding loss is only
    evaluated. Returns critic loss, generator loss, penalty and the critic
    gap ``|E D(x) - E D(G(z))|``.
    """
    if real_batch.shape[0] < 1:
        raise DataError("real batch must be non-empty")
    n = real_batch.shape[0]
    with torch.no_grad():
        fake = generator(_latent(n, config.latent_dim, gen))
    d_real = discriminator(real_batch).mean()
    d_fake = discriminator(fake).mean()
    gp = gradient_penalty(discriminator, real_batch, fake, config.lambda_gp, gen, iteration)
    critic_loss = d_fake - d_real + gp
    if not torch.isfinite(critic_loss):
        raise NumericError("non-finite critic loss", iteration)
    if opt_d is not None:
        opt_d.zero_grad(set_to_none=True)
        critic_loss.backward()
        opt_d.step()
    params = list(discriminator.parameters()) if isinstance(discriminator, nn.Module) else []
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        g_loss = -discriminator(generator(_latent(n, config.latent_dim, gen))).mean()
        if not torch.isfinite(g_loss):
            raise NumericError("non-finite generator loss", iteration)
        if opt_g is not None:
            opt_g.zero_grad(set_to_none=True)
            g_loss.backward()
            opt_g.step()
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)
    return {
        "critic_loss": _scalar(critic_loss),
        "generator_loss": _scalar(g_loss),
        "gradient_penalty": _scalar(gp),
        "critic_gap": abs(_scalar(d_real) - _scalar(d_fake)),
    }


def _critic_only_step(G, D, real, config, opt_d, gen, iteration) -> dict[str, float]:
    with torch.no_grad():
        fake = G(_latent(real.shape[0], config.latent_dim, gen))
    d_real = D(real).mean()
    d_fake = D(fake).mean()
    gp = gradient_penalty(D, real, fake, config.lambda_gp, gen, iteration)
    loss = d_fake - d_real + gp
    if not torch.isfinite(loss):
        raise NumericError("non-finite critic loss", iteration)
    opt_d.zero_grad(set_to_none=True)
    loss.backward()
    opt_d.step()
    return {"critic_loss": _scalar(loss), "gradient_penalty": _scalar(gp), "critic_gap": abs(_scalar(d_real - d_fake))}


def _abort(result: TrainResult, out_dir, config, exc: NumericError) -> None:
    """Persist the log and last good weights, then re-raise."""
    if out_dir is not None:
        _persist(result, out_dir, config)
    raise exc


def train_phase1(
    data: Sequence[ImageSample], config: Phase1Config, out_dir: str | Path | None = None
) -> TrainResult:
    require_defect_free(data)
    torch.manual_seed(config.seed)
    source = ImageSource(data, config.size, config.mode, config.grid)
    G = instantiate(build_model("generator", config.size, config.latent_dim, config.width), config.seed)
    D = instantiate(build_model("discriminator", config.size, config.latent_dim, config.width), config.seed + 1)
    G.train()
    D.train()
    betas = (config.beta1, config.beta2)
    opt_g = torch.optim.Adam(G.parameters(), lr=config.lr, betas=betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=config.lr, betas=betas)
    gen = torch.Generator().manual_seed(config.seed)
    log = TrainLog(("critic_loss", "generator_loss", "gradient_penalty", "critic_gap"))
    meta = {"phase": 1, "iterations": 0, "seed": config.seed, "kind": "wgan", "size": config.size,
            "latent_dim": config.latent_dim, "mode": config.mode, "feature_tap": D.spec.feature_tap}
    last_good = {"generator": _snapshot(G), "discriminator": _snapshot(D)}
    t0 = time.perf_counter()
    for it in range(1, config.iterations + 1):
        try:
            for _ in range(config.critic_steps_per_gen - 1):
                _critic_only_step(G, D, source.batch(config.batch_size, gen), config, opt_d, gen, it)
            stats = wgan_step(G, D, source.batch(config.batch_size, gen), config, opt_d, opt_g, gen, it)
            log.append(it, time.perf_counter() - t0, **stats)
        except NumericError as exc:
            _restore(G, last_good["generator"])
            _restore(D, last_good["discriminator"])
            result = TrainResult({"generator": G.eval(), "discriminator": D.eval()}, meta, log)
            _abort(result, out_dir, config, exc)
        meta["iterations"] = it
        if it % 50 == 0:
            last_good = {"generator": _snapshot(G), "discriminator": _snapshot(D)}
    G.eval()
    D.eval()
    return _persist(TrainResult({"generator": G, "discriminator": D}, meta, log), out_dir, config)


def _snapshot(m: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in m.state_dict().items()}


def _restore(m: nn.Module, state: dict) -> None:
    m.load_state_dict(state)


# --------------------------------------------------------------------------
# phase 2


def train_phase2(
    data: Sequence[ImageSample],
    phase1: Checkpoint | TrainResult | str | Path,
    config: Phase2Config,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Encoder training with a frozen critic (and optionally a slow generator)."""
    require_defect_free(data)
    if isinstance(phase1, (str, Path)):
        phase1 = load_checkpoint(phase1)
    p1_meta = phase1.meta
    if p1_meta.get("phase") != 1:
        raise ConfigError("phase 2 needs a phase-1 checkpoint")
    # Work on copies so the caller's phase-1 networks stay untouched.
    G = instantiate(phase1.networks["generator"].spec)
    G.load_state_dict(phase1.networks["generator"].state_dict())
    D = instantiate(phase1.networks["discriminator"].spec)
    D.load_state_dict(phase1.networks["discriminator"].state_dict())
    size = G.spec.size
    torch.manual_seed(config.seed)
    E = instantiate(build_model("encoder", size, G.spec.latent_dim, D.spec.width), config.seed + 2)
    source = ImageSource(data, size, config.mode, config.grid)
    # Inference-mode batch norm keeps generator buffers fixed; the critic has none.
    G.eval()
    D.eval()
    E.train()
    for p in D.parameters():
        p.requires_grad_(False)
    for p in G.parameters():
        p.requires_grad_(config.modified_scheme)
    opt_e = torch.optim.RMSprop(E.parameters(), lr=config.encoder_lr)
    opt_g = torch.optim.RMSprop(G.parameters(), lr=config.generator_lr) if config.modified_scheme else None
    gen = torch.Generator().manual_seed(config.seed)
    log = TrainLog(("izi_f_loss", "image_loss", "feature_loss", "generator_updated"))
    meta = {"phase": 2, "iterations": 0, "seed": config.seed, "kind": "fanogan", "size": size,
            "latent_dim": G.spec.latent_dim, "k": config.k, "mode": config.mode,
            "modified_scheme": config.modified_scheme, "feature_tap": D.spec.feature_tap}
    nets = {"encoder": E, "generator": G, "discriminator": D}
    last_good = {k: _snapshot(v) for k, v in nets.items()}
    t0 = time.perf_counter()
    for it in range(1, config.iterations + 1):
        x = source.batch(config.batch_size, gen)
        recon = G(E(x))
        image, feature = izi_f_terms(x, recon, D.features(x), D.features(recon))
        loss = (image + config.k * feature).mean()
        update_g = config.modified_scheme and it % config.generator_update_period == 0
        try:
            if not torch.isfinite(loss):
                raise NumericError("non-finite izi_f loss", it)
            opt_e.zero_grad(set_to_none=True)
            if opt_g is not None:
                opt_g.zero_grad(set_to_none=True)
            loss.backward()
            opt_e.step()
            if update_g:
                opt_g.step()
            log.append(it, time.perf_counter() - t0, izi_f_loss=_scalar(loss), image_loss=_scalar(image.mean()),
                       feature_loss=_scalar(feature.mean()), generator_updated=float(update_g))
        except NumericError as exc:
            for k, v in nets.items():
                _restore(v, last_good[k])
            _abort(TrainResult({k: v.eval() for k, v in nets.items()}, meta, log), out_dir, config, exc)
        meta["iterations"] = it
        if it % 50 == 0:
            last_good = {k: _snapshot(v) for k, v in nets.items()}
    for p in list(G.parameters()) + list(D.parameters()):
        p.requires_grad_(True)
    E.eval()
    return _persist(TrainResult(nets, meta, log), out_dir, config)


# --------------------------------------------------------------------------
# autoencoder baselines


def train_autoencoder(
    data: Sequence[ImageSample], config: AEConfig, out_dir: str | Path | None = None
) -> TrainResult:
    require_defect_free(data)
    torch.manual_seed(config.seed)
    source = ImageSource(data, config.size, config.mode, config.grid)
    ae = instantiate(build_model(config.variant, config.size), config.seed)
    ae.train()
    opt = torch.optim.Adam(ae.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    log = TrainLog(("mse",))
    meta = {"phase": 0, "iterations": 0, "seed": config.seed, "kind": config.variant, "size": config.size,
            "mode": config.mode, "k": 0.0}
    t0 = time.perf_counter()
    for it in range(1, config.iterations + 1):
        x = source.batch(config.batch_size, gen)
        loss = F.mse_loss(ae(x), x)
        if not torch.isfinite(loss):
            _abort(TrainResult({"autoencoder": ae.eval()}, meta, log), out_dir, config,
                   NumericError("non-finite reconstruction loss", it))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        log.append(it, time.perf_counter() - t0, mse=_scalar(loss))
        meta["iterations"] = it
    ae.eval()
    return _persist(TrainResult({"autoencoder": ae}, meta, log), out_dir, config)


def reconstruction_mse(ae: nn.Module, data: Sequence[ImageSample], size: int) -> float:
    """Inference-mode reconstruction MSE over whole (resized) images."""
    x = torch.from_numpy(np.stack([resize_image(normalize(s.image), size) for s in data])).unsqueeze(1)
    was = ae.training
    ae.eval()
    with torch.no_grad():
        out = float(F.mse_loss(ae(x), x))
    ae.train(was)
    return out
