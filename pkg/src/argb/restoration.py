"""Gaussian-denoising demo: a small residual ConvNet trained with RGB- or aRGB-space losses."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from argb.losses import LossSpec, compute_loss
from argb.model import parameter_hash
from argb.training import psnr

log = logging.getLogger(__name__)


class TinyRestorer(nn.Module):
    """Eight plain 3x3 convolutions predicting the noise, which is subtracted from the input."""

    def __init__(self, width: int = 64, depth: int = 8):
        super().__init__()
        layers = [nn.Conv2d(3, width, 3, padding=1), nn.ReLU()]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(width, width, 3, padding=1), nn.ReLU()]
        layers.append(nn.Conv2d(width, 3, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return x - self.body(x)


@dataclass
class RestoreTrainConfig:
    loss: LossSpec = field(default_factory=LossSpec)
    steps: int = 5000
    batch: int = 4
    lr: float = 1e-4
    grad_clip: float | None = None  # inf-norm clamp on gradients; None disables
    sigma: float = 0.1
    patch_size: int = 64
    width: int = 64
    depth: int = 8
    val_every: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be positive")


def degrade(x: torch.Tensor, sigma: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Additive white Gaussian noise, clipped to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return x.clone()
    eta = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return (x + sigma * eta).clamp(0.0, 1.0)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over all channels and valid window positions (Gaussian window)."""
    a = torch.as_tensor(np.asarray(a), dtype=torch.float64)
    b = torch.as_tensor(np.asarray(b), dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    c = a.shape[1]
    g = _gaussian_window(window, sigma)
    k = (g[:, None] * g[None, :]).expand(c, 1, window, window)
    filt = lambda t: F.conv2d(t, k, groups=c)
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def quantize(x: torch.Tensor) -> torch.Tensor:
    return torch.round(x.clamp(0, 1) * 255.0) / 255.0


def _stream(seed: int, step: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, step, stream]).generate_state(1)[0])


def _noisy_eval_inputs(images: np.ndarray, sigma: float, seed: int) -> list[torch.Tensor]:
    out = []
    for i, img in enumerate(images):
        gen = torch.Generator().manual_seed(_stream(seed, i, 7))
        out.append(degrade(torch.as_tensor(img), sigma, gen))
    return out


@torch.no_grad()
def evaluate(model: nn.Module, images: np.ndarray, sigma: float, seed: int = 0) -> dict:
    """Mean PSNR on 8-bit quantized outputs and mean SSIM, plus the noisy-input PSNR."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    model.eval()
    noisy = _noisy_eval_inputs(images, sigma, seed)
    ps, ss, pn = [], [], []
    for clean, x in zip(images, noisy):
        out = quantize(model(x.unsqueeze(0))[0])
        ps.append(psnr(out.numpy(), clean))
        ss.append(ssim(out.numpy(), clean))
        pn.append(psnr(quantize(x).numpy(), clean))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "noisy_psnr": float(np.mean(pn))}


def sample_pairs(patches: np.ndarray, cfg: RestoreTrainConfig, step: int) -> tuple[torch.Tensor, torch.Tensor]:
    rng = np.random.default_rng(_stream(cfg.seed, step, 0))
    s = cfg.patch_size
    clean = []
    for i in rng.integers(0, len(patches), size=cfg.batch):
        _, h, w = patches[i].shape
        y, x = int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))
        clean.append(patches[i][:, y : y + s, x : x + s])
    clean = torch.from_numpy(np.ascontiguousarray(np.stack(clean)))
    gen = torch.Generator().manual_seed(_stream(cfg.seed, step, 1))
    return degrade(clean, cfg.sigma, gen), clean


@dataclass
class RestoreResult:
    model: TinyRestorer
    log: list[dict]
    encoder_hash_before: str | None = None
    encoder_hash_after: str | None = None


def train_restorer(
    cfg: RestoreTrainConfig,
    patches: np.ndarray,
    val_images: np.ndarray,
    encoder=None,
    log_path=None,
    on_step: Callable[[int, torch.Tensor], None] | None = None,
) -> RestoreResult:
    """Train a TinyRestorer on AWGN pairs; the encoder (aRGB runs only) stays frozen."""
    if (encoder is not None) != (cfg.loss.space == "argb"):
        raise ValueError("an encoder must be given exactly when the loss space is 'argb'")
    if encoder is not None:
        encoder.freeze()
    h0 = parameter_hash(encoder) if encoder is not None else None

    torch.manual_seed(cfg.seed)
    model = TinyRestorer(cfg.width, cfg.depth)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    records = []
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for step in range(cfg.steps):
            model.train()
            noisy, clean = sample_pairs(patches, cfg, step)
            pred = model(noisy)
            if on_step is not None:
                on_step(step, pred.detach())
            loss = compute_loss(cfg.loss, pred, clean, encoder)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite restoration loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip, norm_type="inf")
            opt.step()
            rec = {"step": step, "loss": loss.item()}
            if (step + 1) % cfg.val_every == 0 or step + 1 == cfg.steps:
                rec.update({f"val_{k}": v for k, v in evaluate(model, val_images, cfg.sigma, cfg.seed).items()})
                log.info("step %d loss %.5f val psnr %.3f", step, rec["loss"], rec["val_psnr"])
            records.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
    finally:
        if log_file is not None:
            log_file.close()
    h1 = parameter_hash(encoder) if encoder is not None else None
    if h0 != h1:
        raise RuntimeError("encoder parameters changed during restoration training")
    return RestoreResult(model, records, h0, h1)


def triptych(noisy: torch.Tensor, restored: torch.Tensor, clean: torch.Tensor, gap: int = 2) -> np.ndarray:
    """Side-by-side noisy | restored | clean as one 3 x H x (3W + 2 gap) array."""
    parts = [t.detach().clamp(0, 1).numpy() for t in (noisy, restored, clean)]
    sep = np.ones((3, parts[0].shape[1], gap), dtype=np.float32)
    return np.concatenate([parts[0], sep, parts[1], sep, parts[2]], axis=2)


def save_triptychs(model: nn.Module, images: np.ndarray, sigma: float, out_dir, seed: int = 0) -> list[Path]:
    from argb.data import save_image

    out_dir = Path(out_dir)
    paths = []
    model.eval()
    with torch.no_grad():
        for i, (clean, x) in enumerate(zip(images, _noisy_eval_inputs(images, sigma, seed))):
            out = model(x.unsqueeze(0))[0]
            paths.append(save_image(out_dir / f"triptych_{i:03d}.png", triptych(x, out, torch.as_tensor(clean))))
    return paths
