"""Per-pixel losses in RGB or aRGB space, auxiliary hooks and gradient statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

KINDS = ("l1", "l2", "psnr", "charbonnier", "edge")
SPACES = ("rgb", "argb")
PSNR_STABILIZER = 1e-12

_LAPLACE = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]


def laplacian(x: torch.Tensor) -> torch.Tensor:
    """4-neighbour discrete Laplacian applied per channel, zero padding."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    c = x.shape[1]
    k = torch.tensor(_LAPLACE, dtype=x.dtype, device=x.device).expand(c, 1, 3, 3)
    out = F.conv2d(x, k, padding=1, groups=c)
    return out.squeeze(0) if squeeze else out


def pixel_loss(kind: str, pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    if kind not in KINDS:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {KINDS}")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if kind == "edge":
        return pixel_loss("charbonnier", laplacian(pred), laplacian(target), eps)
    d = pred - target
    if kind == "l1":
        return d.abs().mean()
    if kind == "l2":
        return (d * d).mean()
    if kind == "psnr":
        # negative PSNR, so that minimizing it maximizes PSNR
        return 10.0 * torch.log10((d * d).mean() + PSNR_STABILIZER)
    return torch.sqrt(d * d + eps * eps).mean()


AuxHook = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class LossSpec:
    """Which per-pixel loss to use and in which space.

    ``aux`` holds ``(hook, weight)`` pairs; each hook is called on the RGB
    prediction and target, never on embeddings.
    """

    space: str = "rgb"
    kind: str = "l1"
    weight: float = 1.0
    charbonnier_eps: float = 1e-3
    aux: list[tuple[AuxHook, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.space not in SPACES:
            raise ValueError(f"unknown space {self.space!r}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.weight < 0:
            raise ValueError("weight must be >= 0")
        if any(w < 0 for _, w in self.aux):
            raise ValueError("aux weights must be >= 0")


def _encoder_fn(encoder):
    if hasattr(encoder, "parameters"):
        if encoder.training or any(p.requires_grad for p in encoder.parameters()):
            raise ValueError("encoder must be frozen (eval mode, no parameter gradients) when used as a loss backend")
    return encoder.encode if hasattr(encoder, "encode") else encoder


def compute_loss(spec: LossSpec, pred: torch.Tensor, target: torch.Tensor, encoder=None) -> torch.Tensor:
    """L_pixel in ``spec.space`` plus the weighted auxiliary terms."""
    if spec.space == "argb":
        if encoder is None:
            raise ValueError("an encoder is required for aRGB-space losses")
        f = _encoder_fn(encoder)
        with torch.no_grad():
            ft = f(target)
        loss = spec.weight * pixel_loss(spec.kind, f(pred), ft, spec.charbonnier_eps)
    else:
        loss = spec.weight * pixel_loss(spec.kind, pred, target, spec.charbonnier_eps)
    for hook, w in spec.aux:
        loss = loss + w * hook(pred, target)
    return loss


def argb_loss(spec: LossSpec, encoder, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-pixel loss between f(pred) and f(target) for a frozen encoder f."""
    if spec.space != "argb":
        spec = LossSpec("argb", spec.kind, spec.weight, spec.charbonnier_eps, list(spec.aux))
    return compute_loss(spec, pred, target, encoder)


@dataclass
class GradStats:
    bin_edges: np.ndarray
    counts: np.ndarray
    mean_abs: float
    max_abs: float
    frac_zero: float
    grad: np.ndarray | None = None

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_left", "bin_right", "count"])
            for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        return path

    def summary(self) -> dict:
        return {"mean_abs": self.mean_abs, "max_abs": self.max_abs, "frac_zero": self.frac_zero, "count": int(self.counts.sum())}


def grad_stats(loss: torch.Tensor, wrt: torch.Tensor, bins: int = 101, keep: bool = False) -> GradStats:
    """Histogram and summary of d(loss)/d(wrt)."""
    if loss.numel() != 1:
        raise ValueError("loss must be a scalar")
    (g,) = torch.autograd.grad(loss, wrt, retain_graph=True)
    g = g.detach().double().cpu().numpy()
    flat = g.ravel()
    m = float(np.abs(flat).max()) if flat.size else 0.0
    lim = m if m > 0 else 1.0
    counts, edges = np.histogram(flat, bins=bins, range=(-lim, lim))
    return GradStats(edges, counts, float(np.abs(flat).mean()), m, float(np.mean(flat == 0)), g if keep else None)


def loss_gradient(spec: LossSpec, pred: torch.Tensor, target: torch.Tensor, encoder=None, bins: int = 101) -> GradStats:
    """Gradient statistics of a configured loss with respect to the prediction."""
    pred = pred.detach().clone().requires_grad_(True)
    return grad_stats(compute_loss(spec, pred, target, encoder), pred, bins=bins, keep=True)
