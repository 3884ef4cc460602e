"""Measurements on a trained aRGB model.

Decomposition into row-space / nullspace parts of the decoder, embedding mixing
and inversion, the self-reference map A df/dx, metric sweeps under additive noise,
expert maps, embedding export and filter-activation maximization.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from argb.model import ARGBModel, EffectiveDecoder, top1_masks

ENCODER_RADIUS = 4  # experts: four 3x3 convolutions; router: three


class Diverged(RuntimeError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


def _as_tensor(x, dtype=torch.float32) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


@dataclass
class Decomposition:
    xi_par: torch.Tensor
    xi_perp: torch.Tensor


def decompose(xi: torch.Tensor, eff: EffectiveDecoder) -> Decomposition:
    """Split an embedding into A+A xi (decoded part) and (I - A+A) xi (decoder-invisible part)."""
    xi = xi.double()
    return Decomposition(eff.project(eff.P_par, xi), eff.project(eff.P_perp, xi))


def nullspace_invariance(model: ARGBModel, xi: torch.Tensor, zeta: torch.Tensor) -> float:
    """max |g(xi + P_perp zeta) - g(xi)| through the model's own decoder layers."""
    eff = model.effective_decoder()
    moved = xi + eff.project(eff.P_perp, zeta.double()).to(xi.dtype)
    with torch.no_grad():
        return float((model.decode(moved) - model.decode(xi)).abs().max())


def mix_embeddings(xi1: torch.Tensor, xi2: torch.Tensor, eff: EffectiveDecoder) -> torch.Tensor:
    """Colour-carrying part of ``xi1`` plus structure-carrying part of ``xi2``."""
    if xi1.shape != xi2.shape:
        raise ValueError(f"shape mismatch: {tuple(xi1.shape)} vs {tuple(xi2.shape)}")
    out = eff.project(eff.P_par, xi1.double()) + eff.project(eff.P_perp, xi2.double())
    return out.to(xi1.dtype)


@dataclass
class InversionConfig:
    steps: int = 50
    lr: float = 0.1
    init: str = "random-uniform"  # or "provided"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.init not in ("random-uniform", "provided"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class InversionResult:
    image: torch.Tensor
    losses: list[float]


def invert(model: ARGBModel, target: torch.Tensor, cfg: InversionConfig | None = None, init: torch.Tensor | None = None) -> InversionResult:
    """Plain SGD on mean((f(z) - target)^2) over the image z.

    ``losses[i]`` is the objective before update i; the last entry is the final value.
    """
    cfg = cfg or InversionConfig()
    if not torch.isfinite(target).all():
        raise ValueError("target embedding contains non-finite values")
    model.eval()
    shape = (3,) + tuple(target.shape[-2:])
    if target.dim() == 4:
        shape = (target.shape[0],) + shape
    if cfg.init == "provided":
        if init is None:
            raise ValueError("init='provided' requires an initial image")
        z0 = init.detach().clone().to(target.dtype)
    else:
        gen = torch.Generator().manual_seed(cfg.seed)
        z0 = torch.rand(shape, generator=gen, dtype=target.dtype)
    z = z0.requires_grad_(True)
    opt = torch.optim.SGD([z], lr=cfg.lr)
    params = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    trace: list[float] = []
    try:
        for _ in range(cfg.steps):
            loss = ((model.encode(z) - target) ** 2).mean()
            trace.append(loss.item())
            if not np.isfinite(trace[-1]):
                raise Diverged("inversion diverged", trace)
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            trace.append(((model.encode(z) - target) ** 2).mean().item())
        if not np.isfinite(trace[-1]):
            raise Diverged("inversion diverged", trace)
    finally:
        for p, flag in zip(model.parameters(), params):
            p.requires_grad_(flag)
    return InversionResult(z.detach(), trace)


@dataclass
class SelfRefMap:
    """Per-pixel 3x3 blocks A d(xi_p)/d(x_p) and the RMS of their diagonals."""

    blocks: np.ndarray  # H x W x 3 x 3
    rms: np.ndarray  # H x W
    meta: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.nanmean(self.rms))


def self_reference(model, x: torch.Tensor, radius: int = ENCODER_RADIUS, pixel_stride: int = 1) -> SelfRefMap:
    """Same-pixel Jacobian of the decoded linear part A f(x), for every pixel.

    Output pixels on a lattice of spacing 2*radius+1 have disjoint receptive-field
    centres, so one backward pass per (lattice offset, colour) recovers the exact
    diagonal Jacobian block for all lattice pixels at once.
    With ``pixel_stride > 1`` only pixels whose coordinates are multiples of the
    stride are measured; the others are NaN.
    """
    if x.dim() != 3 or x.shape[0] != 3:
        raise ValueError("expected a single 3xHxW image")
    model.eval()
    eff = model.effective_decoder()
    A = eff.A.to(x.dtype)
    h, w = x.shape[1:]
    spacing = 2 * radius + 1
    z = x.detach().clone().requires_grad_(True)
    y = torch.einsum("oc,chw->ohw", A, model.encode(z))
    blocks = np.full((h, w, 3, 3), np.nan)
    lattice = torch.zeros(h, w, dtype=x.dtype)
    for oy in range(spacing):
        for ox in range(spacing):
            lattice.zero_()
            sub = lattice[oy::spacing, ox::spacing]
            sub.fill_(1.0)
            if pixel_stride > 1:
                ys = torch.arange(oy, h, spacing)
                xs = torch.arange(ox, w, spacing)
                keep = ((ys % pixel_stride == 0)[:, None] & (xs % pixel_stride == 0)[None, :]).to(x.dtype)
                sub.mul_(keep)
            if not lattice.any():
                continue
            mask = lattice.bool().numpy()
            for i in range(3):
                cot = torch.zeros_like(y)
                cot[i] = lattice
                (g,) = torch.autograd.grad(y, z, cot, retain_graph=True)
                # row i of each block: d y_i[p] / d x[:, p]
                blocks[mask, i, :] = g.detach().double().numpy().transpose(1, 2, 0)[mask]
    if not np.all(np.isfinite(blocks[~np.isnan(blocks[..., 0, 0])])):
        raise Diverged("non-finite Jacobian", [])
    diag = np.diagonal(blocks, axis1=2, axis2=3)
    rms = np.sqrt(np.mean(diag**2, axis=-1))
    meta = {"pixel_stride": pixel_stride, "radius": radius, "height": h, "width": w}
    return SelfRefMap(blocks, rms, meta)


def jacobian_block_fd(model, x: torch.Tensor, py: int, px: int, step: float = 1e-3) -> np.ndarray:
    """Central-difference estimate of A d(xi_p)/d(x_p) at one pixel."""
    eff = model.effective_decoder()
    out = np.zeros((3, 3))
    with torch.no_grad():
        for j in range(3):
            xp, xm = x.clone(), x.clone()
            xp[j, py, px] += step
            xm[j, py, px] -= step
            d = (model.encode(xp)[:, py, px] - model.encode(xm)[:, py, px]).double() / (2 * step)
            out[:, j] = (eff.A @ d).numpy()
    return out


def _leaky_inputs(model: nn.Module, x: torch.Tensor) -> list[torch.Tensor]:
    captured = []
    hooks = [m.register_forward_hook(lambda mod, inp, out: captured.append(inp[0].detach() > 0)) for m in model.modules() if isinstance(m, nn.LeakyReLU)]
    try:
        with torch.no_grad():
            xi, probs = model.encode_full(x)
    finally:
        for hk in hooks:
            hk.remove()
    return [xi, probs.argmax(dim=-3)] + captured


def cpwl_second_difference(model: ARGBModel, x: torch.Tensor, direction: torch.Tensor, eps: float) -> tuple[float, bool]:
    """Max |f(x + 2 eps d) - 2 f(x + eps d) + f(x)| and whether routing and every
    leaky-ReLU sign pattern stayed fixed along the three points (float64)."""
    m = copy.deepcopy(model).double().eval()
    x = x.double()
    d = direction.double()
    runs = [_leaky_inputs(m, x + t * eps * d) for t in (0, 1, 2)]
    unchanged = all(torch.equal(a, b) for r in runs[1:] for a, b in zip(runs[0][1:], r[1:]))
    second = runs[2][0] - 2 * runs[1][0] + runs[0][0]
    return float(second.abs().max()), unchanged


def metric_sweep(model: ARGBModel, x: torch.Tensor, sigmas, n_samples: int = 100, seed: int = 0, chunk: int = 20) -> list[dict]:
    """Mean/std over noise draws of MSE in RGB and in aRGB between x and clip(x + sigma*eta)."""
    if any(s < 0 for s in sigmas):
        raise ValueError("sigmas must be >= 0")
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    rows = []
    with torch.no_grad():
        for s in sigmas:
            rgb, argb = [], []
            done = 0
            while done < n_samples:
                n = min(chunk, n_samples - done)
                eta = torch.randn((n,) + tuple(x.shape), generator=gen, dtype=x.dtype)
                noisy = (x + s * eta).clamp(0.0, 1.0)
                # clean reference rides in the same batch so sigma = 0 gives exact zeros
                emb = model.encode(torch.cat([x.unsqueeze(0), noisy]))
                rgb.append(((noisy - x) ** 2).flatten(1).mean(1).double())
                argb.append(((emb[1:] - emb[:1]) ** 2).flatten(1).mean(1).double())
                done += n
            r, a = torch.cat(rgb).numpy(), torch.cat(argb).numpy()
            rows.append({"sigma": float(s), "rgb_mean": float(r.mean()), "rgb_std": float(r.std()), "argb_mean": float(a.mean()), "argb_std": float(a.std())})
    return rows


def write_rows(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


def expert_map(model: ARGBModel, x: torch.Tensor) -> np.ndarray:
    """Per-pixel index of the selected expert (H x W, int64)."""
    model.eval()
    with torch.no_grad():
        probs = model.route(x)
    return top1_masks(probs).argmax(dim=-3).numpy().astype(np.int64)


def export_embeddings(model: ARGBModel, x: torch.Tensor, subsample: int, path) -> Path:
    """CSV with one row per sampled pixel: x, y, expert, e0..e{C-1}.

    Pixels are taken on a grid with step ``subsample`` in both directions.
    """
    if subsample < 1:
        raise ValueError("subsample must be >= 1")
    model.eval()
    with torch.no_grad():
        xi, probs = model.encode_full(x)
    experts = top1_masks(probs).argmax(dim=0).numpy()
    emb = xi.numpy().astype(np.float32)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "expert"] + [f"e{c}" for c in range(emb.shape[0])])
        for py in range(0, emb.shape[1], subsample):
            for px in range(0, emb.shape[2], subsample):
                # %.9g round-trips float32 exactly
                w.writerow([px, py, int(experts[py, px])] + ["%.9g" % v for v in emb[:, py, px]])
    return path


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    """Return (integer columns N x 3, embeddings N x C float32)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :3].astype(np.int64), data[:, 3:].astype(np.float32)


@dataclass
class FilterResult:
    image: torch.Tensor
    trace: list[float]


def maximize_filter(model: ARGBModel, expert_k: int, channel: int, size: int = 32, steps: int = 200, lr: float = 0.05, seed: int = 0) -> FilterResult:
    """Gradient ascent (Adam) on the mean activation of one output channel of one expert.

    The image starts uniform-random and is clamped to [0, 1] after every update;
    ``trace[i]`` is the mean activation before update i, the last entry after the final one.
    """
    if not 0 <= expert_k < model.num_experts:
        raise IndexError(f"expert index {expert_k} out of range")
    if not 0 <= channel < model.embedding_dim:
        raise IndexError(f"channel {channel} out of range")
    expert = model.experts[expert_k]
    gen = torch.Generator().manual_seed(seed)
    z = torch.rand(1, 3, size, size, generator=gen).requires_grad_(True)
    opt = torch.optim.Adam([z], lr=lr)
    trace = []
    for _ in range(steps):
        act = expert(z)[0, channel].mean()
        trace.append(act.item())
        if not np.isfinite(trace[-1]):
            raise Diverged("filter maximization diverged", trace)
        opt.zero_grad()
        (-act).backward()
        opt.step()
        with torch.no_grad():
            z.clamp_(0.0, 1.0)
    with torch.no_grad():
        trace.append(expert(z)[0, channel].mean().item())
    expert.zero_grad(set_to_none=True)
    return FilterResult(z.detach()[0], trace)


def box_blur(x: torch.Tensor, size: int = 9) -> torch.Tensor:
    """Mean filter with replicate padding, per channel."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    pad = size // 2
    xp = torch.nn.functional.pad(x, (pad, pad, pad, pad), mode="replicate")
    out = torch.nn.functional.avg_pool2d(xp, size, stride=1)
    return out.squeeze(0) if squeeze else out
