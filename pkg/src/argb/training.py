"""Autoencoder training: reconstruction + load balancing, regularizing noise, SGDR schedule."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from argb.checkpoint import Checkpoint
from argb.data import AugmentPolicy, augment
from argb.model import ARGBModel, top1_masks

log = logging.getLogger(__name__)

PSNR_CAP = 100.0


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class AETrainConfig:
    num_experts: int = 20
    embedding_dim: int = 128
    batch_size: int = 16
    initial_lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    first_period: int = 1000
    max_period: int = 256000
    total_steps: int = 511000
    lambda_balance: float = 0.01
    balance_form: str = "switch"  # or "printed"
    noise_std: float = 1.0
    patch_size: int = 256
    hflip: bool = True
    vflip: bool = True
    rot90: bool = True
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("num_experts", "embedding_dim", "batch_size", "first_period", "max_period", "total_steps", "patch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if self.lambda_balance < 0:
            raise ValueError("lambda_balance must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.balance_form not in ("switch", "printed"):
            raise ValueError(f"unknown balance_form {self.balance_form!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AETrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown autoencoder config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> AETrainConfig:
    """Scaled-down schedule: restarts 250 -> 500 -> 1000 -> 2000 (capped), 10k steps, 64px patches."""
    base = dict(num_experts=5, batch_size=1, first_period=250, max_period=2000, total_steps=10000, patch_size=64)
    base.update(overrides)
    return AETrainConfig(**base)


def cosine_restart_lr(step: int, initial_lr: float, first_period: int, max_period: int) -> float:
    """Cosine annealing to zero with warm restarts; period doubles until ``max_period``."""
    period, start = first_period, 0
    while step >= start + period:
        start += period
        period = min(period * 2, max_period)
    t = step - start
    return 0.5 * initial_lr * (1.0 + math.cos(math.pi * t / period))


def restart_boundaries(cfg: AETrainConfig) -> list[int]:
    out, start, period = [], 0, cfg.first_period
    while start < cfg.total_steps:
        out.append(start)
        start += period
        period = min(period * 2, cfg.max_period)
    return out


def cycle_ends(cfg: AETrainConfig) -> list[int]:
    """Step counts at which a cosine period completes (learning rate back near zero)."""
    out, start, period = [], 0, cfg.first_period
    while start + period <= cfg.total_steps:
        start += period
        out.append(start)
        period = min(period * 2, cfg.max_period)
    return out


def _flatten_experts(probabilities: torch.Tensor) -> torch.Tensor:
    """(K,H,W) or (B,K,H,W) -> (K, N)."""
    if probabilities.dim() == 3:
        probabilities = probabilities.unsqueeze(0)
    return probabilities.movedim(1, 0).reshape(probabilities.shape[1], -1)


def balance_loss(probabilities: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """K * sum_k (fraction of pixels routed to k) * (mean router probability of k).

    Equals 1 when assignments and probabilities are uniform, K when everything
    goes to one expert. Gradients flow through the probabilities only.
    """
    if probabilities.shape != masks.shape:
        raise ValueError(f"shape mismatch: {tuple(probabilities.shape)} vs {tuple(masks.shape)}")
    p = _flatten_experts(probabilities)
    m = _flatten_experts(masks).to(p.dtype)
    k = p.shape[0]
    frac = m.mean(dim=1)
    mean_prob = p.mean(dim=1)
    return k * (frac * mean_prob).sum()


def balance_loss_printed(probabilities: torch.Tensor) -> torch.Tensor:
    """The formula as typeset: K^2 * sum over pixels of the max router probability.

    Evaluates to K*H*W at uniform probabilities; kept only for comparison.
    """
    p = _flatten_experts(probabilities)
    k = p.shape[0]
    n_images = 1 if probabilities.dim() == 3 else probabilities.shape[0]
    return k * k * p.max(dim=0).values.sum() / n_images


def recon_loss(model: ARGBModel, x: torch.Tensor, noise_std: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean absolute error of g(f(x) + z) against x, z ~ N(0, noise_std^2)."""
    return _recon_terms(model, x, noise_std, generator)[0]


def _recon_terms(model, x, noise_std, generator):
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    xi, probs = model.encode_full(x)
    if noise_std > 0:
        z = torch.randn(xi.shape, generator=generator, dtype=xi.dtype)
        xi = xi + noise_std * z
    recon = model.decode(xi)
    return (recon - x).abs().mean(), probs


def _stream_seed(seed: int, step: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, step, stream]).generate_state(1)[0])


def sample_batch(patches: np.ndarray, cfg: AETrainConfig, step: int) -> torch.Tensor:
    """Deterministic batch for ``step``: indices, crops and flips depend only on (seed, step)."""
    rng = np.random.default_rng(_stream_seed(cfg.seed, step, 0))
    policy = AugmentPolicy(cfg.patch_size, cfg.hflip, cfg.vflip, cfg.rot90)
    idx = rng.integers(0, len(patches), size=cfg.batch_size)
    return torch.from_numpy(np.stack([augment(patches[i], policy, rng) for i in idx]))


def make_optimizer(model: ARGBModel, cfg: AETrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.initial_lr, betas=cfg.betas, eps=cfg.eps)


def new_checkpoint(cfg: AETrainConfig) -> Checkpoint:
    torch.manual_seed(cfg.seed)
    model = ARGBModel(cfg.num_experts, cfg.embedding_dim)
    return Checkpoint(model, 0, cfg.to_dict(), {})


def train_autoencoder(
    cfg: AETrainConfig,
    patches: np.ndarray,
    log_path=None,
    resume: Checkpoint | None = None,
    steps: int | None = None,
    on_step: Callable[[dict], None] | None = None,
    on_cycle_end: Callable[[Checkpoint], None] | None = None,
) -> Checkpoint:
    """Train (or continue training) the autoencoder on an N x 3 x h x w patch array.

    ``steps`` limits how many steps this call runs (default: until ``cfg.total_steps``).
    Each logged record holds step, lr, l_recon, l_balance and l_ae.
    ``on_cycle_end`` receives a detached copy of the state whenever a cosine period
    completes; it is identical to what a run stopped at that step would return.
    """
    if len(patches) < 1:
        raise ValueError("dataset must contain at least one patch")
    ckpt = resume if resume is not None else new_checkpoint(cfg)
    model = ckpt.model
    model.train()
    opt = make_optimizer(model, cfg)
    if ckpt.optimizer_state is not None:
        opt.load_state_dict(ckpt.optimizer_state)

    ends = set(cycle_ends(cfg))
    start = ckpt.step
    stop = cfg.total_steps if steps is None else min(cfg.total_steps, start + steps)
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a" if start > 0 else "w")
    try:
        for step in range(start, stop):
            lr = cosine_restart_lr(step, cfg.initial_lr, cfg.first_period, cfg.max_period)
            for g in opt.param_groups:
                g["lr"] = lr
            x = sample_batch(patches, cfg, step)
            gen = torch.Generator().manual_seed(_stream_seed(cfg.seed, step, 1))
            try:
                l_recon, probs = _recon_terms(model, x, cfg.noise_std, gen)
            except FloatingPointError as e:
                snap = {"step": step, "lr": lr, "l_recon": float("nan"), "l_balance": float("nan")}
                raise TrainingDiverged(f"{e} at step {step}", snap) from e
            if cfg.balance_form == "switch":
                l_bal = balance_loss(probs, top1_masks(probs.detach()))
            else:
                l_bal = balance_loss_printed(probs)
            l_ae = l_recon + cfg.lambda_balance * l_bal
            if not torch.isfinite(l_ae):
                snap = {"step": step, "lr": lr, "l_recon": float(l_recon), "l_balance": float(l_bal)}
                raise TrainingDiverged(f"non-finite loss at step {step}", snap)
            opt.zero_grad(set_to_none=True)
            l_ae.backward()
            opt.step()
            rec = {"step": step, "lr": lr, "l_recon": l_recon.item(), "l_balance": l_bal.item(), "l_ae": l_ae.item()}
            if log_file is not None and step % cfg.log_every == 0:
                log_file.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec)
            if on_cycle_end is not None and step + 1 in ends:
                snap = Checkpoint(copy.deepcopy(model), step + 1, cfg.to_dict(), dict(ckpt.meta), copy.deepcopy(opt.state_dict()))
                on_cycle_end(snap)
            if step % 500 == 0:
                log.info("step %d lr %.2e recon %.5f balance %.4f", step, lr, rec["l_recon"], rec["l_balance"])
    finally:
        if log_file is not None:
            log_file.close()

    ckpt.step = stop
    ckpt.config = cfg.to_dict()
    ckpt.optimizer_state = opt.state_dict()
    return ckpt


def psnr(pred: np.ndarray | torch.Tensor, target: np.ndarray | torch.Tensor, cap: float = PSNR_CAP) -> float:
    """PSNR in dB for signals in [0, 1], capped at ``cap`` (also returned for zero error)."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    mse = float(np.mean(diff * diff))
    if mse <= 0:
        return cap
    return min(cap, -10.0 * math.log10(mse))


@torch.no_grad()
def evaluate_reconstruction(model: ARGBModel, images: Iterable) -> dict:
    """Mean PSNR (unquantized) and mean absolute RGB difference on the 0-255 scale."""
    was_training = model.training
    model.eval()
    scores, diffs = [], []
    try:
        for img in images:
            x = torch.as_tensor(np.asarray(img, dtype=np.float32))
            out = model.decode(model.encode(x)).numpy()
            scores.append(psnr(out, x.numpy()))
            diffs.append(float(np.mean(np.abs(out.astype(np.float64) - x.numpy())) * 255.0))
    finally:
        model.train(was_training)
    if not scores:
        raise ValueError("empty dataset")
    return {"psnr": float(np.mean(scores)), "avg_rgb_diff_255": float(np.mean(diffs)), "count": len(scores)}


def read_log(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
