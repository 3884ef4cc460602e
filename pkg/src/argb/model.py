"""Mixture-of-experts aRGB autoencoder: router, experts, top-1 aggregation, linear decoder."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

SLOPE = 0.2
PINV_RTOL = 1e-6


class RankDeficientDecoder(UserWarning):
    pass


def _check_image(x: torch.Tensor, channels: int = 3) -> torch.Tensor:
    if x.dim() not in (3, 4):
        raise ValueError(f"expected CxHxW or BxCxHxW tensor, got shape {tuple(x.shape)}")
    if x.shape[-3] != channels:
        raise ValueError(f"expected {channels} channels, got {x.shape[-3]}")
    if not torch.isfinite(x).all():
        raise ValueError("input contains non-finite values")
    return x


def _batched(fn):
    """Let a BxCxHxW forward also accept a single CxHxW tensor."""

    def wrapper(self, x, *args, **kwargs):
        if x.dim() == 3:
            out = fn(self, x.unsqueeze(0), *args, **kwargs)
            return out.squeeze(0)
        return fn(self, x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


class RouterNet(nn.Module):
    """Per-pixel expert classifier with a 7x7 receptive field."""

    def __init__(self, num_experts: int):
        super().__init__()
        self.num_experts = num_experts
        self.body = nn.Sequential(
            nn.Conv2d(3, 64, 3, padding=1),
            nn.LeakyReLU(SLOPE),
            nn.Conv2d(64, 128, 3, padding=1),
            nn.BatchNorm2d(128),
            nn.LeakyReLU(SLOPE),
            nn.Conv2d(128, 256, 3, padding=1),
            nn.BatchNorm2d(256),
            nn.LeakyReLU(SLOPE),
            nn.Conv2d(256, 512, 1),
            nn.BatchNorm2d(512),
            nn.LeakyReLU(SLOPE),
            nn.Conv2d(512, num_experts, 1),
        )

    def forward(self, x):
        return torch.softmax(self.body(x), dim=1)


class ExpertNet(nn.Module):
    """Four 3x3 convolutions, 9x9 receptive field, no normalization."""

    def __init__(self, embedding_dim: int = 128):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1),
            nn.LeakyReLU(SLOPE),
            nn.Conv2d(32, 64, 3, padding=1),
            nn.LeakyReLU(SLOPE),
            nn.Conv2d(64, 128, 3, padding=1),
            nn.LeakyReLU(SLOPE),
            nn.Conv2d(128, embedding_dim, 3, padding=1),
        )

    def forward(self, x):
        return self.body(x)


class LinearDecoder(nn.Module):
    """Three stacked 1x1 convolutions; only the last carries a bias."""

    def __init__(self, embedding_dim: int = 128):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(embedding_dim, 64, 1, bias=False),
            nn.Conv2d(64, 32, 1, bias=False),
            nn.Conv2d(32, 3, 1, bias=True),
        )

    def forward(self, xi):
        return self.layers(xi)

    def collapsed(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (A, b) in float64 with A = W3 @ W2 @ W1."""
        w = [layer.weight.detach().double()[:, :, 0, 0] for layer in self.layers]
        A = w[2] @ w[1] @ w[0]
        b = self.layers[2].bias.detach().double().clone()
        return A, b


@dataclass
class EffectiveDecoder:
    """Collapsed affine decoder g(xi) = A xi + b with its row-space/nullspace projectors."""

    A: torch.Tensor
    b: torch.Tensor
    A_pinv: torch.Tensor
    P_par: torch.Tensor
    P_perp: torch.Tensor
    rank: int

    @classmethod
    def from_affine(cls, A: torch.Tensor, b: torch.Tensor, rtol: float = PINV_RTOL) -> "EffectiveDecoder":
        A64 = np.asarray(A.detach().cpu(), dtype=np.float64)
        A_pinv = np.linalg.pinv(A64, rcond=rtol)
        s = np.linalg.svd(A64, compute_uv=False)
        rank = int((s > rtol * s.max()).sum()) if s.size and s.max() > 0 else 0
        if rank < A64.shape[0]:
            warnings.warn(f"decoder weight is rank deficient (rank {rank})", RankDeficientDecoder, stacklevel=2)
        P_par = A_pinv @ A64
        P_perp = np.eye(A64.shape[1]) - P_par
        t = lambda a: torch.from_numpy(np.ascontiguousarray(a))
        return cls(t(A64), b.detach().double().cpu().clone(), t(A_pinv), t(P_par), t(P_perp), rank)

    @property
    def embedding_dim(self) -> int:
        return self.A.shape[1]

    def apply(self, xi: torch.Tensor) -> torch.Tensor:
        """A xi + b pixel-wise, computed in float64."""
        xi = xi.double()
        return torch.einsum("oc,...chw->...ohw", self.A, xi) + self.b[:, None, None]

    def project(self, P: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        if xi.shape[-3] != P.shape[1]:
            raise ValueError(f"embedding has {xi.shape[-3]} channels, matrix expects {P.shape[1]}")
        return torch.einsum("dc,...chw->...dhw", P.to(xi.dtype), xi)


def top1_masks(probabilities: torch.Tensor) -> torch.Tensor:
    """Binary one-hot masks along the expert axis (dim -3); ties go to the lowest index."""
    if probabilities.dim() not in (3, 4):
        raise ValueError(f"expected KxHxW or BxKxHxW probabilities, got {tuple(probabilities.shape)}")
    if not torch.isfinite(probabilities).all():
        raise FloatingPointError("probabilities contain non-finite values")
    k = probabilities.shape[-3]
    # torch.argmax returns the first maximal index
    idx = probabilities.argmax(dim=-3)
    masks = torch.nn.functional.one_hot(idx, k).movedim(-1, -3)
    return masks.to(probabilities.dtype)


class ARGBModel(nn.Module):
    """aRGB autoencoder.

    ``encode`` maps a 3xHxW image in [0, 1] to a CxHxW embedding by routing every
    pixel to exactly one of K experts; ``decode`` is a per-pixel affine map back to RGB.
    All forward methods accept either a single image or a batch.
    """

    def __init__(self, num_experts: int = 20, embedding_dim: int = 128):
        super().__init__()
        if num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        self.num_experts = num_experts
        self.embedding_dim = embedding_dim
        self.router = RouterNet(num_experts)
        self.experts = nn.ModuleList(ExpertNet(embedding_dim) for _ in range(num_experts))
        self.decoder = LinearDecoder(embedding_dim)

    @_batched
    def route(self, x):
        _check_image(x)
        return self.router(x)

    @_batched
    def expert_outputs(self, x):
        """All K expert embeddings stacked as BxKxCxHxW."""
        _check_image(x)
        return torch.stack([e(x) for e in self.experts], dim=1)

    def _encode(self, x):
        _check_image(x)
        probs = self.router(x)
        masks = top1_masks(probs.detach())
        xi = None
        for k, expert in enumerate(self.experts):
            # masks are constants: gradients reach only the selected expert outputs
            term = masks[:, k : k + 1] * expert(x)
            xi = term if xi is None else xi + term
        return xi, probs

    def encode_full(self, x):
        """Return (embedding, router probabilities) from a single forward pass."""
        if x.dim() == 3:
            xi, probs = self._encode(x.unsqueeze(0))
            return xi.squeeze(0), probs.squeeze(0)
        return self._encode(x)

    def encode(self, x):
        return self.encode_full(x)[0]

    def forward(self, x):
        return self.encode(x)

    @_batched
    def decode(self, xi):
        if xi.shape[-3] != self.embedding_dim:
            raise ValueError(f"embedding has {xi.shape[-3]} channels, model expects {self.embedding_dim}")
        return self.decoder(xi)

    def effective_decoder(self, rtol: float = PINV_RTOL) -> EffectiveDecoder:
        A, b = self.decoder.collapsed()
        return EffectiveDecoder.from_affine(A, b, rtol=rtol)

    def freeze(self) -> "ARGBModel":
        """Put the model in evaluation mode and stop parameter gradients (loss-backend use)."""
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    import hashlib

    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
