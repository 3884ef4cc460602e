"""Patch extraction, augmentation and synthetic patch generation.

Images travel through this module as float32 arrays of shape (3, H, W) in [0, 1].
On disk a patch store is a directory of 8-bit PNG files plus ``manifest.jsonl``
with one ``{"file", "source", "x", "y"}`` record per patch.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}
MANIFEST = "manifest.jsonl"


class NoPatchesError(RuntimeError):
    """Raised when a patch source yields nothing usable."""


def to_float(img_u8: np.ndarray) -> np.ndarray:
    """HxWx3 uint8 -> 3xHxW float32 in [0, 1]."""
    return np.ascontiguousarray(img_u8[..., :3].transpose(2, 0, 1), dtype=np.float32) / np.float32(255.0)


def to_uint8(x: np.ndarray) -> np.ndarray:
    """3xHxW float in [0, 1] -> HxWx3 uint8 (rounded, clipped)."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return to_float(np.asarray(im.convert("RGB")))


def save_image(path, x: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(x)).save(path)
    return path


@dataclass(frozen=True)
class PatchRecord:
    file: str
    source: str
    x: int
    y: int


@dataclass
class PatchStore:
    root: Path
    records: list[PatchRecord]

    def __len__(self):
        return len(self.records)

    def write_manifest(self) -> None:
        with open(self.root / MANIFEST, "w") as f:
            for r in self.records:
                f.write(json.dumps({"file": r.file, "source": r.source, "x": r.x, "y": r.y}) + "\n")

    @classmethod
    def open(cls, root) -> "PatchStore":
        root = Path(root)
        mpath = root / MANIFEST
        if not mpath.exists():
            raise FileNotFoundError(f"no {MANIFEST} in {root}")
        records = []
        with open(mpath) as f:
            for line in f:
                if line.strip():
                    d = json.loads(line)
                    records.append(PatchRecord(d["file"], d["source"], int(d["x"]), int(d["y"])))
        missing = [r.file for r in records if not (root / r.file).exists()]
        if missing:
            raise FileNotFoundError(f"patch store {root} lists missing files: {missing[:3]}")
        return cls(root, records)

    def load(self, index: int) -> np.ndarray:
        return load_image(self.root / self.records[index].file)

    def arrays(self) -> np.ndarray:
        """All patches stacked as N x 3 x h x w float32."""
        if not self.records:
            raise NoPatchesError(f"patch store {self.root} is empty")
        out = [self.load(i) for i in range(len(self))]
        shapes = {a.shape for a in out}
        if len(shapes) != 1:
            raise ValueError(f"patch sizes are not uniform in {self.root}: {sorted(shapes)}")
        return np.stack(out)


def grid_origins(height: int, width: int, size: int, stride: int) -> list[tuple[int, int]]:
    """Top-left (x, y) of every size x size crop on a stride grid, row-major."""
    if height < size or width < size:
        return []
    ys = range(0, height - size + 1, stride)
    xs = range(0, width - size + 1, stride)
    return [(x, y) for y in ys for x in xs]


def extract_patches(image_dir, size: int, stride: int, out_dir) -> PatchStore:
    """Crop every image in ``image_dir`` on a regular grid and write a patch store."""
    if size < 1 or stride < 1:
        raise ValueError("size and stride must be positive")
    image_dir, out_dir = Path(image_dir), Path(out_dir)
    if not image_dir.is_dir():
        raise FileNotFoundError(f"image directory not found: {image_dir}")
    files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for path in files:
        try:
            with Image.open(path) as im:
                img = np.asarray(im.convert("RGB"))
        except (UnidentifiedImageError, OSError) as exc:
            warnings.warn(f"skipping unreadable image {path.name}: {exc}")
            continue
        h, w = img.shape[:2]
        origins = grid_origins(h, w, size, stride)
        if not origins:
            warnings.warn(f"skipping {path.name}: {h}x{w} is smaller than patch size {size}")
            continue
        for x, y in origins:
            name = f"{path.stem}_{y:05d}_{x:05d}.png"
            Image.fromarray(img[y : y + size, x : x + size]).save(out_dir / name)
            records.append(PatchRecord(name, path.name, x, y))
    if not records:
        raise NoPatchesError(f"no patches of size {size} could be extracted from {image_dir}")
    store = PatchStore(out_dir, records)
    store.write_manifest()
    return store


@dataclass
class AugmentPolicy:
    crop_size: int = 256
    hflip: bool = True
    vflip: bool = True
    rot90: bool = True


def augment(patch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random crop, then horizontal/vertical flips, then a quarter-turn rotation."""
    _, h, w = patch.shape
    s = policy.crop_size
    if s > h or s > w:
        raise ValueError(f"patch {h}x{w} is smaller than crop size {s}")
    y = int(rng.integers(0, h - s + 1))
    x = int(rng.integers(0, w - s + 1))
    out = patch[:, y : y + s, x : x + s]
    if policy.hflip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    if policy.vflip and rng.random() < 0.5:
        out = out[:, ::-1, :]
    if policy.rot90:
        out = np.rot90(out, int(rng.integers(0, 4)), axes=(1, 2))
    return np.ascontiguousarray(out)


SYNTH_KINDS = ("gradients", "checker", "noise")


def synthesize(kind: str, count: int, size: int, rng: np.random.Generator, cell: int = 8) -> np.ndarray:
    """Generate ``count`` float patches (N x 3 x size x size) of the given kind."""
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    if count < 1:
        raise ValueError("count must be >= 1")
    out = np.empty((count, 3, size, size), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    for i in range(count):
        if kind == "gradients":
            c0, c1 = rng.random(3), rng.random(3)
            theta = rng.uniform(0, 2 * np.pi)
            t = np.cos(theta) * xx + np.sin(theta) * yy
            t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
            out[i] = c0[:, None, None] + (c1 - c0)[:, None, None] * t
        elif kind == "checker":
            c0, c1 = rng.random(3), rng.random(3)
            board = ((np.arange(size)[:, None] // cell + np.arange(size)[None, :] // cell) % 2).astype(bool)
            out[i] = np.where(board[None], c1[:, None, None], c0[:, None, None])
        else:
            out[i] = np.clip(rng.normal(0.5, 0.5, size=(3, size, size)), 0.0, 1.0)
    return out


def synth_patches(kind: str, count: int, size: int, rng: np.random.Generator, out_dir, cell: int = 8) -> PatchStore:
    patches = synthesize(kind, count, size, rng, cell=cell)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, p in enumerate(patches):
        name = f"{kind}_{i:05d}.png"
        save_image(out_dir / name, p)
        records.append(PatchRecord(name, f"synth:{kind}", 0, 0))
    store = PatchStore(out_dir, records)
    store.write_manifest()
    return store


# photos bundled with scikit-image; used to make small desk-scale corpora without downloads
TRAIN_PHOTOS = ("astronaut", "coffee", "rocket", "immunohistochemistry", "hubble_deep_field", "retina")
HELDOUT_PHOTOS = ("chelsea", "colorwheel")


def sample_photo(name: str) -> np.ndarray:
    import skimage.data

    return to_float(getattr(skimage.data, name)())


def photo_patches(names, size: int, stride: int) -> np.ndarray:
    """Grid crops from the named bundled photos, N x 3 x size x size."""
    crops = []
    for name in names:
        img = sample_photo(name)
        for x, y in grid_origins(img.shape[1], img.shape[2], size, stride):
            crops.append(img[:, y : y + size, x : x + size])
    if not crops:
        raise NoPatchesError("no photo patches produced")
    return np.stack(crops).astype(np.float32)


def desk_corpus(size: int, seed: int, heldout: bool = False) -> np.ndarray:
    """Synthetic + small-photo patch mix for desk-scale runs.

    The training mix and the held-out mix use disjoint photos and independent seeds.
    """
    rng = np.random.default_rng([seed, 1 if heldout else 0])
    if heldout:
        photos = photo_patches(HELDOUT_PHOTOS, size, 2 * size)
        synth = [synthesize(k, 4, size, rng) for k in ("gradients", "checker")]
    else:
        photos = photo_patches(TRAIN_PHOTOS, size, size)
        synth = [synthesize(k, 64, size, rng) for k in ("gradients", "checker")]
    return np.concatenate([photos, *synth]).astype(np.float32)
