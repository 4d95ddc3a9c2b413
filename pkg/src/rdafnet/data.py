"""Image I/O, paired-directory loading, synthetic motion blur and augmentation.

Images are held as float32 arrays of shape (1, 3, H, W) in [-1, 1].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .metrics import to_uint8

IMAGE_SUFFIXES = (".png",)


@dataclass
class ImagePair:
    blurred: np.ndarray
    sharp: np.ndarray
    id: str

    def __post_init__(self):
        if self.blurred.shape != self.sharp.shape:
            raise ValueError(f"pair {self.id}: blurred {self.blurred.shape} vs sharp {self.sharp.shape}")
        for name, arr in (("blurred", self.blurred), ("sharp", self.sharp)):
            if arr.size and (arr.min() < -1.0 or arr.max() > 1.0):
                raise ValueError(f"pair {self.id}: {name} values outside [-1, 1]")


@dataclass(frozen=True)
class BlurSpec:
    kernel_len: int = 9
    angle: float = 0.0
    n_subframes: int = 9
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.kernel_len <= 31:
            raise ValueError(f"kernel_len must be in 1..31, got {self.kernel_len}")
        if self.n_subframes < 2:
            raise ValueError(f"n_subframes must be >= 2, got {self.n_subframes}")


# ---------------------------------------------------------------------------
# PNG


def u8_to_float(img: np.ndarray) -> np.ndarray:
    return (np.asarray(img, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def read_png(path) -> np.ndarray:
    """Decode an image file to a (1, 3, H, W) float32 array in [-1, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    return u8_to_float(rgb).transpose(2, 0, 1)[None].copy()


def write_png(path, img: np.ndarray) -> None:
    """Encode a (1, 3, H, W) or (3, H, W) array in [-1, 1] as 8-bit RGB."""
    arr = np.asarray(img)
    if arr.ndim == 4:
        arr = arr[0]
    Image.fromarray(to_uint8(arr).transpose(1, 2, 0), mode="RGB").save(path)


def write_gray_png(path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# paired directories


class PairDir:
    """Pairs from ``root/blur/*.png`` and ``root/sharp/*.png`` matched by filename.

    Files are decoded on access; iteration is in filename order.
    """

    def __init__(self, root):
        self.root = Path(root)
        blur_dir, sharp_dir = self.root / "blur", self.root / "sharp"
        for d in (blur_dir, sharp_dir):
            if not d.is_dir():
                raise FileNotFoundError(f"missing directory {d}")
        blur = {p.name for p in blur_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
        sharp = {p.name for p in sharp_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
        for name in sorted(blur ^ sharp):
            side = "sharp" if name in blur else "blur"
            warnings.warn(f"{name}: no counterpart in {side}/, skipped", stacklevel=2)
        self.names = sorted(blur & sharp)

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, i: int) -> ImagePair:
        name = self.names[i]
        return ImagePair(
            read_png(self.root / "blur" / name),
            read_png(self.root / "sharp" / name),
            Path(name).stem,
        )

    def __iter__(self) -> Iterator[ImagePair]:
        for i in range(len(self)):
            yield self[i]


def load_pair_dir(root) -> PairDir:
    return PairDir(root)


def save_pair_dir(root, pairs) -> None:
    root = Path(root)
    (root / "blur").mkdir(parents=True, exist_ok=True)
    (root / "sharp").mkdir(parents=True, exist_ok=True)
    ids = []
    for p in pairs:
        write_png(root / "blur" / f"{p.id}.png", p.blurred)
        write_png(root / "sharp" / f"{p.id}.png", p.sharp)
        ids.append(p.id)
    write_manifest(root / "manifest.txt", ids)


def write_manifest(path, ids) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


def read_manifest(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


# ---------------------------------------------------------------------------
# synthetic blur


def motion_kernel(length: int, angle: float, n_subframes: int | None = None) -> np.ndarray:
    """Linear motion kernel: ``n_subframes`` samples along a centred segment, bilinearly splatted."""
    if length <= 1:
        return np.ones((1, 1))
    n = n_subframes or length
    size = length if length % 2 else length + 1
    c = (size - 1) / 2
    k = np.zeros((size, size))
    t = np.linspace(-(length - 1) / 2, (length - 1) / 2, n)
    xs = c + t * np.cos(angle)
    ys = c - t * np.sin(angle)
    for x, y in zip(xs, ys):
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                if wy * wx > 0:
                    k[y0 + dy, x0 + dx] += wy * wx
    return k / k.sum()


def blur_image(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolve each channel with reflective borders, then restore the global mean.

    Point-symmetric kernels need a correction of order 1e-4 or less at the
    corners, where the reflected borders are not counted symmetrically.
    """
    arr = np.asarray(img, dtype=np.float64)
    lead = arr.shape[:-2]
    planes = arr.reshape(-1, *arr.shape[-2:])
    out = np.stack([ndimage.convolve(p, kernel, mode="reflect") for p in planes])
    out += planes.mean(axis=(1, 2), keepdims=True) - out.mean(axis=(1, 2), keepdims=True)
    return out.reshape(*lead, *arr.shape[-2:])


def synth_blur(sharp: np.ndarray, spec: BlurSpec, pair_id: str = "synth") -> ImagePair:
    h, w = sharp.shape[-2:]
    k = motion_kernel(spec.kernel_len, spec.angle, spec.n_subframes)
    if k.shape[0] > h or k.shape[1] > w:
        raise ValueError(f"kernel {k.shape} larger than image {h}x{w}")
    blurred = np.clip(blur_image(sharp, k), -1.0, 1.0).astype(np.float32)
    return ImagePair(blurred, np.asarray(sharp, dtype=np.float32).copy(), pair_id)


def procedural_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Gradient background with rectangles, ellipses and thin strokes; (1, 3, size, size) in [-1, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = np.zeros((size, size, 3))
    for c in range(3):
        a, b, o = rng.uniform(-0.5, 0.5, 3)
        base[:, :, c] = o + 127.5 / 255 + a * xx + b * yy
    im = Image.fromarray(np.clip(base * 255, 0, 255).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(im)

    def color():
        return tuple(int(v) for v in rng.integers(0, 256, 3))

    def box(min_side):
        x0, y0 = rng.integers(0, size - min_side, 2)
        x1 = x0 + rng.integers(min_side, max(min_side + 1, size // 2))
        y1 = y0 + rng.integers(min_side, max(min_side + 1, size // 2))
        return [int(x0), int(y0), int(min(x1, size - 1)), int(min(y1, size - 1))]

    for _ in range(int(rng.integers(3, 7))):
        draw.rectangle(box(max(2, size // 16)), fill=color())
    for _ in range(int(rng.integers(1, 4))):
        draw.ellipse(box(max(2, size // 16)), fill=color())
    # text-like strokes
    for _ in range(int(rng.integers(4, 10))):
        pts = [tuple(int(v) for v in rng.integers(0, size, 2))]
        for _ in range(int(rng.integers(1, 4))):
            step = rng.integers(-size // 6, size // 6 + 1, 2)
            pts.append(tuple(int(np.clip(p + s, 0, size - 1)) for p, s in zip(pts[-1], step)))
        draw.line(pts, fill=color(), width=int(rng.integers(1, 3)))
    return u8_to_float(np.asarray(im)).transpose(2, 0, 1)[None].copy()


def random_blur_spec(rng: np.random.Generator, size: int, max_len: int = 13) -> BlurSpec:
    max_len = int(min(max_len, 31, size if size % 2 else size - 1))
    length = int(rng.integers(min(5, max_len), max_len + 1))
    return BlurSpec(kernel_len=length, angle=float(rng.uniform(0, np.pi)), n_subframes=2 * length + 1,
                    seed=int(rng.integers(0, 2 ** 63)))


def synth_dataset(n: int, size: int, seed: int, max_len: int = 13) -> list[ImagePair]:
    """Procedural sharp images blurred with random linear motion; pair ``i`` depends only on (seed, i)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if size % 2 or size < 2:
        raise ValueError(f"size must be even, got {size}")
    pairs = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        sharp = procedural_image(size, rng)
        spec = random_blur_spec(rng, size, max_len)
        pairs.append(synth_blur(sharp, spec, pair_id=f"synth_{seed}_{i:04d}"))
    return pairs


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class Transform:
    top: int
    left: int
    crop: int
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0


def sample_transform(rng: np.random.Generator, h: int, w: int, crop: int) -> Transform:
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    hflip, vflip = (bool(b) for b in rng.integers(0, 2, 2))
    return Transform(top, left, crop, hflip, vflip, int(rng.integers(0, 4)))


def apply_transform(img: np.ndarray, t: Transform) -> np.ndarray:
    out = img[..., t.top : t.top + t.crop, t.left : t.left + t.crop]
    if t.hflip:
        out = out[..., :, ::-1]
    if t.vflip:
        out = out[..., ::-1, :]
    if t.rot90:
        out = np.rot90(out, t.rot90, axes=(-2, -1))
    return np.ascontiguousarray(out)


def augment(pair: ImagePair, rng: np.random.Generator, crop: int = 256) -> ImagePair:
    """Same random crop, flips and 90-degree rotation for both images of the pair."""
    h, w = pair.sharp.shape[-2:]
    t = sample_transform(rng, h, w, crop)
    return ImagePair(apply_transform(pair.blurred, t), apply_transform(pair.sharp, t), pair.id)


def pad_to_even(img: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad the bottom/right edge to even H and W; returns the original size."""
    h, w = img.shape[-2:]
    ph, pw = h % 2, w % 2
    if ph or pw:
        pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
        img = np.pad(img, pad, mode="reflect" if min(h, w) > 1 else "edge")
    return img, (h, w)
