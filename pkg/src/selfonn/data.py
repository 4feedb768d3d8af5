"""Image I/O, noisy/clean pair synthesis, and patch extraction.

Binary 8-bit PGM (P5) and PPM (P6) are the native formats; PNG works when
Pillow is installed. Loaded values are scaled to [0, 1] and travel as
(1, c, h, w) float arrays. Noise synthesis is seeded through numpy's PCG64
generator, so identical seeds reproduce identical noise fields bit for bit.

Paired datasets live in a directory of `<id>_clean.*` / `<id>_noisy.*`
files listed by a manifest CSV with columns id, clean, noisy (paths
relative to the manifest).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ImageIOError",
    "UnsupportedImageFormat",
    "CorruptImageHeader",
    "ImageDimensionOverflow",
    "TruncatedImageData",
    "load_image",
    "save_image",
    "ImagePair",
    "NoiseModel",
    "synthesize_pair",
    "PatchSet",
    "extract_patches",
    "read_manifest",
    "write_manifest",
    "load_pairs",
    "synthetic_clean_image",
    "make_pairs",
    "make_synthetic_corpus",
]

MAX_DIM = 1 << 16


class ImageIOError(Exception):
    pass


class UnsupportedImageFormat(ImageIOError):
    pass


class CorruptImageHeader(ImageIOError):
    pass


class ImageDimensionOverflow(ImageIOError):
    pass


class TruncatedImageData(ImageIOError):
    pass


def _read_header_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Parse whitespace/comment-separated integer tokens after the magic."""
    tokens: list[int] = []
    pos = 2  # past the 2-byte magic
    while len(tokens) < count:
        if pos >= len(data):
            raise CorruptImageHeader("truncated header")
        ch = data[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise CorruptImageHeader("unterminated header comment")
            pos = nl + 1
        elif ch.isdigit():
            end = pos
            while end < len(data) and data[end : end + 1].isdigit():
                end += 1
            tokens.append(int(data[pos:end]))
            pos = end
        else:
            raise CorruptImageHeader(f"unexpected byte {ch!r} in header")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise CorruptImageHeader("missing whitespace after maxval")
    return tokens, pos + 1


def load_image(path) -> np.ndarray:
    """Load an image as a (1, c, h, w) float64 array scaled to [0, 1]."""
    path = os.fspath(path)
    if path.lower().endswith(".png"):
        return _load_png(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 2:
        raise CorruptImageHeader("file shorter than a magic number")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedImageFormat(f"unsupported magic {magic!r}; expected P5 or P6")
    channels = 1 if magic == b"P5" else 3
    (w, h, maxval), offset = _read_header_tokens(data, 3)
    if not (1 <= w < MAX_DIM and 1 <= h < MAX_DIM):
        raise ImageDimensionOverflow(f"image dimensions {w}x{h} out of range")
    if not (1 <= maxval <= 255):
        raise UnsupportedImageFormat(f"maxval {maxval} is not 8-bit")
    expected = w * h * channels
    raw = data[offset : offset + expected]
    if len(raw) < expected:
        raise TruncatedImageData(
            f"pixel data truncated: expected {expected} bytes, found {len(raw)}"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / maxval
    if channels == 1:
        return pixels.reshape(1, 1, h, w)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1)[None]


def _load_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise UnsupportedImageFormat(
            "PNG support requires Pillow; install it or use PGM/PPM"
        ) from exc
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return arr[None, None]
    return arr.transpose(2, 0, 1)[None]


def save_image(t: np.ndarray, path) -> None:
    """Write a [0, 1] image tensor as 8-bit PGM/PPM (or PNG with Pillow).

    Values on the 1/255 grid survive a save/load round trip exactly.
    """
    path = os.fspath(path)
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"can only save a single image, got batch {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected 1- or 3-channel image, got shape {t.shape}")
    quantized = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if path.lower().endswith(".png"):
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover
            raise UnsupportedImageFormat("PNG support requires Pillow") from exc
        if quantized.shape[0] == 1:
            Image.fromarray(quantized[0], mode="L").save(path)
        else:
            Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB").save(path)
        return
    c, h, w = quantized.shape
    magic = b"P5" if c == 1 else b"P6"
    payload = quantized[0] if c == 1 else quantized.transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n" + f"{w} {h}\n255\n".encode("ascii"))
        fh.write(payload.tobytes())


@dataclass
class ImagePair:
    """Aligned clean/noisy tensors, both (1, c, h, w) in [0, 1]."""

    clean: np.ndarray
    noisy: np.ndarray
    pair_id: str

    def __post_init__(self):
        if self.clean.shape != self.noisy.shape:
            raise ValueError(
                f"pair {self.pair_id!r}: clean {self.clean.shape} vs noisy {self.noisy.shape}"
            )


@dataclass
class NoiseModel:
    """Synthetic noise description.

    `gaussian` adds stationary noise of standard deviation sigma;
    `poisson_gaussian` makes the standard deviation signal-dependent,
    sqrt(alpha * clean + sigma^2), so bright regions are noisier.
    """

    kind: str = "gaussian"
    sigma: float = 0.1
    alpha: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "poisson_gaussian"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0 or self.alpha < 0:
            raise ValueError("sigma and alpha must be >= 0")

    def noise_field(self, clean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """The additive noise realization before clipping."""
        std = self.sigma
        if self.kind == "poisson_gaussian":
            std = np.sqrt(self.alpha * clean + self.sigma**2)
        return std * rng.standard_normal(clean.shape)


def synthesize_pair(clean: np.ndarray, model: NoiseModel, pair_id: str = "synth") -> ImagePair:
    """Corrupt a clean [0, 1] image with the model's noise, clipped to [0, 1]."""
    clean = np.asarray(clean, dtype=np.float64)
    rng = np.random.default_rng(model.seed)
    noisy = np.clip(clean + model.noise_field(clean, rng), 0.0, 1.0)
    return ImagePair(clean=clean.copy(), noisy=noisy, pair_id=pair_id)


@dataclass
class PatchSet:
    """Aligned clean/noisy patch stacks of shape (count, c, p, p).

    `meta` records (source id, top, left) per patch so any patch can be
    traced back to its window.
    """

    clean: np.ndarray
    noisy: np.ndarray
    meta: list[tuple[str, int, int]]

    def __len__(self):
        return self.clean.shape[0]

    def subset(self, indices) -> "PatchSet":
        indices = np.asarray(indices)
        return PatchSet(
            clean=self.clean[indices],
            noisy=self.noisy[indices],
            meta=[self.meta[i] for i in indices],
        )


def extract_patches(
    pairs: list[ImagePair], patch_size: int, per_image: int, seed: int = 0
) -> PatchSet:
    """Sample aligned random patches, `per_image` from every pair.

    Corners are uniform over valid positions; each image draws from its own
    generator spawned off the master seed, so extraction parallelizes
    without changing the result.
    """
    if patch_size < 1 or per_image < 1:
        raise ValueError("patch_size and per_image must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(len(pairs))
    clean_out, noisy_out, meta = [], [], []
    for pair, stream in zip(pairs, streams):
        _, c, h, w = pair.clean.shape
        if h < patch_size or w < patch_size:
            raise ValueError(
                f"image {pair.pair_id!r} is {h}x{w}, smaller than patch size {patch_size}"
            )
        rng = np.random.default_rng(stream)
        ys = rng.integers(0, h - patch_size + 1, size=per_image)
        xs = rng.integers(0, w - patch_size + 1, size=per_image)
        for y, x in zip(ys, xs):
            clean_out.append(pair.clean[0, :, y : y + patch_size, x : x + patch_size])
            noisy_out.append(pair.noisy[0, :, y : y + patch_size, x : x + patch_size])
            meta.append((pair.pair_id, int(y), int(x)))
    return PatchSet(clean=np.stack(clean_out), noisy=np.stack(noisy_out), meta=meta)


# -- manifests ---------------------------------------------------------------


def write_manifest(directory, entries) -> str:
    """Write manifest.csv for (id, clean_filename, noisy_filename) rows."""
    path = os.path.join(os.fspath(directory), "manifest.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "clean", "noisy"])
        for row in entries:
            writer.writerow(row)
    return path


def read_manifest(path) -> list[tuple[str, str, str]]:
    """Manifest rows as (id, absolute clean path, absolute noisy path)."""
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["id", "clean", "noisy"]:
            raise ValueError(f"manifest {path} must start with header id,clean,noisy")
        for row in reader:
            if not row:
                continue
            pid, clean_rel, noisy_rel = row[0], row[1], row[2]
            rows.append(
                (pid, os.path.join(base, clean_rel), os.path.join(base, noisy_rel))
            )
    return rows


def load_pairs(manifest_path) -> list[ImagePair]:
    return [
        ImagePair(clean=load_image(cp), noisy=load_image(np_), pair_id=pid)
        for pid, cp, np_ in read_manifest(manifest_path)
    ]


# -- synthetic corpus --------------------------------------------------------


def synthetic_clean_image(
    h: int, w: int, rng: np.random.Generator, channels: int = 1
) -> np.ndarray:
    """Procedural clean image: smooth cosine texture plus a few hard shapes.

    Gives the denoiser both low-frequency structure and edges to preserve.
    Returned shape is (1, channels, h, w), values in [0.05, 0.95].
    """
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) / max(h, w)
    planes = []
    for _ in range(channels):
        img = np.zeros((h, w))
        for _ in range(6):
            fy, fx = rng.uniform(-5.0, 5.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            img += rng.uniform(0.2, 0.6) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
        for _ in range(3):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            radius = rng.uniform(0.08, 0.22)
            mask = (yy * max(h, w) / h - cy) ** 2 + (xx * max(h, w) / w - cx) ** 2 < radius**2
            img[mask] += rng.uniform(-0.8, 0.8)
        lo, hi = img.min(), img.max()
        img = (img - lo) / (hi - lo) if hi > lo else np.full_like(img, 0.5)
        planes.append(0.05 + 0.9 * img)
    return np.stack(planes)[None]


def make_pairs(
    count: int,
    h: int,
    w: int,
    model: NoiseModel,
    seed: int = 0,
    channels: int = 1,
) -> list[ImagePair]:
    """In-memory synthetic corpus of clean/noisy pairs."""
    master = np.random.SeedSequence(seed)
    img_streams = master.spawn(count)
    noise_streams = np.random.SeedSequence(model.seed).spawn(count)
    pairs = []
    for i in range(count):
        clean = synthetic_clean_image(h, w, np.random.default_rng(img_streams[i]), channels)
        rng = np.random.default_rng(noise_streams[i])
        noisy = np.clip(clean + model.noise_field(clean, rng), 0.0, 1.0)
        pairs.append(ImagePair(clean=clean, noisy=noisy, pair_id=f"synth{i:04d}"))
    return pairs


def make_synthetic_corpus(
    out_dir,
    count: int,
    h: int,
    w: int,
    model: NoiseModel,
    seed: int = 0,
    channels: int = 1,
) -> str:
    """Write a synthetic paired dataset plus manifest; returns manifest path."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    ext = ".pgm" if channels == 1 else ".ppm"
    entries = []
    for pair in make_pairs(count, h, w, model, seed=seed, channels=channels):
        clean_name = f"{pair.pair_id}_clean{ext}"
        noisy_name = f"{pair.pair_id}_noisy{ext}"
        save_image(pair.clean, os.path.join(out_dir, clean_name))
        save_image(pair.noisy, os.path.join(out_dir, noisy_name))
        entries.append((pair.pair_id, clean_name, noisy_name))
    return write_manifest(out_dir, entries)
