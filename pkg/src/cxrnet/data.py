"""Image ingestion: binary PGM/PPM codecs, bilinear resizing, manifests and
a synthetic dataset generator."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArtifactIOError, FormatError, InvalidArgumentError
from .tensor import Rng, Tensor, standard_normal
from .xten import read_xten

IMAGE_EXTENSIONS = (".pgm", ".ppm", ".pnm", ".xten")


def _header_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated integers after the magic.

    Returns the values and the offset of the first payload byte.
    """
    pos = 2
    values = []
    while len(values) < count:
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"expected an integer in PNM header at byte offset {start}")
        values.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after PNM header at byte offset {pos}")
    return values, pos + 1


def decode_pnm(data: bytes) -> Tensor:
    """Decode binary PGM (P5) or PPM (P6) into a ``3 x h x w`` float32 tensor in [0, 1].

    Grayscale images are replicated across the three channels.
    """
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {magic!r} at byte offset 0")
    (width, height, maxval), offset = _header_tokens(data, 3)
    if width < 1 or height < 1:
        raise FormatError(f"PNM image has empty extent {width}x{height}")
    if not 1 <= maxval <= 255:
        raise FormatError(f"PNM maxval {maxval} outside 1..255 (header ends at byte offset {offset})")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise FormatError(f"truncated PNM payload: expected {need} bytes from byte offset {offset}, "
                          f"got {len(payload)}")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    if px.max(initial=0) > maxval:
        bad = int(np.argmax(px.reshape(-1) > maxval))
        raise FormatError(f"sample exceeds maxval at byte offset {offset + bad}")
    img = px.transpose(2, 0, 1).astype(np.float32) / np.float32(maxval)
    if channels == 1:
        img = np.repeat(img, 3, axis=0)
    return Tensor(img)


def encode_pnm(pixels: np.ndarray, maxval: int = 255) -> bytes:
    """Encode a ``h x w`` (P5) or ``3 x h x w`` (P6) uint8 array."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        magic, body = b"P5", pixels
        h, w = pixels.shape
    elif pixels.ndim == 3 and pixels.shape[0] == 3:
        magic, body = b"P6", pixels.transpose(1, 2, 0)
        h, w = pixels.shape[1:]
    else:
        raise InvalidArgumentError(f"cannot encode array of shape {pixels.shape} as PNM")
    if not 1 <= maxval <= 255 or pixels.min(initial=0) < 0 or pixels.max(initial=0) > maxval:
        raise InvalidArgumentError("pixel values must lie in 0..maxval with maxval <= 255")
    header = magic + f"\n{w} {h}\n{maxval}\n".encode("ascii")
    return header + np.ascontiguousarray(body, dtype=np.uint8).tobytes()


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Half-pixel-centre bilinear resize of a ``c x h x w`` image."""
    img = x.data if isinstance(x, Tensor) else np.asarray(x)
    c, h, w = img.shape
    if h < 1 or w < 1 or out_h < 1 or out_w < 1:
        raise InvalidArgumentError("image extents must be positive")
    if (h, w) == (out_h, out_w):
        return Tensor(img.copy())
    y0, y1, wy = _axis_weights(h, out_h)
    x0, x1, wx = _axis_weights(w, out_w)
    wy = wy.reshape(1, -1, 1).astype(img.dtype)
    wx = wx.reshape(1, 1, -1).astype(img.dtype)
    rows0, rows1 = img[:, y0], img[:, y1]
    top = rows0[:, :, x0] + wx * (rows0[:, :, x1] - rows0[:, :, x0])
    bottom = rows1[:, :, x0] + wx * (rows1[:, :, x1] - rows1[:, :, x0])
    out = top + wy * (bottom - top)
    # interpolation is a convex combination; clip rounding spill
    return Tensor(np.clip(out, img.min(), img.max()))


def load_image(path, size: int | None = 224) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in IMAGE_EXTENSIONS:
        raise FormatError(f"{path}: unsupported image extension {suffix!r}")
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read image {path}: {exc.strerror or exc}") from exc
    if suffix == ".xten":
        img = read_xten(io.BytesIO(raw)).astype(np.float32)
        if img.ndim != 3:
            raise FormatError(f"{path}: XTEN image must be c x h x w")
        if img.shape[0] == 1:
            img = np.repeat(img, 3, axis=0)
        img = np.clip(img, 0.0, 1.0)
    else:
        try:
            img = decode_pnm(raw).data
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    if size is not None:
        img = resize_bilinear(img, size, size).data
    return img


@dataclass
class Manifest:
    rows: list[tuple[str, str]]

    @property
    def classes(self) -> list[str]:
        seen: dict[str, None] = {}
        for _, label in self.rows:
            seen.setdefault(label, None)
        return list(seen)

    def validate(self) -> None:
        paths = set()
        for i, (path, _label) in enumerate(self.rows, start=1):
            if not path:
                raise FormatError(f"manifest row {i}: empty path")
            if path in paths:
                raise FormatError(f"manifest row {i}: duplicate path {path!r}")
            paths.add(path)

    @classmethod
    def read(cls, path) -> "Manifest":
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                reader = csv.reader(fh)
                header = next(reader, None)
                if header != ["path", "label"]:
                    raise FormatError(f"{path}: manifest header must be 'path,label', got {header}")
                rows = []
                for i, rec in enumerate(reader, start=1):
                    if not rec:
                        continue
                    if len(rec) != 2:
                        raise FormatError(f"{path}: manifest row {i} has {len(rec)} fields")
                    rows.append((rec[0].strip(), rec[1].strip()))
        except OSError as exc:
            raise ArtifactIOError(f"cannot read manifest {path}: {exc.strerror or exc}") from exc
        manifest = cls(rows)
        manifest.validate()
        return manifest

    def write(self, path) -> None:
        lines = ["path,label"] + [f"{p},{label}" for p, label in self.rows]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def subset(self, indices) -> "Manifest":
        return Manifest([self.rows[int(i)] for i in indices])


def load_dataset(manifest_path, root=None, size: int = 224, classes: list[str] | None = None):
    """Decode, resize and one-hot encode every manifest row.

    Returns ``(images n x 3 x size x size, labels n x k, class vocabulary)``.
    Paths resolve against ``root``, defaulting to the manifest's directory.
    """
    manifest = Manifest.read(manifest_path)
    root = Path(root) if root is not None else Path(manifest_path).parent
    vocab = list(classes) if classes is not None else manifest.classes
    index = {name: i for i, name in enumerate(vocab)}
    images = np.empty((len(manifest.rows), 3, size, size), dtype=np.float32)
    labels = np.zeros((len(manifest.rows), len(vocab)), dtype=np.float32)
    for i, (rel, label) in enumerate(manifest.rows):
        if label not in index:
            raise FormatError(f"manifest row {i + 1}: label {label!r} not in class vocabulary {vocab}")
        path = root / rel
        if not path.is_file():
            raise ArtifactIOError(f"manifest row {i + 1}: image {rel!r} not found under {root}")
        images[i] = load_image(path, size)
        labels[i, index[label]] = 1.0
    return images, labels, vocab


def _pattern(k: int, classes: int, size: int) -> np.ndarray:
    """Class template: an oriented sinusoidal grating with class-specific frequency."""
    theta = math.pi * k / classes
    cycles = 2.0 + 1.5 * k
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = 2 * math.pi * cycles * (xx * math.cos(theta) + yy * math.sin(theta))
    return 0.5 + 0.3 * np.sin(phase)


def synthetic_images(classes: int, per_class: int, size: int, seed: int):
    """Yield ``(class index, sample index, uint8 image)`` in class-major order."""
    if classes < 1 or per_class < 1 or size < 1:
        raise InvalidArgumentError("classes, per_class and size must be at least 1")
    rng = Rng(seed)
    for k in range(classes):
        template = _pattern(k, classes, size)
        for i in range(per_class):
            noise = standard_normal(rng, size * size).reshape(size, size)
            img = np.clip(template + 0.08 * noise, 0.0, 1.0)
            yield k, i, np.round(img * 255).astype(np.uint8)


def gen_synthetic(out_dir, classes: int = 3, per_class: int = 10, size: int = 64, seed: int = 3) -> Manifest:
    """Write class-conditional grating images as PGM files plus ``manifest.csv``."""
    out = Path(out_dir)
    rows = []
    try:
        for k, i, img in synthetic_images(classes, per_class, size, seed):
            label = f"class{k}"
            rel = f"{label}/{label}_{i:03d}.pgm"
            (out / label).mkdir(parents=True, exist_ok=True)
            (out / rel).write_bytes(encode_pnm(img))
            rows.append((rel, label))
        manifest = Manifest(rows)
        manifest.write(out / "manifest.csv")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write synthetic dataset to {out}: {exc.strerror or exc}") from exc
    return manifest
