"""Synthetic scenes, boundary targets, Netpbm files, and checkpoints.

The synthetic generator paints overlapping axis-aligned rectangles,
circles and 2-pixel-wide strips over a background class, gives every
class a distinct base color from a fixed palette, and adds seeded
Gaussian pixel noise. Strips are drawn last so thin structures survive
overlap; they are what stresses the detail/boundary pathway.

File formats are chosen for bit-exactness: binary PPM (P6) / PGM (P5)
images with maxval 255, and a little-endian binary checkpoint with the
magic "LKAS", a named manifest, a float64 payload and a trailing CRC32.
All writes go through a temp file plus rename.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

CHECKPOINT_MAGIC = b"LKAS"
CHECKPOINT_VERSION = 1

# 16 visually distinct base colors (background first)
PALETTE = np.array([
    [0.12, 0.12, 0.12],
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.90],
    [0.92, 0.85, 0.15],
    [0.80, 0.20, 0.80],
    [0.15, 0.80, 0.80],
    [0.95, 0.55, 0.10],
    [0.55, 0.35, 0.15],
    [0.55, 0.85, 0.35],
    [0.35, 0.15, 0.60],
    [0.90, 0.60, 0.70],
    [0.45, 0.60, 0.85],
    [0.65, 0.65, 0.10],
    [0.10, 0.45, 0.30],
    [0.75, 0.75, 0.75],
])


class CheckpointError(ValueError):
    """Malformed checkpoint container."""


class CheckpointVersionError(CheckpointError):
    """Unsupported checkpoint format version."""


class CheckpointCrcError(CheckpointError):
    """Payload failed its CRC32 check."""


class CheckpointManifestError(CheckpointError):
    """Checkpoint entries do not match the target model."""


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of one deterministic synthetic dataset."""

    seed: int = 0
    count: int = 64
    height: int = 64
    width: int = 64
    class_count: int = 5
    density: float = 1.0
    min_shape: int = 10

    def validate(self):
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if not (2 <= self.class_count <= 16):
            raise ValueError(
                f"class_count must be in [2, 16], got {self.class_count}"
            )
        if self.height % 64 or self.width % 64:
            raise ValueError(
                f"height/width must be divisible by 64, got "
                f"{self.height}x{self.width}"
            )
        if self.density <= 0:
            raise ValueError(f"density must be positive, got {self.density}")
        if self.min_shape < 4:
            raise ValueError(f"min_shape must be >= 4, got {self.min_shape}")


@dataclass
class SegBatch:
    """One sample: image in [0, 1], integer labels, binary boundary mask."""

    image: np.ndarray    # (3, h, w) float64
    labels: np.ndarray   # (h, w) int32
    boundary: np.ndarray  # (h, w) uint8


def boundary_from_labels(labels, radius=2, ignore_index=None):
    """Binary mask: 1 where any pixel within Chebyshev distance `radius`
    carries a different non-ignored label."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    lab = np.asarray(labels)
    h, w = lab.shape
    mask = np.zeros((h, w), dtype=bool)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            ys0, ys1 = max(0, dy), min(h, h + dy)
            xs0, xs1 = max(0, dx), min(w, w + dx)
            a = lab[ys0:ys1, xs0:xs1]
            b = lab[ys0 - dy:ys1 - dy, xs0 - dx:xs1 - dx]
            diff = a != b
            if ignore_index is not None:
                diff &= (a != ignore_index) & (b != ignore_index)
            mask[ys0:ys1, xs0:xs1] |= diff
    if ignore_index is not None:
        mask &= lab != ignore_index
    return mask.astype(np.uint8)


def _paint_scene(rng, spec, class_offset=0):
    """Rectangles and circles, then 2-pixel strips on top.

    Classes rotate round-robin (offset by the scene index) so every class
    collects a comparable mix of shape kinds across a dataset.
    """
    h, w, k = spec.height, spec.width, spec.class_count
    labels = np.zeros((h, w), dtype=np.int32)
    yy, xx = np.mgrid[0:h, 0:w]
    lo = spec.min_shape
    slot = class_offset

    def next_class():
        nonlocal slot
        cls = 1 + slot % (k - 1)
        slot += 1
        return cls

    for _ in range(max(1, round(2 * spec.density))):
        hi = max(lo + 1, int(h * 0.6))
        rh = int(rng.integers(lo, hi + 1))
        rw = int(rng.integers(lo, hi + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        labels[y0:y0 + rh, x0:x0 + rw] = next_class()

    for _ in range(max(1, round(2 * spec.density))):
        r = int(rng.integers(max(3, lo // 2), max(4, int(h * 0.3)) + 1))
        cy = int(rng.integers(r, h - r + 1))
        cx = int(rng.integers(r, w - r + 1))
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        labels[disc] = next_class()

    for _ in range(max(1, round(spec.density))):
        cls = next_class()
        length = int(rng.integers(h // 4, h // 2 + 1))
        if rng.integers(2) == 0:
            y0 = int(rng.integers(0, h - 2 + 1))
            x0 = int(rng.integers(0, w - length + 1))
            labels[y0:y0 + 2, x0:x0 + length] = cls
        else:
            y0 = int(rng.integers(0, h - length + 1))
            x0 = int(rng.integers(0, w - 2 + 1))
            labels[y0:y0 + length, x0:x0 + 2] = cls
    return labels


def synth_dataset(spec: SynthSpec, boundary_radius=2):
    """Deterministic list of samples; identical spec, identical bytes."""
    spec.validate()
    children = np.random.SeedSequence(spec.seed).spawn(spec.count)
    out = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        labels = _paint_scene(rng, spec, class_offset=i)
        base = PALETTE[labels].transpose(2, 0, 1)
        noisy = base + rng.normal(0.0, 0.05, size=base.shape)
        image = np.clip(noisy, 0.0, 1.0)
        out.append(SegBatch(
            image=image,
            labels=labels,
            boundary=boundary_from_labels(labels, boundary_radius),
        ))
    return out


# ---------------------------------------------------------------------------
# Netpbm (binary PPM P6 / PGM P5, maxval 255)
# ---------------------------------------------------------------------------


def _atomic_write(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _parse_netpbm(raw, magic, path):
    if raw[:2] != magic:
        raise ValueError(f"{path}: bad magic {raw[:2]!r}, expected {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise ValueError(f"{path}: truncated header")
        ch = raw[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = raw.find(b"\n", pos)
            if nl < 0:
                raise ValueError(f"{path}: unterminated comment")
            pos = nl + 1
        elif ch.isdigit():
            end = pos
            while end < len(raw) and raw[end:end + 1].isdigit():
                end += 1
            fields.append(int(raw[pos:end]))
            pos = end
        else:
            raise ValueError(f"{path}: unexpected header byte {ch!r}")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ValueError(f"{path}: missing whitespace after maxval")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    if width < 1 or height < 1:
        raise ValueError(f"{path}: bad dimensions {width}x{height}")
    depth = 3 if magic == b"P6" else 1
    expect = width * height * depth
    payload = raw[pos:]
    if len(payload) < expect:
        raise ValueError(
            f"{path}: truncated payload ({len(payload)} of {expect} bytes)"
        )
    if len(payload) > expect:
        raise ValueError(f"{path}: {len(payload) - expect} trailing bytes")
    return width, height, np.frombuffer(payload, dtype=np.uint8)


def write_ppm(path, image):
    """(3, h, w) floats in [0, 1] -> binary P6; round half up to bytes."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"image must be (3, h, w), got {img.shape}")
    bytes_ = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = img.shape[1:]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    _atomic_write(path, header + bytes_.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    """Binary P6 -> (3, h, w) floats in [0, 1] (value / 255)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    w, h, flat = _parse_netpbm(raw, b"P6", path)
    return flat.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, gray):
    """(h, w) integer array (labels) -> binary P5, value = gray level."""
    arr = np.asarray(gray)
    if arr.ndim != 2:
        raise ValueError(f"gray map must be 2-D, got {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("gray values must fit in [0, 255]")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    _atomic_write(path, header + arr.astype(np.uint8).tobytes())


def read_pgm(path):
    """Binary P5 -> (h, w) uint8."""
    with open(path, "rb") as fh:
        raw = fh.read()
    w, h, flat = _parse_netpbm(raw, b"P5", path)
    return flat.reshape(h, w).copy()


# ---------------------------------------------------------------------------
# dataset directory layout: img_%05d.ppm / lbl_%05d.pgm + manifest.txt
# ---------------------------------------------------------------------------


def write_dataset(samples, out_dir, spec=None, boundary_radius=2):
    os.makedirs(out_dir, exist_ok=True)
    for i, s in enumerate(samples):
        write_ppm(os.path.join(out_dir, f"img_{i:05d}.ppm"), s.image)
        write_pgm(os.path.join(out_dir, f"lbl_{i:05d}.pgm"), s.labels)
    lines = [f"count={len(samples)}", f"boundary_radius={boundary_radius}"]
    if spec is not None:
        lines += [
            f"seed={spec.seed}",
            f"height={spec.height}",
            f"width={spec.width}",
            f"class_count={spec.class_count}",
            f"density={spec.density}",
            f"min_shape={spec.min_shape}",
        ]
    _atomic_write(os.path.join(out_dir, "manifest.txt"),
                  ("\n".join(lines) + "\n").encode("ascii"))


def read_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.txt")
    manifest = {}
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line:
                key, _, value = line.partition("=")
                manifest[key] = value
    return manifest


def load_dataset(data_dir):
    """Read a dataset directory back into samples (boundary recomputed)."""
    manifest = read_manifest(data_dir)
    count = int(manifest["count"])
    radius = int(manifest.get("boundary_radius", 2))
    samples = []
    for i in range(count):
        image = read_ppm(os.path.join(data_dir, f"img_{i:05d}.ppm"))
        labels = read_pgm(os.path.join(data_dir, f"lbl_{i:05d}.pgm")).astype(np.int32)
        samples.append(SegBatch(
            image=image,
            labels=labels,
            boundary=boundary_from_labels(labels, radius),
        ))
    return samples, manifest


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _model_entries(model):
    """(name, array, trainable) triples: parameters, then norm statistics."""
    for name, p in model.named_parameters():
        yield name, p.data, True
    for name, b in model.named_buffers():
        yield name, b, False


def save_checkpoint(model, path):
    """Serialize the parameter tree (plus running stats) bit-exactly."""
    manifest = bytearray()
    payload = bytearray()
    count = 0
    offset = 0
    for name, arr, trainable in _model_entries(model):
        nameb = name.encode("utf-8")
        manifest += struct.pack("<H", len(nameb)) + nameb
        manifest += struct.pack("<BB", int(trainable), arr.ndim)
        manifest += struct.pack(f"<{arr.ndim}I", *arr.shape)
        manifest += struct.pack("<Q", offset)
        payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
        offset += arr.size
        count += 1
    blob = (
        CHECKPOINT_MAGIC
        + struct.pack("<II", CHECKPOINT_VERSION, count)
        + bytes(manifest)
        + struct.pack("<Q", len(payload))
        + bytes(payload)
        + struct.pack("<I", zlib.crc32(bytes(payload)))
    )
    _atomic_write(path, blob)


def load_checkpoint(path):
    """Parse a checkpoint; returns {name: (array, trainable)} in file order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: version {version}, expected {CHECKPOINT_VERSION}"
        )
    pos = 12
    entries = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            trainable, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            (offset,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            entries.append((name, shape, bool(trainable), offset))
        (payload_len,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        payload = raw[pos:pos + payload_len]
        if len(payload) != payload_len:
            raise CheckpointError(f"{path}: truncated payload")
        (crc,) = struct.unpack_from("<I", raw, pos + payload_len)
    except struct.error as err:
        raise CheckpointError(f"{path}: truncated manifest") from err
    if zlib.crc32(payload) != crc:
        raise CheckpointCrcError(f"{path}: payload CRC mismatch")
    out = {}
    for name, shape, trainable, offset in entries:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=size,
                            offset=offset * 8).reshape(shape)
        out[name] = (arr.astype(np.float64), trainable)
    return out


def checkpoint_scalar_count(path, trainable_only=True):
    """Number of scalars in a checkpoint's (trainable) manifest entries."""
    entries = load_checkpoint(path)
    return sum(arr.size for arr, trainable in entries.values()
               if trainable or not trainable_only)


def load_into_model(model, path):
    """Restore parameters and norm statistics; refuses any mismatch."""
    entries = load_checkpoint(path)
    seen = set()
    for name, arr, trainable in _model_entries(model):
        if name not in entries:
            raise CheckpointManifestError(f"checkpoint is missing entry {name!r}")
        value, _ = entries[name]
        if value.shape != arr.shape:
            raise CheckpointManifestError(
                f"shape mismatch for {name!r}: checkpoint {value.shape}, "
                f"model {arr.shape}"
            )
        seen.add(name)
    extra = [n for n in entries if n not in seen]
    if extra:
        raise CheckpointManifestError(f"checkpoint has unknown entry {extra[0]!r}")
    for name, p in model.named_parameters():
        p.data = entries[name][0].copy()
        p.grad = None
    for name, buf in model.named_buffers():
        buf[...] = entries[name][0]
    return model


# ---------------------------------------------------------------------------
# label rendering
# ---------------------------------------------------------------------------


def colorize(labels, palette=None):
    """Deterministic class -> RGB map: (h, w) labels -> (3, h, w) floats."""
    pal = PALETTE if palette is None else np.asarray(palette)
    lab = np.asarray(labels)
    k = int(lab.max()) + 1 if lab.size else 0
    if k > len(pal):
        raise ValueError(f"{k} classes exceed palette size {len(pal)}")
    return pal[lab].transpose(2, 0, 1).astype(np.float64)


def render_overlay(image, labels, alpha, palette=None):
    """(1 - alpha) * image + alpha * colorized labels."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return (1.0 - alpha) * np.asarray(image) + alpha * colorize(labels, palette)
