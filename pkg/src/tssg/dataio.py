"""Images, masks, manifests, checkpoints and the synthetic dataset.

Checkpoint layout (little-endian throughout)::

    b"TSSG"                      magic
    u16                          format version
    u32 + bytes                  metadata, UTF-8 JSON
    u32                          tensor count
    per tensor:
        u16 + bytes              name, UTF-8
        u8                       dtype code (1 = float32)
        u8                       rank
        rank x u32               shape
        u64                      payload length in bytes
        payload                  row-major float32

Manifest: one record per line, tab separated
``image  roi  binary  multiclass  split`` with ``-`` for an absent mask.
Relative paths resolve against the manifest's directory.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

PathLike = Union[str, os.PathLike]

MAGIC = b"TSSG"
FORMAT_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4")}

CLASS_COLORS = np.array([[0, 0, 0], [255, 0, 0], [0, 255, 0]], dtype=np.int16)
COLOR_TOLERANCE = 30

LUMA = np.array([0.299, 0.587, 0.114])

MASK_KINDS = ("roi", "binary", "multiclass")


class DataError(ValueError):
    """Unreadable or inconsistent input data."""


class CheckpointError(DataError):
    pass


# ---------------------------------------------------------------------------
# rasters


def _open_raster(path: PathLike) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except Exception as exc:  # PIL raises a zoo of types for damaged files
        raise DataError(f"{path}: cannot decode image ({exc})") from exc
    return img


def load_image(path: PathLike, color: bool = False) -> np.ndarray:
    """Read an 8/16-bit grayscale or RGB raster as float32 in [0, 1].

    RGB input is reduced to luminance unless ``color`` is set, in which case
    an [H, W, 3] array is returned (grayscale input is then replicated).
    """
    img = _open_raster(path)
    mode = img.mode
    if mode in ("I;16", "I;16B", "I;16L"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
    elif mode == "I":
        raw = np.asarray(img, dtype=np.float64)
        if raw.min() < 0 or raw.max() > 65535:
            raise DataError(f"{path}: 32-bit integer raster outside the 16-bit range")
        arr = raw / 65535.0
    elif mode in ("L", "P", "1"):
        arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    elif mode in ("RGB", "RGBA", "LA"):
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    else:
        raise DataError(f"{path}: unsupported raster mode {mode!r}")
    if arr.ndim == 3 and not color:
        arr = arr @ LUMA
    elif arr.ndim == 2 and color:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return np.ascontiguousarray(np.clip(arr, 0.0, 1.0).astype(np.float32))


def save_image(plane: np.ndarray, path: PathLike, bits: int = 8) -> None:
    """Write a [H, W] or [H, W, 3] plane in [0, 1] as an 8- or 16-bit PNG."""
    arr = np.clip(np.asarray(plane, dtype=np.float64), 0.0, 1.0)
    if bits == 8:
        q = np.round(arr * 255.0).astype(np.uint8)
        img = Image.fromarray(q)
    elif bits == 16:
        if arr.ndim != 2:
            raise ValueError("16-bit output is grayscale only")
        q = np.round(arr * 65535.0).astype(np.uint16)
        img = Image.fromarray(q)
    else:
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    img.save(path, format="PNG")


def save_raw_plane(plane: np.ndarray, path: PathLike) -> None:
    """u32 height, u32 width, then row-major little-endian float32 values."""
    arr = np.asarray(plane, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("raw planes are 2-D")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_raw_plane(path: PathLike) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise DataError(f"{path}: raw plane header truncated")
    h, w = struct.unpack_from("<II", blob)
    if len(blob) != 8 + 4 * h * w:
        raise DataError(f"{path}: expected {4 * h * w} payload bytes, found {len(blob) - 8}")
    return np.frombuffer(blob, dtype="<f4", offset=8).reshape(h, w).astype(np.float32)


def load_binary_mask(path: PathLike) -> np.ndarray:
    """0/255 grayscale (or any raster) -> {0, 1} int64 mask, threshold at half range."""
    return (load_image(path) >= 0.5).astype(np.int64)


def save_binary_mask(mask: np.ndarray, path: PathLike) -> None:
    m = np.asarray(mask)
    if m.size and not np.isin(m, (0, 1)).all():
        raise ValueError("binary mask must contain only 0 and 1")
    Image.fromarray((m * 255).astype(np.uint8)).save(path, format="PNG")


def encode_multiclass(mask: np.ndarray) -> np.ndarray:
    """Label mask (0, 1, 2) -> uint8 RGB raster in the class colours."""
    m = np.asarray(mask)
    if m.size and (m.min() < 0 or m.max() >= len(CLASS_COLORS)):
        raise ValueError(f"labels must lie in [0, {len(CLASS_COLORS)})")
    return CLASS_COLORS[m.astype(np.int64)].astype(np.uint8)


def decode_multiclass(rgb: np.ndarray, tolerance: int = COLOR_TOLERANCE) -> np.ndarray:
    """RGB raster -> label mask, each pixel matched to the class colour within
    ``tolerance`` on every channel. Unknown colours raise :class:`DataError`."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] < 3:
        raise DataError(f"multiclass raster must be [H, W, 3], got {arr.shape}")
    px = arr[..., :3].astype(np.int16)
    dist = np.abs(px[:, :, None, :] - CLASS_COLORS[None, None]).max(axis=-1)
    label = dist.argmin(axis=-1)
    bad = dist.min(axis=-1) > tolerance
    if bad.any():
        colors, counts = np.unique(px[bad].reshape(-1, 3), axis=0, return_counts=True)
        listing = ", ".join(f"{tuple(int(v) for v in c)} x{n}" for c, n in zip(colors[:5], counts[:5]))
        more = "" if len(colors) <= 5 else f" and {len(colors) - 5} more"
        raise DataError(f"{int(bad.sum())} pixels match no class colour: {listing}{more}")
    return label.astype(np.int64)


def load_multiclass_mask(path: PathLike) -> np.ndarray:
    img = _open_raster(path)
    return decode_multiclass(np.asarray(img.convert("RGB")))


def save_multiclass_mask(mask: np.ndarray, path: PathLike) -> None:
    Image.fromarray(encode_multiclass(mask)).save(path, format="PNG")


def load_mask(path: PathLike, kind: str) -> np.ndarray:
    if kind == "multiclass":
        return load_multiclass_mask(path)
    if kind in ("roi", "binary"):
        return load_binary_mask(path)
    raise ValueError(f"unknown mask kind {kind!r}")


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class Record:
    image: Path
    roi: Optional[Path]
    binary: Optional[Path]
    multiclass: Optional[Path]
    split: str

    def mask_path(self, kind: str) -> Optional[Path]:
        return getattr(self, kind)

    @property
    def stem(self) -> str:
        return self.image.stem


@dataclass
class DatasetManifest:
    records: list
    root: Path

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.split == name], self.root)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def _field(value: str, root: Path) -> Optional[Path]:
    if value == "-":
        return None
    p = Path(value)
    return p if p.is_absolute() else root / p


def read_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        image, roi, binary, multi, split = parts
        if split not in ("train", "test"):
            raise DataError(f"{path}:{lineno}: split must be train or test, got {split!r}")
        rec = Record(_field(image, root), _field(roi, root), _field(binary, root), _field(multi, root), split)
        if rec.image is None:
            raise DataError(f"{path}:{lineno}: image path is required")
        if rec.roi is None and rec.binary is None and rec.multiclass is None:
            raise DataError(f"{path}:{lineno}: record has no mask")
        for p in (rec.image, rec.roi, rec.binary, rec.multiclass):
            if p is not None and not p.exists():
                raise DataError(f"{path}:{lineno}: missing file {p}")
        records.append(rec)
    return DatasetManifest(records, root)


def write_manifest(records, path: PathLike) -> None:
    path = Path(path)
    root = path.parent.resolve()

    def rel(p):
        if p is None:
            return "-"
        p = Path(p).resolve()
        try:
            return p.relative_to(root).as_posix()
        except ValueError:
            return str(p)

    lines = [
        "\t".join([rel(r.image), rel(r.roi), rel(r.binary), rel(r.multiclass), r.split])
        for r in records
    ]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params, meta: dict, path: PathLike) -> None:
    """Write named float32 tensors plus JSON metadata.

    ``params`` is a mapping name -> array-like, or any object with a
    ``named_tensors()`` method returning one.
    """
    if hasattr(params, "named_tensors"):
        params = {k: v.data for k, v in params.named_tensors().items()}
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.asarray(getattr(params[name], "data", params[name]))
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: checkpoints hold float32 tensors, got {arr.dtype}")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<BB", 1, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.astype("<f4").tobytes(order="C")
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated at byte {self.off} (needed {n} more)")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: PathLike) -> tuple[dict, dict]:
    """Read a checkpoint; returns ``(name -> float32 array, metadata)``.

    The whole file is validated before any tensor is returned.
    """
    blob = Path(path).read_bytes()
    rd = _Reader(blob, path)
    if rd.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a TSSG checkpoint (bad magic)")
    (version,) = rd.unpack("<H")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    (meta_len,) = rd.unpack("<I")
    try:
        meta = json.loads(rd.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: metadata block is not valid JSON ({exc})") from exc
    (count,) = rd.unpack("<I")
    staged = []
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("utf-8")
        code, ndim = rd.unpack("<BB")
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: {name}: unknown dtype code {code}")
        shape = rd.unpack(f"<{ndim}I") if ndim else ()
        (nbytes,) = rd.unpack("<Q")
        expected = int(np.prod(shape, dtype=np.int64)) * _DTYPE_CODES[code].itemsize
        if nbytes != expected:
            raise CheckpointError(f"{path}: {name}: payload of {nbytes} bytes does not match shape {shape}")
        staged.append((name, code, shape, rd.take(nbytes)))
    if rd.off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - rd.off} trailing bytes after last tensor")
    tensors = {
        name: np.frombuffer(payload, dtype=_DTYPE_CODES[code]).reshape(shape).astype(np.float32)
        for name, code, shape, payload in staged
    }
    return tensors, meta


def fingerprint_files(paths) -> str:
    """SHA-256 over the contents of the given files, in order."""
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# synthetic data

SYNTH_SIZE = 64


def _ellipse_radius(yy, xx, cy, cx, ay, ax, theta):
    """Normalised elliptic radius (1 on the boundary) and the signed distance
    to the boundary measured along the ray from the centre."""
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    rho = np.sqrt((u / ax) ** 2 + (v / ay) ** 2)
    # boundary radius along the ray through each pixel; any value at the centre
    reach = np.divide(np.hypot(u, v), rho, out=np.full_like(rho, min(ax, ay)), where=rho > 0)
    return rho, (rho - 1.0) * reach


def _soft(signed_dist):
    # ~1 inside, ~0 outside, transition of about one pixel at the boundary
    return 1.0 / (1.0 + np.exp(np.clip(signed_dist / 0.7, -50, 50)))


def synthesize_sample(rng: np.random.Generator, size: int = SYNTH_SIZE):
    """One synthetic CT-like slice.

    Two dark soft-edged ellipses (lungs) inside a brighter body on a noisy
    background, with 1-3 brighter blobs (infections) fully inside the lungs.
    Class 1 blobs are discs, class 2 blobs are elongated ellipses; both draw
    their area from the same range so neither class dominates by pixel count.

    Returns ``(image float32 [H, W], roi, binary, multiclass)``; masks int64.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    s = size / 64.0
    _, body = _ellipse_radius(yy, xx, size / 2, size / 2, 29 * s, 31 * s, 0.0)
    image = 0.06 + 0.5 * _soft(body)

    roi = np.zeros((size, size), dtype=bool)
    lungs = []
    for side in (-1, 1):
        cx = size / 2 + side * rng.uniform(11.5, 13.0) * s
        cy = size / 2 + rng.uniform(-2.0, 2.0) * s
        ax = rng.uniform(8.5, 10.5) * s
        ay = rng.uniform(16.0, 21.0) * s
        th = rng.uniform(-0.15, 0.15)
        rho, edge = _ellipse_radius(yy, xx, cy, cx, ay, ax, th)
        image -= 0.38 * _soft(edge)
        lung = rho <= 1.0
        roi |= lung
        lungs.append((cy, cx, ay, ax, th, lung))

    multiclass = np.zeros((size, size), dtype=np.int64)
    occupied = np.zeros((size, size), dtype=bool)
    wanted = int(rng.integers(1, 4))
    placed = 0
    for _ in range(8 * wanted):
        if placed == wanted:
            break
        cls = int(rng.integers(1, 3))
        area = rng.uniform(45.0, 100.0) * s * s
        if cls == 1:
            a = b = np.sqrt(area / np.pi)
        else:
            q = rng.uniform(2.6, 3.2)
            a = np.sqrt(area * q / np.pi)
            b = np.sqrt(area / (q * np.pi))
        for _attempt in range(60):
            lung_y, lung_x, ly, lx, lth, lung = lungs[int(rng.integers(0, 2))]
            cy = lung_y + rng.uniform(-0.7, 0.7) * (ly - a)
            cx = lung_x + rng.uniform(-0.7, 0.7) * max(lx - b, 0.0)
            # long axis roughly along the lung
            th = lth + rng.uniform(-0.5, 0.5)
            rho, edge = _ellipse_radius(yy, xx, cy, cx, a, b, th)
            blob = rho <= 1.0
            halo = rho <= 1.0 + 2.0 / max(b, 1.0)
            if blob.sum() < 8 or not np.all(lung[halo]) or (halo & occupied).any():
                continue
            image += 0.36 * _soft(edge)
            multiclass[blob] = cls
            occupied |= halo
            placed += 1
            break

    image += rng.normal(0.0, 0.03, size=image.shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    binary = (multiclass > 0).astype(np.int64)
    return image.astype(np.float32), roi.astype(np.int64), binary, multiclass


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, sample index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))))


def generate_synthetic_dataset(n: int, seed: int, out_dir: PathLike, test_count: int = 0,
                               size: int = SYNTH_SIZE) -> DatasetManifest:
    """Write ``n`` synthetic samples (image + roi/binary/multiclass masks) and a
    ``manifest.tsv`` into ``out_dir``. The last ``test_count`` samples form the
    test split."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0 <= test_count <= n:
        raise ValueError(f"test_count must lie in [0, {n}], got {test_count}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    width = max(4, len(str(n - 1)))
    for i in range(n):
        image, roi, binary, multi = synthesize_sample(sample_rng(seed, i), size)
        stem = f"synth_{i:0{width}d}"
        paths = {
            "image": out / f"{stem}.png",
            "roi": out / f"{stem}_roi.png",
            "binary": out / f"{stem}_binary.png",
            "multiclass": out / f"{stem}_multiclass.png",
        }
        save_image(image, paths["image"])
        save_binary_mask(roi, paths["roi"])
        save_binary_mask(binary, paths["binary"])
        save_multiclass_mask(multi, paths["multiclass"])
        split = "test" if i >= n - test_count else "train"
        records.append(Record(paths["image"], paths["roi"], paths["binary"], paths["multiclass"], split))
    manifest_path = out / "manifest.tsv"
    write_manifest(records, manifest_path)
    return read_manifest(manifest_path)
