"""Dataset manifests, stratified splitting, image decoding, preprocessing,
augmentation and a synthetic two-class generator.

Raw image format (``.craw``), all integers little-endian uint32::

    magic     4 bytes  b"CRAW"
    width     uint32
    height    uint32
    channels  uint32   1 or 3
    pixels    uint8 * height * width * channels, row-major HWC
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import AugmentationConfig
from .errors import IngestionError, SplitError, ValidationError
from .rng import Rng

POSITIVE, NEGATIVE = 1, 0
CLASS_DIRS = {"positive": POSITIVE, "negative": NEGATIVE}
LABEL_NAMES = {POSITIVE: "positive", NEGATIVE: "negative"}
IMAGE_SUFFIXES = {".pgm", ".ppm", ".pnm", ".craw"}
RAW_MAGIC = b"CRAW"


def parse_label(text: str) -> int:
    key = str(text).strip().lower()
    if key in ("positive", "1"):
        return POSITIVE
    if key in ("negative", "0"):
        return NEGATIVE
    raise ValueError(f"unknown label {text!r} (expected positive|negative|0|1)")


@dataclass(frozen=True)
class Record:
    path: str
    label: int

    @property
    def source_id(self) -> str:
        """Location-independent id: class folder plus file name."""
        p = Path(self.path)
        return f"{p.parent.name}/{p.name}"


@dataclass(frozen=True)
class Manifest:
    """Immutable list of (path, label) records in lexicographic path order."""

    records: tuple[Record, ...]

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            dup = sorted({p for p in paths if paths.count(p) > 1})[0]
            raise ValidationError(f"duplicate path in manifest: {dup}")
        for r in self.records:
            if r.label not in (POSITIVE, NEGATIVE):
                raise ValidationError(f"{r.path}: label must be 0 or 1, got {r.label}")

    @classmethod
    def of(cls, records) -> "Manifest":
        return cls(tuple(sorted(records, key=lambda r: r.path)))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def counts(self) -> dict[str, int]:
        labels = self.labels
        return {"positive": int((labels == POSITIVE).sum()), "negative": int((labels == NEGATIVE).sum())}

    def of_class(self, label: int) -> list[Record]:
        return [r for r in self.records if r.label == label]

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "label"])
            for r in self.records:
                p = Path(r.path)
                try:
                    p = p.resolve().relative_to(path.parent.resolve())
                except ValueError:
                    pass
                w.writerow([str(p), LABEL_NAMES[r.label]])
        return path


def _require_both_classes(manifest: Manifest, source) -> Manifest:
    for name, n in manifest.counts.items():
        if n == 0:
            raise IngestionError(f"{source}: class '{name}' has no images")
    return manifest


def load_manifest(source: str | Path) -> Manifest:
    """Read a ``positive/``+``negative/`` directory tree or a ``path,label`` CSV.

    Relative CSV paths are resolved against the CSV's directory.
    """
    source = Path(source)
    if source.is_dir():
        records = []
        for name, label in CLASS_DIRS.items():
            folder = source / name
            if not folder.is_dir():
                raise IngestionError(f"{folder}: missing class directory")
            for f in folder.iterdir():
                if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
                    records.append(Record(str(f), label))
        return _require_both_classes(Manifest.of(records), source)
    try:
        text = source.read_text()
    except OSError as exc:
        raise IngestionError(f"{source}: cannot read manifest ({exc.strerror or exc})") from exc
    rows = list(csv.reader(text.splitlines()))
    if not rows or [c.strip().lower() for c in rows[0]] != ["path", "label"]:
        raise IngestionError(f"{source}: CSV manifest must start with header 'path,label'")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 2:
            raise IngestionError(f"{source}:{lineno}: expected 2 fields, got {len(row)}")
        try:
            label = parse_label(row[1])
        except ValueError as exc:
            raise IngestionError(f"{source}:{lineno}: {exc}") from exc
        p = Path(row[0].strip())
        records.append(Record(str(p if p.is_absolute() else source.parent / p), label))
    try:
        manifest = Manifest.of(records)
    except ValidationError as exc:
        raise IngestionError(f"{source}: {exc}") from exc
    return _require_both_classes(manifest, source)


# splitting ------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, ...] = (0.8, 0.1, 0.1)
    seed: int = 0
    mode: str = "three-way"

    def __post_init__(self):
        if self.mode not in ("three-way", "two-way"):
            raise ValidationError(f"split mode must be three-way or two-way, got {self.mode!r}")
        want = 3 if self.mode == "three-way" else 2
        if len(self.ratios) != want:
            raise ValidationError(f"{self.mode} split needs {want} ratios, got {len(self.ratios)}")
        if min(self.ratios) <= 0 or abs(sum(self.ratios) - 1) > 1e-9:
            raise ValidationError(f"split ratios must be positive and sum to 1, got {self.ratios}")


def split_counts(n: int, ratios) -> list[int]:
    """Nearest-integer share for each held-out part; training takes the rest."""
    held = [int(math.floor(n * r + 0.5)) for r in ratios[1:]]
    return [n - sum(held)] + held


def split(manifest: Manifest, spec: SplitSpec, external_test: Manifest | None = None):
    """Stratified, seeded partition into (train, val, test)."""
    if spec.mode == "two-way" and external_test is None:
        raise SplitError("two-way split needs an external test manifest")
    if spec.mode == "three-way" and external_test is not None:
        raise SplitError("three-way split derives its own test part; drop the external test manifest")
    parts: list[list[Record]] = [[] for _ in spec.ratios]
    for label in (NEGATIVE, POSITIVE):
        members = manifest.of_class(label)
        counts = split_counts(len(members), spec.ratios)
        if len(members) < len(spec.ratios) or min(counts) < 1:
            raise SplitError(
                f"class '{LABEL_NAMES[label]}' has {len(members)} samples, too few for {len(spec.ratios)} parts"
            )
        order = Rng(spec.seed).child("split", LABEL_NAMES[label]).permutation(len(members))
        start = 0
        for part, n in zip(parts, counts):
            part.extend(members[i] for i in order[start : start + n])
            start += n
    out = [Manifest.of(p) for p in parts]
    if external_test is not None:
        out.append(external_test)
    return tuple(out)


# image decoding ---------------------------------------------------------------

def _pnm_tokens(blob: bytes, count: int, pos: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated integers, skipping comments."""
    out = []
    n = len(blob)
    while len(out) < count:
        while pos < n and (blob[pos : pos + 1].isspace() or blob[pos] == ord("#")):
            if blob[pos] == ord("#"):
                while pos < n and blob[pos] not in (10, 13):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and blob[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ValueError("truncated or malformed header")
        out.append(int(blob[start:pos]))
    return out, pos


def decode_image(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    """Decode NetPBM P2/P3/P5/P6 or raw bytes to float64 HWC in [0, 1]."""
    try:
        if blob[:4] == RAW_MAGIC:
            if len(blob) < 16:
                raise ValueError("truncated header")
            w, h, c = struct.unpack("<III", blob[4:16])
            if c not in (1, 3) or w == 0 or h == 0:
                raise ValueError(f"bad extents {w}x{h}x{c}")
            if len(blob) != 16 + w * h * c:
                raise ValueError(f"expected {w * h * c} pixel bytes, found {len(blob) - 16}")
            return np.frombuffer(blob, np.uint8, offset=16).reshape(h, w, c) / 255.0
        magic = blob[:2]
        if magic not in (b"P2", b"P3", b"P5", b"P6"):
            raise ValueError("unsupported format (expected NetPBM P2/P3/P5/P6 or CRAW)")
        channels = 3 if magic in (b"P3", b"P6") else 1
        (w, h, maxval), pos = _pnm_tokens(blob, 3, 2)
        if w == 0 or h == 0 or not 0 < maxval < 65536:
            raise ValueError(f"bad header {w}x{h} maxval {maxval}")
        n = w * h * channels
        if magic in (b"P2", b"P3"):
            values, _ = _pnm_tokens(blob, n, pos)
            pix = np.array(values, dtype=np.float64)
        else:
            pos += 1  # single whitespace after maxval
            dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
            need = n * np.dtype(dtype).itemsize
            if len(blob) - pos < need:
                raise ValueError("truncated pixel data")
            pix = np.frombuffer(blob, dtype, count=n, offset=pos).astype(np.float64)
        if pix.max(initial=0) > maxval:
            raise ValueError("pixel value exceeds maxval")
        return pix.reshape(h, w, channels) / maxval
    except (ValueError, struct.error) as exc:
        raise IngestionError(f"{source}: corrupt image: {exc}") from exc


def read_image(path: str | Path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"{path}: cannot read image ({exc.strerror or exc})") from exc
    return decode_image(blob, str(path))


def encode_pgm(img: np.ndarray) -> bytes:
    """8-bit binary PGM from a 2-d array in [0, 1]."""
    h, w = img.shape
    pix = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode() + pix.tobytes()


def encode_raw(img: np.ndarray) -> bytes:
    """CRAW bytes from an HWC (or HW) array in [0, 1]."""
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    pix = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return RAW_MAGIC + struct.pack("<III", w, h, c) + pix.tobytes()


# geometry -----------------------------------------------------------------------

def _interp_matrix(n_in: int, n_out: int, start: float = 0.0, extent: float | None = None) -> np.ndarray:
    """Bilinear weights [n_out, n_in] with half-pixel centers over a source window."""
    extent = n_in if extent is None else extent
    centers = start + (np.arange(n_out) + 0.5) * (extent / n_out) - 0.5
    centers = np.clip(centers, 0, n_in - 1)
    lo = np.floor(centers).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = centers - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a CHW array; separable bilinear with half-pixel centers."""
    _, h, w = img.shape
    return _interp_matrix(h, out_h) @ img @ _interp_matrix(w, out_w).T


def to_chw3(img: np.ndarray) -> np.ndarray:
    """HWC in [0,1] with 1 or 3 channels -> CHW with 3 channels."""
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    elif img.shape[2] != 3:
        raise IngestionError(f"expected 1 or 3 channels, got {img.shape[2]}")
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def resize_center_crop(img: np.ndarray, resolution: int) -> np.ndarray:
    """Shorter side to ``resolution``, then the central square; CHW in, CHW out."""
    _, h, w = img.shape
    if h <= w:
        nh, nw = resolution, max(resolution, int(round(w * resolution / h)))
    else:
        nh, nw = max(resolution, int(round(h * resolution / w))), resolution
    if (nh, nw) != (h, w):
        img = resize_bilinear(img, nh, nw)
    top, left = (nh - resolution) // 2, (nw - resolution) // 2
    return img[:, top : top + resolution, left : left + resolution]


def normalize(img: np.ndarray, cfg: AugmentationConfig) -> np.ndarray:
    mean = np.asarray(cfg.mean, dtype=np.float64)[:, None, None]
    std = np.asarray(cfg.std, dtype=np.float64)[:, None, None]
    return (img - mean) / std


def load_unit(path: str | Path, resolution: int) -> np.ndarray:
    """Decode, replicate to 3 channels and resize/crop: [3,R,R] in [0,1]."""
    return resize_center_crop(to_chw3(read_image(path)), resolution)


def preprocess(blob: bytes, resolution: int, cfg: AugmentationConfig = AugmentationConfig(),
               source: str = "<bytes>") -> np.ndarray:
    """Raw image bytes -> normalized float32 [3,R,R]."""
    unit = resize_center_crop(to_chw3(decode_image(blob, source)), resolution)
    return normalize(unit, cfg).astype(np.float32)


# augmentation -----------------------------------------------------------------------

def sample_crop(h: int, w: int, scale, ratio, rng: Rng) -> tuple[int, int, int, int]:
    """Area-and-aspect crop box (top, left, height, width); center fallback."""
    area = h * w
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    for _ in range(10):
        target = area * float(rng.uniform(scale[0], scale[1]))
        aspect = math.exp(float(rng.uniform(log_lo, log_hi)))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # aspect out of range: clamp it and take the largest central box
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def augment(unit: np.ndarray, cfg: AugmentationConfig, rng: Rng) -> np.ndarray:
    """Random resized crop back to the same extent, then a random horizontal flip."""
    _, h, w = unit.shape
    top, left, ch, cw = sample_crop(h, w, cfg.crop_scale, cfg.crop_ratio, rng)
    my = _interp_matrix(h, h, start=top, extent=ch)
    mx = _interp_matrix(w, w, start=left, extent=cw)
    out = my @ unit @ mx.T
    if float(rng.random()) < cfg.flip_p:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # [3,R,R], in [0,1]
    label: int
    source_id: str


class ImageSet:
    """In-memory [3,R,R] unit images for a manifest, loaded once."""

    def __init__(self, manifest: Manifest, resolution: int, cfg: AugmentationConfig = AugmentationConfig()):
        self.manifest = manifest
        self.resolution = resolution
        self.cfg = cfg
        self.units = [load_unit(r.path, resolution) for r in manifest]
        self.labels = manifest.labels

    def __len__(self) -> int:
        return len(self.units)

    def sample(self, i: int) -> Sample:
        r = self.manifest.records[i]
        return Sample(self.units[i], r.label, r.source_id)

    def batch(self, indices, rng: Rng | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Normalized float32 images and labels; augment when ``rng`` is given.

        Each sample draws from its own stream keyed by source id, so batch
        composition and order never change an image's augmentation.
        """
        out = []
        for i in indices:
            unit = self.units[i]
            if rng is not None:
                unit = augment(unit, self.cfg, rng.child(self.manifest.records[i].source_id))
            out.append(normalize(unit, self.cfg))
        return np.stack(out).astype(np.float32), self.labels[np.asarray(indices, dtype=np.int64)]


# synthetic data -------------------------------------------------------------------------

def synth_image(label: int, resolution: int, rng: Rng) -> np.ndarray:
    """One grayscale image: fine checker + noise, plus a left-to-right ramp for positives.

    The ramp is zero-mean, so the global brightness is the same for both
    classes and only spatial layout across the whole image tells them apart.
    """
    yy, xx = np.mgrid[0:resolution, 0:resolution]
    phase = int(rng.integers(0, 2))
    contrast = float(rng.uniform(0.08, 0.16))
    checker = np.where((yy + xx + phase) % 2 == 0, contrast, -contrast)
    img = 0.5 + checker + rng.normal(0.0, 0.04, size=(resolution, resolution))
    if label == POSITIVE:
        ramp = (xx + 0.5) / resolution - 0.5
        img = img + 0.5 * ramp
    return np.clip(img, 0.0, 1.0)


def synth_generate(n_per_class: int, resolution: int, seed: int, out_dir: str | Path) -> Manifest:
    """Write ``2*n_per_class`` PGM images and ``manifest.csv`` under ``out_dir``."""
    if n_per_class < 1:
        raise ValidationError(f"n_per_class must be >= 1, got {n_per_class}")
    out_dir = Path(out_dir)
    records = []
    for name, label in CLASS_DIRS.items():
        folder = out_dir / name
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            img = synth_image(label, resolution, Rng(seed).child("synth", name, i))
            path = folder / f"{name}_{i:05d}.pgm"
            path.write_bytes(encode_pgm(img))
            records.append(Record(str(path), label))
    manifest = Manifest.of(records)
    manifest.write_csv(out_dir / "manifest.csv")
    return manifest
