"""Hyperspectral cube and label ingestion, patching, and splitting.

On-disk format: a text header of ``key = value`` lines with exactly the
keys height, width, bands, dtype, payload (labels omit bands), where
payload names the raw file relative to the header. Cube payloads are
band-sequential little-endian float32; label payloads are row-major
little-endian uint16 with 0 meaning unlabeled.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ContractError, FormatError, NumericError, SplitError


@dataclass
class HsiCube:
    """An H*W image with ``bands`` spectral values per pixel."""

    data: np.ndarray  # (height, width, bands) float32

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.bands < 1:
            raise FormatError(f"cube data must be H*W*bands with bands >= 1, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NumericError("cube contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass
class LabelRaster:
    """Per-pixel class ids aligned with a cube; 0 marks unlabeled pixels."""

    labels: np.ndarray  # (height, width) int32

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise FormatError(f"label raster must be H*W, got shape {self.labels.shape}")
        if self.labels.min(initial=0) < 0:
            raise FormatError("label raster contains negative class ids")
        self.labels = self.labels.astype(np.int32)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max(initial=0))


@dataclass
class SplitSpec:
    """Per-class training counts plus the seed that fixes the draw."""

    counts: dict[int, int]
    seed: int = 0


# ---------------------------------------------------------------------------
# header + payload io
# ---------------------------------------------------------------------------


def _parse_header(path: Path, expected_keys: set[str]) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in entries:
            raise FormatError(f"{path}:{lineno}: duplicate key {key!r}")
        entries[key] = value
    if set(entries) != expected_keys:
        raise FormatError(f"{path}: header keys {sorted(entries)} != required {sorted(expected_keys)}")
    return entries


def _read_payload(header_path: Path, relative: str, expected_bytes: int) -> bytes:
    payload_path = header_path.parent / relative
    if not payload_path.exists():
        raise FormatError(f"{header_path}: payload {payload_path} missing")
    raw = payload_path.read_bytes()
    if len(raw) != expected_bytes:
        raise FormatError(f"{payload_path}: expected {expected_bytes} bytes, got {len(raw)}")
    return raw


def load_cube(header_path) -> HsiCube:
    header_path = Path(header_path)
    entries = _parse_header(header_path, {"height", "width", "bands", "dtype", "payload"})
    if entries["dtype"] != "f32":
        raise FormatError(f"{header_path}: unknown cube dtype {entries['dtype']!r}")
    h, w, c = int(entries["height"]), int(entries["width"]), int(entries["bands"])
    raw = _read_payload(header_path, entries["payload"], h * w * c * 4)
    flat = np.frombuffer(raw, dtype="<f4")
    # band-sequential on disk -> (H, W, bands) in memory
    return HsiCube(flat.reshape(c, h, w).transpose(1, 2, 0).copy())


def load_labels(header_path) -> LabelRaster:
    header_path = Path(header_path)
    entries = _parse_header(header_path, {"height", "width", "dtype", "payload"})
    if entries["dtype"] != "u16":
        raise FormatError(f"{header_path}: unknown label dtype {entries['dtype']!r}")
    h, w = int(entries["height"]), int(entries["width"])
    raw = _read_payload(header_path, entries["payload"], h * w * 2)
    return LabelRaster(np.frombuffer(raw, dtype="<u2").reshape(h, w).copy())


def save_cube(header_path, cube: HsiCube) -> None:
    header_path = Path(header_path)
    payload = header_path.with_suffix(".raw")
    header_path.write_text(
        f"height = {cube.height}\nwidth = {cube.width}\nbands = {cube.bands}\n"
        f"dtype = f32\npayload = {payload.name}\n"
    )
    payload.write_bytes(np.ascontiguousarray(cube.data.transpose(2, 0, 1), dtype="<f4").tobytes())


def save_labels(header_path, raster: LabelRaster) -> None:
    header_path = Path(header_path)
    payload = header_path.with_suffix(".raw")
    if raster.labels.max(initial=0) > np.iinfo(np.uint16).max:
        raise FormatError("label ids exceed uint16 range")
    header_path.write_text(
        f"height = {raster.height}\nwidth = {raster.width}\ndtype = u16\npayload = {payload.name}\n"
    )
    payload.write_bytes(np.ascontiguousarray(raster.labels, dtype="<u2").tobytes())


# ---------------------------------------------------------------------------
# normalization and patches
# ---------------------------------------------------------------------------


def normalize(cube: HsiCube) -> HsiCube:
    """Min-max scale each band to [0, 1]; constant bands map to zeros."""
    data = cube.data
    lo = data.min(axis=(0, 1), keepdims=True)
    hi = data.max(axis=(0, 1), keepdims=True)
    span = hi - lo
    span[span == 0] = 1.0
    out = (data - lo) / span
    return HsiCube(out.astype(np.float32))


def _mirror_indices(center: int, size: int, extent: int) -> np.ndarray:
    half = size // 2
    idx = np.arange(center - half, center + half + 1)
    idx = np.abs(idx)
    return np.where(idx >= extent, 2 * extent - 2 - idx, idx)


def extract_patch(cube: HsiCube, row: int, col: int, size: int) -> np.ndarray:
    """The size*size neighborhood centered at (row, col).

    Positions falling outside the image mirror-reflect about the edge
    (edge pixel not duplicated), so every labeled pixel yields a full
    patch.
    """
    if size % 2 == 0:
        raise ContractError(f"patch size must be odd, got {size}")
    if not (0 <= row < cube.height and 0 <= col < cube.width):
        raise ContractError(f"center ({row}, {col}) outside {cube.height}x{cube.width} image")
    if size >= 2 * min(cube.height, cube.width):
        raise ContractError(f"patch size {size} too large to mirror within {cube.height}x{cube.width}")
    rows = _mirror_indices(row, size, cube.height)
    cols = _mirror_indices(col, size, cube.width)
    return cube.data[np.ix_(rows, cols)]


def extract_patches(cube: HsiCube, pixels: np.ndarray, size: int) -> np.ndarray:
    """Stack patches for an (n, >=2) array of (row, col[, class]) pixels."""
    pixels = np.asarray(pixels)
    return np.stack([extract_patch(cube, int(r), int(c), size) for r, c in pixels[:, :2]])


# ---------------------------------------------------------------------------
# stratified splitting
# ---------------------------------------------------------------------------


def stratified_split(raster: LabelRaster, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Draw the requested number of training pixels per class.

    Returns (train, test) arrays of (row, col, class) triples. Sampling
    is uniform without replacement via a Philox counter-based generator,
    so a given seed reproduces the same split everywhere. Classes absent
    from the spec contribute all their pixels to the test side.
    """
    rng = np.random.Generator(np.random.Philox(spec.seed))
    train_rows, test_rows = [], []
    for cls in range(1, raster.num_classes + 1):
        rr, cc = np.nonzero(raster.labels == cls)
        count = int(spec.counts.get(cls, 0))
        if count < 0:
            raise SplitError(f"class {cls}: negative training count {count}")
        if count > rr.size:
            raise SplitError(f"class {cls}: requested {count} training pixels, only {rr.size} labeled")
        chosen = rng.permutation(rr.size)[:count]
        mask = np.zeros(rr.size, dtype=bool)
        mask[chosen] = True
        triples = np.column_stack([rr, cc, np.full(rr.size, cls, dtype=np.int64)])
        train_rows.append(triples[chosen])
        test_rows.append(triples[~mask])
    empty = np.empty((0, 3), dtype=np.int64)
    train = np.concatenate(train_rows) if train_rows else empty
    test = np.concatenate(test_rows) if test_rows else empty
    return train, test


def load_split(path) -> np.ndarray:
    """Read 'row col class' triples, one per line."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'row col class', got {line!r}")
        rows.append([int(f) for f in fields])
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def save_split(path, triples: np.ndarray) -> None:
    with open(path, "w") as fh:
        for r, c, k in np.asarray(triples):
            fh.write(f"{int(r)} {int(c)} {int(k)}\n")


def load_counts(path) -> dict[int, int]:
    """Read 'class count' pairs, one per line; # starts a comment."""
    counts: dict[int, int] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'class count', got {line!r}")
        counts[int(fields[0])] = int(fields[1])
    return counts


# ---------------------------------------------------------------------------
# synthetic fixtures
# ---------------------------------------------------------------------------


def class_signatures(bands: int, classes: int) -> np.ndarray:
    """Smooth per-class spectra: staggered base levels plus phase-shifted sines."""
    if classes < 2:
        raise ContractError(f"need at least 2 classes, got {classes}")
    b = np.arange(bands, dtype=np.float64)
    sigs = np.empty((classes, bands), dtype=np.float64)
    for k in range(classes):
        base = 0.2 + 0.6 * k / (classes - 1)
        phase = 2.0 * np.pi * k / classes
        sigs[k] = base + 0.15 * np.sin(2.0 * np.pi * b / bands + phase)
    return sigs


def synth_dataset(
    height: int, width: int, bands: int, classes: int, noise_sigma: float, seed: int
) -> tuple[HsiCube, LabelRaster]:
    """Blockwise synthetic scene: one vertical strip per class.

    Every pixel carries its class signature plus iid Gaussian noise, so
    spatial context is informative and a nearest-signature rule suffices
    when the noise is small against the signature spacing.
    """
    sigs = class_signatures(bands, classes)
    cols = np.arange(width)
    strip = np.minimum(cols * classes // width, classes - 1)
    labels = np.broadcast_to(strip + 1, (height, width)).astype(np.int32)

    data = sigs[strip][np.newaxis, :, :].repeat(height, axis=0).astype(np.float64)
    if noise_sigma > 0:
        rng = np.random.Generator(np.random.Philox(seed))
        data = data + rng.normal(0.0, noise_sigma, size=data.shape)
    return HsiCube(data.astype(np.float32)), LabelRaster(labels.copy())
