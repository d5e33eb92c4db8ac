"""Hyperspectral cube I/O, synthetic scenes, preprocessing, patching and splits.

``.hsic`` layout: one JSON header line, then H*W*C little-endian float32
values in band-interleaved-by-pixel order.  The ``.labels`` sidecar holds a
JSON header line followed by H*W little-endian uint16 class ids (0 means
unlabeled).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import (
    ConfigError,
    InfeasibleSpecError,
    MagicError,
    ShapeMismatchError,
    StratificationError,
    TruncatedPayloadError,
    ValidationError,
)

CUBE_MAGIC = "HSIC1"
LABELS_MAGIC = "HSIL1"

PatchMode = Literal["per_pixel", "tile"]


@dataclass
class HsiCube:
    reflectance: np.ndarray  # (H, W, C) float32
    labels: np.ndarray  # (H, W) integer, 0 = unlabeled
    class_count: int
    wavelengths: np.ndarray | None = None

    def __post_init__(self):
        self.reflectance = np.asarray(self.reflectance, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.wavelengths is not None:
            self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
        self.validate()

    @property
    def height(self) -> int:
        return self.reflectance.shape[0]

    @property
    def width(self) -> int:
        return self.reflectance.shape[1]

    @property
    def bands(self) -> int:
        return self.reflectance.shape[2]

    def validate(self) -> None:
        if self.reflectance.ndim != 3:
            raise ValidationError(f"reflectance must be H x W x C, got {self.reflectance.shape}")
        if self.labels.shape != self.reflectance.shape[:2]:
            raise ShapeMismatchError(
                f"labels {self.labels.shape} do not match cube {self.reflectance.shape[:2]}"
            )
        if not np.isfinite(self.reflectance).all():
            raise ValidationError("reflectance contains non-finite values")
        if self.labels.min() < 0 or self.labels.max() > self.class_count:
            raise ValidationError(
                f"labels span [{self.labels.min()}, {self.labels.max()}] but class_count is {self.class_count}"
            )
        present = set(np.unique(self.labels).tolist())
        missing = [k for k in range(1, self.class_count + 1) if k not in present]
        if missing:
            raise ValidationError(f"declared classes without labeled pixels: {missing}")
        if self.wavelengths is not None and self.wavelengths.shape != (self.bands,):
            raise ShapeMismatchError(f"{self.wavelengths.shape[0]} wavelengths for {self.bands} bands")

    def summary(self) -> dict:
        counts = np.bincount(self.labels.ravel(), minlength=self.class_count + 1)
        return {
            "h": self.height,
            "w": self.width,
            "c": self.bands,
            "k": self.class_count,
            "labeled": int(counts[1:].sum()),
            "class_pixels": counts[1:].tolist(),
        }


@dataclass
class Sample:
    patch: np.ndarray  # (P, P, C')
    label: int
    origin: tuple[int, int]


@dataclass(frozen=True)
class SplitSpec:
    train_ratio: float = 0.2
    val_ratio: float = 0.3
    test_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        ratios = (self.train_ratio, self.val_ratio, self.test_ratio)
        if min(ratios) <= 0:
            raise ConfigError(f"split ratios must be positive, got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)!r}")


# ---------------------------------------------------------------------------
# file I/O


def labels_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".labels")


def _header_line(obj: dict) -> bytes:
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode("ascii")


def _read_header(raw: bytes, magic: str, path: Path) -> tuple[dict, bytes]:
    nl = raw.find(b"\n")
    if nl < 0:
        raise MagicError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise MagicError(f"{path}: header is not a JSON object") from None
    if not isinstance(header, dict) or header.get("magic") != magic:
        raise MagicError(f"{path}: expected magic {magic!r}, got {header.get('magic') if isinstance(header, dict) else None!r}")
    return header, raw[nl + 1 :]


def save_cube(cube: HsiCube, path: str | Path) -> None:
    """Write ``cube`` to ``path`` plus its ``.labels`` sidecar."""
    path = Path(path)
    header = {"magic": CUBE_MAGIC, "h": cube.height, "w": cube.width, "c": cube.bands, "dtype": "f32"}
    if cube.wavelengths is not None:
        header["wavelengths"] = [float(v) for v in cube.wavelengths]
    payload = cube.reflectance.astype("<f4", copy=False).tobytes(order="C")
    path.write_bytes(_header_line(header) + payload)

    lab_header = {"magic": LABELS_MAGIC, "h": cube.height, "w": cube.width, "k": cube.class_count}
    lab_payload = cube.labels.astype("<u2").tobytes(order="C")
    labels_path(path).write_bytes(_header_line(lab_header) + lab_payload)


def load_cube(path: str | Path) -> HsiCube:
    path = Path(path)
    header, payload = _read_header(path.read_bytes(), CUBE_MAGIC, path)
    try:
        h, w, c = int(header["h"]), int(header["w"]), int(header["c"])
    except (KeyError, TypeError, ValueError):
        raise MagicError(f"{path}: header lacks integer h/w/c") from None
    if header.get("dtype", "f32") != "f32":
        raise MagicError(f"{path}: unsupported dtype {header['dtype']!r}")
    expected = h * w * c * 4
    if len(payload) != expected:
        raise TruncatedPayloadError(f"{path}: header declares {h}x{w}x{c} floats ({expected} bytes), payload has {len(payload)}")
    refl = np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)
    wl = header.get("wavelengths")

    lpath = labels_path(path)
    if lpath.exists():
        lheader, lpayload = _read_header(lpath.read_bytes(), LABELS_MAGIC, lpath)
        if (int(lheader["h"]), int(lheader["w"])) != (h, w):
            raise ShapeMismatchError(f"{lpath}: labels are {lheader['h']}x{lheader['w']}, cube is {h}x{w}")
        if len(lpayload) != h * w * 2:
            raise TruncatedPayloadError(f"{lpath}: expected {h * w * 2} bytes, got {len(lpayload)}")
        labels = np.frombuffer(lpayload, dtype="<u2").reshape(h, w).astype(np.int64)
        k = int(lheader["k"])
    else:
        labels = np.zeros((h, w), dtype=np.int64)
        k = 0
    return HsiCube(refl, labels, k, None if wl is None else np.asarray(wl, dtype=np.float64))


# ---------------------------------------------------------------------------
# synthetic scenes


def _gaussian_mixture(rng: np.random.Generator, bands: int) -> np.ndarray:
    idx = np.arange(bands, dtype=np.float64)
    sig = np.full(bands, 0.05)
    for _ in range(2):
        amp = rng.uniform(0.2, 0.8)
        mu = rng.uniform(0, bands - 1)
        width = rng.uniform(bands / 10, bands / 4)
        sig += amp * np.exp(-0.5 * ((idx - mu) / width) ** 2)
    return sig


def synth_cube(
    h: int = 32,
    w: int = 32,
    c: int = 16,
    k: int = 4,
    noise_sigma: float = 0.05,
    seed: int = 0,
    min_class_pixels: int = 20,
) -> HsiCube:
    """Blocky scene whose classes carry smooth two-Gaussian spectral signatures.

    The scene is cut into a G x G grid of rectangular blocks
    (G = ceil(sqrt(k + 1))); every class gets at least one block, at least one
    block stays unlabeled background, remaining blocks are drawn at random.
    """
    if c < 4:
        raise InfeasibleSpecError(f"need at least 4 bands, got {c}")
    if k < 1 or k > h * w:
        raise InfeasibleSpecError(f"class count {k} infeasible for {h}x{w} scene")
    if noise_sigma < 0:
        raise InfeasibleSpecError("noise_sigma must be nonnegative")
    rng = np.random.default_rng(seed)

    g = math.ceil(math.sqrt(k + 1))
    if g > min(h, w):
        raise InfeasibleSpecError(f"{k} classes need a {g}x{g} block grid, scene is {h}x{w}")
    block_labels = list(range(1, k + 1)) + [0]
    block_labels += rng.integers(0, k + 1, size=g * g - len(block_labels)).tolist()
    block_labels = rng.permutation(block_labels)
    rows = np.linspace(0, h, g + 1).round().astype(int)
    cols = np.linspace(0, w, g + 1).round().astype(int)
    labels = np.zeros((h, w), dtype=np.int64)
    for b, lab in enumerate(block_labels):
        i, j = divmod(b, g)
        labels[rows[i] : rows[i + 1], cols[j] : cols[j + 1]] = lab
    counts = np.bincount(labels.ravel(), minlength=k + 1)
    if counts[1:].min() < min_class_pixels:
        raise InfeasibleSpecError(
            f"smallest class has {counts[1:].min()} pixels, need {min_class_pixels}; enlarge the scene"
        )

    # redraw until signatures are mutually distinct
    signatures = []
    for _ in range(10_000):
        s = _gaussian_mixture(rng, c)
        if all(np.linalg.norm(s - t) >= 0.5 for t in signatures):
            signatures.append(s)
            if len(signatures) == k + 1:
                break
    else:
        raise InfeasibleSpecError(f"could not draw {k + 1} distinct signatures over {c} bands")
    sig = np.stack(signatures)  # row 0 is background
    refl = sig[labels] + rng.normal(0.0, noise_sigma, size=(h, w, c)) if noise_sigma > 0 else sig[labels]
    wavelengths = np.linspace(400.0, 1000.0, c)
    return HsiCube(refl.astype(np.float32), labels, k, wavelengths)


# ---------------------------------------------------------------------------
# preprocessing


def band_indices(bands: int, count: int) -> list[int]:
    """Evenly spaced indices round(i*(C-1)/(count-1)), halves rounded up."""
    if not 1 <= count <= bands:
        raise ConfigError(f"band count must be in [1, {bands}], got {count}")
    if count == 1:
        return [0]
    m = count - 1
    return [(2 * i * (bands - 1) + m) // (2 * m) for i in range(count)]


def select_bands(cube: HsiCube, count: int) -> HsiCube:
    idx = band_indices(cube.bands, count)
    wl = None if cube.wavelengths is None else cube.wavelengths[idx]
    return replace(cube, reflectance=cube.reflectance[:, :, idx], wavelengths=wl)


def normalize(cube: HsiCube) -> HsiCube:
    """Per-band z-score over all pixels (population sd); constant bands become 0."""
    x = cube.reflectance.astype(np.float64)
    mu = x.mean(axis=(0, 1))
    sd = x.std(axis=(0, 1))
    flat = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    z = np.where(flat, 0.0, (x - mu) / np.where(flat, 1.0, sd))
    return replace(cube, reflectance=z.astype(np.float32))


# ---------------------------------------------------------------------------
# patches and splits


def center_offset(p: int) -> int:
    """Patch index of the center pixel: (P-1)//2, i.e. P/2 - 1 for even P."""
    return (p - 1) // 2


def extract_patches(cube: HsiCube, p: int, mode: PatchMode = "per_pixel") -> list[Sample]:
    if p < 2:
        raise ConfigError(f"patch size must be >= 2, got {p}")
    if p > min(cube.height, cube.width):
        raise ConfigError(f"patch size {p} exceeds cube extent {cube.height}x{cube.width}")
    if mode == "per_pixel":
        pad = p // 2
        padded = np.pad(cube.reflectance, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        shift = pad - center_offset(p)
        rows, cols = np.nonzero(cube.labels)
        return [
            Sample(padded[r + shift : r + shift + p, c + shift : c + shift + p].copy(), int(cube.labels[r, c]), (int(r), int(c)))
            for r, c in zip(rows, cols)
        ]
    if mode == "tile":
        samples = []
        for i in range(cube.height // p):
            for j in range(cube.width // p):
                lab = cube.labels[i * p : (i + 1) * p, j * p : (j + 1) * p]
                valid = lab[lab > 0]
                if valid.size == 0:
                    continue
                # bincount argmax: ties go to the lower class id
                label = int(np.bincount(valid).argmax())
                patch = cube.reflectance[i * p : (i + 1) * p, j * p : (j + 1) * p].copy()
                c0 = center_offset(p)
                samples.append(Sample(patch, label, (i * p + c0, j * p + c0)))
        return samples
    raise ConfigError(f"unknown patch mode {mode!r}")


def _ceil(x: float) -> int:
    # guard against float noise such as 80 * 0.375 = 30.000000000000004
    return math.ceil(x - 1e-9)


def stratified_split(
    samples: Sequence[Sample], spec: SplitSpec, min_per_class: int = 10
) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Per-class seeded shuffle, then cumulative ceilings: the first
    ceil(n*train) go to train, up to ceil(n*(train+val)) to val, the rest to test.

    Every part then lands strictly within one sample of its target share.
    """
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    for label in sorted(by_class):
        if len(by_class[label]) < min_per_class:
            raise StratificationError(
                f"class {label} has {len(by_class[label])} samples, need at least {min_per_class}"
            )
    rng = np.random.default_rng(spec.seed)
    train, val, test = [], [], []
    for label in sorted(by_class):
        idx = np.asarray(by_class[label])
        idx = idx[rng.permutation(idx.size)]
        n_train = min(_ceil(idx.size * spec.train_ratio), idx.size)
        n_val = min(_ceil(idx.size * (spec.train_ratio + spec.val_ratio)), idx.size) - n_train
        train.extend(samples[i] for i in idx[:n_train])
        val.extend(samples[i] for i in idx[n_train : n_train + n_val])
        test.extend(samples[i] for i in idx[n_train + n_val :])
    return train, val, test


def stack_samples(samples: Sequence[Sample], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Samples to a channel-first batch ``(B, C', P, P)`` and an int label vector."""
    x = np.stack([s.patch for s in samples]).transpose(0, 3, 1, 2).astype(dtype)
    y = np.asarray([s.label for s in samples], dtype=np.int64)
    return np.ascontiguousarray(x), y
