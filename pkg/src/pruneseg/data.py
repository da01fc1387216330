"""Synthetic phantom volumes, label pyramids, and raw volume I/O.

Volumes are (D, H, W) grids with physical voxel spacing in millimetres.
Files are raw little-endian payloads in x-fastest order next to a JSON
sidecar describing dims, spacing, and dtype; a dataset is a directory with a
``manifest.json`` listing (image, label, split) triples.

All randomness flows through the Philox counter-based bit generator so a
seed reproduces the same dataset on any platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError

ORDER_TAG = "x-fastest"  # C-order over (D, H, W): W varies fastest
_DTYPES = {"float32": np.dtype("<f4"), "uint16": np.dtype("<u2")}


@dataclass
class Volume:
    voxels: np.ndarray  # (D, H, W) real grid
    spacing: tuple[float, float, float]

    def __post_init__(self):
        if self.voxels.ndim != 3 or any(e <= 0 for e in self.voxels.shape):
            raise DataError(f"volume dims must be positive 3-d, got {self.voxels.shape}")
        if any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self):
        return self.voxels.shape


@dataclass
class LabelVolume:
    labels: np.ndarray  # (D, H, W) integer grid
    spacing: tuple[float, float, float]

    def __post_init__(self):
        if self.labels.ndim != 3 or any(e <= 0 for e in self.labels.shape):
            raise DataError(f"label dims must be positive 3-d, got {self.labels.shape}")
        if self.labels.min() < 0:
            raise DataError("labels must be non-negative")

    @property
    def dims(self):
        return self.labels.shape


# ---------------------------------------------------------------------------
# Phantom generation


@dataclass
class PhantomSpec:
    """Ellipsoidal organ with an embedded spherical tumor on a noisy background.

    Class labels: 0 background, 1 organ (tumor carved out), 2 tumor.
    """

    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    organ_semiaxes: tuple[float, float] = (8.0, 12.0)  # per-axis uniform range, voxels
    tumor_radius: tuple[float, float] = (2.5, 4.5)
    intensity_means: tuple[float, float, float] = (0.2, 0.55, 0.85)  # bg, organ, tumor
    noise_sigma: float = 0.06
    tumor_inside_organ: bool = True

    def __post_init__(self):
        if self.tumor_inside_organ and self.tumor_radius[1] >= self.organ_semiaxes[0]:
            raise DataError("tumor radius range must stay below the smallest organ semi-axis")
        margin = self.organ_semiaxes[1] + 1.0
        if any(d <= 2 * margin for d in self.dims):
            raise DataError(f"dims {self.dims} cannot fit an organ with semi-axes up to "
                            f"{self.organ_semiaxes[1]}")

    @classmethod
    def default_for(cls, dims, spacing=(1.0, 1.0, 1.0)) -> "PhantomSpec":
        """Organ and tumor sizes proportional to the smallest grid extent."""
        m = min(dims)
        return cls(dims=tuple(dims), spacing=tuple(spacing),
                   organ_semiaxes=(0.25 * m, 0.35 * m),
                   tumor_radius=(0.08 * m, 0.13 * m))


def generate_phantom(seed: int, spec: PhantomSpec = PhantomSpec()) -> tuple[Volume, LabelVolume]:
    """Deterministic phantom: identical seed and spec give identical grids."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    return _generate_with_rng(rng, spec)


def generate_phantom_from_seedseq(seed_seq: np.random.SeedSequence,
                                  spec: PhantomSpec) -> tuple[Volume, LabelVolume]:
    rng = np.random.Generator(np.random.Philox(seed_seq))
    return _generate_with_rng(rng, spec)


def _generate_with_rng(rng: np.random.Generator,
                       spec: PhantomSpec) -> tuple[Volume, LabelVolume]:
    d, h, w = spec.dims
    lo, hi = spec.organ_semiaxes
    semi = rng.uniform(lo, hi, size=3)
    center = np.array([rng.uniform(semi[i] + 1.0, spec.dims[i] - semi[i] - 1.0)
                       for i in range(3)])
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    norm = (((zz - center[0]) / semi[0]) ** 2 + ((yy - center[1]) / semi[1]) ** 2
            + ((xx - center[2]) / semi[2]) ** 2)
    organ = norm <= 1.0

    r = rng.uniform(*spec.tumor_radius)
    if spec.tumor_inside_organ:
        # place the tumor center well inside the ellipsoid so the sphere fits
        reach = 1.0 - r / semi.min()
        offset = rng.uniform(-reach, reach, size=3) * semi * reach
        t_center = center + offset
    else:
        t_center = np.array([rng.uniform(r + 1.0, spec.dims[i] - r - 1.0) for i in range(3)])
    dist2 = (zz - t_center[0]) ** 2 + (yy - t_center[1]) ** 2 + (xx - t_center[2]) ** 2
    tumor = dist2 <= r * r
    if spec.tumor_inside_organ:
        tumor &= organ

    labels = np.zeros(spec.dims, dtype=np.uint16)
    labels[organ] = 1
    labels[tumor] = 2

    means = np.asarray(spec.intensity_means, dtype=np.float64)
    image = means[labels] + rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Volume(image, spec.spacing), LabelVolume(labels, spec.spacing)


# ---------------------------------------------------------------------------
# Label pyramid


def label_pyramid(labels: np.ndarray, levels: int) -> list[np.ndarray]:
    """Nearest-neighbor pyramid: level k samples the even-index voxels of
    level k-1, keeping labels integral.  Works on (D,H,W) or (N,D,H,W)."""
    base = np.asarray(labels)
    spatial = base.shape[-3:]
    if any(e % (2 ** (levels - 1)) != 0 for e in spatial):
        raise DataError(f"dims {spatial} not divisible by 2^{levels - 1}")
    out = [base]
    for _ in range(1, levels):
        out.append(out[-1][..., ::2, ::2, ::2])
    return out


# ---------------------------------------------------------------------------
# Raw volume I/O


def write_volume(path, vol: Volume | LabelVolume):
    """Raw little-endian payload plus JSON sidecar."""
    path = Path(path)
    if isinstance(vol, Volume):
        dtype_name, arr = "float32", vol.voxels.astype(_DTYPES["float32"], copy=False)
    else:
        dtype_name, arr = "uint16", vol.labels.astype(_DTYPES["uint16"], copy=False)
    path.write_bytes(np.ascontiguousarray(arr).tobytes())
    sidecar = {"dims": list(arr.shape), "spacing": list(vol.spacing),
               "dtype": dtype_name, "order": ORDER_TAG}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def read_volume(path) -> Volume | LabelVolume:
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not sidecar_path.exists():
        raise DataError(f"missing sidecar {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    if meta.get("order") != ORDER_TAG:
        raise DataError(f"unknown voxel order {meta.get('order')!r}")
    dtype = _DTYPES.get(meta.get("dtype"))
    if dtype is None:
        raise DataError(f"unknown dtype {meta.get('dtype')!r}")
    dims = tuple(meta["dims"])
    payload = path.read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise DataError(f"payload of {path} holds {len(payload)} bytes but sidecar "
                        f"dims {dims} require {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    spacing = tuple(float(s) for s in meta["spacing"])
    if meta["dtype"] == "float32":
        return Volume(arr.copy(), spacing)
    return LabelVolume(arr.copy(), spacing)


# ---------------------------------------------------------------------------
# Dataset manifest


@dataclass
class ManifestEntry:
    image: str
    label: str
    split: str


def write_manifest(directory, entries: Iterable[ManifestEntry]):
    doc = {"volumes": [asdict(e) for e in entries]}
    (Path(directory) / "manifest.json").write_text(json.dumps(doc, indent=1))


def read_manifest(manifest_path) -> list[ManifestEntry]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    doc = json.loads(manifest_path.read_text())
    return [ManifestEntry(**e) for e in doc["volumes"]]


class PhantomDataset:
    """In-memory dataset backed by a manifest directory."""

    def __init__(self, manifest_path, split: str):
        manifest_path = Path(manifest_path)
        base = manifest_path if manifest_path.is_dir() else manifest_path.parent
        self.entries = [e for e in read_manifest(manifest_path) if e.split == split]
        if not self.entries:
            raise DataError(f"no volumes with split {split!r} in {manifest_path}")
        self.images: list[Volume] = []
        self.labels: list[LabelVolume] = []
        for e in self.entries:
            img = read_volume(base / e.image)
            lab = read_volume(base / e.label)
            if not isinstance(img, Volume) or not isinstance(lab, LabelVolume):
                raise DataError(f"manifest entry {e} does not pair an image with labels")
            if img.dims != lab.dims:
                raise DataError(f"image {img.dims} vs label {lab.dims} dims for {e.image}")
            self.images.append(img)
            self.labels.append(lab)

    def __len__(self):
        return len(self.entries)


def generate_dataset(out_dir, count: int, dims: tuple[int, int, int], seed: int,
                     spacing=(1.0, 1.0, 1.0), train_fraction: float = 0.8,
                     spec: PhantomSpec | None = None) -> Path:
    """Write ``count`` phantoms and a manifest; the leading fraction is the
    training split.  Volume i is generated from SeedSequence([seed, i])."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if spec is None:
        spec = PhantomSpec.default_for(dims, spacing)
    entries = []
    n_train = int(round(count * train_fraction))
    for i in range(count):
        child_seed = np.random.SeedSequence([seed, i])
        vol, lab = generate_phantom_from_seedseq(child_seed, spec)
        img_name, lab_name = f"img_{i:04d}.raw", f"lab_{i:04d}.raw"
        write_volume(out_dir / img_name, vol)
        write_volume(out_dir / lab_name, lab)
        entries.append(ManifestEntry(img_name, lab_name,
                                     "train" if i < n_train else "test"))
    write_manifest(out_dir, entries)
    return out_dir / "manifest.json"
