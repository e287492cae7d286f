"""
Volume and label data model, raw/sidecar file I/O, intensity normalization,
patch sampling and the nested-shell phantom generator.

On-disk layout of a subject directory::

    <id>/T1.raw  <id>/T1.hdr.txt
    <id>/T2.raw  <id>/T2.hdr.txt
    <id>/label.raw  <id>/label.hdr.txt     (optional)

Each sidecar holds ``dims=H W D``, ``dtype={f32|u8}`` and ``spacing=sx sy sz``.
Payloads are little-endian with x varying fastest.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

BACKGROUND, CSF, GM, WM = 0, 1, 2, 3
CLASS_NAMES = ("BG", "CSF", "GM", "WM")
TISSUE_CLASSES = (CSF, GM, WM)
MODALITIES = ("T1", "T2")

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeLoadError(OSError):
    pass


class VolumeFormatError(ValueError):
    pass


class VolumeValidationError(ValueError):
    pass


class PhantomSpecError(ValueError):
    pass


Dims = Tuple[int, int, int]
Spacing = Tuple[float, float, float]


def _as_dims(dims) -> Dims:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise VolumeValidationError(f"dims must be three positive integers, got {dims}")
    return dims


@dataclass(frozen=True)
class Volume:
    """A dense 3D scalar field indexed (x, y, z)."""

    data: np.ndarray
    spacing_mm: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeValidationError(f"volume must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise VolumeValidationError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise VolumeValidationError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class LabelVolume:
    """Dense 3D class-ID field; 0=BG, 1=CSF, 2=GM, 3=WM by default."""

    data: np.ndarray
    num_classes: int = 4
    spacing_mm: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeValidationError(f"label volume must be 3D, got shape {data.shape}")
        if self.num_classes < 2:
            raise VolumeValidationError("num_classes must be >= 2")
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.equal(np.mod(data, 1), 0)):
                raise VolumeValidationError("label volume holds non-integer values")
            data = data.astype(np.uint8)
        if data.size and (data.min() < 0 or data.max() >= self.num_classes):
            raise VolumeValidationError(
                f"class ids must lie in [0, {self.num_classes - 1}], "
                f"found [{data.min()}, {data.max()}]"
            )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    modalities: Tuple[Volume, ...]
    labels: Optional[LabelVolume] = None
    weight_maps: Optional[object] = None  # distance.WeightMapSet
    role: str = "train"  # "train" or "test"; test labels are never read by training

    def __post_init__(self):
        mods = tuple(self.modalities)
        if not mods:
            raise VolumeValidationError("subject needs at least one modality")
        ref = mods[0]
        for name, v in zip(MODALITIES, mods):
            if v.dims != ref.dims:
                raise VolumeValidationError(
                    f"modality {name} dims {v.dims} != {ref.dims}"
                )
            if v.spacing_mm != ref.spacing_mm:
                raise VolumeValidationError(
                    f"modality {name} spacing {v.spacing_mm} != {ref.spacing_mm}"
                )
        if self.labels is not None and self.labels.dims != ref.dims:
            raise VolumeValidationError(
                f"label dims {self.labels.dims} != image dims {ref.dims}"
            )
        if self.weight_maps is not None and tuple(self.weight_maps.maps.shape[1:]) != ref.dims:
            raise VolumeValidationError(
                f"weight map dims {tuple(self.weight_maps.maps.shape[1:])} != image dims {ref.dims}"
            )
        if self.role not in ("train", "test"):
            raise VolumeValidationError(f"unknown subject role {self.role!r}")
        object.__setattr__(self, "modalities", mods)

    @property
    def dims(self) -> Dims:
        return self.modalities[0].dims

    @property
    def spacing_mm(self) -> Spacing:
        return self.modalities[0].spacing_mm

    def image(self) -> np.ndarray:
        """Stack of modalities, shape (M, H, W, D), float32."""
        return np.stack([m.data for m in self.modalities]).astype(np.float32)


@dataclass(frozen=True)
class PatchSample:
    input: np.ndarray  # (M, h, w, d)
    target: Optional[np.ndarray]  # (h, w, d)
    weights: Optional[np.ndarray]  # (C, h, w, d)
    origin: Dims


@dataclass(frozen=True)
class PhantomSpec:
    """Nested spherical shells: outer radius of CSF, GM and WM in voxels."""

    dims: Dims = (64, 64, 64)
    class_radii: Tuple[float, float, float] = (28.0, 20.0, 12.0)
    contrast_gap: float = 0.5
    noise_sigma: float = 0.05
    warp_amplitude: float = 0.0

    def validate(self) -> None:
        dims = _as_dims(self.dims)
        radii = tuple(float(r) for r in self.class_radii)
        if len(radii) != 3:
            raise PhantomSpecError(f"need three radii (CSF, GM, WM), got {radii}")
        if any(r <= 0 for r in radii) or not (radii[0] > radii[1] > radii[2]):
            raise PhantomSpecError(f"radii must be positive and strictly decreasing, got {radii}")
        if radii[0] > (min(dims) - 1) / 2.0:
            raise PhantomSpecError(
                f"outer radius {radii[0]} does not fit inside dims {dims}"
            )
        for name in ("contrast_gap", "noise_sigma", "warp_amplitude"):
            if getattr(self, name) < 0:
                raise PhantomSpecError(f"{name} must be >= 0")


# ---------------------------------------------------------------------------
# raw + sidecar I/O


def _header_path(raw_path: Path) -> Path:
    return raw_path.with_name(raw_path.stem + ".hdr.txt")


def _fmt_num(x: float) -> str:
    return repr(float(x)) if float(x) != int(x) else str(int(x))


def write_raw(raw_path, data: np.ndarray, dtype: str, spacing: Sequence[float]) -> None:
    raw_path = Path(raw_path)
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"unknown dtype {dtype!r}")
    arr = np.asarray(data).astype(_DTYPES[dtype])
    h, w, d = arr.shape
    header = (
        f"dims={h} {w} {d}\n"
        f"dtype={dtype}\n"
        f"spacing={' '.join(_fmt_num(s) for s in spacing)}\n"
    )
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    _header_path(raw_path).write_text(header)
    raw_path.write_bytes(arr.tobytes(order="F"))


def read_raw(raw_path) -> Tuple[np.ndarray, str, Spacing]:
    """Read one raw volume; returns (array indexed x,y,z; dtype tag; spacing)."""
    raw_path = Path(raw_path)
    hdr = _header_path(raw_path)
    for p in (raw_path, hdr):
        if not p.is_file():
            raise VolumeLoadError(f"missing file {p}")
    fields = {}
    for line in hdr.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise VolumeFormatError(f"{hdr}: malformed header line {line!r}")
        fields[key.strip()] = value.strip()
    for key in ("dims", "dtype"):
        if key not in fields:
            raise VolumeFormatError(f"{hdr}: missing '{key}' entry")
    tag = fields["dtype"]
    if tag not in _DTYPES:
        raise VolumeFormatError(f"{hdr}: unknown dtype {tag!r}")
    try:
        dims = _as_dims(fields["dims"].split())
        spacing = tuple(float(s) for s in fields.get("spacing", "1 1 1").split())
    except ValueError as exc:
        raise VolumeFormatError(f"{hdr}: {exc}") from None
    payload = raw_path.read_bytes()
    expected = int(np.prod(dims)) * _DTYPES[tag].itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw_path}: payload has {len(payload)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(payload, dtype=_DTYPES[tag]).reshape(dims, order="F")
    return np.ascontiguousarray(arr), tag, spacing


def load_volume(raw_path) -> Volume:
    arr, _, spacing = read_raw(raw_path)
    return Volume(arr.astype(np.float32), spacing)


def load_labels(raw_path, num_classes: int = 4) -> LabelVolume:
    arr, tag, spacing = read_raw(raw_path)
    if tag != "u8":
        if not np.all(np.mod(arr, 1) == 0):
            raise VolumeFormatError(f"{raw_path}: label payload is not integral")
    return LabelVolume(arr.astype(np.uint8), num_classes, spacing)


def save_volume(raw_path, v: Volume) -> None:
    write_raw(raw_path, v.data, "f32", v.spacing_mm)


def save_labels(raw_path, labels: LabelVolume) -> None:
    write_raw(raw_path, labels.data, "u8", labels.spacing_mm)


def load_subject(dir_path, modalities: Sequence[str] = MODALITIES,
                 num_classes: int = 4, role: str = "train") -> SubjectRecord:
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise VolumeLoadError(f"subject directory {dir_path} not found")
    vols = []
    for name in modalities:
        raw = dir_path / f"{name}.raw"
        if not raw.is_file():
            raise VolumeLoadError(f"modality {name} absent ({raw})")
        vols.append(load_volume(raw))
    for name, v in zip(modalities, vols):
        if v.dims != vols[0].dims:
            raise VolumeValidationError(
                f"modality {name} shape {v.dims} != {modalities[0]} shape {vols[0].dims}"
            )
    labels = None
    label_raw = dir_path / "label.raw"
    if label_raw.is_file():
        labels = load_labels(label_raw, num_classes)
        if labels.dims != vols[0].dims:
            raise VolumeValidationError(
                f"label shape {labels.dims} != image shape {vols[0].dims}"
            )
    return SubjectRecord(dir_path.name, tuple(vols), labels, role=role)


def save_subject(s: SubjectRecord, dir_path) -> Path:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    for name, v in zip(MODALITIES, s.modalities):
        save_volume(dir_path / f"{name}.raw", v)
    if s.labels is not None:
        save_labels(dir_path / "label.raw", s.labels)
    return dir_path


# ---------------------------------------------------------------------------
# preprocessing


def normalize_intensity(v: Volume) -> Volume:
    """Z-score over the nonzero voxels; zero voxels stay zero."""
    data = v.data.astype(np.float64)
    mask = data != 0
    if not mask.any():
        warnings.warn("normalize_intensity: all-zero volume returned unchanged", RuntimeWarning)
        return v
    vals = data[mask]
    mean = vals.mean()
    std = vals.std()
    out = np.zeros_like(data)
    if std > 0:
        out[mask] = (vals - mean) / std
    return Volume(out.astype(v.data.dtype if v.data.dtype.kind == "f" else np.float32),
                  v.spacing_mm)


# ---------------------------------------------------------------------------
# phantom

# class-mean rank per modality: T1 brightens toward WM, T2 inverts the order
_T1_RANK = {BACKGROUND: 0, CSF: 1, GM: 2, WM: 3}
_T2_RANK = {BACKGROUND: 0, CSF: 3, GM: 2, WM: 1}
_BASE_INTENSITY = 1.0


def shell_labels(dims: Dims, radii: Sequence[float],
                 displacement: Optional[np.ndarray] = None) -> np.ndarray:
    """Label nested spherical shells centred in the grid (outermost radius = CSF)."""
    center = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    r2 = np.zeros(dims)
    for axis, g in enumerate(grids):
        coord = g - center[axis]
        if displacement is not None:
            coord = coord + displacement[axis]
        r2 += coord ** 2
    labels = np.zeros(dims, dtype=np.uint8)
    for cls, radius in zip((CSF, GM, WM), radii):
        labels[r2 <= float(radius) ** 2] = cls
    return labels


def generate_phantom(spec: PhantomSpec, seed: int, subject_id: Optional[str] = None) -> SubjectRecord:
    spec.validate()
    dims = _as_dims(spec.dims)
    rng = np.random.default_rng(seed)

    displacement = None
    if spec.warp_amplitude > 0:
        sigma = max(dims) / 8.0
        displacement = np.stack([
            ndimage.gaussian_filter(rng.standard_normal(dims), sigma, mode="wrap")
            for _ in range(3)
        ])
        peak = np.abs(displacement).max()
        if peak > 0:
            displacement *= spec.warp_amplitude / peak
    labels = shell_labels(dims, spec.class_radii, displacement)

    modalities = []
    for rank in (_T1_RANK, _T2_RANK):
        means = np.array([_BASE_INTENSITY + spec.contrast_gap * rank[c] for c in range(4)])
        img = means[labels]
        if spec.noise_sigma > 0:
            img = img + spec.noise_sigma * rng.standard_normal(dims)
        modalities.append(Volume(img.astype(np.float32)))

    sid = subject_id if subject_id is not None else f"phantom-{seed}"
    return SubjectRecord(sid, tuple(modalities), LabelVolume(labels, 4))


# ---------------------------------------------------------------------------
# patch sampling


def _crop(arr: np.ndarray, origin: Dims, size: Dims) -> np.ndarray:
    x, y, z = origin
    h, w, d = size
    return arr[..., x:x + h, y:y + w, z:z + d]


def sample_patch(s: SubjectRecord, size, rng: np.random.Generator,
                 training: bool = True, foreground_bias: bool = True) -> PatchSample:
    """Crop an aligned (input, target, weights) block.

    With ``foreground_bias`` the corner is drawn so the block contains a
    uniformly chosen non-background voxel.
    """
    size = _as_dims(size)
    dims = s.dims
    if any(p > n for p, n in zip(size, dims)):
        raise VolumeValidationError(f"patch size {size} exceeds volume dims {dims}")
    if training:
        if s.role == "test":
            raise PermissionError(f"subject {s.id} is a test subject; labels not readable in training")
        if s.labels is None:
            raise VolumeValidationError(f"training-mode sampling needs labels (subject {s.id})")
        if s.weight_maps is None:
            raise VolumeValidationError(f"training-mode sampling needs weight maps (subject {s.id})")

    origin = None
    if training and foreground_bias:
        fg = np.flatnonzero(s.labels.data != BACKGROUND)
        if fg.size:
            voxel = np.unravel_index(fg[rng.integers(fg.size)], dims)
            origin = tuple(
                int(rng.integers(max(0, v - p + 1), min(v, n - p) + 1))
                for v, p, n in zip(voxel, size, dims)
            )
    if origin is None:
        origin = tuple(int(rng.integers(0, n - p + 1)) for p, n in zip(size, dims))

    inp = np.stack([_crop(m.data, origin, size) for m in s.modalities]).astype(np.float32)
    target = weights = None
    if training:
        target = _crop(s.labels.data, origin, size)
        weights = _crop(s.weight_maps.maps, origin, size)
    return PatchSample(inp, target, weights, origin)
