"""Volume container I/O, intensity normalization, and dataset manifests.

On-disk format: ``<name>.vol.json`` sidecar describing shape/spacing/dtype,
next to ``<name>.vol.raw`` holding D*H*W little-endian float32 values in
C order (depth-major). A dataset is described by a single ``manifest.json``
listing, per subject, the three low-field and three high-field contrast
volumes plus a binary brain mask.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

CONTRASTS = ("T1w", "T2w", "FLAIR")

FORMAT_VERSION = 1
_DTYPE_TAG = "f32le"
_SIDECAR_SUFFIX = ".vol.json"
_BLOB_SUFFIX = ".vol.raw"


class VolioError(ValueError):
    """Base class for volume container errors."""

    code = "volio-error"


class MalformedHeaderError(VolioError):
    code = "malformed-header"


class TruncatedPayloadError(VolioError):
    code = "truncated-payload"


class NonFiniteDataError(VolioError):
    code = "non-finite-data"


@dataclass
class Volume3D:
    """One scalar 3D intensity field in (depth, height, width) order.

    ``spacing`` is the physical voxel size in millimeters per axis and is
    informational only; all image math runs in voxel units.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"expected a 3D array, got ndim={self.voxels.ndim}")
        if any(int(n) <= 0 for n in self.voxels.shape):
            raise ValueError(f"all dimensions must be positive, got {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3:
            raise ValueError("spacing must have three entries")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    def validate_finite(self) -> None:
        if not np.all(np.isfinite(self.voxels)):
            raise NonFiniteDataError("volume contains non-finite values")

    def with_voxels(self, voxels: np.ndarray) -> "Volume3D":
        """Copy of this volume with replaced voxel data, same spacing."""
        return Volume3D(voxels=np.asarray(voxels, dtype=np.float32), spacing=self.spacing)


@dataclass
class PairedSample:
    """One subject: three LF and three HF contrast volumes plus a brain mask."""

    lf: dict[str, Volume3D]
    hf: dict[str, Volume3D]
    mask: Volume3D
    subject_id: str

    def volumes(self) -> list[Volume3D]:
        return [self.lf[c] for c in CONTRASTS] + [self.hf[c] for c in CONTRASTS] + [self.mask]

    def validate(self) -> None:
        for group in (self.lf, self.hf):
            missing = [c for c in CONTRASTS if c not in group]
            if missing:
                raise ValueError(f"sample {self.subject_id!r} missing contrasts {missing}")
        shapes = {v.shape for v in self.volumes()}
        if len(shapes) != 1:
            raise ValueError(f"sample {self.subject_id!r} has mismatched shapes: {sorted(shapes)}")
        m = self.mask.voxels
        if not np.isin(m, (0.0, 1.0)).all():
            raise ValueError(f"sample {self.subject_id!r} mask values must be 0 or 1")
        if not (m > 0).any():
            raise ValueError(f"sample {self.subject_id!r} mask is empty")


def _split_container_path(path) -> tuple[Path, Path, str]:
    """Resolve sidecar path / blob path / base name from a user-supplied path."""
    p = Path(path)
    name = p.name
    if name.endswith(_SIDECAR_SUFFIX):
        base = name[: -len(_SIDECAR_SUFFIX)]
    elif name.endswith(_BLOB_SUFFIX):
        base = name[: -len(_BLOB_SUFFIX)]
    else:
        base = name
    sidecar = p.with_name(base + _SIDECAR_SUFFIX)
    blob = p.with_name(base + _BLOB_SUFFIX)
    return sidecar, blob, base


def write_volume(vol: Volume3D, path) -> Path:
    """Write ``vol`` to the sidecar+blob container at ``path``.

    ``path`` may name the sidecar (``x.vol.json``), the blob, or the bare
    base name; the pair is always written together. Returns the sidecar path.
    """
    vol.validate_finite()
    sidecar, blob, base = _split_container_path(path)
    header = {
        "format_version": FORMAT_VERSION,
        "shape": [int(n) for n in vol.shape],
        "spacing_mm": [float(s) for s in vol.spacing],
        "dtype": _DTYPE_TAG,
        "blob": blob.name,
    }
    payload = np.ascontiguousarray(vol.voxels, dtype="<f4")
    blob.write_bytes(payload.tobytes(order="C"))
    sidecar.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return sidecar


def read_volume(path) -> Volume3D:
    """Read a volume from the sidecar+blob container at ``path``.

    Raises:
        MalformedHeaderError: missing/invalid sidecar fields or unreadable JSON.
        TruncatedPayloadError: blob byte count disagrees with the declared shape.
        NonFiniteDataError: payload contains NaN or infinity.
    """
    sidecar, _, _ = _split_container_path(path)
    if not sidecar.exists():
        raise MalformedHeaderError(f"sidecar not found: {sidecar}")
    try:
        header = json.loads(sidecar.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedHeaderError(f"unreadable sidecar {sidecar}: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"sidecar {sidecar} is not a JSON object")
    for key in ("format_version", "shape", "spacing_mm", "dtype", "blob"):
        if key not in header:
            raise MalformedHeaderError(f"sidecar {sidecar} missing field {key!r}")
    if header["format_version"] != FORMAT_VERSION:
        raise MalformedHeaderError(f"unsupported format_version {header['format_version']!r}")
    if header["dtype"] != _DTYPE_TAG:
        raise MalformedHeaderError(f"unsupported dtype {header['dtype']!r}")
    shape = header["shape"]
    if (
        not isinstance(shape, list)
        or len(shape) != 3
        or any(not isinstance(n, int) or n <= 0 for n in shape)
    ):
        raise MalformedHeaderError(f"bad shape {shape!r} in {sidecar}")
    spacing = header["spacing_mm"]
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise MalformedHeaderError(f"bad spacing_mm {spacing!r} in {sidecar}")

    blob = sidecar.with_name(str(header["blob"]))
    if not blob.exists():
        raise TruncatedPayloadError(f"blob not found: {blob}")
    raw = blob.read_bytes()
    expected = shape[0] * shape[1] * shape[2] * 4
    if len(raw) != expected:
        raise TruncatedPayloadError(
            f"{blob}: payload holds {len(raw)} bytes, header claims {expected}"
        )
    voxels = np.frombuffer(raw, dtype="<f4").reshape(shape)
    if not np.all(np.isfinite(voxels)):
        raise NonFiniteDataError(f"{blob}: payload contains non-finite values")
    return Volume3D(voxels=voxels.copy(), spacing=tuple(float(s) for s in spacing))


def normalize(vol: Volume3D, lo_pct: float = 0.005, hi_pct: float = 0.995) -> Volume3D:
    """Percentile-clip then affinely map intensities to [0, 1].

    Values are clipped to the (lo_pct, hi_pct) quantiles and mapped so the
    clip bounds land on 0 and 1. A constant volume maps to all zeros.
    """
    if not (0.0 <= lo_pct < hi_pct <= 1.0):
        raise ValueError(f"require 0 <= lo_pct < hi_pct <= 1, got ({lo_pct}, {hi_pct})")
    v = vol.voxels.astype(np.float64)
    if v.size == 0:
        raise ValueError("cannot normalize an empty volume")
    lo = float(np.quantile(v, lo_pct))
    hi = float(np.quantile(v, hi_pct))
    if hi <= lo:
        return vol.with_voxels(np.zeros_like(v, dtype=np.float32))
    out = (np.clip(v, lo, hi) - lo) / (hi - lo)
    return vol.with_voxels(out.astype(np.float32))


@dataclass
class ManifestEntry:
    """One subject in a dataset manifest; paths are relative to the manifest file."""

    subject_id: str
    split: str  # "train" | "val"
    shape: tuple[int, int, int]
    lf_paths: dict[str, str]
    hf_paths: dict[str, str]
    mask_path: str

    def to_json_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "split": self.split,
            "shape": [int(n) for n in self.shape],
            "volumes": {
                "lf": {c: self.lf_paths[c] for c in CONTRASTS},
                "hf": {c: self.hf_paths[c] for c in CONTRASTS},
                "mask": self.mask_path,
            },
        }

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "ManifestEntry":
        try:
            vols = d["volumes"]
            return cls(
                subject_id=str(d["subject_id"]),
                split=str(d["split"]),
                shape=tuple(int(n) for n in d["shape"]),
                lf_paths={c: str(vols["lf"][c]) for c in CONTRASTS},
                hf_paths={c: str(vols["hf"][c]) for c in CONTRASTS},
                mask_path=str(vols["mask"]),
            )
        except (KeyError, TypeError) as exc:
            raise MalformedHeaderError(f"bad manifest entry: {exc}") from exc


@dataclass
class DatasetManifest:
    """Index of a generated dataset; one entry per subject."""

    entries: list[ManifestEntry] = field(default_factory=list)
    format_version: int = FORMAT_VERSION
    root: Path | None = None  # directory the entry paths are relative to

    def subject_ids(self, split: str | None = None) -> list[str]:
        return [e.subject_id for e in self.entries if split is None or e.split == split]

    def entry(self, subject_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.subject_id == subject_id:
                return e
        raise KeyError(f"subject {subject_id!r} not in manifest")

    def validate(self, check_files: bool = True) -> None:
        ids = [e.subject_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("manifest subject_ids are not unique")
        for e in self.entries:
            if e.split not in ("train", "val"):
                raise ValueError(f"bad split {e.split!r} for subject {e.subject_id!r}")
        if not check_files:
            return
        if self.root is None:
            raise ValueError("manifest has no root directory; load it from disk first")
        for e in self.entries:
            paths = list(e.lf_paths.values()) + list(e.hf_paths.values()) + [e.mask_path]
            for rel in paths:
                vol = read_volume(self.root / rel)
                if vol.shape != tuple(e.shape):
                    raise ValueError(
                        f"{rel}: shape {vol.shape} does not match manifest {tuple(e.shape)}"
                    )

    def save(self, path) -> Path:
        path = Path(path)
        doc = {
            "format_version": self.format_version,
            "entries": [e.to_json_dict() for e in self.entries],
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise MalformedHeaderError(f"unreadable manifest {path}: {exc}") from exc
        if not isinstance(doc, dict) or "entries" not in doc:
            raise MalformedHeaderError(f"manifest {path} has no entries")
        manifest = cls(
            entries=[ManifestEntry.from_json_dict(d) for d in doc["entries"]],
            format_version=int(doc.get("format_version", FORMAT_VERSION)),
            root=path.parent,
        )
        manifest.validate(check_files=False)
        return manifest

    def load_sample(self, subject_id: str) -> PairedSample:
        """Read all seven volumes for one subject."""
        if self.root is None:
            raise ValueError("manifest has no root directory; load it from disk first")
        e = self.entry(subject_id)
        sample = PairedSample(
            lf={c: read_volume(self.root / e.lf_paths[c]) for c in CONTRASTS},
            hf={c: read_volume(self.root / e.hf_paths[c]) for c in CONTRASTS},
            mask=read_volume(self.root / e.mask_path),
            subject_id=subject_id,
        )
        sample.validate()
        return sample


def num_workers() -> int:
    """Data-worker count: ULFENC_NUM_WORKERS env var, defaulting to available cores."""
    raw = os.environ.get("ULFENC_NUM_WORKERS", "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError:
            warnings.warn(f"ignoring non-integer ULFENC_NUM_WORKERS={raw!r}")
            n = 0
        if n >= 1:
            return n
    return os.cpu_count() or 1
