"""Per-voxel features and training-set sampling.

Two feature families: raw patch intensities around the voxel (the default)
and a multi-scale filter bank (smoothed intensity, gradient magnitude,
Laplacian, largest-absolute Hessian eigenvalue per scale). Patch dimensions
are in voxels of the volume's own grid; out-of-bounds neighbors read as 0.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from ._ioutil import atomic_write_bytes
from .errors import (
    CorruptFileError,
    DimensionMismatchError,
    InsufficientSamplesError,
    ParameterError,
)
from .kernels import derive_stream_seed
from .volume import Volume, gaussian_smooth

KIND_PATCH = "patch"
KIND_MULTISCALE = "multiscale"


@dataclass(frozen=True)
class FeatureSpec:
    kind: str = KIND_PATCH
    patch_dims: tuple[int, int, int] = (5, 5, 3)
    scales_um: tuple[float, ...] = (1.0, 2.0, 4.0)

    def __post_init__(self):
        kind = self.kind.strip().lower()
        if kind not in (KIND_PATCH, KIND_MULTISCALE):
            raise ParameterError(f"unknown feature kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        dims = tuple(int(d) for d in self.patch_dims)
        if len(dims) != 3 or any(d < 1 or d % 2 == 0 for d in dims):
            raise ParameterError(f"patch dims must be odd and >= 1, got {dims}")
        object.__setattr__(self, "patch_dims", dims)
        scales = tuple(float(s) for s in self.scales_um)
        if not scales or any(s <= 0 for s in scales):
            raise ParameterError(f"scales must be positive, got {scales}")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ParameterError(f"scales must be ascending, got {scales}")
        object.__setattr__(self, "scales_um", scales)

    @property
    def length(self) -> int:
        if self.kind == KIND_PATCH:
            return self.patch_dims[0] * self.patch_dims[1] * self.patch_dims[2]
        return 4 * len(self.scales_um)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "patch_dims": list(self.patch_dims),
            "scales_um": list(self.scales_um),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(
            kind=d["kind"],
            patch_dims=tuple(d["patch_dims"]),
            scales_um=tuple(d["scales_um"]),
        )


def _hessian_abs_eig(second: list[list[np.ndarray]]) -> np.ndarray:
    shape = second[0][0].shape
    H = np.empty(shape + (3, 3))
    for a in range(3):
        for b in range(3):
            # symmetrize: mixed partials from nested central differences
            H[..., a, b] = 0.5 * (second[a][b] + second[b][a])
    eig = np.linalg.eigvalsh(H.reshape(-1, 3, 3))
    return np.abs(eig).max(axis=1).reshape(shape)


class FeatureExtractor:
    """Precomputes per-volume responses once, then gathers at voxels."""

    def __init__(self, v: Volume, spec: FeatureSpec):
        self.volume = v
        self.spec = spec
        self._channels: list[np.ndarray] = []
        if spec.kind == KIND_MULTISCALE:
            spacing = v.spacing
            for sigma in spec.scales_um:
                smoothed = gaussian_smooth(v, (sigma, sigma, sigma)).data
                grads = np.gradient(smoothed, *spacing)
                second = [
                    [np.gradient(grads[a], spacing[b], axis=b) for b in range(3)]
                    for a in range(3)
                ]
                gmag = np.sqrt(grads[0] ** 2 + grads[1] ** 2 + grads[2] ** 2)
                log = second[0][0] + second[1][1] + second[2][2]
                self._channels.extend(
                    [smoothed, gmag, log, _hessian_abs_eig(second)]
                )

    def features_at(self, voxels: np.ndarray) -> np.ndarray:
        """Feature matrix (N, spec.length) at integer voxel indices (N, 3)."""
        voxels = np.ascontiguousarray(np.atleast_2d(voxels), dtype=np.int64)
        if voxels.shape[1] != 3:
            raise ParameterError(f"voxels must be (N, 3), got {voxels.shape}")
        if self.spec.kind == KIND_PATCH:
            px, py, pz = self.spec.patch_dims
            return kernels.extract_patches(self.volume.data, voxels, px, py, pz)
        out = np.empty((voxels.shape[0], len(self._channels)))
        ix, iy, iz = voxels[:, 0], voxels[:, 1], voxels[:, 2]
        for c, channel in enumerate(self._channels):
            out[:, c] = channel[ix, iy, iz]
        return out


def extract_patch(v: Volume, voxel, spec: FeatureSpec) -> np.ndarray:
    if spec.kind != KIND_PATCH:
        raise ParameterError("extract_patch requires a patch spec")
    vox = np.asarray(voxel, dtype=np.int64).reshape(1, 3)
    px, py, pz = spec.patch_dims
    return kernels.extract_patches(v.data, vox, px, py, pz)[0]


def extract_multiscale(v: Volume, voxel, spec: FeatureSpec) -> np.ndarray:
    if spec.kind != KIND_MULTISCALE:
        raise ParameterError("extract_multiscale requires a multiscale spec")
    vox = np.asarray(voxel, dtype=np.int64).reshape(1, 3)
    return FeatureExtractor(v, spec).features_at(vox)[0]


@dataclass
class TrainingSet:
    features: np.ndarray  # (n, feature_dim)
    labels: np.ndarray  # (n,) int
    seed: int
    spec: FeatureSpec
    provenance: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ParameterError("features must be 2-D")
        if self.labels.shape != (self.features.shape[0],):
            raise DimensionMismatchError("features/labels length mismatch")
        if self.provenance and len(self.provenance) != self.labels.shape[0]:
            raise DimensionMismatchError("provenance length mismatch")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def foreground_mask(v: Volume, threshold: float = 1.0) -> np.ndarray:
    """Boolean foreground: voxels strictly above threshold (of the 0-255 range).

    Keeps training draws away from empty background.
    """
    return v.data > threshold


def _flat_to_voxels(flat: np.ndarray, dims) -> np.ndarray:
    nx, ny, _ = dims
    out = np.empty((flat.size, 3), dtype=np.int64)
    out[:, 0] = flat % nx
    out[:, 1] = (flat // nx) % ny
    out[:, 2] = flat // (nx * ny)
    return out


def _allocate_proportional(mask_sizes: list[int], n: int) -> list[int]:
    total = sum(mask_sizes)
    shares = [n * m / total for m in mask_sizes]
    counts = [min(math.floor(s), m) for s, m in zip(shares, mask_sizes)]
    remainder = n - sum(counts)
    order = sorted(
        range(len(shares)), key=lambda i: (counts[i] - shares[i], i)
    )
    pos = 0
    while remainder > 0:
        i = order[pos % len(order)]
        if counts[i] < mask_sizes[i]:
            counts[i] += 1
            remainder -= 1
        pos += 1
    return counts


def sample_training(
    pairs: list[tuple[Volume, Volume, Volume]],
    n: int,
    spec: FeatureSpec,
    seed: int,
    subject_ids: list[str] | None = None,
) -> TrainingSet:
    """Draw n voxels without replacement across masked regions.

    Each pair is (subject volume, class-label volume, mask volume) on one
    grid; the draw is split across pairs proportionally to mask size and is
    deterministic given the seed.
    """
    if n < 1:
        raise ParameterError("n must be >= 1")
    if not pairs:
        raise ParameterError("no training pairs given")
    if subject_ids is None:
        subject_ids = [f"s{i}" for i in range(len(pairs))]
    if len(subject_ids) != len(pairs):
        raise ParameterError("subject_ids length must match pairs")

    flat_masks = []
    for subject, labels, mask in pairs:
        if labels.grid.dims != subject.grid.dims or mask.grid.dims != subject.grid.dims:
            raise DimensionMismatchError("pair volumes must share one grid")
        flat_masks.append(np.flatnonzero(mask.data.ravel(order="F") > 0.5))
    sizes = [fm.size for fm in flat_masks]
    total = sum(sizes)
    if total < n:
        raise InsufficientSamplesError(
            f"requested {n} samples but only {total} masked voxels exist"
        )
    counts = _allocate_proportional(sizes, n)

    feats = np.empty((n, spec.length))
    labels_out = np.empty(n, dtype=np.int64)
    provenance: list[tuple[str, int]] = []
    row = 0
    for i, ((subject, labels, _), flat) in enumerate(zip(pairs, flat_masks)):
        k = counts[i]
        if k == 0:
            continue
        rng = np.random.default_rng(derive_stream_seed(seed, i))
        chosen = flat[rng.permutation(flat.size)[:k]]
        chosen.sort()
        voxels = _flat_to_voxels(chosen, subject.grid.dims)
        extractor = FeatureExtractor(subject, spec)
        feats[row:row + k] = extractor.features_at(voxels)
        label_flat = labels.data.ravel(order="F")
        labels_out[row:row + k] = label_flat[chosen].astype(np.int64)
        provenance.extend((subject_ids[i], int(f)) for f in chosen)
        row += k
    return TrainingSet(feats, labels_out, seed, spec, provenance)


_TS_MAGIC = b"MSTS"
_TS_VERSION = 1


def save_training_set(ts: TrainingSet, path: str) -> None:
    ids = sorted({sid for sid, _ in ts.provenance})
    id_index = {sid: i for i, sid in enumerate(ids)}
    header = json.dumps(
        {
            "n": ts.n,
            "feature_dim": ts.feature_dim,
            "seed": ts.seed,
            "spec": ts.spec.to_dict(),
            "subject_ids": ids,
            "has_provenance": bool(ts.provenance),
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    parts = [_TS_MAGIC, struct.pack("<II", _TS_VERSION, len(header)), header]
    parts.append(ts.features.astype("<f8").tobytes())
    parts.append(ts.labels.astype("<u1").tobytes())
    if ts.provenance:
        prov = np.empty((ts.n, 2), dtype="<u8")
        for r, (sid, vox) in enumerate(ts.provenance):
            prov[r, 0] = id_index[sid]
            prov[r, 1] = vox
        parts.append(prov.tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_training_set(path: str) -> TrainingSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _TS_MAGIC:
        raise CorruptFileError(f"{path}: not a training-set file")
    if len(blob) < 12:
        raise CorruptFileError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != _TS_VERSION:
        raise CorruptFileError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"{path}: bad header") from e
    n = header["n"]
    dim = header["feature_dim"]
    off = 12 + hlen
    need = n * dim * 8 + n
    if header["has_provenance"]:
        need += n * 16
    if len(blob) - off != need:
        raise CorruptFileError(
            f"{path}: payload holds {len(blob) - off} bytes, expected {need}"
        )
    feats = np.frombuffer(blob, dtype="<f8", count=n * dim, offset=off)
    feats = feats.reshape(n, dim).copy()
    off += n * dim * 8
    labels = np.frombuffer(blob, dtype="<u1", count=n, offset=off).astype(np.int64)
    off += n
    provenance: list[tuple[str, int]] = []
    if header["has_provenance"]:
        prov = np.frombuffer(blob, dtype="<u8", count=n * 2, offset=off).reshape(n, 2)
        ids = header["subject_ids"]
        provenance = [(ids[int(r[0])], int(r[1])) for r in prov]
    return TrainingSet(
        feats, labels, header["seed"], FeatureSpec.from_dict(header["spec"]), provenance
    )
