"""On-disk feature bundles and the synthetic bundle generator.

Matrix files (``.gpcb``)::

    b"GPCB" | u32 version=1 | u64 rows | u64 cols | u8 dtype=1 (f32) | rows*cols f32

Label files (``.gpcl``)::

    b"GPCL" | u32 version=1 | u64 rows | u64 num_classes | rows u32

Everything is little-endian and row-major. A ``manifest.json`` maps roles to
file names. Data is stored as float32 and promoted to float64 on load.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MATRIX_MAGIC = b"GPCB"
LABEL_MAGIC = b"GPCL"
FORMAT_VERSION = 1
DTYPE_F32 = 1
NORM_TOL = 1e-4
# float32 storage alone perturbs a unit row's norm by at most ~6e-8
SNAP_TOL = 1e-6

_MATRIX_HEADER = struct.Struct("<4sIQQB")
_LABEL_HEADER = struct.Struct("<4sIQQ")

REQUIRED_ROLES = ("train_x", "train_y", "val_x", "val_y", "test_x", "test_y", "weights")
OPTIONAL_ROLES = ("unlabeled", "unlabeled_aug")


class BundleError(Exception):
    """Base class for bundle loading and validation failures."""


class MissingFileError(BundleError):
    pass


class HeaderError(BundleError):
    pass


class NonFiniteError(BundleError):
    pass


class NormViolationError(BundleError):
    def __init__(self, what: str, index: int, norm: float):
        self.what = what
        self.index = index
        self.norm = norm
        super().__init__(f"{what}: row {index} has norm {norm:.6g}, expected 1 within {NORM_TOL}")


class InvariantError(BundleError):
    pass


# ---------------------------------------------------------------------------
# validation helpers


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        bad = int(np.argwhere(~np.isfinite(a))[0][0])
        raise NonFiniteError(f"{what}: non-finite value in row {bad}")


def unit_rows(X: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Validate row norms against the unit-norm invariant.

    Rows whose norm is off by no more than storage rounding (``SNAP_TOL``) are
    kept bit-for-bit so that a write/read cycle is exact. Rows off by up to
    ``NORM_TOL`` are re-normalized; anything further raises
    :class:`NormViolationError` naming the first offending row.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0:
        raise InvariantError(f"{what}: expected a 2-d matrix with dim > 0, got shape {X.shape}")
    _check_finite(X, what)
    if X.shape[0] == 0:
        return X.copy()
    norms = np.linalg.norm(X, axis=1)
    off = np.abs(norms - 1.0) > NORM_TOL
    if off.any():
        i = int(np.flatnonzero(off)[0])
        raise NormViolationError(what, i, float(norms[i]))
    out = X.copy()
    snap = np.abs(norms - 1.0) > SNAP_TOL
    out[snap] /= norms[snap, None]
    return out


@dataclass(frozen=True)
class LabeledSplit:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if x.ndim != 2:
            raise InvariantError(f"features must be 2-d, got shape {x.shape}")
        if x.shape[0] != y.shape[0]:
            raise InvariantError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def rows(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class FeatureBundle:
    train: LabeledSplit
    val: LabeledSplit
    test: LabeledSplit
    weights: np.ndarray  # dim x c, unit columns
    class_names: list[str]
    unlabeled: np.ndarray | None = None
    unlabeled_aug: np.ndarray | None = None
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    def validate(self) -> "FeatureBundle":
        """Check every invariant; returns a validated copy (see :func:`unit_rows`)."""
        W = np.asarray(self.weights, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] == 0 or W.shape[1] == 0:
            raise InvariantError(f"weights must be a non-empty dim x c matrix, got {W.shape}")
        W = unit_rows(W.T, "weights (column)").T
        dim, c = W.shape
        if len(self.class_names) != c:
            raise InvariantError(f"{len(self.class_names)} class names for {c} classes")
        splits = {}
        for name in ("train", "val", "test"):
            s = getattr(self, name)
            if s.x.shape[1] != dim:
                raise InvariantError(f"{name} dim {s.x.shape[1]} != weights dim {dim}")
            if s.rows and (s.y.min() < 0 or s.y.max() >= c):
                raise InvariantError(f"{name} labels outside [0, {c})")
            splits[name] = LabeledSplit(unit_rows(s.x, f"{name}_x"), s.y)
        unl = aug = None
        if self.unlabeled is not None:
            unl = unit_rows(self.unlabeled, "unlabeled")
            if unl.shape[1] != dim:
                raise InvariantError(f"unlabeled dim {unl.shape[1]} != {dim}")
        if self.unlabeled_aug is not None:
            if unl is None:
                raise InvariantError("unlabeled_aug given without unlabeled")
            aug = unit_rows(self.unlabeled_aug, "unlabeled_aug")
            if aug.shape != unl.shape:
                raise InvariantError(f"unlabeled_aug shape {aug.shape} != unlabeled {unl.shape}")
        return replace(self, weights=W, unlabeled=unl, unlabeled_aug=aug, **splits)


# ---------------------------------------------------------------------------
# raw file formats


def write_matrix(path: str | os.PathLike, X: np.ndarray) -> None:
    X = np.ascontiguousarray(X, dtype="<f4")
    if X.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {X.shape}")
    with open(path, "wb") as fh:
        fh.write(_MATRIX_HEADER.pack(MATRIX_MAGIC, FORMAT_VERSION, X.shape[0], X.shape[1], DTYPE_F32))
        fh.write(X.tobytes())


def read_matrix(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"matrix file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _MATRIX_HEADER.size:
        raise HeaderError(f"{path}: truncated header")
    magic, version, rows, cols, dtype = _MATRIX_HEADER.unpack_from(raw)
    if magic != MATRIX_MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION or dtype != DTYPE_F32:
        raise HeaderError(f"{path}: unsupported version {version} / dtype {dtype}")
    expected = _MATRIX_HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise HeaderError(f"{path}: {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_MATRIX_HEADER.size, count=rows * cols)
    return data.reshape(rows, cols).astype(np.float64)


def write_labels(path: str | os.PathLike, y: np.ndarray, num_classes: int) -> None:
    y = np.ascontiguousarray(y, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(_LABEL_HEADER.pack(LABEL_MAGIC, FORMAT_VERSION, y.shape[0], num_classes))
        fh.write(y.tobytes())


def read_labels(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"label file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _LABEL_HEADER.size:
        raise HeaderError(f"{path}: truncated header")
    magic, version, rows, num_classes = _LABEL_HEADER.unpack_from(raw)
    if magic != LABEL_MAGIC or version != FORMAT_VERSION:
        raise HeaderError(f"{path}: bad magic {magic!r} or version {version}")
    expected = _LABEL_HEADER.size + 4 * rows
    if len(raw) != expected:
        raise HeaderError(f"{path}: {len(raw)} bytes, header implies {expected}")
    y = np.frombuffer(raw, dtype="<u4", offset=_LABEL_HEADER.size, count=rows)
    return y.astype(np.int64), int(num_classes)


# ---------------------------------------------------------------------------
# bundles


def storage_precision(X: np.ndarray) -> np.ndarray:
    """Round to float32 values, i.e. exactly what a write/read cycle returns."""
    return np.asarray(X, dtype=np.float32).astype(np.float64)


def write_bundle(bundle: FeatureBundle, path: str | os.PathLike) -> None:
    """Write ``bundle`` as a directory of ``.gpcb``/``.gpcl`` files plus manifest."""
    bundle = bundle.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    c = bundle.num_classes
    files = {}
    for name in ("train", "val", "test"):
        split = getattr(bundle, name)
        write_matrix(path / f"{name}_x.gpcb", split.x)
        write_labels(path / f"{name}_y.gpcl", split.y, c)
        files[f"{name}_x"] = f"{name}_x.gpcb"
        files[f"{name}_y"] = f"{name}_y.gpcl"
    write_matrix(path / "weights.gpcb", bundle.weights)
    files["weights"] = "weights.gpcb"
    if bundle.unlabeled is not None:
        write_matrix(path / "unlabeled.gpcb", bundle.unlabeled)
        files["unlabeled"] = "unlabeled.gpcb"
    if bundle.unlabeled_aug is not None:
        write_matrix(path / "unlabeled_aug.gpcb", bundle.unlabeled_aug)
        files["unlabeled_aug"] = "unlabeled_aug.gpcb"
    for role, X in sorted(bundle.extras.items()):
        write_matrix(path / f"{role}.gpcb", X)
        files[role] = f"{role}.gpcb"
    manifest = {
        "dim": bundle.dim,
        "num_classes": c,
        "class_names": list(bundle.class_names),
        "files": files,
        "rows": {name: getattr(bundle, name).rows for name in ("train", "val", "test")},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | os.PathLike) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.is_file():
        raise MissingFileError(f"manifest not found: {mpath}")
    return json.loads(mpath.read_text())


def add_to_manifest(path: str | os.PathLike, role: str, X: np.ndarray) -> None:
    """Store an extra matrix (e.g. a trained projection) under ``role``."""
    path = Path(path)
    manifest = read_manifest(path)
    fname = f"{role}.gpcb"
    write_matrix(path / fname, X)
    manifest["files"][role] = fname
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_bundle(path: str | os.PathLike) -> FeatureBundle:
    path = Path(path)
    manifest = read_manifest(path)
    files = manifest.get("files", {})
    for role in REQUIRED_ROLES:
        if role not in files:
            raise MissingFileError(f"manifest in {path} has no entry for role {role!r}")

    def mat(role):
        return read_matrix(path / files[role])

    def lab(role):
        y, c = read_labels(path / files[role])
        if c != manifest["num_classes"]:
            raise HeaderError(f"{files[role]}: num_classes {c} != manifest {manifest['num_classes']}")
        return y

    splits = {}
    for name in ("train", "val", "test"):
        x, y = mat(f"{name}_x"), lab(f"{name}_y")
        if x.shape[0] != y.shape[0]:
            raise HeaderError(f"{name}: {x.shape[0]} rows vs {y.shape[0]} labels")
        splits[name] = LabeledSplit(x, y)
    W = mat("weights")
    if W.shape != (manifest["dim"], manifest["num_classes"]):
        raise HeaderError(f"weights shape {W.shape} disagrees with manifest")
    extras = {
        role: mat(role) for role in files if role not in REQUIRED_ROLES and role not in OPTIONAL_ROLES
    }
    bundle = FeatureBundle(
        weights=W,
        class_names=list(manifest["class_names"]),
        unlabeled=mat("unlabeled") if "unlabeled" in files else None,
        unlabeled_aug=mat("unlabeled_aug") if "unlabeled_aug" in files else None,
        extras=extras,
        **splits,
    )
    return bundle.validate()


# ---------------------------------------------------------------------------
# synthetic data


def _normalize(X: np.ndarray) -> np.ndarray:
    return X / np.linalg.norm(X, axis=-1, keepdims=True)


def generate_synthetic(
    c: int = 10,
    k: int = 16,
    dim: int = 64,
    spread: float = 0.3,
    text_noise: float = 0.3,
    seed: int = 0,
    n_test_per_class: int = 50,
    n_val_per_class: int | None = None,
    n_unlabeled_per_class: int = 32,
) -> FeatureBundle:
    """Clustered-on-the-sphere stand-in for pre-extracted image/text features.

    Class centers are uniform random unit vectors and noise is standard normal
    per coordinate. Samples are ``normalize(center + spread * noise)``;
    zero-shot weight column ``j`` is
    ``normalize(center_j + text_noise * noise)``; the augmented unlabeled view
    perturbs each unlabeled row again with ``spread`` noise.

    Values are rounded to float32 so that a written and re-read bundle equals
    the generated one exactly.
    """
    if c < 2 or k < 1 or dim < 4:
        raise ValueError(f"need c >= 2, k >= 1, dim >= 4 (got c={c}, k={k}, dim={dim})")
    if spread < 0 or text_noise < 0:
        raise ValueError("spread and text_noise must be non-negative")
    if n_test_per_class < 0 or n_unlabeled_per_class < 0:
        raise ValueError("per-class counts must be non-negative")
    if n_val_per_class is None:
        n_val_per_class = n_test_per_class
    rng = np.random.default_rng(seed)
    centers = _normalize(rng.standard_normal((c, dim)))

    def draw(per_class):
        y = np.repeat(np.arange(c), per_class)
        noise = rng.standard_normal((y.size, dim))
        return _normalize(centers[y] + spread * noise), y

    def stored(X):
        return storage_precision(X) if X.size else X.reshape(0, dim)

    train_x, train_y = draw(k)
    val_x, val_y = draw(n_val_per_class)
    test_x, test_y = draw(n_test_per_class)
    W = _normalize(centers + text_noise * rng.standard_normal((c, dim))).T
    unl, _ = draw(n_unlabeled_per_class)
    aug = _normalize(unl + spread * rng.standard_normal(unl.shape))
    bundle = FeatureBundle(
        train=LabeledSplit(stored(train_x), train_y),
        val=LabeledSplit(stored(val_x), val_y),
        test=LabeledSplit(stored(test_x), test_y),
        weights=stored(W.T).T,
        class_names=[f"class_{j:03d}" for j in range(c)],
        unlabeled=stored(unl) if unl.size else None,
        unlabeled_aug=stored(aug) if aug.size else None,
    )
    return bundle
