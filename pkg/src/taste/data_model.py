"""Domain types, validation, and on-disk formats.

All types are immutable after construction (arrays are write-protected), so
they can be shared freely across worker threads.  Datasets live on disk as a
JSON manifest plus one coordinate-text file per slice and a delimited static
table; factor sets as one dense text matrix per factor.  Numeric text uses 17
significant digits, which round-trips IEEE doubles exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

FLOAT_FMT = "%.17g"
ORTHONORMAL_TOL = 1e-8

MANIFEST_NAME = "manifest.json"
STATIC_NAME = "static.csv"
SLICE_DIR = "slices"
FACTORS_META_NAME = "meta.json"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def _check_nonneg_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        idx = np.argwhere(~np.isfinite(arr))[0]
        raise DataError(f"{what} has non-finite value at {tuple(idx)}")
    if (arr < 0).any():
        idx = np.argwhere(arr < 0)[0]
        raise DataError(f"{what} has negative value {arr[tuple(idx)]} at {tuple(idx)}")


@dataclass(frozen=True)
class IrregularTensor:
    """Ordered collection of K nonnegative slices sharing a feature axis.

    Slice ``k`` is a dense ``I_k x J`` array for entity ``entity_ids[k]``;
    rows index visits/timestamps, columns index the J shared features.
    Missing coordinates in the on-disk format are zeros.
    """

    entity_ids: tuple[str, ...]
    slices: tuple[np.ndarray, ...]
    n_features: int

    def __post_init__(self):
        if len(self.slices) < 1:
            raise DataError("a tensor needs at least one slice")
        if len(self.entity_ids) != len(self.slices):
            raise DataError(
                f"{len(self.entity_ids)} entity ids for {len(self.slices)} slices"
            )
        if len(set(self.entity_ids)) != len(self.entity_ids):
            raise DataError("duplicate entity ids")
        if self.n_features < 1:
            raise DataError("n_features must be >= 1")
        frozen = []
        for k, x in enumerate(self.slices):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim != 2 or x.shape[0] < 1:
                raise DataError(
                    f"slice {self.entity_ids[k]!r}: expected a nonempty 2-d array, "
                    f"got shape {x.shape}"
                )
            if x.shape[1] != self.n_features:
                raise DataError(
                    f"slice {self.entity_ids[k]!r} has {x.shape[1]} features, "
                    f"expected {self.n_features}"
                )
            _check_nonneg_finite(x, f"slice {self.entity_ids[k]!r}")
            frozen.append(_freeze(x))
        object.__setattr__(self, "slices", tuple(frozen))
        object.__setattr__(self, "entity_ids", tuple(self.entity_ids))

    @classmethod
    def from_slices(cls, slices, entity_ids=None) -> "IrregularTensor":
        slices = [np.asarray(x, dtype=np.float64) for x in slices]
        if not slices:
            raise DataError("a tensor needs at least one slice")
        if entity_ids is None:
            entity_ids = [f"e{k:04d}" for k in range(len(slices))]
        first = slices[0]
        if first.ndim != 2:
            raise DataError(f"slice {entity_ids[0]!r}: expected a 2-d array")
        return cls(tuple(entity_ids), tuple(slices), int(first.shape[1]))

    @property
    def n_entities(self) -> int:
        return len(self.slices)

    @property
    def n_rows(self) -> tuple[int, ...]:
        return tuple(x.shape[0] for x in self.slices)

    def total_entries(self) -> int:
        return sum(x.size for x in self.slices)


@dataclass(frozen=True)
class StaticMatrix:
    """Dense nonnegative K x P side-information matrix, aligned with a tensor."""

    entity_ids: tuple[str, ...]
    values: np.ndarray
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"static matrix must be 2-d, got shape {values.shape}")
        if values.shape[0] != len(self.entity_ids):
            raise DataError(
                f"static matrix has {values.shape[0]} rows for "
                f"{len(self.entity_ids)} entities"
            )
        names = self.feature_names or tuple(f"f{p}" for p in range(values.shape[1]))
        if len(names) != values.shape[1]:
            raise DataError(
                f"{len(names)} feature names for {values.shape[1]} columns"
            )
        _check_nonneg_finite(values, "static matrix")
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "entity_ids", tuple(self.entity_ids))
        object.__setattr__(self, "feature_names", tuple(names))

    @property
    def n_static_features(self) -> int:
        return self.values.shape[1]

    def check_aligned(self, tensor: IrregularTensor) -> None:
        """Verify 1:1 entity alignment with a tensor, in order."""
        if self.entity_ids != tensor.entity_ids:
            raise DataError(
                "static matrix entities do not match tensor entities: "
                f"{len(self.entity_ids)} static rows vs {tensor.n_entities} slices"
            )


@dataclass(frozen=True)
class Hyperparams:
    """Model and fitting configuration.

    ``lam`` weights the static coupling term, ``mu`` the uniqueness term
    (uniform across entities).  ``tol`` is the relative-change convergence
    threshold on the objective.
    """

    rank: int
    lam: float = 0.1
    mu: float = 0.1
    tol: float = 1e-4
    max_sweeps: int = 500
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.rank, (int, np.integer)) or self.rank < 1:
            raise DataError(f"rank must be a positive integer, got {self.rank}")
        for name in ("lam", "mu"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise DataError(f"{name} must be finite and >= 0, got {value}")
        if not math.isfinite(self.tol) or self.tol < 0:
            raise DataError(f"tol must be finite and >= 0, got {self.tol}")
        if self.max_sweeps < 1:
            raise DataError(f"max_sweeps must be >= 1, got {self.max_sweeps}")
        if not 0 <= int(self.seed) < 2**64:
            raise DataError(f"seed must fit in 64 unsigned bits, got {self.seed}")

    def check_against(self, tensor: IrregularTensor) -> None:
        min_rows = min(tensor.n_rows)
        if self.rank > min_rows:
            raise DataError(
                f"rank {self.rank} exceeds the smallest slice row count {min_rows}"
            )
        if self.rank > tensor.n_features:
            raise DataError(
                f"rank {self.rank} exceeds the feature count {tensor.n_features}"
            )


@dataclass(frozen=True)
class FactorSet:
    """Model state: per-entity ``Q_k``/``U_k`` plus shared ``H``, ``W``, ``V``, ``F``.

    Row ``k`` of ``W`` stores ``diag(S_k)``.  ``Q_k`` have orthonormal
    columns; ``U``, ``W``, ``V``, ``F`` are entrywise nonnegative.  ``lam``
    and ``mu`` snapshot the weights the factors were fit with.
    """

    q: tuple[np.ndarray, ...]
    h: np.ndarray
    u: tuple[np.ndarray, ...]
    w: np.ndarray
    v: np.ndarray
    f: np.ndarray
    lam: float = 0.0
    mu: float = 0.0
    entity_ids: tuple[str, ...] = ()

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise DataError(f"H must be square, got shape {h.shape}")
        rank = h.shape[0]
        if not np.isfinite(h).all():
            raise DataError("H has non-finite values")
        w = np.asarray(self.w, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        f = np.asarray(self.f, dtype=np.float64)
        for name, mat in (("W", w), ("V", v), ("F", f)):
            if mat.ndim != 2 or mat.shape[1] != rank:
                raise DataError(f"{name} must have {rank} columns, got shape {mat.shape}")
            _check_nonneg_finite(mat, name)
        n_entities = w.shape[0]
        if len(self.q) != n_entities or len(self.u) != n_entities:
            raise DataError(
                f"expected {n_entities} Q and U matrices, got {len(self.q)} and {len(self.u)}"
            )
        ids = self.entity_ids or tuple(f"e{k:04d}" for k in range(n_entities))
        if len(ids) != n_entities:
            raise DataError(f"{len(ids)} entity ids for {n_entities} entities")
        q_frozen, u_frozen = [], []
        eye = np.eye(rank)
        for k, (qk, uk) in enumerate(zip(self.q, self.u)):
            qk = np.asarray(qk, dtype=np.float64)
            uk = np.asarray(uk, dtype=np.float64)
            if qk.shape != uk.shape or qk.ndim != 2 or qk.shape[1] != rank:
                raise DataError(
                    f"entity {ids[k]!r}: Q shape {qk.shape} and U shape {uk.shape} "
                    f"must agree and have {rank} columns"
                )
            if not np.isfinite(qk).all():
                raise DataError(f"entity {ids[k]!r}: Q has non-finite values")
            gap = np.max(np.abs(qk.T @ qk - eye))
            if gap > ORTHONORMAL_TOL:
                raise DataError(
                    f"entity {ids[k]!r}: Q columns are not orthonormal "
                    f"(max deviation {gap:.3e})"
                )
            _check_nonneg_finite(uk, f"entity {ids[k]!r}: U")
            q_frozen.append(_freeze(qk))
            u_frozen.append(_freeze(uk))
        object.__setattr__(self, "q", tuple(q_frozen))
        object.__setattr__(self, "u", tuple(u_frozen))
        object.__setattr__(self, "h", _freeze(h))
        object.__setattr__(self, "w", _freeze(w))
        object.__setattr__(self, "v", _freeze(v))
        object.__setattr__(self, "f", _freeze(f))
        object.__setattr__(self, "entity_ids", ids)

    @property
    def rank(self) -> int:
        return self.h.shape[0]

    @property
    def n_entities(self) -> int:
        return self.w.shape[0]

    def check_against(self, tensor: IrregularTensor, static: StaticMatrix | None = None) -> None:
        if tensor.n_entities != self.n_entities:
            raise DataError(
                f"factors cover {self.n_entities} entities, tensor has {tensor.n_entities}"
            )
        if self.v.shape[0] != tensor.n_features:
            raise DataError(
                f"V has {self.v.shape[0]} rows, tensor has {tensor.n_features} features"
            )
        for k, x in enumerate(tensor.slices):
            if self.u[k].shape[0] != x.shape[0]:
                raise DataError(
                    f"entity {tensor.entity_ids[k]!r}: U has {self.u[k].shape[0]} rows, "
                    f"slice has {x.shape[0]}"
                )
        if static is not None and self.f.shape[0] != static.n_static_features:
            raise DataError(
                f"F has {self.f.shape[0]} rows, static matrix has "
                f"{static.n_static_features} columns"
            )


@dataclass
class SweepRecord:
    sweep: int
    objective: float
    rmse: float
    cpi: float
    seconds: float


@dataclass
class FitReport:
    """Per-sweep trace of a fit or projection run."""

    records: list[SweepRecord] = field(default_factory=list)
    termination: str = "error"
    ridge_events: int = 0
    rank_warnings: int = 0

    @property
    def n_sweeps(self) -> int:
        return len(self.records)

    @property
    def final(self) -> SweepRecord:
        if not self.records:
            raise DataError("empty fit report")
        return self.records[-1]

    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    def total_seconds(self) -> float:
        return float(sum(r.seconds for r in self.records))


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------


def save_dataset(tensor: IrregularTensor, static: StaticMatrix, directory) -> Path:
    """Write a dataset directory and return the manifest path.

    Layout: ``manifest.json`` (J, P, entity order, relative paths),
    ``static.csv`` (header row of feature names), and ``slices/<id>.coo``
    with one ``row col value`` triple per nonzero.
    """
    static.check_aligned(tensor)
    directory = Path(directory)
    try:
        (directory / SLICE_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {directory}: {exc}") from exc
    entities = []
    for eid, x in zip(tensor.entity_ids, tensor.slices):
        rel = f"{SLICE_DIR}/{eid}.coo"
        rows, cols = np.nonzero(x)
        lines = [
            f"{i} {j} {FLOAT_FMT % x[i, j]}" for i, j in zip(rows.tolist(), cols.tolist())
        ]
        (directory / rel).write_text("\n".join(lines) + ("\n" if lines else ""))
        entities.append({"entity_id": eid, "n_rows": int(x.shape[0]), "slice_path": rel})
    manifest = {
        "format": "taste-dataset-v1",
        "n_features": tensor.n_features,
        "n_static_features": static.n_static_features,
        "static_path": STATIC_NAME,
        "entities": entities,
    }
    header = ",".join(("entity_id",) + static.feature_names)
    rows = [header]
    for eid, row in zip(static.entity_ids, static.values):
        rows.append(",".join([eid] + [FLOAT_FMT % val for val in row]))
    (directory / STATIC_NAME).write_text("\n".join(rows) + "\n")
    manifest_path = directory / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest_path


def _parse_slice_file(path: Path, n_rows: int, n_features: int, eid: str) -> np.ndarray:
    x = np.zeros((n_rows, n_features))
    seen = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 'row col value', got {line!r}")
        try:
            i, j, value = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if not 0 <= i < n_rows:
            raise DataError(
                f"slice {eid!r} ({path}:{lineno}): row {i} out of range [0, {n_rows})"
            )
        if not 0 <= j < n_features:
            raise DataError(
                f"slice {eid!r} ({path}:{lineno}): column {j} out of range [0, {n_features})"
            )
        if (i, j) in seen:
            raise DataError(f"slice {eid!r} ({path}:{lineno}): duplicate coordinate ({i}, {j})")
        if not math.isfinite(value) or value < 0:
            raise DataError(
                f"slice {eid!r} ({path}:{lineno}): value {value} at ({i}, {j}) "
                "must be finite and >= 0"
            )
        seen.add((i, j))
        x[i, j] = value
    return x


def load_dataset(manifest_path) -> tuple[IrregularTensor, StaticMatrix]:
    """Load and validate a dataset directory or manifest file."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid manifest: {exc}") from exc
    base = path.parent
    try:
        n_features = int(manifest["n_features"])
        n_static = int(manifest["n_static_features"])
        entities = manifest["entities"]
        static_path = base / manifest["static_path"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: missing manifest field: {exc}") from exc

    ids, slices = [], []
    for entry in entities:
        eid = entry["entity_id"]
        slice_path = base / entry["slice_path"]
        if not slice_path.is_file():
            raise DataError(f"slice file not found: {slice_path}")
        slices.append(_parse_slice_file(slice_path, int(entry["n_rows"]), n_features, eid))
        ids.append(eid)
    tensor = IrregularTensor(tuple(ids), tuple(slices), n_features)

    if not static_path.is_file():
        raise DataError(f"static table not found: {static_path}")
    lines = static_path.read_text().splitlines()
    if not lines:
        raise DataError(f"{static_path}: empty static table")
    header = lines[0].split(",")
    if header[0] != "entity_id":
        raise DataError(f"{static_path}: first header column must be 'entity_id'")
    names = tuple(header[1:])
    if len(names) != n_static:
        raise DataError(
            f"{static_path}: {len(names)} feature columns, manifest says {n_static}"
        )
    s_ids, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 1 + n_static:
            raise DataError(
                f"{static_path}:{lineno}: expected {1 + n_static} fields, got {len(fields)}"
            )
        s_ids.append(fields[0])
        try:
            rows.append([float(v) for v in fields[1:]])
        except ValueError as exc:
            raise DataError(f"{static_path}:{lineno}: {exc}") from exc
    if tuple(s_ids) != tensor.entity_ids:
        raise DataError(
            f"{static_path}: static entities do not align with the manifest slice order "
            f"({len(s_ids)} static rows vs {tensor.n_entities} slices)"
        )
    static = StaticMatrix(tuple(s_ids), np.array(rows, dtype=np.float64).reshape(len(s_ids), n_static), names)
    return tensor, static


# ---------------------------------------------------------------------------
# Factor files
# ---------------------------------------------------------------------------


def _write_matrix(path: Path, mat: np.ndarray) -> None:
    np.savetxt(path, np.atleast_2d(mat), fmt=FLOAT_FMT, delimiter=" ")


def _read_matrix(path: Path, what: str) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"{what} file not found: {path}")
    try:
        mat = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: corrupted {what} matrix: {exc}") from exc
    return mat


def save_factors(factors: FactorSet, directory) -> Path:
    """Write a factor set directory; returns its path."""
    directory = Path(directory)
    try:
        (directory / "q").mkdir(parents=True, exist_ok=True)
        (directory / "u").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create factors directory {directory}: {exc}") from exc
    meta = {
        "format": "taste-factors-v1",
        "rank": factors.rank,
        "lam": factors.lam,
        "mu": factors.mu,
        "entity_ids": list(factors.entity_ids),
    }
    (directory / FACTORS_META_NAME).write_text(json.dumps(meta, indent=1) + "\n")
    _write_matrix(directory / "h.txt", factors.h)
    _write_matrix(directory / "w.txt", factors.w)
    _write_matrix(directory / "v.txt", factors.v)
    _write_matrix(directory / "f.txt", factors.f)
    for eid, qk, uk in zip(factors.entity_ids, factors.q, factors.u):
        _write_matrix(directory / "q" / f"{eid}.txt", qk)
        _write_matrix(directory / "u" / f"{eid}.txt", uk)
    return directory


def load_factors(directory) -> FactorSet:
    """Load a factor set directory, re-validating every invariant."""
    directory = Path(directory)
    meta_path = directory / FACTORS_META_NAME
    if not meta_path.is_file():
        raise DataError(f"factors metadata not found: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{meta_path}: invalid metadata: {exc}") from exc
    try:
        ids = tuple(meta["entity_ids"])
        lam = float(meta["lam"])
        mu = float(meta["mu"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{meta_path}: missing metadata field: {exc}") from exc
    h = _read_matrix(directory / "h.txt", "H")
    w = _read_matrix(directory / "w.txt", "W")
    v = _read_matrix(directory / "v.txt", "V")
    f = _read_matrix(directory / "f.txt", "F")
    q = tuple(_read_matrix(directory / "q" / f"{eid}.txt", "Q") for eid in ids)
    u = tuple(_read_matrix(directory / "u" / f"{eid}.txt", "U") for eid in ids)
    return FactorSet(q=q, h=h, u=u, w=w, v=v, f=f, lam=lam, mu=mu, entity_ids=ids)


def write_score_table(path, entity_ids, scores: np.ndarray) -> None:
    """Write an entity-keyed dense score table (entity_id + one column per factor)."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if scores.shape[0] != len(entity_ids):
        raise DataError(
            f"{scores.shape[0]} score rows for {len(entity_ids)} entities"
        )
    header = ",".join(["entity_id"] + [f"w{r}" for r in range(scores.shape[1])])
    lines = [header]
    for eid, row in zip(entity_ids, scores):
        lines.append(",".join([eid] + [FLOAT_FMT % val for val in row]))
    Path(path).write_text("\n".join(lines) + "\n")
