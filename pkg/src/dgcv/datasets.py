"""Data containers, random partitions, weights, simulators and CSV I/O."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import betaln, ndtr

from .errors import IngestionError, InvalidArgumentError

__all__ = [
    "Dataset",
    "Partition",
    "WeightScheme",
    "make_rng",
    "random_partition",
    "make_weights",
    "beta_mixture_truth",
    "wendland_truth",
    "simulate_beta_mixture",
    "simulate_wendland_field",
    "simulate_song_surrogate",
    "load_csv",
    "save_csv",
    "load_dataset",
    "read_table",
]


def make_rng(seed) -> np.random.Generator:
    """The one random generator used across the package (PCG64)."""
    return np.random.default_rng(seed)


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    f0: np.ndarray | None = None
    sigma: float | None = None
    columns: tuple[str, ...] | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != y.shape[0] or y.shape[0] < 1:
            raise InvalidArgumentError(f"X rows ({X.shape[0]}) must equal len(y) ({y.shape[0]}) >= 1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.f0 is not None:
            f0 = np.asarray(self.f0, dtype=float).ravel()
            if f0.shape != y.shape:
                raise InvalidArgumentError("f0 must have one entry per observation")
            object.__setattr__(self, "f0", f0)
        if self.sigma is not None and not self.sigma >= 0:
            raise InvalidArgumentError(f"sigma must be >= 0, got {self.sigma!r}")
        for arr in (X, y) + ((self.f0,) if self.f0 is not None else ()):
            arr.setflags(write=False)

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            self.X[idx],
            self.y[idx],
            None if self.f0 is None else self.f0[idx],
            self.sigma,
            self.columns,
        )

    def with_response(self, y) -> "Dataset":
        return Dataset(self.X, y, self.f0, self.sigma, self.columns)


@dataclass(frozen=True, eq=False)
class Partition:
    """Disjoint blocks ``S_1..S_m`` covering ``0..N-1`` (zero-based indices)."""

    blocks: tuple[np.ndarray, ...]
    N: int = field(default=-1)

    def __post_init__(self):
        blocks = tuple(np.asarray(b, dtype=int) for b in self.blocks)
        if not blocks:
            raise InvalidArgumentError("a partition needs at least one block")
        N = sum(b.size for b in blocks) if self.N < 0 else self.N
        seen = np.zeros(N, dtype=bool)
        for b in blocks:
            if b.size == 0:
                raise InvalidArgumentError("partition blocks must be nonempty")
            if b.min() < 0 or b.max() >= N or seen[b].any() or np.unique(b).size != b.size:
                raise InvalidArgumentError("partition blocks must be disjoint subsets of 0..N-1")
            seen[b] = True
        if not seen.all():
            raise InvalidArgumentError("partition blocks must cover every observation")
        for b in blocks:
            b.setflags(write=False)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "N", N)

    @property
    def m(self) -> int:
        return len(self.blocks)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(b.size for b in self.blocks)

    def block_of(self) -> np.ndarray:
        """Block label of every observation."""
        label = np.empty(self.N, dtype=int)
        for k, b in enumerate(self.blocks):
            label[b] = k
        return label

    def retained(self, m_star: int) -> np.ndarray:
        """Indices of the first ``m_star`` blocks, in block order."""
        return np.concatenate(self.blocks[:m_star])


def random_partition(N: int, m: int, seed) -> Partition:
    """Uniformly random partition into ``m`` blocks whose sizes differ by at most one."""
    N, m = int(N), int(m)
    if not 1 <= m <= N:
        raise InvalidArgumentError(f"need 1 <= m <= N, got m = {m}, N = {N}")
    perm = make_rng(seed).permutation(N)
    return Partition(tuple(np.sort(b) for b in np.array_split(perm, m)), N)


@dataclass(frozen=True)
class WeightScheme:
    kind: str = "uniform"
    m_star: int | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "subset"):
            raise InvalidArgumentError(f"weight scheme must be 'uniform' or 'subset', got {self.kind!r}")
        if self.kind == "subset" and self.m_star is None:
            raise InvalidArgumentError("subset weights need m_star")


def make_weights(scheme: WeightScheme, partition: Partition, N: int | None = None) -> np.ndarray:
    """Observation weights summing to N.

    ``subset`` keeps the first ``m_star`` blocks with weight N / N_{m*}
    and zeroes the rest.
    """
    N = partition.N if N is None else int(N)
    if N != partition.N:
        raise InvalidArgumentError(f"partition covers {partition.N} observations, not {N}")
    if scheme.kind == "uniform":
        return np.ones(N)
    m_star = int(scheme.m_star)
    if not 1 <= m_star <= partition.m:
        raise InvalidArgumentError(f"m_star must lie in 1..{partition.m}, got {m_star}")
    kept = partition.retained(m_star)
    w = np.zeros(N)
    w[kept] = N / kept.size
    return w


# ---------------------------------------------------------------------------
# simulators


def _beta_pdf(x, a, b):
    out = np.zeros_like(x)
    inside = (x > 0.0) & (x < 1.0)
    xi = x[inside]
    out[inside] = np.exp((a - 1.0) * np.log(xi) + (b - 1.0) * np.log1p(-xi) - betaln(a, b))
    return out


def beta_mixture_truth(x) -> np.ndarray:
    """2.4 Beta(30, 17) + 1.6 Beta(3, 11) densities."""
    x = np.asarray(x, dtype=float)
    return 2.4 * _beta_pdf(x, 30.0, 17.0) + 1.6 * _beta_pdf(x, 3.0, 11.0)


def simulate_beta_mixture(N: int, sigma: float = 3.0, seed=None) -> Dataset:
    """Uniform design on [0, 1] with the two-bump beta-density regression function."""
    if N < 1:
        raise InvalidArgumentError(f"N must be >= 1, got {N}")
    if sigma < 0:
        raise InvalidArgumentError(f"sigma must be >= 0, got {sigma}")
    rng = make_rng(seed)
    x = rng.uniform(0.0, 1.0, size=N)
    f0 = beta_mixture_truth(x)
    y = f0 + sigma * rng.standard_normal(N)
    return Dataset(x[:, None], y, f0, float(sigma))


def wendland_truth(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    p = X.shape[1]
    r = np.linalg.norm(X, axis=1) / math.sqrt(p)
    return 20.0 * np.maximum(1.0 - r, 0.0) ** 7 * (16.0 * r * r + 7.0 * r + 1.0)


def equicorrelated_normal(rng, N, p, rho):
    # sqrt(1 - rho) * I + shared factor: unit variances, pairwise correlation rho.
    shared = rng.standard_normal((N, 1))
    return math.sqrt(1.0 - rho) * rng.standard_normal((N, p)) + math.sqrt(rho) * shared


def simulate_wendland_field(N: int, p: int, rho: float = 0.0, sigma: float = 3.0, seed=None) -> Dataset:
    """Gaussian-copula covariates on [0, 1]^p with a Wendland-type truth."""
    if not 1 <= p <= 5 or int(p) != p:
        raise InvalidArgumentError(f"p must be an integer in 1..5, got {p}")
    if not 0.0 <= rho < 1.0:
        raise InvalidArgumentError(f"rho must lie in [0, 1), got {rho}")
    if N < 1 or sigma < 0:
        raise InvalidArgumentError("need N >= 1 and sigma >= 0")
    rng = make_rng(seed)
    X = ndtr(equicorrelated_normal(rng, N, int(p), rho))
    f0 = wendland_truth(X)
    y = f0 + sigma * rng.standard_normal(N)
    return Dataset(X, y, f0, float(sigma))


def simulate_song_surrogate(
    N: int, p: int = 90, latent_dim: int = 4, sigma: float = 1.0, seed=None, feature_noise: float = 0.1
) -> Dataset:
    """High-dimensional stand-in for an audio-feature regression table.

    Features are noisy linear images of a low-dimensional Gaussian latent
    vector, standardized per column. The truth is a smooth function of the
    latent vector, so Gaussian kernels on the standardized features are
    informative for bandwidths of a few units.
    """
    if N < 2 or p < latent_dim or latent_dim < 1:
        raise InvalidArgumentError("need N >= 2 and 1 <= latent_dim <= p")
    if sigma < 0 or feature_noise < 0:
        raise InvalidArgumentError("sigma and feature_noise must be >= 0")
    rng = make_rng(seed)
    loadings = rng.standard_normal((latent_dim, p)) / math.sqrt(latent_dim)
    u = rng.standard_normal((N, latent_dim))
    X = u @ loadings + feature_noise * rng.standard_normal((N, p))
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    f0 = 2.0 * np.sin(u[:, 0]) + np.cos(1.5 * u[:, 1]) + 0.5 * u[:, 2] * u[:, -1]
    y = f0 + sigma * rng.standard_normal(N)
    return Dataset(X, y, f0, float(sigma))


# ---------------------------------------------------------------------------
# CSV


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_csv(dataset: Dataset, path) -> Path:
    """Write covariates, response and (when known) the truth; sigma goes to a JSON sidecar."""
    path = Path(path)
    names = list(dataset.columns or [f"x{j + 1}" for j in range(dataset.p)])
    header = names + ["y"] + (["f0"] if dataset.f0 is not None else [])
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.N):
            row = [repr(float(v)) for v in dataset.X[i]] + [repr(float(dataset.y[i]))]
            if dataset.f0 is not None:
                row.append(repr(float(dataset.f0[i])))
            writer.writerow(row)
    meta = {"response": "y", "truth": "f0" if dataset.f0 is not None else None, "sigma": dataset.sigma}
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return path


def read_table(path: Path):
    """Header and float matrix of a numeric CSV, with located errors."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IngestionError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    data = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise IngestionError(f"{path}: row {i} has {len(row)} cells, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                data[i - 2, j] = float(cell)
            except ValueError:
                raise IngestionError(
                    f"{path}: non-numeric cell {cell!r} at row {i}, column {j} ({header[j]!r})"
                ) from None
    if data.shape[0] == 0:
        raise IngestionError(f"{path}: no data rows")
    return header, data


def _column_index(header, column, path):
    if isinstance(column, int) or (isinstance(column, str) and column.isdigit() and column not in header):
        idx = int(column)
        if not 0 <= idx < len(header):
            raise IngestionError(f"{path}: column index {idx} out of range (0..{len(header) - 1})")
        return idx
    if column not in header:
        raise IngestionError(f"{path}: column {column!r} not found; available: {header}")
    return header.index(column)


def load_csv(path, response="y", standardize: bool = False, truth=None, exclude=()) -> Dataset:
    """Read a header-first numeric CSV.

    ``response`` (name or zero-based index) becomes ``y``; an optional
    ``truth`` column becomes ``f0``; ``exclude`` names further non-covariate
    columns. With ``standardize`` every covariate is centered and scaled to
    unit standard deviation.
    """
    path = Path(path)
    header, data = read_table(path)
    ry = _column_index(header, response, path)
    skip = {ry}
    f0 = None
    if truth is not None:
        rt = _column_index(header, truth, path)
        skip.add(rt)
        f0 = data[:, rt]
    for name in exclude:
        skip.add(_column_index(header, name, path))
    keep = [j for j in range(len(header)) if j not in skip]
    if not keep:
        raise IngestionError(f"{path}: no covariate columns left")
    X = data[:, keep]
    if standardize:
        sd = X.std(axis=0)
        if np.any(sd == 0):
            bad = [header[keep[j]] for j in np.flatnonzero(sd == 0)]
            raise IngestionError(f"{path}: cannot standardize constant column(s) {bad}")
        X = (X - X.mean(axis=0)) / sd
        X = X - X.mean(axis=0)
    return Dataset(X, data[:, ry], f0, None, tuple(header[j] for j in keep))


def load_dataset(path, response=None, standardize: bool = False) -> Dataset:
    """Load a CSV, honouring the sidecar written by :func:`save_csv` when present."""
    path = Path(path)
    meta = {}
    if _sidecar(path).is_file():
        meta = json.loads(_sidecar(path).read_text(encoding="utf-8"))
    resp = response if response is not None else meta.get("response", "y")
    ds = load_csv(path, resp, standardize=standardize, truth=meta.get("truth"))
    if meta.get("sigma") is not None:
        ds = Dataset(ds.X, ds.y, ds.f0, float(meta["sigma"]), ds.columns)
    return ds
