"""Statistics fitted on ID training data that the feature-based scores use."""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import ConfigError, DataError, NumericalError
from .scores import ScoreId, ScoreVec, max_logit, residual_norm
from .tensor_io import atomic_write_bytes, decode_tensor, encode_tensor

logger = logging.getLogger(__name__)

STATS_VERSION = 1
DEFAULT_RIDGE = 1e-6


class SchemaViolation(ConfigError):
    pass


class DegenerateStd(NumericalError):
    pass


@dataclass
class SubspaceBasis:
    """Top-``d`` principal directions (columns of ``basis``) and centring mean."""

    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    centered: bool = True

    def __post_init__(self):
        # contiguous float64 so scoring takes the same BLAS path after a reload
        self.mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        self.basis = np.ascontiguousarray(self.basis, dtype=np.float64)
        self.eigenvalues = np.ascontiguousarray(self.eigenvalues, dtype=np.float64)

    @property
    def d(self) -> int:
        return self.basis.shape[1]


@dataclass
class ClassGaussians:
    means: np.ndarray
    precision: np.ndarray
    ridge: float

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=np.float64)
        self.precision = np.ascontiguousarray(self.precision, dtype=np.float64)


@dataclass
class S2Stats:
    score_id: str
    mean: float
    std: float
    ddof: int = 1


@dataclass
class IdStats:
    K: int
    L: int
    subspace: SubspaceBasis | None = None
    gaussians: ClassGaussians | None = None
    s2_stats: dict = field(default_factory=dict)
    vim_c: float | None = None

    def __post_init__(self):
        if self.vim_c is not None and self.subspace is None:
            raise SchemaViolation("vim_c requires a fitted subspace")


def default_subspace_dim(L: int) -> int:
    return 1000 if L > 1500 else 512


def _finite64(x, name) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError(f"non-finite {name}")
    return x


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made positive (argmax: lowest index on ties)
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def fit_subspace(train_features, d: int | None = None, center: bool = True) -> SubspaceBasis:
    """Principal subspace of the ID-train features.

    The covariance uses the 1/N normaliser, so the train-set residual energy
    equals N times the sum of the discarded eigenvalues. Without an explicit
    ``d`` the usual rule (1000 if L > 1500 else 512) is clamped to
    ``min(rule, N - 2, L - 1)``.
    """
    z = _finite64(train_features, "features")
    if z.ndim != 2:
        raise DataError("features must be N x L")
    n, L = z.shape
    if n < 2:
        raise DataError("need at least two training samples")
    if d is None:
        rule = default_subspace_dim(L)
        d = min(rule, n - 2, L - 1)
        if d != rule:
            logger.warning("subspace dim rule gives %d; clamped to %d (N=%d, L=%d)", rule, d, n, L)
        else:
            logger.info("subspace dim %d from rule (L=%d)", d, L)
        if d < 1:
            raise DataError(f"cannot fit a subspace with N={n}, L={L}")
    elif d < 1 or d >= min(n - 1, L):
        raise DataError(f"subspace dim {d} must be in [1, min(N-1, L)) = [1, {min(n - 1, L)})")

    mean = z.mean(axis=0) if center else np.zeros(L)
    zc = z - mean
    cov = (zc.T @ zc) / n
    cov = 0.5 * (cov + cov.T)
    evals, evecs = linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    basis = _fix_signs(evecs[:, :d])
    return SubspaceBasis(mean=mean, basis=basis, eigenvalues=evals, centered=center)


def fit_class_gaussians(train_features, labels, ridge_lambda: float = DEFAULT_RIDGE,
                        n_classes: int | None = None) -> ClassGaussians:
    z = _finite64(train_features, "features")
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if y.shape[0] != z.shape[0]:
        raise DataError("labels and features disagree on N")
    k = n_classes if n_classes is not None else int(y.max()) + 1
    counts = np.bincount(y, minlength=k)
    if np.any(counts < 2):
        raise DataError(f"classes with fewer than 2 samples: {np.flatnonzero(counts < 2).tolist()}")

    means = np.stack([z[y == c].mean(axis=0) for c in range(k)])
    centred = z - means[y]
    cov = (centred.T @ centred) / z.shape[0]
    cov = 0.5 * (cov + cov.T)
    scale = float(np.mean(np.diag(cov)))
    if scale <= 0.0:
        # all scatter zero: fall back to a unit scale for the ridge
        scale = 1.0
    ridge = ridge_lambda * scale
    reg = cov + ridge * np.eye(cov.shape[0])
    try:
        factor = linalg.cho_factor(reg, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"tied covariance not positive definite after ridge: {exc}") from None
    precision = linalg.cho_solve(factor, np.eye(cov.shape[0]))
    precision = 0.5 * (precision + precision.T)
    return ClassGaussians(means=means, precision=precision, ridge=ridge)


def fit_s2_stats(train_s2) -> S2Stats:
    if isinstance(train_s2, ScoreVec):
        sid, vals = train_s2.score_id, train_s2.values
    else:
        sid, vals = "unknown", np.asarray(train_s2, dtype=np.float64)
    vals = _finite64(vals, "scores").reshape(-1)
    if vals.size < 2:
        raise DegenerateStd("need at least two samples")
    mean = float(vals.mean())
    std = float(vals.std(ddof=1))
    if not std > 0.0:
        raise DegenerateStd(f"{sid}: standard deviation is zero")
    return S2Stats(score_id=sid, mean=mean, std=std, ddof=1)


def fit_vim_scale(train_logits, train_features, subspace: SubspaceBasis) -> float:
    mean_logit = float(np.mean(max_logit(train_logits)))
    mean_res = float(np.mean(residual_norm(train_features, subspace)))
    if mean_res == 0.0:
        raise NumericalError("mean ID residual is zero; ViM scale undefined")
    return mean_logit / mean_res


# --- persistence ---------------------------------------------------------

def _blob(arr) -> str:
    return base64.b64encode(encode_tensor(np.atleast_1d(arr))).decode("ascii")


def _unblob(s: str) -> np.ndarray:
    return decode_tensor(base64.b64decode(s)).astype(np.float64)


def _matrix_field(arr) -> dict:
    """Encode a float64 array as a list of SCT1 (binary32) blobs.

    SCT1 stores binary32 only, so each value is split into float32 parts whose
    float64 sum, taken left to right, restores it exactly. Arrays that cannot
    be split that way fall back to raw little-endian float64 bytes.
    """
    a = np.asarray(arr, dtype=np.float64)
    parts = []
    rest = a.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(4):
            p = rest.astype(np.float32)
            parts.append(p)
            rest = rest - p.astype(np.float64)
            if not np.any(rest):
                break
    total = np.zeros_like(a)
    with np.errstate(over="ignore", invalid="ignore"):
        for p in parts:
            total = total + p.astype(np.float64)
    if np.array_equal(total, a) and np.all(np.isfinite(total)):
        return {"shape": list(a.shape), "parts": [_blob(p) for p in parts]}
    raw = base64.b64encode(a.astype("<f8").tobytes()).decode("ascii")
    return {"shape": list(a.shape), "f64": raw}


def _matrix_from(d: dict) -> np.ndarray:
    shape = tuple(d["shape"])
    if "f64" in d:
        raw = base64.b64decode(d["f64"])
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    total = None
    for blob in d["parts"]:
        p = _unblob(blob)
        total = p if total is None else total + p
    return total.reshape(shape)


def stats_to_dict(stats: IdStats) -> dict:
    out = {"version": STATS_VERSION, "K": stats.K, "L": stats.L}
    if stats.subspace is not None:
        s = stats.subspace
        out["subspace"] = {
            "d": s.d,
            "centered": s.centered,
            "mean": _matrix_field(s.mean),
            "basis": _matrix_field(s.basis),
            "eigenvalues": _matrix_field(s.eigenvalues),
        }
    if stats.gaussians is not None:
        g = stats.gaussians
        out["gaussians"] = {
            "ridge": g.ridge,
            "means": _matrix_field(g.means),
            "precision": _matrix_field(g.precision),
        }
    out["s2_stats"] = {
        k: {"score_id": v.score_id, "mean": v.mean, "std": v.std, "ddof": v.ddof}
        for k, v in sorted(stats.s2_stats.items())
    }
    if stats.vim_c is not None:
        out["vim_c"] = stats.vim_c
    return out


def _req(d: dict, key: str, where: str):
    if key not in d:
        raise SchemaViolation(f"missing field '{key}' in {where}")
    return d[key]


def stats_from_dict(d: dict) -> IdStats:
    if not isinstance(d, dict):
        raise SchemaViolation("stats document must be an object")
    version = _req(d, "version", "stats")
    if version != STATS_VERSION:
        raise SchemaViolation(f"stats version {version} != {STATS_VERSION}")
    subspace = gaussians = None
    try:
        if "subspace" in d:
            s = d["subspace"]
            subspace = SubspaceBasis(
                mean=_matrix_from(_req(s, "mean", "subspace")),
                basis=_matrix_from(_req(s, "basis", "subspace")),
                eigenvalues=_matrix_from(_req(s, "eigenvalues", "subspace")),
                centered=bool(_req(s, "centered", "subspace")),
            )
        if "gaussians" in d:
            g = d["gaussians"]
            gaussians = ClassGaussians(
                means=_matrix_from(_req(g, "means", "gaussians")),
                precision=_matrix_from(_req(g, "precision", "gaussians")),
                ridge=float(_req(g, "ridge", "gaussians")),
            )
        s2 = {}
        for k, v in _req(d, "s2_stats", "stats").items():
            s2[k] = S2Stats(
                score_id=_req(v, "score_id", f"s2_stats.{k}"),
                mean=float(_req(v, "mean", f"s2_stats.{k}")),
                std=float(_req(v, "std", f"s2_stats.{k}")),
                ddof=int(v.get("ddof", 1)),
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaViolation(f"malformed stats document: {exc}") from None
    return IdStats(
        K=int(_req(d, "K", "stats")),
        L=int(_req(d, "L", "stats")),
        subspace=subspace,
        gaussians=gaussians,
        s2_stats=s2,
        vim_c=d.get("vim_c"),
    )


def save_stats(stats: IdStats, path) -> None:
    text = json.dumps(stats_to_dict(stats), indent=1, sort_keys=True)
    atomic_write_bytes(path, text.encode("utf-8"))


def load_stats(path) -> IdStats:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"stats file is not JSON: {exc}") from None
    return stats_from_dict(doc)


def fit_stats(train, scores=(), s2_ids=(), subspace_dim=None, center=True,
              ridge_lambda=DEFAULT_RIDGE) -> IdStats:
    """Run whichever fits the requested scores need.

    ``scores`` are the base scores to be evaluated; ``s2_ids`` the secondary
    scores of any SIRC pairs (their ID mean and std get recorded).
    """
    from .scores import score_dataset

    wanted = {ScoreId(s) for s in scores} | {ScoreId(s) for s in s2_ids}
    stats = IdStats(K=train.k, L=train.dim)
    if wanted & {ScoreId.NEG_RESIDUAL, ScoreId.VIM}:
        stats.subspace = fit_subspace(train.features, subspace_dim, center=center)
    if ScoreId.VIM in wanted:
        stats.vim_c = fit_vim_scale(train.logits, train.features, stats.subspace)
    if ScoreId.MAHALANOBIS in wanted:
        if train.labels is None:
            raise DataError("mahalanobis fit needs ID-train labels")
        stats.gaussians = fit_class_gaussians(train.features, train.labels, ridge_lambda, train.k)
    for s2 in sorted({ScoreId(s) for s in s2_ids}, key=lambda s: s.value):
        vec = score_dataset(train, s2, stats)
        stats.s2_stats[s2.value] = fit_s2_stats(vec)
    return stats
