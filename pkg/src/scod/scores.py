"""Post-hoc confidence scores computed from logits and penultimate features.

Every score follows the convention "higher means more confident", so
entropy and residual are negated. Functions accept a single row (1-D) or
a batch (2-D, one sample per row) and reduce over the last axis; all
arithmetic is float64.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np

from .errors import ConfigError, DataError
from .tensor_io import DatasetBundle

# rows per work unit in score_dataset; fixed so results never depend on --threads
CHUNK_ROWS = 4096


class ScoreId(str, Enum):
    MSP = "msp"
    NEG_ENTROPY = "neg_entropy"
    DOCTOR = "doctor"
    MAX_LOGIT = "max_logit"
    ENERGY = "energy"
    L1_NORM = "l1_norm"
    NEG_RESIDUAL = "neg_residual"
    MAHALANOBIS = "mahalanobis"
    GRADNORM = "gradnorm"
    VIM = "vim"

    def __str__(self) -> str:
        return self.value


# which fitted statistics each score needs
NEEDS_SUBSPACE = {ScoreId.NEG_RESIDUAL, ScoreId.VIM}
NEEDS_GAUSSIANS = {ScoreId.MAHALANOBIS}


def sirc_id(s1, s2) -> str:
    return f"sirc({ScoreId(s1).value},{ScoreId(s2).value})"


def parse_score_id(text: str):
    """Return a ScoreId, or a ``(s1, s2)`` tuple for SIRC identifiers."""
    text = text.strip().lower()
    if text.startswith("sirc(") and text.endswith(")"):
        parts = text[5:-1].split(",")
        if len(parts) != 2:
            raise ConfigError(f"bad SIRC identifier {text!r}")
        return (parse_score_id(parts[0]), parse_score_id(parts[1]))
    try:
        return ScoreId(text)
    except ValueError:
        raise ConfigError(f"unknown score {text!r}") from None


@dataclass
class ScoreVec:
    score_id: str
    values: np.ndarray

    def __post_init__(self):
        self.score_id = str(self.score_id)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"score {self.score_id} produced non-finite values")

    def __len__(self) -> int:
        return self.values.shape[0]


class Group(IntEnum):
    """Sample group: correct ID prediction, ID misclassification, or OOD."""

    ID_CORRECT = 0
    ID_WRONG = 1
    OOD = 2


def _f64(x, name="input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError(f"non-finite {name}")
    return x


def _check_classes(v: np.ndarray) -> None:
    if v.ndim == 0 or v.shape[-1] < 2:
        raise DataError("need at least two classes")


def softmax(logits) -> np.ndarray:
    v = _f64(logits, "logits")
    _check_classes(v)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def classify(logits) -> np.ndarray:
    """Argmax prediction; ties go to the lowest class index."""
    v = _f64(logits, "logits")
    _check_classes(v)
    return np.argmax(v, axis=-1)


def msp(probs) -> np.ndarray:
    return np.max(probs, axis=-1)


def neg_entropy(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    # 0 * log 0 := 0
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return plogp.sum(axis=-1)


def doctor(probs) -> np.ndarray:
    return np.linalg.norm(np.asarray(probs, dtype=np.float64), axis=-1)


def max_logit(logits) -> np.ndarray:
    return np.max(_f64(logits, "logits"), axis=-1)


def energy(logits) -> np.ndarray:
    """Log-sum-exp of the logits, stable for any finite input."""
    v = _f64(logits, "logits")
    m = v.max(axis=-1, keepdims=True)
    return m[..., 0] + np.log(np.exp(v - m).sum(axis=-1))


def l1_norm(features) -> np.ndarray:
    return np.abs(_f64(features, "features")).sum(axis=-1)


def _subspace(stats):
    sub = getattr(stats, "subspace", stats)
    if sub is None or not hasattr(sub, "basis"):
        raise ConfigError("score needs a fitted principal subspace")
    return sub


def residual_norm(features, stats) -> np.ndarray:
    """Norm of the centred feature component outside the fitted subspace."""
    sub = _subspace(stats)
    z = _f64(features, "features")
    basis = np.asarray(sub.basis, dtype=np.float64)
    if z.shape[-1] != basis.shape[0]:
        raise DataError(f"feature dim {z.shape[-1]} != subspace dim {basis.shape[0]}")
    zc = z - sub.mean
    perp = zc - (zc @ basis) @ basis.T
    return np.linalg.norm(perp, axis=-1)


def neg_residual(features, stats) -> np.ndarray:
    return -residual_norm(features, stats)


def mahalanobis(features, stats) -> np.ndarray:
    """Negative minimum class-wise Mahalanobis distance (tied precision)."""
    g = getattr(stats, "gaussians", stats)
    if g is None or not hasattr(g, "precision"):
        raise ConfigError("mahalanobis needs fitted class Gaussians")
    z = _f64(features, "features")
    means = np.asarray(g.means, dtype=np.float64)
    prec = np.asarray(g.precision, dtype=np.float64)
    if z.shape[-1] != means.shape[1]:
        raise DataError(f"feature dim {z.shape[-1]} != Gaussian dim {means.shape[1]}")
    best = None
    for mu in means:
        d = z - mu
        q = np.einsum("...i,...i->...", d @ prec, d)
        best = q if best is None else np.minimum(best, q)
    # quadratic form of a PD matrix; clip round-off below zero
    return -np.maximum(best, 0.0)


def gradnorm(probs, features) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    k = p.shape[-1]
    return np.abs(p - 1.0 / k).sum(axis=-1) * l1_norm(features)


def vim(logits, features, stats) -> np.ndarray:
    c = getattr(stats, "vim_c", None)
    if c is None:
        raise ConfigError("vim needs a fitted scale (vim_c)")
    return energy(logits) - c * residual_norm(features, stats)


def _score_rows(score_id: ScoreId, logits, features, stats) -> np.ndarray:
    if score_id in (ScoreId.MSP, ScoreId.NEG_ENTROPY, ScoreId.DOCTOR, ScoreId.GRADNORM):
        p = softmax(logits)
        if score_id is ScoreId.MSP:
            return msp(p)
        if score_id is ScoreId.NEG_ENTROPY:
            return neg_entropy(p)
        if score_id is ScoreId.DOCTOR:
            return doctor(p)
        return gradnorm(p, features)
    if score_id is ScoreId.MAX_LOGIT:
        return max_logit(logits)
    if score_id is ScoreId.ENERGY:
        return energy(logits)
    if score_id is ScoreId.L1_NORM:
        return l1_norm(features)
    if score_id is ScoreId.NEG_RESIDUAL:
        return neg_residual(features, stats)
    if score_id is ScoreId.MAHALANOBIS:
        return mahalanobis(features, stats)
    if score_id is ScoreId.VIM:
        return vim(logits, features, stats)
    raise ConfigError(f"unsupported score {score_id!r}")


def score_dataset(bundle: DatasetBundle, score_id, stats=None, threads: int = 1) -> ScoreVec:
    """Apply one score to every row of a bundle.

    Rows are processed in fixed-size chunks, optionally on a thread pool; the
    chunking does not depend on ``threads`` so the output is bit-identical
    for any thread count.
    """
    sid = parse_score_id(score_id) if isinstance(score_id, str) else score_id
    if isinstance(sid, tuple):
        raise ConfigError("SIRC scores are produced by scod.sirc.sirc_score_dataset")
    sid = ScoreId(sid)
    if stats is None and (sid in NEEDS_SUBSPACE or sid in NEEDS_GAUSSIANS):
        raise ConfigError(f"score {sid} requires fitted ID statistics")

    starts = range(0, bundle.n, CHUNK_ROWS)

    def run(s):
        e = s + CHUNK_ROWS
        return _score_rows(sid, bundle.logits[s:e], bundle.features[s:e], stats)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return ScoreVec(sid.value, np.concatenate(parts))


def label_groups(bundle: DatasetBundle, is_ood: bool) -> np.ndarray:
    """Per-sample Group codes (int8 array)."""
    if is_ood:
        return np.full(bundle.n, Group.OOD, dtype=np.int8)
    if bundle.labels is None:
        raise DataError(f"{bundle.name}: ID bundle needs labels")
    correct = classify(bundle.logits) == bundle.labels
    return np.where(correct, Group.ID_CORRECT, Group.ID_WRONG).astype(np.int8)
