"""Softmax Information Retaining Combination (SIRC).

A bounded softmax score ``s1`` is combined with a class-agnostic score ``s2``
so that the accept/reject boundary on the (s1, s2) plane is a sigmoid::

    C = -(s1_max - s1) * (1 + exp(-b * (s2 - a)))

With ``a = mean(s2) - 3 std(s2)`` and ``b = 1 / std(s2)`` fitted on ID data,
``s2`` only matters once it drops below the bulk of the ID distribution.

``sirc_combine`` returns the log-domain score ``-log(-C)`` (with a small floor
inside the log), a strictly increasing transform of ``C``; every rank-based
metric is therefore unchanged and nothing overflows. ``sirc_direct`` evaluates
``C`` literally, for plotting decision contours.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .idstats import S2Stats
from .scores import ScoreId, ScoreVec, sirc_id

EPS = 1e-12
S1_TOL = 1e-12

# analytic upper bounds of the supported primary scores
S1_MAX = {
    ScoreId.MSP: 1.0,
    ScoreId.NEG_ENTROPY: 0.0,
    ScoreId.DOCTOR: 1.0,
}


class S1BoundExceeded(DataError):
    pass


@dataclass(frozen=True)
class SircParams:
    s1_max: float
    a: float
    b: float
    s1_id: str
    s2_id: str

    def __post_init__(self):
        if not (np.isfinite(self.b) and self.b > 0):
            raise ConfigError(f"SIRC sensitivity b must be positive, got {self.b}")
        if not np.isfinite(self.a):
            raise ConfigError("SIRC centre a must be finite")


def make_sirc_params(s1_id, s2_stats: S2Stats, a: float | None = None,
                     b: float | None = None) -> SircParams:
    """Default ``a = mu - 3 sigma``, ``b = 1 / sigma``; either may be overridden."""
    try:
        s1 = ScoreId(s1_id)
    except ValueError:
        raise ConfigError(f"unknown primary score {s1_id!r}") from None
    if s1 not in S1_MAX:
        raise ConfigError(f"SIRC primary score must be bounded (msp, neg_entropy, doctor), got {s1}")
    if not s2_stats.std > 0:
        raise ConfigError("S2 standard deviation must be positive")
    return SircParams(
        s1_max=S1_MAX[s1],
        a=s2_stats.mean - 3.0 * s2_stats.std if a is None else float(a),
        b=1.0 / s2_stats.std if b is None else float(b),
        s1_id=s1.value,
        s2_id=str(s2_stats.score_id),
    )


def _inputs(s1, s2, p: SircParams):
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    if not (np.all(np.isfinite(s1)) and np.all(np.isfinite(s2))):
        raise DataError("non-finite SIRC input")
    if np.any(s1 > p.s1_max + S1_TOL):
        raise S1BoundExceeded(f"s1 exceeds its bound {p.s1_max}")
    return s1, s2


def sirc_combine(s1, s2, p: SircParams):
    """Log-domain SIRC score, ``-[log(s1_max - s1 + eps) + softplus(-b (s2 - a))]``."""
    s1, s2 = _inputs(s1, s2, p)
    gap = np.maximum(p.s1_max - s1, 0.0) + EPS
    out = -(np.log(gap) + np.logaddexp(0.0, -p.b * (s2 - p.a)))
    return out if out.ndim else float(out)


def sirc_direct(s1, s2, p: SircParams):
    """Literal combination ``-(s1_max - s1) (1 + exp(-b (s2 - a)))``; may overflow."""
    s1, s2 = _inputs(s1, s2, p)
    with np.errstate(over="ignore"):
        out = -(p.s1_max - s1) * (1.0 + np.exp(-p.b * (s2 - p.a)))
    return out if out.ndim else float(out)


def sirc_score_dataset(s1_vec: ScoreVec, s2_vec: ScoreVec, p: SircParams) -> ScoreVec:
    if len(s1_vec) != len(s2_vec):
        raise DataError(f"length mismatch: {len(s1_vec)} vs {len(s2_vec)}")
    if s1_vec.score_id != p.s1_id or s2_vec.score_id != p.s2_id:
        raise ConfigError(
            f"params fitted for ({p.s1_id}, {p.s2_id}), "
            f"got ({s1_vec.score_id}, {s2_vec.score_id})"
        )
    return ScoreVec(sirc_id(p.s1_id, p.s2_id), sirc_combine(s1_vec.values, s2_vec.values, p))


# standard primary x secondary pairings
STANDARD_PAIRS = [
    (s1, s2)
    for s1 in (ScoreId.MSP, ScoreId.DOCTOR, ScoreId.NEG_ENTROPY)
    for s2 in (ScoreId.L1_NORM, ScoreId.NEG_RESIDUAL)
]
