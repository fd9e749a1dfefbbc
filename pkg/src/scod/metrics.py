"""Selective-risk model and evaluation metrics for ID-correct / ID-wrong / OOD data.

Records are a pair of arrays: ``scores`` (higher = more confident) and
``groups`` (``Group`` codes). A sample is accepted at threshold ``t`` when
``score >= t``; tied scores always enter or leave together.

The ID/OOD mixture proportion ``alpha`` is realised by weighting: each ID
record carries ``alpha / N_ID`` and each OOD record ``(1 - alpha) / N_OOD``.
Losses on accepted samples are 0 (ID correct), ``beta`` (ID wrong) and
``1 - beta`` (OOD).

Curves start at the first threshold with non-zero accepted weight (the
empty-acceptance point is 0/0 and left out) and areas use the trapezoid rule
on the exact empirical points.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DataError, NumericalError
from .scores import Group


class UndefinedRisk(NumericalError):
    """No accepted weight at the requested threshold."""


@dataclass(frozen=True)
class RiskConfig:
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class Curve:
    """Empirical curve over distinct thresholds (descending)."""

    thresholds: np.ndarray
    x: np.ndarray
    risk: np.ndarray
    area: float

    def rows(self):
        return zip(self.thresholds.tolist(), self.x.tolist(), self.risk.tolist())


def _arrays(scores, groups):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    g = np.asarray(groups).reshape(-1).astype(np.int8)
    if s.shape != g.shape:
        raise DataError(f"{s.shape[0]} scores but {g.shape[0]} groups")
    if not np.all(np.isfinite(s)):
        raise DataError("non-finite score")
    if s.size and (g.min() < 0 or g.max() > 2):
        raise DataError("unknown group code")
    return s, g


def sample_loss(groups, beta: float):
    """Loss of accepting each sample; works on a single group or an array."""
    g = np.asarray(groups)
    loss = np.select([g == Group.ID_WRONG, g == Group.OOD], [beta, 1.0 - beta], 0.0)
    return loss if loss.ndim else float(loss)


def sample_weights(groups, alpha: float) -> np.ndarray:
    g = np.asarray(groups)
    is_ood = g == Group.OOD
    n_ood = int(is_ood.sum())
    n_id = g.size - n_ood
    w_id = alpha / n_id if n_id else 0.0
    w_ood = (1.0 - alpha) / n_ood if n_ood else 0.0
    return np.where(is_ood, w_ood, w_id)


def selective_risk(scores, groups, cfg: RiskConfig, t: float) -> float:
    s, g = _arrays(scores, groups)
    w = sample_weights(g, cfg.alpha)
    acc = s >= t
    # correctly rounded sums: independent of order and of zero-weight records
    denom = math.fsum(w[acc])
    if denom <= 0.0:
        raise UndefinedRisk(f"nothing accepted at threshold {t}")
    return math.fsum(w[acc] * sample_loss(g[acc], cfg.beta)) / denom


def full_population_risk(groups, cfg: RiskConfig) -> float:
    """Closed form of the risk when everything is accepted."""
    g = np.asarray(groups)
    n_ood = int((g == Group.OOD).sum())
    n_id = g.size - n_ood
    n_wrong = int((g == Group.ID_WRONG).sum())
    if n_id and n_ood:
        return cfg.alpha * (n_wrong / n_id) * cfg.beta + (1 - cfg.alpha) * (1 - cfg.beta)
    if n_id:
        return (n_wrong / n_id) * cfg.beta
    return 1 - cfg.beta


def _blocks(s, g, cfg):
    """Cumulative sums at each distinct threshold, highest threshold first.

    Sums are sequential, so zero-weight records never change a value. Runs of
    equal scores that add neither weight nor ID-correct recall would only
    repeat the previous curve point; they are dropped, which keeps the curves
    (and their areas) bit-identical when zero-weight records move around.
    """
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    g_sorted = g[order]
    w = sample_weights(g_sorted, cfg.alpha)
    wl = w * sample_loss(g_sorted, cfg.beta)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    cw = np.cumsum(w)
    cum_w = cw[ends]
    cum_wl = np.cumsum(wl)[ends]
    cum_correct = np.cumsum(g_sorted == Group.ID_CORRECT)[ends]
    cum_pos = np.cumsum(w > 0)[ends]
    total = cw[-1] if cw.size else 0.0
    return s_sorted[ends], cum_w, cum_wl, cum_correct, cum_pos, total


def _moves(*counts):
    """Mask of blocks that change at least one of the cumulative counts."""
    keep = np.zeros(counts[0].shape, dtype=bool)
    for c in counts:
        keep |= np.diff(c, prepend=0) > 0
    return keep


def risk_recall_curve(scores, groups, cfg: RiskConfig) -> Curve:
    """Selective risk against recall of ID-correct samples; area is AURR."""
    s, g = _arrays(scores, groups)
    n_correct = int((g == Group.ID_CORRECT).sum())
    if n_correct == 0:
        raise DataError("risk-recall curve needs at least one ID-correct sample")
    t, cum_w, cum_wl, cum_c, cum_pos, _ = _blocks(s, g, cfg)
    keep = (cum_w > 0) & _moves(cum_c, cum_pos)
    if not keep.any():
        raise UndefinedRisk("no accepted weight at any threshold")
    t, cum_w, cum_wl, cum_c = t[keep], cum_w[keep], cum_wl[keep], cum_c[keep]
    recall = cum_c / n_correct
    risk = cum_wl / cum_w
    return Curve(t, recall, risk, float(np.trapezoid(risk, recall)))


def aurr(scores, groups, cfg: RiskConfig) -> float:
    return risk_recall_curve(scores, groups, cfg).area


def risk_at_recall(scores, groups, cfg: RiskConfig, level: float = 0.95) -> float:
    """Risk at the highest threshold whose ID-correct recall reaches ``level``."""
    if not 0.0 < level <= 1.0:
        raise ConfigError(f"recall level must be in (0, 1], got {level}")
    curve = risk_recall_curve(scores, groups, cfg)
    hit = np.flatnonzero(curve.x >= level)
    return float(curve.risk[hit[0]])


def risk_coverage_curve(scores, groups, cfg: RiskConfig) -> Curve:
    """Selective risk against weighted coverage; area is AURC."""
    s, g = _arrays(scores, groups)
    if s.size == 0:
        raise DataError("no records")
    t, cum_w, cum_wl, _, cum_pos, total = _blocks(s, g, cfg)
    if total <= 0:
        raise UndefinedRisk("total weight is zero")
    keep = (cum_w > 0) & _moves(cum_pos)
    t, cum_w, cum_wl = t[keep], cum_w[keep], cum_wl[keep]
    coverage = cum_w / total
    risk = cum_wl / cum_w
    return Curve(t, coverage, risk, float(np.trapezoid(risk, coverage)))


def oracle_risk_coverage_curve(groups, cfg: RiskConfig) -> Curve:
    """Best achievable risk-coverage curve: samples accepted in order of
    increasing loss, one sample per step. Thresholds are accept ranks."""
    g = np.asarray(groups).reshape(-1).astype(np.int8)
    loss = sample_loss(g, cfg.beta)
    w = sample_weights(g, cfg.alpha)
    order = np.argsort(loss, kind="mergesort")
    w, wl = w[order], (w * loss)[order]
    keep = w > 0
    cum_w = np.cumsum(w)[keep]
    cum_wl = np.cumsum(wl)[keep]
    total = w.sum()
    if total <= 0:
        raise UndefinedRisk("total weight is zero")
    coverage = cum_w / total
    risk = cum_wl / cum_w
    ranks = -np.arange(g.size, dtype=np.float64)[keep]
    return Curve(ranks, coverage, risk, float(np.trapezoid(risk, coverage)))


def aurc(scores, groups, cfg: RiskConfig) -> float:
    return risk_coverage_curve(scores, groups, cfg).area


def _pos_neg(pos, neg):
    pos = np.asarray(pos, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg, dtype=np.float64).reshape(-1)
    if pos.size == 0 or neg.size == 0:
        raise DataError("both positive and negative scores are required")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise DataError("non-finite score")
    return pos, neg


def auroc(pos, neg) -> float:
    """P(pos > neg) + 0.5 P(pos == neg), via the Mann-Whitney rank sum."""
    pos, neg = _pos_neg(pos, neg)
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    n_pos, n_neg = pos.size, neg.size
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def fpr_at_tpr(pos, neg, level: float = 0.95) -> float:
    """Fraction of negatives accepted at the largest threshold with TPR >= level."""
    pos, neg = _pos_neg(pos, neg)
    if not 0.0 < level <= 1.0:
        raise ConfigError(f"TPR level must be in (0, 1], got {level}")
    desc = np.sort(pos)[::-1]
    # TPR(t) = #(pos >= t) / n; the largest t reaching the level is a pos value
    n = pos.size
    need = min(max(math.ceil(level * n), 1), n)
    # settle rounding so that need is the smallest count with need / n >= level
    while need > 1 and (need - 1) / n >= level:
        need -= 1
    while need < n and need / n < level:
        need += 1
    t_star = desc[need - 1]
    return float(np.count_nonzero(neg >= t_star) / neg.size)


# --- reports and sweeps --------------------------------------------------

METRIC_NAMES = (
    "auroc_idwrong", "auroc_ood", "fpr95_idwrong", "fpr95_ood", "aurr", "risk_at_95", "aurc",
)


def _nan_if(fn, *args):
    try:
        return fn(*args)
    except DataError:
        return float("nan")


def evaluate_scores(score_id: str, id_scores, id_groups, ood_scores: dict,
                    cfg: RiskConfig = RiskConfig(), level: float = 0.95) -> list[dict]:
    """Detection and risk metrics for one score, one row per OOD dataset.

    ID-wrong metrics do not depend on the OOD set and repeat on every row.
    A final ``ood_mean`` row averages each metric over OOD datasets with
    equal weight. A metric whose negative class is empty is reported as NaN.
    """
    id_s, id_g = _arrays(id_scores, id_groups)
    if np.any(id_g == Group.OOD):
        raise DataError("ID records must not carry the OOD group")
    pos = id_s[id_g == Group.ID_CORRECT]
    wrong = id_s[id_g == Group.ID_WRONG]
    au_w = _nan_if(auroc, pos, wrong)
    fpr_w = _nan_if(fpr_at_tpr, pos, wrong, level)
    rows = []
    for name in sorted(ood_scores):
        o = np.asarray(ood_scores[name], dtype=np.float64).reshape(-1)
        s = np.concatenate([id_s, o])
        g = np.concatenate([id_g, np.full(o.size, Group.OOD, dtype=np.int8)])
        rows.append({
            "score_id": score_id,
            "dataset": name,
            "auroc_idwrong": au_w,
            "auroc_ood": auroc(pos, o),
            "fpr95_idwrong": fpr_w,
            "fpr95_ood": fpr_at_tpr(pos, o, level),
            "aurr": aurr(s, g, cfg),
            "risk_at_95": risk_at_recall(s, g, cfg, level),
            "aurc": aurc(s, g, cfg),
        })
    if rows:
        mean = {"score_id": score_id, "dataset": "ood_mean"}
        for m in METRIC_NAMES:
            mean[m] = float(np.mean([r[m] for r in rows]))
        rows.append(mean)
    return rows


def _subsample(id_s, id_g, ood_s, alpha, rng):
    """Draw ``floor(alpha M)`` ID and ``floor((1 - alpha) M)`` OOD records
    without replacement, with M the largest total both pools can supply."""
    n_id, n_ood = id_s.size, ood_s.size
    cap = []
    if alpha > 0:
        cap.append(n_id / alpha)
    if alpha < 1:
        cap.append(n_ood / (1 - alpha))
    m = min(cap)
    k_id = min(n_id, math.floor(alpha * m + 1e-9))
    k_ood = min(n_ood, math.floor((1 - alpha) * m + 1e-9))
    i = np.sort(rng.choice(n_id, size=k_id, replace=False))
    o = np.sort(rng.choice(n_ood, size=k_ood, replace=False))
    s = np.concatenate([id_s[i], ood_s[o]])
    g = np.concatenate([id_g[i], np.full(k_ood, Group.OOD, dtype=np.int8)])
    eff_alpha = k_id / (k_id + k_ood) if k_id + k_ood else alpha
    return s, g, eff_alpha


def sweep(id_scores, id_groups, ood_scores: dict, groupings: dict, alphas=(), betas=(),
          fixed: float = 0.5, level: float = 0.95, sample: bool = False, seed: int = 0,
          curves: dict | None = None, score_id: str = "") -> list[dict]:
    """Risk metrics over an alpha grid (beta fixed) and a beta grid (alpha fixed).

    For every grouping (name -> list of OOD dataset names) the grouping's OOD
    records are pooled. By default alpha is realised by reweighting; with
    ``sample=True`` records are subsampled instead, seeded per cell.
    If ``curves`` is a dict, each cell's risk-recall and risk-coverage curves
    are stored in it keyed by (grouping, varied, alpha, beta).
    """
    id_s, id_g = _arrays(id_scores, id_groups)
    cells = [("alpha", RiskConfig(a, fixed)) for a in alphas]
    cells += [("beta", RiskConfig(fixed, b)) for b in betas]
    rows = []
    for gname in groupings:
        members = groupings[gname]
        missing = [m for m in members if m not in ood_scores]
        if missing:
            raise ConfigError(f"grouping {gname!r} names unknown OOD sets {missing}")
        ood = (np.concatenate([np.asarray(ood_scores[m], dtype=np.float64).reshape(-1)
                               for m in members])
               if members else np.zeros(0))
        for ci, (varied, cfg) in enumerate(cells):
            if sample:
                rng = np.random.default_rng([seed, ci, len(rows)])
                s, g, eff = _subsample(id_s, id_g, ood, cfg.alpha, rng)
                run_cfg = RiskConfig(eff, cfg.beta)
            else:
                s = np.concatenate([id_s, ood])
                g = np.concatenate([id_g, np.full(ood.size, Group.OOD, dtype=np.int8)])
                run_cfg = cfg
            rr = risk_recall_curve(s, g, run_cfg)
            rc = risk_coverage_curve(s, g, run_cfg)
            hit = np.flatnonzero(rr.x >= level)
            rows.append({
                "score_id": score_id,
                "grouping": gname,
                "varied": varied,
                "alpha": cfg.alpha,
                "beta": cfg.beta,
                "aurr": rr.area,
                "risk_at_95": float(rr.risk[hit[0]]),
                "aurc": rc.area,
            })
            if curves is not None:
                curves[(gname, varied, cfg.alpha, cfg.beta)] = {"risk_recall": rr, "risk_coverage": rc}
    return rows


REPORT_META = {
    "acceptance": "score >= t",
    "ties": "tied scores are accepted together",
    "empty_acceptance": "curves start at the first threshold with positive accepted weight",
    "fpr_threshold": "largest threshold with TPR >= level",
    "risk_at_recall_threshold": "largest threshold with ID-correct recall >= level",
    "ood_mean": "unweighted mean over OOD datasets",
    "alpha_realisation": "reweighting (ID alpha/N_ID, OOD (1-alpha)/N_OOD)",
    "integration": "trapezoid over empirical points",
}


def config_echo(cfg: RiskConfig) -> dict:
    return asdict(cfg)
