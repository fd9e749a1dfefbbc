"""How the best score shifts as OOD data and its cost change.

    python demos/02_risk_sweep.py

Sweeps alpha (share of ID data) and beta (cost of an ID error relative to an
accepted OOD sample) and prints the score with the lowest AURR in each cell.
"""

import numpy as np

from scod.idstats import fit_stats
from scod.metrics import RiskConfig, aurr
from scod.scores import Group, label_groups, score_dataset
from scod.sirc import make_sirc_params, sirc_combine
from scod.synthetic import SynthConfig, gen_benchmark

ALPHAS = (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
BETAS = (0.1, 0.5, 0.9)


def main():
    bench = gen_benchmark(SynthConfig(seed=0))
    stats = fit_stats(bench["train"], scores=["msp", "energy", "l1_norm"], s2_ids=["l1_norm"])
    test, ood = bench["id_test"], bench["ood"][0]
    scores = {sid: np.r_[score_dataset(test, sid, stats).values, score_dataset(ood, sid, stats).values]
              for sid in ("msp", "energy", "l1_norm")}
    p = make_sirc_params("msp", stats.s2_stats["l1_norm"])
    scores["sirc"] = sirc_combine(scores["msp"], scores["l1_norm"], p)
    g = np.r_[label_groups(test, False), np.full(ood.n, Group.OOD)].astype(np.int8)

    print("best score by AURR (value x100)")
    print("alpha  " + "".join(f"beta={b:<14}" for b in BETAS))
    for a in ALPHAS:
        cells = []
        for b in BETAS:
            cfg = RiskConfig(alpha=a, beta=b)
            res = {k: aurr(v, g, cfg) for k, v in scores.items()}
            best = min(res, key=res.get)
            cells.append(f"{best:<8}{100 * res[best]:6.2f}  ")
        print(f"{a:<7}" + "".join(cells))


if __name__ == "__main__":
    main()
