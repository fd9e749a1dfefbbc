"""Score a synthetic benchmark and compare single scores against SIRC.

    python demos/01_scores_and_sirc.py [--seed 0]

Prints AUROC for ID-wrong and OOD detection (ID-correct samples are the
positives) plus AURR at alpha = 0.5, beta = 0.5.
"""

import argparse

import numpy as np

from scod.idstats import fit_stats
from scod.metrics import RiskConfig, aurr, auroc
from scod.scores import Group, label_groups, score_dataset
from scod.sirc import make_sirc_params, sirc_combine
from scod.synthetic import SynthConfig, gen_benchmark

SINGLE = ["msp", "neg_entropy", "doctor", "max_logit", "energy", "l1_norm", "neg_residual",
          "mahalanobis", "vim"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    bench = gen_benchmark(SynthConfig(seed=args.seed))
    stats = fit_stats(bench["train"], scores=SINGLE, s2_ids=["l1_norm", "neg_residual"])
    test, oods = bench["id_test"], bench["ood"]
    g = label_groups(test, False)
    print(f"ID test error rate {np.mean(g == Group.ID_WRONG):.3f}, {len(oods)} OOD sets\n")

    table = {}
    for sid in SINGLE:
        table[sid] = [score_dataset(test, sid, stats).values] + [
            score_dataset(b, sid, stats).values for b in oods]
    for s1 in ("msp", "doctor"):
        for s2 in ("l1_norm", "neg_residual"):
            p = make_sirc_params(s1, stats.s2_stats[s2])
            table[f"sirc({s1},{s2})"] = [sirc_combine(a, b, p) for a, b in zip(table[s1], table[s2])]

    cfg = RiskConfig(alpha=0.5, beta=0.5)
    print(f"{'score':<28}{'AUROC ID-wrong':>16}{'AUROC OOD':>12}{'AURR x100':>12}")
    for sid, (s_id, *s_ood) in table.items():
        pos = s_id[g == Group.ID_CORRECT]
        a_w = 100 * auroc(pos, s_id[g == Group.ID_WRONG])
        a_o = 100 * np.mean([auroc(pos, o) for o in s_ood])
        risk = np.mean([aurr(np.r_[s_id, o], np.r_[g, np.full(o.size, Group.OOD)], cfg)
                        for o in s_ood])
        print(f"{sid:<28}{a_w:>16.2f}{a_o:>12.2f}{100 * risk:>12.2f}")


if __name__ == "__main__":
    main()
