"""Command-line pipeline: synth -> fit -> score -> eval / sweep / plotdata.

Every subcommand reads a JSON experiment config (``--config``); relative
paths inside it resolve against the config file's directory. Outputs go to
``--out`` (or the config's ``output_dir``)::

    <out>/stats.json                      fit
    <out>/scores/<dataset>__<score>.sct   score (+ manifest.json, groups)
    <out>/report/eval.{csv,json}          eval
    <out>/report/sweep.{csv,json}         sweep (+ curves/ with --curves)
    <out>/plotdata/{points,contours}.csv  plotdata
    <out>/data/...                        synth (+ experiment.json)
    <out>/noise/...                       noise-gen

Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import idstats, metrics, sirc, synthetic
from .errors import ConfigError, DataError, NumericalError, ScodError
from .scores import Group, ScoreId, label_groups, parse_score_id, score_dataset, sirc_id
from .tensor_io import atomic_write_bytes, load_bundle, load_tensor, save_tensor

logger = logging.getLogger("scod")

CONFIG_VERSION = 1
EXIT_CODES = {ConfigError: 2, DataError: 3, NumericalError: 4}


# --- config --------------------------------------------------------------

class Experiment:
    """Parsed experiment config with paths resolved."""

    def __init__(self, doc: dict, base: Path, out: str | None = None, seed: int | None = None):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        if doc.get("version") != CONFIG_VERSION:
            raise ConfigError(f"config version must be {CONFIG_VERSION}, got {doc.get('version')!r}")
        self.doc = doc
        self.base = base
        out_dir = out if out is not None else doc.get("output_dir", "out")
        self.out = self._path(out_dir)
        self.seed = int(seed if seed is not None else doc.get("seed", 0))
        self.fit = dict(doc.get("fit", {}))
        self.metrics = dict(doc.get("metrics", {}))
        for key in ("alphas", "betas"):
            for v in self.metrics.get(key, []):
                if not 0.0 <= float(v) <= 1.0:
                    raise ConfigError(f"metrics.{key} values must lie in [0, 1], got {v}")
        self.groupings = dict(doc.get("groupings", {}))
        self.scores = self._parse_scores(doc.get("scores", []))

    def _path(self, p) -> Path:
        p = Path(p)
        return Path(os.path.normpath(p if p.is_absolute() else self.base / p))

    def _paths(self, entry: dict, name: str) -> dict:
        if not isinstance(entry, dict):
            raise ConfigError(f"{name}: expected an object of paths")
        return {k: str(self._path(v)) for k, v in entry.items() if v}

    @staticmethod
    def _parse_scores(items):
        if not items:
            raise ConfigError("config lists no scores")
        out = []
        for item in items:
            if isinstance(item, str):
                sid = parse_score_id(item)
                if isinstance(sid, tuple):
                    out.append({"s1": sid[0], "s2": sid[1], "a": None, "b": None})
                else:
                    out.append(sid)
            elif isinstance(item, dict) and "sirc" in item:
                pair = item["sirc"]
                if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                    raise ConfigError("sirc entry needs [s1, s2]")
                s1, s2 = parse_score_id(pair[0]), parse_score_id(pair[1])
                if s1 not in sirc.S1_MAX:
                    raise ConfigError(f"SIRC primary score must be bounded, got {s1}")
                out.append({"s1": s1, "s2": s2, "a": item.get("a"), "b": item.get("b")})
            else:
                raise ConfigError(f"bad score entry {item!r}")
        return out

    def score_ids(self) -> list[str]:
        return [sirc_id(s["s1"], s["s2"]) if isinstance(s, dict) else s.value for s in self.scores]

    def base_scores(self) -> list[ScoreId]:
        """Every non-SIRC score needed, including SIRC components."""
        need = []
        for s in self.scores:
            for sid in ((s["s1"], s["s2"]) if isinstance(s, dict) else (s,)):
                if sid not in need:
                    need.append(sid)
        return need

    def s2_ids(self) -> list[ScoreId]:
        return sorted({s["s2"] for s in self.scores if isinstance(s, dict)}, key=lambda x: x.value)

    def bundle_paths(self, key: str) -> dict:
        if key not in self.doc:
            raise ConfigError(f"config has no '{key}' entry")
        return self._paths(self.doc[key], key)

    def ood_paths(self) -> dict:
        ood = self.doc.get("ood", {})
        if not isinstance(ood, dict):
            raise ConfigError("'ood' must map dataset names to paths")
        return {name: self._paths(p, name) for name, p in ood.items()}


def load_experiment(args) -> Experiment:
    if not args.config:
        raise ConfigError("--config is required")
    path = Path(args.config)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    exp = Experiment(doc, path.resolve().parent, args.out, args.seed)
    names = [str(Path(p)) for key in ("id_train", "id_test") if key in doc
             for p in exp.bundle_paths(key).values()]
    names += [p for paths in exp.ood_paths().values() for p in paths.values()]
    if len(names) != len(set(names)):
        raise ConfigError("dataset paths must be distinct")
    return exp


# --- output helpers ------------------------------------------------------

def _clean(obj):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_json(path, doc) -> None:
    # floats are written with repr, the shortest string that round-trips exactly
    text = json.dumps(_clean(doc), indent=1, sort_keys=True, allow_nan=False) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def _fmt(v, full: bool) -> str:
    if isinstance(v, float):
        if not math.isfinite(v):
            return "nan"
        return repr(v) if full else f"{v:.6f}"
    return str(v)


def write_csv(path, rows: list[dict], columns: list[str], full: bool) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, ""), full) for c in columns])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def write_curve_csv(path, curve) -> None:
    """Curve dump at full precision; curve values are always finite."""
    lines = ["threshold,x,risk"]
    lines += [f"{t!r},{x!r},{r!r}" for t, x, r in curve.rows()]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def score_filename(dataset: str, score_id: str) -> str:
    safe = score_id.replace("(", "-").replace(")", "").replace(",", "-")
    return f"{dataset}__{safe}.sct"


# --- commands ------------------------------------------------------------

def cmd_fit(exp: Experiment, args) -> None:
    train = load_bundle("id_train", exp.bundle_paths("id_train"), args.allow_nonfinite)
    fit = exp.fit
    stats = idstats.fit_stats(
        train,
        scores=exp.base_scores(),
        s2_ids=exp.s2_ids(),
        subspace_dim=fit.get("subspace_dim"),
        center=bool(fit.get("center", True)),
        ridge_lambda=float(fit.get("ridge_lambda", idstats.DEFAULT_RIDGE)),
    )
    if stats.subspace is not None:
        logger.info("subspace dimension %d of %d", stats.subspace.d, stats.L)
    idstats.save_stats(stats, exp.out / "stats.json")
    logger.info("wrote %s", exp.out / "stats.json")


def _load_stats(exp: Experiment):
    path = exp.out / "stats.json"
    if not path.exists():
        raise ConfigError(f"{path} not found; run 'fit' first")
    return idstats.load_stats(path)


def _compute_scores(exp: Experiment, bundle, stats, threads: int) -> dict:
    base = {}
    for sid in exp.base_scores():
        base[sid] = score_dataset(bundle, sid, stats, threads=threads)
    out = {}
    for item in exp.scores:
        if isinstance(item, dict):
            s2 = item["s2"].value
            if s2 not in stats.s2_stats:
                raise ConfigError(f"stats.json lacks S2 statistics for {s2}; refit")
            p = sirc.make_sirc_params(item["s1"], stats.s2_stats[s2], item["a"], item["b"])
            vec = sirc.sirc_score_dataset(base[item["s1"]], base[item["s2"]], p)
        else:
            vec = base[item]
        out[vec.score_id] = vec
    return out


def cmd_score(exp: Experiment, args) -> None:
    stats = _load_stats(exp)
    sets = [("id_test", exp.bundle_paths("id_test"), False)]
    sets += [(name, paths, True) for name, paths in sorted(exp.ood_paths().items())]
    score_dir = exp.out / "scores"

    def unit(item):
        name, paths, is_ood = item
        bundle = load_bundle(name, paths, args.allow_nonfinite)
        vecs = _compute_scores(exp, bundle, stats, 1)
        groups = label_groups(bundle, is_ood)
        return name, bundle.n, vecs, groups

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(unit, sets))
    else:
        results = [unit(s) for s in sets]

    manifest = {"version": 1, "datasets": {}}
    for name, n, vecs, groups in results:
        entry = {"count": n, "ood": name != "id_test", "scores": {}}
        for sid, vec in vecs.items():
            fname = score_filename(name, sid)
            save_tensor(vec.values, score_dir / fname)
            entry["scores"][sid] = fname
        gname = f"{name}__groups.sct"
        save_tensor(groups.astype(np.float32), score_dir / gname)
        entry["groups"] = gname
        manifest["datasets"][name] = entry
    write_json(score_dir / "manifest.json", manifest)
    logger.info("wrote %d score vectors", sum(len(r[2]) for r in results))


def _load_scores(exp: Experiment):
    score_dir = exp.out / "scores"
    path = score_dir / "manifest.json"
    if not path.exists():
        raise ConfigError(f"{path} not found; run 'score' first")
    man = json.loads(path.read_text(encoding="utf-8"))
    sets = man["datasets"]
    if "id_test" not in sets:
        raise DataError("score manifest has no id_test entry")

    def vec(name, sid):
        try:
            return load_tensor(score_dir / sets[name]["scores"][sid]).astype(np.float64)
        except KeyError:
            raise ConfigError(f"no scores for {sid} on {name}; rerun 'score'") from None

    id_groups = load_tensor(score_dir / sets["id_test"]["groups"]).astype(np.int8)
    ood_names = sorted(n for n, e in sets.items() if e["ood"])
    return vec, id_groups, ood_names


def _risk_cfg(exp: Experiment) -> metrics.RiskConfig:
    return metrics.RiskConfig(float(exp.metrics.get("alpha", 0.5)), float(exp.metrics.get("beta", 0.5)))


def cmd_eval(exp: Experiment, args) -> None:
    vec, id_groups, ood_names = _load_scores(exp)
    level = float(exp.metrics.get("tpr_level", 0.95))
    cfg = _risk_cfg(exp)

    def unit(sid):
        ood = {n: vec(n, sid) for n in ood_names}
        return metrics.evaluate_scores(sid, vec("id_test", sid), id_groups, ood, cfg, level)

    sids = exp.score_ids()
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            parts = list(pool.map(unit, sids))
    else:
        parts = [unit(s) for s in sids]
    rows = [r for part in parts for r in part]
    cols = ["score_id", "dataset", *metrics.METRIC_NAMES]
    report = exp.out / "report"
    write_csv(report / "eval.csv", rows, cols, args.full_precision)
    write_json(report / "eval.json", {
        "version": 1,
        "config": {**metrics.config_echo(cfg), "tpr_level": level},
        "meta": metrics.REPORT_META,
        "rows": rows,
    })
    logger.info("wrote eval report (%d rows)", len(rows))


def cmd_sweep(exp: Experiment, args) -> None:
    vec, id_groups, ood_names = _load_scores(exp)
    m = exp.metrics
    alphas = [float(a) for a in m.get("alphas", [0.1, 0.3, 0.5, 0.7, 0.9])]
    betas = [float(b) for b in m.get("betas", [0.1, 0.3, 0.5, 0.7, 0.9])]
    fixed = float(m.get("fixed", 0.5))
    level = float(m.get("tpr_level", 0.95))
    groupings = exp.groupings or {"all": ood_names}

    def unit(sid):
        curves = {} if args.curves else None
        ood = {n: vec(n, sid) for n in ood_names}
        rows = metrics.sweep(vec("id_test", sid), id_groups, ood, groupings, alphas, betas,
                             fixed=fixed, level=level, sample=args.sample, seed=exp.seed,
                             curves=curves, score_id=sid)
        return sid, rows, curves

    sids = exp.score_ids()
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(unit, sids))
    else:
        results = [unit(s) for s in sids]

    rows = []
    report = exp.out / "report"
    for sid, part, curves in results:
        for r in part:
            r.update({k + "_x100": 100.0 * r[k] for k in ("aurr", "risk_at_95", "aurc")})
        rows.extend(part)
        if curves:
            for (gname, varied, a, b), cv in curves.items():
                for kind, curve in cv.items():
                    fname = f"{score_filename(gname, sid)[:-4]}__{varied}_a{a:g}_b{b:g}__{kind}.csv"
                    write_curve_csv(report / "curves" / fname, curve)
    cols = ["score_id", "grouping", "varied", "alpha", "beta", "aurr", "risk_at_95", "aurc",
            "aurr_x100", "risk_at_95_x100", "aurc_x100"]
    write_csv(report / "sweep.csv", rows, cols, args.full_precision)
    meta = dict(metrics.REPORT_META)
    if args.sample:
        meta["alpha_realisation"] = (
            "subsampling without replacement: floor(alpha M) ID and floor((1-alpha) M) OOD, "
            "M the largest total both pools can supply"
        )
    write_json(report / "sweep.json", {
        "version": 1,
        "config": {"alphas": alphas, "betas": betas, "fixed": fixed, "tpr_level": level,
                   "groupings": groupings, "sample": bool(args.sample), "seed": exp.seed},
        "meta": meta,
        "rows": rows,
    })
    logger.info("wrote sweep report (%d rows)", len(rows))


DEFAULT_SYNTH_SCORES = [
    "msp", "neg_entropy", "doctor", "max_logit", "energy", "l1_norm", "neg_residual",
    "mahalanobis", "gradnorm", "vim",
    *[sirc_id(a, b) for a, b in sirc.STANDARD_PAIRS],
]


def cmd_synth(args, doc: dict) -> None:
    params = dict(doc.get("synth", {}))
    params.setdefault("seed", args.seed if args.seed is not None else doc.get("seed", 0))
    try:
        cfg = synthetic.SynthConfig(**params)
    except TypeError as exc:
        raise ConfigError(f"bad synth section: {exc}") from None
    out = Path(args.out) if args.out else Path(doc.get("output_dir", "out"))
    data = out / "data"
    man = synthetic.write_benchmark(cfg, data)

    def rel(entry):
        return {k: v for k, v in entry.items() if k in ("logits", "features", "labels")}

    experiment = {
        "version": CONFIG_VERSION,
        "id_train": rel(man["id_train"]),
        "id_test": rel(man["id_test"]),
        "ood": {name: rel(e) for name, e in man["ood"].items()},
        "scores": DEFAULT_SYNTH_SCORES,
        "fit": {"subspace_dim": cfg.d_signal, "center": True, "ridge_lambda": idstats.DEFAULT_RIDGE},
        "metrics": {"alphas": [0.1, 0.3, 0.5, 0.7, 0.9, 1.0], "betas": [0.0, 0.1, 0.3, 0.5, 0.7, 0.9],
                    "tpr_level": 0.95, "fixed": 0.5},
        "groupings": {"all": list(cfg.ood_names)},
        "output_dir": "..",
        "seed": cfg.seed,
    }
    write_json(data / "experiment.json", experiment)
    logger.info("wrote synthetic benchmark to %s", data)


def cmd_noise_gen(args, doc: dict) -> None:
    params = dict(doc.get("noise", {}))
    params.setdefault("seed", args.seed if args.seed is not None else doc.get("seed", 0))
    try:
        cfg = synthetic.NoiseConfig(**params)
    except TypeError as exc:
        raise ConfigError(f"bad noise section: {exc}") from None
    out = Path(args.out) if args.out else Path(doc.get("output_dir", "out"))
    recs = synthetic.gen_noise_images(cfg, out / "noise")
    logger.info("wrote %d noise images", len(recs))


def _contours(x, y, z, levels):
    import contourpy

    gen = contourpy.contour_generator(x, y, z, line_type=contourpy.LineType.Separate)
    out = []
    for lv in levels:
        for k, line in enumerate(gen.lines(lv)):
            out.append((lv, k, np.asarray(line)))
    return out


def cmd_plotdata(exp: Experiment, args) -> None:
    vec, id_groups, ood_names = _load_scores(exp)
    stats = _load_stats(exp)
    opts = dict(exp.doc.get("plotdata", {}))
    s1 = parse_score_id(opts.get("s1", "msp"))
    s2 = parse_score_id(opts.get("s2", "l1_norm"))
    if s1 not in sirc.S1_MAX:
        raise ConfigError(f"plotdata s1 must be bounded, got {s1}")
    if s2.value not in stats.s2_stats:
        raise ConfigError(f"stats.json lacks S2 statistics for {s2}")
    p = sirc.make_sirc_params(s1, stats.s2_stats[s2.value], opts.get("a"), opts.get("b"))
    datasets = opts.get("datasets", ood_names)
    n_grid = int(opts.get("grid", 100))
    n_levels = int(opts.get("levels", 9))

    points = []
    x1, x2 = [], []
    for name in ["id_test", *datasets]:
        a, b = vec(name, s1.value), vec(name, s2.value)
        grp = id_groups if name == "id_test" else np.full(a.size, Group.OOD)
        for i in range(a.size):
            points.append({"dataset": name, "group": Group(int(grp[i])).name.lower(),
                           "s1": float(a[i]), "s2": float(b[i])})
        x1.append(a)
        x2.append(b)
    x1, x2 = np.concatenate(x1), np.concatenate(x2)
    id1, id2 = vec("id_test", s1.value), vec("id_test", s2.value)

    g1 = np.linspace(x1.min(), p.s1_max, n_grid)
    g2 = np.linspace(x2.min(), x2.max(), n_grid)
    S1, S2 = np.meshgrid(g1, g2)
    c_lin = opts.get("linear_c")
    if c_lin is None:
        c_lin = float(np.std(id1) / np.std(id2)) if np.std(id2) > 0 else 1.0
    quants = np.linspace(0.1, 0.9, n_levels)
    combiners = {
        "sirc": lambda u, v: np.clip(sirc.sirc_direct(np.minimum(u, p.s1_max), v, p), -1e300, 1e300),
        "linear": lambda u, v: u + c_lin * v,
        "product": lambda u, v: u * v,
    }
    rows = []
    for cname, fn in combiners.items():
        z = fn(S1, S2)
        levels = np.quantile(fn(id1, id2), quants)
        for lv, k, line in _contours(g1, g2, z, levels):
            for s1v, s2v in line:
                rows.append({"combiner": cname, "level": float(lv), "line": k,
                             "s1": float(s1v), "s2": float(s2v)})
    d = exp.out / "plotdata"
    write_csv(d / "points.csv", points, ["dataset", "group", "s1", "s2"], args.full_precision)
    write_csv(d / "contours.csv", rows, ["combiner", "level", "line", "s1", "s2"], args.full_precision)
    write_json(d / "params.json", {"s1": s1.value, "s2": s2.value, "s1_max": p.s1_max,
                                   "a": p.a, "b": p.b, "linear_c": c_lin})
    logger.info("wrote plot data for (%s, %s)", s1, s2)


# --- entry point ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="64-bit seed (overrides config)")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--full-precision", action="store_true", help="repr floats in CSV")
    common.add_argument("--allow-nonfinite", action="store_true", help="accept NaN/Inf in inputs")
    common.add_argument("--sample", action="store_true", help="realise alpha by subsampling")
    common.add_argument("-v", "--verbose", action="store_true")

    # options live on the subcommands so their defaults cannot clobber each other
    parser = argparse.ArgumentParser(prog="scod", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("fit", "score", "eval", "sweep", "synth", "noise-gen", "plotdata"):
        sp = sub.add_parser(name, parents=[common])
        if name == "sweep":
            sp.add_argument("--curves", action="store_true", help="dump per-cell curves")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        raise ConfigError("--seed must be a 64-bit unsigned integer")
    if not hasattr(args, "curves"):
        args.curves = False

    if args.command in ("synth", "noise-gen"):
        doc = {}
        if args.config:
            try:
                doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {args.config}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from None
            if doc.get("version") != CONFIG_VERSION:
                raise ConfigError(f"config version must be {CONFIG_VERSION}")
        if args.command == "synth":
            cmd_synth(args, doc)
        else:
            cmd_noise_gen(args, doc)
        return 0

    exp = load_experiment(args)
    {"fit": cmd_fit, "score": cmd_score, "eval": cmd_eval, "sweep": cmd_sweep,
     "plotdata": cmd_plotdata}[args.command](exp, args)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except ScodError as exc:
        code = next((c for cls, c in EXIT_CODES.items() if isinstance(exc, cls)), 3)
        msg = " ".join(str(exc).split())
        print(f"error: {exc.kind}: {msg}", file=sys.stderr)
        return code
    except OSError as exc:
        msg = " ".join(str(exc).split())
        print(f"error: data: {msg}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
