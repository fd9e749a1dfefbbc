"""Synthetic SCOD benchmarks, noise-image generation and brute-force oracles.

Random numbers come from a counter-based generator so every stream is
reproducible from ``(seed, stream id)`` alone:

* key = splitmix64(seed XOR splitmix64(stream))
* draw i of a stream = splitmix64(key + i * 0x9E3779B97F4A7C15)

where ``splitmix64`` is the finaliser of Vigna's SplitMix64 (mod 2**64
arithmetic). Uniforms take the top 53 bits, ``(x >> 11) * 2**-53``; normals
use Box-Muller on consecutive uniform pairs ``(u1, u2)`` giving
``sqrt(-2 ln(1 - u1)) * (cos, sin)(2 pi u2)`` in that order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .scores import Group
from .tensor_io import DatasetBundle, atomic_write_bytes, save_bundle

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_NEG_53 = 2.0 ** -53


def splitmix64(x) -> np.ndarray:
    z = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):  # arithmetic is mod 2**64 by design
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class CounterRNG:
    """Stateless-by-construction generator; ``counter`` only tracks position."""

    def __init__(self, seed: int, stream: int = 0):
        seed = np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        stream = np.array([stream & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        self.key = splitmix64(seed ^ splitmix64(stream))[0]
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            x = self.key + idx * GOLDEN
        return splitmix64(x)

    def uniform(self, n: int) -> np.ndarray:
        """n floats in [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_NEG_53

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """n integers uniform on [low, high)."""
        span = high - low
        return low + np.minimum((self.uniform(n) * span).astype(np.int64), span - 1)


# --- benchmark -----------------------------------------------------------

# stream ids; OOD set j uses OOD_STREAM + j
BASIS_STREAM, TRAIN_STREAM, TEST_STREAM, OOD_STREAM = 1, 2, 3, 100


@dataclass
class SynthConfig:
    """Knobs of the synthetic benchmark.

    ID features: ``m * B u_y + B eta_s + id_residual_scale * P_perp eta``
    with ``B`` an orthonormal L x d_signal basis and ``P_perp`` the projector
    onto its complement. ID logits: ``m * e_y + logit_noise * xi``.
    OOD features: ``ood_feature_scale * (ID feature draw for a random class)
    + ood_residual_boost * P_perp xi``, so scale 1 and boost 0 give features
    distributed exactly like ID ones. OOD logits reuse the ID form with
    margin ``ood_logit_margin * m`` for a random class.
    """

    K: int = 10
    L: int = 64
    d_signal: int = 16
    n_train: int = 5000
    n_id_test: int = 5000
    n_ood: int = 5000
    logit_noise: float = 1.5
    class_margin: float = 4.0
    ood_feature_scale: float = 0.45
    ood_residual_boost: float = 0.5
    ood_logit_margin: float = 0.5
    id_residual_scale: float = 0.5
    ood_names: tuple = ("ood_a", "ood_b")
    seed: int = 0

    def __post_init__(self):
        self.ood_names = tuple(self.ood_names)
        ints = ("K", "L", "d_signal", "n_train", "n_id_test", "n_ood")
        if any(int(getattr(self, f)) < 1 for f in ints):
            raise ConfigError("sizes must be positive")
        if self.K < 2:
            raise ConfigError("need K >= 2")
        if not self.d_signal < self.L:
            raise ConfigError("d_signal must be below L")
        if not 0.0 < self.ood_feature_scale <= 1.0:
            raise ConfigError("ood_feature_scale must be in (0, 1]")
        if self.logit_noise < 0 or self.class_margin <= 0 or self.ood_residual_boost < 0:
            raise ConfigError("noise, margin and residual boost must be non-negative")
        if self.id_residual_scale < 0 or self.ood_logit_margin < 0:
            raise ConfigError("id_residual_scale and ood_logit_margin must be non-negative")
        if len(set(self.ood_names)) != len(self.ood_names) or not self.ood_names:
            raise ConfigError("ood_names must be distinct and non-empty")


def _signal_basis(cfg: SynthConfig):
    rng = CounterRNG(cfg.seed, BASIS_STREAM)
    g = rng.normal(cfg.L * cfg.d_signal).reshape(cfg.L, cfg.d_signal)
    q, r = np.linalg.qr(g)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    if cfg.K <= cfg.d_signal:
        dirs = np.eye(cfg.d_signal)[: cfg.K]
    else:
        dirs = rng.normal(cfg.K * cfg.d_signal).reshape(cfg.K, cfg.d_signal)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return q, dirs


def _perp(x, basis):
    return x - (x @ basis) @ basis.T


def _id_bundle(name, n, stream, cfg, basis, dirs):
    rng = CounterRNG(cfg.seed, stream)
    y = rng.integers(0, cfg.K, n)
    eta_s = rng.normal(n * cfg.d_signal).reshape(n, cfg.d_signal)
    eta = rng.normal(n * cfg.L).reshape(n, cfg.L)
    xi = rng.normal(n * cfg.K).reshape(n, cfg.K)
    z = (cfg.class_margin * dirs[y] + eta_s) @ basis.T + cfg.id_residual_scale * _perp(eta, basis)
    v = cfg.class_margin * np.eye(cfg.K)[y] + cfg.logit_noise * xi
    return DatasetBundle(name, v.astype(np.float32), z.astype(np.float32), y)


def _ood_bundle(name, n, stream, cfg, basis, dirs):
    rng = CounterRNG(cfg.seed, stream)
    y = rng.integers(0, cfg.K, n)
    eta_s = rng.normal(n * cfg.d_signal).reshape(n, cfg.d_signal)
    eta = rng.normal(n * cfg.L).reshape(n, cfg.L)
    boost = rng.normal(n * cfg.L).reshape(n, cfg.L)
    xi = rng.normal(n * cfg.K).reshape(n, cfg.K)
    # an ID-distributed draw for a random class, then shrunk and pushed off the subspace
    id_like = (cfg.class_margin * dirs[y] + eta_s) @ basis.T + cfg.id_residual_scale * _perp(eta, basis)
    z = cfg.ood_feature_scale * id_like + cfg.ood_residual_boost * _perp(boost, basis)
    v = cfg.ood_logit_margin * cfg.class_margin * np.eye(cfg.K)[y] + cfg.logit_noise * xi
    return DatasetBundle(name, v.astype(np.float32), z.astype(np.float32), None)


def gen_benchmark(cfg: SynthConfig) -> dict:
    """Return ``{"train": bundle, "id_test": bundle, "ood": [bundles]}``."""
    basis, dirs = _signal_basis(cfg)
    return {
        "train": _id_bundle("id_train", cfg.n_train, TRAIN_STREAM, cfg, basis, dirs),
        "id_test": _id_bundle("id_test", cfg.n_id_test, TEST_STREAM, cfg, basis, dirs),
        "ood": [
            _ood_bundle(name, cfg.n_ood, OOD_STREAM + j, cfg, basis, dirs)
            for j, name in enumerate(cfg.ood_names)
        ],
    }


def write_benchmark(cfg: SynthConfig, out_dir) -> dict:
    """Generate and write SCT1 files plus ``manifest.json``; returns the manifest."""
    out_dir = Path(out_dir)
    bench = gen_benchmark(cfg)
    manifest = {"version": 1, "config": asdict(cfg), "id_train": None, "id_test": None, "ood": {}}
    manifest["config"]["ood_names"] = list(cfg.ood_names)

    def files(b):
        # names relative to the manifest's directory
        return {k: Path(v).name for k, v in save_bundle(b, out_dir).items()}

    for key in ("train", "id_test"):
        b = bench[key]
        manifest["id_train" if key == "train" else "id_test"] = {
            "name": b.name, "count": b.n, **files(b)
        }
    for j, b in enumerate(bench["ood"]):
        manifest["ood"][b.name] = {"count": b.n, "stream": OOD_STREAM + j, **files(b)}
    text = json.dumps(manifest, indent=1, sort_keys=True)
    atomic_write_bytes(out_dir / "manifest.json", text.encode("utf-8"))
    return manifest


# --- noise images --------------------------------------------------------

@dataclass
class NoiseConfig:
    count: int = 100
    min_width: int = 2
    max_width: int = 256
    out_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise ConfigError("count must be non-negative")
        if not 2 <= self.min_width <= self.max_width:
            raise ConfigError("need 2 <= min_width <= max_width")
        if self.out_size < 1:
            raise ConfigError("out_size must be positive")


@dataclass
class NoiseImage:
    index: int
    width: int
    std: float
    pixels: np.ndarray = field(repr=False)


def lanczos3(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.sinc(x) * np.sinc(x / 3.0)
    return np.where(np.abs(x) < 3.0, out, 0.0)


def lanczos_weights(in_size: int, out_size: int) -> np.ndarray:
    """out_size x in_size matrix of normalised Lanczos-3 weights.

    Pixel centres sit at ``i + 0.5``; when downscaling, the kernel is
    stretched by the scale factor so it also acts as an anti-alias filter.
    """
    scale = in_size / out_size
    stretch = max(scale, 1.0)
    support = 3.0 * stretch
    centres = (np.arange(out_size) + 0.5) * scale
    w = np.zeros((out_size, in_size))
    for i, c in enumerate(centres):
        lo = max(int(math.floor(c - support)), 0)
        hi = min(int(math.ceil(c + support)), in_size)
        j = np.arange(lo, hi)
        k = lanczos3((j + 0.5 - c) / stretch)
        w[i, lo:hi] = k / k.sum()
    return w


def resize_lanczos(img: np.ndarray, out_size: int) -> np.ndarray:
    """Separable Lanczos-3 resize of an H x W x C uint8 image to out_size^2."""
    h, w_ = img.shape[:2]
    wy = lanczos_weights(h, out_size)
    wx = lanczos_weights(w_, out_size)
    x = img.astype(np.float64)
    out = np.einsum("ij,jkc->ikc", wy, x)
    out = np.einsum("lk,ikc->ilc", wx, out)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def to_bytes(x: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to 8-bit, rounding half up."""
    return np.clip(np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def noise_image(cfg: NoiseConfig, index: int, std: float | None = None) -> NoiseImage:
    """One noise image. ``std`` overrides the sampled per-image deviation."""
    rng = CounterRNG(cfg.seed, index)
    g = rng.normal(1)[0]
    width = int(rng.integers(cfg.min_width, cfg.max_width + 1, 1)[0])
    sd = g * g if std is None else float(std)
    vals = 0.5 + sd * rng.normal(width * width * 3).reshape(width, width, 3)
    img = to_bytes(vals)
    if width != cfg.out_size:
        img = resize_lanczos(img, cfg.out_size)
    return NoiseImage(index, width, sd, img)


def ppm_bytes(img: np.ndarray) -> bytes:
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def gen_noise_images(cfg: NoiseConfig, out_dir) -> list[dict]:
    """Write ``noise_00000.ppm`` ... and ``noise_manifest.json``."""
    out_dir = Path(out_dir)
    records = []
    digits = max(5, len(str(max(cfg.count - 1, 0))))
    for i in range(cfg.count):
        im = noise_image(cfg, i)
        path = out_dir / f"noise_{i:0{digits}d}.ppm"
        atomic_write_bytes(path, ppm_bytes(im.pixels))
        records.append({"file": path.name, "width": im.width, "std": im.std})
    doc = {"version": 1, "config": asdict(cfg), "images": records}
    atomic_write_bytes(out_dir / "noise_manifest.json",
                       json.dumps(doc, indent=1, sort_keys=True).encode("utf-8"))
    return records


# --- oracles -------------------------------------------------------------

def oracle_auroc(pos, neg) -> float:
    """O(n^2) count of wins plus half ties."""
    pos = [float(p) for p in np.ravel(pos)]
    neg = [float(q) for q in np.ravel(neg)]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def _oracle_weights_losses(groups, alpha, beta):
    groups = [int(g) for g in np.ravel(groups)]
    n_ood = sum(1 for g in groups if g == Group.OOD)
    n_id = len(groups) - n_ood
    w, loss = [], []
    for g in groups:
        if g == Group.OOD:
            w.append((1 - alpha) / n_ood)
            loss.append(1 - beta)
        else:
            w.append(alpha / n_id)
            loss.append(beta if g == Group.ID_WRONG else 0.0)
    return groups, np.array(w), np.array(loss)


def _trapezoid(x, y):
    area = 0.0
    for i in range(1, len(x)):
        area += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1])
    return area


def oracle_selective_curves(scores, groups, alpha: float, beta: float, level: float = 0.95) -> dict:
    """Direct per-threshold recomputation of the risk-recall and
    risk-coverage curves (no cumulative sums)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    groups, w, loss = _oracle_weights_losses(groups, alpha, beta)
    g = np.array(groups)
    correct = g == Group.ID_CORRECT
    n_correct = int(correct.sum())
    total = w.sum()
    rec_pts, cov_pts = [], []
    for t in sorted(set(s.tolist()), reverse=True):
        acc = s >= t
        wa = w[acc].sum()
        if wa <= 0:
            continue
        risk = (w[acc] * loss[acc]).sum() / wa
        if n_correct:
            rec_pts.append((t, correct[acc].sum() / n_correct, risk))
        cov_pts.append((t, wa / total, risk))
    out = {"risk_recall": rec_pts, "risk_coverage": cov_pts}
    out["aurc"] = _trapezoid([p[1] for p in cov_pts], [p[2] for p in cov_pts])
    if rec_pts:
        out["aurr"] = _trapezoid([p[1] for p in rec_pts], [p[2] for p in rec_pts])
        out["risk_at_recall"] = next(p[2] for p in rec_pts if p[1] >= level)
    return out
