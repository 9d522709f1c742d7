"""Quantitative evaluation of trained models.

Covers the importance-weighted test log-likelihood (joint proposal over both
latent layers), active-unit diagnostics from closed-form per-dimension KL
values, rate/distortion summaries, and the circular angle regression used to
score pendulum runs.  Per-datum work is deterministic given the seed: every
datum gets its own child seed, so results do not depend on chunking or on the
VHP_THREADS worker count.
"""

from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .diffcore import logsumexp
from .stochastic import iw_kl_bound, std_normal_log_prob

TWO_PI = 2.0 * math.pi


def worker_count():
    """Worker threads for per-datum fan-out, from VHP_THREADS (default 1)."""
    raw = os.environ.get("VHP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"VHP_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise ValueError("VHP_THREADS must be >= 1")
    return n


def _run_chunks(fn, n):
    """Evaluate fn(lo, hi) over contiguous chunks; concatenate in index order."""
    workers = min(worker_count(), n)
    if workers <= 1:
        return fn(0, n)
    bounds = [n * i // workers for i in range(workers + 1)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, lo, hi)
                   for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        pieces = [f.result() for f in futures]
    return np.concatenate(pieces)


def _check_dataset(x, dim, what="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"{what} must be a (n, {dim}) array")
    if x.shape[0] < 1:
        raise ValueError(f"{what} must be non-empty")
    return x


def loglik_iw_per_datum(model, x, s, seed=0):
    """Importance-weighted log-likelihood estimate for each row of x.

    S joint samples per datum: z ~ q(z|x), zeta ~ q(zeta|z); the weight is
    p(x|z) p(z|zeta) p(zeta) / (q(z|x) q(zeta|z)), combined via logsumexp.
    """
    if s < 1:
        raise ValueError("sample count must be >= 1")
    x = _check_dataset(x, model.dim_x)
    n = x.shape[0]
    q = model.encoder(x)
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    children = seed.spawn(n)
    log_s = math.log(s)

    def chunk(lo, hi):
        out = np.empty(hi - lo)
        for i in range(lo, hi):
            rng = np.random.default_rng(children[i])
            mean, log_std = q.mean[i:i + 1], q.log_std[i:i + 1]
            z = mean + np.exp(log_std) * rng.standard_normal((s, model.dim_z))
            log_q_z = np.sum(
                -0.5 * ((z - mean) * np.exp(-log_std)) ** 2
                - log_std - 0.5 * math.log(TWO_PI), axis=-1)
            proposal = model.prior_encoder(z)
            zeta = proposal.sample(rng.standard_normal((s, model.dim_zeta)))
            log_w = (model.decoder(z).log_prob(x[i:i + 1])
                     + model.prior_decoder(zeta).log_prob(z)
                     + std_normal_log_prob(zeta)
                     - log_q_z
                     - proposal.log_prob(zeta))
            if not np.all(np.isfinite(log_w)):
                raise ValueError("non-finite importance weight")
            out[i - lo] = float(logsumexp(log_w, axis=0)) - log_s
        return out

    return _run_chunks(chunk, n)


def test_loglik_iw(model, x, s, seed=0):
    """Mean importance-weighted log-likelihood over the dataset."""
    return float(np.mean(loglik_iw_per_datum(model, x, s, seed=seed)))


@dataclasses.dataclass
class ActiveUnitsReport:
    """Per-dimension expected KL to the standard normal, sorted descending."""

    values: np.ndarray
    dims: list
    active: int
    threshold: float


def active_units(model, dataset, threshold=0.01, seed=0):
    """Rank latent dimensions of the outer layer by expected closed-form KL.

    For each datum, z is sampled once from the posterior; the per-dimension
    1-d KL(q(zeta_j|z) || N(0, 1)) has the usual closed form and is averaged
    over the dataset.  Dimensions above the threshold count as active.
    """
    x = _check_dataset(dataset, model.dim_x, what="dataset")
    rng = np.random.default_rng(seed)
    q = model.encoder(x)
    z = q.sample(rng.standard_normal((x.shape[0], model.dim_z)))
    prop = model.prior_encoder(z)
    var = np.exp(2.0 * prop.log_std)
    kl = 0.5 * (prop.mean * prop.mean + var - 1.0) - prop.log_std
    mean_kl = np.maximum(np.mean(kl, axis=0), 0.0)
    order = np.argsort(-mean_kl, kind="stable")
    values = mean_kl[order]
    return ActiveUnitsReport(values, [int(d) for d in order],
                             int(np.sum(values > threshold)), float(threshold))


@dataclasses.dataclass
class EvalReport:
    """Test NLL plus the rate and distortion terms it decomposes into."""

    per_datum_nll: np.ndarray
    mean_nll: float
    rate: float
    distortion: float
    s_loglik: int
    k_rate: int

    def __post_init__(self):
        if not (np.all(np.isfinite(self.per_datum_nll))
                and math.isfinite(self.mean_nll)
                and math.isfinite(self.rate)
                and math.isfinite(self.distortion)):
            raise ValueError("evaluation produced non-finite values")


def rate_distortion(model, dataset, s_loglik, seed=0):
    """Rate (IW KL bound), distortion (one-sample NLL term), and test NLL."""
    x = _check_dataset(dataset, model.dim_x, what="dataset")
    seq = np.random.SeedSequence(seed)
    rng_post, rng_rate, seq_ll = seq.spawn(3)
    rng_post = np.random.default_rng(rng_post)
    q = model.encoder(x)
    z = q.sample(rng_post.standard_normal((x.shape[0], model.dim_z)))
    distortion = float(-np.mean(model.decoder(z).log_prob(x)))
    rate = float(iw_kl_bound(model, q, z, model.iw_samples,
                             np.random.default_rng(rng_rate)))
    per_datum_nll = -loglik_iw_per_datum(model, x, s_loglik, seed=seq_ll)
    return EvalReport(per_datum_nll, float(np.mean(per_datum_nll)),
                      rate, distortion, int(s_loglik), int(model.iw_samples))


def wrap_angle(delta):
    """Map angle differences into [-pi, pi)."""
    return (np.asarray(delta, dtype=np.float64) + math.pi) % TWO_PI - math.pi


def fit_circle_centre(z):
    """Algebraic least-squares circle centre of 2-d points (Kasa fit).

    Solves the linear system for x^2 + y^2 = a*x + b*y + c; the centre is
    (a/2, b/2).  Exact when the points lie exactly on a circle.  Points are
    shifted by their mean first so the system stays well conditioned for
    rings far from the origin.
    """
    mean = z.mean(axis=0)
    u = z - mean
    design = np.column_stack([u, np.ones(u.shape[0])])
    coef = np.linalg.lstsq(design, np.sum(u * u, axis=1), rcond=None)[0]
    return mean + 0.5 * coef[:2]


def circular_fit(latents, true_angles):
    """Fit angle = s*atan2 about the fitted circle centre + c to the truth.

    Returns (s, c, centre, error).  Both orientations s in {+1, -1} are
    tried; the offset c is the circular mean of the residuals.  The error is
    the mean absolute circular residual, invariant to translations,
    rotations, and reflections of the latent plane.
    """
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != 2:
        raise ValueError("angle regression needs (n, 2) latents")
    ang = np.asarray(true_angles, dtype=np.float64).reshape(-1)
    if ang.shape[0] != z.shape[0] or ang.shape[0] < 1:
        raise ValueError("need one angle per latent")
    if np.any(ang < 0.0) or np.any(ang >= TWO_PI):
        raise ValueError("angles must lie in [0, 2*pi)")
    centre = fit_circle_centre(z)
    phi = np.arctan2(z[:, 1] - centre[1], z[:, 0] - centre[0])
    best = (math.inf, 1.0, 0.0)
    for s in (1.0, -1.0):
        resid = ang - s * phi
        c = math.atan2(float(np.mean(np.sin(resid))),
                       float(np.mean(np.cos(resid))))
        err = float(np.mean(np.abs(wrap_angle(s * phi + c - ang))))
        best = min(best, (err, s, c))
    err, s, c = best
    return s, c, centre, err


def circular_regression(latents, true_angles):
    """Best mean absolute circular error of the centred-atan2 angle fit."""
    return circular_fit(latents, true_angles)[3]


def angle_regression(model, images, true_angles):
    """Circular regression error of posterior-mean angles, in radians."""
    if model.dim_z != 2:
        raise ValueError("angle regression needs a 2-d latent space")
    x = _check_dataset(images, model.dim_x, what="images")
    return circular_regression(model.encoder(x).mean, true_angles)


def eval_report_csv(report):
    """Two-column metric,value rows for an EvalReport."""
    rows = [("mean_nll", repr(report.mean_nll)),
            ("rate", repr(report.rate)),
            ("distortion", repr(report.distortion)),
            ("s_loglik", repr(report.s_loglik)),
            ("k_rate", repr(report.k_rate))]
    return "metric,value\n" + "\n".join(f"{k},{v}" for k, v in rows) + "\n"


def active_units_csv(report):
    """Per-dimension rows, sorted by descending expected KL."""
    lines = ["dimension,expected_kl"]
    for d, v in zip(report.dims, report.values):
        lines.append(f"{d},{repr(float(v))}")
    lines.append(f"active,{report.active}")
    return "\n".join(lines) + "\n"
