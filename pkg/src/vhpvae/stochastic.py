"""Diagonal-Gaussian machinery, the hierarchical-prior model, and objectives.

The model has four fully-connected nets: an encoder q(z|x), a decoder p(x|z),
and a second-level pair defining a learned prior over z, namely a prior
encoder q(zeta|z) used as proposal and a prior decoder p(z|zeta) mixed over
standard-normal zeta.  Objectives are written with the dispatching ops from
``diffcore`` so they run identically on the tape (training) and on plain
arrays (evaluation).

Noise convention: every objective draws its standard-normal tensors from the
generator it is handed, in a fixed order (z first, then zeta), so re-seeding
the generator freezes the noise for finite-difference gradient checks.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import (
    DenseLayer, GatedDenseLayer, ParamBinding, ShapeError, Tape,
    clip, exp, logsumexp, repeat_rows, reshape, sigmoid,
    tensor_mean, tensor_sum,
)

LOG_2PI = math.log(2.0 * math.pi)

DECODER_LOG_STD_RANGE = (-7.0, 2.0)

GROUPS = ("encoder", "decoder", "prior_encoder", "prior_decoder")


def _last_dim(value):
    shape = value.shape if hasattr(value, "shape") else np.shape(value)
    if len(shape) == 0:
        raise ShapeError("expected at least one dimension")
    return shape[-1]


class DiagGaussian:
    """Diagonal Gaussian with mean and log standard deviation, same shape."""

    def __init__(self, mean, log_std):
        if _last_dim(mean) != _last_dim(log_std):
            raise ShapeError("mean and log_std dimensions differ")
        self.mean = mean
        self.log_std = log_std

    @property
    def dim(self):
        return _last_dim(self.mean)

    def log_prob(self, x):
        """Sum over the last axis of the per-dimension Gaussian log density."""
        if _last_dim(x) != self.dim:
            raise ShapeError(
                f"value dimension {_last_dim(x)} != distribution dimension {self.dim}")
        z = (x - self.mean) * exp(-self.log_std)
        quad = z * z
        return tensor_sum(-0.5 * LOG_2PI - self.log_std - 0.5 * quad, axis=-1)

    def sample(self, eps):
        """Reparameterised draw mean + exp(log_std) * eps."""
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape[-1] != self.dim:
            raise ShapeError("noise dimension mismatch")
        return self.mean + exp(self.log_std) * eps


class Bernoulli:
    """Factorised Bernoulli parameterised by logits."""

    def __init__(self, logits):
        self.logits = logits

    @property
    def dim(self):
        return _last_dim(self.logits)

    @property
    def mean(self):
        return sigmoid(self.logits)

    def log_prob(self, x):
        if _last_dim(x) != self.dim:
            raise ShapeError("value dimension mismatch")
        # x*logit - softplus(logit), stable for large |logit|
        return tensor_sum(x * self.logits - dc.softplus(self.logits), axis=-1)


def diag_gaussian_log_prob(g, x):
    return g.log_prob(x)


def reparam_sample(g, eps):
    return g.sample(eps)


def kl_diag_gaussians(q, p):
    """Closed-form KL(q || p) between diagonal Gaussians, summed over dims."""
    if q.dim != p.dim:
        raise ShapeError("distribution dimensions differ")
    var_ratio = exp(2.0 * (q.log_std - p.log_std))
    delta = (q.mean - p.mean) * exp(-p.log_std)
    return tensor_sum(p.log_std - q.log_std
                      + 0.5 * (var_ratio + delta * delta) - 0.5, axis=-1)


def standard_gaussian(dim):
    return DiagGaussian(np.zeros(dim), np.zeros(dim))


def std_normal_log_prob(x):
    return tensor_sum(-0.5 * LOG_2PI - 0.5 * x * x, axis=-1)


def reconstruction_cost(x, decoder_dist):
    """Per-dimension mean squared error against the decoder mean."""
    mean = decoder_dist.mean if hasattr(decoder_dist, "mean") else decoder_dist
    if _last_dim(x) != _last_dim(mean):
        raise ShapeError("value dimension mismatch")
    err = x - mean
    return tensor_mean(err * err, axis=-1)


def _make_layer(rng, n_in, n_out, activation, gated):
    if gated:
        return GatedDenseLayer.create(rng, n_in, n_out, activation)
    return DenseLayer.create(rng, n_in, n_out, activation)


class GaussianNet:
    """Trunk MLP with affine mean and log_std heads; maps input to DiagGaussian."""

    def __init__(self, trunk, mean_head, log_std_head, log_std_range=None):
        if mean_head.n_out != log_std_head.n_out:
            raise ShapeError("mean and log_std heads disagree on output width")
        self.trunk = list(trunk)
        self.mean_head = mean_head
        self.log_std_head = log_std_head
        self.log_std_range = log_std_range

    @classmethod
    def create(cls, rng, n_in, n_out, hidden, activation="relu",
               log_std_range=None, gated=False):
        layers = []
        width = n_in
        for h in hidden:
            layers.append(_make_layer(rng, width, h, activation, gated))
            width = h
        mean_head = DenseLayer.create(rng, width, n_out, "identity")
        log_std_head = DenseLayer.create(rng, width, n_out, "identity")
        return cls(layers, mean_head, log_std_head, log_std_range)

    @property
    def n_in(self):
        return self.trunk[0].n_in if self.trunk else self.mean_head.n_in

    @property
    def n_out(self):
        return self.mean_head.n_out

    def parameters(self):
        out = []
        for i, layer in enumerate(self.trunk):
            out.extend((f"trunk.{i}.{n}", a) for n, a in layer.parameters())
        out.extend((f"mean.{n}", a) for n, a in self.mean_head.parameters())
        out.extend((f"log_std.{n}", a) for n, a in self.log_std_head.parameters())
        return out

    def __call__(self, x, binding=None):
        h = dc.mlp_apply(self.trunk, x, binding)
        mean = self.mean_head.apply(h, binding)
        log_std = self.log_std_head.apply(h, binding)
        if self.log_std_range is not None:
            log_std = clip(log_std, *self.log_std_range)
        return DiagGaussian(mean, log_std)


class BernoulliNet:
    """Trunk MLP with a single logits head."""

    def __init__(self, trunk, logits_head):
        self.trunk = list(trunk)
        self.logits_head = logits_head

    @classmethod
    def create(cls, rng, n_in, n_out, hidden, activation="relu", gated=False):
        layers = []
        width = n_in
        for h in hidden:
            layers.append(_make_layer(rng, width, h, activation, gated))
            width = h
        return cls(layers, DenseLayer.create(rng, width, n_out, "identity"))

    @property
    def n_in(self):
        return self.trunk[0].n_in if self.trunk else self.logits_head.n_in

    @property
    def n_out(self):
        return self.logits_head.n_out

    def parameters(self):
        out = []
        for i, layer in enumerate(self.trunk):
            out.extend((f"trunk.{i}.{n}", a) for n, a in layer.parameters())
        out.extend((f"logits.{n}", a) for n, a in self.logits_head.parameters())
        return out

    def __call__(self, x, binding=None):
        h = dc.mlp_apply(self.trunk, x, binding)
        return Bernoulli(self.logits_head.apply(h, binding))


class VhpModel:
    """Four-net hierarchical-prior VAE with an importance-sample count K."""

    def __init__(self, encoder, decoder, prior_encoder, prior_decoder, iw_samples):
        if iw_samples < 1:
            raise ValueError("iw_samples must be >= 1")
        dim_x, dim_z = encoder.n_in, encoder.n_out
        dim_zeta = prior_encoder.n_out
        if decoder.n_in != dim_z or decoder.n_out != dim_x:
            raise ShapeError("decoder dimensions inconsistent with encoder")
        if prior_encoder.n_in != dim_z:
            raise ShapeError("prior encoder must take z as input")
        if prior_decoder.n_in != dim_zeta or prior_decoder.n_out != dim_z:
            raise ShapeError("prior decoder dimensions inconsistent")
        self.encoder = encoder
        self.decoder = decoder
        self.prior_encoder = prior_encoder
        self.prior_decoder = prior_decoder
        self.dim_x = dim_x
        self.dim_z = dim_z
        self.dim_zeta = dim_zeta
        self.iw_samples = int(iw_samples)

    @classmethod
    def create(cls, rng, dim_x, dim_z, dim_zeta, hidden=(256, 256, 256, 256),
               activation="relu", decoder_family="gaussian", iw_samples=16,
               gated=False):
        encoder = GaussianNet.create(rng, dim_x, dim_z, hidden, activation,
                                     gated=gated)
        if decoder_family == "gaussian":
            decoder = GaussianNet.create(rng, dim_z, dim_x, hidden, activation,
                                         log_std_range=DECODER_LOG_STD_RANGE,
                                         gated=gated)
        elif decoder_family == "bernoulli":
            decoder = BernoulliNet.create(rng, dim_z, dim_x, hidden, activation,
                                          gated=gated)
        else:
            raise ValueError(f"unknown decoder family '{decoder_family}'")
        prior_encoder = GaussianNet.create(rng, dim_z, dim_zeta, hidden,
                                           activation, gated=gated)
        prior_decoder = GaussianNet.create(rng, dim_zeta, dim_z, hidden,
                                           activation, gated=gated)
        return cls(encoder, decoder, prior_encoder, prior_decoder, iw_samples)

    def groups(self):
        return {
            "encoder": self.encoder,
            "decoder": self.decoder,
            "prior_encoder": self.prior_encoder,
            "prior_decoder": self.prior_decoder,
        }

    def parameters(self):
        """Deterministically ordered (qualified name, array) pairs."""
        out = []
        for group in GROUPS:
            net = self.groups()[group]
            out.extend((f"{group}.{name}", arr) for name, arr in net.parameters())
        return out


class BoundValue:
    """A loss node plus the scalar diagnostics the trainer logs."""

    def __init__(self, total, kl_term, recon_term, c_hat_batch, tape, binding):
        self.total = total
        self.kl_term = float(kl_term)
        self.recon_term = float(recon_term)
        self.c_hat_batch = float(c_hat_batch)
        self.tape = tape
        self.binding = binding


def _bind_groups(model, tape, groups):
    """One binding per loss; only the named groups get addressable leaves."""
    binding = ParamBinding(tape)
    bound = {g: (binding if g in groups else None) for g in GROUPS}
    return binding, bound


def _check_batch(x, dim, what="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{what} must have shape (n, {dim}), got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError(f"{what} batch is empty")
    return x


def elbo(model, x, beta, rng):
    """Standard-normal-prior objective: mean[-log p(x|z)] + beta * mean[KL]."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    x = _check_batch(x, model.dim_x)
    tape = Tape()
    binding, bound = _bind_groups(model, tape, {"encoder", "decoder"})
    q = model.encoder(x, bound["encoder"])
    eps = rng.standard_normal((x.shape[0], model.dim_z))
    z = q.sample(eps)
    dist = model.decoder(z, bound["decoder"])
    recon = -tensor_mean(dist.log_prob(x))
    kl = tensor_mean(kl_diag_gaussians(q, standard_gaussian(model.dim_z)))
    total = recon + beta * kl
    c_hat = float(tensor_mean(reconstruction_cost(x, dist)).data)
    return BoundValue(total, float(kl.data), float(recon.data), c_hat,
                      tape, binding)


def iw_kl_bound(model, q, z, k, rng, prior_binding=None):
    """Importance-weighted upper bound on E[KL(q(z|x) || p(z))].

    Per batch row: log q(z|x) minus a K-sample logsumexp estimate of the
    learned prior's log marginal, using the prior encoder as proposal.
    """
    if k < 1:
        raise ValueError("importance sample count must be >= 1")
    n = z.shape[0]
    log_q_z = q.log_prob(z)

    proposal = model.prior_encoder(z, prior_binding)
    rep = lambda v: repeat_rows(v, k)
    proposal_rep = DiagGaussian(rep(proposal.mean), rep(proposal.log_std))
    eps = rng.standard_normal((n * k, model.dim_zeta))
    zeta = proposal_rep.sample(eps)

    log_w = (model.prior_decoder(zeta, prior_binding).log_prob(rep(z))
             + std_normal_log_prob(zeta)
             - proposal_rep.log_prob(zeta))
    log_marginal = logsumexp(reshape(log_w, (n, k)), axis=1) - math.log(k)
    return tensor_mean(log_q_z - log_marginal)


def vhp_loss(model, x, beta, phase, rng, k=None):
    """Hierarchical-prior objective beta * F + mean[-log p(x|z)].

    F is the importance-weighted KL bound and the reconstruction term the
    decoder negative log-likelihood.  The per-dimension squared error against
    the decoder mean is reported separately as the constraint diagnostic.  In
    the initial phase the prior nets are applied as constants, so only encoder
    and decoder receive gradients.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    if phase not in ("initial", "main"):
        raise ValueError(f"unknown phase '{phase}'")
    x = _check_batch(x, model.dim_x)
    k = model.iw_samples if k is None else int(k)

    tape = Tape()
    groups = {"encoder", "decoder"} if phase == "initial" else set(GROUPS)
    binding, bound = _bind_groups(model, tape, groups)

    q = model.encoder(x, bound["encoder"])
    eps_z = rng.standard_normal((x.shape[0], model.dim_z))
    z = q.sample(eps_z)

    f_bound = iw_kl_bound(model, q, z, k, rng,
                          prior_binding=bound["prior_encoder"])
    dist = model.decoder(z, bound["decoder"])
    recon = -tensor_mean(dist.log_prob(x))
    total = beta * f_bound + recon

    mean = dist.mean
    mean = mean.data if isinstance(mean, dc.Tensor) else np.asarray(mean)
    c_hat = float(np.mean((x - mean) ** 2))
    return BoundValue(total, float(f_bound.data), float(recon.data),
                      c_hat, tape, binding)


def prior_sample(model, n, rng):
    """Ancestral draws (z, zeta) from the learned prior; plain arrays."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(rng)
    zeta = rng.standard_normal((n, model.dim_zeta))
    p = model.prior_decoder(zeta)
    z = p.mean + np.exp(p.log_std) * rng.standard_normal((n, model.dim_z))
    return z, zeta


def prior_log_marginal(model, z, s, rng):
    """Importance-sampling estimate of the learned prior's log density at z."""
    if s < 1:
        raise ValueError("importance sample count must be >= 1")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    rng = np.random.default_rng(rng)
    n = z.shape[0]
    out = np.empty(n)
    for i in range(n):
        zi = z[i]
        proposal = model.prior_encoder(zi[None, :])
        eps = rng.standard_normal((s, model.dim_zeta))
        zeta = proposal.mean + np.exp(proposal.log_std) * eps
        log_w = (model.prior_decoder(zeta).log_prob(zi)
                 + std_normal_log_prob(zeta)
                 - proposal.log_prob(zeta))
        out[i] = logsumexp(log_w) - math.log(s)
    return out
