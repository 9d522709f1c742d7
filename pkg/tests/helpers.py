"""Shared test utilities: FD gradient oracle and tractable model stubs."""

import numpy as np

from vhpvae.stochastic import DiagGaussian


def fd_gradient(f, arrays, h=1e-5):
    """Central finite-difference gradient of scalar f w.r.t. each array.

    f is called with no arguments and must read the arrays in place, so any
    randomness inside f has to be re-seeded per call (frozen noise).
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)


class StubModel:
    """Hand-wired model stand-in: the four nets are plain callables."""

    def __init__(self, dim_x, dim_z, dim_zeta, encoder, decoder,
                 prior_encoder, prior_decoder, iw_samples=4):
        self.dim_x = dim_x
        self.dim_z = dim_z
        self.dim_zeta = dim_zeta
        self.encoder = encoder
        self.decoder = decoder
        self.prior_encoder = prior_encoder
        self.prior_decoder = prior_decoder
        self.iw_samples = iw_samples


# frozen constants of the tractable chain below; tests may derive their own
# closed forms (e.g. the z-marginal N(b, a^2 + sig_z^2)) from these
CHAIN_A = np.array([1.2, 0.7])
CHAIN_B = np.array([0.3, -0.5])
CHAIN_SIG_Z = 0.6
CHAIN_D = np.array([0.9, 1.3])
CHAIN_E = np.array([0.1, -0.2])
CHAIN_SIG_X = 0.5


def linear_gaussian_chain():
    """Fully Gaussian-affine generative chain with a closed-form marginal.

    zeta ~ N(0, I); z = A*zeta + b + sig_z*eps; x = D*z + e + sig_x*eps.
    All maps are diagonal, so the marginal of x and both conditional
    posteriors are diagonal Gaussians.  The encoder and prior encoder are
    the exact posteriors widened slightly, keeping importance weights tame.
    Returns (model, logpdf) where logpdf(x) is the exact marginal log-density.
    """
    a = CHAIN_A
    b = CHAIN_B
    sig_z = CHAIN_SIG_Z
    d = CHAIN_D
    e = CHAIN_E
    sig_x = CHAIN_SIG_X
    s_z = a * a + sig_z ** 2
    s_x = d * d * s_z + sig_x ** 2
    m_x = d * b + e

    def encoder(x, binding=None):
        x = np.asarray(x, dtype=np.float64)
        v = 1.0 / (1.0 / s_z + d * d / sig_x ** 2)
        mean = v * (b / s_z + d * (x - e) / sig_x ** 2)
        log_std = np.broadcast_to(0.5 * np.log(v) + 0.1, mean.shape).copy()
        return DiagGaussian(mean, log_std)

    def decoder(z, binding=None):
        return DiagGaussian(np.asarray(z) * d + e, np.log(sig_x) * np.ones(2))

    def prior_encoder(z, binding=None):
        u = 1.0 / (1.0 + a * a / sig_z ** 2)
        mean = u * a * (np.asarray(z) - b) / sig_z ** 2
        log_std = np.broadcast_to(0.5 * np.log(u) + 0.15, mean.shape).copy()
        return DiagGaussian(mean, log_std)

    def prior_decoder(zeta, binding=None):
        return DiagGaussian(np.asarray(zeta) * a + b, np.log(sig_z) * np.ones(2))

    def logpdf(x):
        x = np.asarray(x, dtype=np.float64)
        return np.sum(-0.5 * np.log(2.0 * np.pi * s_x)
                      - 0.5 * (x - m_x) ** 2 / s_x, axis=-1)

    model = StubModel(2, 2, 2, encoder, decoder, prior_encoder, prior_decoder)
    return model, logpdf, (m_x, s_x)
