"""Independent reference computations used by the unit and acceptance tests."""

import math

import numpy as np


def mc_kl_gaussian(mu, logvar, rng, samples=100_000):
    """Monte-Carlo KL(N(mu, exp(logvar)) || N(0, I)) summed over dims: (estimate, standard error)."""
    mu, logvar = np.asarray(mu, float), np.asarray(logvar, float)
    sd = np.exp(0.5 * logvar)
    z = mu + sd * rng.standard_normal((samples,) + mu.shape)
    log_q = -0.5 * (((z - mu) / sd) ** 2 + logvar + math.log(2 * math.pi))
    log_p = -0.5 * (z**2 + math.log(2 * math.pi))
    d = (log_q - log_p).reshape(samples, -1).sum(axis=1)
    return d.mean(), d.std(ddof=1) / math.sqrt(samples)


def mc_kl_bernoulli(q, p, rng, samples=100_000):
    b = rng.random(samples) < q
    d = np.where(b, math.log(q / p), math.log((1 - q) / (1 - p)))
    return d.mean(), d.std(ddof=1) / math.sqrt(samples)


def ssim_loop(a, b, size=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """Window-by-window SSIM of two 2-D grayscale images in [0, 1] (valid region)."""
    r = np.arange(size) - (size - 1) / 2
    g1 = np.exp(-(r**2) / (2 * sigma**2))
    g = np.outer(g1, g1)
    g /= g.sum()
    H, W = a.shape
    vals = []
    for i in range(H - size + 1):
        for j in range(W - size + 1):
            pa, pb = a[i : i + size, j : j + size], b[i : i + size, j : j + size]
            ma, mb = (g * pa).sum(), (g * pb).sum()
            va = (g * (pa - ma) ** 2).sum()
            vb = (g * (pb - mb) ** 2).sum()
            cov = (g * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def psnr_ref(x, y):
    """PSNR in dB of [-1, 1] images after mapping to [0, 1]; inf for identical inputs."""
    a, b = (np.asarray(x, float) + 1) / 2, (np.asarray(y, float) + 1) / 2
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(1 / mse)


def gray_ref(x):
    x = (np.asarray(x, float) + 1) / 2
    return 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]


def adam_scalar(p, g, m, v, lr, t, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    return p - lr * mhat / (math.sqrt(vhat) + eps), m, v
