"""Synthetic conditional-denoising tasks with known clean distributions.

Each task draws a clean sample ``x1`` and observes it through additive
Gaussian corruption, ``c = x1 + sigma_c * eta``. The clean density (or, for
the circle, a pseudo log-density) is available in closed form so rewards
and oracles can be exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

KINDS = ("gauss1d", "circle2d", "mixture")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "circle2d"
    mu1: float = 2.0
    sigma1: float = 0.5
    radius: float = 1.0
    sigma_c: float = 0.3
    # mixture components: [weight, [mean...], std]
    components: tuple = field(default_factory=tuple)
    data_dim: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind '{self.kind}'")
        if self.sigma_c < 0:
            raise ValueError("sigma_c must be >= 0")
        if self.kind == "gauss1d" and self.sigma1 <= 0:
            raise ValueError("sigma1 must be > 0")
        if self.kind == "circle2d":
            if self.data_dim != 2:
                raise ValueError("circle2d needs data_dim == 2")
            if self.radius <= 0:
                raise ValueError("radius must be > 0")
        if self.kind == "mixture":
            if not self.components:
                raise ValueError("mixture needs at least one component")
            for w, m, s in self.components:
                if w <= 0 or s <= 0 or len(m) != self.data_dim:
                    raise ValueError(f"bad mixture component {(w, m, s)}")


@dataclass
class TrainPair:
    """Clean sample(s) and their corrupted condition; 1-D or a (N, d) batch."""

    x1: np.ndarray
    c: np.ndarray

    def __len__(self) -> int:
        return 1 if self.x1.ndim == 1 else self.x1.shape[0]


def _mixture_arrays(spec: TaskSpec):
    w = np.array([comp[0] for comp in spec.components], dtype=np.float64)
    mu = np.array([comp[1] for comp in spec.components], dtype=np.float64)
    sd = np.array([comp[2] for comp in spec.components], dtype=np.float64)
    return w / w.sum(), mu, sd


def sample_clean(spec: TaskSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    d = spec.data_dim
    if spec.kind == "gauss1d":
        return spec.mu1 + spec.sigma1 * rng.standard_normal((n, d))
    if spec.kind == "circle2d":
        theta = rng.uniform(0.0, 2.0 * math.pi, n)
        return spec.radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    w, mu, sd = _mixture_arrays(spec)
    k = rng.choice(len(w), size=n, p=w)
    return mu[k] + sd[k, None] * rng.standard_normal((n, d))


def sample_pairs(spec: TaskSpec, n: int, rng: np.random.Generator | int) -> TrainPair:
    rng = np.random.default_rng(rng)
    x1 = sample_clean(spec, n, rng)
    eta = rng.standard_normal(x1.shape)
    c = x1 + spec.sigma_c * eta if spec.sigma_c > 0 else x1.copy()
    return TrainPair(x1, c)


def sample_pair(spec: TaskSpec, seed) -> TrainPair:
    pair = sample_pairs(spec, 1, seed)
    return TrainPair(pair.x1[0], pair.c[0])


def clean_log_density(spec: TaskSpec, x) -> np.ndarray | float:
    """Log-density of ``x`` under the clean distribution (row-wise for batches).

    circle2d has no density on the plane; it uses ``-(|x| - radius)^2``,
    which is 0 exactly on the circle.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    d = x2.shape[1]
    if spec.kind == "gauss1d":
        z = (x2 - spec.mu1) / spec.sigma1
        out = -0.5 * np.sum(z * z, axis=1) - 0.5 * d * math.log(2 * math.pi * spec.sigma1**2)
    elif spec.kind == "circle2d":
        out = -((np.linalg.norm(x2, axis=1) - spec.radius) ** 2)
    else:
        w, mu, sd = _mixture_arrays(spec)
        diff = x2[:, None, :] - mu[None]
        comp = (
            np.log(w)[None]
            - 0.5 * np.sum(diff * diff, axis=2) / sd[None] ** 2
            - 0.5 * d * np.log(2 * math.pi * sd[None] ** 2)
        )
        out = logsumexp(comp, axis=1)
    return float(out[0]) if single else out


def gauss1d_posterior(spec: TaskSpec, c) -> tuple[np.ndarray, float]:
    """Mean and std of x1 | c for the Gaussian task (conjugate update)."""
    if spec.kind != "gauss1d":
        raise ValueError("posterior is only closed-form for gauss1d")
    prec = 1.0 / spec.sigma1**2 + 1.0 / spec.sigma_c**2
    var = 1.0 / prec
    mean = var * (spec.mu1 / spec.sigma1**2 + np.asarray(c, dtype=np.float64) / spec.sigma_c**2)
    return mean, math.sqrt(var)
