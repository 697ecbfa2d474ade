"""Conditional rectified-flow pretraining and Gaussian oracles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from . import autodiff as ad
from .model import ParamSet, drop_condition, forward
from .optim import Adam
from .tasks import TaskSpec, TrainPair, sample_pairs


@dataclass
class InterpolantSample:
    """x_t = (1 - t) x0 + t x1 and the regression target v = x1 - x0.

    Arrays are 1-D for a single sample or (N, d) with ``t`` of shape (N,).
    """

    t: np.ndarray
    x0: np.ndarray
    x_t: np.ndarray
    v_target: np.ndarray

    def __len__(self) -> int:
        return 1 if self.x_t.ndim == 1 else self.x_t.shape[0]


def sample_interpolant(pair: TrainPair, seed=None, t=None, x0=None) -> InterpolantSample:
    """Draw t ~ U[0, 1] and x0 ~ N(0, I) unless forced by the caller."""
    rng = np.random.default_rng(seed)
    x1 = np.asarray(pair.x1, dtype=np.float64)
    n = None if x1.ndim == 1 else x1.shape[0]
    if t is None:
        t = rng.uniform(0.0, 1.0, size=n)
    t = np.asarray(t, dtype=np.float64)
    if x0 is None:
        x0 = rng.standard_normal(x1.shape)
    x0 = np.asarray(x0, dtype=np.float64)
    tt = t[:, None] if x1.ndim == 2 else t
    return InterpolantSample(t=t, x0=x0, x_t=(1.0 - tt) * x0 + tt * x1, v_target=x1 - x0)


def fm_loss(params: ParamSet, batch: InterpolantSample, c, velocity=forward) -> ad.Tensor:
    """Batch mean of the squared L2 error summed over the data dimension."""
    if len(batch) == 0:
        raise ValueError("fm_loss needs a nonempty batch")
    x_t = np.atleast_2d(batch.x_t)
    v_hat = velocity(params, x_t, np.atleast_2d(c), np.atleast_1d(batch.t))
    err = ad.sub(v_hat, np.atleast_2d(batch.v_target))
    return ad.mean(ad.sum(ad.square(err), axis=-1))


def make_batch(spec: TaskSpec, n: int, rng: np.random.Generator, cond_dropout_prob: float = 0.0):
    """One pretraining minibatch: interpolants plus (possibly dropped) conditions."""
    pair = sample_pairs(spec, n, rng)
    sample = sample_interpolant(pair, rng)
    c = drop_condition(pair.c, cond_dropout_prob, rng)
    return sample, c


def pretrain_step(params: ParamSet, optimizer: Adam, batch: InterpolantSample, c) -> float:
    """One Adam descent step on fm_loss; returns the pre-update loss."""
    params.zero_grad()
    loss = fm_loss(params, batch, c)
    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError("non-finite flow-matching loss")
    ad.backward(loss)
    optimizer.step()
    return value


def analytic_gaussian_velocity(x, t, mu1: float, sigma1: float):
    """E[x1 - x0 | x_t = x] for x0 ~ N(0, 1), x1 ~ N(mu1, sigma1^2), independent.

    The expression stays finite on the closed interval, so t = 0 and t = 1 are
    accepted (the Euler sampler evaluates the field at t = 0).
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    if sigma1 <= 0:
        raise ValueError("sigma1 must be > 0")
    s2 = sigma1 * sigma1
    gain = (t * s2 - (1.0 - t)) / ((1.0 - t) ** 2 + t * t * s2)
    return mu1 + gain * (np.asarray(x, dtype=np.float64) - t * mu1)


def gaussian_fm_residual(sigma1: float) -> float:
    """Minimum achievable fm_loss per dimension for a Gaussian target of std sigma1.

    Var(x1 - x0 | x_t) = s^2 / ((1-t)^2 + t^2 s^2), averaged over t ~ U[0, 1].
    """
    s2 = sigma1 * sigma1
    val, _ = integrate.quad(lambda t: s2 / ((1 - t) ** 2 + t * t * s2), 0.0, 1.0)
    return val


def velocity_grid_mse(params: ParamSet, mu1: float, sigma1: float, c=None, nx: int = 61, nt: int = 19) -> float:
    """Mean squared gap to the analytic field over [-3, 3] x [0.05, 0.95] (1-D data)."""
    xs = np.linspace(-3.0, 3.0, nx)
    ts = np.linspace(0.05, 0.95, nt)
    X, Tg = np.meshgrid(xs, ts, indexing="ij")
    x = X.reshape(-1, 1)
    cond = np.zeros_like(x) if c is None else np.broadcast_to(c, x.shape)
    v = forward(params, x, cond, Tg.ravel()).data[:, 0]
    ref = analytic_gaussian_velocity(X.ravel(), Tg.ravel(), mu1, sigma1)
    return float(np.mean((v - ref) ** 2))
