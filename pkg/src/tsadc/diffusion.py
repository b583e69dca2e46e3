"""Conditional denoising diffusion over masked observations.

Observations are handled batched as arrays of shape (B, K, L). The
condition for the noise predictor is the kept values together with the
mask itself, stacked on the channel axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError
from .masking import MaskSpec, make_masks
from .numerics import Conv1x1, Linear, Module, Tensor, as_tensor, no_grad
from .s4 import S4Layer, cached_kernels

BETA_START = 1e-4
BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step constants stored 0-based: ``beta[t - 1]`` is beta_t."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    @property
    def T(self):
        return len(self.beta)

    def check_step(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ContractError(f"diffusion step out of range 1..{self.T}: {t}")

    def sigma(self, t):
        """Reverse-step standard deviation sqrt(beta_tilde_t)."""
        return math.sqrt(self.beta_tilde[t - 1])


def build_schedule(T):
    if int(T) != T or T < 1:
        raise ConfigError(f"number of diffusion steps must be >= 1, got {T}")
    beta = np.linspace(BETA_START, BETA_END, int(T))
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = (1.0 - prev) / (1.0 - alpha_bar) * beta
    beta_tilde[0] = beta[0]
    return NoiseSchedule(beta, alpha, alpha_bar, beta_tilde)


def _per_obs(values, x):
    """Broadcast per-observation scalars against a (B, K, L) array."""
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(values.shape + (1,) * (np.ndim(x) - values.ndim))


def forward_diffuse(x0, t, eps, sched: NoiseSchedule):
    """Closed-form q(x_t | x_0): sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` is a scalar or one step per leading observation.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} != data shape {x0.shape}")
    sched.check_step(t)
    ab = _per_obs(sched.alpha_bar[np.asarray(t) - 1], x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def noise_loss(eps, eps_hat, v):
    """Mean squared noise error over masked entries (v == 0) only."""
    v = np.asarray(v, dtype=np.float64)
    hole = 1.0 - v
    count = hole.sum()
    if count == 0:
        raise ContractError("noise loss needs at least one masked entry")
    eps_hat = as_tensor(eps_hat)
    if eps_hat.shape != v.shape or np.shape(eps) != v.shape:
        raise ShapeError("noise, prediction and mask shapes must agree")
    diff = (eps_hat - np.asarray(eps, dtype=np.float64)) * hole
    return (diff * diff).sum() * (1.0 / count)


def one_shot_x0(x_T, eps_hat_T, sched: NoiseSchedule):
    """Invert the closed form at step T in one shot."""
    ab = sched.alpha_bar[-1]
    if np.shape(x_T) != np.shape(eps_hat_T):
        raise ShapeError("x_T and predicted noise shapes differ")
    return (np.asarray(x_T) - math.sqrt(1.0 - ab) * np.asarray(eps_hat_T)) / math.sqrt(ab)


def reverse_step(x_t, eps_hat, t, sched: NoiseSchedule, z=None):
    """One ancestral step t -> t-1; ``z`` is ignored at t == 1."""
    beta = sched.beta[t - 1]
    mu = (x_t - beta / math.sqrt(1.0 - sched.alpha_bar[t - 1]) * eps_hat) / math.sqrt(
        sched.alpha[t - 1]
    )
    if t == 1 or z is None:
        return mu
    return mu + sched.sigma(t) * z


def reverse_sample(x_T, net, cond, sched: NoiseSchedule, rng):
    """Run the full chain from step T down to 1.

    ``net(x_t, t, cond)`` returns the predicted noise as an array (or tensor)
    shaped like ``x_t``; ``t`` is passed as an int array, one per observation.
    """
    x = np.array(x_T, dtype=np.float64)
    n = x.shape[0] if x.ndim == 3 else 1
    for t in range(sched.T, 0, -1):
        eps_hat = net(x, np.full(n, t), cond)
        eps_hat = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
        z = rng.standard_normal(x.shape) if t > 1 else None
        x = reverse_step(x, eps_hat, t, sched, z)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"reverse chain produced non-finite values at step {t}")
    return x


def make_condition(x, v):
    """Stack kept values and the mask on the channel axis: (B, 2K, L)."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if x.shape != v.shape:
        raise ShapeError(f"observation shape {x.shape} != mask shape {v.shape}")
    return np.concatenate([x * v, v], axis=-2)


def step_features(T, dim=128):
    """Sinusoidal features of steps 1..T; row t-1 belongs to step t."""
    half = dim // 2
    t = np.arange(1, T + 1, dtype=np.float64)[:, None]
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=1)


class ResidualBlock(Module):
    def __init__(self, K, channels, state_size, rng, bidirectional=False):
        C = channels
        self.step_proj = Linear(C, C, rng)
        self.s4_in = S4Layer(C, state_size, rng, bidirectional=bidirectional)
        self.cond_proj = Conv1x1(2 * K, C, rng)
        self.s4_cond = S4Layer(C, state_size, rng, bidirectional=bidirectional)
        self.gate = Conv1x1(C, 2 * C, rng)
        self.res = Conv1x1(C, C, rng)
        self.skip = Conv1x1(C, C, rng)

    def forward(self, h, temb, cond):
        C = h.shape[-2]
        y = h + self.step_proj(temb).expand_dims(-1)
        y = self.s4_in(y)
        y = y + self.cond_proj(cond)
        y = self.s4_cond(y)
        g = self.gate(y)
        out = g[..., :C, :].tanh() * g[..., C:, :].sigmoid()
        return (h + self.res(out)) * (1.0 / math.sqrt(2.0)), self.skip(out)


class EpsilonNet(Module):
    """Noise predictor eps(x_t, t, c) built from S4 residual blocks."""

    def __init__(self, K, T, rng, channels=64, blocks=4, state_size=32, embed_dim=128,
                 bidirectional=False):
        self.K = K
        self.T = T
        self.channels = channels
        self.table = step_features(T, embed_dim)
        self.in_proj = Conv1x1(K, channels, rng)
        self.emb1 = Linear(embed_dim, channels, rng)
        self.emb2 = Linear(channels, channels, rng)
        self.blocks = [ResidualBlock(K, channels, state_size, rng, bidirectional) for _ in range(blocks)]
        self.out1 = Conv1x1(channels, channels, rng)
        self.out2 = Conv1x1(channels, K, rng, zero=True)

    def forward(self, x_t, t, cond):
        x_t = as_tensor(x_t)
        if x_t.ndim != 3 or x_t.shape[1] != self.K:
            raise ShapeError(f"expected x_t of shape (B, {self.K}, L), got {x_t.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=np.intp), (x_t.shape[0],))
        if np.any(t < 1) or np.any(t > self.T):
            raise ContractError(f"diffusion step out of range 1..{self.T}")
        temb = self.emb2(self.emb1(Tensor(self.table[t - 1])).silu()).silu()
        cond = as_tensor(cond)
        h = self.in_proj(x_t).relu()
        skips = None
        for block in self.blocks:
            h, s = block(h, temb, cond)
            skips = s if skips is None else skips + s
        out = self.out1((skips * (1.0 / math.sqrt(len(self.blocks)))).relu()).relu()
        return self.out2(out)

    def predict(self, x_t, t, cond, batch_size=128):
        """Inference-only noise prediction as a numpy array."""
        x_t = np.asarray(x_t)
        t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        parts = []
        with no_grad(), cached_kernels():
            for i in range(0, x_t.shape[0], batch_size):
                sl = slice(i, i + batch_size)
                parts.append(self.forward(x_t[sl], t[sl], cond[sl]).data)
        return np.concatenate(parts) if parts else np.zeros_like(x_t)


def compose(x, x0_hat, v):
    """Keep observed values where v == 1 and the estimate elsewhere."""
    return v * x + (1.0 - v) * x0_hat


def chain_start(x, v, sched: NoiseSchedule, rng):
    """Test-time x_T: standard normal on masked entries, diffused data on kept ones."""
    eps = rng.standard_normal(x.shape)
    diffused = forward_diffuse(x, sched.T, eps, sched)
    noise = rng.standard_normal(x.shape)
    return np.where(v == 0, noise, diffused)


def decontaminate_batch(x, spec: MaskSpec, net, sched: NoiseSchedule, rng, mode="train", masks=None):
    """Mask a batch and regenerate the masked portions.

    ``mode="train"`` uses the one-shot inversion at step T; ``mode="test"``
    runs the full reverse chain. Returns (x0_hat, masks); kept entries of
    ``x0_hat`` equal ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    B, K, L = x.shape
    v = make_masks(spec, B, K, L, rng) if masks is None else np.asarray(masks, dtype=np.float64)
    if v.shape != x.shape:
        raise ShapeError(f"mask shape {v.shape} != batch shape {x.shape}")
    cond = make_condition(x, v)
    predict = net.predict if hasattr(net, "predict") else net
    if mode == "train":
        eps = rng.standard_normal(x.shape)
        x_T = forward_diffuse(x, sched.T, eps, sched)
        eps_hat = predict(x_T, np.full(B, sched.T), cond)
        x0_hat = one_shot_x0(x_T, np.asarray(eps_hat), sched)
    elif mode == "test":
        x_T = chain_start(x, v, sched, rng)
        x0_hat = reverse_sample(x_T, predict, cond, sched, rng)
    else:
        raise ContractError(f"mode must be 'train' or 'test', got {mode!r}")
    return compose(x, x0_hat, v), v
