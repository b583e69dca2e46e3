"""Diagonal state-space sequence layers.

Two evaluation paths exist for the same linear system:

* ``SSMCore`` with ``discretize``/``kernel``/``apply_conv``/``apply_recurrent``
  is a plain numpy (complex) reference used for checking and inspection.
* ``S4Layer`` recomputes the kernel from its raw parameters with autodiff
  tensors so every parameter receives a gradient.

The state matrix is diagonal (one complex eigenvalue per state), so the
bilinear discretization and kernel powers are elementwise.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .numerics import (
    Conv1x1,
    LayerNorm,
    Module,
    Tensor,
    atan2,
    causal_conv,
    parameter,
)

_kernel_cache = None


@contextlib.contextmanager
def cached_kernels():
    """Reuse materialized kernels inside the block.

    Parameters must not change inside the block; one training step (several
    forward passes, one backward) or one inference sweep qualifies.
    """
    global _kernel_cache
    outer = _kernel_cache
    if outer is None:
        _kernel_cache = {}
    try:
        yield
    finally:
        if outer is None:
            _kernel_cache = None


def hippo_diag_init(state_size):
    """Diagonal surrogate of the HiPPO spectrum: A_n = -1/2 + i*pi*n, B_n = 1."""
    n = np.arange(state_size)
    A = -0.5 + 1j * np.pi * n
    B = np.ones(state_size, dtype=np.complex128)
    return A, B


@dataclass
class SSMCore:
    """One channel's continuous-time system (possibly batched over leading axes).

    ``A``, ``B``, ``C`` have the state axis last; ``D`` and ``log_dt`` broadcast
    against the leading axes.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float | np.ndarray = 0.0
    log_dt: float | np.ndarray = float(np.log(0.01))

    @property
    def dt(self):
        return np.exp(self.log_dt)


def discretize(core: SSMCore):
    """Bilinear transform; returns (A_bar, B_bar, C_bar)."""
    dt = np.asarray(core.dt)[..., None]
    A = np.asarray(core.A, dtype=np.complex128)
    den = 1.0 - dt / 2.0 * A
    if np.any(np.abs(den) == 0):
        raise NumericError("singular bilinear transform: 1 - dt/2*A has a zero")
    A_bar = (1.0 + dt / 2.0 * A) / den
    B_bar = dt * np.asarray(core.B, dtype=np.complex128) / den
    return A_bar, B_bar, np.asarray(core.C, dtype=np.complex128)


def kernel(core: SSMCore, L):
    """Convolution kernel O_k = Re(C_bar . A_bar^k . B_bar), k = 0..L-1."""
    A_bar, B_bar, C_bar = discretize(core)
    k = np.arange(L)
    powers = A_bar[..., None] ** k  # (..., N, L)
    out = np.einsum("...n,...nl->...l", C_bar * B_bar, powers).real
    if not np.all(np.isfinite(out)):
        raise NumericError("SSM kernel overflowed; the discretized system is unstable")
    return out


def apply_conv(core: SSMCore, x, K=None):
    """Causal convolution of ``x`` (..., L) with the kernel plus the D skip."""
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[-1]
    if K is None:
        K = kernel(core, L)
    if K.shape[-1] != L:
        raise ShapeError(f"kernel length {K.shape[-1]} != input length {L}")
    y = np.zeros(np.broadcast_shapes(x.shape, K.shape))
    for j in range(L):
        y[..., j:] += K[..., j:j + 1] * x[..., :L - j]
    return y + np.asarray(core.D)[..., None] * x


def apply_recurrent(core: SSMCore, x):
    """Step the discrete recurrence h <- A_bar h + B_bar x_k; y_k = Re(C_bar h) + D x_k."""
    x = np.asarray(x, dtype=np.float64)
    A_bar, B_bar, C_bar = discretize(core)
    D = np.asarray(core.D)
    L = x.shape[-1]
    h = np.zeros(np.broadcast_shapes(x.shape[:-1] + (1,), A_bar.shape), dtype=np.complex128)
    y = np.empty(np.broadcast_shapes(x.shape, A_bar.shape[:-1] + (L,)))
    for k in range(L):
        xk = x[..., k]
        h = A_bar * h + B_bar * xk[..., None]
        y[..., k] = (h * C_bar).sum(axis=-1).real + D * xk
    return y


# -- differentiable layer ---------------------------------------------------------


def _powers(lz, L, block=16):
    """exp(lz * k) for k = 0..L-1, as an outer product of two short tables."""
    n_hi = -(-L // block)
    lo = np.exp(lz[..., None] * np.arange(block))
    hi = np.exp(lz[..., None] * (block * np.arange(n_hi)))
    Z = (hi[..., :, None] * lo[..., None, :]).reshape(lz.shape + (n_hi * block,))
    return Z[..., :L]


def vandermonde_kernel(log_mag, angle, w_re, w_im, L):
    """Re(sum_n w_n z_n^k) for k = 0..L-1 with log z_n = log_mag_n + i*angle_n.

    All inputs have shape (H, N); the result is (H, L).
    """
    lz = log_mag.data + 1j * angle.data
    w = w_re.data + 1j * w_im.data
    k = np.arange(L, dtype=np.float64)
    Z = _powers(lz, L)  # (H, N, L)
    out = np.einsum("hn,hnl->hl", w, Z).real
    if not np.all(np.isfinite(out)):
        raise NumericError("SSM kernel overflowed; the discretized system is unstable")

    def backward(g):
        zg = np.einsum("hnl,hl->hn", Z, g)
        wp = w * np.einsum("hnl,hl->hn", Z, g * k)
        return wp.real, -wp.imag, zg.real, -zg.imag

    return Tensor._make(out, (log_mag, angle, w_re, w_im), backward, "vandermonde_kernel")



class SSMKernel(Module):
    """Learnable diagonal SSMs, one per channel, yielding an (H, L) kernel."""

    def __init__(self, channels, state_size, rng, dt_min=1e-3, dt_max=1e-1):
        A, B = hippo_diag_init(state_size)
        H, N = channels, state_size
        self.log_dt = parameter(rng.uniform(np.log(dt_min), np.log(dt_max), size=(H, 1)))
        # real part kept negative through -exp(.)
        self.log_neg_a_re = parameter(np.broadcast_to(np.log(-A.real), (H, N)).copy())
        self.a_im = parameter(np.broadcast_to(A.imag, (H, N)).copy())
        self.b_re = parameter(np.broadcast_to(B.real, (H, N)).copy())
        self.b_im = parameter(np.zeros((H, N)))
        scale = np.sqrt(0.5 / N)
        self.c_re = parameter(rng.normal(0.0, scale, size=(H, N)))
        self.c_im = parameter(rng.normal(0.0, scale, size=(H, N)))
        self.D = parameter(rng.normal(0.0, 1.0, size=(H, 1)))

    def core(self):
        """Current parameters as a numpy ``SSMCore`` batched over channels."""
        return SSMCore(
            A=-np.exp(self.log_neg_a_re.data) + 1j * self.a_im.data,
            B=self.b_re.data + 1j * self.b_im.data,
            C=self.c_re.data + 1j * self.c_im.data,
            D=self.D.data[:, 0],
            log_dt=self.log_dt.data[:, 0],
        )

    def forward(self, L):
        if _kernel_cache is not None:
            key = (id(self), L)
            if key not in _kernel_cache:
                _kernel_cache[key] = self._materialize(L)
            return _kernel_cache[key]
        return self._materialize(L)

    def _materialize(self, L):
        dt = self.log_dt.exp()
        hr = dt * -self.log_neg_a_re.exp() * 0.5
        hi = dt * self.a_im * 0.5
        nr, dr = 1.0 + hr, 1.0 - hr
        # log(A_bar) = log(1 + dt A/2) - log(1 - dt A/2)
        mag2_den = dr * dr + hi * hi
        log_mag = ((nr * nr + hi * hi).log() - mag2_den.log()) * 0.5
        angle = atan2(hi, nr) - atan2(-hi, dr)
        # B_bar = dt * B / (1 - dt A/2) = dt * B * conj(den) / |den|^2, conj(den) = dr + i hi
        s = dt / mag2_den
        bb_re = (self.b_re * dr - self.b_im * hi) * s
        bb_im = (self.b_re * hi + self.b_im * dr) * s
        w_re = self.c_re * bb_re - self.c_im * bb_im
        w_im = self.c_re * bb_im + self.c_im * bb_re
        return vandermonde_kernel(log_mag, angle, w_re, w_im, L)


class S4Layer(Module):
    """Sequence-to-sequence block on channel-first inputs (..., H, L).

    pre-mix -> per-channel SSM conv (+D skip) -> SiLU -> post-mix + GLU ->
    residual -> layer norm over channels.

    With ``bidirectional`` a second kernel runs over the time-reversed input
    and its output is flipped back and added, so every position sees both
    past and future context. Each convolution on its own stays causal.
    """

    def __init__(self, channels, state_size, rng, zero_out=False, bidirectional=False):
        self.channels = channels
        self.bidirectional = bidirectional
        self.pre = Conv1x1(channels, channels, rng)
        self.ssm = SSMKernel(channels, state_size, rng)
        self.ssm_rev = SSMKernel(channels, state_size, rng) if bidirectional else None
        self.post = Conv1x1(channels, 2 * channels, rng, zero=zero_out)
        self.norm = LayerNorm(channels, axis=-2)

    def forward(self, x):
        if x.shape[-2] != self.channels:
            raise ShapeError(f"S4Layer expects {self.channels} channels, got shape {x.shape}")
        L = x.shape[-1]
        u = self.pre(x)
        y = causal_conv(u, self.ssm(L)) + self.ssm.D * u
        if self.bidirectional:
            y = y + causal_conv(u[..., ::-1], self.ssm_rev(L))[..., ::-1]
        z = self.post(y.silu())
        H = self.channels
        gated = z[..., :H, :] * z[..., H:, :].sigmoid()
        return self.norm(x + gated)
