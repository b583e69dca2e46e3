"""Variable dependency model: temporal S4 embedding, learned per-interval
graphs, GIN message passing and a linear reconstruction head.

Shapes used throughout (batch axis B first):

    x          (B, K, L)
    H          (B, K, L, U)      temporal embedding
    E          (B, d, K, U)      interval node embeddings, d = L // g
    A          (B, d, K, K)      adjacency per interval
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .numerics import (
    Conv1x1,
    Linear,
    Module,
    Tensor,
    as_tensor,
    matmul,
    parameter,
    softmax_rows,
)
from .s4 import S4Layer

CONNECT_EPS = 1e-12


@dataclass(frozen=True)
class GraphHyper:
    g: int = 16
    delta: int = 3
    zeta: float = 0.5
    xi1: float = 0.1
    xi2: float = 0.1
    xi3: float = 0.1

    def check(self, K, L):
        if self.g < 1 or L % self.g:
            raise ConfigError(f"interval length g={self.g} must divide L={L}")
        if not 1 <= self.delta <= K - 1:
            raise ConfigError(f"delta={self.delta} must lie in 1..K-1 (K={K})")
        check_zeta(self.zeta)


def check_zeta(zeta):
    if not 0.0 <= zeta < 1.0:
        raise ConfigError(f"zeta must lie in [0, 1), got {zeta}")


# -- graph construction ----------------------------------------------------------


def interval_embed(H, g):
    """Average H over each run of g time stamps: (..., K, L, U) -> (..., d, K, U)."""
    H = as_tensor(H)
    *lead, K, L, U = H.shape
    if g < 1 or L % g:
        raise ConfigError(f"interval length g={g} must divide {L}")
    d = L // g
    E = H.reshape(*lead, K, d, g, U).mean(axis=-2)
    return E.swapaxes(-3, -2)


def attention_adjacency(E, W_q, W_r):
    """softmax(Q R^T / sqrt(U)) with Q = E W_q, R = E W_r, rows over neighbors."""
    E = as_tensor(E)
    U = E.shape[-1]
    Q = matmul(E, W_q)
    R = matmul(E, W_r)
    return softmax_rows(matmul(Q, R.swapaxes(-1, -2)) * (1.0 / math.sqrt(U)))


def knn_select(sim, delta):
    """0/1 mask of the top-delta off-diagonal entries per row.

    Ties go to the lower node index (stable sort).
    """
    sim = np.asarray(sim)
    K = sim.shape[-1]
    keyed = np.where(np.eye(K, dtype=bool), -np.inf, sim)
    order = np.argsort(-keyed, axis=-1, kind="stable")[..., :delta]
    mask = np.zeros(sim.shape)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask * ~np.eye(K, dtype=bool)


def cosine_similarity(E):
    """Pairwise cosine similarity of node rows; zero-norm rows give 0."""
    E = as_tensor(E)
    norm2 = (E * E).sum(axis=-1, keepdims=True)
    safe = np.where(norm2.data > 0, 1.0, 0.0)
    inv = (norm2 + (1.0 - safe)).sqrt()
    unit = E / inv * safe
    return matmul(unit, unit.swapaxes(-1, -2))


def knn_adjacency(E, delta):
    """Cosine-similarity graph keeping each node's delta strongest neighbors.

    Negative similarities are zeroed. The neighbor selection is treated as a
    constant; gradients flow through the kept similarity values.
    """
    sim = cosine_similarity(E)
    mask = knn_select(sim.data, delta)
    return sim.relu() * mask


def blend_adjacency(A_knn, A_att, zeta):
    check_zeta(zeta)
    return as_tensor(A_knn) * zeta + as_tensor(A_att) * (1.0 - zeta)


# -- regularizers ----------------------------------------------------------------------


def smoothness(E, A):
    """tr(E^T Lap E) / K^2 with the Laplacian of the symmetrized adjacency.

    Equals sum_{v,u} A[v,u] |e_v - e_u|^2 / (2 K^2), which is nonnegative for
    nonnegative A and vanishes for identical node embeddings.
    """
    E, A = as_tensor(E), as_tensor(A)
    K = E.shape[-2]
    sq = (E * E).sum(axis=-1)
    gram = matmul(E, E.swapaxes(-1, -2))
    dist = sq.expand_dims(-1) + sq.expand_dims(-2) - gram * 2.0
    return (A * dist).sum(axis=(-1, -2)) * (0.5 / (K * K))


def sparsity(A):
    A = as_tensor(A)
    K = A.shape[-1]
    return (A * A).sum(axis=(-1, -2)) * (1.0 / (K * K))


def connectivity(A):
    A = as_tensor(A)
    K = A.shape[-1]
    return (A.sum(axis=-1) + CONNECT_EPS).log().sum(axis=-1) * (-1.0 / K)


def graph_reg_loss(E, A, xi1, xi2, xi3):
    """Weighted smoothness + sparsity + connectivity, averaged over intervals
    (and any leading batch axes)."""
    per = smoothness(E, A) * xi1 + sparsity(A) * xi2 + connectivity(A) * xi3
    return per.mean()


# -- message passing --------------------------------------------------------------------


class MLP(Module):
    def __init__(self, n_in, hidden, n_out, rng):
        self.l1 = Linear(n_in, hidden, rng)
        self.l2 = Linear(hidden, n_out, rng)

    def forward(self, x):
        return self.l2(self.l1(x).relu())


class GINLayer(Module):
    """h_v <- MLP((1 + eps) h_v + sum_u A[v, u] h_u) per time stamp.

    ``mlp=None`` makes the update the identity (useful for inspection).
    """

    def __init__(self, U, hidden, rng, mlp=True):
        self.eps = parameter(np.zeros(1))
        self.mlp = MLP(U, hidden, U, rng) if mlp else None

    def forward(self, Hm, A):
        Hm, A = as_tensor(Hm), as_tensor(A)
        *lead, K, g, U = Hm.shape
        if A.shape[-2:] != (K, K):
            raise ShapeError(f"adjacency {A.shape} does not match {K} nodes")
        flat = Hm.reshape(*lead, K, g * U)
        agg = matmul(A, flat)
        h = (flat * (self.eps + 1.0) + agg).reshape(*lead, K, g, U)
        return self.mlp(h) if self.mlp is not None else h


class GIN(Module):
    def __init__(self, U, hidden, layers, rng):
        self.layers = [GINLayer(U, hidden, rng) for _ in range(layers)]

    def forward(self, Hm, A):
        h = Hm
        for i, layer in enumerate(self.layers):
            h = layer(h, A)
            if i < len(self.layers) - 1:
                h = h.relu()
        return h


def gin_forward(Hm, A, gin):
    """Message passing over one interval's time stamps sharing adjacency A."""
    return gin(Hm, A)


# -- reconstruction and losses ---------------------------------------------------------


def recon_loss(x0_hat, x_rec):
    """Mean squared error over all K*L cells (and batch)."""
    x_rec = as_tensor(x_rec)
    if x_rec.shape != np.shape(x0_hat):
        raise ShapeError(f"reconstruction {x_rec.shape} != target {np.shape(x0_hat)}")
    d = x_rec - x0_hat
    return (d * d).mean()


def total_loss(noise, graph, recon):
    for name, term in (("noise", noise), ("graph", graph), ("recon", recon)):
        value = term.data if isinstance(term, Tensor) else np.asarray(term)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"{name} loss is not finite")
    return as_tensor(noise) + graph + recon


class TemporalEmbedder(Module):
    """Per-variable S4 stack: (B, K, L) -> H (B, K, L, U).

    The S4 layers run at ``width`` channels; a 1x1 projection maps to U when
    the two differ.
    """

    def __init__(self, U, layers, state_size, rng, width=None):
        self.U = U
        width = width or U
        self.lift = Conv1x1(1, width, rng)
        self.layers = [S4Layer(width, state_size, rng) for _ in range(layers)]
        self.proj = Conv1x1(width, U, rng) if width != U else None

    def forward(self, x):
        x = as_tensor(x)
        B, K, L = x.shape
        h = self.lift(x.reshape(B * K, 1, L))
        for layer in self.layers:
            h = layer(h)
        if self.proj is not None:
            h = self.proj(h)
        return h.reshape(B, K, self.U, L).swapaxes(-1, -2)


class GraphModel(Module):
    """Time-then-graph reconstructor."""

    def __init__(self, K, rng, hyper=GraphHyper(), embed_dim=32, s4_layers=2,
                 state_size=32, gin_layers=2, gin_hidden=64, width=None):
        self.K = K
        self.hyper = hyper
        U = embed_dim
        self.embed = TemporalEmbedder(U, s4_layers, state_size, rng, width=width)
        s = 1.0 / math.sqrt(U)
        self.W_q = parameter(rng.normal(0.0, s, size=(U, U)))
        self.W_r = parameter(rng.normal(0.0, s, size=(U, U)))
        self.gin = GIN(U, gin_hidden, gin_layers, rng)
        self.head = Linear(U, 1, rng)

    def adjacency(self, E):
        hp = self.hyper
        A_att = attention_adjacency(E, self.W_q, self.W_r)
        A_knn = knn_adjacency(E, hp.delta)
        return blend_adjacency(A_knn, A_att, hp.zeta)

    def forward(self, x):
        """Returns (reconstruction (B, K, L), graph regularizer, E, A)."""
        x = as_tensor(x)
        B, K, L = x.shape
        hp = self.hyper
        hp.check(K, L)
        H = self.embed(x)
        E = interval_embed(H, hp.g)
        A = self.adjacency(E)
        reg = graph_reg_loss(E, A, hp.xi1, hp.xi2, hp.xi3)
        d = L // hp.g
        U = H.shape[-1]
        Hm = H.reshape(B, K, d, hp.g, U).swapaxes(1, 2)  # (B, d, K, g, U)
        Z = self.gin(Hm, A).swapaxes(1, 2).reshape(B, K, L, U)
        x_rec = self.head(Z).reshape(B, K, L)
        return x_rec, reg, E, A


def adjacency_rows(A, observation_id=0):
    """Flatten (d, K, K) adjacencies into CSV-ready rows (obs, interval, src, dst, w)."""
    A = np.asarray(A)
    rows = []
    for m in range(A.shape[0]):
        for v in range(A.shape[1]):
            for u in range(A.shape[2]):
                rows.append((observation_id, m, v, u, float(A[m, v, u])))
    return rows
