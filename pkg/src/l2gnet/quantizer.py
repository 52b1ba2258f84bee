"""Vector quantization: nearest-codebook lookup with straight-through gradients.

The codebook is trained through the quantization loss only; the selection
itself passes gradients straight through to the continuous features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Rng, Tensor, as_tensor, straight_through, take_rows


@dataclass
class Codebook:
    E: Parameter
    K: int
    dim: int

    @classmethod
    def create(cls, K, dim, rng, name="codebook"):
        if K < 2 or dim < 1:
            raise ValueError("codebook needs K >= 2 and dim >= 1")
        # VQ-VAE style init: uniform in [-1/K, 1/K]
        E = Parameter(rng.uniform(-1.0 / K, 1.0 / K, (K, dim)), name)
        return cls(E=E, K=K, dim=dim)

    def kmeans_warmstart(self, batch, rng, iters=25):
        """Re-seed codebook rows from k-means centroids of a feature batch."""
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        centers = _kmeans(data, self.K, rng, iters)
        self.E.data[...] = centers


@dataclass
class QuantizeResult:
    indices: np.ndarray   # int per input row
    z_dis: Tensor         # n x dim, straight-through node
    quant_loss: Tensor    # scalar


def quantize(z_con, codebook, beta=0.25, literal_loss=False):
    """Map each row of z_con to its nearest code (ties to the lowest index).

    The returned z_dis equals the gathered codebook rows in the forward pass
    and routes gradients straight through to z_con. quant_loss is the
    two-term stop-gradient objective (codebook term + beta * commitment);
    literal_loss=True instead uses the single squared-distance term with
    gradients to both sides.
    """
    z_con = as_tensor(z_con)
    if z_con.ndim != 2 or z_con.shape[0] == 0:
        raise ValueError("z_con must be a nonempty n x dim matrix")
    if z_con.shape[1] != codebook.dim:
        raise ValueError(
            f"feature dim {z_con.shape[1]} != codebook dim {codebook.dim}")

    d = _sqdist(z_con.data, codebook.E.data)
    indices = np.argmin(d, axis=1)  # argmin takes the first (lowest) index on ties
    z_dis = straight_through(z_con, codebook.E.data[indices])
    loss = quant_loss(z_con, codebook, indices, beta=beta,
                      literal_loss=literal_loss)
    return QuantizeResult(indices=indices, z_dis=z_dis, quant_loss=loss)


def quant_loss(z_con, codebook, indices, beta=0.25, literal_loss=False):
    z_con = as_tensor(z_con)
    e = take_rows(codebook.E, indices)
    if literal_loss:
        diff = z_con - e
        return (diff * diff).sum(axis=1).mean()
    d1 = z_con.detach() - e          # moves the codebook
    d2 = z_con - e.detach()          # commitment: moves the encoder
    return (d1 * d1).sum(axis=1).mean() + beta * (d2 * d2).sum(axis=1).mean()


def codebook_usage(indices, K):
    """Histogram of code usage; sums to len(indices)."""
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= K):
        raise ValueError("code index out of range")
    return np.bincount(indices, minlength=K)


def _sqdist(a, b):
    aa = np.sum(a ** 2, axis=1)[:, None]
    bb = np.sum(b ** 2, axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * a @ b.T, 0.0)


def _kmeans(data, k, rng, iters):
    n = data.shape[0]
    if n == 0:
        raise ValueError("empty batch for k-means")
    centers = data[rng.permutation(n)[:k]].copy()
    if centers.shape[0] < k:  # fewer points than centers: pad by resampling
        extra = data[rng.integers(0, n, k - centers.shape[0])]
        centers = np.vstack([centers, extra])
    for _ in range(iters):
        assign = np.argmin(_sqdist(data, centers), axis=1)
        for j in range(k):
            pts = data[assign == j]
            if len(pts):
                centers[j] = pts.mean(axis=0)
    return centers
