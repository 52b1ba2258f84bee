"""Local-to-global pooling of discrete codes onto learnable references.

Codes are embedded into a kernel feature space via a Nystrom approximation,
softly aligned to each reference by entropic optimal transport, weighted by a
positional proximity matrix, and pooled into the reference bins. Multiple
references are concatenated with a 1/sqrt(q) factor, analogous to attention
heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Parameter, Rng, Tensor, as_tensor, concat,
                       inv_sqrt_psd, max_abs, pairwise_sqdist)
from .quantizer import _kmeans
from .sinkhorn import OtProblem, TransportPlan, sinkhorn_solve, uniform_marginals


@dataclass
class NystromEmbedding:
    """Anchor set and Gaussian-kernel bandwidth for the explicit embedding.

    psi(z) = kappa(z, w) @ kappa(w, w)^(-1/2); the Gram inverse square root
    is computed through a regularized eigendecomposition (floor 1e-6) on
    every forward pass so anchor updates are always reflected.
    """

    anchors: Parameter            # k_a x dim
    sigma_k: Parameter            # scalar bandwidth, trainable
    eig_floor: float = 1e-6

    @classmethod
    def create(cls, k_a, dim, rng, sigma_k=1.0, name="nystrom"):
        w = Parameter(rng.normal((k_a, dim)), f"{name}.anchors")
        s = Parameter(np.array(float(sigma_k)), f"{name}.sigma_k")
        return cls(anchors=w, sigma_k=s)

    @classmethod
    def from_batch(cls, batch, k_a, rng, name="nystrom"):
        """Anchors sampled from a feature batch, bandwidth set by the median
        pairwise-distance heuristic."""
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        n = data.shape[0]
        sel = rng.permutation(n)[:k_a]
        if len(sel) < k_a:
            sel = np.concatenate([sel, rng.integers(0, n, k_a - len(sel))])
        w = Parameter(data[sel].copy(), f"{name}.anchors")
        d = np.sqrt(np.maximum(_all_sqdists(data), 1e-30))
        med = float(np.median(d[np.triu_indices(n, k=1)])) if n > 1 else 1.0
        s = Parameter(np.array(max(med, 1e-3)), f"{name}.sigma_k")
        return cls(anchors=w, sigma_k=s)

    def parameters(self):
        return [self.anchors, self.sigma_k]


def _all_sqdists(a):
    aa = np.sum(a ** 2, axis=1)
    return np.maximum(aa[:, None] + aa[None, :] - 2.0 * a @ a.T, 0.0)


def gaussian_kernel(a, b, sigma_k):
    """kappa(x, y) = exp(-||x - y||^2 / (2 sigma_k^2)), differentiable in all
    three arguments."""
    d = pairwise_sqdist(a, b)
    inv = sigma_k ** -2.0
    return (d * inv * (-0.5)).exp()


def nystrom_embed(z, emb):
    """psi(z) = kappa(z, w) kappa(w, w)^(-1/2), rows of length k_a."""
    z = as_tensor(z)
    if z.shape[1] != emb.anchors.shape[1]:
        raise ValueError(
            f"feature dim {z.shape[1]} != anchor dim {emb.anchors.shape[1]}")
    gram = gaussian_kernel(emb.anchors, emb.anchors, emb.sigma_k)
    gram_inv_sqrt = inv_sqrt_psd(gram, emb.eig_floor)
    return gaussian_kernel(z, emb.anchors, emb.sigma_k) @ gram_inv_sqrt


def position_weights(n, t, sigma_pos):
    """S[i, j] = exp(-((i/n - j/t)^2) / sigma_pos^2) with 1-based i, j."""
    if n < 1 or t < 1 or sigma_pos <= 0:
        raise ValueError("need n, t >= 1 and sigma_pos > 0")
    i = np.arange(1, n + 1)[:, None] / n
    j = np.arange(1, t + 1)[None, :] / t
    return np.exp(-((i - j) ** 2) / sigma_pos ** 2)


def ot_align(psi_z, z_ref, epsilon, iterations):
    """Transport plan between embedded codes and a reference.

    Cost is the negative inner product, normalized by its largest absolute
    entry so epsilon is scale-free; the normalization is on the tape, so
    gradients see it too. Marginals are uniform.
    """
    psi_z, z_ref = as_tensor(psi_z), as_tensor(z_ref)
    if psi_z.shape[1] != z_ref.shape[1]:
        raise ValueError(
            f"embedding dim {psi_z.shape[1]} != reference dim {z_ref.shape[1]}")
    cost = materialize_cost(psi_z, z_ref)
    a, b = uniform_marginals(psi_z.shape[0], z_ref.shape[0])
    return sinkhorn_solve(OtProblem(cost=cost, a=a, b=b, epsilon=epsilon,
                                    iterations=iterations))


def materialize_cost(psi_z, z_ref):
    psi_z, z_ref = as_tensor(psi_z), as_tensor(z_ref)
    cost = -(psi_z @ z_ref.T)
    scale = max_abs(cost)
    if float(scale.data) > 0:
        cost = cost / scale
    return cost


@dataclass
class ReferenceSet:
    references: list                  # q Parameters, each t x k_a
    t: int
    q: int
    sigma_pos: float = 0.3
    epsilon: float = 0.1
    iterations: int = 10

    def __post_init__(self):
        if self.q < 1 or self.t < 1:
            raise ValueError("need q >= 1 and t >= 1")
        for r in self.references:
            if r.shape != (self.t, self.references[0].shape[1]):
                raise ValueError("all references must share t and k_a")

    def parameters(self):
        return list(self.references)


def init_references(strategy, rng, t, k_a, q, sigma_pos=0.3, epsilon=0.1,
                    iterations=10, warmup_batch=None, name="refs"):
    """Build a ReferenceSet.

    random-unit: rows drawn from a seeded Gaussian, normalized to unit length.
    kmeans-warmstart: per-reference k-means centroids of an embedded batch,
    each reference using a distinct k-means seed.
    """
    refs = []
    if strategy == "random-unit":
        for i in range(q):
            rows = rng.normal((t, k_a))
            rows /= np.linalg.norm(rows, axis=1, keepdims=True)
            refs.append(Parameter(rows, f"{name}.{i}"))
    elif strategy == "kmeans-warmstart":
        if warmup_batch is None or (
                warmup_batch.shape[0] if hasattr(warmup_batch, "shape") else 0) == 0:
            raise ValueError("kmeans-warmstart needs a nonempty warmup batch")
        data = warmup_batch.data if isinstance(warmup_batch, Tensor) \
            else np.asarray(warmup_batch)
        for i in range(q):
            centers = _kmeans(data, t, rng.spawn(i + 1), iters=25)
            refs.append(Parameter(centers, f"{name}.{i}"))
    else:
        raise ValueError(f"unknown init strategy '{strategy}'")
    return ReferenceSet(references=refs, t=t, q=q, sigma_pos=sigma_pos,
                        epsilon=epsilon, iterations=iterations)


def embed_single_ref(z_dis, ref, emb, sigma_pos, epsilon, iterations,
                     psi=None):
    """sqrt(t) * (T .* S)^T psi(z_dis): pooled bins for one reference."""
    if psi is None:
        psi = nystrom_embed(z_dis, emb)
    ref = as_tensor(ref)
    n, t = psi.shape[0], ref.shape[0]
    plan = ot_align(psi, ref, epsilon, iterations)
    S = position_weights(n, t, sigma_pos)
    weighted = plan.T * Tensor(S)
    return (weighted.transpose() @ psi) * np.sqrt(t)


def embed_multi_ref(z_dis, refs, emb):
    """Concatenation of per-reference embeddings scaled by 1/sqrt(q)."""
    psi = nystrom_embed(z_dis, emb)
    blocks = [embed_single_ref(z_dis, r, emb, refs.sigma_pos, refs.epsilon,
                               refs.iterations, psi=psi)
              for r in refs.references]
    return concat(blocks, axis=0) * (1.0 / np.sqrt(refs.q))
