"""Permutation-invariant point-set encoder (per-point affine, max-pool, MLP, L2 norm)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyCloud, NearZeroNorm

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass
class PointEncoder:
    w1: np.ndarray  # H x 3
    b1: np.ndarray  # H
    w2: np.ndarray  # H x H
    b2: np.ndarray  # H
    w3: np.ndarray  # D x H
    b3: np.ndarray  # D

    @classmethod
    def init(cls, hidden: int, out_dim: int, rng: np.random.Generator) -> "PointEncoder":
        """He-normal weights, zero biases."""
        return cls(
            w1=rng.standard_normal((hidden, 3)) * np.sqrt(2.0 / 3),
            b1=np.zeros(hidden),
            w2=rng.standard_normal((hidden, hidden)) * np.sqrt(2.0 / hidden),
            b2=np.zeros(hidden),
            w3=rng.standard_normal((out_dim, hidden)) * np.sqrt(2.0 / hidden),
            b3=np.zeros(out_dim),
        )

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w3.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "PointEncoder":
        return PointEncoder(**{k: v.copy() for k, v in self.params().items()})

    def forward(self, clouds: np.ndarray):
        """Encode a ``B x M x 3`` stack of clouds; returns ``(embeddings, cache)``."""
        clouds = np.asarray(clouds, dtype=np.float64)
        if clouds.ndim != 3 or clouds.shape[2] != 3:
            raise ValueError(f"expected B x M x 3 clouds, got {clouds.shape}")
        if clouds.shape[1] == 0:
            raise EmptyCloud("point cloud has no points")
        per_point = np.einsum("bmk,hk->bmh", clouds, self.w1) + self.b1
        arg = per_point.argmax(axis=1)  # B x H
        pooled = np.take_along_axis(per_point, arg[:, None, :], axis=1)[:, 0, :]
        hidden_pre = pooled @ self.w2.T + self.b2
        hidden = np.maximum(hidden_pre, 0.0)
        raw = hidden @ self.w3.T + self.b3
        norm = np.sqrt(np.einsum("bd,bd->b", raw, raw))
        if np.any(~(norm > 1e-12)):
            raise NearZeroNorm("encoder produced a near-zero embedding")
        out = raw / norm[:, None]
        cache = (clouds, arg, pooled, hidden_pre, hidden, norm, out)
        return out, cache

    def backward(self, grad_out: np.ndarray, cache) -> dict[str, np.ndarray]:
        """Parameter gradients given ``dL/d(embeddings)``."""
        clouds, arg, pooled, hidden_pre, hidden, norm, out = cache
        g_raw = (grad_out - out * np.einsum("bd,bd->b", out, grad_out)[:, None]) / norm[:, None]
        g_w3 = g_raw.T @ hidden
        g_b3 = g_raw.sum(axis=0)
        g_hidden_pre = (g_raw @ self.w3) * (hidden_pre > 0)
        g_w2 = g_hidden_pre.T @ pooled
        g_b2 = g_hidden_pre.sum(axis=0)
        g_pooled = g_hidden_pre @ self.w2  # B x H
        # only the arg-max point of each hidden unit receives gradient
        winners = np.take_along_axis(clouds, arg[:, :, None], axis=1)  # B x H x 3
        g_w1 = np.einsum("bh,bhk->hk", g_pooled, winners)
        g_b1 = g_pooled.sum(axis=0)
        return {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2, "w3": g_w3, "b3": g_b3}

    def encode(self, clouds: np.ndarray) -> np.ndarray:
        return self.forward(clouds)[0]


def encode_points(cloud, encoder: PointEncoder) -> np.ndarray:
    """Unit-norm embedding of a single ``M x 3`` cloud."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise ValueError(f"expected an M x 3 cloud, got {cloud.shape}")
    if cloud.shape[0] == 0:
        raise EmptyCloud("point cloud has no points")
    return encoder.encode(cloud[None])[0]
