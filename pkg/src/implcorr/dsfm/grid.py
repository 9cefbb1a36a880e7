"""Evaluation grid on the unit square with trapezoid quadrature."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    """Trapezoid weights normalised to sum to one over ``nodes``."""
    gaps = np.diff(nodes)
    w = np.zeros_like(nodes, dtype=float)
    w[:-1] += 0.5 * gaps
    w[1:] += 0.5 * gaps
    return w / w.sum()


@dataclass(frozen=True, eq=False)
class Grid2D:
    u_nodes: np.ndarray
    v_nodes: np.ndarray

    def __post_init__(self):
        for name in ("u_nodes", "v_nodes"):
            nodes = np.asarray(getattr(self, name), float)
            if nodes.ndim != 1 or nodes.size < 2:
                raise ValueError(f"{name} needs at least two nodes")
            if np.any(np.diff(nodes) <= 0):
                raise ValueError(f"{name} must be strictly increasing")
            if nodes[0] < 0 or nodes[-1] > 1:
                raise ValueError(f"{name} must lie in [0, 1]")
            object.__setattr__(self, name, nodes)

    @classmethod
    def regular(cls, g1: int = 25, g2: int = 25) -> "Grid2D":
        return cls(np.linspace(0.0, 1.0, g1), np.linspace(0.0, 1.0, g2))

    @property
    def shape(self) -> tuple[int, int]:
        return self.u_nodes.size, self.v_nodes.size

    @property
    def size(self) -> int:
        return self.u_nodes.size * self.v_nodes.size

    @property
    def quadrature_weights(self) -> tuple[np.ndarray, np.ndarray]:
        return trapezoid_weights(self.u_nodes), trapezoid_weights(self.v_nodes)

    @property
    def node_weights(self) -> np.ndarray:
        """Product quadrature weight per node, flattened row-major."""
        wu, wv = self.quadrature_weights
        return np.outer(wu, wv).ravel()

    @property
    def points(self) -> np.ndarray:
        """All nodes as an (G1*G2, 2) array, row-major."""
        uu, vv = np.meshgrid(self.u_nodes, self.v_nodes, indexing="ij")
        return np.column_stack([uu.ravel(), vv.ravel()])

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        """Quadrature inner product of two surfaces sampled on the grid."""
        return float(np.sum(self.node_weights * np.ravel(f) * np.ravel(g)))

    def interpolate(self, surfaces: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Bilinear interpolation of one surface (G1, G2) or a stack (L, G1, G2) at points ``X``.

        Returns shape (n,) for a single surface and (n, L) for a stack.
        """
        X = np.asarray(X, float).reshape(-1, 2)
        surfaces = np.asarray(surfaces, float)
        single = surfaces.ndim == 2
        stack = surfaces[None] if single else surfaces
        if stack.shape[1:] != self.shape:
            raise ValueError(f"surface shape {stack.shape[1:]} does not match grid {self.shape}")
        lo_u, hi_u = self.u_nodes[0], self.u_nodes[-1]
        lo_v, hi_v = self.v_nodes[0], self.v_nodes[-1]
        if np.any((X[:, 0] < lo_u) | (X[:, 0] > hi_u) | (X[:, 1] < lo_v) | (X[:, 1] > hi_v)):
            raise ValueError("interpolation point outside the grid")
        i = np.clip(np.searchsorted(self.u_nodes, X[:, 0], side="right") - 1, 0, self.shape[0] - 2)
        k = np.clip(np.searchsorted(self.v_nodes, X[:, 1], side="right") - 1, 0, self.shape[1] - 2)
        a = (X[:, 0] - self.u_nodes[i]) / (self.u_nodes[i + 1] - self.u_nodes[i])
        b = (X[:, 1] - self.v_nodes[k]) / (self.v_nodes[k + 1] - self.v_nodes[k])
        out = ((1 - a) * (1 - b) * stack[:, i, k] + a * (1 - b) * stack[:, i + 1, k]
               + (1 - a) * b * stack[:, i, k + 1] + a * b * stack[:, i + 1, k + 1])
        return out[0] if single else out.T

    def to_dict(self) -> dict:
        return {"u_nodes": self.u_nodes.tolist(), "v_nodes": self.v_nodes.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid2D":
        return cls(np.asarray(d["u_nodes"], float), np.asarray(d["v_nodes"], float))
