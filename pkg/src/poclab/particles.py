from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-9


@dataclass
class ParticleSystem:
    """m neurons on the unit sphere of R^d with fixed second-layer weights."""

    weights: np.ndarray
    second_layer: np.ndarray | None = None

    def __post_init__(self):
        W = np.ascontiguousarray(self.weights, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] < 1:
            raise ValueError("weights must be an (m, d) array with m >= 1")
        if not np.all(np.isfinite(W)):
            raise FloatingPointError("non-finite particle weights")
        dev = np.max(np.abs(np.linalg.norm(W, axis=1) - 1.0))
        if dev > UNIT_TOL:
            raise ValueError(f"particle rows must be unit norm (max deviation {dev:.3e})")
        self.weights = W
        if self.second_layer is not None:
            b = np.ascontiguousarray(self.second_layer, dtype=np.float64)
            if b.shape != (W.shape[0],):
                raise ValueError("second_layer must have one entry per particle")
            self.second_layer = b

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.weights.shape[1]

    @property
    def b(self) -> np.ndarray:
        if self.second_layer is None:
            return np.ones(self.m)
        return self.second_layer

    def prefix(self, m: int) -> "ParticleSystem":
        if m > self.m:
            raise ValueError(f"prefix width {m} exceeds system width {self.m}")
        b = None if self.second_layer is None else self.second_layer[:m].copy()
        return ParticleSystem(self.weights[:m].copy(), b)

    def copy(self) -> "ParticleSystem":
        b = None if self.second_layer is None else self.second_layer.copy()
        return ParticleSystem(self.weights.copy(), b)

    def with_weights(self, W) -> "ParticleSystem":
        return ParticleSystem(W, self.second_layer)
