"""Dense optical flow fields with validity masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class FlowField:
    """Per-pixel displacement (u right, v down) in pixels, plus a validity mask.

    ``u`` and ``v`` are float32 arrays of shape (H, W); ``valid`` is a boolean
    array of the same shape. Values at invalid pixels carry no meaning.
    """

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError(f"u/v must be matching 2D arrays, got {self.u.shape} and {self.v.shape}")
        if self.valid is None:
            self.valid = np.ones(self.u.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.u.shape:
                raise ValueError(f"valid mask shape {self.valid.shape} != flow shape {self.u.shape}")
        if not np.all(np.isfinite(self.u[self.valid])) or not np.all(np.isfinite(self.v[self.valid])):
            raise ValueError("flow contains non-finite values at valid pixels")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def uv(self) -> np.ndarray:
        """Stacked (2, H, W) array with u first."""
        return np.stack([self.u, self.v])

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.u**2 + self.v**2)

    @classmethod
    def from_uv(cls, uv: np.ndarray, valid: np.ndarray | None = None) -> "FlowField":
        uv = np.asarray(uv)
        if uv.ndim != 3 or uv.shape[0] != 2:
            raise ValueError(f"expected (2, H, W) array, got {uv.shape}")
        return cls(uv[0], uv[1], valid)

    @classmethod
    def constant(cls, u: float, v: float, shape: tuple[int, int]) -> "FlowField":
        h, w = shape
        return cls(np.full((h, w), u, np.float32), np.full((h, w), v, np.float32))
