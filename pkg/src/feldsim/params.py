"""Flat parameter vectors with a named segment layout.

A ParamVector is a 1-D float64 array plus a layout that names disjoint
index ranges (one per layer weight/bias block). Model weights, update
deltas, and noise vectors all share this representation, so aggregation,
clipping, perturbation, and sparsification are plain vector arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Layout", "ParamVector"]


@dataclass(frozen=True)
class Layout:
    """Named, disjoint segments covering indices [0, dim)."""

    segments: tuple[tuple[str, int, int], ...]  # (name, start, stop)
    dim: int

    def __post_init__(self):
        covered = 0
        prev_stop = 0
        for name, start, stop in self.segments:
            if start != prev_stop or stop <= start:
                raise ValueError(f"segment {name!r} [{start}, {stop}) is not contiguous")
            covered += stop - start
            prev_stop = stop
        if covered != self.dim:
            raise ValueError(f"segments cover {covered} of {self.dim} coordinates")

    def range_of(self, name: str) -> tuple[int, int]:
        for seg_name, start, stop in self.segments:
            if seg_name == name:
                return start, stop
        raise KeyError(name)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _, _ in self.segments)


@dataclass(eq=False)
class ParamVector:
    """Flat model parameters or an update delta, with its layout."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.shape[0] != self.layout.dim:
            raise ValueError(
                f"values shape {self.values.shape} does not match layout dim {self.layout.dim}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains non-finite values")

    def segment(self, name: str) -> np.ndarray:
        start, stop = self.layout.range_of(name)
        return self.values[start:stop]

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        """New vector over the same layout."""
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(np.zeros(layout.dim), layout)

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check_layout(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check_layout(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.values * float(scalar), self.layout)

    __rmul__ = __mul__

    def _check_layout(self, other: "ParamVector") -> None:
        if other.layout != self.layout:
            raise ValueError("parameter vectors have different layouts")
