"""Homogeneous residual batches with Jacobians, tagged by energy term."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ResidualBlock:
    """Stacked residual vector with dense Jacobian rows against the pose.

    row_weight scales individual rows inside the normal equations; the
    per-term weight (collision gamma_c) is applied by the solver, not here.
    """

    term: str                       # "m2d" | "d2m" | "salient" | "collision"
    r: np.ndarray                   # (R,)
    J: np.ndarray                   # (R, D)
    row_weight: np.ndarray = None   # (R,), defaults to ones

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float).ravel()
        self.J = np.asarray(self.J, dtype=float)
        if self.J.ndim != 2 or self.J.shape[0] != self.r.shape[0]:
            raise ValueError("Jacobian row count must equal residual length")
        if self.row_weight is None:
            self.row_weight = np.ones(len(self.r))
        else:
            self.row_weight = np.asarray(self.row_weight, dtype=float).ravel()
            if self.row_weight.shape != self.r.shape:
                raise ValueError("row_weight length must equal residual length")

    def __len__(self) -> int:
        return len(self.r)

    @property
    def energy(self) -> float:
        """Unweighted term energy sum(w * r^2)."""
        return float(np.sum(self.row_weight * self.r ** 2))


def empty_block(term: str, num_dof: int) -> ResidualBlock:
    return ResidualBlock(term, np.zeros(0), np.zeros((0, num_dof)))


def stack_blocks(blocks: list[ResidualBlock]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Concatenate residuals, Jacobians, and row weights of nonempty blocks."""
    keep = [b for b in blocks if len(b)]
    if not keep:
        raise ValueError("no residual rows to stack")
    r = np.concatenate([b.r for b in keep])
    J = np.concatenate([b.J for b in keep], axis=0)
    w = np.concatenate([b.row_weight for b in keep])
    return r, J, w
