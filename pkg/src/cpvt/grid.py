"""Token sequences that remember the 2-D grid they were flattened from."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError
from .tensor import Tensor, concat


@dataclass(frozen=True)
class TokenGrid:
    """``data`` is ``[B, N', C]``; when ``has_cls`` the first token is the class token
    and the remaining ``N = Hg * Wg`` tokens are patches in row-major order."""

    data: Tensor
    grid: tuple[int, int]
    has_cls: bool = False
    abs_pe_applied: bool = False

    def __post_init__(self):
        Hg, Wg = self.grid
        expected = Hg * Wg + (1 if self.has_cls else 0)
        if self.data.ndim != 3 or self.data.shape[1] != expected:
            raise ContractError(
                f"token count {self.data.shape[1] if self.data.ndim == 3 else self.data.shape} "
                f"does not match grid {Hg}x{Wg} (class token: {self.has_cls})"
            )

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    def patches(self) -> Tensor:
        return self.data[:, 1:] if self.has_cls else self.data

    def cls(self) -> Tensor | None:
        return self.data[:, :1] if self.has_cls else None

    def with_patches(self, patches: Tensor, **changes) -> "TokenGrid":
        data = concat([self.data[:, :1], patches], axis=1) if self.has_cls else patches
        return replace(self, data=data, **changes)

    def with_data(self, data: Tensor, **changes) -> "TokenGrid":
        return replace(self, data=data, **changes)


def tokens_to_image(x: Tensor, grid: tuple[int, int]) -> Tensor:
    """``[B, Hg*Wg, C]`` -> ``[B, C, Hg, Wg]`` (row-major token order)."""
    B, N, C = x.shape
    Hg, Wg = grid
    if N != Hg * Wg:
        raise ContractError(f"{N} tokens cannot form a {Hg}x{Wg} grid")
    return x.transpose(0, 2, 1).reshape(B, C, Hg, Wg)


def image_to_tokens(x: Tensor) -> Tensor:
    B, C, Hg, Wg = x.shape
    return x.reshape(B, C, Hg * Wg).transpose(0, 2, 1)


def roll_tokens(x: np.ndarray, grid: tuple[int, int], shift: tuple[int, int], has_cls: bool = False) -> np.ndarray:
    """Cyclically shift patch tokens of ``x[B, N', C]`` on their grid."""
    Hg, Wg = grid
    start = 1 if has_cls else 0
    patches = x[:, start:].reshape(x.shape[0], Hg, Wg, x.shape[2])
    rolled = np.roll(patches, shift, axis=(1, 2)).reshape(x.shape[0], Hg * Wg, x.shape[2])
    return np.concatenate([x[:, :start], rolled], axis=1) if has_cls else rolled


def grid_coords(grid: tuple[int, int]) -> np.ndarray:
    """``[N, 2]`` integer (row, col) of each token in row-major order."""
    Hg, Wg = grid
    rows, cols = np.divmod(np.arange(Hg * Wg), Wg)
    return np.stack([rows, cols], axis=1)
