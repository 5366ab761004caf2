"""Observation windows, regular grids, and dyadic binary partitions of [0,1]^d.

The partition tree splits one axis per level (axis ``(level-1) % d``) at the
bin midpoint, so every level-l bin is a product of dyadic intervals.  Bins are
half-open except on the faces touching coordinate 1, which keeps point
location total on [0,1]^d.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Hard cap on total tree nodes (sum over levels of 2^l); memory safety.
MAX_TREE_NODES = 2**24


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Window:
    """Cube observation window of volume n centred at the origin."""

    dim_D: int
    volume_n: float

    def __post_init__(self):
        if self.dim_D < 1:
            raise GeometryError("window dimension must be >= 1")
        if not self.volume_n > 0:
            raise GeometryError("window volume must be positive")

    @property
    def side(self) -> float:
        return self.volume_n ** (1.0 / self.dim_D)

    @property
    def half_side(self) -> float:
        return 0.5 * self.side


@dataclass(frozen=True)
class Grid:
    """Regular grid over a window; cells indexed in C order over the axes."""

    window: Window
    cells_per_axis: int

    def __post_init__(self):
        if self.cells_per_axis < 1:
            raise GeometryError("cells_per_axis must be >= 1")

    @property
    def total_cells(self) -> int:
        return self.cells_per_axis ** self.window.dim_D

    @property
    def spacing(self) -> float:
        return self.window.side / self.cells_per_axis

    @property
    def cell_volume(self) -> float:
        return self.window.volume_n / self.total_cells

    def axis_centers(self) -> np.ndarray:
        m = self.cells_per_axis
        return (-self.window.half_side
                + (np.arange(m) + 0.5) * self.spacing)

    def cell_centers(self) -> np.ndarray:
        """(total_cells, D) array of cell centre coordinates."""
        axes = [self.axis_centers()] * self.window.dim_D
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def cell_index_of(self, points: np.ndarray) -> np.ndarray:
        """Flat cell index for each point (shape (k, D)); points must lie
        inside the window (boundary points snap inward)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        h = self.window.half_side
        if np.any(pts < -h - 1e-12) or np.any(pts > h + 1e-12):
            raise GeometryError("point outside window")
        ix = np.floor((pts + h) / self.spacing).astype(np.int64)
        np.clip(ix, 0, self.cells_per_axis - 1, out=ix)
        flat = ix[:, 0]
        for a in range(1, self.window.dim_D):
            flat = flat * self.cells_per_axis + ix[:, a]
        return flat


@dataclass(frozen=True)
class NodeIndex:
    """Index of a partition bin: a level and the bit string epsilon."""

    bits: tuple

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise GeometryError("bits must be 0/1")

    @property
    def level(self) -> int:
        return len(self.bits)

    @property
    def code(self) -> int:
        """Big-endian integer code; bins at level l are codes 0..2^l - 1."""
        c = 0
        for b in self.bits:
            c = (c << 1) | b
        return c

    @classmethod
    def from_code(cls, level: int, code: int) -> "NodeIndex":
        bits = tuple((code >> (level - 1 - i)) & 1 for i in range(level))
        return cls(bits)

    def child(self, bit: int) -> "NodeIndex":
        return NodeIndex(self.bits + (bit,))

    def parent(self) -> "NodeIndex":
        if self.level == 0:
            raise GeometryError("root has no parent")
        return NodeIndex(self.bits[:-1])

    def twin(self) -> "NodeIndex":
        if self.level == 0:
            raise GeometryError("root has no twin")
        return NodeIndex(self.bits[:-1] + (1 - self.bits[-1],))


ROOT = NodeIndex(())


@dataclass(frozen=True)
class PartitionTree:
    """Dyadic binary partition of [0,1]^d down to max_level.

    Level l is produced by splitting axis ``(l-1) % d`` at the midpoint, so
    after l levels axis h has been halved splits_per_axis(l)[h] times.
    """

    dim_d: int
    max_level: int

    def __post_init__(self):
        if self.dim_d < 1:
            raise GeometryError("dim_d must be >= 1")
        if self.max_level < 1:
            raise GeometryError("max_level must be >= 1")
        total = 2 ** (self.max_level + 1) - 2
        if total > MAX_TREE_NODES:
            raise GeometryError(
                f"tree with max_level={self.max_level} has {total} nodes, "
                f"over the budget of {MAX_TREE_NODES}")

    @property
    def diam_constant(self) -> float:
        """C with diam(B_eps) <= C * 2^(-l/d) for every node."""
        return 2.0 * np.sqrt(self.dim_d)

    def split_axis(self, level: int) -> int:
        """Axis split when creating level ``level`` from ``level - 1``."""
        return (level - 1) % self.dim_d

    def splits_per_axis(self, level: int) -> np.ndarray:
        """Number of halvings each axis has received after ``level`` levels."""
        base, extra = divmod(level, self.dim_d)
        s = np.full(self.dim_d, base, dtype=np.int64)
        s[:extra] += 1
        return s

    def nodes(self, level: int):
        for code in range(2 ** level):
            yield NodeIndex.from_code(level, code)

    def bin_bounds(self, node: NodeIndex) -> tuple:
        """(lower, upper) corner arrays of the bin B_eps in [0,1]^d."""
        lo = np.zeros(self.dim_d)
        hi = np.ones(self.dim_d)
        for i, b in enumerate(node.bits):
            a = self.split_axis(i + 1)
            mid = 0.5 * (lo[a] + hi[a])
            if b == 0:
                hi[a] = mid
            else:
                lo[a] = mid
        return lo, hi

    def bin_diameter(self, node: NodeIndex) -> float:
        lo, hi = self.bin_bounds(node)
        return float(np.linalg.norm(hi - lo))

    def contains(self, node: NodeIndex, z: np.ndarray) -> bool:
        """Membership under the half-open convention (closed at coordinate 1)."""
        lo, hi = self.bin_bounds(node)
        z = np.asarray(z, dtype=float)
        upper_ok = (z < hi) | ((hi == 1.0) & (z <= 1.0))
        return bool(np.all(z >= lo) and np.all(upper_ok))

    def leaf_codes(self, Z: np.ndarray, level: int | None = None) -> np.ndarray:
        """Vectorised location: code of the level-``level`` bin containing
        each row of Z (shape (m, d) or (m,) when d == 1)."""
        level = self.max_level if level is None else level
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        if Z.shape[1] != self.dim_d:
            raise GeometryError(f"points must have dimension {self.dim_d}")
        if np.any(Z < 0.0) or np.any(Z > 1.0):
            raise GeometryError("point outside [0,1]^d")
        s = self.splits_per_axis(level)
        codes = np.zeros(Z.shape[0], dtype=np.int64)
        # Integer coordinate of each axis at its final resolution, then the
        # level-order bit is read off from the most significant end.
        icoord = []
        for a in range(self.dim_d):
            ia = np.floor(Z[:, a] * (1 << s[a])).astype(np.int64)
            np.clip(ia, 0, (1 << s[a]) - 1, out=ia)
            icoord.append(ia)
        taken = [0] * self.dim_d
        for lev in range(1, level + 1):
            a = self.split_axis(lev)
            shift = s[a] - 1 - taken[a]
            bit = (icoord[a] >> shift) & 1
            codes = (codes << 1) | bit
            taken[a] += 1
        return codes


def build_partition(dim_d: int, max_level: int) -> PartitionTree:
    return PartitionTree(dim_d=dim_d, max_level=max_level)


def locate(tree: PartitionTree, z) -> list:
    """Nested path of NodeIndex containing z, for levels 1..max_level."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    code = int(tree.leaf_codes(z[None, :])[0])
    return [NodeIndex.from_code(lev, code >> (tree.max_level - lev))
            for lev in range(1, tree.max_level + 1)]
