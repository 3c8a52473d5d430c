"""Dyadic geometry on a finite cell grid.

Cubes are half-open products ``prod [a_i 2^k, (a_i + 1) 2^k)``.  A grid fixes a
cell level ``c`` and a root cube of side ``2^L`` whose corner sits on the cell
lattice; every function handled by the package is piecewise constant on the
cells and vanishes outside the root.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.ndimage import maximum_filter1d

__all__ = [
    "DyadicCube",
    "GridSpec",
    "CellMask",
    "SparseFamily",
    "SparseReport",
    "WhitneyDecomposition",
    "cube_triple",
    "whitney_decompose",
    "verify_sparse",
    "conditional_expectation",
    "maximal_function",
]


@dataclass(frozen=True, order=True)
class DyadicCube:
    """Dyadic cube of side ``2**level`` with integer ``anchor``."""

    d: int
    level: int
    anchor: tuple[int, ...]

    def __post_init__(self):
        if not 1 <= self.d <= 2:
            raise ValueError(f"dimension must be 1 or 2, got {self.d}")
        anchor = tuple(int(a) for a in self.anchor)
        if len(anchor) != self.d:
            raise ValueError("anchor length must equal the dimension")
        object.__setattr__(self, "anchor", anchor)

    @property
    def side(self) -> float:
        return 2.0 ** self.level

    @property
    def volume(self) -> float:
        return 2.0 ** (self.level * self.d)

    @property
    def diam(self) -> float:
        return self.side * np.sqrt(self.d)

    @property
    def lower(self) -> np.ndarray:
        return np.array(self.anchor, dtype=float) * self.side

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.side

    def children(self) -> list["DyadicCube"]:
        out = []
        for offs in itertools.product((0, 1), repeat=self.d):
            anchor = tuple(2 * a + o for a, o in zip(self.anchor, offs))
            out.append(DyadicCube(self.d, self.level - 1, anchor))
        return out

    def parent(self) -> "DyadicCube":
        return DyadicCube(self.d, self.level + 1, tuple(a // 2 for a in self.anchor))

    def ancestor(self, level: int) -> "DyadicCube":
        if level < self.level:
            raise ValueError("ancestor level below cube level")
        shift = level - self.level
        return DyadicCube(self.d, level, tuple(a >> shift for a in self.anchor))

    def contains(self, other: "DyadicCube") -> bool:
        if other.level > self.level:
            return False
        return other.ancestor(self.level) == self

    def __str__(self):
        parts = [f"[{lo:g},{hi:g})" for lo, hi in zip(self.lower, self.upper)]
        return "x".join(parts)


@dataclass(frozen=True)
class GridSpec:
    """Uniform cell grid.

    ``origin`` is the root corner in cell units, so the root is
    ``prod [origin_i 2^c, origin_i 2^c + 2^L)``.  When the origin is a multiple
    of ``2^(L - c)`` the root is itself a dyadic cube.
    """

    d: int
    cell_level: int
    level: int
    origin: tuple[int, ...]

    def __post_init__(self):
        if not 1 <= self.d <= 2:
            raise ValueError(f"dimension must be 1 or 2, got {self.d}")
        if self.level < self.cell_level:
            raise ValueError("root level must be at least the cell level")
        origin = tuple(int(o) for o in self.origin)
        if len(origin) != self.d:
            raise ValueError("origin length must equal the dimension")
        object.__setattr__(self, "origin", origin)

    @classmethod
    def from_root(cls, root: DyadicCube, cell_level: int) -> "GridSpec":
        scale = 2 ** (root.level - cell_level)
        return cls(root.d, cell_level, root.level, tuple(a * scale for a in root.anchor))

    @classmethod
    def centered(cls, d: int, cell_level: int, level: int) -> "GridSpec":
        """Root ``[-2^(L-1), 2^(L-1))^d``."""
        half = 2 ** (level - cell_level - 1)
        return cls(d, cell_level, level, (-half,) * d)

    @property
    def n_per_axis(self) -> int:
        return 2 ** (self.level - self.cell_level)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_per_axis,) * self.d

    @property
    def n_cells(self) -> int:
        return self.n_per_axis ** self.d

    @property
    def cell_width(self) -> float:
        return 2.0 ** self.cell_level

    @property
    def cell_volume(self) -> float:
        return 2.0 ** (self.cell_level * self.d)

    @property
    def root_lower(self) -> np.ndarray:
        return np.array(self.origin, dtype=float) * self.cell_width

    @property
    def root_upper(self) -> np.ndarray:
        return self.root_lower + 2.0 ** self.level

    @property
    def root_volume(self) -> float:
        return 2.0 ** (self.level * self.d)

    @property
    def root(self) -> DyadicCube | None:
        scale = self.n_per_axis
        if all(o % scale == 0 for o in self.origin):
            return DyadicCube(self.d, self.level, tuple(o // scale for o in self.origin))
        return None

    def cell_anchors(self, axis: int) -> np.ndarray:
        """Absolute cell anchors (level ``cell_level``) along one axis."""
        return self.origin[axis] + np.arange(self.n_per_axis)

    def cell_centers(self) -> list[np.ndarray]:
        """Meshgrid of cell centres, one array per axis."""
        axes = [(self.cell_anchors(i) + 0.5) * self.cell_width for i in range(self.d)]
        return np.meshgrid(*axes, indexing="ij")

    def rescaled(self, j: int) -> "GridSpec":
        """Grid carrying ``Dil_{2^j}`` of functions on this grid."""
        return GridSpec(self.d, self.cell_level - j, self.level - j, self.origin)

    def with_cell_level(self, cell_level: int) -> "GridSpec":
        """Same root, different resolution (root corner must stay on the lattice)."""
        shift = self.cell_level - cell_level
        if shift >= 0:
            origin = tuple(o * 2 ** shift for o in self.origin)
        else:
            if any(o % 2 ** (-shift) for o in self.origin):
                raise ValueError("root corner is not aligned with the coarser lattice")
            origin = tuple(o // 2 ** (-shift) for o in self.origin)
        return GridSpec(self.d, cell_level, self.level, origin)

    # cube <-> index helpers -------------------------------------------------
    def cube_range(self, cube: DyadicCube) -> list[tuple[int, int]]:
        """Per-axis index range ``[start, stop)`` of ``cube``, unclipped."""
        if cube.level < self.cell_level:
            raise ValueError("cube finer than the cell level")
        width = 2 ** (cube.level - self.cell_level)
        out = []
        for a, o in zip(cube.anchor, self.origin):
            start = a * width - o
            out.append((start, start + width))
        return out

    def contains_cube(self, cube: DyadicCube) -> bool:
        return cube.level >= self.cell_level and all(
            0 <= s and e <= self.n_per_axis for s, e in self.cube_range(cube)
        )

    def cube_slices(self, cube: DyadicCube) -> tuple[slice, ...]:
        if not self.contains_cube(cube):
            raise ValueError(f"cube {cube} is not inside the grid root")
        return tuple(slice(s, e) for s, e in self.cube_range(cube))

    def cube_mask(self, cube: DyadicCube) -> "CellMask":
        member = np.zeros(self.shape, dtype=bool)
        sl = _clip_ranges(self.cube_range(cube), self.n_per_axis)
        if sl is not None:
            member[sl] = True
        return CellMask(self, member)

    def cell_cube(self, index: Sequence[int]) -> DyadicCube:
        anchor = tuple(o + i for o, i in zip(self.origin, index))
        return DyadicCube(self.d, self.cell_level, anchor)

    def dyadic_cubes(self, level: int) -> list[DyadicCube]:
        """All dyadic cubes of ``level`` contained in the root."""
        if level < self.cell_level or level > self.level:
            return []
        width = 2 ** (level - self.cell_level)
        ranges = []
        for o in self.origin:
            lo = -(-o // width)
            hi = (o + self.n_per_axis) // width
            ranges.append(range(lo, hi))
        return [DyadicCube(self.d, level, a) for a in itertools.product(*ranges)]

    def all_dyadic_cubes(self, min_level: int | None = None) -> list[DyadicCube]:
        lo = self.cell_level if min_level is None else max(min_level, self.cell_level)
        out = []
        for level in range(self.level, lo - 1, -1):
            out.extend(self.dyadic_cubes(level))
        return out

    def full_mask(self) -> "CellMask":
        return CellMask(self, np.ones(self.shape, dtype=bool))

    def empty_mask(self) -> "CellMask":
        return CellMask(self, np.zeros(self.shape, dtype=bool))


def _clip_ranges(ranges, n):
    out = []
    for s, e in ranges:
        s, e = max(s, 0), min(e, n)
        if s >= e:
            return None
        out.append(slice(s, e))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class CellMask:
    """Boolean membership per cell.

    ``extent`` is the measure of the underlying set when it is larger than the
    covered cells (a triple cube sticking out of the root); averages over the
    mask divide by it, which matches zero extension outside the root.
    """

    grid: GridSpec
    membership: np.ndarray
    extent: float | None = None
    clipped: bool = False

    def __post_init__(self):
        member = np.array(self.membership, dtype=bool)
        if member.shape != self.grid.shape:
            raise ValueError(f"mask shape {member.shape} != grid shape {self.grid.shape}")
        member.setflags(write=False)
        object.__setattr__(self, "membership", member)

    @property
    def count(self) -> int:
        return int(self.membership.sum())

    @property
    def measure(self) -> float:
        return self.count * self.grid.cell_volume

    @property
    def total_measure(self) -> float:
        return self.measure if self.extent is None else float(self.extent)

    def is_empty(self) -> bool:
        return not self.membership.any()

    def complement(self) -> "CellMask":
        return CellMask(self.grid, ~self.membership)

    def __and__(self, other: "CellMask") -> "CellMask":
        _same_grid(self.grid, other.grid)
        return CellMask(self.grid, self.membership & other.membership)

    def __or__(self, other: "CellMask") -> "CellMask":
        _same_grid(self.grid, other.grid)
        return CellMask(self.grid, self.membership | other.membership)

    def minus(self, other: "CellMask") -> "CellMask":
        _same_grid(self.grid, other.grid)
        return CellMask(self.grid, self.membership & ~other.membership)

    def issubset(self, other: "CellMask") -> bool:
        _same_grid(self.grid, other.grid)
        return not np.any(self.membership & ~other.membership)

    def __eq__(self, other):
        if not isinstance(other, CellMask):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.membership, other.membership)

    __hash__ = None


def _same_grid(a: GridSpec, b: GridSpec):
    if a != b:
        raise ValueError("masks live on different grids")


def cube_triple(cube: DyadicCube, grid: GridSpec) -> CellMask:
    """Concentric triple ``3Q`` clipped to the root.

    The returned mask carries ``extent = 3^d |Q|`` and ``clipped`` is set when
    part of ``3Q`` lies outside the root (an empty mask when ``3Q`` misses the
    root entirely).
    """
    if cube.level < grid.cell_level:
        raise ValueError("cube finer than the cell level")
    width = 2 ** (cube.level - grid.cell_level)
    ranges = [(s - width, e + width) for s, e in grid.cube_range(cube)]
    member = np.zeros(grid.shape, dtype=bool)
    sl = _clip_ranges(ranges, grid.n_per_axis)
    if sl is not None:
        member[sl] = True
    full = 3.0 ** cube.d * cube.volume
    clipped = member.sum() * grid.cell_volume < full
    return CellMask(grid, member, extent=full, clipped=bool(clipped))


# ---------------------------------------------------------------------------
# Whitney decomposition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WhitneyDecomposition:
    omega: CellMask
    cubes: list[DyadicCube]
    upper_ok: list[bool]
    lower_ok: list[bool]
    distances: list[float] = field(default_factory=list)

    def union_mask(self) -> CellMask:
        member = np.zeros(self.omega.grid.shape, dtype=bool)
        for cube in self.cubes:
            member[self.omega.grid.cube_slices(cube)] = True
        return CellMask(self.omega.grid, member)


class _ComplementDistance:
    """Euclidean distance from a box to the closure of ``R^d minus omega``."""

    def __init__(self, omega: CellMask):
        grid = omega.grid
        self.grid = grid
        idx = np.argwhere(~omega.membership)
        h = grid.cell_width
        self.lo = (idx + np.array(grid.origin)) * h
        self.hi = self.lo + h
        self.root_lo = grid.root_lower
        self.root_hi = grid.root_upper

    def __call__(self, cube: DyadicCube) -> float:
        plo, phi = cube.lower, cube.upper
        # outside the root everything is complement
        best = float(np.min(np.minimum(plo - self.root_lo, self.root_hi - phi)))
        best = max(best, 0.0)
        if len(self.lo):
            gap = np.maximum(0.0, np.maximum(self.lo - phi, plo - self.hi))
            best = min(best, float(np.sqrt((gap ** 2).sum(axis=1)).min()))
        return best


def whitney_decompose(omega: CellMask) -> WhitneyDecomposition:
    """Whitney cubes of a cell union with ``5 diam <= dist <= 12 diam``.

    Maximal dyadic cubes inside ``omega`` with ``dist(P, omega^c) <= 12
    diam(P)`` are selected first; any cube violating ``dist >= 5 diam`` is then
    split until the lower bound holds or the cell level is reached.  Cell-level
    cubes may keep violating the lower bound and are flagged.
    """
    grid = omega.grid
    if omega.is_empty():
        return WhitneyDecomposition(omega, [], [], [], [])
    dist = _ComplementDistance(omega)
    member = omega.membership

    def inside(cube):
        sl = grid.cube_slices(cube)
        return bool(member[sl].all()), bool(member[sl].any())

    # start from the coarsest dyadic cubes tiling the root
    level = grid.level
    starts = grid.dyadic_cubes(level)
    while sum(c.volume for c in starts) < grid.root_volume:
        level -= 1
        starts = grid.dyadic_cubes(level)

    selected = []
    stack = list(starts)
    while stack:
        cube = stack.pop()
        full, some = inside(cube)
        if not some:
            continue
        if full and dist(cube) <= 12.0 * cube.diam:
            selected.append(cube)
        elif cube.level > grid.cell_level:
            stack.extend(cube.children())
        else:
            # a cell inside omega always satisfies the upper bound (its parent
            # meets the complement), so this branch is unreachable
            selected.append(cube)

    cubes, upper, lower, dists = [], [], [], []
    stack = selected
    while stack:
        cube = stack.pop()
        dc = dist(cube)
        if dc < 5.0 * cube.diam and cube.level > grid.cell_level:
            stack.extend(cube.children())
            continue
        cubes.append(cube)
        dists.append(dc)
        upper.append(dc <= 12.0 * cube.diam)
        lower.append(dc >= 5.0 * cube.diam)
    order = sorted(range(len(cubes)), key=lambda i: (cubes[i].level, cubes[i].anchor))
    return WhitneyDecomposition(
        omega,
        [cubes[i] for i in order],
        [upper[i] for i in order],
        [lower[i] for i in order],
        [dists[i] for i in order],
    )


# ---------------------------------------------------------------------------
# sparse families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SparseFamily:
    gamma: float
    entries: list[tuple[DyadicCube, CellMask]]

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[DyadicCube, CellMask]]:
        return iter(self.entries)

    @property
    def cubes(self) -> list[DyadicCube]:
        return [c for c, _ in self.entries]


@dataclass(frozen=True)
class SparseReport:
    disjoint: bool
    contained: bool
    measure_ok: list[bool]
    ratios: list[float]
    min_ratio: float

    @property
    def valid(self) -> bool:
        return self.disjoint and self.contained and all(self.measure_ok)


def verify_sparse(family: SparseFamily) -> SparseReport:
    """Check disjoint witnesses, containment and ``|E_Q| >= gamma |Q|``."""
    if not family.entries:
        return SparseReport(True, True, [], [], float("inf"))
    grid = family.entries[0][1].grid
    cover = np.zeros(grid.shape, dtype=np.int64)
    contained = True
    ok, ratios = [], []
    for cube, witness in family.entries:
        cover += witness.membership
        contained &= witness.issubset(grid.cube_mask(cube))
        ratio = witness.measure / cube.volume
        ratios.append(ratio)
        ok.append(ratio >= family.gamma)
    return SparseReport(bool(cover.max() <= 1), bool(contained), ok, ratios, min(ratios))


# ---------------------------------------------------------------------------
# averages and maximal functions
# ---------------------------------------------------------------------------


def _block_average(values: np.ndarray, grid: GridSpec, level: int) -> np.ndarray:
    """Average over dyadic cubes of ``level`` (zero outside the root), broadcast back."""
    if level < grid.cell_level:
        raise ValueError(
            f"averaging level {level} is below the cell level {grid.cell_level}"
        )
    width = 2 ** (level - grid.cell_level)
    d = grid.d
    ids = []
    for axis in range(d):
        block = np.floor_divide(grid.cell_anchors(axis), width)
        ids.append(block - block[0])
    nblocks = [int(i[-1]) + 1 for i in ids]
    flat_id = np.ravel_multi_index(np.meshgrid(*ids, indexing="ij"), nblocks).ravel()
    trailing = values.shape[d:]
    flat_vals = values.reshape(grid.n_cells, -1)
    sums = np.zeros((int(np.prod(nblocks)), flat_vals.shape[1]))
    np.add.at(sums, flat_id, flat_vals)
    sums /= width ** d
    return sums[flat_id].reshape(grid.shape + trailing)


def conditional_expectation(f, k: int):
    """``E_k f``: average over dyadic cubes of side ``2^-k``."""
    from .gridfn import GridFunction

    grid = f.grid
    level = -k
    if level < grid.cell_level:
        raise ValueError(
            f"cubes of side 2^{level} are finer than the cells (level {grid.cell_level})"
        )
    return GridFunction(grid, _block_average(f.values, grid, level), f.norm)


def _scalar_field(f, component) -> tuple[np.ndarray, GridSpec]:
    if isinstance(f, np.ndarray):
        raise TypeError("pass a GridFunction or (array, grid)")
    if isinstance(f, tuple):
        arr, grid = f
        return np.abs(np.asarray(arr, dtype=float)), grid
    if component is None:
        if f.n != 1:
            raise ValueError("choose a component of a multi-component function")
        component = 0
    return f.pointwise_norm(component), f.grid


def maximal_function(f, p: float = 1.0, mode: str = "dyadic", component=None) -> np.ndarray:
    """``M_p f = (M |f|^p)^(1/p)`` evaluated per cell.

    ``f`` is a GridFunction (one component is used) or a pair ``(array, grid)``
    of a nonnegative scalar field.

    ``mode="dyadic"`` takes the sup over dyadic cubes containing the cell.
    ``mode="all_grid_cubes"`` takes the sup over every cube with cell-aligned
    corners inside the root whose closure meets the closure of the cell, i.e.
    the largest value of the pointwise maximal function (closed cubes) on the
    closed cell.  Cubes poking out of the root never win, since moving them
    inside keeps the mass and the contact with the cell.
    """
    if not 1.0 <= p < np.inf:
        raise ValueError("p must lie in [1, inf)")
    vals, grid = _scalar_field(f, component)
    power = vals ** p
    if mode == "dyadic":
        out = power.copy()
        for level in range(grid.cell_level + 1, grid.level + 1):
            out = np.maximum(out, _block_average(power, grid, level))
        return out ** (1.0 / p)
    if mode != "all_grid_cubes":
        raise ValueError(f"unknown mode {mode!r}")
    n = grid.n_per_axis
    d = grid.d
    csum = power
    for axis in range(d):
        csum = np.cumsum(csum, axis=axis)
        pad = [(0, 0)] * d
        pad[axis] = (1, 0)
        csum = np.pad(csum, pad)
    out = power.copy()
    for s in range(1, n + 1):
        avg = _window_sums(csum, s, d) / s ** d
        # window starting at a touches cells a-1 .. a+s
        best = np.pad(avg, [(s, s)] * d, constant_values=-np.inf)
        w = s + 2
        for axis in range(d):
            # running max over windows of w cells (van Herk filter), then realign
            best = maximum_filter1d(best, w, axis=axis)
            best = np.take(best, np.arange(w // 2, w // 2 + n), axis=axis)
        out = np.maximum(out, best)
    return out ** (1.0 / p)


def _window_sums(csum: np.ndarray, s: int, d: int) -> np.ndarray:
    n = csum.shape[0] - 1
    m = n - s + 1
    if d == 1:
        return csum[s:] - csum[:m]
    return csum[s:, s:] - csum[:m, s:] - csum[s:, :m] + csum[:m, :m]


def iter_cells(grid: GridSpec) -> Iterable[tuple[int, ...]]:
    return itertools.product(range(grid.n_per_axis), repeat=grid.d)
