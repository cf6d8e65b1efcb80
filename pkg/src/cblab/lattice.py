"""Lattice point sets on bounded domains and the discrete calculus built on them.

Points of a domain are the scaled integer lattice εZ^d intersected with an
open shape.  They are split into three classes by their distance to the
boundary:

* semi-interior: dist > ε·r0, where the full stencil x + ερ stays in the domain;
* interior: dist > 2ε·r0, where the divergence stencil x - ερ stays semi-interior;
* boundary layer: everything that is not interior; Dirichlet data lives here.

Vector fields are plain ``(n, d)`` arrays indexed by the domain's point order
(lexicographic in integer coordinates).  Bond matrices at a point are
``(d, |R|)`` arrays whose column ``r`` is the difference quotient along
``stencil.directions[r]``; a field of them over the semi-interior has shape
``(n_semi, d, |R|)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import shapely
from scipy.sparse.linalg import splu


class LatticeError(ValueError):
    pass


class InvalidStencil(LatticeError):
    pass


class DegenerateDiscretization(LatticeError):
    pass


class StencilLeavesDomain(LatticeError):
    pass


class LinearSolveError(RuntimeError):
    """A linear solve missed its tolerance; ``residual`` is what it achieved."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


SOLVE_RTOL = 1e-10
TIE_RTOL = 1e-9


# ---------------------------------------------------------------- stencils


def _integer_det(m: np.ndarray) -> int:
    # entries are small integers and d <= 3, so rounding the float det is exact
    return int(round(float(np.linalg.det(m.astype(float)))))


class InteractionStencil:
    """Finite set R of nonzero integer directions with R = -R spanning Z^d."""

    def __init__(self, directions):
        R = np.array(directions, dtype=np.int64)
        if R.ndim == 1:
            R = R[:, None]
        if R.ndim != 2 or R.shape[0] == 0:
            raise InvalidStencil("invalid stencil: need a nonempty (|R|, d) array")
        d = R.shape[1]
        if d not in (1, 2, 3):
            raise InvalidStencil(f"invalid stencil: dimension {d} not in 1..3")
        if np.any(np.all(R == 0, axis=1)):
            raise InvalidStencil("invalid stencil: contains the zero vector")
        keys = [tuple(r) for r in R.tolist()]
        if len(set(keys)) != len(keys):
            raise InvalidStencil("invalid stencil: repeated direction")
        lookup = {k: i for i, k in enumerate(keys)}
        try:
            neg = np.array([lookup[tuple(-np.array(k))] for k in keys], dtype=np.int64)
        except KeyError:
            raise InvalidStencil("invalid stencil: not closed under negation") from None
        g = 0
        for rows in itertools.combinations(range(len(keys)), d):
            g = math.gcd(g, abs(_integer_det(R[list(rows)])))
            if g == 1:
                break
        if g != 1:
            raise InvalidStencil("invalid stencil: integer span is not all of Z^d")
        R.setflags(write=False)
        neg.setflags(write=False)
        self.directions = R
        self.neg = neg
        self._lookup = lookup

    @classmethod
    def nearest_neighbour(cls, d: int) -> "InteractionStencil":
        eye = np.eye(d, dtype=np.int64)
        return cls(np.concatenate([eye, -eye]))

    @classmethod
    def triangular(cls) -> "InteractionStencil":
        """{±e1, ±e2, ±(e2 - e1)}; maps onto the triangular lattice via ``TRIANGULAR_BASIS``."""
        base = np.array([[1, 0], [0, 1], [-1, 1]])
        return cls(np.concatenate([base, -base]))

    @classmethod
    def square_with_diagonals(cls) -> "InteractionStencil":
        base = np.array([[1, 0], [0, 1], [1, 1], [1, -1]])
        return cls(np.concatenate([base, -base]))

    @property
    def dim(self) -> int:
        return self.directions.shape[1]

    @property
    def size(self) -> int:
        return self.directions.shape[0]

    @property
    def r_max(self) -> float:
        return float(np.max(np.linalg.norm(self.directions, axis=1)))

    @property
    def r0(self) -> float:
        return max(self.r_max, math.sqrt(self.dim) / 4.0)

    @property
    def matrix(self) -> np.ndarray:
        """Directions as the columns of a float ``(d, |R|)`` matrix."""
        return self.directions.T.astype(float)

    def index(self, rho) -> int:
        return self._lookup[tuple(int(v) for v in np.atleast_1d(rho))]

    def reflect(self, A: np.ndarray) -> np.ndarray:
        """Point reflection T(A)_ρ = -A_{-ρ} on (..., d, |R|) bond arrays."""
        return -np.asarray(A)[..., self.neg]

    def bonds(self, F: np.ndarray) -> np.ndarray:
        """Homogeneous bond matrix (Fρ)_ρ for (..., d, d) matrices F."""
        return np.asarray(F) @ self.matrix

    def __eq__(self, other):
        return isinstance(other, InteractionStencil) and np.array_equal(
            self.directions, other.directions)

    def __hash__(self):
        return hash(self.directions.tobytes())

    def __repr__(self):
        return f"InteractionStencil({self.directions.tolist()})"


TRIANGULAR_BASIS = np.array([[1.0, 0.5], [0.0, math.sqrt(3.0) / 2.0]])


# ------------------------------------------------------------------ shapes


class Box:
    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if self.lower.shape != self.upper.shape or np.any(self.upper <= self.lower):
            raise ValueError("box needs lower < upper componentwise")

    @property
    def dim(self):
        return self.lower.size

    def signed_distance(self, x):
        x = np.asarray(x, dtype=float)
        return np.min(np.minimum(x - self.lower, self.upper - x), axis=-1)

    def bounds(self):
        return self.lower, self.upper

    @property
    def diameter(self):
        return float(np.linalg.norm(self.upper - self.lower))

    def to_dict(self):
        return {"shape": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}


class Ball:
    def __init__(self, center, radius):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.radius = float(radius)
        if self.radius <= 0:
            raise ValueError("ball radius must be positive")

    @property
    def dim(self):
        return self.center.size

    def signed_distance(self, x):
        return self.radius - np.linalg.norm(np.asarray(x, dtype=float) - self.center, axis=-1)

    def bounds(self):
        return self.center - self.radius, self.center + self.radius

    @property
    def diameter(self):
        return 2.0 * self.radius

    def to_dict(self):
        return {"shape": "ball", "center": self.center.tolist(), "radius": self.radius}


class Polygon:
    """Simple polygon in the plane; distances come from shapely."""

    def __init__(self, vertices):
        self.vertices = np.asarray(vertices, dtype=float)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2 or len(self.vertices) < 3:
            raise ValueError("polygon needs at least three 2-d vertices")
        self._poly = shapely.Polygon(self.vertices)
        if not self._poly.is_valid or self._poly.area <= 0:
            raise ValueError("polygon must be simple with positive area")
        self._ring = self._poly.exterior

    @property
    def dim(self):
        return 2

    def signed_distance(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 2)
        dist = shapely.distance(self._ring, shapely.points(flat))
        inside = shapely.contains_xy(self._poly, flat[:, 0], flat[:, 1])
        return np.where(inside, dist, -dist).reshape(x.shape[:-1])

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def diameter(self):
        v = self.vertices
        return float(np.max(np.linalg.norm(v[:, None] - v[None], axis=-1)))

    def to_dict(self):
        return {"shape": "polygon", "vertices": self.vertices.tolist()}


# ------------------------------------------------------------------ domain


class LatticeDomain:
    """Classified lattice points of ``shape`` ∩ εZ^d together with the stencil."""

    def __init__(self, shape, eps: float, stencil: InteractionStencil):
        if not eps > 0:
            raise ValueError("spacing must be positive")
        if shape.dim != stencil.dim:
            raise ValueError(f"shape dimension {shape.dim} != stencil dimension {stencil.dim}")
        self.shape = shape
        self.eps = float(eps)
        self.stencil = stencil
        self.dim = stencil.dim

        lo, hi = shape.bounds()
        ranges = [np.arange(math.ceil(a / eps) - 1, math.floor(b / eps) + 2)
                  for a, b in zip(lo, hi)]
        grid = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, self.dim)
        dist = shape.signed_distance(grid * self.eps)
        # distances within TIE_RTOL·ε of a threshold count as ties and are excluded
        tie = TIE_RTOL * self.eps
        keep = dist > tie
        if not np.any(keep):
            raise DegenerateDiscretization("degenerate discretization: no lattice point inside the domain")
        pts = grid[keep]
        dist = dist[keep]
        order = np.lexsort(pts.T[::-1])
        self.points = pts[order]
        self.points.setflags(write=False)
        self.distance = dist[order]
        self.coords = self.points * self.eps

        r0 = stencil.r0
        self.semi_mask = self.distance > self.eps * r0 + tie
        self.interior_mask = self.distance > 2.0 * self.eps * r0 + tie
        self.semi = np.flatnonzero(self.semi_mask)
        self.interior = np.flatnonzero(self.interior_mask)
        self.boundary = np.flatnonzero(~self.interior_mask)

        # dense lookup from integer coordinates to point index
        self._origin = self.points.min(axis=0) - int(math.ceil(stencil.r_max)) - 1
        extent = self.points.max(axis=0) + int(math.ceil(stencil.r_max)) + 2 - self._origin
        self._grid = np.full(tuple(extent), -1, dtype=np.int64)
        self._grid[tuple((self.points - self._origin).T)] = np.arange(self.n_points)

        R = stencil.directions
        fwd = self._lookup(self.points[self.semi][:, None, :] + R[None])
        if np.any(fwd < 0):
            raise LatticeError("shape signed distance is inconsistent with its point set")
        self.neighbours = fwd

        semi_pos = np.full(self.n_points, -1, dtype=np.int64)
        semi_pos[self.semi] = np.arange(self.semi.size)
        self.semi_position = semi_pos
        back = self._lookup(self.points[self.interior][:, None, :] - R[None])
        back = np.where(back >= 0, semi_pos[np.maximum(back, 0)], -1)
        if np.any(back < 0):
            raise LatticeError("shape signed distance is inconsistent with its point set")
        self.backward = back
        self.interior_self = semi_pos[self.interior]

        int_pos = np.full(self.n_points, -1, dtype=np.int64)
        int_pos[self.interior] = np.arange(self.interior.size)
        self.interior_position = int_pos

    # -- sizes and lookup

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_semi(self) -> int:
        return self.semi.size

    @property
    def n_interior(self) -> int:
        return self.interior.size

    @property
    def n_boundary(self) -> int:
        return self.boundary.size

    @property
    def diameter(self) -> float:
        return self.shape.diameter

    @property
    def poincare_constant(self) -> float:
        return self.diameter + 1.0

    def _lookup(self, z: np.ndarray) -> np.ndarray:
        idx = z - self._origin
        out = np.full(idx.shape[:-1], -1, dtype=np.int64)
        ok = np.all((idx >= 0) & (idx < np.array(self._grid.shape)), axis=-1)
        out[ok] = self._grid[tuple(idx[ok].T)]
        return out

    def index_of(self, z) -> int:
        """Point index of integer coordinates ``z`` (or -1 if not a domain point)."""
        return int(self._lookup(np.atleast_1d(np.asarray(z, dtype=np.int64))[None])[0])

    def _point_index(self, x) -> int:
        """Index of a point given as an index, integer lattice coordinates or a float position."""
        if isinstance(x, (int, np.integer)):
            i = int(x)
            if not 0 <= i < self.n_points:
                raise IndexError(f"point index {i} out of range")
            return i
        x = np.atleast_1d(np.asarray(x))
        if np.issubdtype(x.dtype, np.integer):
            return self.index_of(x)
        z = np.rint(x / self.eps)
        if np.max(np.abs(z * self.eps - x)) > 1e-9 * self.eps:
            return -1
        return self.index_of(z.astype(np.int64))

    # -- embedding helpers

    def embed(self, u_int: np.ndarray) -> np.ndarray:
        """Extend interior values by zero on the boundary layer."""
        u_int = np.asarray(u_int, dtype=float)
        out = np.zeros((self.n_points,) + u_int.shape[1:])
        out[self.interior] = u_int
        return out

    def sample(self, fn) -> np.ndarray:
        return np.asarray(fn(self.coords), dtype=float)

    # -- discrete calculus on whole fields

    def gradient(self, y: np.ndarray) -> np.ndarray:
        """D_{R,ε}y at every semi-interior point, shape (n_semi, d, |R|)."""
        y = np.asarray(y, dtype=float)
        diff = (y[self.neighbours] - y[self.semi][:, None, :]) / self.eps
        return np.swapaxes(diff, 1, 2)

    def divergence(self, M: np.ndarray) -> np.ndarray:
        """div_{R,ε}M at every interior point, shape (n_int, d)."""
        M = np.asarray(M, dtype=float)
        rho = np.arange(self.stencil.size)
        here = M[self.interior_self]                      # (n_int, d, R)
        there = M[self.backward, :, rho[None, :]]         # (n_int, R, d)
        return (here.sum(axis=2) - there.sum(axis=1)) / self.eps

    @cached_property
    def gradient_matrix(self) -> sp.csr_matrix:
        """Scalar gradient as a sparse (n_semi·|R|, n_points) matrix, rows (x, ρ)."""
        n_s, n_r = self.neighbours.shape
        rows = np.arange(n_s * n_r)
        plus = self.neighbours.reshape(-1)
        minus = np.repeat(self.semi, n_r)
        data = np.concatenate([np.full(rows.size, 1.0 / self.eps), np.full(rows.size, -1.0 / self.eps)])
        G = sp.csr_matrix((data, (np.concatenate([rows, rows]), np.concatenate([plus, minus]))),
                          shape=(n_s * n_r, self.n_points))
        G.sum_duplicates()
        return G

    @cached_property
    def _gradient_split(self):
        G = self.gradient_matrix.tocsc()
        return G[:, self.interior].tocsr(), G[:, self.boundary].tocsr()

    @cached_property
    def laplacian(self) -> sp.csc_matrix:
        """G_int^T G_int: the matrix of -div D on fields vanishing on the boundary layer."""
        G_int, _ = self._gradient_split
        return (G_int.T @ G_int).tocsc()

    @cached_property
    def _laplacian_lu(self):
        if self.n_interior == 0:
            raise DegenerateDiscretization("degenerate discretization: empty interior")
        return splu(self.laplacian)

    def solve_laplacian(self, rhs: np.ndarray) -> np.ndarray:
        """Solve -div D w = rhs for w vanishing on the boundary layer (interior values)."""
        rhs = np.asarray(rhs, dtype=float)
        w = self._laplacian_lu.solve(rhs)
        scale = np.linalg.norm(rhs)
        if scale > 0:
            res = np.linalg.norm(self.laplacian @ w - rhs) / scale
            if not res <= SOLVE_RTOL:
                raise LinearSolveError("Riesz solve failed", res)
        return w

    def neg_div_grad(self, u_full: np.ndarray) -> np.ndarray:
        """-div D u at interior points for a full field u."""
        G_int, _ = self._gradient_split
        return G_int.T @ (self.gradient_matrix @ u_full)

    # -- norms

    def l2_norm(self, u: np.ndarray, over: str = "interior") -> float:
        u = np.asarray(u, dtype=float)
        if over == "interior" and u.shape[0] == self.n_points:
            u = u[self.interior]
        elif over == "interior" and u.shape[0] != self.n_interior:
            raise ValueError("field is neither interior-only nor defined on all points")
        elif over == "points" and u.shape[0] != self.n_points:
            raise ValueError("ℓ² over points needs a field on all points")
        return math.sqrt(self.eps ** self.dim * float(np.sum(u * u)))

    def h1_norm(self, u: np.ndarray, over: str = "semi") -> float:
        """(ε^d Σ |D u|²)^{1/2} summed over semi-interior (default) or interior points."""
        u = np.asarray(u, dtype=float)
        if u.shape[0] != self.n_points:
            raise ValueError("h¹ norm needs a field on all points")
        Du = self.gradient(u)
        if over == "interior":
            Du = Du[self.interior_self]
        elif over != "semi":
            raise ValueError(f"unknown h¹ summation set {over!r}")
        return math.sqrt(self.eps ** self.dim * float(np.sum(Du * Du)))

    def h1_inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return self.eps ** self.dim * float(np.sum(self.gradient(u) * self.gradient(v)))

    def riesz_representer(self, r_int: np.ndarray) -> np.ndarray:
        """Interior values of w ∈ A_ε(Ω,0) with -div D w = r."""
        return self.solve_laplacian(r_int)

    def hminus1_norm(self, r: np.ndarray) -> float:
        r = np.asarray(r, dtype=float)
        if r.shape[0] == self.n_points:
            r = r[self.interior]
        elif r.shape[0] != self.n_interior:
            raise ValueError("h⁻¹ norm needs a field on interior points")
        w = self.riesz_representer(r)
        return math.sqrt(max(self.eps ** self.dim * float(np.sum(r * w)), 0.0))

    def harmonic_extension(self, g: np.ndarray) -> np.ndarray:
        """T_ε g: equal to g on the boundary layer, discrete-harmonic inside."""
        g = np.asarray(g, dtype=float)
        if g.shape[0] != self.n_boundary:
            raise ValueError("boundary data must have one row per boundary-layer point")
        if self.n_boundary == 0:
            raise ValueError("empty boundary data")
        G_int, G_bd = self._gradient_split
        rhs = -(G_int.T @ (G_bd @ g))
        y = np.zeros((self.n_points,) + g.shape[1:])
        y[self.boundary] = g
        if self.n_interior:
            y[self.interior] = self.solve_laplacian(rhs)
        return y

    def boundary_seminorm(self, g: np.ndarray) -> float:
        return self.h1_norm(self.harmonic_extension(g))

    def norm(self, u: np.ndarray, kind: str) -> float:
        if kind == "l2_interior":
            return self.l2_norm(u, "interior")
        if kind == "l2_points":
            return self.l2_norm(u, "points")
        if kind == "h1":
            return self.h1_norm(u)
        if kind == "h_minus1":
            return self.hminus1_norm(u)
        if kind == "boundary_seminorm":
            return self.boundary_seminorm(u)
        raise ValueError(f"unknown norm kind {kind!r}")

    def describe(self) -> dict:
        return {"dim": self.dim, "eps": self.eps, "stencil": self.stencil.directions.tolist(),
                "shape": self.shape.to_dict(), "n_points": self.n_points,
                "n_semi": self.n_semi, "n_interior": self.n_interior}


def build_domain(shape, eps: float, stencil: InteractionStencil) -> LatticeDomain:
    return LatticeDomain(shape, eps, stencil)


# ------------------------------------------------------------------ fields

SUPPORT_CLASSES = ("all_points", "zero_on_boundary_layer", "interior_only")


@dataclass
class DiscreteField:
    """Values of a vector field keyed by the domain's point order."""

    domain: LatticeDomain
    values: np.ndarray
    support: str = "all_points"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.support not in SUPPORT_CLASSES:
            raise ValueError(f"unknown support class {self.support!r}")
        n = self.domain.n_interior if self.support == "interior_only" else self.domain.n_points
        if self.values.shape != (n, self.domain.dim):
            raise ValueError(f"expected values of shape {(n, self.domain.dim)}, got {self.values.shape}")
        if self.support == "zero_on_boundary_layer" and np.any(self.values[self.domain.boundary] != 0):
            raise ValueError("field must vanish on the boundary layer")

    @classmethod
    def from_function(cls, domain: LatticeDomain, fn, support: str = "all_points"):
        vals = domain.sample(fn)
        if support == "interior_only":
            vals = vals[domain.interior]
        elif support == "zero_on_boundary_layer":
            vals = vals.copy()
            vals[domain.boundary] = 0.0
        return cls(domain, vals, support)

    def full(self) -> np.ndarray:
        if self.support == "interior_only":
            return self.domain.embed(self.values)
        return self.values


def discrete_gradient(y: DiscreteField, x) -> np.ndarray:
    """Bond matrix ((y(x+ερ) - y(x))/ε)_ρ at a semi-interior point ``x``."""
    dom = y.domain
    i = dom._point_index(x)
    if i < 0 or not dom.semi_mask[i]:
        raise StencilLeavesDomain("stencil leaves domain: point is not semi-interior")
    vals = y.full()
    nbr = dom.neighbours[dom.semi_position[i]]
    return ((vals[nbr] - vals[i]) / dom.eps).T


def discrete_divergence(domain: LatticeDomain, M: np.ndarray, x) -> np.ndarray:
    """Σ_ρ (M_ρ(x) - M_ρ(x - ερ))/ε at an interior point ``x``; M has shape (n_semi, d, |R|)."""
    i = domain._point_index(x)
    if i < 0 or not domain.interior_mask[i]:
        raise StencilLeavesDomain("stencil leaves domain: point is not interior")
    k = domain.interior_position[i]
    M = np.asarray(M, dtype=float)
    rho = np.arange(domain.stencil.size)
    here = M[domain.interior_self[k]].sum(axis=1)
    there = M[domain.backward[k], :, rho].sum(axis=0)
    return (here - there) / domain.eps


def norm(field, kind: str, domain: LatticeDomain | None = None) -> float:
    if isinstance(field, DiscreteField):
        domain = field.domain
        vals = field.values
    else:
        vals = field
    if domain is None:
        raise ValueError("raw arrays need an explicit domain")
    return domain.norm(vals, kind)


def harmonic_extension(domain: LatticeDomain, g: np.ndarray) -> DiscreteField:
    return DiscreteField(domain, domain.harmonic_extension(g))
