"""Manufactured continuum deformations, their Cauchy-Born body force and mollified sampling.

A manufactured deformation y(x) = A0·x + δ·u(x) has closed-form derivatives,
so the body force f = -div DW_CB(∇y) is known exactly and y solves the
continuum problem with data (f, y|∂Ω) by construction.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np
from scipy import integrate

from .lattice import LatticeDomain, DiscreteField
from .potentials import SitePotential, _cb_tensor, cauchy_born

MAX_ORDER = 4


class QuadratureError(RuntimeError):
    pass


# ------------------------------------------------------------ perturbations


def _multi_indices(d: int, order: int):
    return list(itertools.product(range(d), repeat=order))


class TrigPerturbation:
    """u(x) = c · Π_k sin(π m_k x_k + φ_k) with integer frequencies m."""

    family = "trig"

    def __init__(self, frequencies, direction=None, phases=None):
        self.frequencies = np.atleast_1d(np.asarray(frequencies, dtype=float))
        d = self.frequencies.size
        self.direction = np.eye(d)[0] if direction is None else np.asarray(direction, dtype=float)
        self.phases = np.zeros(d) if phases is None else np.asarray(phases, dtype=float)
        if self.direction.shape != (d,) or self.phases.shape != (d,):
            raise ValueError("direction and phases need one entry per axis")

    @property
    def dim(self):
        return self.frequencies.size

    def derivative(self, x: np.ndarray, order: int) -> np.ndarray:
        """∂^order u at points x (n, d); shape (n, d) + (d,)*order, component first."""
        x = np.atleast_2d(x)
        d = self.dim
        a = math.pi * self.frequencies
        arg = x * a + self.phases
        # S[k][m] = m-th derivative of sin(a_k x_k + φ_k) in x_k
        S = [[a[k] ** m * np.sin(arg[:, k] + m * math.pi / 2) for m in range(order + 1)]
             for k in range(d)]
        out = np.zeros((x.shape[0], d) + (d,) * order)
        for idx in _multi_indices(d, order):
            counts = np.bincount(np.array(idx, dtype=int), minlength=d) if order else np.zeros(d, int)
            s = np.ones(x.shape[0])
            for k in range(d):
                s = s * S[k][counts[k]]
            out[(slice(None), slice(None)) + idx] = s[:, None] * self.direction[None, :]
        return out

    def describe(self):
        return {"family": self.family, "frequencies": self.frequencies.tolist(),
                "direction": self.direction.tolist(), "phases": self.phases.tolist()}


class PolynomialPerturbation:
    """u_i(x) = Σ coefficient · x^α over terms (component i, exponents α, coefficient)."""

    family = "polynomial"

    def __init__(self, dim: int, terms):
        self._dim = int(dim)
        self.terms = [(int(i), tuple(int(e) for e in alpha), float(c)) for i, alpha, c in terms]
        for i, alpha, _ in self.terms:
            if not 0 <= i < dim or len(alpha) != dim or min(alpha) < 0:
                raise ValueError("bad polynomial term")

    @property
    def dim(self):
        return self._dim

    def derivative(self, x, order):
        x = np.atleast_2d(x)
        d = self.dim
        out = np.zeros((x.shape[0], d) + (d,) * order)
        for idx in _multi_indices(d, order):
            counts = np.bincount(np.array(idx, dtype=int), minlength=d) if order else np.zeros(d, int)
            for i, alpha, c in self.terms:
                if any(counts[k] > alpha[k] for k in range(d)):
                    continue
                coef = c
                val = np.ones(x.shape[0])
                for k in range(d):
                    coef *= math.perm(alpha[k], counts[k])
                    val = val * x[:, k] ** (alpha[k] - counts[k])
                out[(slice(None), i) + idx] += coef * val
        return out

    def describe(self):
        return {"family": self.family, "terms": [[i, list(a), c] for i, a, c in self.terms]}


class ManufacturedDeformation:
    """y(x) = A0·x + δ·u(x)."""

    def __init__(self, A0, perturbation, amplitude: float):
        self.A0 = np.atleast_2d(np.asarray(A0, dtype=float))
        self.perturbation = perturbation
        self.amplitude = float(amplitude)
        if self.A0.shape != (perturbation.dim, perturbation.dim):
            raise ValueError("A0 must be d×d with d the perturbation dimension")

    @property
    def dim(self):
        return self.A0.shape[0]

    def evaluate(self, x, order: int = 0) -> np.ndarray:
        if not 0 <= order <= MAX_ORDER:
            raise ValueError("derivative order must be 0..4")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        du = self.perturbation.derivative(x, order) * self.amplitude
        if order == 0:
            return x @ self.A0.T + du
        if order == 1:
            return self.A0[None] + du
        return du

    __call__ = evaluate

    def max_bond_deviation(self, stencil, x) -> float:
        """sup over x of |((∇y(x) - A0)ρ)_ρ| (Frobenius norm of the bond matrix)."""
        G = self.evaluate(x, 1) - self.A0
        B = stencil.bonds(G)
        return float(np.max(np.sqrt(np.sum(B * B, axis=(1, 2))))) if len(B) else 0.0

    def check_admissible(self, W: SitePotential, x) -> float:
        dev = self.max_bond_deviation(W.stencil, x)
        radius = W.admissible_radius(W.stencil.bonds(self.A0))
        if dev >= radius:
            raise ValueError(f"manufactured gradient leaves the admissible ball ({dev:.3g} >= {radius:.3g})")
        return dev

    def describe(self):
        return {"A0": self.A0.tolist(), "amplitude": self.amplitude, **self.perturbation.describe()}


def eval_deformation(y: ManufacturedDeformation, x, derivative_order: int = 0) -> np.ndarray:
    return y.evaluate(x, derivative_order)


# ---------------------------------------------------------------- mollifier


def _unit_sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def _bump(r2):
    r2 = np.asarray(r2, dtype=float)
    out = np.zeros_like(r2)
    inside = r2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


class Mollifier:
    """Standard bump η(z) = c·exp(-1/(1 - |z|²)) on the unit ball, unit mass."""

    def __init__(self, dim: int):
        self.dim = int(dim)
        area = _unit_sphere_area(self.dim)
        f = lambda r, p: math.exp(-1.0 / (1.0 - r * r)) * r ** p if r < 1.0 else 0.0
        mass = area * integrate.quad(f, 0.0, 1.0, args=(self.dim - 1,), epsabs=0, epsrel=1e-13, limit=200)[0]
        second = area * integrate.quad(f, 0.0, 1.0, args=(self.dim + 1,), epsabs=0, epsrel=1e-13, limit=200)[0]
        self.normalization = 1.0 / mass
        # ∫ η(z) z_i z_j dz = m2·δ_ij
        self.m2 = second / mass / self.dim

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        return self.normalization * _bump(np.sum(z * z, axis=-1))

    @property
    def moment_table(self) -> dict:
        return {"mass": 1.0, "second": self.m2}

    def rule(self, n: int):
        return _tensor_rule(self.dim, n)


@lru_cache(maxsize=None)
def _tensor_rule(d: int, n: int):
    """Tensor Gauss-Legendre nodes on [-1,1]^d weighted by the bump, renormalized to unit mass."""
    x, w = np.polynomial.legendre.leggauss(n)
    nodes = np.stack(np.meshgrid(*([x] * d), indexing="ij"), axis=-1).reshape(-1, d)
    wts = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=1)
    wts = wts * _bump(np.sum(nodes * nodes, axis=1))
    keep = wts > 0
    nodes, wts = nodes[keep], wts[keep]
    wts = wts / wts.sum()
    nodes.setflags(write=False)
    wts.setflags(write=False)
    return nodes, wts


_MOLLIFIERS: dict[int, Mollifier] = {}


def mollifier(dim: int) -> Mollifier:
    if dim not in _MOLLIFIERS:
        _MOLLIFIERS[dim] = Mollifier(dim)
    return _MOLLIFIERS[dim]


def _convolve(y: ManufacturedDeformation, eps, x, order, nodes, wts, chunk=1 << 21):
    n_pts = x.shape[0]
    out_shape = (n_pts, y.dim) + (y.dim,) * order
    out = np.zeros(out_shape)
    step = max(1, chunk // max(1, nodes.shape[0]))
    for s in range(0, n_pts, step):
        xs = x[s:s + step]
        pts = (xs[:, None, :] - eps * nodes[None]).reshape(-1, y.dim)
        vals = y.evaluate(pts, order).reshape((xs.shape[0], nodes.shape[0]) + out_shape[1:])
        out[s:s + step] = np.tensordot(wts, vals, axes=([0], [1]))
    return out


def mollified_sample(y: ManufacturedDeformation, eps: float, x, order: int = 0,
                     rtol: float = 1e-10, n_start: int = 16, n_max: int = 256) -> np.ndarray:
    """(η_ε ∗ ∇^order y)(x) by tensor quadrature, doubling nodes until the relative change < rtol."""
    if not 0 < eps <= 1:
        raise ValueError("ε must lie in (0, 1]")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = n_start
    prev = _convolve(y, eps, x, order, *_tensor_rule(y.dim, n))
    while n < n_max:
        n *= 2
        cur = _convolve(y, eps, x, order, *_tensor_rule(y.dim, n))
        scale = max(1.0, float(np.max(np.abs(cur)))) if cur.size else 1.0
        change = float(np.max(np.abs(cur - prev))) / scale if cur.size else 0.0
        if change < rtol:
            return cur
        prev = cur
    raise QuadratureError(f"mollification did not converge (last relative change {change:.2e})")


# ------------------------------------------------------------ body force


def stress(W: SitePotential, y: ManufacturedDeformation, x) -> np.ndarray:
    """First Piola stress DW_CB(∇y(x)), shape (n, d, d)."""
    return cauchy_born(W, y.evaluate(x, 1), 1)


def body_force(W: SitePotential, y: ManufacturedDeformation, x) -> np.ndarray:
    """f = -Σ_i ∂_i [DW_CB(∇y)]_{·i}, by the chain rule through D²W_CB and ∇²y."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    L = _cb_tensor(W, y.evaluate(x, 1))                 # (n, j, i, l, m)
    H = y.evaluate(x, 2)                                # (n, l, i, m) = ∂_i ∂_m y_l
    return -np.einsum("njilm,nlim->nj", L, H)


@lru_cache(maxsize=None)
def _cell_rule(d: int):
    g, w = np.polynomial.legendre.leggauss(4)
    nodes = np.stack(np.meshgrid(*([0.5 * g] * d), indexing="ij"), axis=-1).reshape(-1, d)
    wts = np.prod(np.stack(np.meshgrid(*([0.5 * w] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=1)
    return nodes, wts


def cell_average(f, x, eps: float) -> np.ndarray:
    """Average of f over the cubes x + ε(-1/2, 1/2)^d by 4-point Gauss per axis."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] == 0:
        return np.zeros((0, x.shape[1]))
    nodes, wts = _cell_rule(x.shape[1])
    pts = (x[:, None, :] + eps * nodes[None]).reshape(-1, x.shape[1])
    vals = np.asarray(f(pts)).reshape(x.shape[0], nodes.shape[0], -1)
    return np.einsum("q,nqj->nj", wts, vals)


def discrete_residual_field(W: SitePotential, y: ManufacturedDeformation, eps: float, f,
                            domain: LatticeDomain, sample: np.ndarray | None = None) -> DiscreteField:
    """-f̃ - div_{R,ε} DW(D_{R,ε} S_ε y) at interior points.

    ``f`` maps points (n, d) to forces (n, d); ``sample`` may carry a
    precomputed S_ε y on all points.
    """
    if abs(eps - domain.eps) > 1e-15 * max(1.0, eps):
        raise ValueError("ε does not match the domain spacing")
    Sy = mollified_sample(y, eps, domain.coords) if sample is None else sample
    div = domain.divergence(W.gradient(domain.gradient(Sy)))
    ft = cell_average(f, domain.coords[domain.interior], eps)
    return DiscreteField(domain, -ft - div, "interior_only")
