"""Atomistic Dirichlet problem: residual, Hessian, solvers, IFT constants and minimality.

The unknown is split as y = S_ε y + T_ε(g_atom - S_ε y) + u, where S_ε y is
the sampled continuum solution (the base point), T_ε the discrete harmonic
extension carrying the boundary mismatch and u a correction vanishing on the
boundary layer.  Corrections u are stored as interior values of shape
``(n_int, d)``; full fields have shape ``(n_points, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, lobpcg
from scipy.stats import norm as normal_dist, qmc

from .continuum import ManufacturedDeformation, body_force, cell_average, mollified_sample
from .lattice import DiscreteField, LatticeDomain
from .potentials import PotentialSingularity, SitePotential


class SolverError(RuntimeError):
    pass


class StabilityLost(SolverError):
    pass


class DivergenceError(SolverError):
    pass


class BallExit(SolverError):
    pass


class HypothesisViolation(SolverError):
    pass


class UnstableReference(ValueError):
    pass


class AdmissibilityError(ValueError):
    pass


class _OutOfDomain:
    """Marker returned by ``energy`` when boundary values differ from g_atom."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "OUT_OF_DOMAIN"

    def __bool__(self):
        return False


OUT_OF_DOMAIN = _OutOfDomain()


# ------------------------------------------------------------------ problem


@dataclass
class AtomisticProblem:
    domain: LatticeDomain
    potential: SitePotential
    base: np.ndarray                 # S_ε y on all points
    g_atom: np.ndarray               # boundary-layer values
    f_atom: np.ndarray               # interior forces
    gamma: float = 2.0
    f_tilde: np.ndarray | None = None
    A0: np.ndarray | None = None
    boundary_mismatch: float = field(init=False)
    force_mismatch: float = field(init=False)

    def __post_init__(self):
        dom = self.domain
        d = dom.dim
        self.base = np.asarray(self.base, dtype=float)
        self.g_atom = np.asarray(self.g_atom, dtype=float)
        self.f_atom = np.asarray(self.f_atom, dtype=float)
        if self.base.shape != (dom.n_points, d):
            raise ValueError("base point must be given on all points")
        if self.g_atom.shape != (dom.n_boundary, d):
            raise ValueError("g_atom must be given on the boundary layer")
        if self.f_atom.shape != (dom.n_interior, d):
            raise ValueError("f_atom must be given on the interior")
        if dom.n_interior == 0:
            raise ValueError("problem has no interior points")
        if self.f_tilde is not None:
            self.f_tilde = np.asarray(self.f_tilde, dtype=float)
        if self.A0 is not None:
            self.A0 = np.asarray(self.A0, dtype=float)
        if not (d / 2.0 <= self.gamma <= 2.0):
            raise ValueError("gamma must lie in [d/2, 2]")
        check_admissible(self, self.base)
        self.lift = dom.harmonic_extension(self.g_atom - self.base[dom.boundary])
        offset = self.base + self.lift
        offset[dom.boundary] = self.g_atom
        self.offset = offset
        self.boundary_mismatch = dom.h1_norm(self.lift)
        self.force_mismatch = (dom.hminus1_norm(self.f_atom - self.f_tilde)
                               if self.f_tilde is not None else float("nan"))

    @property
    def eps(self) -> float:
        return self.domain.eps

    @property
    def n_dof(self) -> int:
        return self.domain.n_interior * self.domain.dim

    def full(self, u: np.ndarray) -> np.ndarray:
        """S_ε y + T_ε(g_atom - S_ε y) + u as a field on all points."""
        return self.offset + self.domain.embed(u)


def manufactured_problem(W: SitePotential, y: ManufacturedDeformation, shape, eps: float,
                         gamma: float = 2.0) -> AtomisticProblem:
    """Unperturbed atomistic problem for a manufactured deformation.

    The base point is the mollified sample S_ε y, f̃ is the cell average of the
    continuum body force and the data are unperturbed: g_atom = S_ε y on the
    boundary layer and f_atom = f̃.
    """
    dom = LatticeDomain(shape, eps, W.stencil)
    base = mollified_sample(y, eps, dom.coords)
    f_tilde = cell_average(lambda x: body_force(W, y, x), dom.coords[dom.interior], eps)
    return AtomisticProblem(dom, W, base, base[dom.boundary], f_tilde, gamma=gamma,
                            f_tilde=f_tilde, A0=y.A0)


def check_admissible(problem: AtomisticProblem, y: np.ndarray) -> np.ndarray:
    """Bond matrices of y on the semi-interior, raising with the offending point on failure."""
    A = problem.domain.gradient(y)
    try:
        problem.potential.check_admissible(A)
    except PotentialSingularity as exc:
        dom = problem.domain
        for s in range(dom.n_semi):
            try:
                problem.potential.check_admissible(A[s])
            except PotentialSingularity:
                x = dom.coords[dom.semi[s]]
                raise AdmissibilityError(f"{exc} at lattice point {np.round(x, 12).tolist()}") from None
        raise
    return A


def residual(problem: AtomisticProblem, u: np.ndarray) -> np.ndarray:
    """-f_atom - div DW(D(S_ε y + T_ε g + u)) at interior points."""
    A = check_admissible(problem, problem.full(u))
    return -problem.f_atom - problem.domain.divergence(problem.potential.gradient(A))


# ------------------------------------------------------------------ Hessian


class HessianOperator:
    """v ↦ -div(D²W(D w)[D v]) for v vanishing on the boundary layer."""

    def __init__(self, problem: AtomisticProblem, w: np.ndarray):
        self.problem = problem
        self.domain = problem.domain
        W = problem.potential
        A = check_admissible(problem, w)
        if hasattr(W, "hessian_blocks"):
            self._blocks = W.hessian_blocks(A)          # (n_semi, R, d, d)
            self._full = None
        else:
            self._blocks = None
            self._full = W.hessian(A)                   # (n_semi, d, R, d, R)

    def _stress(self, Dv):
        if self._blocks is not None:
            return np.einsum("nrjl,nlr->njr", self._blocks, Dv)
        return np.einsum("njrls,nls->njr", self._full, Dv)

    def apply(self, v: np.ndarray) -> np.ndarray:
        dom = self.domain
        return -dom.divergence(self._stress(dom.gradient(dom.embed(v))))

    __call__ = apply

    def form(self, v1, v2) -> float:
        """ε^d Σ D²W[Dv1, Dv2] over the semi-interior."""
        dom = self.domain
        D1 = dom.gradient(dom.embed(v1))
        D2 = dom.gradient(dom.embed(v2))
        return dom.eps ** dom.dim * float(np.sum(self._stress(D1) * D2))

    def assemble(self) -> sp.csr_matrix:
        """Sparse matrix on interior dofs flattened as (point, component)."""
        dom = self.domain
        d, R = dom.dim, dom.stencil.size
        G_int = dom._gradient_split[0]
        Gv = sp.kron(G_int, sp.identity(d), format="csr")
        if self._blocks is not None:
            blocks = np.einsum("nrjl,rs->nrjsl", self._blocks, np.eye(R))
        else:
            blocks = np.transpose(self._full, (0, 2, 1, 4, 3))
        blocks = blocks.reshape(dom.n_semi, R * d, R * d)
        BD = sp.block_diag(list(blocks), format="csr")
        return (Gv.T @ BD @ Gv).tocsr()


def hessian_apply(problem: AtomisticProblem, w: np.ndarray, v: np.ndarray) -> np.ndarray:
    return HessianOperator(problem, w).apply(v)


def linear_solve(problem: AtomisticProblem, w: np.ndarray, rhs: np.ndarray, tol: float = 1e-10,
                 max_iter: int = 2000) -> np.ndarray:
    """Solve H(w)·u = rhs for u vanishing on the boundary layer."""
    return pcg(HessianOperator(problem, w), rhs, tol=tol, max_iter=max_iter)


def pcg(op: HessianOperator, rhs: np.ndarray, tol: float = 1e-10,
        max_iter: int = 2000, x0: np.ndarray | None = None) -> np.ndarray:
    """Preconditioned CG for op·u = rhs with the discrete Laplacian as preconditioner.

    The stopping test uses the preconditioned residual, which is the h⁻¹ norm
    of the residual up to the factor ε^d.  A direction of nonpositive
    curvature aborts with StabilityLost.
    """
    dom = op.domain
    b = np.asarray(rhs, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - op.apply(x) if x0 is not None else b.copy()
    z = dom.solve_laplacian(r)
    b_norm = math.sqrt(max(float(np.sum(b * dom.solve_laplacian(b))), 0.0))
    if b_norm == 0.0:
        return np.zeros_like(b)
    rz = float(np.sum(r * z))
    p = z.copy()
    for _ in range(max_iter):
        if math.sqrt(max(rz, 0.0)) <= tol * b_norm:
            return x
        Ap = op.apply(p)
        curv = float(np.sum(p * Ap))
        if curv <= 0.0:
            raise StabilityLost("stability lost at linearization point")
        alpha = rz / curv
        x += alpha * p
        r -= alpha * Ap
        z = dom.solve_laplacian(r)
        rz_new = float(np.sum(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    if math.sqrt(max(rz, 0.0)) <= tol * b_norm:
        return x
    raise SolverError(f"CG reached {max_iter} iterations (relative residual "
                      f"{math.sqrt(max(rz, 0.0)) / b_norm:.2e})")


# --------------------------------------------------------- IFT constants


@dataclass
class IFTConstants:
    A: float
    M1: float
    M2: float
    M3: float
    M4: float
    lambda1: float
    lambda2: float
    rho_eps: float
    tau_eps: float
    hypothesis_ok: bool
    r1: float
    r2: float
    eps: float
    gamma: float
    lambda_atom: float
    base_residual_l2: float
    base_residual_hminus1: float
    sample_radius: float
    admissible_radius: float
    n_samples: int
    inflation: float

    @property
    def K2(self) -> float:
        return 0.5 * self.lambda2

    @property
    def K3(self) -> float:
        return self.lambda1 + 0.5 * self.lambda2

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items()}
        out["K2"] = self.K2
        out["K3"] = self.K3
        return out


def _inv(x: float) -> float:
    return math.inf if x == 0.0 else 1.0 / x


def _ball_samples(center: np.ndarray, radius: float, n: int, seed: int) -> np.ndarray:
    """Quasi-random points in a Frobenius ball around ``center`` plus single-bond extremes."""
    shape = center.shape
    m = center.size
    u = qmc.Halton(d=m + 1, scramble=True, seed=seed).random(n)
    g = normal_dist.ppf(np.clip(u[:, :m], 1e-12, 1 - 1e-12))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    rad = radius * u[:, m] ** (1.0 / m)
    pts = center.reshape(1, -1) + g * rad[:, None]
    # push each bond alone to the ball boundary, along and against itself
    d, R = shape
    extra = []
    for r in range(R):
        b = center[:, r]
        nb = np.linalg.norm(b)
        dirs = [b / nb] if nb > 0 else []
        dirs += [np.eye(d)[j] for j in range(d)]
        for v in dirs:
            for s in (-1.0, 1.0):
                E = np.zeros(shape)
                E[:, r] = s * radius * v
                extra.append((center + E).reshape(-1))
    pts = np.concatenate([center.reshape(1, -1), pts, np.array(extra)])
    return pts.reshape((-1,) + shape)


def ift_constants(problem: AtomisticProblem, lambda_atom: float, r1: float, r2: float,
                  n_samples: int = 1000, inflation: float = 1.1, seed: int = 0) -> IFTConstants:
    """Measured constants for the quantitative implicit function theorem.

    D²W and D³W are sampled on the ball of bond matrices around (A0ρ)_ρ that
    contains every D(S_ε y + T_ε g + u) with ‖u‖ ≤ r1·ε^{d/2} and
    ‖g‖ ≤ r2·ε^{d/2}, i.e. radius max_x |D S_ε y(x) - (A0ρ)| + r1 + r2,
    capped at the potential's admissible radius.
    """
    if not lambda_atom > 0:
        raise UnstableReference("unstable reference: λ_atom(A0) <= 0")
    if problem.A0 is None:
        raise ValueError("problem needs the reference gradient A0")
    dom = problem.domain
    W = problem.potential
    eps, d = dom.eps, dom.dim
    f_tilde = problem.f_tilde if problem.f_tilde is not None else problem.f_atom
    A_base = check_admissible(problem, problem.base)
    F00 = -f_tilde - dom.divergence(W.gradient(A_base))
    l2 = dom.l2_norm(F00)
    A = dom.poincare_constant * l2 / eps ** 2
    M1 = 2.0 / lambda_atom

    center = W.stencil.bonds(problem.A0)
    dev = float(np.max(np.sqrt(np.sum((A_base - center) ** 2, axis=(1, 2)))))
    adm = W.admissible_radius(center)
    radius = min(dev + r1 + r2, adm)
    pts = _ball_samples(center, radius, n_samples, seed)
    M2 = 1.0 + inflation * float(np.max(W.hessian_norm(pts)))
    M3 = inflation * float(np.max(W.third_norm_bound(pts)))
    M4 = M3

    third = _inv(3.0 * M1 * M3)
    lam1 = min(r1, third)
    lam2 = min(r2, third, lam1 / (3.0 * M1 * M2))
    ok = A <= min(r1 / (3.0 * M1), _inv(9.0 * M1 ** 2 * M3))
    out = IFTConstants(A=A, M1=M1, M2=M2, M3=M3, M4=M4, lambda1=lam1, lambda2=lam2,
                       rho_eps=lam1 * eps ** problem.gamma, tau_eps=lam2 * eps ** problem.gamma,
                       hypothesis_ok=bool(ok), r1=r1, r2=r2, eps=eps, gamma=problem.gamma,
                       lambda_atom=lambda_atom, base_residual_l2=l2,
                       base_residual_hminus1=dom.hminus1_norm(F00), sample_radius=radius,
                       admissible_radius=adm, n_samples=int(n_samples), inflation=inflation)
    return out


def contraction_bound(c: IFTConstants, dim: int) -> float:
    """κ₂·ω(ρ_ε, τ_ε) = 2·M1·M3·ε^{γ-d/2}·(λ1 + λ2) from the instantiated modulus."""
    return 2.0 * c.M1 * c.M3 * c.eps ** (c.gamma - dim / 2.0) * (c.lambda1 + c.lambda2)


# ------------------------------------------------------------------ solves


@dataclass
class SolveReport:
    solution: DiscreteField
    u: np.ndarray
    method: str
    iterations: int
    contraction_estimates: list
    residual_history: list
    final_residual_hminus1: float
    distance_to_base: float
    certified_min_rayleigh: float | None = None
    ball_radius: float | None = None
    max_iterate_norm: float = 0.0

    def to_dict(self) -> dict:
        return {"method": self.method, "iterations": self.iterations,
                "contraction_estimates": list(self.contraction_estimates),
                "residual_history": list(self.residual_history),
                "final_residual_hminus1": self.final_residual_hminus1,
                "distance_to_base": self.distance_to_base,
                "certified_min_rayleigh": self.certified_min_rayleigh,
                "ball_radius": self.ball_radius, "max_iterate_norm": self.max_iterate_norm}


def solve_bvp(problem: AtomisticProblem, method: str = "newton", tol: float = 1e-10,
              max_iter: int = 50, initial: np.ndarray | None = None,
              ift: IFTConstants | None = None, override: bool = False,
              certify: bool = False, cg_tol: float = 1e-12) -> SolveReport:
    """Solve F(u) = 0 by frozen-Hessian fixed point or Newton iteration.

    Terminates when ‖F(u)‖_{h⁻¹} ≤ tol·max(1, ‖F(u0)‖_{h⁻¹}).  In fixed-point
    mode with a valid IFT record the iterates must stay in the ρ_ε ball.
    """
    if method not in ("fixed_point", "newton"):
        raise ValueError(f"unknown method {method!r}")
    dom = problem.domain
    if method == "fixed_point" and not override:
        if ift is None:
            raise HypothesisViolation("fixed_point needs IFT constants or override=True")
        if not ift.hypothesis_ok:
            raise HypothesisViolation("IFT smallness hypothesis fails (A too large)")
    enforce_ball = method == "fixed_point" and ift is not None and ift.hypothesis_ok and not override
    ball = ift.rho_eps if ift is not None else None

    u = np.zeros((dom.n_interior, dom.dim)) if initial is None else np.array(initial, dtype=float)
    if u.shape != (dom.n_interior, dom.dim):
        raise ValueError("initial guess must be interior values")

    def h1(v):
        return dom.h1_norm(dom.embed(v))

    def check_ball(v):
        n = h1(v)
        if enforce_ball and n > ball * (1.0 + 1e-9):
            raise BallExit(f"iterate left the ρ_ε ball (‖u‖ = {n:.3e} > ρ_ε = {ball:.3e})")
        return n

    max_norm = check_ball(u)
    F = residual(problem, u)
    res0 = dom.hminus1_norm(F)
    target = tol * max(1.0, res0)
    history = [res0]
    ratios = []
    frozen = HessianOperator(problem, problem.base) if method == "fixed_point" else None
    prev_step = None
    streak = 0
    it = 0
    floor = 1e-13 * max(1.0, dom.h1_norm(problem.offset))
    while history[-1] > target:
        if it >= max_iter:
            raise DivergenceError(f"no convergence after {max_iter} iterations "
                                  f"(residual {history[-1]:.3e})")
        op = frozen if frozen is not None else HessianOperator(problem, problem.full(u))
        step = pcg(op, -F, tol=cg_tol)
        u = u + step
        it += 1
        max_norm = max(max_norm, check_ball(u))
        F = residual(problem, u)
        history.append(dom.hminus1_norm(F))
        s = h1(step)
        if prev_step is not None and prev_step > floor:
            ratio = s / prev_step
            ratios.append(ratio)
            streak = streak + 1 if ratio >= 1.0 else 0
            if streak >= 3:
                raise DivergenceError("contraction ratio ≥ 1 for three consecutive steps")
        prev_step = s
    y = problem.full(u)
    y[dom.boundary] = problem.g_atom
    rep = SolveReport(solution=DiscreteField(dom, y), u=u, method=method, iterations=it,
                      contraction_estimates=ratios,
                      residual_history=history, final_residual_hminus1=history[-1],
                      distance_to_base=dom.h1_norm(y - problem.base), ball_radius=ball,
                      max_iterate_norm=max_norm)
    if certify:
        rep.certified_min_rayleigh = certify_minimizer(problem, y)
    return rep


# ------------------------------------------------------- minimality, energy


def certify_minimizer(problem: AtomisticProblem, y: np.ndarray, dense_limit: int = 1600,
                      tol: float = 1e-6, seed: int = 0) -> float:
    """min over v ∈ A_ε(Ω,0) of ⟨H(y)v, v⟩ / ‖v‖²_{h¹}.

    Small problems use a dense generalized symmetric eigensolve; larger ones
    use LOBPCG with the h¹ Gram matrix as mass and its inverse as preconditioner.
    """
    dom = problem.domain
    H = HessianOperator(problem, y).assemble()
    B = sp.kron(dom.laplacian, sp.identity(dom.dim), format="csr")
    n = H.shape[0]
    if n <= dense_limit:
        w = scipy.linalg.eigh(H.toarray(), B.toarray(), eigvals_only=True, subset_by_index=[0, 0])
        return float(w[0])
    d = dom.dim

    def prec(x):
        x = np.asarray(x)
        cols = x.reshape(dom.n_interior, d, -1)
        out = np.stack([dom._laplacian_lu.solve(np.ascontiguousarray(cols[:, j, :])) for j in range(d)], axis=1)
        return out.reshape(x.shape)

    M = LinearOperator((n, n), matvec=prec, matmat=prec, dtype=float)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 4))
    vals, _ = lobpcg(H, X, B=B, M=M, largest=False, tol=tol * 1e-2, maxiter=500)
    return float(np.min(vals))


def energy(problem: AtomisticProblem, y: np.ndarray, rtol: float = 1e-12):
    """ε^d Σ_semi W(D y) - ε^d Σ_points y·f, or OUT_OF_DOMAIN when y misses g_atom."""
    dom = problem.domain
    y = np.asarray(y, dtype=float)
    g = problem.g_atom
    scale = max(1.0, float(np.max(np.abs(g))))
    if y.shape != (dom.n_points, dom.dim) or np.max(np.abs(y[dom.boundary] - g)) > rtol * scale:
        return OUT_OF_DOMAIN
    vol = dom.eps ** dom.dim
    site = problem.potential.energy(dom.gradient(y))
    return vol * float(np.sum(site)) - vol * float(np.sum(y[dom.interior] * problem.f_atom))
