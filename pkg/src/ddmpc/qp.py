"""Self-contained convex QP solver with certified KKT residuals.

Solves problems of the form

    minimize    0.5 z' P z + q' z
    subject to  A_eq z = b_eq
                lb <= A_box z <= ub

via operator splitting (alternating direction) on the stacked constraints.
The equality rows are folded into a single KKT linear system which is
factored once per problem and reused across iterations, so re-solving the
same structure with a new right-hand side (the receding-horizon pattern) is
cheap.  Converged iterates are optionally polished by an exact solve on the
identified active set; a solution is only reported as solved when all four
KKT residuals pass their tolerances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg

# Ratio of the stiff penalty used on equality rows to the box-row penalty.
RHO_EQ_FACTOR = 1e3
RHO_MIN, RHO_MAX = 1e-6, 1e6


class QpStatus(Enum):
    SOLVED = "solved"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"


def _as_matrix(M, d: int, name: str) -> np.ndarray:
    if M is None:
        return np.zeros((0, d))
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] != d:
        raise ValueError(f"{name} must have {d} columns, got {M.shape[1]}")
    return M


def _as_vector(v, size: int, name: str) -> np.ndarray:
    if v is None:
        return np.zeros(0)
    v = np.asarray(v, dtype=float).ravel()
    if v.shape[0] != size:
        raise ValueError(f"{name} must have dimension {size}, got {v.shape[0]}")
    return v


@dataclass(frozen=True)
class QpProblem:
    """Strictly or weakly convex QP with equality and box-expression rows."""

    P: np.ndarray
    q: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_box: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        d = P.shape[0]
        if P.shape != (d, d):
            raise ValueError(f"P must be square, got {P.shape}")
        scale = max(1.0, float(np.max(np.abs(P))))
        if np.max(np.abs(P - P.T)) > 1e-12 * scale:
            raise ValueError("P must be symmetric")
        q = _as_vector(self.q, d, "q")
        A_eq = _as_matrix(self.A_eq, d, "A_eq")
        b_eq = _as_vector(self.b_eq, A_eq.shape[0], "b_eq")
        A_box = _as_matrix(self.A_box, d, "A_box")
        lb = _as_vector(self.lb, A_box.shape[0], "lb")
        ub = _as_vector(self.ub, A_box.shape[0], "ub")
        if np.any(lb > ub):
            raise ValueError("lb must be <= ub componentwise")
        for name, val in (("P", P), ("q", q), ("A_eq", A_eq), ("b_eq", b_eq),
                          ("A_box", A_box), ("lb", lb), ("ub", ub)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def d(self) -> int:
        return self.P.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def n_box(self) -> int:
        return self.A_box.shape[0]

    def objective(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=float).ravel()
        return float(0.5 * z @ self.P @ z + self.q @ z)


@dataclass(frozen=True)
class QpSettings:
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    max_iter: int = 20000
    rho: float = 0.1
    polish: bool = True
    sigma: float = 1e-6
    over_relaxation: float = 1.6
    check_interval: int = 25
    adaptive_rho_interval: int = 50

    def __post_init__(self):
        if self.eps_abs <= 0 or self.eps_rel <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.rho <= 0:
            raise ValueError("step parameter rho must be positive")


class KktResiduals(NamedTuple):
    stationarity: float
    primal_eq: float
    primal_box: float
    comp_slack: float


@dataclass
class QpSolution:
    z: np.ndarray
    dual_eq: np.ndarray
    dual_box: np.ndarray
    objective: float
    status: QpStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    comp_slack: float
    diagnostics: dict = field(default_factory=dict)


def kkt_residuals(problem: QpProblem, z, dual_eq, dual_box) -> KktResiduals:
    """Max-norm KKT residuals of a candidate primal-dual point.

    Box duals follow the convention that positive entries push against the
    upper bound and negative entries against the lower bound.  For infinite
    bounds the complementarity term degenerates, so the magnitude of the
    offending dual itself is reported.
    """
    z = _as_vector(z, problem.d, "z")
    lam = _as_vector(dual_eq, problem.n_eq, "dual_eq")
    mu = _as_vector(dual_box, problem.n_box, "dual_box")

    grad = problem.P @ z + problem.q
    if problem.n_eq:
        grad = grad + problem.A_eq.T @ lam
    if problem.n_box:
        grad = grad + problem.A_box.T @ mu
    stationarity = float(np.max(np.abs(grad))) if problem.d else 0.0

    primal_eq = 0.0
    if problem.n_eq:
        primal_eq = float(np.max(np.abs(problem.A_eq @ z - problem.b_eq)))

    primal_box = 0.0
    comp_slack = 0.0
    if problem.n_box:
        Az = problem.A_box @ z
        low_gap = Az - problem.lb
        up_gap = problem.ub - Az
        viol = np.maximum(0.0, np.maximum(-low_gap, -up_gap))
        primal_box = float(np.max(viol))
        mu_up = np.maximum(mu, 0.0)
        mu_low = np.minimum(mu, 0.0)
        fin_up = np.isfinite(problem.ub)
        fin_low = np.isfinite(problem.lb)
        cs_up = np.where(fin_up, np.abs(mu_up * np.where(fin_up, up_gap, 0.0)),
                         mu_up)
        cs_low = np.where(fin_low,
                          np.abs(mu_low * np.where(fin_low, low_gap, 0.0)),
                          -mu_low)
        comp_slack = float(max(np.max(cs_up), np.max(cs_low)))
    return KktResiduals(stationarity, primal_eq, primal_box, comp_slack)


class QpSolver:
    """Workspace-owning solver; factor once, re-solve with new data.

    Instances hold mutable iterates and must not be shared during a solve;
    independent instances may run concurrently.
    """

    def __init__(self, problem: QpProblem, settings: Optional[QpSettings] = None):
        self.settings = settings or QpSettings()
        self._set_problem(problem)

    def _set_problem(self, problem: QpProblem) -> None:
        self.problem = problem
        d = problem.d
        # Degenerate (semidefinite) costs get a tiny uniqueness ridge; strictly
        # convex problems are left untouched so the regularization structure
        # of the caller is not distorted.
        eigs = np.linalg.eigvalsh(problem.P)
        trace = float(np.trace(problem.P))
        degenerate = eigs[0] <= 1e-14 * max(eigs[-1], 0.0)
        self.ridge = 1e-10 * trace / d if degenerate and trace > 0 else 0.0
        self.P_r = problem.P + self.ridge * np.eye(d)
        self.A = np.vstack([problem.A_eq, problem.A_box])
        self.n_con = self.A.shape[0]
        self.is_eq = np.zeros(self.n_con, dtype=bool)
        self.is_eq[: problem.n_eq] = True
        if problem.n_box:
            self.is_eq[problem.n_eq:] = np.isfinite(problem.lb) & (problem.lb == problem.ub)
        self.lo = np.concatenate([problem.b_eq, problem.lb])
        self.hi = np.concatenate([problem.b_eq, problem.ub])
        self.rho_base = self.settings.rho
        self._build_rho()
        self._factor()
        self._z = np.zeros(d)
        self._y = np.zeros(self.n_con)

    def _build_rho(self) -> None:
        rho = np.full(self.n_con, self.rho_base)
        rho[self.is_eq] *= RHO_EQ_FACTOR
        self.rho = np.clip(rho, RHO_MIN, RHO_MAX)

    def _factor(self) -> None:
        d, nc = self.problem.d, self.n_con
        K = np.zeros((d + nc, d + nc))
        K[:d, :d] = self.P_r + self.settings.sigma * np.eye(d)
        if nc:
            K[:d, d:] = self.A.T
            K[d:, :d] = self.A
            K[d:, d:] = -np.diag(1.0 / self.rho)
        self._lu = scipy.linalg.lu_factor(K)

    def update(self, q=None, b_eq=None, lb=None, ub=None) -> None:
        """Swap problem vectors that do not touch the cached factorization."""
        pb = self.problem
        new = QpProblem(
            P=pb.P,
            q=pb.q if q is None else q,
            A_eq=pb.A_eq if pb.n_eq else None,
            b_eq=(pb.b_eq if b_eq is None else b_eq) if pb.n_eq else None,
            A_box=pb.A_box if pb.n_box else None,
            lb=(pb.lb if lb is None else lb) if pb.n_box else None,
            ub=(pb.ub if ub is None else ub) if pb.n_box else None,
        )
        self.problem = new
        self.lo = np.concatenate([new.b_eq, new.lb])
        self.hi = np.concatenate([new.b_eq, new.ub])

    # -- main loop ---------------------------------------------------------

    def solve(self, z0=None, y0=None) -> QpSolution:
        pb, st = self.problem, self.settings
        d, nc = pb.d, self.n_con
        x = self._z.copy() if z0 is None else _as_vector(z0, d, "z0").copy()
        y = self._y.copy() if y0 is None else _as_vector(y0, nc, "y0").copy()

        if nc == 0:
            z = np.linalg.solve(self.P_r, -pb.q)
            return self._finish(z, y, 0, QpStatus.SOLVED)

        zs = np.clip(self.A @ x, self.lo, self.hi)
        alpha = st.over_relaxation
        stall_limit = int(10 * math.sqrt(st.max_iter))
        best_prim = np.inf
        stalled_since = 0

        for k in range(1, st.max_iter + 1):
            rhs = np.concatenate([st.sigma * x - pb.q, zs - y / self.rho])
            sol = scipy.linalg.lu_solve(self._lu, rhs)
            x_t, nu = sol[:d], sol[d:]
            z_t = zs + (nu - y) / self.rho
            x = alpha * x_t + (1.0 - alpha) * x
            z_relax = alpha * z_t + (1.0 - alpha) * zs
            zs = np.clip(z_relax + y / self.rho, self.lo, self.hi)
            y = y + self.rho * (z_relax - zs)

            if k % st.check_interval != 0 and k != st.max_iter:
                continue

            Ax = self.A @ x
            r_prim = float(np.max(np.abs(Ax - zs)))
            dual_vec = self.P_r @ x + pb.q + self.A.T @ y
            r_dual = float(np.max(np.abs(dual_vec)))
            scale_prim = max(float(np.max(np.abs(Ax))), float(np.max(np.abs(zs))))
            scale_dual = max(float(np.max(np.abs(self.P_r @ x))),
                             float(np.max(np.abs(self.A.T @ y))),
                             float(np.max(np.abs(pb.q))), 1e-30)
            eps_prim = st.eps_abs + st.eps_rel * scale_prim
            eps_dual = st.eps_abs + st.eps_rel * scale_dual
            admm_ok = r_prim <= eps_prim and r_dual <= eps_dual

            # An exact solve on the active set identified by the projected
            # slack usually certifies long before plain iteration would; a
            # polished point is accepted only if it passes the strict check.
            if st.polish and (admm_ok or r_prim <= 1e-4 * (1.0 + scale_prim)):
                polished = self._polish(zs, y)
                if polished is not None and self._passes(*polished):
                    return self._finish(*polished, k, QpStatus.SOLVED,
                                        polished=True)
            if admm_ok and self._passes(x, y):
                return self._finish(x, y, k, QpStatus.SOLVED)

            if r_prim < best_prim * (1.0 - 1e-6):
                best_prim = r_prim
                stalled_since = k
            elif (k - stalled_since >= stall_limit
                  and r_prim > 100.0 * eps_prim):
                return self._finish(x, y, k, QpStatus.INFEASIBLE)

            if k % st.adaptive_rho_interval == 0 and not admm_ok:
                self._adapt_rho(r_prim / max(scale_prim, 1e-30),
                                r_dual / scale_dual)

        return self._finish(x, y, st.max_iter, QpStatus.MAX_ITER)

    # -- helpers -----------------------------------------------------------

    def _split_duals(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return y[: self.problem.n_eq], y[self.problem.n_eq:]

    def _passes(self, z: np.ndarray, y: np.ndarray) -> bool:
        st = self.settings
        lam, mu = self._split_duals(y)
        res = self._residuals(z, lam, mu)
        stat_scale = max(float(np.max(np.abs(self.P_r @ z))),
                         float(np.max(np.abs(self.problem.q))),
                         float(np.max(np.abs(self.A.T @ y))) if self.n_con else 0.0)
        return (res.stationarity <= st.eps_abs + st.eps_rel * stat_scale
                and res.primal_eq <= st.eps_abs
                and res.primal_box <= st.eps_abs
                and res.comp_slack <= st.eps_abs)

    def _residuals(self, z, lam, mu) -> KktResiduals:
        # Residuals of the problem actually solved (ridged P).
        ridged = object.__new__(QpProblem)
        for name, val in (("P", self.P_r), ("q", self.problem.q),
                          ("A_eq", self.problem.A_eq), ("b_eq", self.problem.b_eq),
                          ("A_box", self.problem.A_box), ("lb", self.problem.lb),
                          ("ub", self.problem.ub)):
            object.__setattr__(ridged, name, val)
        return kkt_residuals(ridged, z, lam, mu)

    def _polish(self, zs: np.ndarray, y: np.ndarray):
        """Exact KKT solve on the active set read off the projected slack.

        The projection puts the slack exactly at a bound whenever the row is
        active, so bound membership identifies the working set.  Rows whose
        recovered dual points the wrong way are dropped once and the solve is
        repeated; the caller still verifies the result against the full KKT
        conditions before accepting it.
        """
        pb = self.problem
        if pb.n_box:
            zbox = zs[pb.n_eq:]
            box_eq = np.isfinite(pb.lb) & (pb.lb == pb.ub)
            low = np.isfinite(pb.lb) & (zbox <= pb.lb)
            up = np.isfinite(pb.ub) & (zbox >= pb.ub) & ~low
        else:
            box_eq = low = up = np.zeros(0, dtype=bool)

        for _ in range(2):
            candidate = self._active_set_solve(low, up)
            if candidate is None:
                return None
            z_p, lam_p, mu_p = candidate
            wrong_low = low & ~box_eq & (mu_p > 0)
            wrong_up = up & (mu_p < 0)
            if not wrong_low.any() and not wrong_up.any():
                break
            low = low & ~wrong_low
            up = up & ~wrong_up
        return z_p, np.concatenate([lam_p, mu_p])

    def _active_set_solve(self, low: np.ndarray, up: np.ndarray):
        pb = self.problem
        rows = [pb.A_eq]
        rhs_act = [pb.b_eq]
        if pb.n_box:
            rows += [pb.A_box[low], pb.A_box[up]]
            rhs_act += [pb.lb[low], pb.ub[up]]
        A_act = np.vstack(rows)
        b_act = np.concatenate(rhs_act)
        d, na = pb.d, A_act.shape[0]
        K = np.zeros((d + na, d + na))
        K[:d, :d] = self.P_r
        K[:d, d:] = A_act.T
        K[d:, :d] = A_act
        rhs = np.concatenate([-pb.q, b_act])
        sol = self._refined_solve(K, rhs)
        if sol is None:
            return None
        duals = sol[d:]
        mu_p = np.zeros(pb.n_box)
        if pb.n_box:
            n_low = int(np.count_nonzero(low))
            mu_p[low] = duals[pb.n_eq: pb.n_eq + n_low]
            mu_p[up] = duals[pb.n_eq + n_low:]
        return sol[:d], duals[: pb.n_eq], mu_p

    @staticmethod
    def _refined_solve(K: np.ndarray, rhs: np.ndarray):
        """LU solve with iterative refinement; least-squares fallback for
        degenerate (redundant active set) systems."""
        try:
            lu = scipy.linalg.lu_factor(K)
            with np.errstate(all="ignore"):
                sol = scipy.linalg.lu_solve(lu, rhs)
                for _ in range(2):
                    sol = sol + scipy.linalg.lu_solve(lu, rhs - K @ sol)
            if np.all(np.isfinite(sol)):
                return sol
        except (np.linalg.LinAlgError, ValueError):
            pass
        try:
            sol = scipy.linalg.lstsq(K, rhs, lapack_driver="gelsd")[0]
            for _ in range(2):
                sol = sol + scipy.linalg.lstsq(K, rhs - K @ sol,
                                               lapack_driver="gelsd")[0]
            return sol
        except np.linalg.LinAlgError:
            return None

    def _adapt_rho(self, rel_prim: float, rel_dual: float) -> None:
        ratio = math.sqrt(max(rel_prim, 1e-30) / max(rel_dual, 1e-30))
        ratio = min(max(ratio, 1e-3), 1e3)
        if 0.2 < ratio < 5.0:
            return
        self.rho_base = min(max(self.rho_base * ratio, RHO_MIN), RHO_MAX)
        self._build_rho()
        self._factor()

    def _finish(self, z, y, iterations, status, polished=False) -> QpSolution:
        pb = self.problem
        lam, mu = self._split_duals(y)
        res = self._residuals(z, lam, mu)
        self._z, self._y = np.asarray(z, float).copy(), np.asarray(y, float).copy()
        return QpSolution(
            z=np.asarray(z, dtype=float),
            dual_eq=np.asarray(lam, dtype=float),
            dual_box=np.asarray(mu, dtype=float),
            objective=pb.objective(z),
            status=status,
            iterations=iterations,
            primal_residual=max(res.primal_eq, res.primal_box),
            dual_residual=res.stationarity,
            comp_slack=res.comp_slack,
            diagnostics={"ridge": self.ridge, "rho": self.rho_base,
                         "polished": polished},
        )


def solve(problem: QpProblem, settings: Optional[QpSettings] = None,
          warm_start: Optional[QpSolution] = None) -> QpSolution:
    """One-shot solve; see QpSolver for the re-usable workspace variant."""
    solver = QpSolver(problem, settings)
    if warm_start is not None:
        y0 = np.concatenate([warm_start.dual_eq, warm_start.dual_box])
        return solver.solve(z0=warm_start.z, y0=y0)
    return solver.solve()
