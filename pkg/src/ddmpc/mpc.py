"""Data-driven predictive control without terminal ingredients.

Assembles the per-step quadratic programs of the nominal (noise-free) and
robust (noisy-data) schemes directly from Hankel matrices of recorded data,
plus a terminal-equality-constraint baseline for comparison, and runs the
receding-horizon closed loop: solve, apply the first input, advance the
plant, repeat.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .behavior import DataSet, PersistencyError, check_pe, hankel
from .lti import ExtendedState, LtiSystem, extend_system, lag, simulate
from .qp import QpProblem, QpSettings, QpSolution, QpSolver, QpStatus


class MpcVariant(Enum):
    NOMINAL = "nominal"
    ROBUST = "robust"
    ROBUST_TEC = "robust_tec"


def _weight_matrix(W, size: int, name: str) -> np.ndarray:
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if W.shape == (1, 1) and size > 1:
        W = W[0, 0] * np.eye(size)
    if W.shape != (size, size):
        raise ValueError(f"{name} must be {size}x{size}, got {W.shape}")
    if np.max(np.abs(W - W.T)) > 1e-12 * max(1.0, np.max(np.abs(W))):
        raise ValueError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(W)) <= 0:
        raise ValueError(f"{name} must be positive definite")
    return W


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, weights, regularization, constraints and variant selection.

    ``lambda_alpha_times_eps`` and ``lambda_sigma_over_eps`` are the
    coefficients that multiply the squared norms of the combination vector and
    the slack in the robust cost; they already include the noise-bound
    scaling, matching how the scheme is usually parametrized.
    """

    L: int
    l: int
    Q: np.ndarray
    R: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    u_setpoint: np.ndarray
    y_setpoint: np.ndarray
    variant: MpcVariant = MpcVariant.NOMINAL
    eps_bar: float = 0.0
    lambda_alpha_times_eps: float = 0.0
    lambda_sigma_over_eps: float = 0.0
    T_sim: int = 1

    def __post_init__(self):
        if self.L < 1 or self.l < 1:
            raise ValueError("horizon L and window length l must be >= 1")
        u_s = np.asarray(self.u_setpoint, dtype=float).ravel()
        y_s = np.asarray(self.y_setpoint, dtype=float).ravel()
        m, p = u_s.shape[0], y_s.shape[0]
        Q = _weight_matrix(self.Q, p, "Q")
        R = _weight_matrix(self.R, m, "R")
        u_min = np.asarray(self.u_min, dtype=float).ravel()
        u_max = np.asarray(self.u_max, dtype=float).ravel()
        if u_min.shape[0] != m or u_max.shape[0] != m:
            raise ValueError("u_min/u_max must match the input dimension")
        if np.any(u_min > u_s) or np.any(u_s > u_max):
            raise ValueError("input setpoint must lie inside [u_min, u_max]")
        if self.variant is MpcVariant.ROBUST_TEC and self.L <= self.l:
            raise ValueError("terminal-equality variant needs L > l")
        if self.eps_bar < 0:
            raise ValueError("eps_bar must be >= 0")
        if self.T_sim < 1:
            raise ValueError("T_sim must be >= 1")
        for name, val in (("Q", Q), ("R", R), ("u_min", u_min),
                          ("u_max", u_max), ("u_setpoint", u_s),
                          ("y_setpoint", y_s)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def m(self) -> int:
        return self.u_setpoint.shape[0]

    @property
    def p(self) -> int:
        return self.y_setpoint.shape[0]

    def with_noise_level(self, eps_bar: float) -> "MpcConfig":
        """Rescale to a new noise bound keeping the underlying regularization
        weights fixed, so the coefficient on the combination vector shrinks
        with the noise and the one on the slack grows."""
        if self.eps_bar <= 0 or eps_bar <= 0:
            raise ValueError("noise rescaling needs positive noise bounds")
        factor = eps_bar / self.eps_bar
        return replace(
            self,
            eps_bar=eps_bar,
            lambda_alpha_times_eps=self.lambda_alpha_times_eps * factor,
            lambda_sigma_over_eps=self.lambda_sigma_over_eps / factor,
        )

    def digest(self) -> str:
        payload = {
            "L": self.L, "l": self.l,
            "Q": self.Q.tolist(), "R": self.R.tolist(),
            "u_min": self.u_min.tolist(), "u_max": self.u_max.tolist(),
            "u_setpoint": self.u_setpoint.tolist(),
            "y_setpoint": self.y_setpoint.tolist(),
            "variant": self.variant.value, "eps_bar": self.eps_bar,
            "lambda_alpha_times_eps": self.lambda_alpha_times_eps,
            "lambda_sigma_over_eps": self.lambda_sigma_over_eps,
            "T_sim": self.T_sim,
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class MpcProblemData:
    """Hankel pair of order L+l plus bookkeeping, built once and reused."""

    Hu: np.ndarray
    Hy: np.ndarray
    L: int
    l: int
    m: int
    p: int
    pe_min_singular_value: float

    @property
    def n_cols(self) -> int:
        return self.Hu.shape[1]

    @property
    def Hu_past(self) -> np.ndarray:
        return self.Hu[: self.l * self.m]

    @property
    def Hu_future(self) -> np.ndarray:
        return self.Hu[self.l * self.m:]

    @property
    def Hy_past(self) -> np.ndarray:
        return self.Hy[: self.l * self.p]

    @property
    def Hy_future(self) -> np.ndarray:
        return self.Hy[self.l * self.p:]


def precompute(dataset: DataSet, config: MpcConfig,
               n_state: Optional[int] = None) -> MpcProblemData:
    """Build the Hankel pair and certify excitation before any solve.

    ``n_state`` is the dimension of the data-generating system, entering the
    required excitation order L + l + n; when unknown it defaults to the
    upper bound l*p implied by observability of the window.
    """
    if dataset.m != config.m or dataset.p != config.p:
        raise ValueError("dataset channel counts do not match the config")
    if n_state is None:
        n_state = config.l * config.p
    pe = check_pe(dataset.u_d, config.L + config.l, n_state)
    if not pe.passes:
        raise PersistencyError(
            f"input data not persistently exciting of order {pe.order} "
            f"(min singular value {pe.min_singular_value:.3e})")

    if config.variant is MpcVariant.NOMINAL:
        if dataset.eps_bar != 0.0:
            raise ValueError("nominal variant requires noise-free data")
        y_source = (dataset.y_d_clean if dataset.y_d_clean is not None
                    else dataset.y_d_noisy)
    else:
        y_source = dataset.y_d_noisy

    return MpcProblemData(
        Hu=hankel(dataset.u_d, config.L + config.l),
        Hy=hankel(y_source, config.L + config.l),
        L=config.L, l=config.l, m=dataset.m, p=dataset.p,
        pe_min_singular_value=pe.min_singular_value,
    )


def _stage_weights(config: MpcConfig) -> tuple[np.ndarray, np.ndarray,
                                               np.ndarray, np.ndarray]:
    Wu = np.kron(np.eye(config.L), config.R)
    Wy = np.kron(np.eye(config.L), config.Q)
    r_u = np.tile(config.u_setpoint, config.L)
    r_y = np.tile(config.y_setpoint, config.L)
    return Wu, Wy, r_u, r_y


def build_nominal(pd: MpcProblemData, config: MpcConfig,
                  xi: ExtendedState) -> QpProblem:
    """Noise-free scheme: decision vector is the data-combination vector."""
    if config.variant is not MpcVariant.NOMINAL:
        raise ValueError("config variant must be NOMINAL")
    if config.eps_bar != 0.0:
        raise ValueError("nominal scheme requires eps_bar = 0")
    Gu, Gy = pd.Hu_future, pd.Hy_future
    Wu, Wy, r_u, r_y = _stage_weights(config)
    P = 2.0 * (Gu.T @ Wu @ Gu + Gy.T @ Wy @ Gy)
    q = -2.0 * (Gu.T @ (Wu @ r_u) + Gy.T @ (Wy @ r_y))
    A_eq = np.vstack([pd.Hu_past, pd.Hy_past])
    b_eq = np.concatenate([xi.u_window.ravel(), xi.y_window.ravel()])
    return QpProblem(
        P=P, q=q, A_eq=A_eq, b_eq=b_eq, A_box=Gu,
        lb=np.tile(config.u_min, config.L),
        ub=np.tile(config.u_max, config.L),
    )


def build_robust(pd: MpcProblemData, config: MpcConfig,
                 xi_tilde: ExtendedState) -> QpProblem:
    """Noisy-data scheme: combination vector plus an output slack.

    The slack spans all L+l output blocks and absorbs the mismatch between
    the noisy Hankel predictions and the predicted outputs; both it and the
    combination vector are quadratically regularized.  No constraint couples
    the slack to the combination vector's 1-norm: the regularization keeps
    the slack small on its own, which is what keeps the problem a QP.
    """
    if config.variant not in (MpcVariant.ROBUST, MpcVariant.ROBUST_TEC):
        raise ValueError("config variant must be ROBUST or ROBUST_TEC")
    if config.eps_bar <= 0.0:
        raise ValueError("robust scheme requires eps_bar > 0")
    nc = pd.n_cols
    L, l, m, p = pd.L, pd.l, pd.m, pd.p
    ns = (L + l) * p
    Gu, Gy = pd.Hu_future, pd.Hy_future
    Wu, Wy, r_u, r_y = _stage_weights(config)

    sig_future = np.hstack([np.zeros((L * p, l * p)), np.eye(L * p)])
    sig_past = np.hstack([np.eye(l * p), np.zeros((l * p, L * p))])

    P = np.zeros((nc + ns, nc + ns))
    P[:nc, :nc] = 2.0 * (Gu.T @ Wu @ Gu + Gy.T @ Wy @ Gy
                         + config.lambda_alpha_times_eps * np.eye(nc))
    P_as = -2.0 * (Gy.T @ Wy @ sig_future)
    P[:nc, nc:] = P_as
    P[nc:, :nc] = P_as.T
    P[nc:, nc:] = 2.0 * (sig_future.T @ Wy @ sig_future
                         + config.lambda_sigma_over_eps * np.eye(ns))
    q = np.concatenate([
        -2.0 * (Gu.T @ (Wu @ r_u) + Gy.T @ (Wy @ r_y)),
        2.0 * (sig_future.T @ (Wy @ r_y)),
    ])
    A_eq = np.block([
        [pd.Hu_past, np.zeros((l * m, ns))],
        [pd.Hy_past, -sig_past],
    ])
    b_eq = np.concatenate([xi_tilde.u_window.ravel(), xi_tilde.y_window.ravel()])
    A_box = np.hstack([Gu, np.zeros((L * m, ns))])
    return QpProblem(
        P=P, q=q, A_eq=A_eq, b_eq=b_eq, A_box=A_box,
        lb=np.tile(config.u_min, L), ub=np.tile(config.u_max, L),
    )


def add_terminal_equality(qp: QpProblem, pd: MpcProblemData,
                          config: MpcConfig) -> QpProblem:
    """Pin the last l predicted steps to the setpoint equilibrium."""
    if config.L <= config.l:
        raise ValueError("terminal window needs L > l")
    L, l, m, p = pd.L, pd.l, pd.m, pd.p
    nc = pd.n_cols
    ns = (L + l) * p
    if qp.d != nc + ns:
        raise ValueError("terminal rows expect a robust-scheme problem")
    Hu_term = pd.Hu[L * m:]
    Hy_term = pd.Hy[L * p:]
    sig_term = np.hstack([np.zeros((l * p, L * p)), np.eye(l * p)])
    rows_u = np.hstack([Hu_term, np.zeros((l * m, ns))])
    rows_y = np.hstack([Hy_term, -sig_term])
    A_eq = np.vstack([qp.A_eq, rows_u, rows_y])
    b_eq = np.concatenate([qp.b_eq, np.tile(config.u_setpoint, l),
                           np.tile(config.y_setpoint, l)])
    return QpProblem(P=qp.P, q=qp.q, A_eq=A_eq, b_eq=b_eq,
                     A_box=qp.A_box, lb=qp.lb, ub=qp.ub)


def build_step_problem(pd: MpcProblemData, config: MpcConfig,
                       xi: ExtendedState) -> QpProblem:
    """Variant dispatch used by the closed loop."""
    if config.variant is MpcVariant.NOMINAL:
        return build_nominal(pd, config, xi)
    qp = build_robust(pd, config, xi)
    if config.variant is MpcVariant.ROBUST_TEC:
        qp = add_terminal_equality(qp, pd, config)
    return qp


@dataclass
class MpcSolution:
    """Optimal open-loop plan recovered from a QP solution."""

    u_bar: np.ndarray
    y_bar: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    j_star: float
    qp: QpSolution


def mpc_solution(pd: MpcProblemData, config: MpcConfig,
                 qp_sol: QpSolution) -> MpcSolution:
    nc = pd.n_cols
    L, l, m, p = pd.L, pd.l, pd.m, pd.p
    alpha = qp_sol.z[:nc]
    sigma = qp_sol.z[nc:] if qp_sol.z.shape[0] > nc else np.zeros((L + l) * p)
    u_bar = (pd.Hu @ alpha).reshape(L + l, m)
    y_bar = (pd.Hy @ alpha - sigma).reshape(L + l, p)
    du = u_bar[l:] - config.u_setpoint
    dy = y_bar[l:] - config.y_setpoint
    j = float(np.einsum("ki,ij,kj->", du, config.R, du)
              + np.einsum("ki,ij,kj->", dy, config.Q, dy))
    if config.variant is not MpcVariant.NOMINAL:
        j += (config.lambda_alpha_times_eps * float(alpha @ alpha)
              + config.lambda_sigma_over_eps * float(sigma @ sigma))
    return MpcSolution(u_bar=u_bar, y_bar=y_bar, alpha=alpha, sigma=sigma,
                       j_star=j, qp=qp_sol)


@dataclass
class ClosedLoopLog:
    """Per-step record of one receding-horizon run."""

    t: np.ndarray
    u: np.ndarray
    y: np.ndarray
    y_tilde: np.ndarray
    j_star: np.ndarray
    alpha_norm: np.ndarray
    sigma_norm: np.ndarray
    iterations: np.ndarray
    status: list
    variant: str = ""
    config_digest: str = ""
    seed: Optional[int] = None
    aborted: bool = False
    abort_reason: Optional[str] = None
    y_pred0: Optional[np.ndarray] = None
    qp_primal_residual: Optional[np.ndarray] = None
    qp_dual_residual: Optional[np.ndarray] = None
    qp_comp_slack: Optional[np.ndarray] = None
    init_u: Optional[np.ndarray] = None
    init_y_true: Optional[np.ndarray] = None
    init_y_meas: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    @property
    def p(self) -> int:
        return self.y.shape[1]

    def _channel_headers(self) -> list:
        def group(base: str, count: int) -> list:
            return [base] if count == 1 else [f"{base}_{i}" for i in range(count)]
        return (["t"] + group("u", self.m) + group("y", self.p)
                + group("y_tilde", self.p)
                + ["J_star", "alpha_norm", "sigma_norm", "iters", "status"])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self._channel_headers())
            for k in range(len(self)):
                row = [int(self.t[k])]
                row += [repr(float(v)) for v in self.u[k]]
                row += [repr(float(v)) for v in self.y[k]]
                row += [repr(float(v)) for v in self.y_tilde[k]]
                row += [repr(float(self.j_star[k])),
                        repr(float(self.alpha_norm[k])),
                        repr(float(self.sigma_norm[k])),
                        int(self.iterations[k]), self.status[k]]
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path, variant: str = "", config_digest: str = "",
                 seed: Optional[int] = None) -> "ClosedLoopLog":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [row for row in reader if row]
        m = sum(1 for h in header if h == "u" or h.startswith("u_"))
        p = sum(1 for h in header if h == "y" or (h.startswith("y_")
                and not h.startswith("y_tilde")))
        T = len(rows)
        log = cls(
            t=np.array([int(r[0]) for r in rows], dtype=int),
            u=np.array([[float(v) for v in r[1:1 + m]] for r in rows]).reshape(T, m),
            y=np.array([[float(v) for v in r[1 + m:1 + m + p]] for r in rows]).reshape(T, p),
            y_tilde=np.array([[float(v) for v in r[1 + m + p:1 + m + 2 * p]]
                              for r in rows]).reshape(T, p),
            j_star=np.array([float(r[1 + m + 2 * p]) for r in rows]),
            alpha_norm=np.array([float(r[2 + m + 2 * p]) for r in rows]),
            sigma_norm=np.array([float(r[3 + m + 2 * p]) for r in rows]),
            iterations=np.array([int(r[4 + m + 2 * p]) for r in rows], dtype=int),
            status=[r[5 + m + 2 * p] for r in rows],
            variant=variant, config_digest=config_digest, seed=seed,
        )
        return log


def warmup_window(sys: LtiSystem, u_s, l: int, x0=None) -> tuple:
    """Simulate l steps under the constant setpoint input to seed the window."""
    u_s = np.asarray(u_s, dtype=float).ravel()
    if x0 is None:
        x0 = np.zeros(sys.n)
    traj = simulate(sys, x0, np.tile(u_s, (l, 1)))
    return traj.u, traj.y


def reconstruct_state(sys: LtiSystem, u_window, y_window) -> np.ndarray:
    """Recover the plant state at the window end (exact for trajectory windows)."""
    u_window = np.atleast_2d(np.asarray(u_window, dtype=float))
    ext = extend_system(sys, u_window.shape[0])
    xi = ExtendedState.from_windows(u_window, y_window)
    return ext.T_map @ xi.xi


def closed_loop(sys: LtiSystem, dataset: DataSet, config: MpcConfig,
                init_window=None, seed: int = 0, x0=None,
                qp_settings: Optional[QpSettings] = None,
                n_state: Optional[int] = None) -> ClosedLoopLog:
    """Run the receding-horizon loop for config.T_sim steps.

    At each step the last l measurements form the window, the variant's QP is
    solved, the first planned input is applied, and the plant advances one
    step.  Measured outputs carry fresh uniform noise in [-eps_bar, eps_bar]
    for the noisy-data variants.  A solver failure aborts the run, returning
    the partial log with the abort flag set.

    Args:
        init_window: optional (u_window, y_window) trajectory of ``sys`` over
            l steps; defaults to a warm-up simulation from x0 under the
            setpoint input.
        seed: drives the measurement-noise stream; runs are deterministic
            given the seed.
    """
    if lag(sys) > config.l:
        raise ValueError(f"window length {config.l} is below the system lag")
    noisy = config.variant is not MpcVariant.NOMINAL and config.eps_bar > 0
    rng = np.random.default_rng(seed)
    l, m, p = config.l, config.m, config.p

    if init_window is None:
        u_win, y_win_true = warmup_window(sys, config.u_setpoint, l, x0)
    else:
        u_win = np.atleast_2d(np.asarray(init_window[0], dtype=float)).copy()
        y_win_true = np.atleast_2d(np.asarray(init_window[1], dtype=float)).copy()
        if u_win.shape != (l, m) or y_win_true.shape != (l, p):
            raise ValueError("init_window must hold l inputs and l outputs")
    x = reconstruct_state(sys, u_win, y_win_true)
    if noisy:
        y_win_meas = y_win_true + rng.uniform(-config.eps_bar, config.eps_bar,
                                              size=(l, p))
    else:
        y_win_meas = y_win_true.copy()

    pd = precompute(dataset, config, n_state=n_state
                    if n_state is not None else sys.n)
    qp0 = build_step_problem(
        pd, config, ExtendedState.from_windows(u_win, y_win_meas))
    solver = QpSolver(qp0, qp_settings or QpSettings())
    static_tail = qp0.b_eq[l * (m + p):]

    T = config.T_sim
    log = ClosedLoopLog(
        t=np.arange(T), u=np.zeros((T, m)), y=np.zeros((T, p)),
        y_tilde=np.zeros((T, p)), j_star=np.zeros(T), alpha_norm=np.zeros(T),
        sigma_norm=np.zeros(T), iterations=np.zeros(T, dtype=int),
        status=["" for _ in range(T)], variant=config.variant.value,
        config_digest=config.digest(), seed=seed,
        y_pred0=np.zeros((T, p)), qp_primal_residual=np.zeros(T),
        qp_dual_residual=np.zeros(T), qp_comp_slack=np.zeros(T),
        init_u=u_win.copy(), init_y_true=y_win_true.copy(),
        init_y_meas=y_win_meas.copy(),
    )

    for t in range(T):
        b_eq = np.concatenate([u_win.ravel(), y_win_meas.ravel(), static_tail])
        solver.update(b_eq=b_eq)
        qp_sol = solver.solve()
        if qp_sol.status is not QpStatus.SOLVED:
            log = _truncate(log, t)
            log.aborted = True
            log.abort_reason = qp_sol.status.value
            return log
        sol = mpc_solution(pd, config, qp_sol)
        u_t = sol.u_bar[l]
        y_t = sys.C @ x + sys.D @ u_t
        if noisy:
            y_meas = y_t + rng.uniform(-config.eps_bar, config.eps_bar, size=p)
        else:
            y_meas = y_t

        log.u[t] = u_t
        log.y[t] = y_t
        log.y_tilde[t] = y_meas
        log.j_star[t] = sol.j_star
        log.alpha_norm[t] = np.linalg.norm(sol.alpha)
        log.sigma_norm[t] = np.linalg.norm(sol.sigma)
        log.iterations[t] = qp_sol.iterations
        log.status[t] = qp_sol.status.value
        log.y_pred0[t] = sol.y_bar[l]
        log.qp_primal_residual[t] = qp_sol.primal_residual
        log.qp_dual_residual[t] = qp_sol.dual_residual
        log.qp_comp_slack[t] = qp_sol.comp_slack

        x = sys.A @ x + sys.B @ u_t
        u_win = np.vstack([u_win[1:], u_t])
        y_win_true = np.vstack([y_win_true[1:], y_t])
        y_win_meas = np.vstack([y_win_meas[1:], y_meas])
    return log


def _truncate(log: ClosedLoopLog, T: int) -> ClosedLoopLog:
    return replace(
        log, t=log.t[:T], u=log.u[:T], y=log.y[:T], y_tilde=log.y_tilde[:T],
        j_star=log.j_star[:T], alpha_norm=log.alpha_norm[:T],
        sigma_norm=log.sigma_norm[:T], iterations=log.iterations[:T],
        status=log.status[:T], y_pred0=log.y_pred0[:T],
        qp_primal_residual=log.qp_primal_residual[:T],
        qp_dual_residual=log.qp_dual_residual[:T],
        qp_comp_slack=log.qp_comp_slack[:T],
    )
