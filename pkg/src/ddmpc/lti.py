"""Discrete-time LTI state-space systems and their input-output window form.

Provides exact simulation of ``x_{t+1} = A x_t + B u_t``, ``y_t = C x_t + D u_t``,
structural analysis (observability, lag, minimality) and the construction of
the non-minimal "extended" representation whose state is the window of the
last ``l`` inputs and outputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

# Singular values below RANK_RTOL * sigma_max count as zero in rank decisions.
RANK_RTOL = 1e-9


class NotObservableError(ValueError):
    """Raised when an operation requires an observable (A, C) pair."""


def _as_2d(M, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got ndim={M.ndim}")
    return M


def _scaled_rank(M: np.ndarray, rtol: float = RANK_RTOL) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rtol * s[0]))


@dataclass(frozen=True)
class LtiSystem:
    """State-space matrices (A, B, C, D) with consistent dimensions."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = _as_2d(self.A, "A")
        B = _as_2d(self.B, "B")
        C = _as_2d(self.C, "C")
        D = _as_2d(self.D, "D")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ValueError(f"B must have {n} rows, got {B.shape}")
        if C.shape[1] != n:
            raise ValueError(f"C must have {n} columns, got {C.shape}")
        if D.shape != (C.shape[0], B.shape[1]):
            raise ValueError(
                f"D must be {C.shape[0]}x{B.shape[1]}, got {D.shape}")
        for name, M in (("A", A), ("B", B), ("C", C), ("D", D)):
            M.setflags(write=False)
            object.__setattr__(self, name, M)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def is_minimal(self, rank_rtol: float = RANK_RTOL) -> bool:
        """True iff (A, B) is controllable and (A, C) is observable."""
        ctrb = np.hstack([
            np.linalg.matrix_power(self.A, k) @ self.B for k in range(self.n)
        ])
        obs = observability_matrix(self, self.n)
        return (_scaled_rank(ctrb, rank_rtol) == self.n
                and _scaled_rank(obs, rank_rtol) == self.n)


@dataclass(frozen=True)
class Trajectory:
    """Input/output run of a system; ``x`` optionally holds the state path.

    ``u`` is (T, m), ``y`` is (T, p) and, when present, ``x`` is (T+1, n):
    the state after the last input is kept so runs can be resumed.
    """

    u: np.ndarray
    y: np.ndarray
    x: Optional[np.ndarray] = None

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.u, dtype=float))
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if u.shape[0] != y.shape[0]:
            raise ValueError(
                f"u and y must have equal length, got {u.shape[0]} != {y.shape[0]}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)
        if self.x is not None:
            x = np.atleast_2d(np.asarray(self.x, dtype=float))
            if x.shape[0] != u.shape[0] + 1:
                raise ValueError(
                    f"x must have length T+1={u.shape[0] + 1}, got {x.shape[0]}")
            object.__setattr__(self, "x", x)

    def __len__(self) -> int:
        return self.u.shape[0]


@dataclass(frozen=True)
class ExtendedState:
    """Stacked window [u_{t-l}, ..., u_{t-1}, y_{t-l}, ..., y_{t-1}].

    Inputs come first, oldest first, then outputs, oldest first.
    """

    xi: np.ndarray
    l: int
    m: int
    p: int

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float).ravel()
        expected = self.l * (self.m + self.p)
        if xi.shape[0] != expected:
            raise ValueError(
                f"xi must have dimension l(m+p)={expected}, got {xi.shape[0]}")
        xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)

    @classmethod
    def from_windows(cls, u_window: np.ndarray, y_window: np.ndarray) -> "ExtendedState":
        u_window = np.atleast_2d(np.asarray(u_window, dtype=float))
        y_window = np.atleast_2d(np.asarray(y_window, dtype=float))
        if u_window.shape[0] != y_window.shape[0]:
            raise ValueError("input and output windows must have equal length")
        xi = np.concatenate([u_window.ravel(), y_window.ravel()])
        return cls(xi=xi, l=u_window.shape[0], m=u_window.shape[1],
                   p=y_window.shape[1])

    @property
    def u_window(self) -> np.ndarray:
        return self.xi[: self.l * self.m].reshape(self.l, self.m)

    @property
    def y_window(self) -> np.ndarray:
        return self.xi[self.l * self.m:].reshape(self.l, self.p)


@dataclass(frozen=True)
class ExtendedLti:
    """Window-state realization with the same I/O behavior as the original.

    ``T_map`` recovers the original state from the window: ``T_map @ xi_t = x_t``
    for every consistent trajectory window.
    """

    A_tilde: np.ndarray
    B_tilde: np.ndarray
    C_tilde: np.ndarray
    D_tilde: np.ndarray
    T_map: np.ndarray
    l: int

    @property
    def n_xi(self) -> int:
        return self.A_tilde.shape[0]

    @property
    def m(self) -> int:
        return self.B_tilde.shape[1]

    @property
    def p(self) -> int:
        return self.C_tilde.shape[0]


def simulate(sys: LtiSystem, x0, u_seq) -> Trajectory:
    """Run the state recursion for the given input sequence.

    Args:
        sys: system to simulate.
        x0: initial state (n,).
        u_seq: inputs, shape (T, m) or (T,) for single-input systems.

    Returns:
        Trajectory with y of length T and x of length T+1.
    """
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    if u_seq.shape[0] == 1 and sys.m == 1 and u_seq.shape[1] > 1:
        u_seq = u_seq.T
    T = u_seq.shape[0]
    if T == 0:
        raise ValueError("u_seq must be nonempty")
    if u_seq.shape[1] != sys.m:
        raise ValueError(f"u_seq must have {sys.m} columns, got {u_seq.shape[1]}")
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape[0] != sys.n:
        raise ValueError(f"x0 must have dimension {sys.n}, got {x0.shape[0]}")

    x = np.empty((T + 1, sys.n))
    y = np.empty((T, sys.p))
    x[0] = x0
    for t in range(T):
        y[t] = sys.C @ x[t] + sys.D @ u_seq[t]
        x[t + 1] = sys.A @ x[t] + sys.B @ u_seq[t]
    return Trajectory(u=u_seq, y=y, x=x)


def observability_matrix(sys: LtiSystem, l: int) -> np.ndarray:
    """Stack [C; CA; ...; CA^{l-1}], shape (l*p, n)."""
    if l < 1:
        raise ValueError(f"window length must be >= 1, got {l}")
    blocks = []
    M = sys.C
    for _ in range(l):
        blocks.append(M)
        M = M @ sys.A
    return np.vstack(blocks)


def forced_response_toeplitz(sys: LtiSystem, l: int) -> np.ndarray:
    """Lower block-triangular map from l inputs to l outputs at zero state.

    Block (i, j) is D for i == j and C A^{i-j-1} B for i > j.
    """
    if l < 1:
        raise ValueError(f"window length must be >= 1, got {l}")
    markov = [sys.D]
    M = sys.B
    for _ in range(l - 1):
        markov.append(sys.C @ M)
        M = sys.A @ M
    T = np.zeros((l * sys.p, l * sys.m))
    for i in range(l):
        for j in range(i + 1):
            T[i * sys.p:(i + 1) * sys.p, j * sys.m:(j + 1) * sys.m] = markov[i - j]
    return T


def lag(sys: LtiSystem, rank_rtol: float = RANK_RTOL) -> int:
    """Smallest l such that the observability matrix O_l has rank n.

    Raises:
        NotObservableError: if rank(O_n) < n.
    """
    for l in range(1, sys.n + 1):
        if _scaled_rank(observability_matrix(sys, l), rank_rtol) == sys.n:
            return l
    raise NotObservableError(
        f"(A, C) is not observable: rank(O_n) < n = {sys.n}")


def extend_system(sys: LtiSystem, l: int,
                  rank_rtol: float = RANK_RTOL) -> ExtendedLti:
    """Build the window-state realization for a window of length l >= lag.

    The original state is reconstructed from the window by inverting the
    observability relation over the window: subtract the forced response from
    the stacked outputs, apply the left-inverse of O_l to recover x_{t-l},
    then roll it forward through the window inputs to x_t.  The output map is
    C composed with this reconstruction; the state map shifts the window and
    appends the new (u_t, y_t).
    """
    system_lag = lag(sys, rank_rtol)
    if l < system_lag:
        raise ValueError(f"window length {l} is below the system lag {system_lag}")
    n, m, p = sys.n, sys.m, sys.p

    O_l = observability_matrix(sys, l)
    if _scaled_rank(O_l, rank_rtol) < n:
        raise NotObservableError(f"O_{l} is rank deficient")
    O_pinv = np.linalg.pinv(O_l)
    T_l = forced_response_toeplitz(sys, l)
    A_pow = np.linalg.matrix_power(sys.A, l)
    # Rolled-forward input influence: x_t = A^l x_{t-l} + R_l @ u_window.
    R_l = np.hstack([
        np.linalg.matrix_power(sys.A, l - 1 - j) @ sys.B for j in range(l)
    ])
    T_map = np.hstack([R_l - A_pow @ O_pinv @ T_l, A_pow @ O_pinv])

    C_t = sys.C @ T_map
    D_t = sys.D.copy()

    n_xi = l * (m + p)
    A_t = np.zeros((n_xi, n_xi))
    B_t = np.zeros((n_xi, m))
    # Input window shift; the freshest input row comes only from B_tilde.
    if l > 1:
        A_t[: (l - 1) * m, m: l * m] = np.eye((l - 1) * m)
    B_t[(l - 1) * m: l * m, :] = np.eye(m)
    # Output window shift plus the appended y_t = C_t xi + D_t u.
    if l > 1:
        A_t[l * m: l * m + (l - 1) * p, l * m + p:] = np.eye((l - 1) * p)
    A_t[l * m + (l - 1) * p:, :] = C_t
    B_t[l * m + (l - 1) * p:, :] = D_t

    return ExtendedLti(A_tilde=A_t, B_tilde=B_t, C_tilde=C_t, D_tilde=D_t,
                       T_map=T_map, l=l)


def extended_state_window(traj: Trajectory, t: int, l: int) -> ExtendedState:
    """Extract the window state at time t from a trajectory (requires t >= l)."""
    if t < l:
        raise ValueError(f"need t >= l to form the window, got t={t}, l={l}")
    if t > len(traj):
        raise ValueError(f"window end {t} exceeds trajectory length {len(traj)}")
    return ExtendedState.from_windows(traj.u[t - l: t], traj.y[t - l: t])


def cstr_example() -> LtiSystem:
    """Linearized continuous stirred-tank reactor benchmark (2 states, SISO)."""
    A = np.array([[0.9749, -0.0135],
                  [0.0004, 0.9888]])
    B = 1e-4 * np.array([[0.041],
                         [5.934]])
    C = np.array([[0.0, 1.0]])
    D = np.array([[0.0]])
    return LtiSystem(A=A, B=B, C=C, D=D)


def equilibrium_output(sys: LtiSystem, u_s) -> np.ndarray:
    """Steady-state output for a constant input: C (I - A)^{-1} B u_s + D u_s."""
    u_s = np.asarray(u_s, dtype=float).ravel()
    if u_s.shape[0] != sys.m:
        raise ValueError(f"u_s must have dimension {sys.m}, got {u_s.shape[0]}")
    x_s = np.linalg.solve(np.eye(sys.n) - sys.A, sys.B @ u_s)
    return sys.C @ x_s + sys.D @ u_s
