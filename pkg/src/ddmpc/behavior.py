"""Hankel-matrix machinery and trajectory-space ("behavioral") tools.

A single measured input/output trajectory, arranged into Hankel matrices,
parametrizes every trajectory of the underlying LTI system as long as the
input is persistently exciting.  This module builds those matrices, checks
excitation, generates excitation data with bounded measurement noise, and
runs data-driven simulation, which serves as the model-free oracle for the
predictive controller.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg

from .lti import RANK_RTOL, LtiSystem, simulate

# Relative tolerance for the initial-window consistency check in dd_simulate.
WINDOW_RESIDUAL_RTOL = 1e-6


class PersistencyError(ValueError):
    """Raised when data is not persistently exciting at the required order."""


class InconsistentWindowError(ValueError):
    """Raised when an initial window is not a trajectory of the data system."""


def _as_sequence(seq, name: str) -> np.ndarray:
    seq = np.asarray(seq, dtype=float)
    if seq.ndim == 1:
        seq = seq[:, None]
    if seq.ndim != 2:
        raise ValueError(f"{name} must be an (N, q) sequence, got ndim={seq.ndim}")
    return seq


def hankel(seq, L: int) -> np.ndarray:
    """Block Hankel matrix of window length L, shape (L*q, N-L+1).

    Block entry (i, j) is the sample seq[i + j]; column j is the contiguous
    window seq[j : j+L] flattened.
    """
    seq = _as_sequence(seq, "seq")
    N, q = seq.shape
    if L < 1:
        raise ValueError(f"window length must be >= 1, got {L}")
    if L > N:
        raise ValueError(f"window length {L} exceeds data length {N}")
    H = np.empty((L * q, N - L + 1))
    for j in range(N - L + 1):
        H[:, j] = seq[j: j + L].ravel()
    return H


class PeResult(NamedTuple):
    passes: bool
    min_singular_value: float
    order: int


def check_pe(u_d, order: int, n_state: int = 0,
             rank_rtol: float = RANK_RTOL) -> PeResult:
    """Check persistency of excitation of ``order + n_state``.

    The optional ``n_state`` addend covers the common call pattern of checking
    a window order plus the dimension of the data-generating system's state.
    Passes iff the Hankel matrix of the combined order has full row rank under
    the scaled singular-value tolerance; the minimum singular value is the
    excitation margin.
    """
    u_d = _as_sequence(u_d, "u_d")
    total = order + n_state
    if total < 1:
        raise ValueError(f"excitation order must be >= 1, got {total}")
    if total > u_d.shape[0]:
        raise PersistencyError(
            f"data length {u_d.shape[0]} too short for excitation order {total}")
    H = hankel(u_d, total)
    s = np.linalg.svd(H, compute_uv=False)
    smin = float(s[-1]) if H.shape[0] <= H.shape[1] else 0.0
    passes = H.shape[0] <= H.shape[1] and smin > rank_rtol * float(s[0])
    return PeResult(passes=passes, min_singular_value=smin, order=total)


def generate_pe_input(N: int, lower, upper, seed) -> np.ndarray:
    """I.i.d. uniform input samples in the box [lower, upper], shape (N, m)."""
    lower = np.asarray(lower, dtype=float).ravel()
    upper = np.asarray(upper, dtype=float).ravel()
    if lower.shape != upper.shape:
        raise ValueError("lower and upper must have equal dimension")
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    rng = np.random.default_rng(seed)
    return rng.uniform(lower, upper, size=(N, lower.shape[0]))


def add_noise(y_clean, eps_bar: float, seed) -> np.ndarray:
    """Perturb outputs by i.i.d. uniform noise in [-eps_bar, eps_bar]."""
    y_clean = _as_sequence(y_clean, "y_clean")
    if eps_bar < 0:
        raise ValueError(f"eps_bar must be >= 0, got {eps_bar}")
    if eps_bar == 0:
        return y_clean.copy()
    rng = np.random.default_rng(seed)
    return y_clean + rng.uniform(-eps_bar, eps_bar, size=y_clean.shape)


@dataclass(frozen=True)
class DataSet:
    """Offline excitation data: inputs, (optionally clean) outputs, noise bound."""

    u_d: np.ndarray
    y_d_noisy: np.ndarray
    y_d_clean: Optional[np.ndarray] = None
    eps_bar: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        u_d = _as_sequence(self.u_d, "u_d")
        y_noisy = _as_sequence(self.y_d_noisy, "y_d_noisy")
        if u_d.shape[0] != y_noisy.shape[0]:
            raise ValueError("u_d and y_d_noisy must have equal length")
        if u_d.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if self.eps_bar < 0:
            raise ValueError(f"eps_bar must be >= 0, got {self.eps_bar}")
        object.__setattr__(self, "u_d", u_d)
        object.__setattr__(self, "y_d_noisy", y_noisy)
        if self.y_d_clean is not None:
            y_clean = _as_sequence(self.y_d_clean, "y_d_clean")
            if y_clean.shape != y_noisy.shape:
                raise ValueError("y_d_clean and y_d_noisy must have equal shape")
            dev = np.max(np.abs(y_noisy - y_clean)) if y_clean.size else 0.0
            if dev > self.eps_bar + 1e-15:
                raise ValueError(
                    f"noisy outputs deviate from clean ones by {dev} > eps_bar")
            object.__setattr__(self, "y_d_clean", y_clean)

    @property
    def N(self) -> int:
        return self.u_d.shape[0]

    @property
    def m(self) -> int:
        return self.u_d.shape[1]

    @property
    def p(self) -> int:
        return self.y_d_noisy.shape[1]

    def outputs(self, use_clean: bool) -> np.ndarray:
        if use_clean:
            if self.y_d_clean is None:
                raise ValueError("dataset has no clean outputs")
            return self.y_d_clean
        return self.y_d_noisy

    def save(self, csv_path) -> None:
        """Write the data as CSV plus a JSON sidecar with the metadata."""
        csv_path = Path(csv_path)
        header = ["k"]
        header += [f"u_{i}" for i in range(self.m)]
        header += [f"y_{i}" for i in range(self.p)]
        if self.y_d_clean is not None:
            header += [f"y_clean_{i}" for i in range(self.p)]
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k in range(self.N):
                row = [k]
                row += [repr(float(v)) for v in self.u_d[k]]
                row += [repr(float(v)) for v in self.y_d_noisy[k]]
                if self.y_d_clean is not None:
                    row += [repr(float(v)) for v in self.y_d_clean[k]]
                writer.writerow(row)
        sidecar = {
            "N": self.N,
            "m": self.m,
            "p": self.p,
            "eps_bar": self.eps_bar,
            "seed": self.seed,
        }
        with open(csv_path.with_suffix(".json"), "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, csv_path) -> "DataSet":
        csv_path = Path(csv_path)
        with open(csv_path.with_suffix(".json")) as fh:
            meta = json.load(fh)
        m, p = int(meta["m"]), int(meta["p"])
        with open(csv_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [row for row in reader if row]
        expected = ["k"] + [f"u_{i}" for i in range(m)] + [f"y_{i}" for i in range(p)]
        has_clean = len(header) == len(expected) + p
        if has_clean:
            expected += [f"y_clean_{i}" for i in range(p)]
        if header != expected:
            raise ValueError(f"unexpected CSV header {header}")
        data = np.array([[float(v) for v in row[1:]] for row in rows])
        u_d = data[:, :m]
        y_noisy = data[:, m: m + p]
        y_clean = data[:, m + p: m + 2 * p] if has_clean else None
        return cls(u_d=u_d, y_d_noisy=y_noisy, y_d_clean=y_clean,
                   eps_bar=float(meta["eps_bar"]),
                   seed=None if meta["seed"] is None else int(meta["seed"]))


def generate_dataset(sys: LtiSystem, N: int, lower, upper, eps_bar: float,
                     seed: int, x0=None) -> DataSet:
    """Excite the plant from x0 (default zero) and record noisy outputs.

    The input samples and the measurement noise use independent streams
    spawned from the single dataset seed, so the same seed reproduces the
    whole dataset.
    """
    input_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    u_d = generate_pe_input(N, lower, upper, input_seq)
    if x0 is None:
        x0 = np.zeros(sys.n)
    y_clean = simulate(sys, x0, u_d).y
    y_noisy = add_noise(y_clean, eps_bar, noise_seq)
    return DataSet(u_d=u_d, y_d_noisy=y_noisy, y_d_clean=y_clean,
                   eps_bar=eps_bar, seed=seed)


def dd_simulate(dataset: DataSet, u_init, y_init, u_future,
                n_state: int = 0, rank_rtol: float = RANK_RTOL) -> np.ndarray:
    """Continue a trajectory using only recorded data (noise-free oracle).

    Pins the full input window (initial l steps plus L future steps) and the
    initial l output blocks, solves for the minimum-norm combination of data
    windows via a pivoted orthogonal factorization, and reads off the future
    outputs.  For persistently exciting noise-free data the continuation is
    the unique one of the underlying system regardless of which combination
    is picked.

    Args:
        dataset: noise-free data (eps_bar must be 0).
        u_init: past inputs, (l, m).
        y_init: past outputs, (l, p).
        u_future: future inputs, (L, m).
        n_state: optional state dimension to strengthen the excitation check
            to order L + l + n_state.

    Returns:
        Future outputs, (L, p).
    """
    if dataset.eps_bar != 0.0:
        raise ValueError("dd_simulate requires a noise-free dataset (eps_bar=0)")
    u_init = _as_sequence(u_init, "u_init")
    y_init = _as_sequence(y_init, "y_init")
    u_future = _as_sequence(u_future, "u_future")
    l, L = u_init.shape[0], u_future.shape[0]
    if y_init.shape[0] != l:
        raise ValueError("u_init and y_init must have equal length")

    y_d = dataset.outputs(use_clean=dataset.y_d_clean is not None)
    pe = check_pe(dataset.u_d, L + l, n_state, rank_rtol)
    if not pe.passes:
        raise PersistencyError(
            f"input data not persistently exciting of order {pe.order} "
            f"(min singular value {pe.min_singular_value:.3e})")

    Hu = hankel(dataset.u_d, L + l)
    Hy = hankel(y_d, L + l)
    p = dataset.p
    M = np.vstack([Hu, Hy[: l * p]])
    rhs = np.concatenate([u_init.ravel(), u_future.ravel(), y_init.ravel()])
    alpha, _, _, _ = scipy.linalg.lstsq(M, rhs, lapack_driver="gelsy")

    scale = 1.0 + max(np.max(np.abs(rhs)), np.max(np.abs(dataset.u_d)),
                      np.max(np.abs(y_d)))
    residual = np.max(np.abs(M @ alpha - rhs))
    if residual > WINDOW_RESIDUAL_RTOL * scale:
        raise InconsistentWindowError(
            f"initial window is not a trajectory of the data system "
            f"(residual {residual:.3e} > {WINDOW_RESIDUAL_RTOL * scale:.3e})")
    return (Hy @ alpha)[l * p:].reshape(L, p)
