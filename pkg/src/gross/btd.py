"""Block term decomposition of convolution weights by alternating least squares.

A weight ``X`` of shape ``(t, u, v, w)`` is approximated by ``R`` Tucker
terms that only factorise the two channel modes::

    X ~= sum_r  G_r x_0 B_r x_1 C_r

with cores ``G_r`` of shape ``(t', u', v, w)`` and factors ``B_r``
``(t, t')`` and ``C_r`` ``(u, u')``.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .tensor import as_weight_tensor, mode_n_product

__all__ = [
    "RankPair",
    "DecomposeOptions",
    "BlockTermDecomposition",
    "DecompositionError",
    "decompose",
    "reconstruct",
]

RIDGE = 1e-10
# Above this many core unknowns the joint core solve is replaced by a
# term-by-term sweep (same fixed point, much cheaper per sweep).
JOINT_CORE_LIMIT = 256


class DecompositionError(ArithmeticError):
    """Raised when the ALS iteration produces non-finite values."""


@dataclass(frozen=True)
class RankPair:
    t_prime: int
    u_prime: int

    def __post_init__(self):
        if self.t_prime < 1 or self.u_prime < 1:
            raise ValueError(f"ranks must be positive, got {self}")


@dataclass(frozen=True)
class DecomposeOptions:
    """Stopping rule and seed for :func:`decompose`.

    Iteration stops once the relative error drops by less than ``tol``
    between two consecutive sweeps, or after ``max_steps`` sweeps.

    ALS on block terms has spurious local minima, so ``starts`` random
    initialisations are each run for up to ``probe_steps`` sweeps and only
    the best one is continued. ``starts=1`` gives plain single-start ALS.
    """

    tol: float = 1e-6
    max_steps: int = 500_000
    seed: int = 0
    starts: int = 8
    probe_steps: int = 50

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.starts < 1:
            raise ValueError("starts must be at least 1")
        if self.probe_steps < 1:
            raise ValueError("probe_steps must be at least 1")


@dataclass
class BlockTermDecomposition:
    """``R`` terms stored as stacked arrays.

    Attributes
    ----------
    cores : ndarray, shape (R, t', u', v, w)
    b_factors : ndarray, shape (R, t, t')
    c_factors : ndarray, shape (R, u, u')
    shape : tuple
        Shape ``(t, u, v, w)`` of the decomposed weight.
    """

    cores: np.ndarray
    b_factors: np.ndarray
    c_factors: np.ndarray
    shape: tuple

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        R, tp, up = self.cores.shape[:3]
        t, u, v, w = self.shape
        if self.cores.shape[3:] != (v, w):
            raise ValueError(f"core kernel extent {self.cores.shape[3:]} != {(v, w)}")
        if self.b_factors.shape != (R, t, tp):
            raise ValueError(f"B factors have shape {self.b_factors.shape}, expected {(R, t, tp)}")
        if self.c_factors.shape != (R, u, up):
            raise ValueError(f"C factors have shape {self.c_factors.shape}, expected {(R, u, up)}")

    @property
    def n_terms(self):
        return self.cores.shape[0]

    @property
    def rank(self):
        return RankPair(self.cores.shape[1], self.cores.shape[2])

    @property
    def terms(self):
        return list(zip(self.cores, self.b_factors, self.c_factors))


def reconstruct(decomp):
    """Sum of the double mode products of every term; shape ``decomp.shape``."""
    out = np.zeros(decomp.shape)
    for core, b, c in decomp.terms:
        out += mode_n_product(mode_n_product(core, b, 0), c, 1)
    return out


def _ridge_solve(gram, rhs):
    # solves X @ gram = rhs for X, gram symmetric positive semi-definite
    n = gram.shape[0]
    lam = RIDGE * max(np.trace(gram) / n, np.finfo(float).tiny)
    factor = scipy.linalg.cho_factor(gram + lam * np.eye(n), lower=True)
    return scipy.linalg.cho_solve(factor, rhs.T).T


# The helpers below work on kernel-position slices: the weight is held as
# ``(v*w, t, u)`` and cores as ``(R, v*w, t', u')`` so every contraction is a
# batched matmul.


def _orthonormalise(factors, cores, mode):
    # QR each term's factor and fold the triangular part into its core, so
    # the modelled tensor is unchanged.
    q, tri = np.linalg.qr(factors)
    factors[:] = q
    if mode == 0:
        cores[:] = tri[:, None] @ cores
    else:
        cores[:] = cores @ tri.transpose(0, 2, 1)[:, None]


def _update_b(xs, cores, b, c):
    R, P, tp, up = cores.shape
    t, u = xs.shape[1:]
    m = (cores @ c.transpose(0, 2, 1)[:, None]).transpose(0, 2, 1, 3).reshape(R * tp, P * u)
    x1 = xs.transpose(1, 0, 2).reshape(t, P * u)
    bfull = _ridge_solve(m @ m.T, x1 @ m.T)
    b[:] = bfull.reshape(t, R, tp).transpose(1, 0, 2)
    _orthonormalise(b, cores, 0)


def _update_c(xs, cores, b, c):
    R, P, tp, up = cores.shape
    t, u = xs.shape[1:]
    n = (b[:, None] @ cores).transpose(0, 3, 1, 2).reshape(R * up, P * t)
    x2 = xs.transpose(2, 0, 1).reshape(u, P * t)
    cfull = _ridge_solve(n @ n.T, x2 @ n.T)
    c[:] = cfull.reshape(u, R, up).transpose(1, 0, 2)
    _orthonormalise(c, cores, 1)


def _update_cores_joint(xs, cores, b, c):
    R, P, tp, up = cores.shape
    t, u = xs.shape[1:]
    bfull = b.transpose(1, 0, 2).reshape(t, R * tp)
    cfull = c.transpose(1, 0, 2).reshape(u, R * up)
    btb = (bfull.T @ bfull).reshape(R, tp, R, tp)
    ctc = (cfull.T @ cfull).reshape(R, up, R, up)
    n = R * tp * up
    gram = (btb[:, :, None, :, :, None] * ctc[:, None, :, :, None, :]).reshape(n, n)
    proj = (bfull.T @ xs @ cfull).reshape(P, R, tp, R, up)
    rhs = proj[:, np.arange(R), :, np.arange(R)]  # (R, P, t', u')
    rhs = rhs.transpose(0, 2, 3, 1).reshape(n, P)
    sol = _ridge_solve(gram, rhs.T)
    cores[:] = sol.reshape(P, R, tp, up).transpose(1, 0, 2, 3)


def _model(cores, b, c):
    # sum_r B_r G_r[p] C_r^T for every kernel position p -> (v*w, t, u)
    return (b[:, None] @ cores @ c.transpose(0, 2, 1)[:, None]).sum(axis=0)


def _update_cores_sweep(xs, cores, b, c):
    # Gauss-Seidel over terms; exact per-term least squares because every
    # B_r and C_r has orthonormal columns at this point.
    xhat = _model(cores, b, c)
    for r in range(cores.shape[0]):
        step = b[r].T @ (xs - xhat) @ c[r] / (1.0 + RIDGE)
        step -= cores[r] * (RIDGE / (1.0 + RIDGE))
        cores[r] += step
        xhat += b[r] @ step @ c[r].T


def _validate(shape, n_terms, rank):
    t, u = shape[:2]
    if n_terms < 1:
        raise ValueError("need at least one term")
    if rank.t_prime > t or rank.u_prime > u:
        raise ValueError(f"rank {rank} exceeds channel extents ({t}, {u})")


def decompose(weight, n_terms, rank, opts=DecomposeOptions()):
    """Fit a block term decomposition by alternating least squares.

    Each sweep updates all B factors jointly, then all C factors, then the
    cores, each as a (ridge-stabilised) linear least-squares problem on the
    matching unfolding. Factors are re-orthonormalised after their update.
    Several random starts are probed first; see :class:`DecomposeOptions`.

    Parameters
    ----------
    weight : array_like, shape (t, u, v, w)
    n_terms : int
        Number of terms ``R`` (the group count of the bottleneck).
    rank : RankPair
        Per-term rank ``(t', u')``.
    opts : DecomposeOptions

    Returns
    -------
    decomp : BlockTermDecomposition
    trace : list of float
        Relative approximation error after every sweep.
    """
    x = as_weight_tensor(weight)
    if not isinstance(rank, RankPair):
        rank = RankPair(*rank)
    _validate(x.shape, n_terms, rank)
    t, u, v, w = x.shape
    tp, up = rank.t_prime, rank.u_prime

    xs = np.ascontiguousarray(x.reshape(t, u, v * w).transpose(2, 0, 1))
    norm = np.linalg.norm(xs)
    if norm == 0.0:
        raise ValueError("cannot decompose an all-zero weight")
    joint = n_terms > 1 and n_terms * tp * up <= JOINT_CORE_LIMIT
    update_cores = _update_cores_joint if joint else _update_cores_sweep

    def run(state, trace, steps):
        # ALS sweeps in place; a final sweep that raised the error (possible
        # only at round-off level) is undone so the trace never increases
        cores, b, c = state
        prev = None
        for _ in range(steps):
            prev = (cores.copy(), b.copy(), c.copy())
            _update_b(xs, cores, b, c)
            _update_c(xs, cores, b, c)
            update_cores(xs, cores, b, c)
            err = np.linalg.norm(xs - _model(cores, b, c)) / norm
            if not np.isfinite(err):
                raise DecompositionError(f"non-finite values after ALS sweep {len(trace)}")
            trace.append(float(err))
            if len(trace) >= 2 and trace[-2] - trace[-1] < opts.tol:
                if trace[-1] > trace[-2]:
                    trace.pop()
                    cores[:], b[:], c[:] = prev
                return True
        return False

    rng = np.random.default_rng(opts.seed)
    runs = []
    for _ in range(opts.starts):
        b = rng.standard_normal((n_terms, t, tp)) / np.sqrt(t)
        c = rng.standard_normal((n_terms, u, up)) / np.sqrt(u)
        cores = rng.standard_normal((n_terms, tp, up, v, w)) / np.sqrt(tp * up * v * w)
        cores = np.ascontiguousarray(cores.reshape(n_terms, tp, up, v * w).transpose(0, 3, 1, 2))
        runs.append(((cores, b, c), []))

    if opts.starts == 1:
        state, trace = runs[0]
        run(state, trace, opts.max_steps)
    else:
        probe = min(opts.probe_steps, opts.max_steps)
        done = [run(state, trace, probe) for state, trace in runs]
        best = min(range(len(runs)), key=lambda k: runs[k][1][-1])
        state, trace = runs[best]
        if not done[best]:
            run(state, trace, opts.max_steps - len(trace))

    cores, b, c = state
    cores = cores.transpose(0, 2, 3, 1).reshape(n_terms, tp, up, v, w)
    return BlockTermDecomposition(np.ascontiguousarray(cores), b.copy(), c.copy(), x.shape), trace
