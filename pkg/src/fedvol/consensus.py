"""Mixing matrices, block-wise consensus and runtime checks of one-shot averaging.

A stacked state is an ``(n, p)`` array whose row ``i`` is agent ``i``'s
parameter vector; applying ``A`` to it is the same as multiplying the
flattened state by ``kron(A, I_p)``, without ever forming that matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, PreconditionError, ValidationError, VerificationError

STOCHASTIC_TOL = 1e-12
ALGEBRAIC_TOL = 1e-12
SPECTRAL_TOL = 1e-9


@dataclass(frozen=True)
class MixingMatrix:
    entries: np.ndarray

    def __post_init__(self):
        A = np.array(self.entries, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise ValidationError(f"mixing matrix must be square and non-empty, got {A.shape}")
        A.setflags(write=False)
        object.__setattr__(self, "entries", A)

    @property
    def n(self):
        return self.entries.shape[0]


def _entries(A):
    return A.entries if isinstance(A, MixingMatrix) else np.asarray(A, dtype=np.float64)


def uniform_matrix(n: int) -> MixingMatrix:
    if n < 1:
        raise ParameterError("n must be >= 1")
    return MixingMatrix(np.full((n, n), 1.0 / n))


def lazy_ring(n: int, self_weight: float = 0.5) -> MixingMatrix:
    """``self_weight * I`` plus equal weight to both ring neighbours (doubly stochastic)."""
    if n < 3:
        raise ParameterError("a ring needs n >= 3")
    A = self_weight * np.eye(n)
    side = (1.0 - self_weight) / 2.0
    for i in range(n):
        A[i, (i + 1) % n] += side
        A[i, (i - 1) % n] += side
    return MixingMatrix(A)


def is_row_stochastic(A, tol: float = STOCHASTIC_TOL) -> bool:
    M = _entries(A)
    return bool(np.all(M >= 0) and np.all(np.abs(M.sum(axis=1) - 1.0) <= tol))


def is_doubly_stochastic(A, tol: float = STOCHASTIC_TOL) -> bool:
    M = _entries(A)
    return is_row_stochastic(M, tol) and bool(np.all(np.abs(M.sum(axis=0) - 1.0) <= tol))


def _reachable(adj: np.ndarray, start: int = 0) -> np.ndarray:
    seen = np.zeros(len(adj), dtype=bool)
    seen[start] = True
    stack = [start]
    while stack:
        i = stack.pop()
        for j in np.nonzero(adj[i] & ~seen)[0]:
            seen[j] = True
            stack.append(int(j))
    return seen


def is_strongly_connected(A) -> bool:
    adj = _entries(A) > 0
    return bool(_reachable(adj).all() and _reachable(adj.T).all())


# --------------------------------------------------------------------------
# stacked states
# --------------------------------------------------------------------------

def stack(blocks) -> np.ndarray:
    """Stack per-agent vectors into an ``(n, p)`` state (the block vector x)."""
    blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
    if not blocks:
        raise ValidationError("no blocks to stack")
    p = blocks[0].shape
    if any(b.shape != p or b.ndim != 1 for b in blocks):
        raise ValidationError("all blocks must be 1-D vectors of equal length")
    return np.vstack(blocks)


def consensus_apply(A, x: np.ndarray) -> np.ndarray:
    """Block i of the result is sum_j A_ij * block_j."""
    M = _entries(A)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != M.shape[0]:
        raise ValidationError(f"state with {x.shape[0] if x.ndim else 0} blocks vs {M.shape[0]}x{M.shape[0]} matrix")
    return M @ x


def kron_apply_dense(A, x: np.ndarray) -> np.ndarray:
    """Reference path: explicit ``kron(A, I_p) @ vec(x)``. Small instances only."""
    M = _entries(A)
    n, p = x.shape
    if n > 4 or p > 8:
        raise ParameterError("dense Kronecker oracle limited to n <= 4, p <= 8")
    big = np.kron(M, np.eye(p))
    return (big @ x.reshape(n * p)).reshape(n, p)


def degroot_iterate(A, x: np.ndarray, k: int) -> np.ndarray:
    if not is_row_stochastic(A):
        raise PreconditionError("DeGroot iteration needs a row-stochastic matrix")
    if k < 0:
        raise ParameterError("k must be >= 0")
    x = np.array(x, dtype=np.float64)
    for _ in range(k):
        x = consensus_apply(A, x)
    return x


# --------------------------------------------------------------------------
# spectrum
# --------------------------------------------------------------------------

def jacobi_eigenvalues(S: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending."""
    a = np.array(S, dtype=np.float64)
    n = a.shape[0]
    if not np.allclose(a, a.T, atol=1e-14, rtol=0):
        raise ValidationError("Jacobi solver needs a symmetric matrix")
    scale = max(np.abs(a).max(), 1.0)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))


def eigenvalues(A) -> np.ndarray:
    M = _entries(A)
    if np.allclose(M, M.T, atol=1e-14, rtol=0):
        return jacobi_eigenvalues(M)
    return np.sort_complex(np.linalg.eigvals(M))


# --------------------------------------------------------------------------
# one-shot verification
# --------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tol: float

    def line(self):
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.name}: {self.value:.3e} (tol {self.tol:.0e})"


@dataclass
class ConsensusReport:
    n: int
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def add(self, name, value, tol):
        self.checks.append(CheckResult(name, bool(value <= tol), float(value), tol))

    def lines(self):
        return [c.line() for c in self.checks]


def _one_shot_checks(A, trials: int, seed, p: int) -> ConsensusReport:
    M = _entries(A)
    n = M.shape[0]
    rng = np.random.default_rng(seed)
    agree = idem = 0.0
    for _ in range(trials):
        x = rng.normal(size=(n, p)) * rng.uniform(0.1, 10.0)
        mean = x.mean(axis=0)
        y = consensus_apply(M, x)
        dev = np.max(np.linalg.norm(y - mean, axis=1)) / (1.0 + np.linalg.norm(mean))
        agree = max(agree, dev)
        idem = max(idem, float(np.max(np.abs(consensus_apply(M, y) - y))))
    ev = eigenvalues(M)
    target = np.zeros(n)
    target[-1] = 1.0
    if np.iscomplexobj(ev):
        spectral_err = float(np.max(np.abs(np.sort(np.abs(ev)) - target)))
    else:
        spectral_err = float(np.max(np.abs(ev - target)))
    rep = ConsensusReport(n)
    rep.add("one-shot agreement", agree, ALGEBRAIC_TOL)
    rep.add("idempotence", idem, ALGEBRAIC_TOL)
    rep.add("spectrum {1, 0 x (n-1)}", spectral_err, SPECTRAL_TOL)
    return rep


def verify_one_shot(A, trials: int = 20, seed=0, p: int = 64) -> ConsensusReport:
    """Check agreement-after-one-step, idempotence and spectrum on random states.

    Raises ``VerificationError`` naming the first failing check.
    """
    rep = _one_shot_checks(A, trials, seed, p)
    for c in rep.checks:
        if not c.passed:
            raise VerificationError(c.name, f"{c.value:.3e} exceeds {c.tol:.0e}")
    return rep


def kronecker_equivalence(trials: int = 20, seed=0) -> float:
    """Worst blockwise-vs-dense discrepancy over random row-stochastic A, n <= 4, p <= 8."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 5))
        p = int(rng.integers(1, 9))
        M = rng.uniform(size=(n, n))
        M /= M.sum(axis=1, keepdims=True)
        x = rng.normal(size=(n, p))
        worst = max(worst, float(np.max(np.abs(consensus_apply(M, x) - kron_apply_dense(M, x)))))
    return worst


def degroot_demo(n: int = 4, k: int = 200, seed=0, p: int = 8):
    """Lazy ring: returns (max deviation from the initial mean after k steps,
    worst drift of the mean across all steps)."""
    A = lazy_ring(n)
    x = np.random.default_rng(seed).normal(size=(n, p))
    mean0 = x.mean(axis=0)
    drift = 0.0
    for _ in range(k):
        x = consensus_apply(A, x)
        drift = max(drift, float(np.max(np.abs(x.mean(axis=0) - mean0))))
    return float(np.max(np.abs(x - mean0))), drift


def consensus_report(n: int = 3, seed=0) -> ConsensusReport:
    """Everything ``consensus-check`` prints, never raising."""
    rep = _one_shot_checks(uniform_matrix(n), trials=20, seed=seed, p=64)
    rep.add("blockwise == kron(A, I_p) (n<=4, p<=8)", kronecker_equivalence(seed=seed), ALGEBRAIC_TOL)
    U = uniform_matrix(n)
    rep.add("uniform matrix doubly stochastic", 0.0 if is_doubly_stochastic(U) else 1.0, 0.0)
    rep.add("uniform digraph strongly connected", 0.0 if is_strongly_connected(U) else 1.0, 0.0)
    dev, drift = degroot_demo(seed=seed)
    rep.add("DeGroot lazy ring n=4, k=200: deviation from mean", dev, SPECTRAL_TOL)
    rep.add("DeGroot lazy ring: mean preservation", drift, ALGEBRAIC_TOL)
    return rep
