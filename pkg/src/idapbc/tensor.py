"""Rank-3 tensor algebra for gyroscopic forces.

Two linear subspaces of (0,3)-tensors drive the construction: tensors skew
in their last two slots (B here) and gyroscopic tensors (symmetric first
pair, vanishing cyclic sum; C here). The map psi sends B onto C; its kernel
is exactly the fully antisymmetric tensors. A tensor symmetric in its first
pair whose cyclic sum vanishes on a distinguished block extends to a full
gyroscopic tensor by an explicit formula; that extension is what turns a
verified kinetic matching condition into a usable force term.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

# Inputs reach these constructors from symbolic derivatives, exact up to
# rounding; tolerances are relative to the tensor's own scale.
INVARIANT_TOL = 1e-12
CYCLIC_PRECONDITION_TOL = 1e-9


class TensorError(ValueError):
    pass


def _scale(a: np.ndarray) -> float:
    m = float(np.max(np.abs(a))) if a.size else 0.0
    return max(m, 1.0)


@dataclass(frozen=True, eq=False)
class Tensor3:
    """Dense (0,3)-tensor; entries[i, j, k] = T_ijk."""

    entries: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=float)
        if arr.ndim != 3 or len(set(arr.shape)) != 1:
            raise TensorError(f"expected cubic array, got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise TensorError("dimension must be >= 1")
        if not np.all(np.isfinite(arr)):
            raise TensorError("entries must be finite")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def contract(self, u: np.ndarray, v: np.ndarray, w: np.ndarray) -> float:
        """T(u, v, w) with vectors in the slots."""
        return float(np.einsum("ijk,i,j,k->", self.entries, u, v, w))


@dataclass(frozen=True, eq=False)
class GyroTensor(Tensor3):
    """C_ijk = C_jik and C_ijk + C_jki + C_kij = 0, checked at construction."""

    def __post_init__(self):
        super().__post_init__()
        c = self.entries
        tol = INVARIANT_TOL * _scale(c)
        sym_err = np.max(np.abs(c - c.transpose(1, 0, 2)))
        if sym_err > tol:
            raise TensorError(f"first-pair symmetry violated by {sym_err:.3e}")
        cyc_err = np.max(np.abs(c + c.transpose(1, 2, 0) + c.transpose(2, 0, 1)))
        if cyc_err > tol:
            raise TensorError(f"cyclic sum violated by {cyc_err:.3e}")


@dataclass(frozen=True, eq=False)
class SkewPairTensor(Tensor3):
    """B_ijk = -B_ikj, checked at construction."""

    def __post_init__(self):
        super().__post_init__()
        b = self.entries
        skew_err = np.max(np.abs(b + b.transpose(0, 2, 1)))
        if skew_err > INVARIANT_TOL * _scale(b):
            raise TensorError(f"last-pair skewness violated by {skew_err:.3e}")


@dataclass(frozen=True, eq=False)
class Interconnection:
    """Skew matrix family linear in momentum; coeffs[i, j, k] = J^k_ij."""

    coeffs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.coeffs, dtype=float)
        if arr.ndim != 3 or len(set(arr.shape)) != 1:
            raise TensorError(f"expected cubic array, got shape {arr.shape}")
        skew_err = np.max(np.abs(arr + arr.transpose(1, 0, 2)))
        if skew_err > INVARIANT_TOL * _scale(arr):
            raise TensorError(f"J^k_ij skewness violated by {skew_err:.3e}")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "coeffs", arr)

    @property
    def n(self) -> int:
        return self.coeffs.shape[0]


def sym(t: Tensor3) -> Tensor3:
    """Full symmetrization: average over all six slot permutations."""
    e = t.entries
    total = sum(e.transpose(p) for p in permutations((0, 1, 2)))
    return Tensor3(total / 6.0)


def psi(b: SkewPairTensor) -> GyroTensor:
    """C_ijk = (B_ijk + B_jik) / 2."""
    e = b.entries
    return GyroTensor((e + e.transpose(1, 0, 2)) / 2.0)


def _require_spd(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise TensorError(f"{name} must be square")
    if np.max(np.abs(m - m.T)) > 1e-10 * _scale(m):
        raise TensorError(f"{name} must be symmetric")
    eigs = np.linalg.eigvalsh((m + m.T) / 2.0)
    if eigs[0] <= 0.0:
        raise TensorError(f"{name} not positive definite (min eigenvalue {eigs[0]:.3e})")
    return m


def j_to_b(j: Interconnection, mhat: np.ndarray) -> SkewPairTensor:
    """B_kij = J^l_ji Mhat_lk (a bijection for fixed positive definite Mhat)."""
    mhat = _require_spd(mhat, "Mhat")
    b = np.einsum("jil,lk->kij", j.coeffs, mhat)
    return SkewPairTensor(b)


def b_to_j(b: SkewPairTensor, mhat: np.ndarray) -> Interconnection:
    """Inverse of :func:`j_to_b`."""
    mhat = _require_spd(mhat, "Mhat")
    mhat_inv = np.linalg.inv(mhat)
    j = np.einsum("kij,kl->jil", b.entries, mhat_inv)
    return Interconnection(j)


def force_from_j(j: Interconnection, mhat: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Conventional interconnection force: F_i = J^k_ij Mhat^jl p_k p_l."""
    mhat = _require_spd(mhat, "Mhat")
    mhat_inv = np.linalg.inv(mhat)
    p = np.asarray(p, dtype=float)
    return np.einsum("ijk,jl,l,k->i", j.coeffs, mhat_inv, p, p)


def space_dims(n: int, verify: bool = True) -> tuple[int, int, int]:
    """(dim B, dim C, dim ker psi) for dimension n.

    With ``verify`` the closed forms are cross-checked constructively:
    a spanning set of the skew-pair space is built, psi is applied to it,
    and the defining linear constraints of the gyroscopic space are
    assembled; matrix ranks must reproduce all three numbers.
    """
    if n < 1:
        raise TensorError("dimension must be >= 1")
    dim_b = n * n * (n - 1) // 2
    dim_c = n * (n * n - 1) // 3
    dim_ker = n * (n - 1) * (n - 2) // 6
    if verify:
        constructed = _constructive_dims(n)
        if constructed != (dim_b, dim_c, dim_ker):
            raise TensorError(
                f"constructive dimensions {constructed} disagree with closed forms "
                f"{(dim_b, dim_c, dim_ker)} for n={n}"
            )
    return dim_b, dim_c, dim_ker


def skew_pair_basis(n: int) -> list[SkewPairTensor]:
    """Canonical basis of the skew-pair space: unit value at (i, j, k), j < k."""
    basis = []
    for i in range(n):
        for j in range(n):
            for k in range(j + 1, n):
                arr = np.zeros((n, n, n))
                arr[i, j, k] = 1.0
                arr[i, k, j] = -1.0
                basis.append(SkewPairTensor(arr))
    return basis


def _constructive_dims(n: int) -> tuple[int, int, int]:
    basis = skew_pair_basis(n)
    flat_b = np.array([b.entries.ravel() for b in basis])
    dim_b = int(np.linalg.matrix_rank(flat_b)) if len(basis) else 0

    flat_psi = np.array([psi(b).entries.ravel() for b in basis])
    rank_psi = int(np.linalg.matrix_rank(flat_psi)) if len(basis) else 0
    dim_ker = dim_b - rank_psi

    # Gyroscopic space directly: solution set of the symmetry and cyclic
    # constraints over all n^3 coordinates.
    rows = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                row = np.zeros(n ** 3)
                row[(i * n + j) * n + k] += 1.0
                row[(j * n + i) * n + k] -= 1.0
                rows.append(row)
                row = np.zeros(n ** 3)
                row[(i * n + j) * n + k] += 1.0
                row[(j * n + k) * n + i] += 1.0
                row[(k * n + i) * n + j] += 1.0
                rows.append(row)
    constraint_rank = int(np.linalg.matrix_rank(np.array(rows)))
    dim_c = n ** 3 - constraint_rank
    return dim_b, dim_c, dim_ker


def cyclic_residual(t: Tensor3, n_unactuated: int) -> float:
    """Max |T_abc + T_bca + T_cab| over the leading unactuated block."""
    s = t.entries[:n_unactuated, :n_unactuated, :n_unactuated]
    if s.size == 0:
        return 0.0
    return float(np.max(np.abs(s + s.transpose(1, 2, 0) + s.transpose(2, 0, 1))))


def extend_to_gyro(t: Tensor3, n_unactuated: int) -> GyroTensor:
    """Extend a first-pair-symmetric tensor to a gyroscopic one.

    Indices split into unactuated 0..n_unactuated-1 and actuated rest.
    Requires the cyclic sum of T to vanish on the unactuated block; the
    output C agrees with T whenever the third slot is unactuated, and the
    free fully-actuated block is set to zero.
    """
    e = t.entries
    n = t.n
    if not 0 <= n_unactuated <= n:
        raise TensorError(f"invalid split {n_unactuated} of {n}")
    scale = _scale(e)
    sym_err = np.max(np.abs(e - e.transpose(1, 0, 2)))
    if sym_err > INVARIANT_TOL * scale:
        raise TensorError(f"T must be symmetric in its first two indices (error {sym_err:.3e})")
    res = cyclic_residual(t, n_unactuated)
    if res > CYCLIC_PRECONDITION_TOL * scale:
        raise TensorError(
            f"cyclic sum of T on the unactuated block must vanish; residual {res:.3e} "
            f"exceeds {CYCLIC_PRECONDITION_TOL:.1e} relative tolerance"
        )

    u = n_unactuated
    c = np.zeros((n, n, n))
    # Third slot unactuated: copy T.
    c[:, :, :u] = e[:, :, :u]
    # Two unactuated, third actuated.
    # C_{alpha beta a} = -T_{beta a alpha} - T_{a alpha beta}
    c[:u, :u, u:] = -e[:u, u:, :u].transpose(2, 0, 1) - e[u:, :u, :u].transpose(1, 2, 0)
    # One unactuated among the first pair, third actuated.
    # C_{alpha a b} = C_{b alpha a} = -T_{ab alpha} / 2
    c[:u, u:, u:] = -0.5 * e[u:, u:, :u].transpose(2, 0, 1)
    c[u:, :u, u:] = -0.5 * e[u:, u:, :u].transpose(1, 2, 0)
    # All actuated: free block, zero by convention.
    return GyroTensor(c)


def gyro_from_c_table(c: np.ndarray) -> GyroTensor:
    return GyroTensor(np.asarray(c, dtype=float))


def b_from_gyro(c: GyroTensor) -> SkewPairTensor:
    """A preimage of C under psi (the explicit surjectivity recipe)."""
    e = c.entries
    n = c.n
    b = np.zeros((n, n, n))
    for i in range(n):
        for k in range(n):
            if i == k:
                continue
            b[i, i, k] = e[i, i, k]
            b[i, k, i] = -e[i, i, k]
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                b[i, j, k] = 2.0 * e[i, j, k]
                b[k, i, j] = -2.0 * e[j, k, i]
                b[i, k, j] = -2.0 * e[i, j, k]
                b[k, j, i] = 2.0 * e[j, k, i]
    return SkewPairTensor(b)


def random_gyro(n: int, rng: np.random.Generator) -> GyroTensor:
    return psi(random_skew_pair(n, rng))


def random_skew_pair(n: int, rng: np.random.Generator) -> SkewPairTensor:
    raw = rng.standard_normal((n, n, n))
    return SkewPairTensor(raw - raw.transpose(0, 2, 1))


def random_admissible_t(n: int, n_unactuated: int, rng: np.random.Generator) -> Tensor3:
    """Random T meeting the extension preconditions for the given split."""
    raw = rng.standard_normal((n, n, n))
    t = (raw + raw.transpose(1, 0, 2)) / 2.0
    u = n_unactuated
    block = t[:u, :u, :u]
    cyc = (block + block.transpose(1, 2, 0) + block.transpose(2, 0, 1)) / 3.0
    # Removing a third of the cyclic sum keeps first-pair symmetry (the
    # cyclic average of a first-pair-symmetric tensor is fully symmetric).
    t[:u, :u, :u] = block - cyc
    return Tensor3(t)


def random_spd(n: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


def random_interconnection(n: int, rng: np.random.Generator) -> Interconnection:
    raw = rng.standard_normal((n, n, n))
    return Interconnection(raw - raw.transpose(1, 0, 2))


@dataclass
class SelfCheckResult:
    name: str
    passed: bool
    detail: str


def selfcheck(seed: int = 0, dims_max: int = 5, draws: int = 50) -> list[SelfCheckResult]:
    """Property suites behind the CLI selftest subcommand."""
    from . import control_sim  # local import; control_sim depends on this module

    rng = np.random.default_rng(seed)
    results: list[SelfCheckResult] = []

    def record(name: str, passed: bool, detail: str) -> None:
        results.append(SelfCheckResult(name, passed, detail))

    ok = True
    detail = ""
    for n in range(2, dims_max + 1):
        closed = (n * n * (n - 1) // 2, n * (n * n - 1) // 3, n * (n - 1) * (n - 2) // 6)
        constructed = _constructive_dims(n)
        if constructed != closed:
            ok = False
            detail = f"n={n}: {constructed} != {closed}"
            break
    record("space dimensions (constructive vs closed form)", ok, detail or f"n=2..{dims_max}")

    worst = 0.0
    for _ in range(draws):
        n = int(rng.integers(2, dims_max + 1))
        c = random_gyro(n, rng)
        worst = max(worst, float(np.max(np.abs(sym(c).entries))))
        v = rng.standard_normal(n)
        worst = max(worst, abs(c.contract(v, v, v)))
    record("psi image is gyroscopic; Sym and triple contraction vanish",
           worst <= 1e-12, f"max residual {worst:.2e}")

    worst = 0.0
    for _ in range(draws):
        n = int(rng.integers(2, dims_max + 1))
        u = int(rng.integers(1, n))
        t = random_admissible_t(n, u, rng)
        c = extend_to_gyro(t, u)
        diff = np.max(np.abs(c.entries[:, :, :u] - t.entries[:, :, :u]))
        worst = max(worst, float(diff))
    record("gyroscopic extension reproduces T on unactuated third slot",
           worst <= 1e-12, f"max deviation {worst:.2e}")

    worst = 0.0
    for _ in range(draws):
        n = int(rng.integers(2, dims_max + 1))
        j = random_interconnection(n, rng)
        mhat = random_spd(n, rng)
        p = rng.standard_normal(n)
        back = b_to_j(j_to_b(j, mhat), mhat)
        worst = max(worst, float(np.max(np.abs(back.coeffs - j.coeffs))))
        f_direct = force_from_j(j, mhat, p)
        f_gyro = control_sim.gyro_force(psi(j_to_b(j, mhat)), mhat, p)
        worst = max(worst, float(np.max(np.abs(f_direct - f_gyro))))
    record("interconnection round trip and force equivalence", worst <= 1e-10,
           f"max deviation {worst:.2e}")

    return results
