"""Matching residuals, gyroscopic-tensor derivation, and degree-one solvers.

The kinetic matching condition is checked in its reduced form: the cyclic
sum of the T tensor restricted to the annihilator must vanish.  When it
does, the gyroscopic tensor C is constructed algebraically per point.  Two
solvers cover underactuation degree one: a certificate for the linearized
potential matching condition and a characteristics integrator for the
single quasi-linear kinetic PDE.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Optional, Sequence, Union

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import null_space, orth

from .expr import Expr, ExprError, compile_expr, parse
from .stability import NOT_STABILIZABLE, Linearization, classify
from .system import MechSystem, ShapedDesign, SystemError
from .tensor import GyroTensor, Tensor3, TensorError, extend_to_gyro, random_spd

RESIDUAL_TOL = 1e-8
LINEAR_MATCH_RESIDUAL_TOL = 1e-9
LINEAR_MATCH_MIN_EIG = 1e-6
CHARACTERISTIC_RTOL = 1e-11
CHARACTERISTIC_ATOL = 1e-13


class MatchingError(ValueError):
    pass


def _sym_tol(arr: np.ndarray) -> float:
    return 1e-10 * max(1.0, float(np.max(np.abs(arr))))


@dataclass(frozen=True, eq=False)
class MatchTensors:
    """Pointwise values a[i, j, k] = A^{ij}_k and t[i, j, k] = T_ijk."""

    a: np.ndarray
    t: Tensor3

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if np.max(np.abs(a - a.transpose(1, 0, 2))) > _sym_tol(a):
            raise MatchingError("A must be symmetric in its upper index pair")
        t = self.t.entries
        if np.max(np.abs(t - t.transpose(1, 0, 2))) > _sym_tol(t):
            raise MatchingError("T must be symmetric in its first index pair")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "a", a)


def _symmetrized_inverse(m: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(m)
    return (inv + inv.T) / 2.0


def _inverse_derivatives(minv: np.ndarray, dm: np.ndarray) -> np.ndarray:
    """d(M^-1)/dq^k stacked over k from dM/dq^k.

    The result is symmetrized: each slice is symmetric exactly, and keeping
    it bitwise symmetric preserves the index symmetries of the tensors
    assembled from it.
    """
    out = -np.einsum("ij,kjl,lm->kim", minv, dm, minv)
    return (out + out.transpose(0, 2, 1)) / 2.0


def _shaped_inverse(design: ShapedDesign, q: Sequence[float]) -> np.ndarray:
    mhat = design.shaped_mass(q)
    try:
        return _symmetrized_inverse(mhat)
    except np.linalg.LinAlgError as exc:
        raise MatchingError(f"shaped mass singular at q={list(q)}: {exc}") from exc


def a_tensor(sys: MechSystem, design: ShapedDesign, q: Sequence[float]) -> np.ndarray:
    """A^{ij}_k built from the metric pair and their inverse derivatives."""
    minv = _symmetrized_inverse(sys.mass_matrix(q))
    dm = sys.mass_derivatives(q)
    mhat = design.shaped_mass(q)
    mhat_inv = _shaped_inverse(design, q)
    dmhat = design.shaped_mass_derivatives(q)
    dminv = _inverse_derivatives(minv, dm)
    dmhat_inv = _inverse_derivatives(mhat_inv, dmhat)
    first = 0.5 * np.einsum("kl,lr,rij->ijk", mhat, minv, dmhat_inv)
    return first - 0.5 * dminv.transpose(1, 2, 0)


def t_tensor(sys: MechSystem, design: ShapedDesign, q: Sequence[float]) -> Tensor3:
    """T_ijk; requires no inversion of the shaped mass."""
    minv = _symmetrized_inverse(sys.mass_matrix(q))
    dm = sys.mass_derivatives(q)
    mhat = design.shaped_mass(q)
    dmhat = design.shaped_mass_derivatives(q)
    dminv = _inverse_derivatives(minv, dm)
    first = -0.5 * np.einsum("kl,lt,tij->ijk", mhat, minv, dmhat)
    second = -0.5 * np.einsum("krs,ri,sj->ijk", dminv, mhat, mhat)
    return Tensor3(first + second)


def match_tensors(sys: MechSystem, design: ShapedDesign, q: Sequence[float]) -> MatchTensors:
    return MatchTensors(a_tensor(sys, design, q), t_tensor(sys, design, q))


def potential_residual(
    sys: MechSystem, design: ShapedDesign, q: Sequence[float]
) -> np.ndarray:
    """Annihilator projection of the potential matching defect."""
    w = sys.annihilator(q)
    minv = np.linalg.inv(sys.mass_matrix(q))
    dv = sys.potential_gradient(q)
    dvhat = design.shaped_potential_gradient(q)
    mhat = design.shaped_mass(q)
    return w @ (dv - mhat @ minv @ dvhat)


def kinetic_residual(
    sys: MechSystem,
    design: ShapedDesign,
    q: Sequence[float],
    w: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Cyclic sums of T over unordered triples of annihilator rows.

    Passing ``w`` overrides the computed annihilator basis (rows must be
    orthonormal and span the same space for the result to be meaningful).
    """
    if w is None:
        w = sys.annihilator(q)
    t = t_tensor(sys, design, q).entries
    tp = np.einsum("ijk,ai,bj,ck->abc", t, w, w, w)
    cyc = tp + tp.transpose(1, 2, 0) + tp.transpose(2, 0, 1)
    u = w.shape[0]
    return np.array([cyc[a, b, c] for a, b, c in combinations_with_replacement(range(u), 3)])


def pde_counts(n: int, m: int) -> tuple[int, int]:
    """Naive and reduced kinetic PDE counts for n coordinates, m actuators."""
    if not 1 <= m <= n:
        raise MatchingError(f"require 1 <= m <= n, got n={n}, m={m}")
    d = n - m
    return n * (n + 1) * d // 2, (d + 2) * (d + 1) * d // 6


class GyroField:
    """Per-point gyroscopic tensor derived from a verified design.

    At each query point the T tensor is rotated into an orthonormal basis
    adapted to the annihilator, extended to a gyroscopic tensor there, and
    rotated back.  The result is independent of the basis choice within
    each subspace.
    """

    def __init__(self, sys: MechSystem, design: ShapedDesign):
        self.sys = sys
        self.design = design

    def at(self, q: Sequence[float]) -> GyroTensor:
        sys = self.sys
        w = sys.annihilator(q)
        g = sys.input_matrix(q)
        u_cols = orth(g)
        if u_cols.shape[1] != sys.m:
            raise MatchingError(f"input matrix rank-deficient at q={list(q)}")
        qmat = np.vstack([w, u_cols.T])
        if np.max(np.abs(qmat @ qmat.T - np.eye(sys.n))) > 1e-10:
            raise MatchingError(f"adapted basis not orthogonal at q={list(q)}")
        t = t_tensor(sys, self.design, q).entries
        tp = np.einsum("ijk,ri,sj,tk->rst", t, qmat, qmat, qmat)
        try:
            cp = extend_to_gyro(Tensor3(tp), w.shape[0]).entries
        except TensorError as exc:
            raise MatchingError(
                f"cannot extend to a gyroscopic tensor at q={list(q)}: {exc}"
            ) from exc
        c = np.einsum("rst,ri,sj,tk->ijk", cp, qmat, qmat, qmat)
        return GyroTensor(c)


def derive_gyro(sys: MechSystem, design: ShapedDesign) -> GyroField:
    return GyroField(sys, design)


@dataclass(frozen=True, eq=False)
class LinearMatch:
    """Constant PD pair certifying the linearized potential matching."""

    mbar: np.ndarray
    sbar: np.ndarray

    def __post_init__(self):
        for name, arr in (("mbar", self.mbar), ("sbar", self.sbar)):
            a = np.asarray(arr, dtype=float)
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise MatchingError(f"{name} must be square")
            if np.max(np.abs(a - a.T)) > _sym_tol(a):
                raise MatchingError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(a)[0] <= 0.0:
                raise MatchingError(f"{name} must be positive definite")
            a = a.copy()
            a.setflags(write=False)
            object.__setattr__(self, name, a)


def linear_match_residual(lm: LinearMatch, lin: Linearization) -> float:
    """Max entry of the annihilator-projected linear matching defect."""
    w = null_space(lin.g0.T).T
    res = w @ (lm.mbar @ np.linalg.inv(lin.mlin) @ lm.sbar - lin.hess)
    return float(np.max(np.abs(res))) if res.size else 0.0


def _pd_completion(r: np.ndarray, b: np.ndarray) -> Optional[np.ndarray]:
    """Symmetric PD matrix X with r X = b, or None when r.b <= 0."""
    rb = float(r @ b)
    if rb <= 1e-12 * (np.linalg.norm(r) * np.linalg.norm(b) + 1e-300):
        return None
    proj = np.eye(r.size) - np.outer(r, r) / float(r @ r)
    scale = float(b @ b) / rb
    return np.outer(b, b) / rb + scale * proj


def solve_linear_matching(lin: Linearization, seed: int = 0) -> LinearMatch:
    """Certificate (Mbar, Sbar) for the linearized matching condition.

    Only underactuation degree one is supported (degree zero is trivial).
    The pair is built in closed form from the annihilator direction and
    checked a posteriori; a seeded random search is the fallback.
    """
    n, m = lin.n, lin.m
    if m == n:
        return LinearMatch(np.eye(n), np.eye(n))
    if n - m != 1:
        raise MatchingError(
            f"underactuation degree {n - m} is out of scope (supported: 0 and 1)"
        )
    report = classify(lin)
    if report.verdict == NOT_STABILIZABLE:
        eigs = ", ".join(f"{z:.4g}" for z in report.uncontrollable_eigs)
        raise MatchingError(
            "no linear matching certificate exists: verdict "
            f"{report.verdict} (uncontrollable eigenvalues: {eigs})"
        )
    w = null_space(lin.g0.T).T[0]
    w = w / np.linalg.norm(w)
    d = w @ lin.hess
    h = lin.mlin @ w
    minv0 = np.linalg.inv(lin.mlin)

    def attempt(r: np.ndarray) -> Optional[LinearMatch]:
        sbar = _pd_completion(r, d)
        mbar = _pd_completion(w, r @ lin.mlin)
        if sbar is None or mbar is None:
            return None
        lm = LinearMatch(mbar, sbar)
        ok = (
            linear_match_residual(lm, lin) <= LINEAR_MATCH_RESIDUAL_TOL
            and np.linalg.eigvalsh(mbar)[0] >= LINEAR_MATCH_MIN_EIG
            and np.linalg.eigvalsh(sbar)[0] >= LINEAR_MATCH_MIN_EIG
        )
        return lm if ok else None

    dn, hn = np.linalg.norm(d), np.linalg.norm(h)
    if dn > 0 and hn > 0:
        lm = attempt(d / dn + h / hn)
        if lm is not None:
            return lm
    rng = np.random.default_rng(seed)
    for _ in range(500):
        mbar = random_spd(n, rng)
        lm = attempt(w @ mbar @ minv0)
        if lm is not None:
            return lm
    raise MatchingError(
        "could not construct a positive definite linear matching certificate"
    )


@dataclass(frozen=True, eq=False)
class CharacteristicsSolution:
    """Shaped-mass leading entry sampled along the unactuated coordinate.

    Values are NaN beyond a truncation point; pd_interval is the open
    interval around 0 on which the solution stayed positive.
    """

    q_values: np.ndarray
    u_values: np.ndarray
    pd_interval: tuple[float, float]
    truncated: bool
    singular_points: tuple[float, ...]


def solve_kinetic_characteristics(
    sys: MechSystem,
    ansatz: Sequence[Union[str, Expr]],
    init: Union[float, LinearMatch],
    lo: float = -1.0,
    hi: float = 1.0,
    num: int = 201,
    params: Optional[dict] = None,
) -> CharacteristicsSolution:
    """Integrate the degree-one kinetic PDE along its characteristics.

    The unknown is the leading shaped-mass entry as a function of the first
    coordinate; ``ansatz`` fixes the remaining first-row entries as
    expressions in the coordinates and the unknown (named ``u``).  The
    problem must be one-dimensional: the mass matrix and the ansatz may
    depend on the first coordinate only.
    """
    n = sys.n
    if len(ansatz) != n - 1:
        raise MatchingError(f"ansatz must fix {n - 1} first-row entries")
    u0 = float(init.mbar[0, 0]) if isinstance(init, LinearMatch) else float(init)
    if u0 <= 0.0:
        raise MatchingError(
            f"initial value {u0:.6g} is not positive: no positive definite "
            "neighborhood exists"
        )
    if not (lo < 0 < hi) or num < 2:
        raise MatchingError("grid must straddle 0 with at least two points")

    for row in sys.M.entries:
        for e in row:
            if not e.variables() <= {0}:
                raise MatchingError(
                    "mass matrix must depend on the first coordinate only"
                )
    names = list(sys.vars) + ["u"]
    exprs = []
    for a in ansatz:
        e = parse(a, names, params) if isinstance(a, str) else a
        if not e.variables() <= {0, n}:
            raise MatchingError(
                "ansatz entries may depend on the first coordinate and the "
                "unknown only"
            )
        exprs.append(e)
    fns = [compile_expr(e) for e in exprs]

    def pieces(q1: float, u: float):
        qvec = np.zeros(n)
        qvec[0] = q1
        x = np.append(qvec, u)
        minv = np.linalg.inv(sys.mass_matrix(qvec))
        dminv1 = -minv @ sys.mass_derivatives(qvec)[0] @ minv
        row = np.array([u] + [f(x) for f in fns])
        c = row @ minv
        s = float(row @ dminv1 @ row)
        return c, s

    def rhs(t, y):
        c, s = pieces(t, y[0])
        return [-s / c[0]]

    def ev_singular(t, y):
        c, _ = pieces(t, y[0])
        return c[0]

    def ev_positive(t, y):
        return y[0]

    # only a vanishing characteristic speed stops integration; losing
    # positivity is recorded but the solution continues to exist
    ev_singular.terminal = True
    ev_positive.terminal = False

    grid = np.linspace(lo, hi, num)
    values = np.full(num, np.nan)
    zero_idx = np.where(np.isclose(grid, 0.0, atol=1e-15))[0]
    values[zero_idx] = u0

    singular = []
    endpoints = {1: hi, -1: lo}
    truncated = False
    for sign in (1, -1):
        bound = hi if sign == 1 else lo
        t_eval = grid[grid > 0] if sign == 1 else grid[grid < 0][::-1]
        if t_eval.size == 0:
            continue
        sol = solve_ivp(
            rhs,
            (0.0, bound),
            [u0],
            method="DOP853",
            t_eval=t_eval,
            events=[ev_singular, ev_positive],
            rtol=CHARACTERISTIC_RTOL,
            atol=CHARACTERISTIC_ATOL,
        )
        if not sol.success and sol.status != 1:
            raise MatchingError(f"characteristic integration failed: {sol.message}")
        idx = np.searchsorted(grid, sol.t)
        values[idx] = sol.y[0]
        if sol.status == 1 and sol.t_events[0].size:
            t_star = float(sol.t_events[0][0])
            singular.append(t_star)
            endpoints[sign] = t_star
            truncated = True
        if sol.t_events[1].size:
            # first loss of positivity on this side
            endpoints[sign] = float(sol.t_events[1][0])
            truncated = True

    return CharacteristicsSolution(
        q_values=grid,
        u_values=values,
        pd_interval=(endpoints[-1], endpoints[1]),
        truncated=truncated,
        singular_points=tuple(sorted(singular)),
    )


@dataclass(frozen=True, eq=False)
class ResidualReport:
    """Potential and kinetic matching residuals over a tensor-product grid.

    Residuals are recorded everywhere they evaluate; the pass verdict is
    taken over the largest symmetric box around the origin on which both
    metrics stay positive definite, since that is the domain on which the
    design is usable.
    """

    axes: tuple
    points: np.ndarray
    potential_res: np.ndarray
    kinetic_res: np.ndarray
    pd_mask: np.ndarray
    pd_box: dict
    tolerance: float

    @property
    def in_box_mask(self) -> np.ndarray:
        radii = np.array([self.pd_box[name] for name, _ in self.axes])
        return np.all(np.abs(self.points) <= radii + 1e-12, axis=1)

    def _max_over(self, mask: np.ndarray) -> tuple[float, float]:
        def block_max(res):
            if res.shape[1] == 0:
                return 0.0
            vals = res[mask]
            vals = vals[np.all(np.isfinite(vals), axis=1)] if vals.size else vals
            return float(np.max(np.abs(vals))) if vals.size else float("nan")

        return block_max(self.potential_res), block_max(self.kinetic_res)

    @property
    def max_abs(self) -> tuple[float, float]:
        return self._max_over(np.ones(len(self.points), dtype=bool))

    @property
    def max_abs_pd(self) -> tuple[float, float]:
        return self._max_over(self.in_box_mask)

    @property
    def passed(self) -> bool:
        if not np.any(self.in_box_mask & self.pd_mask):
            return False
        pot, kin = self.max_abs_pd
        return bool(
            np.isfinite(pot) and np.isfinite(kin)
            and pot <= self.tolerance and kin <= self.tolerance
        )

    def worst_point(self) -> dict:
        stacked = np.hstack([np.abs(self.potential_res), np.abs(self.kinetic_res)])
        if stacked.shape[1] == 0:
            return {"point": None, "potential": [], "kinetic": []}
        flat = np.where(np.isfinite(stacked), stacked, -np.inf).max(axis=1)
        i = int(np.argmax(flat))
        return {
            "point": [float(v) for v in self.points[i]],
            "potential": [float(v) for v in self.potential_res[i]],
            "kinetic": [float(v) for v in self.kinetic_res[i]],
        }

    def to_summary_dict(self) -> dict:
        pot, kin = self.max_abs
        pot_pd, kin_pd = self.max_abs_pd
        return {
            "grid": {
                name: {
                    "lo": float(vals[0]),
                    "hi": float(vals[-1]),
                    "count": int(len(vals)),
                }
                for name, vals in self.axes
            },
            "tolerance": self.tolerance,
            "max_abs": {"potential": pot, "kinetic": kin},
            "max_abs_pd_domain": {"potential": pot_pd, "kinetic": kin_pd},
            "pd_box": {k: float(v) for k, v in self.pd_box.items()},
            "passed": self.passed,
            "worst": self.worst_point(),
        }

    def write_csv(self, path) -> None:
        names = [name for name, _ in self.axes]
        pot_cols = [f"potential_res_{i + 1}" for i in range(self.potential_res.shape[1])]
        kin_cols = [f"kinetic_res_{i + 1}" for i in range(self.kinetic_res.shape[1])]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(names + pot_cols + kin_cols + ["pd"])
            for row_q, row_p, row_k, pd in zip(
                self.points, self.potential_res, self.kinetic_res, self.pd_mask
            ):
                out.writerow(
                    [f"{v:.17g}" for v in row_q]
                    + [f"{v:.17g}" for v in row_p]
                    + [f"{v:.17g}" for v in row_k]
                    + [int(pd)]
                )


def _pd_box(axes, pd_grid: np.ndarray) -> dict:
    """Largest symmetric box around 0 (per axis, on grid values) staying PD.

    Axes are grown one grid ring at a time in round-robin order until no
    axis can extend without including a non-PD point.
    """
    names = [name for name, _ in axes]
    values = [np.asarray(v, dtype=float) for _, v in axes]
    radii_options = [np.unique(np.abs(v)) for v in values]
    current = [0.0 for _ in axes]
    next_idx = []
    for opts, cur in zip(radii_options, current):
        i = int(np.searchsorted(opts, cur + 1e-12))
        next_idx.append(i)
    locked = [False] * len(axes)

    def box_ok(radii):
        masks = [np.abs(v) <= r + 1e-12 for v, r in zip(values, radii)]
        region = pd_grid
        for axis, m in enumerate(masks):
            region = np.compress(m, region, axis=axis)
        return bool(region.all())

    if not box_ok(current):
        return {name: 0.0 for name in names}
    while not all(locked):
        for i in range(len(axes)):
            if locked[i]:
                continue
            if next_idx[i] >= len(radii_options[i]):
                locked[i] = True
                continue
            tentative = list(current)
            tentative[i] = float(radii_options[i][next_idx[i]])
            if box_ok(tentative):
                current = tentative
                next_idx[i] += 1
            else:
                locked[i] = True
    return dict(zip(names, current))


def evaluate_residuals(
    sys: MechSystem,
    design: ShapedDesign,
    axes: Sequence[tuple[str, Sequence[float]]],
    tol: float = RESIDUAL_TOL,
) -> ResidualReport:
    """Sweep residuals over a tensor-product grid and estimate the PD box."""
    names = [name for name, _ in axes]
    if names != list(sys.vars):
        raise MatchingError(
            f"grid axes {names} must match system coordinates {list(sys.vars)}"
        )
    values = [np.asarray(v, dtype=float) for _, v in axes]
    mesh = np.meshgrid(*values, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    n_pot = sys.n - sys.m
    d = sys.n - sys.m
    n_kin = (d + 2) * (d + 1) * d // 6
    pot = np.full((len(points), n_pot), np.nan)
    kin = np.full((len(points), n_kin), np.nan)
    pd_mask = np.zeros(len(points), dtype=bool)
    for i, q in enumerate(points):
        try:
            pot[i] = potential_residual(sys, design, q)
            kin[i] = kinetic_residual(sys, design, q)
        except (SystemError, MatchingError, TensorError, ExprError, ArithmeticError,
                np.linalg.LinAlgError):
            continue
        try:
            mhat = design.shaped_mass(q)
            pd_mask[i] = (
                np.max(np.abs(mhat - mhat.T)) <= _sym_tol(mhat)
                and np.linalg.eigvalsh(mhat)[0] > 0.0
            )
        except (ExprError, ArithmeticError):
            pd_mask[i] = False
    axes_t = tuple((name, vals) for name, vals in zip(names, values))
    box = _pd_box(axes_t, pd_mask.reshape([len(v) for v in values]))
    return ResidualReport(
        axes=axes_t,
        points=points,
        potential_res=pot,
        kinetic_res=kin,
        pd_mask=pd_mask,
        pd_box=box,
        tolerance=tol,
    )
