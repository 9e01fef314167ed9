"""CP-ALS and the relationally constrained decomposition (TDRC).

TDRC minimises::

    1/2 ||X - [[C, P, F]]||^2 + lam/2 (||M1||^2 + ||M2||^2)
        + alpha/2 ||S_m - C M1 C^T||^2 + beta/2 ||S_n - P M2 P^T||^2

by cycling through: conjugate-gradient solves for the projections M1 and
M2, a closed-form least-squares update of F, and one ADMM sweep each for
C and P (auxiliary copies J1/J2, multipliers Y1/Y2, growing penalties).
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import FactorSet, as_tensor3, khatri_rao, matricize, reconstruct

logger = logging.getLogger(__name__)

__all__ = [
    "DivergenceError",
    "Hyperparams",
    "CgProblem",
    "TdrcState",
    "FitResult",
    "cg_solve",
    "cp_als_fit",
    "update_F",
    "admm_update_C",
    "admm_update_P",
    "init_state",
    "tdrc_fit",
    "objective_value",
    "objective_gradient",
    "update_projections",
    "predict_scores",
]


class DivergenceError(ArithmeticError):
    """The objective became non-finite during a fit."""


@dataclass(frozen=True)
class Hyperparams:
    r: int = 4
    alpha: float = 2.0
    beta: float = 0.125
    lam: float = 1e-3
    mu: float = 1.1
    rho_init: float = 1.0
    rho_cap: float = 1e6
    tol: float = 1e-6
    max_iter: int = 200
    cg_tol: float = 1e-20
    cg_max_iter: int = 100
    seed: int = 0

    def __post_init__(self):
        if int(self.r) != self.r or self.r < 1:
            raise ValueError(f"rank r must be a positive integer, got {self.r}")
        if self.alpha < 0 or self.beta < 0 or self.lam < 0:
            raise ValueError("alpha, beta and lam must be non-negative")
        if not self.mu > 1:
            raise ValueError(f"mu must exceed 1, got {self.mu}")
        if not self.rho_init > 0:
            raise ValueError(f"rho_init must be positive, got {self.rho_init}")
        if self.rho_cap < self.rho_init:
            raise ValueError("rho_cap must be at least rho_init")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1 or self.cg_max_iter < 1:
            raise ValueError("iteration caps must be positive")
        if not self.cg_tol > 0:
            raise ValueError("cg_tol must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _solve_right(B: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Return ``B @ inv(G)`` for a symmetric positive (semi)definite ``G``.

    A jitter ``eps * I`` with ``eps = 1e-10 * trace(G) / r`` is added when
    ``G`` is badly conditioned, so collapsed factors never raise.
    """
    r = G.shape[0]
    if not (np.all(np.isfinite(G)) and np.all(np.isfinite(B))):
        raise DivergenceError("non-finite values in a block update")
    G = 0.5 * (G + G.T)
    if np.linalg.cond(G) > 1e12:
        eps = 1e-10 * np.trace(G) / r
        if not eps > 0:
            eps = 1e-10
        G = G + eps * np.eye(r)
    return np.linalg.solve(G, B.T).T


# --------------------------------------------------------------------------
# conjugate gradient for the projection matrices


@dataclass(frozen=True)
class CgProblem:
    """``min_X nu/2 ||O - U X V^T||^2 + lam/2 ||X||^2``."""

    O: np.ndarray
    U: np.ndarray
    V: np.ndarray
    nu: float
    lam: float

    def __post_init__(self):
        O, U, V = (np.asarray(a, dtype=np.float64) for a in (self.O, self.U, self.V))
        object.__setattr__(self, "O", O)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)
        if O.ndim != 2 or U.ndim != 2 or V.ndim != 2:
            raise ValueError("O, U and V must be matrices")
        if O.shape != (U.shape[0], V.shape[0]) or U.shape[1] != V.shape[1]:
            raise ValueError(f"non-conformable shapes O{O.shape}, U{U.shape}, V{V.shape}")
        if self.nu < 0 or self.lam < 0:
            raise ValueError("nu and lam must be non-negative")
        if self.nu + self.lam <= 0:
            raise ValueError("ill-posed problem: nu and lam are both zero")


def cg_solve(problem: CgProblem, tol: float = 1e-20, max_iter: int = 100, history: list | None = None):
    """Conjugate gradient on ``nu U^T U X V^T V + lam X = nu U^T O V``.

    Starts from ``X = 0`` and stops once ``||R||^2 < tol * ||R0||^2`` or
    after ``max_iter`` iterations. Squared residual norms are appended to
    ``history`` when a list is given.
    """
    U, V, O = problem.U, problem.V, problem.O
    nu, lam = problem.nu, problem.lam
    UtU = U.T @ U
    VtV = V.T @ V
    r = U.shape[1]
    X = np.zeros((r, r))
    R = nu * (U.T @ O @ V)
    B = R.copy()
    rr = float(np.sum(R * R))
    threshold = tol * rr
    if history is not None:
        history.append(rr)
    for _ in range(max_iter):
        if rr == 0.0 or rr < threshold:
            break
        UBV = U @ B @ V.T
        denom = nu * float(np.sum(UBV * UBV)) + lam * float(np.sum(B * B))
        if denom <= 0.0:
            break
        step = rr / denom
        X = X + step * B
        R = R - step * (nu * (UtU @ B @ VtV) + lam * B)
        rr_next = float(np.sum(R * R))
        B = R + (rr_next / rr) * B
        rr = rr_next
        if history is not None:
            history.append(rr)
    return X


# --------------------------------------------------------------------------
# CP-ALS


def cp_als_fit(x, r: int, tol: float = 1e-6, max_iter: int = 500, seed: int = 0):
    """Plain CP decomposition by alternating least squares.

    Factors are drawn uniformly from ``[0, 1)`` and updated in the order
    C, P, F. Iteration stops when the relative change of the residual norm
    drops below ``tol``. Returns ``(FactorSet, residual_history)`` where the
    history holds the residual norm after each full sweep.
    """
    x = as_tensor3(x)
    if int(r) != r or r < 1:
        raise ValueError(f"rank must be a positive integer, got {r}")
    m, n, t = x.shape
    rng = np.random.default_rng(seed)
    C = rng.random((m, r))
    P = rng.random((n, r))
    F = rng.random((t, r))
    X1, X2, X3 = matricize(x, 1), matricize(x, 2), matricize(x, 3)
    history: list[float] = []
    prev = None
    for _ in range(max_iter):
        C = _solve_right(X1 @ khatri_rao(F, P), (F.T @ F) * (P.T @ P))
        P = _solve_right(X2 @ khatri_rao(F, C), (F.T @ F) * (C.T @ C))
        F = _solve_right(X3 @ khatri_rao(P, C), (P.T @ P) * (C.T @ C))
        res = float(np.linalg.norm((x - reconstruct(FactorSet(C, P, F))).ravel()))
        history.append(res)
        if res == 0.0:
            break
        if prev is not None and abs(prev - res) < tol * max(prev, np.finfo(float).tiny):
            break
        prev = res
    return FactorSet(C, P, F), history


# --------------------------------------------------------------------------
# TDRC blocks


@dataclass(frozen=True)
class TdrcState:
    factors: FactorSet
    M1: np.ndarray
    M2: np.ndarray
    J1: np.ndarray
    J2: np.ndarray
    Y1: np.ndarray
    Y2: np.ndarray
    rho1: float
    rho2: float
    iter: int = 0
    history: tuple = ()

    def replace(self, **changes) -> "TdrcState":
        return dataclasses.replace(self, **changes)


def update_F(x, C: np.ndarray, P: np.ndarray, X3: np.ndarray | None = None) -> np.ndarray:
    """Exact least-squares type factor for fixed C and P."""
    if X3 is None:
        X3 = matricize(x, 3)
    return _solve_right(X3 @ khatri_rao(P, C), (P.T @ P) * (C.T @ C))


def _admm_block(Xn, K, A, S, M, J, Y, rho, weight, rho_growth):
    """One ADMM sweep for a factor ``A`` tied to ``S ~ A M A^T``.

    ``Xn`` is the mode unfolding and ``K`` the Khatri-Rao product paired
    with it. Returns updated ``(A, J, Y, rho)``.
    """
    r = A.shape[1]
    eye = np.eye(r)
    AM = A @ M
    J = _solve_right(weight * (S.T @ AM) + rho * A + Y, weight * (AM.T @ AM) + rho * eye)
    Q = M @ J.T
    A = _solve_right(Xn @ K + weight * (S @ Q.T) + rho * J - Y,
                     (K.T @ K) + weight * (Q @ Q.T) + rho * eye)
    Y = Y + rho * (A - J)
    rho = rho_growth(rho)
    return A, J, Y, rho


def admm_update_C(state: TdrcState, x, S_m, hp: Hyperparams, X1: np.ndarray | None = None) -> TdrcState:
    """J1, C, Y1 and rho1 updates with everything else held fixed."""
    C, P, F = state.factors.as_tuple()
    if X1 is None:
        X1 = matricize(x, 1)
    C, J1, Y1, rho1 = _admm_block(
        X1, khatri_rao(F, P), C, np.asarray(S_m), state.M1, state.J1, state.Y1,
        state.rho1, hp.alpha, lambda rho: min(hp.mu * rho, hp.rho_cap),
    )
    return state.replace(factors=FactorSet(C, P, F), J1=J1, Y1=Y1, rho1=rho1)


def admm_update_P(state: TdrcState, x, S_n, hp: Hyperparams, X2: np.ndarray | None = None) -> TdrcState:
    """J2, P, Y2 and rho2 updates; the disease-mode mirror of :func:`admm_update_C`."""
    C, P, F = state.factors.as_tuple()
    if X2 is None:
        X2 = matricize(x, 2)
    P, J2, Y2, rho2 = _admm_block(
        X2, khatri_rao(F, C), P, np.asarray(S_n), state.M2, state.J2, state.Y2,
        state.rho2, hp.beta, lambda rho: min(hp.mu * rho, hp.rho_cap),
    )
    return state.replace(factors=FactorSet(C, P, F), J2=J2, Y2=Y2, rho2=rho2)


def update_projections(C, P, S_m, S_n, hp: Hyperparams):
    """M1 and M2 from the CG solver; a zero weight with zero ridge gives zeros."""
    r = C.shape[1]
    out = []
    for S, U, weight in ((S_m, C, hp.alpha), (S_n, P, hp.beta)):
        if weight == 0 and hp.lam == 0:
            out.append(np.zeros((r, r)))
        else:
            out.append(cg_solve(CgProblem(S, U, U, weight, hp.lam), tol=hp.cg_tol, max_iter=hp.cg_max_iter))
    return tuple(out)


def objective_value(state_or_factors, x, S_m, S_n, hp: Hyperparams, M1=None, M2=None) -> float:
    """Value of the TDRC objective for a state (or factors plus projections)."""
    if isinstance(state_or_factors, TdrcState):
        fs, M1, M2 = state_or_factors.factors, state_or_factors.M1, state_or_factors.M2
    else:
        fs = state_or_factors
    C, P, _ = fs.as_tuple()
    fit = float(np.sum((np.asarray(x) - reconstruct(fs)) ** 2))
    value = 0.5 * fit + 0.5 * hp.lam * (float(np.sum(M1 * M1)) + float(np.sum(M2 * M2)))
    if hp.alpha:
        value += 0.5 * hp.alpha * float(np.sum((S_m - C @ M1 @ C.T) ** 2))
    if hp.beta:
        value += 0.5 * hp.beta * float(np.sum((S_n - P @ M2 @ P.T) ** 2))
    return value


def objective_gradient(fs: FactorSet, M1, M2, x, S_m, S_n, hp: Hyperparams) -> dict:
    """Partial gradients of the TDRC objective w.r.t. C, P, F, M1 and M2."""
    C, P, F = fs.as_tuple()
    x = np.asarray(x, dtype=np.float64)
    E = x - reconstruct(fs)
    Em = S_m - C @ M1 @ C.T
    En = S_n - P @ M2 @ P.T
    return {
        "C": -matricize(E, 1) @ khatri_rao(F, P) - hp.alpha * (Em @ C @ M1.T + Em.T @ C @ M1),
        "P": -matricize(E, 2) @ khatri_rao(F, C) - hp.beta * (En @ P @ M2.T + En.T @ P @ M2),
        "F": -matricize(E, 3) @ khatri_rao(P, C),
        "M1": hp.lam * M1 - hp.alpha * (C.T @ Em @ C),
        "M2": hp.lam * M2 - hp.beta * (P.T @ En @ P),
    }


def predict_scores(fs: FactorSet) -> np.ndarray:
    """Completed score tensor; larger means a more likely association."""
    return reconstruct(fs)


@dataclass
class FitResult:
    factors: FactorSet
    M1: np.ndarray
    M2: np.ndarray
    history: list = field(default_factory=list)
    converged: bool = False

    def __iter__(self):
        # allows ``fs, M1, M2, history = tdrc_fit(...)``
        return iter((self.factors, self.M1, self.M2, self.history))


def init_state(shape, hp: Hyperparams, rng=None) -> TdrcState:
    m, n, t = shape
    r = hp.r
    if rng is None:
        rng = np.random.default_rng(hp.seed)
    C = rng.random((m, r))
    P = rng.random((n, r))
    F = rng.random((t, r))
    zeros_r = np.zeros((r, r))
    return TdrcState(
        factors=FactorSet(C, P, F),
        M1=zeros_r, M2=zeros_r.copy(),
        J1=C.copy(), J2=P.copy(),
        Y1=np.zeros((m, r)), Y2=np.zeros((n, r)),
        rho1=float(hp.rho_init), rho2=float(hp.rho_init),
    )


def _rel_gap(A, J) -> float:
    nA = float(np.linalg.norm(A))
    diff = float(np.linalg.norm(A - J))
    return diff / nA if nA > 0 else diff


def tdrc_fit(x, S_m, S_n, hp: Hyperparams | None = None, rng=None, callback=None) -> FitResult:
    """Fit TDRC by alternating CG, least-squares and ADMM block updates.

    Each outer iteration runs, in order: M1/M2 via CG, F in closed form, one
    ADMM sweep for C, one for P. Iteration stops when the relative change
    of the objective and both relative primal gaps ``||C - J1|| / ||C||``,
    ``||P - J2|| / ||P||`` are below ``hp.tol``, or at ``hp.max_iter``.

    ``history`` holds one dict per iteration with keys ``iteration``,
    ``objective``, ``residual`` (tensor fit, unsquared), ``primal_C``,
    ``primal_P``, ``rho1`` and ``rho2``.

    Raises
    ------
    DivergenceError
        If the objective becomes non-finite.
    """
    hp = hp or Hyperparams()
    x = as_tensor3(x)
    m, n, t = x.shape
    S_m = np.asarray(getattr(S_m, "values", S_m), dtype=np.float64)
    S_n = np.asarray(getattr(S_n, "values", S_n), dtype=np.float64)
    if S_m.shape != (m, m) or S_n.shape != (n, n):
        raise ValueError(
            f"similarity shapes {S_m.shape}, {S_n.shape} do not match tensor dims {(m, n, t)}"
        )
    X1, X2, X3 = matricize(x, 1), matricize(x, 2), matricize(x, 3)
    state = init_state(x.shape, hp, rng)
    history = []
    prev_obj = None
    converged = False
    for it in range(1, hp.max_iter + 1):
        C, P, F = state.factors.as_tuple()
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                M1, M2 = update_projections(C, P, S_m, S_n, hp)
                F = update_F(x, C, P, X3)
                state = state.replace(factors=FactorSet(C, P, F), M1=M1, M2=M2)
                state = admm_update_C(state, x, S_m, hp, X1)
                state = admm_update_P(state, x, S_n, hp, X2)
                obj = objective_value(state, x, S_m, S_n, hp)
            except DivergenceError as exc:
                raise DivergenceError(
                    f"{exc} at iteration {it} (rho1={state.rho1:.3g}, rho2={state.rho2:.3g}, "
                    f"alpha={hp.alpha}, beta={hp.beta})"
                ) from None
        C, P, F = state.factors.as_tuple()
        record = {
            "iteration": it,
            "objective": obj,
            "residual": float(np.linalg.norm((x - reconstruct(state.factors)).ravel())),
            "primal_C": _rel_gap(C, state.J1),
            "primal_P": _rel_gap(P, state.J2),
            "rho1": state.rho1,
            "rho2": state.rho2,
        }
        if not math.isfinite(obj):
            raise DivergenceError(
                f"objective became non-finite at iteration {it} "
                f"(rho1={state.rho1:.3g}, rho2={state.rho2:.3g}, alpha={hp.alpha}, beta={hp.beta})"
            )
        history.append(record)
        state = state.replace(iter=it)
        if callback is not None:
            callback(record)
        logger.debug("iter %d objective %.10g primal %.3g/%.3g", it, obj,
                     record["primal_C"], record["primal_P"])
        if prev_obj is not None:
            change = abs(prev_obj - obj) / max(abs(prev_obj), np.finfo(float).tiny)
            if change < hp.tol and record["primal_C"] < hp.tol and record["primal_P"] < hp.tol:
                converged = True
                break
        prev_obj = obj
    state = state.replace(history=tuple(history))
    return FitResult(state.factors, state.M1, state.M2, history, converged)
