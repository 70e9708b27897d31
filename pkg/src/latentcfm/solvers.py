"""ODE integrators, score <-> vector-field conversion and a Langevin corrector.

Fields are callables ``field(x, t) -> dx/dt`` taking a batch ``x`` of shape
(n, d) and a scalar time.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class IntegrationError(RuntimeError):
    pass


class ContractError(ValueError):
    pass


SCHEMES = ("euler", "rk4", "dopri5")


@dataclass
class SolverConfig:
    scheme: str = "dopri5"
    steps: int = 100            # fixed-step schemes
    rtol: float = 1e-5
    atol: float = 1e-5
    max_steps: int = 10000      # adaptive scheme: accepted + rejected steps
    safety: float = 0.9

    def __post_init__(self):
        self.scheme = self.scheme.lower()
        if self.scheme not in SCHEMES:
            raise ContractError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.steps < 1 or self.max_steps < 1:
            raise ContractError("steps and max_steps must be positive")
        if not (self.rtol > 0 and self.atol > 0):
            raise ContractError("rtol and atol must be positive")


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    n_evals: int = 0
    n_rejected: int = 0

    @property
    def final(self):
        return self.states[-1]

    def to_rows(self, max_traj=None):
        """Long-format rows ``(traj_id, t, x0, x1, ...)`` for CSV export."""
        rows = []
        for t, x in zip(self.times, self.states):
            x = np.atleast_2d(x)
            n = len(x) if max_traj is None else min(len(x), max_traj)
            for i in range(n):
                rows.append((i, float(t), *map(float, x[i])))
        return rows


def _euler_step(f, x, t, h):
    return x + h * f(x, t), 1


def _rk4_step(f, x, t, h):
    k1 = f(x, t)
    k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = f(x + h * k3, t + h)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4), 4


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def _dopri_step(f, x, t, h, k1):
    k = [k1]
    for i in range(1, 7):
        xi = x + h * sum(a * kj for a, kj in zip(_A[i], k) if a != 0.0)
        k.append(f(xi, t + _C[i] * h))
    x_new = x + h * sum(b * kj for b, kj in zip(_B5, k) if b != 0.0)
    err = h * sum(e * kj for e, kj in zip(_E, k))
    return x_new, err, k[6]


def _error_norm(err, x, x_new, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(f, x, t0, f0, direction, rtol, atol):
    """Hairer-Wanner starting step for an order-5 method."""
    scale = atol + np.abs(x) * rtol
    d0 = np.sqrt(np.mean((x / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = f(x + direction * h0 * f0, t0 + direction * h0)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def integrate(field_fn, x0, cfg: SolverConfig | None = None, t0=0.0, t1=1.0, record=False):
    """Solve ``dx/dt = field(x, t)`` from ``t0`` to ``t1``.

    Fixed-step schemes take ``cfg.steps`` steps of exactly ``(t1 - t0) / steps``.
    Dopri5 uses an RMS error norm over the whole batch with tolerance
    ``atol + rtol * |x|`` and proportional step control.  With ``record`` the
    trajectory holds every accepted step; otherwise only the two endpoints.
    """
    cfg = cfg or SolverConfig()
    x = np.array(x0, dtype=float, copy=True)
    if t1 == t0:
        return Trajectory([t0], [x])
    traj = Trajectory([t0], [x.copy()])
    calls = [0]

    def f(y, t):
        calls[0] += 1
        out = np.asarray(field_fn(y, t), dtype=float)
        if not np.all(np.isfinite(out)):
            raise IntegrationError(f"field returned non-finite values at t={t:.6g}")
        return out

    if cfg.scheme in ("euler", "rk4"):
        step = _euler_step if cfg.scheme == "euler" else _rk4_step
        h = (t1 - t0) / cfg.steps
        for i in range(cfg.steps):
            t = t0 + i * h
            x, _ = step(f, x, t, h)
            if record:
                traj.times.append(t0 + (i + 1) * h)
                traj.states.append(x.copy())
        if not record:
            traj.times.append(t1)
            traj.states.append(x)
        else:
            traj.times[-1] = t1
        traj.n_evals = calls[0]
        return traj

    direction = 1.0 if t1 > t0 else -1.0
    t = t0
    k1 = f(x, t)
    h = _initial_step(f, x, t0, k1, direction, cfg.rtol, cfg.atol)
    attempts = 0
    while direction * (t1 - t) > 1e-12 * max(1.0, abs(t1)):
        if attempts >= cfg.max_steps:
            raise IntegrationError(
                f"dopri5 exceeded max_steps={cfg.max_steps} at t={t:.6g} "
                f"(h={h:.3g}, rejected={traj.n_rejected}, evals={calls[0]})")
        attempts += 1
        h = min(h, abs(t1 - t))
        x_new, err, k7 = _dopri_step(f, x, t, direction * h, k1)
        en = _error_norm(err, x, x_new, cfg.rtol, cfg.atol)
        if en <= 1.0:
            t = t + direction * h
            if abs(t1 - t) <= 1e-12 * max(1.0, abs(t1)):
                t = t1
            x, k1 = x_new, k7
            if record:
                traj.times.append(t)
                traj.states.append(x.copy())
        else:
            traj.n_rejected += 1
        factor = 10.0 if en == 0 else min(10.0, max(0.2, cfg.safety * en ** (-1 / 5)))
        h = h * factor
        if h < 1e-14:
            raise IntegrationError(f"dopri5 step size underflow at t={t:.6g}")
    if not record:
        traj.times.append(t1)
        traj.states.append(x)
    traj.n_evals = calls[0]
    return traj


# -- score <-> vector field --------------------------------------------------------
@dataclass(frozen=True)
class GaussianSchedule:
    """``p_t(x | x1) = N(alpha_t x1, sigma_t^2 I)`` described by four callables."""
    alpha: callable
    dalpha: callable
    sigma: callable
    dsigma: callable

    def coefficients(self, t):
        al, dal, s, ds = self.alpha(t), self.dalpha(t), self.sigma(t), self.dsigma(t)
        if al == 0:
            raise ContractError(f"alpha_t = 0 at t={t}: the conversion is singular")
        return dal / al, (dal * s - al * ds) * s / al


LINEAR = GaussianSchedule(lambda t: t, lambda t: 1.0, lambda t: 1.0 - t, lambda t: -1.0)


def linear_coefficients(t):
    """``(a_t, b_t) = (1/t, (1-t)/t)`` for the straight path from N(0, I)."""
    if t <= 0:
        raise ContractError("t = 0 is singular for the linear path")
    return 1.0 / t, (1.0 - t) / t


def _coeffs(t, schedule):
    return linear_coefficients(t) if schedule is None or schedule is LINEAR else schedule.coefficients(t)


def vector_field_to_score(v, x, t, schedule=None):
    """``score = (v - a_t x) / b_t``."""
    a, b = _coeffs(t, schedule)
    if b == 0:
        raise ContractError(f"b_t = 0 at t={t}: score undefined")
    return (np.asarray(v, dtype=float) - a * np.asarray(x, dtype=float)) / b


def score_to_vector_field(s, x, t, schedule=None):
    a, b = _coeffs(t, schedule)
    return a * np.asarray(x, dtype=float) + b * np.asarray(s, dtype=float)


def composed_field(v_net, x, t, conds, schedule=None):
    """Field of the product of conditional paths: ``-(m-1) a_t x + sum_i v(x, f_i, t)``.

    ``v_net(x, t, cond)`` evaluates one conditional field; ``conds`` lists the
    m conditioning inputs (m = 2 gives ``-a_t x + v_1 + v_2``).
    """
    if not 0 < t < 1:
        raise ContractError("composition needs t in (0, 1)")
    a, _ = _coeffs(t, schedule)
    total = -(len(conds) - 1) * a * np.asarray(x, dtype=float)
    for c in conds:
        total = total + v_net(x, t, c)
    return total


def composed_score(v_net, x, t, conds, schedule=None):
    """Score of the product: the sum of the conditional scores."""
    return sum(vector_field_to_score(v_net(x, t, c), x, t, schedule) for c in conds)


def langevin_correct(score_fn, x, steps, eps_drift, eps_diff, rng):
    """``steps`` iterations of ``x <- x + eps_drift s(x) + sqrt(2 eps_diff) z``."""
    if steps < 0:
        raise ContractError("number of Langevin steps must be nonnegative")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = np.array(x, dtype=float, copy=True)
    noise = np.sqrt(2.0 * eps_diff)
    for _ in range(steps):
        x = x + eps_drift * score_fn(x)
        if eps_diff:
            x = x + noise * rng.standard_normal(x.shape)
    return x


@dataclass
class ComposeConfig:
    n_ode: int = 100
    n_langevin: int = 2
    eps_drift: float | list = 1e-3
    eps_diff: float | list = 1e-3
    t_floor: float = 1e-2
    t_ceil: float = 1e-2

    def __post_init__(self):
        if self.n_ode < 1 or self.n_langevin < 0:
            raise ContractError("n_ode must be positive and n_langevin nonnegative")
        if not (0 < self.t_floor < 1 - self.t_ceil < 1):
            raise ContractError("need 0 < t_floor < 1 - t_ceil < 1")

    def eps_at(self, i):
        def pick(e):
            return float(e[i]) if np.ndim(e) else float(e)
        return pick(self.eps_drift), pick(self.eps_diff)


def predictor_corrector(v_net, conds, x_init, cfg: ComposeConfig, rng):
    """Euler predictor on the composed field with Langevin corrections.

    Runs over ``[t_floor, 1 - t_ceil]``; after each predictor step the state
    is corrected with ``n_langevin`` steps using the product score at the new
    time.  Returns the final states.
    """
    ts = np.linspace(cfg.t_floor, 1.0 - cfg.t_ceil, cfg.n_ode + 1)
    x = np.array(x_init, dtype=float, copy=True)
    for i in range(cfg.n_ode):
        t, t_next = ts[i], ts[i + 1]
        x = x + (t_next - t) * composed_field(v_net, x, t, conds)
        if cfg.n_langevin:
            drift, diff = cfg.eps_at(i)
            x = langevin_correct(lambda y: composed_score(v_net, y, t_next, conds), x,
                                 cfg.n_langevin, drift, diff, rng)
    return x
