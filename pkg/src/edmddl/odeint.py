"""Explicit integrators: adaptive Dormand-Prince 5(4), fixed-step Euler and the
continuous adjoint pass used to train neural-ODE dictionaries."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np


class IntegrationError(RuntimeError):
    """Integrator failure; ``time`` is where it happened (or the last time reached)."""

    def __init__(self, message: str, time: float | None = None, step: int | None = None):
        self.time = time
        self.step = step
        super().__init__(message)


@dataclass(frozen=True)
class IntegratorConfig:
    abs_tol: float = 1e-9
    rel_tol: float = 1e-7
    initial_step: float | None = None
    max_steps: int = 100_000
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 5.0

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.initial_step is not None and self.initial_step <= 0:
            raise ValueError("initial_step must be positive")


# Dormand & Prince (1980) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4
_A_ROWS = [np.array(row + (0.0,) * (7 - len(row))) for row in _A]

Field = Callable[[float, np.ndarray], np.ndarray]


def _check_finite(arr, t, what="field output"):
    if not np.all(np.isfinite(arr)):
        raise IntegrationError(f"non-finite {what} at t={t!r}", time=t)


def _rms(x, axis=None):
    return np.sqrt(np.mean(np.square(x), axis=axis))


def _initial_step(field, t0, y0, f0, direction, cfg, order=5, axis=None):
    """Hairer-Norsett-Wanner starting step from scaled derivative norms."""
    scale = cfg.abs_tol + cfg.rel_tol * np.abs(y0)
    d0 = _rms(y0 / scale, axis)
    d1 = _rms(f0 / scale, axis)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    if axis is not None:
        h0 = h0.reshape(-1, *([1] * (y0.ndim - 1)))
    y1 = y0 + direction * h0 * f0
    f1 = field(t0 + direction * h0, y1)
    d2 = _rms((f1 - f0) / scale, axis)
    if axis is not None:
        d2 = d2.reshape(h0.shape)
        d1 = d1.reshape(h0.shape)
    big = np.maximum(d1, d2)
    h1 = np.where(big <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.maximum(big, 1e-300)) ** (1 / order))
    return np.minimum(100 * h0, h1)


def _lincomb(coeffs, k):
    # elementwise accumulation rather than a BLAS contraction: the rounding of
    # each row then does not depend on how many rows are in the batch
    acc = None
    for c, kj in zip(coeffs, k):
        if c == 0.0:
            continue
        acc = c * kj if acc is None else acc + c * kj
    return acc


def _stages(field, t, y, h, f0):
    """Seven Dormand-Prince stages stacked along a new leading axis; ``h`` may be
    a scalar or an array broadcastable against ``y``."""
    k = np.empty((7,) + y.shape)
    k[0] = f0
    for i in range(1, 7):
        acc = _lincomb(_A_ROWS[i][:i], k)
        acc *= h
        acc += y
        k[i] = field(t + _C[i] * h, acc)
    return k


def _combine(k, y, dt, cfg, axis=None):
    """5th-order update and RMS-scaled embedded error norm."""
    y_new = _lincomb(_B5, k)
    y_new *= dt
    y_new += y
    err = _lincomb(_E, k)
    err *= dt
    scale = np.maximum(np.abs(y), np.abs(y_new))
    scale *= cfg.rel_tol
    scale += cfg.abs_tol
    err /= scale
    err *= err
    return y_new, np.sqrt(np.mean(err, axis=axis))


def dopri54(field: Field, y0, t0: float, t1: float, cfg: IntegratorConfig | None = None,
            per_row: bool = False) -> np.ndarray:
    """Integrate ``dy/dt = field(t, y)`` from ``t0`` to ``t1`` and return ``y(t1)``.

    Local error is controlled by the embedded 4th-order solution with the RMS
    norm of ``err / (atol + rtol * max(|y|, |y_new|))``; a step is accepted when
    that norm is at most one. ``t1 < t0`` integrates backward.

    With ``per_row=True`` every row of a 2-D ``y0`` is an independent system with
    its own step-size sequence, so a row's result does not depend on the other
    rows in the batch. The field must then act row-wise.
    """
    cfg = cfg or IntegratorConfig()
    y = np.array(y0, dtype=float)
    _check_finite(y, t0, "initial state")
    if t1 == t0:
        raise ValueError("t0 and t1 must differ")
    if per_row:
        if y.ndim != 2:
            raise ValueError("per_row integration expects a 2-D state")
        return _dopri54_rows(field, y, float(t0), float(t1), cfg)
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    t = float(t0)
    f = field(t, y)
    _check_finite(f, t)
    h = cfg.initial_step or float(_initial_step(field, t, y, f, direction, cfg))
    h = min(h, span)
    for _ in range(cfg.max_steps):
        remaining = abs(t1 - t)
        if remaining <= 1e-14 * max(1.0, abs(t1)):
            return y
        last = h >= remaining
        if last:
            h = remaining
        dt = direction * h
        k = _stages(field, t, y, dt, f)
        y_new, err_norm = _combine(k, y, dt, cfg)
        if not np.isfinite(err_norm):
            _check_finite(k, t)
        err_norm = float(err_norm)
        if err_norm <= 1.0:
            t = t1 if last else t + dt
            y = y_new
            f = k[6]
            factor = cfg.max_factor if err_norm == 0 else min(cfg.max_factor, cfg.safety * err_norm ** -0.2)
        else:
            factor = max(cfg.min_factor, cfg.safety * err_norm ** -0.2)
        h = h * factor
    raise IntegrationError(f"max_steps={cfg.max_steps} exceeded; reached t={t!r}", time=t)


def _dopri54_rows(field, y, t0, t1, cfg):
    n = y.shape[0]
    direction = 1.0 if t1 > t0 else -1.0
    t = np.full(n, t0)
    f = field(t0, y)
    _check_finite(f, t0)
    if cfg.initial_step:
        h = np.full(n, cfg.initial_step)
    else:
        h = _initial_step(field, t0, y, f, direction, cfg, axis=1).ravel()
    h = np.minimum(h, abs(t1 - t0))
    active = np.ones(n, dtype=bool)
    tol_end = 1e-14 * max(1.0, abs(t1))
    for _ in range(cfg.max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            return y
        ya, fa, ta, ha = y[idx], f[idx], t[idx], h[idx]
        remaining = np.abs(t1 - ta)
        last = ha >= remaining
        ha = np.where(last, remaining, ha)
        dt = (direction * ha)[:, None]
        # autonomous-time argument is passed as the first active row's time;
        # per-row fields are required to be autonomous
        k = _stages(lambda tt, yy: field(float(ta[0]), yy), 0.0, ya, dt, fa)
        y_new, err_norm = _combine(k, ya, dt, cfg, axis=1)
        if not np.all(np.isfinite(err_norm)):
            _check_finite(k, float(ta[0]))
        ok = err_norm <= 1.0
        with np.errstate(divide="ignore"):
            grow = np.where(err_norm == 0, cfg.max_factor,
                            np.minimum(cfg.max_factor, cfg.safety * err_norm ** -0.2))
            shrink = np.maximum(cfg.min_factor, cfg.safety * err_norm ** -0.2)
        acc = idx[ok]
        y[acc] = y_new[ok]
        f[acc] = k[6][ok]
        t[acc] = np.where(last[ok], t1, ta[ok] + direction * ha[ok])
        h[idx] = ha * np.where(ok, grow, shrink)
        done = acc[np.abs(t1 - t[acc]) <= tol_end]
        active[done] = False
    raise IntegrationError(f"max_steps={cfg.max_steps} exceeded; reached t={float(t.min())!r}",
                           time=float(t.min()))


def euler_integrate(field: Field, y0, dt: float, steps: int, stride: int = 1) -> np.ndarray:
    """Explicit Euler. Returns the states at step indices ``0, stride, 2 stride, ...``
    (all ``steps + 1`` states for ``stride=1``)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if stride < 1 or steps % stride:
        raise ValueError("steps must be a positive multiple of stride")
    y = np.array(y0, dtype=float)
    out = np.empty((steps // stride + 1,) + y.shape)
    out[0] = y
    for n in range(steps):
        with np.errstate(over="ignore", invalid="ignore"):
            y = y + dt * field(n * dt, y)
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"non-finite state after Euler step {n}", time=(n + 1) * dt, step=n)
        if (n + 1) % stride == 0:
            out[(n + 1) // stride] = y
    return out


class AdjointField(Protocol):
    """A parametric vector field admitting vector-Jacobian products."""

    def __call__(self, t: float, h: np.ndarray) -> np.ndarray: ...

    def vjp(self, t: float, h: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(a^T df/dh, a^T df/dtheta)``, the latter flattened and summed over rows."""
        ...

    @property
    def n_params(self) -> int: ...


def adjoint_backward(field: AdjointField, h_end, grad_h_end, t_start: float, t_end: float,
                     cfg: IntegratorConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a loss through ``h(t_end)`` by the continuous adjoint method.

    The state ``h`` is re-integrated backward from ``h_end`` together with the
    adjoint ``a`` (``da/dt = -a df/dh``, ``a(t_end) = grad_h_end``) and the
    parameter accumulator (``dg/dt = -a df/dtheta``). Returns
    ``(grad_params, a(t_start))``.
    """
    h_end = np.asarray(h_end, dtype=float)
    grad_h_end = np.asarray(grad_h_end, dtype=float)
    if h_end.shape != grad_h_end.shape:
        raise ValueError(f"cotangent shape {grad_h_end.shape} does not match state shape {h_end.shape}")
    shape = h_end.shape
    size = h_end.size
    n_params = field.n_params

    def augmented(t, z):
        h = z[:size].reshape(shape)
        a = z[size:2 * size].reshape(shape)
        dh = field(t, h)
        gh, gp = field.vjp(t, h, a)
        out = np.empty_like(z)
        out[:size] = dh.ravel()
        out[size:2 * size] = -gh.ravel()
        out[2 * size:] = -gp
        return out

    z0 = np.concatenate([h_end.ravel(), grad_h_end.ravel(), np.zeros(n_params)])
    z = dopri54(augmented, z0, t_end, t_start, cfg)
    return z[2 * size:].copy(), z[size:2 * size].reshape(shape)
