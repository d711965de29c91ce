"""Ground-truth systems: the damped Duffing oscillator and a finite-difference
Kuramoto-Sivashinsky equation, with the dataset generators built on them."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import TimeSeriesDataset
from .odeint import IntegrationError, IntegratorConfig, dopri54, euler_integrate

PAPER_TOLERANCES = IntegratorConfig(abs_tol=1e-9, rel_tol=1e-7)


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator so that substreams are cheap and reproducible."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


# -- Duffing -------------------------------------------------------------------

@dataclass(frozen=True)
class DuffingParams:
    alpha: float = 1.0
    beta: float = -1.0
    gamma: float = 0.5
    dt: float = 0.25

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def field(self, t, y):
        x, v = y[..., 0], y[..., 1]
        return np.stack([v, -self.gamma * v - x * (self.beta + self.alpha * x * x)], axis=-1)

    def energy(self, y):
        y = np.asarray(y, dtype=float)
        x, v = y[..., 0], y[..., 1]
        return 0.5 * v * v + 0.5 * self.beta * x * x + 0.25 * self.alpha * x ** 4


def duffing_step(params: DuffingParams, state, cfg: IntegratorConfig = PAPER_TOLERANCES) -> np.ndarray:
    """Advance one sampling interval. Rows of a 2-D ``state`` are integrated
    independently, so batching never changes a row's result."""
    state = np.asarray(state, dtype=float)
    y = np.atleast_2d(state)
    out = dopri54(params.field, y, 0.0, params.dt, cfg, per_row=True)
    return out[0] if state.ndim == 1 else out


def duffing_trajectories(params: DuffingParams, ics, n_steps: int,
                         cfg: IntegratorConfig = PAPER_TOLERANCES) -> np.ndarray:
    """Shape ``(n_ics, n_steps + 1, 2)``."""
    y = np.atleast_2d(np.asarray(ics, dtype=float))
    out = np.empty((y.shape[0], n_steps + 1, 2))
    out[:, 0] = y
    for n in range(n_steps):
        y = duffing_step(params, y, cfg)
        out[:, n + 1] = y
    return out


def generate_duffing_dataset(seed: int, n_trajectories: int = 1000, n_steps: int = 10, box: float = 2.0,
                             params: DuffingParams = DuffingParams(),
                             cfg: IntegratorConfig = PAPER_TOLERANCES) -> TimeSeriesDataset:
    rng = make_rng(seed)
    ics = rng.uniform(-box, box, size=(n_trajectories, 2))
    trajs = duffing_trajectories(params, ics, n_steps, cfg)
    return TimeSeriesDataset(list(trajs), system={"name": "duffing", **asdict(params), "box": box},
                             seed=seed, extra={"rejections": 0})


# -- Kuramoto-Sivashinsky ------------------------------------------------------

@dataclass(frozen=True)
class KsParams:
    L: float = 16.0
    nx: int = 128
    dt: float = 0.005
    substeps: int | None = None    # None: smallest count meeting the Euler stability bound
    conservative: bool = False     # advect with -(u^2)_x / 2 instead of -u u_x

    def __post_init__(self):
        if self.nx < 5:
            raise ValueError("nx must be at least 5 for the fourth-derivative stencil")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def dx(self) -> float:
        return self.L / self.nx

    def linear_spectrum(self) -> np.ndarray:
        """Eigenvalues of the discretized ``-u_xx - u_xxxx`` for each Fourier mode."""
        s = np.sin(np.pi * np.arange(self.nx) / self.nx) ** 2
        return 4.0 * s / self.dx ** 2 - 16.0 * s * s / self.dx ** 4

    def n_substeps(self) -> int:
        if self.substeps is not None:
            return int(self.substeps)
        # Euler is stable for h |lambda| <= 2; keep a factor of two in reserve
        # for the advection term
        h_max = 1.0 / np.max(np.abs(self.linear_spectrum()))
        return max(1, math.ceil(self.dt / h_max))


def ks_rhs(params: KsParams, u) -> np.ndarray:
    """Periodic central differences along the last axis."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != params.nx:
        raise ValueError(f"expected {params.nx} grid values, got {u.shape[-1]}")
    dx = params.dx
    up1, um1 = np.roll(u, -1, axis=-1), np.roll(u, 1, axis=-1)
    up2, um2 = np.roll(u, -2, axis=-1), np.roll(u, 2, axis=-1)
    u_xx = (up1 - 2.0 * u + um1) / dx ** 2
    u_xxxx = (um2 - 4.0 * um1 + 6.0 * u - 4.0 * up1 + up2) / dx ** 4
    if params.conservative:
        adv = (up1 * up1 - um1 * um1) / (4.0 * dx)
    else:
        adv = u * (up1 - um1) / (2.0 * dx)
    return -u_xx - u_xxxx - adv


def ks_step(params: KsParams, u) -> np.ndarray:
    """One sampling interval ``dt`` of explicit Euler, split into ``n_substeps`` steps."""
    n = params.n_substeps()
    traj = euler_integrate(lambda t, v: ks_rhs(params, v), u, params.dt / n, n, stride=n)
    return traj[-1]


def ks_trajectories(params: KsParams, ics, n_steps: int) -> np.ndarray:
    """Shape ``(n_ics, n_steps + 1, nx)``."""
    n = params.n_substeps()
    u = np.atleast_2d(np.asarray(ics, dtype=float))
    traj = euler_integrate(lambda t, v: ks_rhs(params, v), u, params.dt / n, n * n_steps, stride=n)
    return np.swapaxes(traj, 0, 1)


def generate_ks_dataset(seed: int, n_trajectories: int = 100, n_steps: int = 100, amplitude: float = 4.0,
                        params: KsParams = KsParams(), max_attempts: int = 100) -> TimeSeriesDataset:
    """Uniform initial conditions on ``[-amplitude, amplitude]^nx``; trajectories that
    overflow are discarded and redrawn, and the count is stored in ``extra``."""
    rng = make_rng(seed)
    trajs, rejections = [], 0
    for _ in range(max_attempts):
        need = n_trajectories - len(trajs)
        if need == 0:
            break
        ics = rng.uniform(-amplitude, amplitude, size=(need, params.nx))
        try:
            batch = ks_trajectories(params, ics, n_steps)
            trajs.extend(batch)
        except IntegrationError:
            # fall back to one-by-one so that only the offending trajectories are dropped
            for ic in ics:
                try:
                    trajs.append(ks_trajectories(params, ic, n_steps)[0])
                except IntegrationError:
                    rejections += 1
    if len(trajs) < n_trajectories:
        raise IntegrationError(f"only {len(trajs)} of {n_trajectories} KS trajectories stayed finite")
    system = {"name": "ks", "L": params.L, "nx": params.nx, "dt": params.dt,
              "substeps": params.n_substeps(), "conservative": params.conservative, "amplitude": amplitude}
    return TimeSeriesDataset(trajs, system=system, seed=seed, extra={"rejections": rejections})


def params_from_system(system: dict):
    """Rebuild the ground-truth parameters stored in a dataset header."""
    name = system.get("name")
    if name == "duffing":
        return DuffingParams(system["alpha"], system["beta"], system["gamma"], system["dt"])
    if name == "ks":
        return KsParams(system["L"], system["nx"], system["dt"], system.get("substeps"),
                        system.get("conservative", False))
    raise ValueError(f"unknown system {name!r}")


def stepper_for(params):
    if isinstance(params, DuffingParams):
        return lambda x: duffing_step(params, x)
    if isinstance(params, KsParams):
        return lambda x: ks_step(params, x)
    raise TypeError(type(params))
