"""Probabilistic dynamic movement primitives.

A critically damped DMP

    tau^2 y'' = alpha (beta (g - y) - tau y') + x(t) phi(t)^T w,   beta = alpha / 4

has the closed-form solution ``y(t) = Phi(t)^T w_g + c1 y1(t) + c2 y2(t)`` where
``w_g = [w, g]``.  The position/velocity basis ``Phi``/``Phi_dot`` does not
depend on the weights, so it is tabulated once on a time grid and every
trajectory afterwards is a small matrix product plus the two complementary
solutions fixed by the initial condition.

The phase runs on the same clock as the attractor (``x = exp(-alpha_x t / tau)``),
so a table built for ``tau`` equals the ``tau = 1`` table evaluated at ``t / tau``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ContractError, NumericError

# adjacent forcing bumps cross at this fraction of their peak
_BASIS_OVERLAP = 0.55
# exponent budget per block in the stabilised cumulative quadrature
_BLOCK_EXPONENT = 40.0


@dataclass(frozen=True)
class ProDMPConfig:
    alpha: float = 25.0
    n_weights: int = 30
    alpha_x: float = 3.0
    tau_range: tuple[float, float] = (0.3, 3.0)
    quad_resolution: int = 20000

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.n_weights < 2:
            raise ConfigError(f"need at least 2 forcing basis functions, got {self.n_weights}")
        lo, hi = self.tau_range
        if not 0 < lo < hi:
            raise ConfigError(f"invalid tau range {self.tau_range}")
        if self.alpha_x <= 0:
            raise ConfigError("alpha_x must be positive")

    @property
    def beta(self) -> float:
        # the closed forms of q1, q2 below hold for critical damping only
        return self.alpha / 4.0

    @property
    def n_basis(self) -> int:
        return self.n_weights + 1

    def check_tau(self, tau) -> None:
        lo, hi = self.tau_range
        t = np.asarray(tau)
        if np.any(t < lo - 1e-12) or np.any(t > hi + 1e-12):
            raise ContractError(f"tau {tau} outside range [{lo}, {hi}]")


@dataclass(frozen=True)
class InitialCondition:
    t_index: int
    y: np.ndarray
    y_dot: np.ndarray


@dataclass
class BasisTables:
    cfg: ProDMPConfig
    tau: float
    times: np.ndarray
    Phi: np.ndarray  # [T x (N_w + 1)], goal basis in the last column
    Phi_dot: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    y1_dot: np.ndarray
    y2_dot: np.ndarray
    _rescaled: dict = field(default_factory=dict, repr=False)

    def at_tau(self, tau: float) -> "BasisTables":
        """Tables on the same grid for another time constant (cached)."""
        if tau == self.tau:
            return self
        key = float(tau)
        if key not in self._rescaled:
            self._rescaled[key] = assemble_basis_tables(self.cfg, self.times, key)
        return self._rescaled[key]


def _check_grid(times) -> np.ndarray:
    t = np.asarray(times, dtype=np.float64)
    if t.ndim != 1 or t.size < 2:
        raise ContractError("time grid needs at least two points")
    if t[0] != 0.0 or np.any(np.diff(t) <= 0):
        raise ContractError("time grid must start at 0 and be strictly ascending")
    return t


def build_phase(cfg: ProDMPConfig, times, tau: float = 1.0) -> np.ndarray:
    t = _check_grid(times)
    return np.exp(-cfg.alpha_x * t / tau)


def basis_centers(cfg: ProDMPConfig) -> tuple[np.ndarray, float]:
    """Centres (uniform in canonical time on [0, 1]) and the shared width."""
    centers = np.linspace(0.0, 1.0, cfg.n_weights)
    half = 0.5 * (centers[1] - centers[0])
    width = half / np.sqrt(2.0 * np.log(1.0 / _BASIS_OVERLAP))
    return centers, width


def build_forcing_basis(cfg: ProDMPConfig, phase: np.ndarray) -> np.ndarray:
    """Normalised Gaussian bumps [T x N_w]; every row sums to one."""
    if cfg.n_weights < 2:
        raise ConfigError("need at least 2 forcing basis functions")
    canonical = -np.log(np.asarray(phase, dtype=np.float64)) / cfg.alpha_x
    centers, width = basis_centers(cfg)
    logits = -0.5 * ((canonical[:, None] - centers[None, :]) / width) ** 2
    logits -= logits.max(axis=1, keepdims=True)
    bumps = np.exp(logits)
    return bumps / bumps.sum(axis=1, keepdims=True)


def _quadrature_grid(cfg: ProDMPConfig, t: np.ndarray) -> tuple[np.ndarray, int]:
    dt = np.diff(t)
    if not np.allclose(dt, dt[0], rtol=1e-9, atol=1e-12):
        raise ContractError("basis tables need a uniform time grid")
    sub = max(10, int(np.ceil(dt[0] * cfg.quad_resolution)))
    n = (t.size - 1) * sub + 1
    return np.linspace(0.0, t[-1], n), sub


def _scaled_cumulative(rate: float, grid: np.ndarray, integrand: np.ndarray) -> np.ndarray:
    """``int_0^t exp(rate (t' - t)) f(t') dt'`` by the trapezoid rule on ``grid``.

    Evaluated block-wise so no intermediate exponent exceeds the block budget.
    Equal (up to rounding) to a plain cumulative trapezoid of
    ``exp(rate t') f`` multiplied by ``exp(-rate t)``.
    """
    h = grid[1] - grid[0]
    block = max(2, int(_BLOCK_EXPONENT / max(rate * h, 1e-300)))
    out = np.zeros_like(integrand)
    carry = np.zeros(integrand.shape[1:])
    start = 0
    while start < grid.size - 1:
        stop = min(start + block, grid.size - 1)
        local = grid[start : stop + 1] - grid[start]
        weighted = np.exp(rate * local)[:, None] * integrand[start : stop + 1]
        seg = 0.5 * h * (weighted[1:] + weighted[:-1])
        cum = np.concatenate([np.zeros((1,) + carry.shape), np.cumsum(seg, axis=0)])
        decay = np.exp(-rate * local)[:, None]
        out[start : stop + 1] = decay * (carry + cum)
        carry = out[stop]
        start = stop
    return out


def _integrals(cfg: ProDMPConfig, times, tau: float):
    """Scaled integrals on the output grid: e^{-at} p1 and e^{-at} p2 (a = alpha / 2 tau)."""
    t = _check_grid(times)
    grid, sub = _quadrature_grid(cfg, t)
    phase = build_phase(cfg, grid, tau)
    basis = build_forcing_basis(cfg, phase)
    forcing = phase[:, None] * basis / tau**2
    rate = cfg.alpha / (2.0 * tau)
    s1 = _scaled_cumulative(rate, grid, grid[:, None] * forcing)[::sub]
    s2 = _scaled_cumulative(rate, grid, forcing)[::sub]
    return t, rate, s1, s2


def compute_pq(cfg: ProDMPConfig, times, tau: float = 1.0) -> dict[str, np.ndarray]:
    """p1, p2 [T x N_w] by cumulative trapezoid on the refined grid; q1, q2 [T] in closed form."""
    t, rate, s1, s2 = _integrals(cfg, times, tau)
    growth = np.exp(rate * t)[:, None]
    return {
        "p1": growth * s1,
        "p2": growth * s2,
        "q1": (rate * t - 1.0) * np.exp(rate * t) + 1.0,
        "q2": rate * (np.exp(rate * t) - 1.0),
    }


def assemble_basis_tables(cfg: ProDMPConfig, times, tau: float = 1.0) -> BasisTables:
    return _assemble_cached(cfg, tuple(np.asarray(times, dtype=np.float64)), float(tau))


@lru_cache(maxsize=64)
def _assemble_cached(cfg: ProDMPConfig, times: tuple, tau: float) -> BasisTables:
    t, a, s1, s2 = _integrals(cfg, np.asarray(times), tau)
    decay = np.exp(-a * t)
    y1, y2 = decay, t * decay
    y1_dot, y2_dot = -a * decay, (1.0 - a * t) * decay

    # y2 p2 - y1 p1 with the exponentials folded into s1, s2
    phi_w = t[:, None] * s2 - s1
    phi_w_dot = (1.0 - a * t)[:, None] * s2 + a * s1
    phi_g = 1.0 - decay * (1.0 + a * t)
    phi_g_dot = a * a * t * decay

    Phi = np.concatenate([phi_w, phi_g[:, None]], axis=1)
    Phi_dot = np.concatenate([phi_w_dot, phi_g_dot[:, None]], axis=1)
    for arr in (Phi, Phi_dot):
        arr[0] = 0.0
        arr.setflags(write=False)
    tables = BasisTables(cfg, tau, t, Phi, Phi_dot, y1, y2, y1_dot, y2_dot)
    if not all(np.all(np.isfinite(a_)) for a_ in (Phi, Phi_dot, y1, y2)):
        raise NumericError("non-finite basis table entries")
    return tables


def boundary_coefficients(tables: BasisTables, ic: InitialCondition, w_g: np.ndarray):
    """c1, c2 fixing position and velocity at the condition time.

    ``w_g`` has shape [..., N_w + 1]; ``ic.y`` / ``ic.y_dot`` broadcast against
    ``w_g[..., 0]``.
    """
    b = ic.t_index
    if not 0 <= b < tables.times.size:
        raise ContractError(f"condition index {b} not on the grid")
    y1, y2, d1, d2 = tables.y1[b], tables.y2[b], tables.y1_dot[b], tables.y2_dot[b]
    den = y1 * d2 - y2 * d1
    if not np.isfinite(den) or abs(den) < 1e-12 * (abs(y1 * d2) + abs(y2 * d1)):
        raise NumericError(f"degenerate initial-value system at t={tables.times[b]}")
    phi_b = tables.Phi[b] @ np.moveaxis(w_g, -1, 0).reshape(w_g.shape[-1], -1)
    phi_dot_b = tables.Phi_dot[b] @ np.moveaxis(w_g, -1, 0).reshape(w_g.shape[-1], -1)
    phi_b = phi_b.reshape(w_g.shape[:-1])
    phi_dot_b = phi_dot_b.reshape(w_g.shape[:-1])
    y_b, v_b = np.asarray(ic.y, dtype=np.float64), np.asarray(ic.y_dot, dtype=np.float64)
    c1 = (d2 * (y_b - phi_b) - y2 * (v_b - phi_dot_b)) / den
    c2 = (y1 * (v_b - phi_dot_b) - d1 * (y_b - phi_b)) / den
    return c1, c2


def generate_trajectory(
    tables: BasisTables,
    ic: InitialCondition,
    w_g: np.ndarray,
    tau: float | None = None,
    goal_mode: str = "absolute",
):
    """Positions and velocities on ``tables.times[ic.t_index:]``.

    Returns arrays of shape [T_remaining, ...] where ``...`` is
    ``w_g.shape[:-1]``.  With ``goal_mode="relative"`` the goal entry of
    ``w_g`` is an offset from the start position: the trajectory is generated
    from the origin and shifted by ``ic.y`` afterwards.
    """
    if tau is not None:
        tables.cfg.check_tau(tau)
        tables = tables.at_tau(tau)
    w_g = np.asarray(w_g, dtype=np.float64)
    if w_g.shape[-1] != tables.Phi.shape[1]:
        raise ContractError(f"weight vector length {w_g.shape[-1]} != {tables.Phi.shape[1]}")
    if goal_mode not in ("absolute", "relative"):
        raise ContractError(f"unknown goal mode {goal_mode!r}")
    y_b = np.broadcast_to(np.asarray(ic.y, dtype=np.float64), w_g.shape[:-1])
    shift = 0.0
    if goal_mode == "relative":
        shift = y_b
        ic = InitialCondition(ic.t_index, np.zeros_like(y_b), ic.y_dot)
    c1, c2 = boundary_coefficients(tables, ic, w_g)
    b = ic.t_index
    flat_w = np.moveaxis(w_g, -1, 0).reshape(w_g.shape[-1], -1)
    out_shape = (tables.times.size - b,) + w_g.shape[:-1]
    pos = (tables.Phi[b:] @ flat_w).reshape(out_shape)
    vel = (tables.Phi_dot[b:] @ flat_w).reshape(out_shape)
    expand = (slice(None),) + (None,) * (len(out_shape) - 1)
    pos = pos + c1 * tables.y1[b:][expand] + c2 * tables.y2[b:][expand] + shift
    vel = vel + c1 * tables.y1_dot[b:][expand] + c2 * tables.y2_dot[b:][expand]
    return pos, vel


def euler_oracle(
    cfg: ProDMPConfig,
    w_g: np.ndarray,
    ic: InitialCondition,
    tau: float,
    dt: float,
    times: np.ndarray,
):
    """Forward-Euler integration of the DMP from ``times[ic.t_index]``.

    ``w_g`` is [B x (N_w + 1)] with an absolute goal; ``ic.y`` / ``ic.y_dot``
    are [B].  Returns positions [len(times) - t_index x B] sampled at
    ``times[t_index:]``.  Test-only reference.
    """
    if dt > 1e-3:
        raise ContractError("euler oracle needs dt <= 1e-3")
    times = _check_grid(times)
    w_g = np.atleast_2d(np.asarray(w_g, dtype=np.float64))
    w, g = w_g[:, :-1], w_g[:, -1]
    centers, width = basis_centers(cfg)
    alpha, beta = cfg.alpha, cfg.beta
    t0 = times[ic.t_index]
    targets = times[ic.t_index :]
    y = np.array(ic.y, dtype=np.float64).reshape(-1).copy() * np.ones(w.shape[0])
    v = np.array(ic.y_dot, dtype=np.float64).reshape(-1).copy() * np.ones(w.shape[0])
    out = np.empty((targets.size, w.shape[0]))
    out[0] = y
    n_steps = np.rint((targets - t0) / dt).astype(np.int64)
    k = 0
    for j in range(1, targets.size):
        while k < n_steps[j]:
            t = t0 + k * dt
            phase = np.exp(-cfg.alpha_x * t / tau)
            logits = -0.5 * ((t / tau - centers) / width) ** 2
            bumps = np.exp(logits - logits.max())
            forcing = phase * (w @ (bumps / bumps.sum()))
            acc = (alpha * (beta * (g - y) - tau * v) + forcing) / tau**2
            y, v = y + dt * v, v + dt * acc
            k += 1
        out[j] = y
    return out


def oracle_check(cfg: ProDMPConfig | None = None, seed: int = 0, n_cases: int = 10, dt: float = 1e-4) -> dict:
    """ProDMP vs Euler integration for random weights at several time constants."""
    cfg = cfg or ProDMPConfig()
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, 1.0, 101)
    tables = assemble_basis_tables(cfg, times)
    result = {}
    for tau in (cfg.tau_range[0], 1.0, cfg.tau_range[1]):
        w_g, ic = random_case(cfg, rng, n_cases)
        pos, _ = generate_trajectory(tables, ic, w_g, tau=tau)
        ref = euler_oracle(cfg, w_g, ic, tau, dt, times)
        result[f"tau={tau:g}"] = float(np.max(np.abs(pos - ref)))
    result["max_abs_error"] = max(result.values())
    return result


def random_case(cfg: ProDMPConfig, rng: np.random.Generator, n: int, scale: float = 0.25):
    """Random weights and start velocity at the scale of normalised per-node motion.

    Trajectories start at the origin (relative start) with velocity ~ N(0, 1);
    goal offsets ~ N(0, scale^2) and forcing weights ~ N(0, (100 scale)^2).
    """
    w = rng.normal(0.0, 100.0 * scale, size=(n, cfg.n_weights))
    g = rng.normal(0.0, scale, size=(n, 1))
    ic = InitialCondition(0, np.zeros(n), rng.normal(size=n))
    return np.concatenate([w, g], axis=1), ic
