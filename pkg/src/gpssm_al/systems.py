"""Ground-truth simulators: kink map, pendulum, cart-pole and twin-rotor rig.

Continuous systems are advanced with classical RK4 over one sampling
interval, the control held constant over the interval.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .numerics import as_vector

G = 9.81


class NonFiniteState(FloatingPointError):
    pass


@dataclass(frozen=True)
class ControlBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo, hi = as_vector(self.lower), as_vector(self.upper)
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("control box needs lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    def clip(self, c) -> np.ndarray:
        return np.clip(as_vector(c), self.lower, self.upper)

    def contains(self, c) -> bool:
        c = as_vector(c)
        return bool(np.all(c >= self.lower) and np.all(c <= self.upper))

    def sample(self, rng) -> np.ndarray:
        return rng.uniform(self.lower, self.upper)


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


def kink_next(y: float, c: float) -> float:
    return c + (y + 0.2) * (1.0 - 5.0 / (1.0 + np.exp(-2.0 * y)))


PENDULUM_PARAMS = {"g": G, "m": 0.1, "l": 1.0, "b": 0.05}


def pendulum_deriv(s, c, p=PENDULUM_PARAMS) -> np.ndarray:
    theta, omega = s
    m, l = p["m"], p["l"]
    inertia = p.get("I", m * l * l)
    acc = (-p["b"] * omega - m * p["g"] * l * np.sin(theta) + float(np.ravel(c)[0])) / inertia
    return np.array([omega, acc])


CARTPOLE_PARAMS = {"g": G, "m_p": 0.1, "m_c": 0.5, "l": 0.5, "mu_c": 0.05, "mu_p": 0.01}
# cart speeds below this count as at rest for the Coulomb friction sign
STICTION_SPEED = 1e-9


def _cartpole_theta_acc(theta, omega, xdot, c, p, sgn):
    g, mp, mc, l, mu_c, mu_p = (p[k] for k in ("g", "m_p", "m_c", "l", "mu_c", "mu_p"))
    s, co = np.sin(theta), np.cos(theta)
    total = mc + mp
    num = (
        g * s
        + co * ((-c - mp * l * omega**2 * (s + mu_c * sgn * co)) / total + mu_c * g * sgn)
        - mu_p * omega / (mp * l)
    )
    den = l * (4.0 / 3.0 - mp * co / total * (co - mu_c * sgn))
    return num / den


def cartpole_deriv(s, c, p=CARTPOLE_PARAMS) -> np.ndarray:
    """State ``(theta, theta_dot, x, x_dot)`` with ``theta = 0`` upright.

    The friction sign ``sgn(N_c x_dot)`` depends on ``theta_ddot`` through
    ``N_c``. It is first evaluated assuming ``N_c > 0``; if the resulting
    normal force has the other sign the acceleration is recomputed once.
    Below ``STICTION_SPEED`` the cart is treated as at rest (``sgn = 0``) so
    round-off velocities do not switch on the full friction force.
    """
    theta, omega, _, xdot = s
    c = float(np.ravel(c)[0])
    g, mp, mc, l, mu_c = (p[k] for k in ("g", "m_p", "m_c", "l", "mu_c"))
    total = mc + mp

    def normal_force(acc):
        return total * g - mp * l * (acc * np.sin(theta) + omega**2 * np.cos(theta))

    v = 0.0 if abs(xdot) < STICTION_SPEED else xdot
    sgn = np.sign(v)
    acc = _cartpole_theta_acc(theta, omega, xdot, c, p, sgn)
    nc = normal_force(acc)
    if np.sign(nc * v) != sgn:
        sgn = np.sign(nc * v)
        acc = _cartpole_theta_acc(theta, omega, xdot, c, p, sgn)
        nc = normal_force(acc)
    xacc = (c + mp * l * (omega**2 * np.sin(theta) - acc * np.cos(theta))
            - mu_c * nc * sgn) / total
    return np.array([omega, acc, xdot, xacc])


TRAS_PARAMS = {
    "g": G,
    "m_m": 0.029, "m_mr": 0.199, "m_ms": 0.083,
    "m_t": 0.031, "m_tr": 0.154, "m_ts": 0.061,
    "m_b": 0.011, "m_cb": 0.024,
    "l_m": 0.202, "l_t": 0.216, "l_b": 0.15, "l_cb": 0.15,
    "r_ms": 0.145, "r_ts": 0.1,
    "k_fv": 0.013, "k_fh": 0.006, "k_hv": 0.004, "k_vh": -0.018,
    "a_1": 0.001, "a_2": 0.01,
}

# voltage -> rotor speed and rotor speed -> thrust, highest power first
OMEGA_V = (-5.2e3, -1.1e2, 1.1e4, -1.3e2, -9.2e3, -31.0, 6.1e3, -4.5)
F_V = (-1.8e-18, -7.8e-16, 4.1e-11, 2.7e-8, 3.5e-5, -0.014)
# the quadratic coefficient is printed as "- 3 + 10^2"; read as -3 * 10^2
OMEGA_H_C2 = -3.0e2
OMEGA_H = (2.2e3, -1.7e2, -4.5e3, OMEGA_H_C2, 9.8e3, -9.2)
F_H = (-2.6e-20, 4.1e-17, 3.2e-12, -7.3e-9, 2.1e-5, -0.0091)


# propeller damping a_2 |omega_h| / J_h reaches ~2.5e4 1/s near the rest pitch,
# so one control interval is integrated with many RK4 substeps
TRAS_SUBSTEPS = 400


def tras_rotor_speeds(c):
    cv, ch = as_vector(c)
    return float(np.polyval(OMEGA_V, cv)), float(np.polyval(OMEGA_H, ch))


def tras_vertical_moments(s, c, p=TRAS_PARAMS) -> np.ndarray:
    """The six pitch moments ``M_v1..M_v6``."""
    av, avd, _, ahd = s
    cv, ch = as_vector(c)
    wv, _ = tras_rotor_speeds(c)
    main = p["m_m"] / 2 + p["m_mr"] + p["m_ms"]
    tail = p["m_t"] / 2 + p["m_tr"] + p["m_ts"]
    counter = p["m_b"] / 2 * p["l_b"] + p["m_cb"] * p["l_cb"]
    m1 = p["g"] * ((tail * p["l_t"] + main * p["l_m"]) * np.cos(av) - counter * np.sin(av))
    m2 = p["l_m"] * np.polyval(F_V, wv)
    # as printed, the first two groups carry no length factor
    m3 = -ahd**2 * (main + tail + p["m_cb"] * p["l_cb"] + p["m_b"] / 2 * p["l_b"]) * np.sin(av) * np.cos(av)
    m4 = -avd * p["k_fv"]
    m5 = -ch * p["k_hv"]
    m6 = -p["a_1"] * avd * abs(wv)
    return np.array([m1, m2, m3, m4, m5, m6])


def tras_horizontal_moments(s, c, p=TRAS_PARAMS) -> np.ndarray:
    """The four azimuth moments ``M_h1..M_h4``."""
    av, _, _, ahd = s
    cv, ch = as_vector(c)
    _, wh = tras_rotor_speeds(c)
    h1 = p["l_t"] * np.polyval(F_H, wh) * np.cos(av)
    h2 = -ahd * p["k_fh"]
    h3 = cv * p["k_vh"]
    h4 = -p["a_2"] * ahd * abs(wh)
    return np.array([h1, h2, h3, h4])


def tras_inertia_v(p=TRAS_PARAMS) -> float:
    return (
        p["m_mr"] * p["l_m"] ** 2 + p["m_m"] * p["l_m"] ** 2 / 3
        + p["m_cb"] * p["l_cb"] ** 2 + p["m_b"] * p["l_b"] ** 2 / 3
        + p["m_tr"] * p["l_t"] ** 2 + p["m_t"] * p["l_t"] ** 2 / 3
        + p["m_ms"] / 2 * p["r_ms"] ** 2 + p["m_ms"] * p["l_m"] ** 2
        + p["m_ts"] * p["r_ts"] ** 2 + p["m_ts"] * p["l_t"] ** 2
    )


def tras_inertia_h(alpha_v: float, p=TRAS_PARAMS) -> float:
    lm = p["l_m"] * np.cos(alpha_v)
    lt = p["l_t"] * np.cos(alpha_v)
    lb = p["l_b"] * np.sin(alpha_v)
    lcb = p["l_cb"] * np.sin(alpha_v)
    return (
        p["m_m"] / 3 * lm**2 + p["m_t"] / 3 * lt**2 + p["m_b"] / 3 * lb**2
        + p["m_tr"] * lt**2 + p["m_mr"] * lm**2 + p["m_cb"] * lcb**2
        + p["m_ts"] / 2 * p["r_ts"] ** 2 + p["m_ts"] * lt**2
        + p["m_ms"] * p["r_ms"] ** 2 + p["m_ms"] * lm**2
    )


def tras_deriv(s, c, p=TRAS_PARAMS) -> np.ndarray:
    """State ``(alpha_v, alpha_v_dot, alpha_h, alpha_h_dot)``, control ``(c_v, c_h)``."""
    av, avd, _, ahd = s
    acc_v = np.sum(tras_vertical_moments(s, c, p)) / tras_inertia_v(p)
    acc_h = np.sum(tras_horizontal_moments(s, c, p)) / tras_inertia_h(av, p)
    return np.array([avd, acc_v, ahd, acc_h])


def tras_fixed_control_rhs(c, p=TRAS_PARAMS) -> Callable:
    """Scalar-arithmetic version of :func:`tras_deriv` for one held control.

    Rotor speeds and thrusts depend only on the voltages, so they are
    evaluated once per control interval instead of once per RK4 stage.
    """
    cv, ch = (float(v) for v in as_vector(c))
    wv, wh = tras_rotor_speeds(c)
    main = p["m_m"] / 2 + p["m_mr"] + p["m_ms"]
    tail = p["m_t"] / 2 + p["m_tr"] + p["m_ts"]
    counter = p["m_b"] / 2 * p["l_b"] + p["m_cb"] * p["l_cb"]
    grav_cos = p["g"] * (tail * p["l_t"] + main * p["l_m"])
    grav_sin = p["g"] * counter
    centrifugal = main + tail + p["m_cb"] * p["l_cb"] + p["m_b"] / 2 * p["l_b"]
    const_v = p["l_m"] * float(np.polyval(F_V, wv)) - ch * p["k_hv"]
    damp_v = p["k_fv"] + p["a_1"] * abs(wv)
    thrust_h = p["l_t"] * float(np.polyval(F_H, wh))
    damp_h = p["k_fh"] + p["a_2"] * abs(wh)
    cross_h = cv * p["k_vh"]
    inv_jv = 1.0 / tras_inertia_v(p)
    cos_part = (p["m_m"] / 3 * p["l_m"] ** 2 + p["m_t"] / 3 * p["l_t"] ** 2 + p["m_tr"] * p["l_t"] ** 2
                + p["m_mr"] * p["l_m"] ** 2 + p["m_ts"] * p["l_t"] ** 2 + p["m_ms"] * p["l_m"] ** 2)
    sin_part = p["m_b"] / 3 * p["l_b"] ** 2 + p["m_cb"] * p["l_cb"] ** 2
    shields = p["m_ts"] / 2 * p["r_ts"] ** 2 + p["m_ms"] * p["r_ms"] ** 2
    cos, sin = math.cos, math.sin

    def rhs(av, avd, ahd):
        ca, sa = cos(av), sin(av)
        mv = grav_cos * ca - grav_sin * sa + const_v - ahd * ahd * centrifugal * sa * ca - damp_v * avd
        mh = thrust_h * ca - damp_h * ahd + cross_h
        jh = cos_part * ca * ca + sin_part * sa * sa + shields
        return mv * inv_jv, mh / jh

    return rhs


def _tras_integrate(x, c, dt: float, substeps: int, p=TRAS_PARAMS) -> np.ndarray:
    rhs = tras_fixed_control_rhs(c, p)
    av, avd, ah, ahd = (float(v) for v in x)
    h = dt / substeps
    for _ in range(substeps):
        a1, b1 = rhs(av, avd, ahd)
        v2, w2 = avd + 0.5 * h * a1, ahd + 0.5 * h * b1
        a2, b2 = rhs(av + 0.5 * h * avd, v2, w2)
        v3, w3 = avd + 0.5 * h * a2, ahd + 0.5 * h * b2
        a3, b3 = rhs(av + 0.5 * h * v2, v3, w3)
        v4, w4 = avd + h * a3, ahd + h * b3
        a4, b4 = rhs(av + h * v3, v4, w4)
        av += h / 6.0 * (avd + 2 * v2 + 2 * v3 + v4)
        ah += h / 6.0 * (ahd + 2 * w2 + 2 * w3 + w4)
        avd += h / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
        ahd += h / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
        if not math.isfinite(av + avd + ah + ahd):
            raise NonFiniteState(f"integration produced a non-finite state from {x}")
    out = np.array([av, avd, ah, ahd])
    if not np.all(np.isfinite(out)):
        raise NonFiniteState(f"integration produced a non-finite state from {x}")
    return out


def tras_gravity_root(p=TRAS_PARAMS) -> float:
    """Angle where the gravity moment ``M_v1`` vanishes."""
    main = p["m_m"] / 2 + p["m_mr"] + p["m_ms"]
    tail = p["m_t"] / 2 + p["m_tr"] + p["m_ts"]
    counter = p["m_b"] / 2 * p["l_b"] + p["m_cb"] * p["l_cb"]
    return float(np.arctan2(tail * p["l_t"] + main * p["l_m"], counter))


def tras_rest_angle(c=(0.0, 0.0), p=TRAS_PARAMS) -> float:
    """Pitch angle where the total vertical moment vanishes at rest."""
    def total(av):
        return float(np.sum(tras_vertical_moments(np.array([av, 0.0, 0.0, 0.0]), c, p)))

    return float(brentq(total, 0.0, np.pi, xtol=1e-15, rtol=4 * np.finfo(float).eps))


def rk4_step(deriv: Callable, s, c, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ValueError("dt must be positive")
    s = as_vector(s)
    k1 = deriv(s, c)
    k2 = deriv(s + 0.5 * dt * k1, c)
    k3 = deriv(s + 0.5 * dt * k2, c)
    k4 = deriv(s + dt * k3, c)
    out = s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFiniteState(f"integration produced a non-finite state from {s}")
    return out


# ---------------------------------------------------------------------------
# System descriptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SystemSpec:
    name: str
    d_x: int
    d_c: int
    C: np.ndarray  # observation selector (d_y, d_x)
    state_lower: np.ndarray
    state_upper: np.ndarray
    box: ControlBox
    dt: float | None
    x0: np.ndarray
    obs_noise_std: np.ndarray
    params: dict = field(default_factory=dict)
    deriv: Callable | None = field(default=None, repr=False)
    lattice_points: tuple = ()
    substeps: int = 1

    @property
    def d_y(self) -> int:
        return self.C.shape[0]

    def step(self, x, c) -> np.ndarray:
        """Noiseless next state after one sampling interval."""
        c = self.box.clip(c)
        if self.name == "kink":
            return np.array([kink_next(float(as_vector(x)[0]), float(c[0]))])
        if self.name == "tras":
            return _tras_integrate(x, c, self.dt, self.substeps, self.params)
        f = lambda s, u: self.deriv(s, u, self.params)  # noqa: E731
        h = self.dt / self.substeps
        x = as_vector(x)
        for _ in range(self.substeps):
            x = rk4_step(f, x, c, h)
        return x


def observe(system: SystemSpec, s, rng=None) -> np.ndarray:
    y = system.C @ as_vector(s)
    if rng is None:
        return y
    return y + system.obs_noise_std * rng.standard_normal(system.d_y)


SYSTEM_NAMES = ("kink", "pendulum", "cartpole", "tras")


def make_system(name: str, dt: float | None = None, params: dict | None = None,
                obs_noise_std=None, substeps: int | None = None) -> SystemSpec:
    name = name.strip().lower().replace("-", "").replace("_", "")
    if name == "kink":
        spec = dict(d_x=1, d_c=1, C=np.eye(1), state_lower=[-3.0], state_upper=[1.1],
                    box=ControlBox([0.0], [1.0]), dt=None, x0=np.zeros(1),
                    obs_noise_std=[0.01], params={}, deriv=None, lattice_points=(25, 5))
    elif name == "pendulum":
        spec = dict(d_x=2, d_c=1, C=np.array([[1.0, 0.0]]), state_lower=[-0.6, -2.0],
                    state_upper=[0.6, 2.0], box=ControlBox([-1.0], [1.0]), dt=0.05,
                    x0=np.zeros(2), obs_noise_std=[0.02], params=dict(PENDULUM_PARAMS),
                    deriv=pendulum_deriv, lattice_points=(9, 9, 5))
    elif name == "cartpole":
        spec = dict(d_x=4, d_c=1, C=np.array([[1.0, 0, 0, 0], [0, 0, 1.0, 0]]),
                    state_lower=[np.pi - 0.4, -2.0, -0.3, -1.0],
                    state_upper=[np.pi + 0.4, 2.0, 0.3, 1.0], box=ControlBox([-5.0], [5.0]),
                    dt=0.05, x0=np.array([np.pi, 0.0, 0.0, 0.0]), obs_noise_std=[0.02, 0.01],
                    params=dict(CARTPOLE_PARAMS), deriv=cartpole_deriv,
                    lattice_points=(5, 5, 3, 3, 5))
    elif name == "tras":
        p = dict(TRAS_PARAMS)
        rest = tras_rest_angle(p=p)
        spec = dict(d_x=4, d_c=2, C=np.array([[1.0, 0, 0, 0], [0, 0, 1.0, 0]]),
                    state_lower=[rest - 0.02, -0.1, -0.01, -0.01],
                    state_upper=[rest + 0.02, 0.1, 0.01, 0.01], box=ControlBox([-1.0, -1.0], [1.0, 1.0]),
                    dt=0.02, x0=np.array([rest, 0.0, 0.0, 0.0]), obs_noise_std=[0.02, 0.02],
                    params=p, deriv=tras_deriv, lattice_points=(4, 3, 3, 3, 3, 3),
                    substeps=TRAS_SUBSTEPS)
    else:
        raise ValueError(f"unknown system {name!r}; choose from {', '.join(SYSTEM_NAMES)}")
    if params:
        unknown = set(params) - set(spec["params"])
        if unknown:
            raise ValueError(f"unknown parameters for {name}: {sorted(unknown)}")
        spec["params"] = {**spec["params"], **params}
        if name == "tras":
            spec["x0"] = np.array([tras_rest_angle(p=spec["params"]), 0.0, 0.0, 0.0])
    if dt is not None:
        if spec["dt"] is None:
            raise ValueError("the kink map is discrete and takes no dt")
        spec["dt"] = float(dt)
    if obs_noise_std is not None:
        spec["obs_noise_std"] = obs_noise_std
    if substeps is not None:
        if substeps < 1:
            raise ValueError("substeps must be at least 1")
        spec["substeps"] = int(substeps)
    spec["obs_noise_std"] = np.broadcast_to(as_vector(spec["obs_noise_std"]), (spec["C"].shape[0],)).copy()
    spec["state_lower"] = as_vector(spec["state_lower"])
    spec["state_upper"] = as_vector(spec["state_upper"])
    return SystemSpec(name=name, **spec)


def rollout(system: SystemSpec, controls, rng=None, x0=None):
    """States ``x_0..x_T`` and observations ``y_1..y_T`` for a control sequence."""
    controls = np.asarray(controls, dtype=np.float64).reshape(-1, system.d_c)
    x = [system.x0.copy() if x0 is None else as_vector(x0)]
    ys = []
    for c in controls:
        x.append(system.step(x[-1], c))
        ys.append(observe(system, x[-1], rng))
    return np.array(x), np.array(ys).reshape(len(controls), system.d_y)


# ---------------------------------------------------------------------------
# Parameter files
# ---------------------------------------------------------------------------


def dumps_params(params: dict) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in params.items())


def loads_params(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {n}: expected key = value, got {line!r}")
        out[key.strip()] = float(value)
    return out


def load_params(path) -> dict:
    with open(path) as fh:
        return loads_params(fh.read())


def save_params(params: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_params(params))
