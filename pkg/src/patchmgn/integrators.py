"""Explicit state-update schemes wrapping a derivative-predicting network.

The network ``N`` predicts the step-scaled time derivative ``h * f(y)``, so
``h`` never appears inside :func:`step`.  Every function here accepts either
numpy arrays or :class:`autodiff.Var` states; the arithmetic is the same.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class IntegratorKind(enum.Enum):
    FE = "fe"
    H2 = "h2"
    H3 = "h3"

    @property
    def stages(self) -> int:
        return {"fe": 1, "h2": 2, "h3": 3}[self.value]

    @classmethod
    def parse(cls, value) -> "IntegratorKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown integrator {value!r}; expected fe, h2 or h3") from None


class StageNonFiniteError(FloatingPointError):
    def __init__(self, stage: int):
        super().__init__(f"non-finite values in integrator stage {stage}")
        self.stage = stage


@dataclass
class StateUpdate:
    next: object
    delta: object
    stages: list


def _checked(net, y, stage):
    k = net(y)
    if not np.all(np.isfinite(ad.value_of(k))):
        raise StageNonFiniteError(stage)
    return k


def step(kind, net, y) -> StateUpdate:
    """One explicit step.  ``delta`` is the total increment ``next - y``."""
    kind = IntegratorKind.parse(kind)
    k1 = _checked(net, y, 1)
    if kind is IntegratorKind.FE:
        stages = [k1]
        delta = k1
    elif kind is IntegratorKind.H2:
        k2 = _checked(net, y + k1, 2)
        stages = [k1, k2]
        delta = (k1 + k2) * 0.5
    else:
        k2 = _checked(net, y + k1 / 3.0, 2)
        k3 = _checked(net, y + k2 * (2.0 / 3.0), 3)
        stages = [k1, k2, k3]
        # (k1 + 3 k3) / 4, arranged so that equal stages give k1 exactly
        delta = k1 + (k3 - k1) * 0.75
    return StateUpdate(y + delta, delta, stages)


def step_backward(kind, net, y, upstream):
    """Weight gradients of ``sum(step(kind, net, y).next * upstream)``.

    ``net`` must be a :class:`surrogate.SurrogateNet` built with ``track=True``.
    """
    net.zero_grad()
    y = ad.const(np.asarray(y, dtype=net.dtype))
    out = step(kind, net, y).next
    ad.backward(out, np.asarray(upstream, dtype=net.dtype))
    return net.gradients()


class ExponentialDecay:
    """``y' = lam * y``."""

    def __init__(self, lam: float = -1.0):
        self.lam = lam

    def f(self, y):
        return self.lam * np.asarray(y, dtype=np.float64)

    def exact(self, y0, t):
        return np.exp(self.lam * t) * np.asarray(y0, dtype=np.float64)


class LinearOscillator:
    """``x' = v, v' = -omega^2 x`` on state ``(x, v)``."""

    def __init__(self, omega: float = 1.0):
        self.omega = omega

    def f(self, y):
        x, v = np.asarray(y, dtype=np.float64)
        return np.array([v, -self.omega**2 * x])

    def exact(self, y0, t):
        x0, v0 = np.asarray(y0, dtype=np.float64)
        w = self.omega
        c, s = np.cos(w * t), np.sin(w * t)
        return np.array([x0 * c + v0 / w * s, -x0 * w * s + v0 * c])


@dataclass
class OrderFit:
    slope: float
    h: np.ndarray
    error: np.ndarray
    used: np.ndarray


DEFAULT_H = np.logspace(-2.5, -0.5, 9)


def verify_order(kind, rhs, y0, h_values=DEFAULT_H, floor: float = 1e-13) -> OrderFit:
    """Least-squares slope of log(one-step error) against log(h).

    Errors below ``floor`` times the state magnitude sit at the rounding
    plateau and are left out of the fit.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    h_values = np.asarray(h_values, dtype=np.float64)
    errors = np.empty(len(h_values))
    for i, h in enumerate(h_values):
        out = step(kind, lambda y, h=h: h * rhs.f(y), y0).next
        errors[i] = np.linalg.norm(np.atleast_1d(out - rhs.exact(y0, h)))
    used = errors > floor * max(1.0, np.linalg.norm(np.atleast_1d(y0)))
    if used.sum() < 2:
        raise ValueError("fewer than two step sizes above the rounding floor")
    slope = np.polyfit(np.log(h_values[used]), np.log(errors[used]), 1)[0]
    return OrderFit(float(slope), h_values, errors, used)
