"""Named vector-field families used by tests, experiments and the CLI."""
from __future__ import annotations

import sympy as sp

from .rde_solver import VectorFieldFamily


def _family(rows, syms, name):
    return VectorFieldFamily.from_sympy(rows, syms, name=name)


def zero(p: int = 1, d: int = 1) -> VectorFieldFamily:
    syms = sp.symbols(f"x1:{p + 1}")
    return _family([[0] * p for _ in range(d + 1)], syms, "zero")


def exponential() -> VectorFieldFamily:
    """``dx = x dw``: flow ``xi exp(w_t)``."""
    (x,) = sp.symbols("x1:2")
    return _family([[0], [x]], [x], "exponential")


def rotation() -> VectorFieldFamily:
    """``dx = (-x2, x1) dw`` on R^2: rotation by the angle ``w_t``."""
    x1, x2 = sp.symbols("x1:3")
    return _family([[0, 0], [-x2, x1]], [x1, x2], "rotation")


def additive(d: int = 2) -> VectorFieldFamily:
    """Constant unit fields ``V_i = e_i`` on R^d: ``x_t = xi + w_t``."""
    syms = sp.symbols(f"x1:{d + 1}")
    rows = [[0] * d] + [[1 if a == i else 0 for a in range(d)] for i in range(d)]
    return _family(rows, syms, "additive")


def drift(c: float = 0.5, p: int = 1, d: int = 1) -> VectorFieldFamily:
    """Pure constant drift ``c`` in every coordinate."""
    syms = sp.symbols(f"x1:{p + 1}")
    rows = [[sp.Float(c)] * p] + [[0] * p for _ in range(d)]
    return _family(rows, syms, "drift")


def sincos() -> VectorFieldFamily:
    """Bounded, non-commuting C_b^infinity family on R^2 with two drivers and a drift."""
    x1, x2 = sp.symbols("x1:3")
    rows = [
        [-sp.Rational(1, 5) * sp.sin(x1), sp.Rational(1, 10) * sp.cos(x2)],
        [sp.cos(x2), sp.Rational(1, 2) * sp.sin(x1)],
        [sp.Rational(3, 10) * sp.sin(x1 + x2), sp.cos(x1)],
    ]
    return _family(rows, [x1, x2], "sincos")


def damped() -> VectorFieldFamily:
    """One-driver nonlinear family on R^2: bounded diffusion, contracting drift."""
    x1, x2 = sp.symbols("x1:3")
    rows = [
        [-sp.Rational(1, 2) * x1, -sp.Rational(1, 2) * x2],
        [sp.sin(x2) + 1, sp.Rational(1, 2) * sp.cos(x1)],
    ]
    return _family(rows, [x1, x2], "damped")


SUITE = {
    "zero": zero,
    "exponential": exponential,
    "rotation": rotation,
    "additive": additive,
    "drift": drift,
    "sincos": sincos,
    "damped": damped,
}


def by_name(name: str, **kw) -> VectorFieldFamily:
    try:
        factory = SUITE[name]
    except KeyError:
        raise ValueError(f"unknown field family {name!r}; choose from {sorted(SUITE)}") from None
    return factory(**kw)
