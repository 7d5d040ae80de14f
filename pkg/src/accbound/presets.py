"""Built-in systems covering the full pipeline without user authoring.

martinet: the flat rank-2 model X = d/dx + (y^2/2) d/dz, Y = d/dy carrying
the metric (1+alpha y)^2 dx^2 + (1+beta x+gamma y)^2 dy^2; the analysis runs
on the g-orthonormal frame, the drift trajectory is the x-axis, and the
known contact coefficient is 1/(2 T alpha^2).

const4 / chain-n3: chain-of-integrators realizations of constant coefficient
tables, so the control-space route and the explicit operator route can be
compared on the same numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .expr import parse_field
from .geometry import System
from .operators import CoefficientField


@dataclass
class Preset:
    name: str
    system: System
    x0: list
    coeffs: CoefficientField | None = None
    calibrate: bool = False          # derive the n=3 coefficient from the Hessian
    closed_form_A: object = None     # callable T -> A_T when known
    params: dict = field(default_factory=dict)


def martinet(alpha: float = 1.0, beta: float = 0.0, gamma: float = 0.0) -> Preset:
    a = repr(float(alpha))
    b = repr(float(beta))
    c = repr(float(gamma))
    X = parse_field([f"1/(1+{a}*x2)", "0", f"x2^2/(2*(1+{a}*x2))"], 3, "X")
    Y = parse_field(["0", f"1/(1+{b}*x1+{c}*x2)", "0"], 3, "Y")
    closed = None
    if alpha != 0:
        closed = lambda T, alpha=alpha: 1.0 / (2.0 * T * alpha ** 2)
    return Preset(name="martinet", system=System(X, Y, "martinet"),
                  x0=[0.0, 0.0, 0.0], calibrate=True, closed_form_A=closed,
                  params={"alpha": alpha, "beta": beta, "gamma": gamma})


def const4(b11: float = -1.0, b22: float = 1.0) -> Preset:
    """Four-state chain realizing constant coefficients (b11, b22)."""
    X = parse_field(["1+x2", "x3", "0", f"{repr(float(b22))}*x3^2+{repr(float(b11))}*x2^2"],
                    4, "X")
    Y = parse_field(["0", "0", "1", "0"], 4, "Y")
    coeffs = CoefficientField(4, {(1, 1): float(b11), (2, 2): float(b22)})
    return Preset(name="const4", system=System(X, Y, "const4"),
                  x0=[0.0] * 4, coeffs=coeffs, params={"b11": b11, "b22": b22})


def chain_n3(b: float = 0.5) -> Preset:
    """Three-state chain realizing the constant coefficient b."""
    X = parse_field(["1+x2", "0", f"{repr(float(b))}*x2^2"], 3, "X")
    Y = parse_field(["0", "1", "0"], 3, "Y")
    coeffs = CoefficientField(3, {(1, 1): float(b)})
    return Preset(name="chain-n3", system=System(X, Y, "chain-n3"),
                  x0=[0.0] * 3, coeffs=coeffs,
                  closed_form_A=lambda T, b=b: b / T, params={"b": b})


_BUILDERS = {"martinet": martinet, "const4": const4, "chain-n3": chain_n3,
             "chain_n3": chain_n3}


def get_preset(name: str, **params) -> Preset:
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choices: martinet, const4, chain-n3")
    return builder(**params)
