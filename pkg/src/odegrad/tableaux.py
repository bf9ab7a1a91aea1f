"""Butcher tableaux for the supported explicit schemes and theta descriptors.

Coefficients are the literature-standard ones; `order_condition_residual`
checks them against the rooted-tree order conditions up to order 5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ButcherTableau:
    name: str
    a: np.ndarray          # s x s, strictly lower triangular for explicit schemes
    b: np.ndarray
    c: np.ndarray
    order: int
    b_emb: np.ndarray = None   # embedded weights (lower order), or None
    order_emb: int = 0
    fsal: bool = False

    @property
    def stages(self) -> int:
        return len(self.b)

    def validate(self):
        s = self.stages
        if self.a.shape != (s, s) or len(self.c) != s:
            raise ValueError("inconsistent tableau shapes")
        if abs(self.b.sum() - 1.0) > 1e-13:
            raise ValueError("weights must sum to 1")
        if np.max(np.abs(self.a.sum(axis=1) - self.c)) > 1e-13:
            raise ValueError("row-sum condition c_i = sum_j a_ij violated")
        if np.any(np.triu(self.a) != 0.0):
            raise ValueError("explicit tableau must be strictly lower triangular")


@dataclass(frozen=True)
class Scheme:
    """Either an explicit RK tableau or a theta-method descriptor."""

    name: str
    kind: str                      # "rk" | "theta"
    tableau: ButcherTableau = None
    theta: float = 0.0

    @property
    def is_implicit(self) -> bool:
        return self.kind == "theta"

    @property
    def stages(self) -> int:
        return self.tableau.stages if self.kind == "rk" else 2


def _tab(name, a, b, c, order, b_emb=None, order_emb=0, fsal=False):
    t = ButcherTableau(
        name=name,
        a=np.asarray(a, dtype=np.float64),
        b=np.asarray(b, dtype=np.float64),
        c=np.asarray(c, dtype=np.float64),
        order=order,
        b_emb=None if b_emb is None else np.asarray(b_emb, dtype=np.float64),
        order_emb=order_emb,
        fsal=fsal,
    )
    t.validate()
    return t


def _euler():
    return _tab("euler", [[0.0]], [1.0], [0.0], 1)


def _midpoint():
    return _tab("midpoint", [[0.0, 0.0], [0.5, 0.0]], [0.0, 1.0], [0.0, 0.5], 2)


def _bosh3():
    a = [
        [0.0, 0.0, 0.0, 0.0],
        [1 / 2, 0.0, 0.0, 0.0],
        [0.0, 3 / 4, 0.0, 0.0],
        [2 / 9, 1 / 3, 4 / 9, 0.0],
    ]
    b = [2 / 9, 1 / 3, 4 / 9, 0.0]
    b_emb = [7 / 24, 1 / 4, 1 / 3, 1 / 8]
    c = [0.0, 1 / 2, 3 / 4, 1.0]
    return _tab("bosh3", a, b, c, 3, b_emb, 2, fsal=True)


def _rk4():
    a = [
        [0.0, 0.0, 0.0, 0.0],
        [0.5, 0.0, 0.0, 0.0],
        [0.0, 0.5, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ]
    return _tab("rk4", a, [1 / 6, 1 / 3, 1 / 3, 1 / 6], [0.0, 0.5, 0.5, 1.0], 4)


def _dopri5():
    a = [
        [0, 0, 0, 0, 0, 0, 0],
        [1 / 5, 0, 0, 0, 0, 0, 0],
        [3 / 40, 9 / 40, 0, 0, 0, 0, 0],
        [44 / 45, -56 / 15, 32 / 9, 0, 0, 0, 0],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0, 0],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0, 0],
        [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0],
    ]
    b = [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0]
    b_emb = [5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
    c = [0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1]
    return _tab("dopri5", a, b, c, 5, b_emb, 4, fsal=True)


_EXPLICIT = {
    "euler": _euler,
    "midpoint": _midpoint,
    "bosh3": _bosh3,
    "rk4": _rk4,
    "dopri5": _dopri5,
}

_THETA = {"beuler": 1.0, "cn": 0.5}

SCHEME_NAMES = tuple(_EXPLICIT) + tuple(_THETA)


def tableau_catalog(name: str) -> Scheme:
    """Scheme by CLI-visible name: euler, midpoint, bosh3, rk4, dopri5, beuler, cn."""
    if name in _EXPLICIT:
        return Scheme(name=name, kind="rk", tableau=_EXPLICIT[name]())
    if name in _THETA:
        return Scheme(name=name, kind="theta", theta=_THETA[name])
    raise ValueError(f"unknown scheme {name!r}; known: {', '.join(SCHEME_NAMES)}")


# rooted-tree order conditions: (order, weight phi(tree), 1/gamma)
def _conditions(a, b, c):
    ac = a @ c
    ac2 = a @ (c * c)
    aac = a @ ac
    return [
        (1, b.sum(), 1.0),
        (2, b @ c, 1 / 2),
        (3, b @ (c * c), 1 / 3),
        (3, b @ ac, 1 / 6),
        (4, b @ (c ** 3), 1 / 4),
        (4, b @ (c * ac), 1 / 8),
        (4, b @ ac2, 1 / 12),
        (4, b @ aac, 1 / 24),
        (5, b @ (c ** 4), 1 / 5),
        (5, b @ (c * c * ac), 1 / 10),
        (5, b @ (ac * ac), 1 / 20),
        (5, b @ (c * ac2), 1 / 15),
        (5, b @ (c * aac), 1 / 30),
        (5, b @ (a @ (c ** 3)), 1 / 20),
        (5, b @ (a @ (c * ac)), 1 / 40),
        (5, b @ (a @ ac2), 1 / 60),
        (5, b @ (a @ aac), 1 / 120),
    ]


def order_condition_residual(tab: ButcherTableau, order: int, embedded=False) -> float:
    """Max residual of all order conditions up to `order` (<= 5)."""
    if order > 5:
        raise ValueError("order conditions implemented up to order 5")
    b = tab.b_emb if embedded else tab.b
    worst = 0.0
    for p, val, target in _conditions(tab.a, b, tab.c):
        if p <= order:
            worst = max(worst, abs(val - target))
    return worst
