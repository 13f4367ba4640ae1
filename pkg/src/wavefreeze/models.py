"""Reaction nonlinearities and their pointwise derivative tensors.

A ReactionModel bundles the drift f: R^n -> R^n, the noise amplitude
g: R^n -> R^{n x m}, and evaluators for the symmetric derivative tensors
D^l f, D^l g up to the orders the expansion machinery contracts against.
Built-in models carry analytic derivatives; user models may fall back to
central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# derivative orders required beyond the expansion order r, mirroring the
# smoothness demanded of f and g
F_EXTRA_ORDERS = 1
G_EXTRA_ORDERS = 2


@dataclass(frozen=True)
class ReactionModel:
    """Pointwise reaction data: f, g, derivative stacks, pinning states."""

    n: int
    m: int
    r: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    df: Callable[[int, np.ndarray], np.ndarray]
    dg: Callable[[int, np.ndarray], np.ndarray]
    u_minus: np.ndarray
    u_plus: np.ndarray
    max_df_order: int
    max_dg_order: int
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def deriv(self, which: str, order: int, u: np.ndarray) -> np.ndarray:
        """Full derivative tensor of f or g at u.

        Shapes: for f, (n, n^order..., *u-tail); for g, (n, m, n^order..., *u-tail),
        where u has shape (n, *tail).
        """
        if which == "f":
            if order > self.max_df_order:
                raise ValueError(f"f derivative order {order} exceeds {self.max_df_order}")
            return self.df(order, np.asarray(u, dtype=float))
        if which == "g":
            if order > self.max_dg_order:
                raise ValueError(f"g derivative order {order} exceeds {self.max_dg_order}")
            return self.dg(order, np.asarray(u, dtype=float))
        raise ValueError("which must be 'f' or 'g'")


def eval_derivative_tensor(model: ReactionModel, which: str, order: int,
                           point: np.ndarray, directions: list[np.ndarray]) -> np.ndarray:
    """Contract D^order f/g at a point against the given directions."""
    if len(directions) != order:
        raise ValueError("number of directions must equal the derivative order")
    point = np.asarray(point, dtype=float).reshape(model.n)
    tens = model.deriv(which, order, point[:, None])[..., 0]
    for d in reversed(directions):
        d = np.asarray(d, dtype=float).reshape(model.n)
        tens = tens @ d
    return tens


def contract_pointwise(tensor: np.ndarray, n_head: int, n_spatial: int,
                       directions: list[np.ndarray]) -> np.ndarray:
    """Contract a pointwise derivative tensor against direction fields.

    tensor: (*head, n, ..., n, *spatial) with n_head head axes and one
    n-slot per direction; directions: (*batch, n, *spatial). Returns
    (*batch, *head, *spatial). Batch axes broadcast across directions.
    """
    order = len(directions)
    head = "ab"[:n_head]
    slots = "jklmpq"[:order]
    spatial = tensor.shape[-n_spatial:] if n_spatial else ()
    t2 = tensor.reshape(tensor.shape[: tensor.ndim - n_spatial] + (-1,))
    ops = [t2]
    subs = [head + slots + "X"]
    for s, d in zip(slots, directions):
        ops.append(d.reshape(d.shape[: d.ndim - n_spatial] + (-1,)))
        subs.append("..." + s + "X")
    out = np.einsum(",".join(subs) + "->..." + head + "X", *ops)
    return out.reshape(out.shape[:-1] + spatial)


# ---------------------------------------------------------------------------
# built-in: Nagumo / cubic bistable with multiplicative noise
# ---------------------------------------------------------------------------

def builtin_nagumo(a: float, r: int = 3) -> ReactionModel:
    """Scalar bistable model f(u) = u(1-u)(u-a), g(u) = u(1-u).

    Pinned at u=0 and u=1; analytic derivative tensors to all orders.
    """
    if not 0.0 < a < 1.0:
        raise ValueError("nagumo parameter a must lie in (0, 1)")

    def f(u):
        v = u[0]
        return (v * (1.0 - v) * (v - a))[None]

    def g(u):
        v = u[0]
        return (v * (1.0 - v))[None, None]

    # f = -u^3 + (1+a)u^2 - au
    def df(order, u):
        v = u[0]
        tail = v.shape
        if order == 0:
            return f(u)
        if order == 1:
            out = -3.0 * v**2 + 2.0 * (1.0 + a) * v - a
        elif order == 2:
            out = -6.0 * v + 2.0 * (1.0 + a)
        elif order == 3:
            out = np.full(tail, -6.0)
        else:
            out = np.zeros(tail)
        return out.reshape((1,) * (order + 1) + tail)

    # g = u - u^2
    def dg(order, u):
        v = u[0]
        tail = v.shape
        if order == 0:
            return g(u)
        if order == 1:
            out = 1.0 - 2.0 * v
        elif order == 2:
            out = np.full(tail, -2.0)
        else:
            out = np.zeros(tail)
        return out.reshape((1, 1) + (1,) * order + tail)

    k_star = 1
    return ReactionModel(
        n=1, m=1, r=r, f=f, g=g, df=df, dg=dg,
        u_minus=np.array([0.0]), u_plus=np.array([1.0]),
        max_df_order=k_star + r + F_EXTRA_ORDERS,
        max_dg_order=k_star + r + G_EXTRA_ORDERS,
        name="nagumo", params={"a": a},
    )


def with_finite_difference_derivs(n: int, m: int, r: int,
                                  f: Callable, g: Callable,
                                  u_minus: np.ndarray, u_plus: np.ndarray,
                                  max_order: int = 4,
                                  name: str = "custom") -> ReactionModel:
    """Wrap bare f, g callables with central finite-difference derivative stacks."""

    def make_fd(func, head_shape):
        def dfunc(order, u):
            if order == 0:
                return func(u)
            lower = lambda w: dfunc(order - 1, w)  # noqa: E731
            v = np.asarray(u, dtype=float)
            h = np.cbrt(np.finfo(float).eps) * (1.0 + np.abs(v))
            parts = []
            for j in range(n):
                up = v.copy(); up[j] = up[j] + h[j]
                dn = v.copy(); dn[j] = dn[j] - h[j]
                parts.append((lower(up) - lower(dn)) / (2.0 * h[j]))
            # new direction slot goes right after the existing tensor slots
            return np.stack(parts, axis=len(head_shape) + order - 1)
        return dfunc

    return ReactionModel(
        n=n, m=m, r=r, f=f, g=g,
        df=make_fd(f, (n,)), dg=make_fd(g, (n, m)),
        u_minus=np.asarray(u_minus, dtype=float),
        u_plus=np.asarray(u_plus, dtype=float),
        max_df_order=max_order, max_dg_order=max_order,
        name=name,
    )


_BUILTINS = {"nagumo": builtin_nagumo}


def model_from_config(name: str, params: dict, r: int = 3) -> ReactionModel:
    if name not in _BUILTINS:
        raise ValueError(f"model.name: unknown model '{name}' (have {sorted(_BUILTINS)})")
    return _BUILTINS[name](r=r, **params)
