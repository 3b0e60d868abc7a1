"""Built-in coefficient fields and the key registry.

Conventions used everywhere in the package: time enters as a python float,
space as an (n, d) array of points. Scalar fields return (n,), drifts return
(n, d), diffusions return (n, d, d). Registry keys look like "name" or
"name:p1,p2,..." with comma-separated float parameters.

All builtins carry closed-form time/space derivatives so the Ito
decomposition of endowments can avoid finite differences; the finite
difference fallback lives here too.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import InputError, SingularEndowmentError

FD_REL_STEP = 1e-5


@dataclass(frozen=True)
class ScalarField:
    """Scalar function of (t, x) with optional closed-form derivatives.

    fn maps (float, (n, d) array) -> (n,). When the derivative slots are
    populated they must return (n,) for d_t, (n, d) for d_x and (n, d, d)
    for d_xx.
    """

    fn: Callable
    d_t: Optional[Callable] = None
    d_x: Optional[Callable] = None
    d_xx: Optional[Callable] = None
    name: str = "custom"

    def __call__(self, t, x):
        return self.fn(t, x)

    @property
    def has_derivatives(self) -> bool:
        return self.d_t is not None and self.d_x is not None and self.d_xx is not None


def as_scalar_field(obj) -> ScalarField:
    if isinstance(obj, ScalarField):
        return obj
    if callable(obj):
        return ScalarField(fn=obj)
    raise InputError(f"not a scalar field: {obj!r}")


def _atleast_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise InputError(f"points array must be (n, d), got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# builtins

def _zero_field() -> ScalarField:
    def fn(t, x):
        x = _atleast_points(x)
        return np.zeros(x.shape[0])

    def d_x(t, x):
        x = _atleast_points(x)
        return np.zeros_like(x)

    def d_xx(t, x):
        x = _atleast_points(x)
        n, d = x.shape
        return np.zeros((n, d, d))

    return ScalarField(fn=fn, d_t=fn, d_x=d_x, d_xx=d_xx, name="zero")


def _constant_field(v: float) -> ScalarField:
    def fn(t, x):
        x = _atleast_points(x)
        return np.full(x.shape[0], v)

    def zero(t, x):
        x = _atleast_points(x)
        return np.zeros(x.shape[0])

    def d_x(t, x):
        x = _atleast_points(x)
        return np.zeros_like(x)

    def d_xx(t, x):
        x = _atleast_points(x)
        n, d = x.shape
        return np.zeros((n, d, d))

    return ScalarField(fn=fn, d_t=zero, d_x=d_x, d_xx=d_xx, name=f"constant:{v:g}")


def _affine_field(a: float, b: float) -> ScalarField:
    # a + b * sum_j x_j; in one dimension this is a + b x.
    def fn(t, x):
        x = _atleast_points(x)
        return a + b * x.sum(axis=1)

    def d_t(t, x):
        x = _atleast_points(x)
        return np.zeros(x.shape[0])

    def d_x(t, x):
        x = _atleast_points(x)
        return np.full_like(x, b)

    def d_xx(t, x):
        x = _atleast_points(x)
        n, d = x.shape
        return np.zeros((n, d, d))

    return ScalarField(fn=fn, d_t=d_t, d_x=d_x, d_xx=d_xx, name=f"affine:{a:g},{b:g}")


def _gaussian_bump_field(center: float, width: float, height: float) -> ScalarField:
    if width <= 0:
        raise InputError("gaussian_bump width must be positive")
    w2 = width * width

    def fn(t, x):
        x = _atleast_points(x)
        r2 = ((x - center) ** 2).sum(axis=1)
        return height * np.exp(-r2 / (2.0 * w2))

    def d_t(t, x):
        x = _atleast_points(x)
        return np.zeros(x.shape[0])

    def d_x(t, x):
        x = _atleast_points(x)
        return fn(t, x)[:, None] * (-(x - center) / w2)

    def d_xx(t, x):
        x = _atleast_points(x)
        n, d = x.shape
        g = fn(t, x)
        dev = x - center
        outer = dev[:, :, None] * dev[:, None, :] / (w2 * w2)
        eye = np.eye(d) / w2
        return g[:, None, None] * (outer - eye[None, :, :])

    return ScalarField(fn=fn, d_t=d_t, d_x=d_x, d_xx=d_xx,
                       name=f"gaussian_bump:{center:g},{width:g},{height:g}")


def _bump1(center: float, width: float, height: float):
    w2 = width * width

    def b(eta):
        return height * np.exp(-((eta - center) ** 2) / (2.0 * w2))

    def bp(eta):
        return b(eta) * (-(eta - center) / w2)

    def bpp(eta):
        return b(eta) * (((eta - center) ** 2) - w2) / (w2 * w2)

    return b, bp, bpp


def _ou_income_field(theta: float, eta_bar: float, eta0: float, sigma_eta: float,
                     center: float, width: float, height: float) -> ScalarField:
    """Bump income read off an Ornstein-Uhlenbeck driver.

    The raw income is a gaussian bump in the OU level eta; after the
    deterministic change of variables eta(t, x) = eta_bar +
    (eta0 - eta_bar) e^{-theta t} + sigma_eta x the state x has zero drift
    and diffusion e^{-theta t}, so this field is what the engine sees.
    Only the first state coordinate feeds eta.
    """
    if theta <= 0 or width <= 0:
        raise InputError("ou_income needs theta > 0 and width > 0")
    b, bp, bpp = _bump1(center, width, height)

    def eta_of(t, x):
        return eta_bar + (eta0 - eta_bar) * np.exp(-theta * t) + sigma_eta * x[:, 0]

    def fn(t, x):
        x = _atleast_points(x)
        return b(eta_of(t, x))

    def d_t(t, x):
        x = _atleast_points(x)
        deta_dt = -theta * (eta0 - eta_bar) * np.exp(-theta * t)
        return bp(eta_of(t, x)) * deta_dt

    def d_x(t, x):
        x = _atleast_points(x)
        out = np.zeros_like(x)
        out[:, 0] = bp(eta_of(t, x)) * sigma_eta
        return out

    def d_xx(t, x):
        x = _atleast_points(x)
        n, d = x.shape
        out = np.zeros((n, d, d))
        out[:, 0, 0] = bpp(eta_of(t, x)) * sigma_eta * sigma_eta
        return out

    name = (f"ou_income:{theta:g},{eta_bar:g},{eta0:g},{sigma_eta:g},"
            f"{center:g},{width:g},{height:g}")
    return ScalarField(fn=fn, d_t=d_t, d_x=d_x, d_xx=d_xx, name=name)


_SCALAR_BUILDERS = {
    "zero": (0, lambda: _zero_field()),
    "constant": (1, lambda v: _constant_field(v)),
    "affine": (2, lambda a, b: _affine_field(a, b)),
    "gaussian_bump": (3, lambda c, w, h: _gaussian_bump_field(c, w, h)),
    "ou_income": (7, lambda *p: _ou_income_field(*p)),
}


def _parse_key(key: str):
    if not isinstance(key, str) or not key:
        raise InputError(f"field key must be a nonempty string, got {key!r}")
    name, _, rest = key.partition(":")
    if rest:
        try:
            params = tuple(float(tok) for tok in rest.split(","))
        except ValueError as exc:
            raise InputError(f"bad parameters in field key {key!r}") from exc
    else:
        params = ()
    return name, params


def scalar_field(key: str) -> ScalarField:
    """Look up a scalar field by registry key."""
    name, params = _parse_key(key)
    if name not in _SCALAR_BUILDERS:
        raise InputError(f"unknown scalar field {name!r} "
                         f"(known: {sorted(_SCALAR_BUILDERS)})")
    arity, builder = _SCALAR_BUILDERS[name]
    if len(params) != arity:
        raise InputError(f"field {name!r} takes {arity} parameters, got {len(params)}")
    return builder(*params)


def drift_field(key: str) -> Callable:
    """Look up a drift (t, x) -> (n, d) by registry key.

    "affine:a,b" acts componentwise: Lambda_j = a + b x_j.
    """
    name, params = _parse_key(key)
    if name == "zero" and not params:
        return lambda t, x: np.zeros_like(_atleast_points(x))
    if name == "constant" and len(params) == 1:
        v = params[0]
        return lambda t, x: np.full_like(_atleast_points(x), v)
    if name == "affine" and len(params) == 2:
        a, b = params
        return lambda t, x: a + b * _atleast_points(x)
    raise InputError(f"unknown drift key {key!r}")


def diffusion_field(key: str) -> Callable:
    """Look up a diffusion (t, x) -> (n, d, d) by registry key."""
    name, params = _parse_key(key)
    if name == "constant" and len(params) == 1:
        v = params[0]

        def const_diff(t, x):
            x = _atleast_points(x)
            n, d = x.shape
            return np.broadcast_to(v * np.eye(d), (n, d, d)).copy()

        return const_diff
    if name == "ou_decay" and len(params) == 1:
        theta = params[0]
        if theta <= 0:
            raise InputError("ou_decay theta must be positive")

        def decay_diff(t, x):
            x = _atleast_points(x)
            n, d = x.shape
            return np.broadcast_to(np.exp(-theta * t) * np.eye(d), (n, d, d)).copy()

        return decay_diff
    raise InputError(f"unknown diffusion key {key!r}")


# ---------------------------------------------------------------------------
# finite differences (fallback when closed forms are missing)

def fd_time(f, t: float, x, rel: float = FD_REL_STEP):
    h = rel * (1.0 + abs(t))
    out = (np.asarray(f(t + h, x)) - np.asarray(f(t - h, x))) / (2.0 * h)
    if not np.all(np.isfinite(out)):
        raise SingularEndowmentError(f"non-finite time difference quotient at t={t}")
    return out


def fd_grad(f, t: float, x, rel: float = FD_REL_STEP):
    x = _atleast_points(x)
    n, d = x.shape
    out = np.empty((n, d))
    for j in range(d):
        h = rel * (1.0 + np.abs(x[:, j]))
        xp = x.copy()
        xm = x.copy()
        xp[:, j] += h
        xm[:, j] -= h
        out[:, j] = (np.asarray(f(t, xp)) - np.asarray(f(t, xm))) / (2.0 * h)
    if not np.all(np.isfinite(out)):
        raise SingularEndowmentError(f"non-finite gradient quotient at t={t}")
    return out


def fd_hess(f, t: float, x, rel: float = FD_REL_STEP):
    x = _atleast_points(x)
    n, d = x.shape
    out = np.empty((n, d, d))
    f0 = np.asarray(f(t, x))
    steps = [rel * (1.0 + np.abs(x[:, j])) for j in range(d)]
    for j in range(d):
        h = steps[j]
        xp = x.copy()
        xm = x.copy()
        xp[:, j] += h
        xm[:, j] -= h
        out[:, j, j] = (np.asarray(f(t, xp)) - 2.0 * f0 + np.asarray(f(t, xm))) / (h * h)
    for j in range(d):
        for k in range(j + 1, d):
            hj, hk = steps[j], steps[k]
            xpp = x.copy(); xpp[:, j] += hj; xpp[:, k] += hk
            xpm = x.copy(); xpm[:, j] += hj; xpm[:, k] -= hk
            xmp = x.copy(); xmp[:, j] -= hj; xmp[:, k] += hk
            xmm = x.copy(); xmm[:, j] -= hj; xmm[:, k] -= hk
            q = (np.asarray(f(t, xpp)) - np.asarray(f(t, xpm))
                 - np.asarray(f(t, xmp)) + np.asarray(f(t, xmm))) / (4.0 * hj * hk)
            out[:, j, k] = q
            out[:, k, j] = q
    if not np.all(np.isfinite(out)):
        raise SingularEndowmentError(f"non-finite second difference quotient at t={t}")
    return out
