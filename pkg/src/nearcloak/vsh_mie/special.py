"""Spherical Bessel, Neumann and Hankel functions and their Riccati forms."""
import numpy as np
from scipy.special import spherical_jn, spherical_yn

__all__ = ["spherical_bessel", "riccati", "riccati_derivative"]


def spherical_bessel(n, z, kind="j", derivative=False):
    """Spherical Bessel-type function of integer order ``n``.

    Parameters
    ----------
    n : int or int array
    z : complex or complex array
    kind : {'j', 'y', 'h1', 'h2'}
    derivative : bool
        Return the derivative with respect to ``z``.

    Notes
    -----
    ``j`` is regular at the origin (scipy evaluates the limit); ``y`` and the
    Hankel functions are singular there and overflow to ``inf``.
    """
    z = np.asarray(z)
    if kind == "j":
        return spherical_jn(n, z, derivative)
    if kind == "y":
        return spherical_yn(n, z, derivative)
    if kind in ("h1", "h2"):
        sgn = 1 if kind == "h1" else -1
        return spherical_jn(n, z, derivative) + sgn * 1j * spherical_yn(n, z, derivative)
    raise ValueError(f"unknown kind {kind!r}")


def riccati(n, z, kind="j"):
    """Riccati function ``z f_n(z)``."""
    return z * spherical_bessel(n, z, kind)


def riccati_derivative(n, z, kind="j"):
    """``d/dz [z f_n(z)] = f_n(z) + z f_n'(z)``."""
    return spherical_bessel(n, z, kind) + z * spherical_bessel(n, z, kind, derivative=True)
