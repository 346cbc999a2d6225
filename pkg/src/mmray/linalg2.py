"""Tiny component-wise linear algebra for the polarization chain.

Complex values are (re, im) pairs, 2-vectors are ((re, im), (re, im)),
2x2 matrices are 2x2 nests of pairs, and 3-vectors are (x, y, z) component
tuples. Components may be ndarrays or autodiff Vars, so the same shading
code runs untaped or taped.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

# -- real 3-vectors as component triples -------------------------------------


def v3(arr):
    """Split an (N, 3) array into a component triple."""
    arr = np.asarray(arr, dtype=np.float64)
    return (arr[..., 0], arr[..., 1], arr[..., 2])


def v3_dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def v3_cross(a, b):
    return (a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0])


def v3_scale(a, s):
    return (a[0] * s, a[1] * s, a[2] * s)


def v3_add(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


def v3_sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def v3_norm(a):
    return ad.sqrt(v3_dot(a, a))


def v3_normalize(a):
    n = v3_norm(a)
    return v3_scale(a, 1.0 / n), n


# -- complex pairs and 2x2 complex matrices -----------------------------------


def c_real(x):
    """Promote a real value to a complex pair."""
    return (x, np.zeros_like(ad.value_of(x)) if hasattr(ad.value_of(x), "shape") else 0.0)


def c_scale(a, s):
    """Complex pair times a real scalar."""
    return (a[0] * s, a[1] * s)


def m2(a11, a12, a21, a22):
    return ((a11, a12), (a21, a22))


def m2_from_complex(mat: np.ndarray):
    """Split (..., 2, 2) complex ndarray into the nested-pair form."""
    return (((mat[..., 0, 0].real, mat[..., 0, 0].imag), (mat[..., 0, 1].real, mat[..., 0, 1].imag)),
            ((mat[..., 1, 0].real, mat[..., 1, 0].imag), (mat[..., 1, 1].real, mat[..., 1, 1].imag)))


def m2_from_real(mat: np.ndarray):
    zero = np.zeros_like(mat[..., 0, 0])
    return (((mat[..., 0, 0], zero), (mat[..., 0, 1], zero)),
            ((mat[..., 1, 0], zero), (mat[..., 1, 1], zero)))


def m2_to_complex(m) -> np.ndarray:
    """Nested pairs back to an (..., 2, 2) complex ndarray (values only)."""
    rows = []
    for r in range(2):
        rows.append([ad.value_of(m[r][c][0]) + 1j * ad.value_of(m[r][c][1]) for c in range(2)])
    a = np.stack([np.stack(rows[0], axis=-1), np.stack(rows[1], axis=-1)], axis=-2)
    return a


def m2_mul(a, b):
    out = []
    for r in range(2):
        row = []
        for c in range(2):
            t1 = ad.cmul(a[r][0], b[0][c])
            t2 = ad.cmul(a[r][1], b[1][c])
            row.append((t1[0] + t2[0], t1[1] + t2[1]))
        out.append(tuple(row))
    return tuple(out)


def m2_vec(a, v):
    """Matrix times complex 2-vector."""
    out = []
    for r in range(2):
        t1 = ad.cmul(a[r][0], v[0])
        t2 = ad.cmul(a[r][1], v[1])
        out.append((t1[0] + t2[0], t1[1] + t2[1]))
    return tuple(out)


def m2_scale(a, s):
    """Matrix times a real (or pair) scalar."""
    if isinstance(s, tuple):
        return tuple(tuple(ad.cmul(a[r][c], s) for c in range(2)) for r in range(2))
    return tuple(tuple((a[r][c][0] * s, a[r][c][1] * s) for c in range(2)) for r in range(2))


def vec2_dot(u, v):
    """Unconjugated complex dot u.v of two complex 2-vectors."""
    t1 = ad.cmul(u[0], v[0])
    t2 = ad.cmul(u[1], v[1])
    return (t1[0] + t2[0], t1[1] + t2[1])
