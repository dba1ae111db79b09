"""Cone arithmetic for the product of a nonnegative orthant and second-order cones.

A vector in the product cone is laid out as ``[orthant (l entries), soc_1, soc_2, ...]``.
Second-order cones of equal dimension are stored contiguously so every
operation runs vectorised over ``(count, dim)`` views.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


@dataclass
class ConeSpec:
    l: int
    soc_dims: list[int] = field(default_factory=list)

    def __post_init__(self):
        if any(self.soc_dims[i] > self.soc_dims[i + 1] for i in range(len(self.soc_dims) - 1)):
            raise ValueError("soc_dims must be sorted so equal sizes are contiguous")
        self.groups = []  # (start, count, dim)
        pos = self.l
        dims = np.asarray(self.soc_dims, dtype=int)
        for d in np.unique(dims):
            cnt = int(np.sum(dims == d))
            self.groups.append((pos, cnt, int(d)))
            pos += cnt * int(d)
        self.size = pos
        self.degree = self.l + len(self.soc_dims)

    def views(self, u):
        """Return the orthant slice and a list of ``(count, dim)`` SOC views."""
        return u[: self.l], [u[s : s + c * d].reshape(c, d) for s, c, d in self.groups]

    def identity(self) -> np.ndarray:
        e = np.zeros(self.size)
        e[: self.l] = 1.0
        for s, c, d in self.groups:
            e[s : s + c * d : d] = 1.0
        return e


def jdot(u, v):
    return u[:, 0] * v[:, 0] - np.einsum("ij,ij->i", u[:, 1:], v[:, 1:])


def jnorm2(u):
    """``u0^2 - |u1|^2`` evaluated as a product to limit cancellation."""
    r = np.linalg.norm(u[:, 1:], axis=1)
    return (u[:, 0] - r) * (u[:, 0] + r)


def product(cone: ConeSpec, u, v):
    """Jordan product ``u o v``."""
    out = np.empty_like(u)
    ul, us = cone.views(u)
    vl, vs = cone.views(v)
    ol, os_ = cone.views(out)
    ol[:] = ul * vl
    for a, b, o in zip(us, vs, os_):
        o[:, 0] = np.einsum("ij,ij->i", a, b)
        o[:, 1:] = a[:, :1] * b[:, 1:] + b[:, :1] * a[:, 1:]
    return out


def inv_product(cone: ConeSpec, u, v):
    """Solve ``u o x = v`` for ``x`` with ``u`` in the cone interior."""
    out = np.empty_like(u)
    ul, us = cone.views(u)
    vl, vs = cone.views(v)
    ol, os_ = cone.views(out)
    ol[:] = vl / ul
    for a, b, o in zip(us, vs, os_):
        x0 = (a[:, 0] * b[:, 0] - np.einsum("ij,ij->i", a[:, 1:], b[:, 1:])) / jdot(a, a)
        o[:, 0] = x0
        o[:, 1:] = (b[:, 1:] - x0[:, None] * a[:, 1:]) / a[:, :1]
    return out


def min_eig(cone: ConeSpec, u) -> float:
    """Smallest Jordan eigenvalue; ``u`` is interior iff this is positive."""
    ul, us = cone.views(u)
    vals = [ul.min()] if ul.size else []
    for a in us:
        vals.append(np.min(a[:, 0] - np.linalg.norm(a[:, 1:], axis=1)))
    return float(min(vals)) if vals else np.inf


def max_step(cone: ConeSpec, u, d) -> float:
    """Largest ``alpha >= 0`` with ``u + alpha d`` in the cone (``u`` interior).
    Returns ``inf`` when the ray never leaves the cone."""
    ul, us = cone.views(u)
    dl, ds = cone.views(d)
    best = np.inf
    neg = dl < 0
    if np.any(neg):
        best = float(np.min(-ul[neg] / dl[neg]))
    for a, b in zip(us, ds):
        alpha = _soc_max_step(a, b)
        if alpha.size:
            best = min(best, float(alpha.min()))
    return best


def _soc_max_step(u, d):
    c = jdot(u, u)
    qa = jdot(d, d)
    qb = 2.0 * jdot(u, d)
    inside = d[:, 0] >= np.linalg.norm(d[:, 1:], axis=1)
    out = np.full(u.shape[0], np.inf)
    todo = ~inside
    if not np.any(todo):
        return out
    a, b, cc = qa[todo], qb[todo], np.maximum(c[todo], 0.0)
    disc = np.sqrt(np.maximum(b * b - 4.0 * a * cc, 0.0))
    # stable quadratic roots; pick the smallest positive one
    q = -0.5 * (b + np.where(b >= 0, disc, -disc))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(a != 0, q / a, np.inf)
        r2 = np.where(q != 0, cc / q, np.inf)
    r1 = np.where(r1 > 0, r1, np.inf)
    r2 = np.where(r2 > 0, r2, np.inf)
    out[todo] = np.minimum(r1, r2)
    return out


def shift_interior(cone: ConeSpec, u) -> np.ndarray:
    """Shift ``u`` along the identity so its smallest eigenvalue is at least 1."""
    t = -min_eig(cone, u)
    if t >= -1e-8 * max(np.linalg.norm(u), 1.0):
        return u + (1.0 + t) * cone.identity()
    return u.copy()


class NTScaling:
    """Nesterov-Todd scaling ``W`` (symmetric) with ``W z = W^-1 s = lambda``."""

    def __init__(self, cone: ConeSpec, s, z):
        self.cone = cone
        sl, ss = cone.views(s)
        zl, zs = cone.views(z)
        self.d = np.sqrt(sl / zl)
        self.beta, self.v = [], []
        for a, b in zip(ss, zs):
            js = np.sqrt(jnorm2(a))
            jz = np.sqrt(jnorm2(b))
            sb = a / js[:, None]
            zb = b / jz[:, None]
            gamma = np.sqrt(0.5 * (1.0 + np.einsum("ij,ij->i", sb, zb)))
            wb = sb.copy()
            wb[:, 0] += zb[:, 0]
            wb[:, 1:] -= zb[:, 1:]
            wb /= 2.0 * gamma[:, None]
            v = wb.copy()
            v[:, 0] += 1.0
            v /= np.sqrt(2.0 * (wb[:, :1] + 1.0))
            self.beta.append(np.sqrt(js / jz))
            self.v.append(v)

    def apply(self, u, inverse=False):
        out = np.empty_like(u)
        ul, us = self.cone.views(u)
        ol, os_ = self.cone.views(out)
        ol[:] = ul / self.d if inverse else ul * self.d
        for a, o, beta, v in zip(us, os_, self.beta, self.v):
            if inverse:
                jv = v.copy()
                jv[:, 1:] *= -1.0
                t = 2.0 * np.einsum("ij,ij->i", jv, a)
                o[:] = t[:, None] * jv
                o[:, 0] -= a[:, 0]
                o[:, 1:] += a[:, 1:]
                o /= beta[:, None]
            else:
                t = 2.0 * np.einsum("ij,ij->i", v, a)
                o[:] = t[:, None] * v
                o[:, 0] -= a[:, 0]
                o[:, 1:] += a[:, 1:]
                o *= beta[:, None]
        return out

    def inverse_matrix(self) -> sp.csr_matrix:
        """Sparse block-diagonal ``W^-1``."""
        cone = self.cone
        rows = [np.arange(cone.l)]
        cols = [np.arange(cone.l)]
        vals = [1.0 / self.d]
        for (start, cnt, dim), beta, v in zip(cone.groups, self.beta, self.v):
            jv = v.copy()
            jv[:, 1:] *= -1.0
            blk = 2.0 * jv[:, :, None] * jv[:, None, :]
            jdiag = np.ones(dim)
            jdiag[1:] = -1.0
            blk -= np.diag(jdiag)[None]
            blk /= beta[:, None, None]
            base = start + dim * np.arange(cnt)
            ii, jj = np.meshgrid(np.arange(dim), np.arange(dim), indexing="ij")
            rows.append((base[:, None, None] + ii[None]).ravel())
            cols.append((base[:, None, None] + jj[None]).ravel())
            vals.append(blk.ravel())
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(cone.size, cone.size),
        )
