"""Plain-text dump and load of QCQP instances.

The format is line oriented and self-describing::

    qcqp 1
    n <n>
    scalar r <value>
    vector c <len>
    <one value per line>
    matrix Q <rows> <cols> <nnz>
    <row> <col> <value>        (one triplet per line, zero-based)
    ...
    quad <k>                   (then matrix P, vector q, scalar s)

Sections appear in the order n, r, c, Q, A, b, G, h, lb, ub, quad*.
Floats are written with ``repr`` so a round trip is exact; infinite
bounds are written as ``inf``/``-inf``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .problem import QcqpProblem, QuadConstraint

MAGIC = "qcqp 1"


def _w_vec(out, name, v):
    out.append(f"vector {name} {len(v)}")
    out.extend(repr(float(x)) for x in v)


def _w_mat(out, name, M):
    M = sp.coo_matrix(M)
    # canonical ordering keeps dumps byte-stable
    order = np.lexsort((M.col, M.row))
    out.append(f"matrix {name} {M.shape[0]} {M.shape[1]} {M.nnz}")
    out.extend(f"{M.row[i]} {M.col[i]} {float(M.data[i])!r}" for i in order)


def dumps(problem: QcqpProblem) -> str:
    p = problem
    out = [MAGIC, f"n {p.n}", f"scalar r {float(p.r)!r}"]
    _w_vec(out, "c", p.c)
    _w_mat(out, "Q", p.Q)
    _w_mat(out, "A", p.A)
    _w_vec(out, "b", p.b)
    _w_mat(out, "G", p.G)
    _w_vec(out, "h", p.h)
    _w_vec(out, "lb", p.lb)
    _w_vec(out, "ub", p.ub)
    for k, qc in enumerate(p.quad):
        out.append(f"quad {k}")
        _w_mat(out, "P", qc.matrix())
        _w_vec(out, "q", qc.q)
        out.append(f"scalar s {float(qc.s)!r}")
    return "\n".join(out) + "\n"


def loads(text: str, check: bool = True) -> QcqpProblem:
    lines = iter(text.splitlines())
    if next(lines).strip() != MAGIC:
        raise ValueError("not a qcqp dump")
    fields: dict = {}
    quads: list = []
    cur = fields
    for line in lines:
        tok = line.split()
        if not tok:
            continue
        kind = tok[0]
        if kind == "n":
            fields["n"] = int(tok[1])
        elif kind == "scalar":
            cur[tok[1]] = float(tok[2])
        elif kind == "vector":
            cur[tok[1]] = np.array([float(next(lines)) for _ in range(int(tok[2]))])
        elif kind == "matrix":
            rows, cols, nnz = int(tok[2]), int(tok[3]), int(tok[4])
            trip = [next(lines).split() for _ in range(nnz)]
            i = np.array([int(t[0]) for t in trip], dtype=int)
            j = np.array([int(t[1]) for t in trip], dtype=int)
            v = np.array([float(t[2]) for t in trip])
            cur[tok[1]] = sp.csr_matrix((v, (i, j)), shape=(rows, cols))
        elif kind == "quad":
            cur = {}
            quads.append(cur)
        else:
            raise ValueError(f"unknown section {kind!r}")
    n = fields["n"]
    return QcqpProblem(
        n, Q=fields["Q"], c=fields["c"], r=fields.get("r", 0.0), A=fields["A"], b=fields["b"],
        G=fields["G"], h=fields["h"], lb=fields["lb"], ub=fields["ub"],
        quad=[QuadConstraint(d["P"], d["q"], d["s"]) for d in quads], check=check,
    )


def dump(problem: QcqpProblem, path) -> None:
    Path(path).write_text(dumps(problem))


def load(path, check: bool = True) -> QcqpProblem:
    return loads(Path(path).read_text(), check=check)
