"""File formats: PGM images, legacy VTK output and convergence tables."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import astuple, dataclass, fields

import numpy as np

from .benchmarks import ImageData
from .fem import CrFunction, P0Function, RtField, cr_vertex_values, rt_coefficients
from .mesh import Triangulation


class PgmError(ValueError):
    """Malformed PGM data; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


# ---------------------------------------------------------------- PGM

def _tokens(data: bytes, pos: int, count: int):
    """Read ``count`` whitespace separated header tokens, skipping comments."""
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and (chr(data[pos]).isspace() or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < n and data[pos] not in (10, 13):
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise PgmError("unexpected end of header", pos)
        start = pos
        while pos < n and not chr(data[pos]).isspace() and data[pos] != ord("#"):
            pos += 1
        tok = data[start:pos]
        if not tok.isdigit():
            raise PgmError(f"expected an unsigned integer, got {tok[:16]!r}", start)
        out.append(int(tok))
    return out, pos


def parse_pgm(data: bytes) -> ImageData:
    """Decode a P2 (ASCII) or P5 (binary) graymap.

    Raises
    ------
    PgmError
        On a malformed header or payload, with the offending byte offset.
    """
    if len(data) < 2 or data[:1] != b"P" or data[1:2] not in (b"2", b"5"):
        raise PgmError("not a PGM file (magic number must be P2 or P5)", 0)
    binary = data[1:2] == b"5"
    (width, height, maxval), pos = _tokens(data, 2, 3)
    if width < 1 or height < 1:
        raise PgmError("image dimensions must be positive", pos)
    if not 0 < maxval <= 65535:
        raise PgmError(f"maxval {maxval} outside 1..65535", pos)
    n = width * height
    if binary:
        if pos >= len(data) or not chr(data[pos]).isspace():
            raise PgmError("missing whitespace after header", pos)
        pos += 1
        size = 1 if maxval < 256 else 2
        expected = n * size
        payload = data[pos:pos + expected]
        if len(payload) < expected:
            raise PgmError(f"truncated payload: expected {expected} bytes, got {len(payload)}", pos + len(payload))
        raw = np.frombuffer(payload, dtype=np.uint8 if size == 1 else ">u2").astype(float)
    else:
        try:
            raw_list, _ = _tokens(data, pos, n)
        except PgmError as exc:
            if "end of header" in str(exc):
                got = len(data[pos:].split())
                raise PgmError(f"truncated payload: expected {n} samples, got {got}", exc.offset) from None
            raise
        raw = np.asarray(raw_list, dtype=float)
    if raw.max(initial=0) > maxval:
        raise PgmError(f"sample value exceeds maxval {maxval}", pos)
    return ImageData(width, height, raw.reshape(height, width) / maxval)


def load_pgm(path) -> ImageData:
    """Read a PGM file; pixel values are scaled to [0, 1]."""
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def save_pgm(img: ImageData | np.ndarray, path, maxval=255, binary=True):
    """Write an image with values in [0, 1] as P5 (default) or P2."""
    px = img.pixels if isinstance(img, ImageData) else np.asarray(img, dtype=float)
    if px.ndim != 2:
        raise ValueError("image must be two-dimensional")
    if not 0 < maxval <= 65535:
        raise ValueError("maxval must lie in 1..65535")
    q = np.rint(np.clip(px, 0, 1) * maxval).astype(np.int64)
    h, w = q.shape
    header = f"P{5 if binary else 2}\n{w} {h}\n{maxval}\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        if binary:
            fh.write(q.astype(np.uint8 if maxval < 256 else ">u2").tobytes())
        else:
            for row in q:
                fh.write((" ".join(map(str, row)) + "\n").encode())


# ---------------------------------------------------------------- VTK

_VTK_CELL = {2: 5, 3: 10}          # triangle, tetrahedron


def _fmt(values):
    return "\n".join(" ".join(repr(float(x)) for x in np.atleast_1d(row)) for row in values)


def export_vtk(mesh: Triangulation, fields_, path, title="tvafem"):
    """Write the mesh and fields as a legacy ASCII VTK 3.0 unstructured grid.

    Parameters
    ----------
    fields_ : dict or list of (name, field)
        ``P0Function`` and ``P0Vector``-like arrays become cell data,
        ``CrFunction`` becomes cell-centre values plus vertex averages of
        the element traces, ``RtField`` becomes the cell vector ``Pi y``.
    """
    items = list(fields_.items()) if isinstance(fields_, dict) else list(fields_)
    d = mesh.dim
    cell, point = [], []
    for name, f in items:
        name = str(name).replace(" ", "_")
        if getattr(f, "mesh", mesh) is not mesh:
            raise ValueError(f"field {name!r} lives on a different mesh")
        if isinstance(f, CrFunction):
            vv = cr_vertex_values(f)
            cell.append(("scalar", name, vv.mean(axis=1)))
            acc = np.bincount(mesh.elements.ravel(), weights=vv.ravel(), minlength=mesh.n_vertices)
            cnt = np.bincount(mesh.elements.ravel(), minlength=mesh.n_vertices)
            point.append(("scalar", name, acc / np.maximum(cnt, 1)))
        elif isinstance(f, RtField):
            a, _ = rt_coefficients(f)
            cell.append(("vector", name, a))
        elif isinstance(f, P0Function):
            cell.append(("scalar", name, f.values))
        else:
            v = np.asarray(getattr(f, "values", f), dtype=float)
            if v.shape == (mesh.n_elements,):
                cell.append(("scalar", name, v))
            elif v.shape == (mesh.n_elements, d):
                cell.append(("vector", name, v))
            else:
                raise ValueError(f"cannot export field {name!r} of shape {v.shape}")
    pts = np.zeros((mesh.n_vertices, 3))
    pts[:, :d] = mesh.vertices
    k = d + 1
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_vertices} double", _fmt(pts),
             f"CELLS {mesh.n_elements} {mesh.n_elements * (k + 1)}",
             "\n".join(f"{k} " + " ".join(map(str, e)) for e in mesh.elements),
             f"CELL_TYPES {mesh.n_elements}", "\n".join([str(_VTK_CELL[d])] * mesh.n_elements)]
    for header, n, data in (("CELL_DATA", mesh.n_elements, cell), ("POINT_DATA", mesh.n_vertices, point)):
        if not data:
            continue
        lines.append(f"{header} {n}")
        for kind, name, v in data:
            if kind == "scalar":
                lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default", _fmt(v)]
            else:
                v3 = np.zeros((len(v), 3))
                v3[:, :d] = v
                lines += [f"VECTORS {name} double", _fmt(v3)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_vtk_counts(path):
    """Numbers of points and cells in a legacy VTK file (a light sanity reader)."""
    pts = cells = None
    with open(path) as fh:
        for line in fh:
            if line.startswith("POINTS"):
                pts = int(line.split()[1])
            elif line.startswith("CELLS"):
                cells = int(line.split()[1])
    return pts, cells


# ---------------------------------------------------------------- CSV

CSV_HEADER = ("level", "n_vertices", "h", "eta", "rho_tilde", "linf_zbar", "flow_steps", "wall_time", "rate")


@dataclass
class ConvergenceRow:
    level: int
    n_vertices: int
    h: float
    eta: float
    rho_tilde: float
    linf_zbar: float
    flow_steps: int
    wall_time: float

    @classmethod
    def from_level(cls, lv):
        rho = lv.rho_tilde if lv.rho_tilde is not None else math.nan
        return cls(lv.level, lv.n_vertices, lv.h, lv.eta, rho, lv.linf_raw, lv.flow_steps, lv.wall_time)


def experimental_rates(n_vertices, eta, dim=2):
    """``log(eta_i / eta_{i+1}) / log(N_{i+1} / N_i) * d`` for consecutive rows; NaN first."""
    n = np.asarray(n_vertices, dtype=float)
    e = np.asarray(eta, dtype=float)
    out = np.full(len(n), np.nan)
    if len(n) > 1:
        with np.errstate(divide="ignore", invalid="ignore"):
            out[1:] = np.log(e[:-1] / e[1:]) / np.log(n[1:] / n[:-1]) * dim
    return out


def _num(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.17g}"


def write_convergence_csv(rows, path, dim=2):
    """Write a convergence table; the rate column is computed from consecutive rows."""
    rows = list(rows)
    rates = experimental_rates([r.n_vertices for r in rows], [r.eta for r in rows], dim)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r, rate in zip(rows, rates):
            w.writerow([_num(v) for v in astuple(r)] + [_num(rate)])


def read_convergence_csv(path):
    """Parse a table written by :func:`write_convergence_csv`.

    Returns
    -------
    rows : list of ConvergenceRow
    rates : ndarray
    """
    rows, rates = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header!r}")
        types = [f.type for f in fields(ConvergenceRow)]
        for i, rec in enumerate(reader, start=2):
            if len(rec) != len(CSV_HEADER):
                raise ValueError(f"line {i}: expected {len(CSV_HEADER)} columns, got {len(rec)}")
            vals = [int(v) if t in ("int", int) else float(v) for v, t in zip(rec, types)]
            rows.append(ConvergenceRow(*vals))
            rates.append(float(rec[-1]))
    return rows, np.asarray(rates)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
