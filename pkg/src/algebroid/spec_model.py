"""Serialized description of an anchored bundle / Lie algebroid over a chart.

A spec document is a JSON object carrying a chart, an anchor matrix, structure
functions (stored for a<b only, so antisymmetry cannot be violated by input),
connection forms, and optional geometric structures (metric, 2-form, psi,
symplectic form, Poisson bivector), all as expression strings over the chart
coordinates.  Loading parses every expression and enforces the shape and
symmetry contracts; `validate_spec` then samples the chart box and checks the
numeric axioms (positive definiteness, anchor morphism, Jacobi, bivector
Jacobi, nondegeneracy).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .exprjet import (
    Expr, Num, Neg, FUNCTIONS, ParseError, eval_jet, parse_expr,
)

__all__ = [
    "ChartSpec", "AlgebroidSpec", "CheckReport", "SchemaError",
    "load_spec", "load_spec_file", "sample_points",
    "check_anchor_morphism", "check_jacobi", "validate_spec",
]

DEFAULT_TOLERANCE = 1e-9
DEFAULT_POINTS = 100
DEFAULT_SEED = 42

_DEFINITENESS_FLOOR = 1e-12


class SchemaError(Exception):
    """Spec document violates the schema (missing field, wrong shape, ...)."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class ChartSpec:
    coords: tuple[str, ...]
    domain: tuple[tuple[float, float], ...]

    @property
    def dimension(self) -> int:
        return len(self.coords)

    def contains(self, point) -> bool:
        return all(lo <= x <= hi for x, (lo, hi) in zip(point, self.domain))

    def center(self) -> np.ndarray:
        return np.array([(lo + hi) / 2.0 for lo, hi in self.domain])


@dataclass(frozen=True)
class AlgebroidSpec:
    """Parsed spec. Symmetric/antisymmetric blocks keep only their canonical
    triangle; evaluation reconstructs the mirror entries exactly."""

    chart: ChartSpec
    rank: int
    mode: str                                   # "anchored" | "lie"
    anchor: tuple[tuple[Expr, ...], ...]        # [a][i]
    structure: Mapping[tuple[int, int, int], Expr] = field(default_factory=dict)
    connection: tuple = ()                      # [a][b][i]
    metric: Mapping[tuple[int, int], Expr] | None = None        # i <= j
    two_form: Mapping[tuple[int, int], Expr] | None = None      # i < j
    psi: tuple | None = None                    # [a][b][i]
    symplectic: Mapping[tuple[int, int], Expr] | None = None    # i < j
    poisson: Mapping[tuple[int, int], Expr] | None = None       # i < j

    @property
    def dimension(self) -> int:
        return self.chart.dimension

    def structure_expr(self, a: int, b: int, c: int) -> tuple[float, Expr | None]:
        """Signed lookup of C^c_{ab}; reading (b,a,c) returns the negation."""
        if a == b:
            return 0.0, None
        if a < b:
            return 1.0, self.structure.get((a, b, c))
        return -1.0, self.structure.get((b, a, c))


@dataclass
class CheckReport:
    """Residual statistics for one named check over a sampled point set."""

    name: str
    points: int
    max_residual: float
    mean_residual: float
    tolerance: float
    worst_point: tuple[float, ...]

    @property
    def passed(self) -> bool:
        return self.max_residual <= self.tolerance

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "points": self.points,
            "max_residual": self.max_residual,
            "mean_residual": self.mean_residual,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "worst_point": list(self.worst_point),
        }


def report_from_residuals(name: str, residuals: Sequence[float],
                          points: Sequence, tolerance: float) -> CheckReport:
    residuals = [float(v) for v in residuals]
    worst = int(np.argmax(residuals))
    return CheckReport(
        name=name,
        points=len(residuals),
        max_residual=max(residuals),
        mean_residual=float(np.mean(residuals)),
        tolerance=tolerance,
        worst_point=tuple(float(x) for x in points[worst]),
    )


# --------------------------------------------------------------------------
# Deterministic sampling (splitmix64)

_MASK = (1 << 64) - 1


class SplitMix64:
    """Seeded 64-bit PRNG; the uniform stream drives all point sampling so
    reports are bit-reproducible across runs and platforms."""

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


def sample_points(chart: ChartSpec, count: int = DEFAULT_POINTS,
                  seed: int = DEFAULT_SEED) -> list[np.ndarray]:
    """Draw ``count`` points uniformly from the chart domain box."""
    rng = SplitMix64(seed)
    out = []
    for _ in range(count):
        p = np.array([lo + rng.uniform() * (hi - lo) for lo, hi in chart.domain])
        out.append(p)
    return out


# --------------------------------------------------------------------------
# Loading

_TOP_LEVEL_KEYS = {"chart", "rank", "mode", "anchor", "structure", "connection",
                   "metric", "two_form", "psi", "symplectic", "poisson",
                   "name", "notes"}


def _parse_at(text, coords, path: str) -> Expr:
    if not isinstance(text, str):
        raise SchemaError(path, f"expected expression string, got {type(text).__name__}")
    try:
        return parse_expr(text, coords)
    except ParseError as exc:
        raise SchemaError(path, f"expression error: {exc}") from exc


def _negation_of(e: Expr) -> Expr:
    if isinstance(e, Neg):
        return e.arg
    if isinstance(e, Num):
        return Num(-e.value)
    return Neg(e)


def _is_zero(e: Expr) -> bool:
    return isinstance(e, Num) and e.value == 0.0


def _load_chart(doc, path="chart") -> ChartSpec:
    if not isinstance(doc, Mapping):
        raise SchemaError(path, "expected object with 'coords' and 'domain'")
    coords = doc.get("coords")
    domain = doc.get("domain")
    if not isinstance(coords, Sequence) or not coords or isinstance(coords, str):
        raise SchemaError(f"{path}.coords", "expected nonempty list of names")
    coords = tuple(str(c) for c in coords)
    if len(set(coords)) != len(coords):
        raise SchemaError(f"{path}.coords", "coordinate names must be distinct")
    for c in coords:
        if c in FUNCTIONS:
            raise SchemaError(f"{path}.coords", f"coordinate name '{c}' shadows a function")
    if not isinstance(domain, Sequence) or len(domain) != len(coords):
        raise SchemaError(f"{path}.domain", "expected one [lo, hi] pair per coordinate")
    intervals = []
    for k, pair in enumerate(domain):
        if not isinstance(pair, Sequence) or len(pair) != 2:
            raise SchemaError(f"{path}.domain[{k}]", "expected [lo, hi]")
        lo, hi = float(pair[0]), float(pair[1])
        if not lo < hi:
            raise SchemaError(f"{path}.domain[{k}]", f"need lo < hi, got [{lo}, {hi}]")
        intervals.append((lo, hi))
    return ChartSpec(coords, tuple(intervals))


def _load_matrix(doc, coords, rows, cols, path) -> tuple:
    if not isinstance(doc, Sequence) or len(doc) != rows:
        raise SchemaError(path, f"expected {rows} rows")
    out = []
    for a, row in enumerate(doc):
        if not isinstance(row, Sequence) or isinstance(row, str) or len(row) != cols:
            raise SchemaError(f"{path}[{a}]", f"expected {cols} entries")
        out.append(tuple(_parse_at(row[i], coords, f"{path}[{a}][{i}]")
                         for i in range(cols)))
    return tuple(out)


def _load_cube(doc, coords, r, n, path) -> tuple:
    if not isinstance(doc, Sequence) or len(doc) != r:
        raise SchemaError(path, f"expected {r} blocks")
    return tuple(_load_matrix(doc[a], coords, r, n, f"{path}[{a}]") for a in range(r))


def _load_symmetric(doc, coords, n, path):
    mat = _load_matrix(doc, coords, n, n, path)
    stored = {}
    for i in range(n):
        for j in range(i, n):
            if j > i and mat[i][j] != mat[j][i]:
                kind = path.split(".")[-1]
                raise SchemaError(path, f"{kind} not symmetric: entry ({j+1},{i+1}) "
                                        f"must equal entry ({i+1},{j+1})")
            stored[(i, j)] = mat[i][j]
    return stored


def _load_antisymmetric(doc, coords, n, path):
    mat = _load_matrix(doc, coords, n, n, path)
    stored = {}
    for i in range(n):
        if not _is_zero(mat[i][i]):
            raise SchemaError(path, f"not antisymmetric: diagonal entry ({i+1},{i+1}) "
                                    f"must be 0")
        for j in range(i + 1, n):
            if mat[j][i] != _negation_of(mat[i][j]) and mat[i][j] != _negation_of(mat[j][i]):
                raise SchemaError(path, f"not antisymmetric: entry ({j+1},{i+1}) must "
                                        f"be the negation of entry ({i+1},{j+1})")
            stored[(i, j)] = mat[i][j]
    return stored


def _load_structure(doc, coords, r, path="structure"):
    if not isinstance(doc, Sequence):
        raise SchemaError(path, "expected list of {a, b, c, expr} entries")
    stored = {}
    for k, entry in enumerate(doc):
        where = f"{path}[{k}]"
        if not isinstance(entry, Mapping):
            raise SchemaError(where, "expected object {a, b, c, expr}")
        try:
            a, b, c = int(entry["a"]), int(entry["b"]), int(entry["c"])
            text = entry["expr"]
        except KeyError as exc:
            raise SchemaError(where, f"missing field {exc}") from exc
        for label, v in (("a", a), ("b", b), ("c", c)):
            if not 1 <= v <= r:
                raise SchemaError(where, f"index {label}={v} out of range 1..{r}")
        if not a < b:
            raise SchemaError(where, f"need a < b (got a={a}, b={b}); store only the "
                                     f"a < b component")
        key = (a - 1, b - 1, c - 1)
        if key in stored:
            raise SchemaError(where, f"duplicate entry for (a={a}, b={b}, c={c})")
        stored[key] = _parse_at(text, coords, f"{where}.expr")
    return stored


def load_spec(document) -> AlgebroidSpec:
    """Validate and parse a spec document (a JSON object or its text)."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"invalid JSON: {exc}") from exc
    if not isinstance(document, Mapping):
        raise SchemaError("$", "expected a JSON object")
    unknown = set(document) - _TOP_LEVEL_KEYS
    if unknown:
        raise SchemaError("$", f"unknown fields: {sorted(unknown)}")
    for required in ("chart", "rank", "mode", "anchor", "connection"):
        if required not in document:
            raise SchemaError("$", f"missing field '{required}'")

    chart = _load_chart(document["chart"])
    coords = list(chart.coords)
    n = chart.dimension

    rank = document["rank"]
    if not isinstance(rank, int) or rank < 1:
        raise SchemaError("rank", f"expected integer >= 1, got {rank!r}")
    r = rank

    mode = document["mode"]
    if mode not in ("anchored", "lie"):
        raise SchemaError("mode", f"expected 'anchored' or 'lie', got {mode!r}")

    anchor = _load_matrix(document["anchor"], coords, r, n, "anchor")
    connection = _load_cube(document["connection"], coords, r, n, "connection")

    structure = {}
    if "structure" in document:
        if mode == "anchored" and document["structure"]:
            raise SchemaError("structure", "structure functions are not allowed in "
                                           "anchored mode (no bracket)")
        structure = _load_structure(document["structure"], coords, r)

    metric = two_form = symplectic = poisson = None
    psi = None
    if "metric" in document:
        metric = _load_symmetric(document["metric"], coords, n, "metric")
    if "two_form" in document:
        two_form = _load_antisymmetric(document["two_form"], coords, n, "two_form")
    if "symplectic" in document:
        symplectic = _load_antisymmetric(document["symplectic"], coords, n, "symplectic")
    if "poisson" in document:
        poisson = _load_antisymmetric(document["poisson"], coords, n, "poisson")
    if "psi" in document:
        psi = _load_cube(document["psi"], coords, r, n, "psi")

    return AlgebroidSpec(chart=chart, rank=r, mode=mode, anchor=anchor,
                         structure=structure, connection=connection,
                         metric=metric, two_form=two_form, psi=psi,
                         symplectic=symplectic, poisson=poisson)


def load_spec_file(path) -> AlgebroidSpec:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            document = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"invalid JSON: {exc}") from exc
    return load_spec(document)


# --------------------------------------------------------------------------
# Numeric evaluation of spec blocks (values plus derivative arrays)

def eval_anchor(spec: AlgebroidSpec, p, order: int = 0):
    """rho[a,i] = rho_a^i; drho[a,i,j] = d_j rho_a^i; d2rho[a,i,j,k]."""
    r, n = spec.rank, spec.dimension
    rho = np.zeros((r, n))
    drho = np.zeros((r, n, n)) if order >= 1 else None
    d2rho = np.zeros((r, n, n, n)) if order >= 2 else None
    for a in range(r):
        for i in range(n):
            jet = eval_jet(spec.anchor[a][i], p, order=order, n=n)
            rho[a, i] = jet.value
            if order >= 1:
                drho[a, i] = jet.grad
            if order >= 2:
                d2rho[a, i] = jet.hess
    if order >= 2:
        return rho, drho, d2rho
    if order >= 1:
        return rho, drho
    return rho


def eval_structure(spec: AlgebroidSpec, p, order: int = 0):
    """C[a,b,c] = C^c_{ab} with C[b,a,c] = -C[a,b,c] exactly; dC[a,b,c,k]."""
    r, n = spec.rank, spec.dimension
    C = np.zeros((r, r, r))
    dC = np.zeros((r, r, r, n)) if order >= 1 else None
    for (a, b, c), expr in spec.structure.items():
        jet = eval_jet(expr, p, order=order, n=n)
        C[a, b, c] = jet.value
        C[b, a, c] = -jet.value
        if order >= 1:
            dC[a, b, c] = jet.grad
            dC[b, a, c] = -jet.grad
    if order >= 1:
        return C, dC
    return C


def eval_connection(spec: AlgebroidSpec, p, order: int = 0):
    """omega[a,b,i] = omega^b_{a,i} (so that nabla e_a = omega_a^b e_b)."""
    return _eval_cube(spec.connection, spec, p, order)


def eval_psi(spec: AlgebroidSpec, p, order: int = 0):
    if spec.psi is None:
        raise ValueError("spec carries no psi block")
    return _eval_cube(spec.psi, spec, p, order)


def _eval_cube(cube, spec, p, order):
    r, n = spec.rank, spec.dimension
    w = np.zeros((r, r, n))
    dw = np.zeros((r, r, n, n)) if order >= 1 else None
    for a in range(r):
        for b in range(r):
            for i in range(n):
                jet = eval_jet(cube[a][b][i], p, order=order, n=n)
                w[a, b, i] = jet.value
                if order >= 1:
                    dw[a, b, i] = jet.grad
    if order >= 1:
        return w, dw
    return w


def eval_symmetric2(stored, n, p, order: int = 0):
    g = np.zeros((n, n))
    dg = np.zeros((n, n, n)) if order >= 1 else None
    for (i, j), expr in stored.items():
        jet = eval_jet(expr, p, order=order, n=n)
        g[i, j] = jet.value
        g[j, i] = jet.value
        if order >= 1:
            dg[i, j] = jet.grad
            dg[j, i] = jet.grad
    if order >= 1:
        return g, dg
    return g


def eval_antisymmetric2(stored, n, p, order: int = 0):
    B = np.zeros((n, n))
    dB = np.zeros((n, n, n)) if order >= 1 else None
    for (i, j), expr in stored.items():
        jet = eval_jet(expr, p, order=order, n=n)
        B[i, j] = jet.value
        B[j, i] = -jet.value
        if order >= 1:
            dB[i, j] = jet.grad
            dB[j, i] = -jet.grad
    if order >= 1:
        return B, dB
    return B


def eval_metric(spec: AlgebroidSpec, p, order: int = 0):
    if spec.metric is None:
        raise ValueError("spec carries no metric")
    return eval_symmetric2(spec.metric, spec.dimension, p, order)


def eval_two_form(spec: AlgebroidSpec, p, order: int = 0):
    if spec.two_form is None:
        raise ValueError("spec carries no two_form")
    return eval_antisymmetric2(spec.two_form, spec.dimension, p, order)


def eval_symplectic(spec: AlgebroidSpec, p, order: int = 0):
    if spec.symplectic is None:
        raise ValueError("spec carries no symplectic form")
    return eval_antisymmetric2(spec.symplectic, spec.dimension, p, order)


def eval_poisson(spec: AlgebroidSpec, p, order: int = 0):
    if spec.poisson is None:
        raise ValueError("spec carries no poisson bivector")
    return eval_antisymmetric2(spec.poisson, spec.dimension, p, order)


# --------------------------------------------------------------------------
# Axiom checks

def _require_lie(spec: AlgebroidSpec, what: str):
    if spec.mode != "lie":
        raise ValueError(f"{what} requires lie mode, spec is '{spec.mode}'")


def anchor_morphism_residual(spec: AlgebroidSpec, p) -> float:
    """max_{a,b,i} |[rho_a, rho_b]^i - C^c_{ab} rho_c^i| at one point."""
    rho, drho = eval_anchor(spec, p, order=1)
    C = eval_structure(spec, p, order=0)
    bracket = np.einsum("aj,bij->abi", rho, drho)
    bracket = bracket - bracket.transpose(1, 0, 2)
    defect = bracket - np.einsum("abc,ci->abi", C, rho)
    return float(np.max(np.abs(defect)))


def check_anchor_morphism(spec: AlgebroidSpec, points,
                          tolerance: float = DEFAULT_TOLERANCE) -> CheckReport:
    _require_lie(spec, "anchor-morphism check")
    residuals = [anchor_morphism_residual(spec, p) for p in points]
    return report_from_residuals("anchor_morphism", residuals, points, tolerance)


def jacobi_residual(spec: AlgebroidSpec, p) -> float:
    """max over a<b<c, d of the Jacobiator coefficient at one point."""
    rho = eval_anchor(spec, p, order=0)
    C, dC = eval_structure(spec, p, order=1)
    term = np.einsum("aj,bcdj->abcd", rho, dC) + np.einsum("bce,aed->abcd", C, C)
    jac = term + term.transpose(1, 2, 0, 3) + term.transpose(2, 0, 1, 3)
    r = spec.rank
    worst = 0.0
    for a in range(r):
        for b in range(a + 1, r):
            for c in range(b + 1, r):
                worst = max(worst, float(np.max(np.abs(jac[a, b, c]))))
    return worst


def check_jacobi(spec: AlgebroidSpec, points,
                 tolerance: float = DEFAULT_TOLERANCE) -> CheckReport:
    _require_lie(spec, "Jacobi check")
    residuals = [jacobi_residual(spec, p) for p in points]
    return report_from_residuals("jacobi", residuals, points, tolerance)


def _leading_minors(mat: np.ndarray):
    return [float(np.linalg.det(mat[:k, :k])) for k in range(1, mat.shape[0] + 1)]


def validate_spec(spec: AlgebroidSpec, points,
                  tolerance: float = DEFAULT_TOLERANCE,
                  check_poisson_nondegenerate: bool = False) -> list[CheckReport]:
    """Run every applicable structural check; failures are reported, not thrown."""
    reports = []

    # storage antisymmetry of the structure functions (exact by construction)
    res = []
    for p in points:
        C = eval_structure(spec, p, order=0)
        res.append(float(np.max(np.abs(C + C.transpose(1, 0, 2)))))
    reports.append(report_from_residuals("structure_antisymmetry", res, points, 0.0))

    if spec.metric is not None:
        res = []
        for p in points:
            g = eval_metric(spec, p, order=0)
            res.append(_DEFINITENESS_FLOOR - min(_leading_minors(g)))
        reports.append(report_from_residuals("metric_positive_definite", res,
                                             points, 0.0))

    if spec.mode == "lie":
        reports.append(check_anchor_morphism(spec, points, tolerance))
        reports.append(check_jacobi(spec, points, tolerance))

    if spec.symplectic is not None:
        res = []
        for p in points:
            omega2 = eval_symplectic(spec, p, order=0)
            res.append(_DEFINITENESS_FLOOR - abs(float(np.linalg.det(omega2))))
        reports.append(report_from_residuals("symplectic_nondegenerate", res,
                                             points, 0.0))

    if spec.poisson is not None:
        res = []
        for p in points:
            P, dP = eval_poisson(spec, p, order=1)
            term = np.einsum("il,jkl->ijk", P, dP)
            jac = term + term.transpose(1, 2, 0) + term.transpose(2, 0, 1)
            res.append(float(np.max(np.abs(jac))))
        reports.append(report_from_residuals("poisson_jacobi", res, points, tolerance))
        if check_poisson_nondegenerate:
            res = []
            for p in points:
                P = eval_poisson(spec, p, order=0)
                res.append(_DEFINITENESS_FLOOR - abs(float(np.linalg.det(P))))
            reports.append(report_from_residuals("poisson_nondegenerate", res,
                                                 points, 0.0))

    return reports
