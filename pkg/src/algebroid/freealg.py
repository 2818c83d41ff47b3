"""Degree-truncated free (almost-)Lie algebroid generated by an anchored
bundle with connection.

Basis words are bracket trees over the generators.  In almost mode the basis
is the anticommutative-magma normal form (antisymmetry only); in quotient mode
the Jacobiator relations are eliminated degreewise by numeric-rank Gaussian
reduction at a reference point, which leaves exactly the Hall words.  Anchors
extend by vector-field commutators, and the connection extends by the bracket
formula that keeps the compatibility tensor of the extension identically zero
degree by degree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .exprjet import Expr, Num, diff, e_add, e_mul, e_neg, e_sub, eval_jet
from .spec_model import (
    AlgebroidSpec, CheckReport, report_from_residuals, sample_points,
    eval_metric,
)
from .calculus import killing_frame_components, killing_residual_frame, \
    s_frame_components

__all__ = [
    "HallWord", "FreeTruncation", "hall_basis", "magma_basis", "free_extend",
    "jacobiator_check", "propagate_compatibility", "cartan_check_extended",
    "anchor_rank_profile", "IndeterminateRankError", "NonLocallyFreeError",
    "GeneratorCompatibilityError", "MAX_DEGREE",
]

MAX_DEGREE = 4          # anchors of degree-d words need order-(d-1) jets
PIVOT_TOL = 1e-8
ZERO_TOL = 1e-12


class IndeterminateRankError(Exception):
    """A rank decision fell into the ambiguous pivot band [1e-12, 1e-8]."""


class NonLocallyFreeError(Exception):
    """A relation accepted at the reference point fails at auxiliary points."""


class GeneratorCompatibilityError(Exception):
    """The generator-level compatibility precondition does not hold."""


@dataclass(frozen=True)
class HallWord:
    """A bracket word: either a generator (gen set) or an ordered pair."""

    gen: int | None = None
    parts: tuple["HallWord", "HallWord"] | None = None
    degree: int = 1
    key: tuple = ()

    def __repr__(self):
        return word_str(self)


def leaf(a: int) -> HallWord:
    return HallWord(gen=a, parts=None, degree=1, key=(1, a))


def pair(u: HallWord, v: HallWord) -> HallWord:
    deg = u.degree + v.degree
    return HallWord(gen=None, parts=(u, v), degree=deg,
                    key=(deg,) + u.key + v.key)


def word_str(w: HallWord) -> str:
    if w.gen is not None:
        return f"e{w.gen + 1}"
    return f"[{word_str(w.parts[0])},{word_str(w.parts[1])}]"


def is_hall(w: HallWord) -> bool:
    """Standard Hall condition: u > v, and for u = (u1, u2) also u2 <= v."""
    if w.gen is not None:
        return True
    u, v = w.parts
    if not (is_hall(u) and is_hall(v) and u.key > v.key):
        return False
    if u.gen is None and u.parts[1].key > v.key:
        return False
    return True


def magma_basis(rank: int, degree: int) -> list[list[HallWord]]:
    """Anticommutative-magma normal forms per degree: all pairs (u, v) of
    lower-degree basis words with u > v in the word order."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if not 1 <= degree <= MAX_DEGREE:
        raise ValueError(f"degree must be in 1..{MAX_DEGREE}")
    levels = [[leaf(a) for a in range(rank)]]
    for d in range(2, degree + 1):
        words = []
        for p in range(d - 1, d // 2 - 1, -1):
            q = d - p
            for u in levels[p - 1]:
                for v in levels[q - 1]:
                    if u.key > v.key:
                        words.append(pair(u, v))
        words.sort(key=lambda w: w.key)
        levels.append(words)
    return levels


def hall_basis(rank: int, degree: int) -> list[list[HallWord]]:
    """Hall basis of the free Lie algebra per degree; degree-d counts match
    the Witt formula."""
    levels = magma_basis(rank, degree)
    return [[w for w in level if is_hall(w)] for level in levels]


# --------------------------------------------------------------------------
# Free truncation


Expansion = Mapping[HallWord, Expr]          # linear combination of basis words


@dataclass
class FreeTruncation:
    """Hall-word basis to degree d with extended anchors, bracket table, and
    extended connection coefficients.

    bracket_table maps ordered pairs (u, v), u != v, deg u + deg v <= d, to
    the expansion of [u, v] in the basis.  conn maps each basis word w to the
    per-word 1-form coefficients of nabla w (degree-filtered: coefficients on
    words of degree > deg w vanish identically).
    """

    spec: AlgebroidSpec
    degree: int
    mode: str                                           # "almost" | "quotient"
    basis: tuple[tuple[HallWord, ...], ...]             # per degree
    anchor: dict                                        # word -> tuple[Expr]
    bracket_table: dict                                 # (u, v) -> Expansion
    conn: dict                                          # w -> {w': tuple[Expr]}
    hall_order: str = field(default="degree, then lexicographic on the "
                                    "recursive bracket structure")

    @property
    def words(self) -> tuple[HallWord, ...]:
        return tuple(w for level in self.basis for w in level)

    def counts(self) -> list[int]:
        return [len(level) for level in self.basis]

    def bracket(self, u: HallWord, v: HallWord) -> Expansion:
        if u is v or u.key == v.key:
            return {}
        return self.bracket_table[(u, v)]


def _expansion_add(target: dict, w: HallWord, coeff: Expr):
    cur = target.get(w)
    combined = e_add(cur, coeff) if cur is not None else coeff
    if isinstance(combined, Num) and combined.value == 0.0:
        target.pop(w, None)
    else:
        target[w] = combined


def _commutator_exprs(rho_u, rho_v, n: int) -> tuple[Expr, ...]:
    comps = []
    for i in range(n):
        total = Num(0.0)
        for j in range(n):
            total = e_add(total, e_sub(e_mul(rho_u[j], diff(rho_v[i], j)),
                                       e_mul(rho_v[j], diff(rho_u[i], j))))
        comps.append(total)
    return tuple(comps)


def _almost_table(words, degree) -> dict:
    index = {w.key: w for w in words}
    table = {}
    for u in words:
        for v in words:
            if u.key == v.key or u.degree + v.degree > degree:
                continue
            if u.key > v.key:
                table[(u, v)] = {index[pair(u, v).key]: Num(1.0)}
            else:
                table[(u, v)] = {index[pair(v, u).key]: Num(-1.0)}
    return table


def _expand_bracket(table, u: HallWord, expansion: Expansion) -> dict:
    """[u, sum c_w w] with C-infinity-linear coefficients."""
    out: dict = {}
    for w, coeff in expansion.items():
        if u.key == w.key:
            continue
        for w2, c2 in table[(u, w)].items():
            _expansion_add(out, w2, e_mul(coeff, c2))
    return out


def _jacobiator(table, w1, w2, w3) -> dict:
    out: dict = {}
    for a, b, c in ((w1, w2, w3), (w2, w3, w1), (w3, w1, w2)):
        inner = table.get((b, c), {})
        for w, coeff in _expand_bracket(table, a, inner).items():
            _expansion_add(out, w, coeff)
    return out


def _relation_rows(table, basis, degree: int):
    """Constant-coefficient Jacobi relations grouped by degree."""
    gens = basis[0]
    rows = {d: [] for d in range(3, degree + 1)}
    if degree >= 3:
        for i in range(len(gens)):
            for j in range(i + 1, len(gens)):
                for k in range(j + 1, len(gens)):
                    rows[3].append(_jacobiator(table, gens[i], gens[j], gens[k]))
    if degree >= 4:
        for row in list(rows[3]):
            for g in gens:
                rows[4].append(_expand_bracket(table, g, row))
        for w2 in basis[1]:
            for i in range(len(gens)):
                for j in range(i + 1, len(gens)):
                    rows[4].append(_jacobiator(table, w2, gens[i], gens[j]))
    return rows


def _eval_coeff(expr: Expr, p, n: int) -> float:
    return eval_jet(expr, p, order=0, n=n).value


def _eliminate(rows, level_words, ref_point, aux_points, n):
    """RREF of the relation rows over one degree level; returns the kept
    words and the substitution for eliminated ones.  Columns are ordered with
    non-Hall words first so the surviving basis is the Hall basis whenever the
    relations are in general position."""
    if not rows:
        return list(level_words), {}
    cols = sorted(level_words, key=lambda w: (is_hall(w), w.key))
    col_index = {w: k for k, w in enumerate(cols)}

    def matrix_at(point):
        M = np.zeros((len(rows), len(cols)))
        for r_i, row in enumerate(rows):
            for w, coeff in row.items():
                M[r_i, col_index[w]] = _eval_coeff(coeff, point, n)
        return M

    M = matrix_at(ref_point)
    for q in aux_points:
        if float(np.max(np.abs(matrix_at(q) - M))) > 1e-9:
            raise NonLocallyFreeError("non-locally-free locus detected: relation "
                                      "coefficients vary across sample points")

    R = M.copy()
    pivots = []
    row_at = 0
    for c in range(len(cols)):
        if row_at >= len(rows):
            break
        sub = np.abs(R[row_at:, c])
        best = int(np.argmax(sub)) + row_at
        mag = abs(R[best, c])
        if mag < ZERO_TOL:
            continue
        if mag < PIVOT_TOL:
            raise IndeterminateRankError(
                f"rank decision ambiguous: pivot magnitude {mag:.3e} lies "
                f"between {ZERO_TOL:.0e} and {PIVOT_TOL:.0e}")
        R[[row_at, best]] = R[[best, row_at]]
        R[row_at] /= R[row_at, c]
        for r_i in range(len(rows)):
            if r_i != row_at and R[r_i, c] != 0.0:
                R[r_i] -= R[r_i, c] * R[row_at]
        pivots.append((row_at, c))
        row_at += 1
    leftover = float(np.max(np.abs(R[row_at:]))) if row_at < len(rows) else 0.0
    if leftover > ZERO_TOL:
        raise IndeterminateRankError(f"relation rows of size {leftover:.3e} "
                                     f"survived elimination")

    eliminated = {}
    pivot_cols = {c for _, c in pivots}
    for row_i, c in pivots:
        expansion = {}
        for c2 in range(len(cols)):
            if c2 != c and abs(R[row_i, c2]) > ZERO_TOL:
                expansion[cols[c2]] = Num(-R[row_i, c2])
        eliminated[cols[c]] = expansion
    kept = [w for k, w in enumerate(cols) if k not in pivot_cols]
    kept.sort(key=lambda w: w.key)
    return kept, eliminated


def _reduce_expansion(expansion: Expansion, substitution) -> dict:
    out: dict = {}
    for w, coeff in expansion.items():
        if w in substitution:
            for w2, c2 in substitution[w].items():
                _expansion_add(out, w2, e_mul(coeff, c2))
        else:
            _expansion_add(out, w, coeff)
    return out


def _build_connection(spec, basis, table, anchor, degree):
    """Extend the connection degree by degree via the bracket identity
    nabla[u,v] = L_u(nabla v) - L_v(nabla u) - nabla_{rho(nabla u)}v
    + nabla_{rho(nabla v)}u.  Coefficients live on words of degree <= deg w."""
    n = spec.dimension
    conn: dict = {}
    for a, w in enumerate(basis[0]):
        entries = {}
        for b, wb in enumerate(basis[0]):
            comps = tuple(spec.connection[a][b][i] for i in range(n))
            if any(not (isinstance(c, Num) and c.value == 0.0) for c in comps):
                entries[wb] = comps
        conn[w] = entries

    def lie_term(u, theta_map, out):
        # L_u(sum_w theta^w (x) w), theta^w a 1-form with Expr components
        rho_u = anchor[u]
        for w, theta in theta_map.items():
            lie = []
            for i in range(n):
                total = Num(0.0)
                for j in range(n):
                    total = e_add(total, e_mul(rho_u[j], diff(theta[i], j)))
                    total = e_add(total, e_mul(diff(rho_u[j], i), theta[j]))
                lie.append(total)
            _conn_add(out, w, tuple(lie))
            for w2, c2 in table.get((u, w), {}).items():
                _conn_add(out, w2, tuple(e_mul(c2, theta[i]) for i in range(n)))

    def contraction_term(theta_map_u, theta_map_v, out, sign):
        # -/+ nabla_{rho(nabla u)} v pieces
        for w1, theta in theta_map_u.items():
            rho_w1 = anchor[w1]
            for w2, phi in theta_map_v.items():
                scalar = Num(0.0)
                for j in range(n):
                    scalar = e_add(scalar, e_mul(rho_w1[j], phi[j]))
                comps = tuple(e_mul(Num(sign), e_mul(theta[i], scalar))
                              for i in range(n))
                _conn_add(out, w2, comps)

    for d in range(2, degree + 1):
        for w in basis[d - 1]:
            u, v = w.parts
            out: dict = {}
            lie_term(u, conn[v], out)
            neg: dict = {}
            lie_term(v, conn[u], neg)
            for w2, comps in neg.items():
                _conn_add(out, w2, tuple(e_neg(c) for c in comps))
            contraction_term(conn[u], conn[v], out, -1.0)
            contraction_term(conn[v], conn[u], out, +1.0)
            conn[w] = {w2: comps for w2, comps in out.items()
                       if any(not (isinstance(c, Num) and c.value == 0.0)
                              for c in comps)}
    return conn


def _conn_add(store: dict, w: HallWord, comps):
    cur = store.get(w)
    if cur is None:
        store[w] = tuple(comps)
    else:
        store[w] = tuple(e_add(a, b) for a, b in zip(cur, comps))


def free_extend(spec: AlgebroidSpec, degree: int = 3,
                mode: str = "quotient", seed: int = 42,
                reference_point=None) -> FreeTruncation:
    """Construct the degree-truncated free almost-Lie algebroid over the
    anchored bundle of ``spec`` (structure functions of the input are
    ignored; the bundle enters as generators), extend the connection, and in
    quotient mode eliminate the Jacobiator relations degreewise."""
    if mode not in ("almost", "quotient"):
        raise ValueError(f"mode must be 'almost' or 'quotient', got {mode!r}")
    if not 1 <= degree <= MAX_DEGREE:
        raise ValueError(f"degree must be in 1..{MAX_DEGREE}")
    n = spec.dimension
    levels = magma_basis(spec.rank, degree)
    words = [w for level in levels for w in level]

    anchor: dict = {}
    for a, w in enumerate(levels[0]):
        anchor[w] = tuple(spec.anchor[a][i] for i in range(n))
    for level in levels[1:]:
        for w in level:
            u, v = w.parts
            anchor[w] = _commutator_exprs(anchor[u], anchor[v], n)

    table = _almost_table(words, degree)

    if mode == "quotient":
        ref = np.asarray(reference_point, dtype=float) \
            if reference_point is not None else spec.chart.center()
        aux = sample_points(spec.chart, 20, seed)
        rows = _relation_rows(table, levels, degree)
        substitution: dict = {}
        new_levels = [list(levels[0])]
        for d in range(2, degree + 1):
            kept, eliminated = _eliminate(rows.get(d, []), levels[d - 1],
                                          ref, aux, n)
            substitution.update(eliminated)
            new_levels.append(kept)
        kept_set = {w.key for level in new_levels for w in level}
        reduced = {}
        for (u, v), expansion in table.items():
            if u.key in kept_set and v.key in kept_set \
                    and u.degree + v.degree <= degree:
                reduced[(u, v)] = _reduce_expansion(expansion, substitution)
        table = reduced
        levels = new_levels
        anchor = {w: anchor[w] for level in levels for w in level}

    conn = _build_connection(spec, levels, table, anchor, degree)
    return FreeTruncation(spec=spec, degree=degree, mode=mode,
                          basis=tuple(tuple(level) for level in levels),
                          anchor=anchor, bracket_table=table, conn=conn)


# --------------------------------------------------------------------------
# Numeric evaluation of the extension


def extended_arrays(free: FreeTruncation, p, order: int = 1):
    """Dense anchor / structure / connection arrays over the extended frame.
    Structure entries for pairs beyond the truncation are zero-filled; checks
    only read pairs with degree sum within the truncation."""
    spec = free.spec
    n = spec.dimension
    words = free.words
    N = len(words)
    idx = {w.key: k for k, w in enumerate(words)}

    rho = np.zeros((N, n))
    drho = np.zeros((N, n, n)) if order >= 1 else None
    for w, comps in free.anchor.items():
        k = idx[w.key]
        for i in range(n):
            jet = eval_jet(comps[i], p, order=order, n=n)
            rho[k, i] = jet.value
            if order >= 1:
                drho[k, i] = jet.grad

    C = np.zeros((N, N, N))
    dC = np.zeros((N, N, N, n)) if order >= 1 else None
    for (u, v), expansion in free.bracket_table.items():
        ku, kv = idx[u.key], idx[v.key]
        for w, coeff in expansion.items():
            jet = eval_jet(coeff, p, order=order, n=n)
            C[ku, kv, idx[w.key]] = jet.value
            if order >= 1:
                dC[ku, kv, idx[w.key]] = jet.grad

    omega = np.zeros((N, N, n))
    domega = np.zeros((N, N, n, n)) if order >= 1 else None
    for w, entries in free.conn.items():
        kw = idx[w.key]
        for w2, comps in entries.items():
            k2 = idx[w2.key]
            for i in range(n):
                jet = eval_jet(comps[i], p, order=order, n=n)
                omega[kw, k2, i] = jet.value
                if order >= 1:
                    domega[kw, k2, i] = jet.grad
    if order >= 1:
        return rho, drho, C, dC, omega, domega
    return rho, C, omega


def _allowed_pairs(free: FreeTruncation):
    words = free.words
    degs = [w.degree for w in words]
    allowed = []
    for a in range(len(words)):
        for b in range(len(words)):
            if a != b and degs[a] + degs[b] <= free.degree:
                allowed.append((a, b))
    return allowed


def cartan_check_extended(free: FreeTruncation, points,
                          tolerance: float = 1e-8) -> CheckReport:
    """max |S| over extended basis pairs with degree sum within truncation,
    by the frame formula on the extended data."""
    pairs = _allowed_pairs(free)
    residuals = []
    for p in points:
        rho, drho, C, dC, omega, domega = extended_arrays(free, p, order=1)
        S = s_frame_components(rho, drho, C, dC, omega, domega)
        worst = 0.0
        for a, b in pairs:
            worst = max(worst, float(np.max(np.abs(S[:, a, b, :]))))
        residuals.append(worst)
    return report_from_residuals("cartan_extended", residuals, points, tolerance)


def jacobiator_check(free: FreeTruncation, points,
                     tolerance: float = 1e-8) -> CheckReport:
    """Covariant constancy of the Jacobiator on the almost-mode truncation:
    the connection applied to Jac(triple) must match Jac on nabla-shifted
    arguments, for every basis triple with degree sum within truncation."""
    if free.mode != "almost":
        raise ValueError("jacobiator_check needs a truncation built in almost mode")
    if free.degree < 3:
        raise ValueError("jacobiator_check needs degree >= 3")
    spec = free.spec
    n = spec.dimension
    words = free.words
    idx = {w.key: k for k, w in enumerate(words)}
    N = len(words)
    table = free.bracket_table

    triples = []
    for i in range(N):
        for j in range(i + 1, N):
            for k in range(j + 1, N):
                if words[i].degree + words[j].degree + words[k].degree <= free.degree:
                    triples.append((words[i], words[j], words[k]))

    prepared = []
    for w1, w2, w3 in triples:
        jac = _jacobiator(table, w1, w2, w3)
        shifted = []
        for slot, host in enumerate((w1, w2, w3)):
            per_q = {}
            for q in words:
                if q.degree <= host.degree:
                    args = [w1, w2, w3]
                    args[slot] = q
                    if args[0].key != args[1].key != args[2].key \
                            and args[0].key != args[2].key:
                        per_q[q] = _jacobiator(table, *args)
                    else:
                        per_q[q] = {}
            shifted.append(per_q)
        prepared.append(((w1, w2, w3), jac, shifted))

    residuals = []
    for p in points:
        omega = np.zeros((N, N, n))
        for w, entries in free.conn.items():
            for w2, comps in entries.items():
                for i in range(n):
                    omega[idx[w.key], idx[w2.key], i] = \
                        eval_jet(comps[i], p, order=0, n=n).value
        worst = 0.0
        for (args, jac, shifted) in prepared:
            jac_val = np.zeros(N)
            jac_grad = np.zeros((N, n))
            for w, coeff in jac.items():
                jet = eval_jet(coeff, p, order=1, n=n)
                jac_val[idx[w.key]] = jet.value
                jac_grad[idx[w.key]] = jet.grad
            # nabla_i (Jac(args)) in the extended frame
            residual = jac_grad.transpose(1, 0) + np.einsum(
                "v,vwi->iw", jac_val, omega)
            for slot, host in enumerate(args):
                kh = idx[host.key]
                for q, jac_q in shifted[slot].items():
                    kq = idx[q.key]
                    if not jac_q:
                        continue
                    vec = np.zeros(N)
                    for w, coeff in jac_q.items():
                        vec[idx[w.key]] = eval_jet(coeff, p, order=0, n=n).value
                    residual -= np.einsum("i,w->iw", omega[kh, kq], vec)
            worst = max(worst, float(np.max(np.abs(residual))) if residual.size else 0.0)
        residuals.append(worst)
    return report_from_residuals("jacobiator_covariant_constancy",
                                 residuals, points, tolerance)


def propagate_compatibility(free: FreeTruncation, points,
                            tolerance: float = 1e-7,
                            generator_tolerance: float = 1e-7,
                            metric=None) -> CheckReport:
    """Extended Killing residual over all basis words, with extended anchors
    and extended connection coefficients.  Requires the generator-level check
    to pass first.  ``metric`` (a canonical-triangle expression mapping)
    overrides the base spec's metric block when given."""
    spec = free.spec
    if metric is not None:
        from dataclasses import replace
        spec = replace(spec, metric=metric)
    if spec.metric is None:
        raise ValueError("propagation check needs a metric on the base")
    if free.mode != "quotient":
        raise ValueError("propagation check needs a quotient-mode truncation")
    gen_worst = max(killing_residual_frame(spec, p).max_abs() for p in points)
    if gen_worst > generator_tolerance:
        raise GeneratorCompatibilityError(
            f"generator-level Killing residual {gen_worst:.3e} exceeds "
            f"{generator_tolerance:.1e}; nothing to propagate")
    n = spec.dimension
    residuals = []
    for p in points:
        rho, drho, C, dC, omega, domega = extended_arrays(free, p, order=1)
        g, dg = eval_metric(spec, p, order=1)
        K = killing_frame_components(rho, drho, g, dg, omega)
        residuals.append(float(np.max(np.abs(K))))
    return report_from_residuals("killing_extended", residuals, points, tolerance)


def anchor_rank_profile(free: FreeTruncation, points, svd_tol: float = 1e-10):
    """Per-point (generator rank, extended rank, closure defect): the defect
    measures whether one-higher-degree commutators leave the realized span."""
    spec = free.spec
    n = spec.dimension
    gens = free.basis[0]
    words = free.words
    profile = []
    for p in points:
        mat = np.array([[eval_jet(c, p, order=0, n=n).value
                         for c in free.anchor[w]] for w in words])
        gen_rows = mat[:len(gens)]
        scale = max(1.0, float(np.max(np.abs(mat))))
        rank_gen = int(np.linalg.matrix_rank(gen_rows, tol=svd_tol * scale))
        rank_ext = int(np.linalg.matrix_rank(mat, tol=svd_tol * scale))
        defect = 0.0
        for u in words:
            for v in words:
                if u.key >= v.key or u.degree + v.degree != free.degree + 1:
                    continue
                vec = _numeric_commutator(free.anchor[u], free.anchor[v], p, n)
                if np.linalg.norm(vec) == 0.0:
                    continue
                sol, res, *_ = np.linalg.lstsq(mat.T, vec, rcond=None)
                defect = max(defect, float(np.linalg.norm(mat.T @ sol - vec)))
        profile.append({"rank_generators": rank_gen, "rank_extended": rank_ext,
                        "closure_defect": defect})
    return profile


def _numeric_commutator(rho_u, rho_v, p, n):
    u = np.zeros(n)
    du = np.zeros((n, n))
    v = np.zeros(n)
    dv = np.zeros((n, n))
    for i in range(n):
        ju = eval_jet(rho_u[i], p, order=1, n=n)
        jv = eval_jet(rho_v[i], p, order=1, n=n)
        u[i], du[i] = ju.value, ju.grad
        v[i], dv[i] = jv.value, jv.grad
    return np.einsum("j,ij->i", u, dv) - np.einsum("j,ij->i", v, du)
