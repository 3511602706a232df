"""Dimension-2 trajectory packing: dyadic speed approximation, interval
covers for bad offsets, certified offset selection and exact separation
verification for travelling bumps on rational lines in the 2-torus.

All trajectory arithmetic is exact rational; floating point only enters when
a final distance is compared against a requested separation, and then via
exact comparison of squared rationals.  The certified minimum distance of a
curve pair is computed from the lattice geometry of the relative motion
(the relative trajectory sweeps a closed rational geodesic, whose distance
to the origin is the distance of a 1d lattice coset), which is both exact
and O(1) per pair; a Lipschitz-certified time-sampling verifier is provided
as an independent cross-check for small instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import floor, gcd, lcm

import numpy as np


class PackingError(ValueError):
    pass


def _frac_gcd(a: Fraction, b: Fraction) -> Fraction:
    """Positive generator of the group aZ + bZ (zero if both vanish)."""
    a, b = abs(a), abs(b)
    if a == 0:
        return b
    if b == 0:
        return a
    den = lcm(a.denominator, b.denominator)
    return Fraction(gcd(int(a * den), int(b * den)), den)


def _frac_lcm(a: Fraction, b: Fraction) -> Fraction:
    g = _frac_gcd(a, b)
    if g == 0:
        return Fraction(0)
    return abs(a * b) / g


def _dist_to_lattice(x: Fraction, g: Fraction) -> Fraction:
    """Distance from x to gZ (g > 0)."""
    r = x - floor(x / g) * g
    return min(r, g - r)


@dataclass(frozen=True)
class RationalSpeed:
    """Exact a + p/q with q a power of two and p/q in lowest terms."""

    a_n: int
    p_n: int
    q_n: int

    def __post_init__(self):
        if self.a_n < 0 or self.p_n < 0 or self.q_n < 1:
            raise ValueError("speed components must be nonnegative, q >= 1")
        if self.q_n & (self.q_n - 1):
            raise ValueError("q_n must be a power of two")
        if gcd(self.p_n, self.q_n) != 1 and self.p_n != 0:
            raise ValueError("p_n/q_n must be in lowest terms")

    @property
    def value(self) -> Fraction:
        return self.a_n + Fraction(self.p_n, self.q_n)

    def __float__(self) -> float:
        return float(self.value)


def dyadic_speed_approx(targets, cap: int) -> list[RationalSpeed]:
    """Round each target down to the dyadic grid of resolution ~1/cap.

    Per target v: a = floor(v), p = floor(frac * 2^l), q = 2^l with
    2^l the largest power of two <= cap; then 0 <= v - approx <= 2/cap and
    all of (a, p, q) are bounded by cap.
    """
    if cap < 2:
        raise ValueError("cap must be >= 2")
    ell = 1
    while (1 << (ell + 1)) <= cap:
        ell += 1
    q = 1 << ell
    out = []
    for tval in targets:
        v = Fraction(tval)
        if v < 0 or v > cap:
            raise PackingError(f"target {tval} outside [0, cap={cap}]")
        a = floor(v)
        frac = v - a
        p = floor(frac * q)
        g = gcd(p, q) if p else q
        out.append(RationalSpeed(a_n=a, p_n=p // g, q_n=q // g))
    return out


@dataclass(frozen=True)
class _PairGeometry:
    """Exact lattice data of one ordered direction pair (xi, xi_other)."""

    t1: Fraction
    t1p: Fraction
    t2: Fraction
    t2p: Fraction
    cbar: Fraction  # 1/|xi x xi'|
    t_prime_period: Fraction
    c_other: int  # integer norm of the other direction

    def e_lattice_gap(self, w: Fraction) -> Fraction:
        """Generator of the discrete set {k1 (w t1 - t1'), k2 (w t2 - t2')}."""
        return _frac_gcd(w * self.t1 - self.t1p, w * self.t2 - self.t2p)

    def delta(self, eps: Fraction, w: Fraction) -> Fraction:
        return eps * (1 + self.cbar * (1 + w))


def _dir_to_integers(xi) -> tuple[tuple[int, int], int]:
    xi = tuple(Fraction(q) for q in xi)
    if sum(q * q for q in xi) != 1:
        raise ValueError("directions must be exact rational unit vectors")
    den = lcm(xi[0].denominator, xi[1].denominator)
    return (int(xi[0] * den), int(xi[1] * den)), den


def pair_geometry(xi, xi_other) -> _PairGeometry:
    """Generators of the intersection group of two rational-line motions.

    T_int = {(t, t'): t xi = t' xi' on the torus} is the lattice M^{-1} Z^2
    for M = [xi, -xi']; its columns provide the generators, and the periods
    (T, 0), (0, T') lie in it by construction.
    """
    (P, c) = _dir_to_integers(xi)
    (Pp, cp) = _dir_to_integers(xi_other)
    det = Fraction(P[0], c) * Fraction(-Pp[1], cp) - Fraction(-Pp[0], cp) * Fraction(P[1], c)
    if det == 0:
        raise PackingError("directions are parallel; the lemma needs distinct lines")
    # M^{-1} = adj(M)/det with M = [[P0/c, -Pp0/cp], [P1/c, -Pp1/cp]]
    inv00 = Fraction(-Pp[1], cp) / det
    inv01 = Fraction(Pp[0], cp) / det
    inv10 = Fraction(-P[1], c) / det
    inv11 = Fraction(P[0], c) / det
    # columns of M^{-1} are lattice generators (t_i, t'_i)
    g1 = (inv00, inv10)
    g2 = (inv01, inv11)
    cross = abs(Fraction(P[0] * Pp[1] - P[1] * Pp[0], c * cp))
    gp = gcd(abs(Pp[0]), abs(Pp[1]))
    return _PairGeometry(
        t1=g1[0], t1p=g1[1], t2=g2[0], t2p=g2[1],
        cbar=1 / cross,
        t_prime_period=Fraction(cp, gp),
        c_other=cp,
    )


def bad_offset_measure(xi, xi_other, w, eps: float, cap: int,
                       max_points: int = 200_000) -> list[tuple[Fraction, Fraction]]:
    """Interval cover of the bad shifts s for the moving pair.

    Returns exact intervals (subsets of [0, 1], endpoints rational) covering
    every s for which some t >= 0 brings (t w + s) xi' within eps of t xi.
    Sound by construction: outside the union the separation eps is certified.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if eps == 0:
        return []
    wv = w.value if isinstance(w, RationalSpeed) else Fraction(w)
    geo = pair_geometry(xi, xi_other)
    epsf = Fraction(eps)
    delta = geo.delta(epsf, wv)
    if delta >= Fraction(1, 2 * geo.c_other):
        # the return-set expansion is only clean below the self-spacing of
        # the target line; past it everything is conservatively bad
        return [(Fraction(0), Fraction(1))]
    G = geo.e_lattice_gap(wv)
    if G == 0:
        return [(Fraction(0), Fraction(1))]
    v = (G - floor(G) * G // G).denominator if False else (G % 1).denominator if G % 1 else 1
    # points of G Z mod 1 are the multiples of 1/v with v = denominator of G
    v = G.denominator
    if v > max_points:
        raise PackingError(
            f"bad-set has {v} interval centers (> {max_points}); "
            f"use the modular representation via choose_offsets instead"
        )
    if 2 * delta * v >= 1:
        return [(Fraction(0), Fraction(1))]
    pts = sorted(Fraction(m, v) for m in range(v))
    intervals = []
    for ptv in pts:
        lo, hi = ptv - delta, ptv + delta
        intervals.append((lo, hi))
    # wrap into [0,1] and merge
    wrapped = []
    for lo, hi in intervals:
        if lo < 0:
            wrapped.append((lo + 1, Fraction(1)))
            wrapped.append((Fraction(0), hi))
        elif hi > 1:
            wrapped.append((lo, Fraction(1)))
            wrapped.append((Fraction(0), hi - 1))
        else:
            wrapped.append((lo, hi))
    wrapped.sort()
    merged = []
    for lo, hi in wrapped:
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return [(lo, hi) for lo, hi in merged]


def rot90(xi) -> tuple:
    return (-Fraction(xi[1]), Fraction(xi[0]))


def curve_position(xi, w, a, t):
    """Position of one packed curve: w t xi + a rot90(xi), as floats.

    Offsets are transverse to the travel direction.  The along-direction
    offsets of the source construction cannot separate antipodal direction
    pairs (both curves live on the same closed geodesic and their relative
    parameter sweeps it, forcing a collision); a transverse offset restores
    the statement for every pair of distinct directions with the identical
    lattice machinery.
    """
    xi_f = np.array([float(q) for q in xi])
    perp = np.array([-xi_f[1], xi_f[0]])
    return float(w) * np.asarray(t)[..., None] * xi_f + float(a) * perp


@dataclass
class OffsetAssignment:
    """Certified transverse offsets a_{xi,n} for every (direction, speed) curve."""

    directions: list  # exact rational unit tuples
    speeds: list  # RationalSpeed per n
    entries: dict  # (dir_index, n) -> Fraction offset
    cap: int
    eps: Fraction
    c0: float
    exponent: int
    budget: float  # measured C * c0 * |Lambda|
    separation: float = 0.0  # certified; filled by verify_separation

    def curve(self, di: int, n: int):
        return self.directions[di], self.speeds[n], self.entries[(di, n)]

    def to_text(self) -> str:
        lines = [
            f"cap={self.cap}",
            f"eps={self.eps}",
            f"c0={self.c0}",
            f"exponent={self.exponent}",
            f"budget={self.budget}",
            f"separation={self.separation}",
        ]
        for n, s in enumerate(self.speeds):
            lines.append(f"speed.{n}={s.a_n}+{s.p_n}/{s.q_n}")
        for di, d in enumerate(self.directions):
            lines.append(f"direction.{di}={d[0]},{d[1]}")
        for (di, n), a in sorted(self.entries.items()):
            lines.append(f"offset.{di}.{n}={a}")
        return "\n".join(lines) + "\n"


class _PairLattice:
    """Exact data of the relative motion of one ordered curve pair.

    Relative position z(t) = z0 + t V with V = w_a xi_a - w_b xi_b; the
    minimum torus distance over all t equals dist(z0 . Vperp, g Z)/|V| with
    g the generator of the integer projections onto Vperp.
    """

    __slots__ = ("vperp", "g", "v2", "ka", "kb")

    def __init__(self, xi_a, w_a: Fraction, xi_b, w_b: Fraction):
        xa = tuple(Fraction(q) for q in xi_a)
        xb = tuple(Fraction(q) for q in xi_b)
        V = (w_a * xa[0] - w_b * xb[0], w_a * xa[1] - w_b * xb[1])
        if V[0] == 0 and V[1] == 0:
            raise PackingError("coincident direction and speed; relative motion frozen")
        vperp = (-V[1], V[0])
        self.vperp = vperp
        self.g = _frac_gcd(vperp[0], vperp[1])
        self.v2 = V[0] * V[0] + V[1] * V[1]
        pa = rot90(xa)
        pb = rot90(xb)
        self.ka = pa[0] * vperp[0] + pa[1] * vperp[1]  # coefficient of a_a in z0.Vperp
        self.kb = -(pb[0] * vperp[0] + pb[1] * vperp[1])  # coefficient of a_b

    def min_distance_sq(self, a_a: Fraction, a_b: Fraction) -> Fraction:
        cstar = self.ka * a_a + self.kb * a_b
        num = _dist_to_lattice(cstar, self.g)
        return num * num / self.v2

    def clear(self, a_a: Fraction, a_b: Fraction, eps: Fraction) -> bool:
        cstar = self.ka * a_a + self.kb * a_b
        num = _dist_to_lattice(cstar, self.g)
        return num * num >= eps * eps * self.v2

    def bad_measure(self, eps: Fraction) -> Fraction:
        """Fraction of offset space excluded by this pair at separation eps."""
        halfwidth = eps * _frac_sqrt_upper(self.v2)
        return min(Fraction(1), 2 * halfwidth / self.g)


def _frac_sqrt_upper(x: Fraction) -> Fraction:
    """Rational upper bound of sqrt(x)."""
    import math

    return Fraction(math.sqrt(float(x))).limit_denominator(10**9) * Fraction(1000001, 1000000)


def _candidate_ladder(max_levels: int = 18):
    yield Fraction(0)
    for k in range(1, max_levels + 1):
        step = Fraction(1, 1 << k)
        for j in range(1 << (k - 1)):
            yield (2 * j + 1) * step


def choose_offsets(families, speeds: list[RationalSpeed], cap: int,
                   c0: float | None = None, exponent: int = 4,
                   budget_margin: float = 0.5) -> OffsetAssignment:
    """Pick offsets so distinct-direction curves stay eps-separated forever.

    eps = c0 / cap^exponent.  When c0 is not supplied it is calibrated from
    the measured per-pair excluded measure so the union bound per placed
    curve stays below `budget_margin`.  Offsets are assigned greedily over a
    deterministic dyadic candidate ladder; every accepted candidate is
    exactly clear of every placed curve's bad lattice, so the greedy pick is
    the midpoint of a surviving dyadic gap.  verify_separation re-certifies
    the final assignment pair by pair.
    """
    if hasattr(families, "directions"):
        families = [families]
    directions = []
    for fam in families:
        directions.extend(fam.directions if hasattr(fam, "directions") else [fam])
    for s in speeds:
        if max(s.a_n, s.p_n, s.q_n) > cap:
            raise PackingError(f"speed {s} has components above cap {cap}")

    ndir = len(directions)
    nsp = len(speeds)

    # integer model over common denominators: xi_i = Q_i / C, w_n = A_n / qden
    C = 1
    for d in directions:
        C = lcm(C, lcm(Fraction(d[0]).denominator, Fraction(d[1]).denominator))
    Q = np.array([[int(Fraction(d[0]) * C), int(Fraction(d[1]) * C)] for d in directions],
                 dtype=np.int64)
    qden = 1
    for s in speeds:
        qden = lcm(qden, s.q_n)
    A = np.array([int(s.value * qden) for s in speeds], dtype=np.int64)

    def pair_ints(di, n, dj, m):
        """Integer lattice data of the ordered pair: V, g, ka, kb (scaled)."""
        V = A[n] * Q[di] - A[m] * Q[dj]  # true V times C*qden
        g = np.gcd(V[0], V[1])  # true g times C*qden
        ka = Q[di, 0] * V[0] + Q[di, 1] * V[1]  # xi_a . V times C^2 qden
        kb = -(Q[dj, 0] * V[0] + Q[dj, 1] * V[1])
        return V, int(g), int(ka), int(kb)

    # calibration: C_meas is the worst direction-pair sum of excluded
    # measures over all speed pairs (per unit c0), so C_meas * c0 * |Lambda|
    # bounds the union of bad sets seen by any single curve.
    row_max = 0.0
    AQ = A[:, None, None] * Q[None, :, :]  # (nsp, ndir, 2)
    for di in range(ndir):
        for dj in range(di + 1, ndir):
            V = AQ[:, di][:, None, :] - AQ[:, dj][None, :, :]  # (nsp, nsp, 2)
            g = np.gcd(V[..., 0], V[..., 1]).astype(float)
            vnorm = np.sqrt((V.astype(float) ** 2).sum(axis=-1))
            meas = np.minimum(1.0, 2.0 * vnorm / (g * cap**exponent))
            row_max = max(row_max, float(meas.sum()))
    if c0 is None:
        c0 = min(1.0, budget_margin / (row_max * ndir)) if row_max > 0 else 1.0
    c0_frac = Fraction(c0).limit_denominator(10**12)
    eps = c0_frac / cap**exponent
    budget = row_max * c0 * ndir
    if budget >= 1.0:
        raise PackingError(
            f"measure budget C*c0*|Lambda| = {budget:.3f} >= 1; "
            f"reduce c0 or the family size"
        )

    # pairs whose partner side has a vanishing offset coefficient (speed
    # ratio equal to the direction dot product) constrain one curve alone
    # and must be enforced at that curve's placement regardless of order.
    reverse: dict = {}
    dot_int = Q @ Q.T  # xi_i . xi_j times C^2
    for di in range(ndir):
        for dj in range(ndir):
            if dj == di or dot_int[di, dj] <= 0:
                continue
            # w_m = w_n * dot  <=>  A_m C^2 = A_n dot_int
            lhs = A * (C * C)
            for n in range(nsp):
                rhs = A[n] * dot_int[di, dj]
                for m in np.nonzero(lhs == rhs)[0]:
                    V, g, ka, kb = pair_ints(di, n, dj, int(m))
                    reverse.setdefault((di, n), []).append((V, g, ka))

    # greedy placement in float with a 2x guard band; the final assignment
    # is certified independently by verify_separation in exact arithmetic
    eps_f = float(eps)
    entries: dict = {}
    placed_by_dir: dict = {d: [] for d in range(ndir)}
    ladder = []
    for cand in _candidate_ladder():
        ladder.append(cand)
        if len(ladder) > 4096:
            break

    for di in range(ndir):
        for n in range(nsp):
            # vectorized constraint data against every placed curve of other
            # directions: V = A_n Q_di - A_m Q_dj per placed (dj, m)
            blocks = []
            for dj in range(ndir):
                if dj == di or not placed_by_dir[dj]:
                    continue
                ms = np.array([m for (m, _) in placed_by_dir[dj]], dtype=np.int64)
                offs = np.array([float(b) for (_, b) in placed_by_dir[dj]])
                V = A[n] * Q[di][None, :] - A[ms][:, None] * Q[dj][None, :]
                g = np.gcd(V[:, 0], V[:, 1]).astype(float)
                ka = (V @ Q[di]).astype(float)
                kb = -(V @ Q[dj]).astype(float)
                vnorm = np.sqrt((V.astype(float) ** 2).sum(axis=1))
                blocks.append((ka, kb * offs, g * C, 2.0 * eps_f * vnorm * C))
            if blocks:
                kaa = np.concatenate([b[0] for b in blocks])
                kbb = np.concatenate([b[1] for b in blocks])
                base = np.concatenate([b[2] for b in blocks])
                thresh = np.concatenate([b[3] for b in blocks])
                live = kaa != 0.0
            rev = reverse.get((di, n), ())
            found = None
            for cand in ladder:
                cf = float(cand)
                ok = True
                for (V, g, ka) in rev:
                    cstar = ka * cf
                    r = cstar - np.floor(cstar / (g * C)) * (g * C)
                    dist = min(r, g * C - r)
                    vn = float(np.hypot(float(V[0]), float(V[1])))
                    if dist < 2.0 * eps_f * vn * C:
                        ok = False
                        break
                if ok and blocks:
                    cstar = kaa * cf + kbb
                    r = cstar - np.floor(cstar / base) * base
                    dist = np.minimum(r, base - r)
                    if not np.all(dist[live] >= thresh[live]):
                        ok = False
                if ok:
                    found = cand
                    break
            if found is None:
                raise PackingError(
                    f"no offset candidate clears the bad sets for curve "
                    f"(direction {di}, speed {n}); measured budget {budget:.3f}"
                )
            entries[(di, n)] = found
            placed_by_dir[di].append((n, found))

    return OffsetAssignment(
        directions=list(directions), speeds=list(speeds), entries=entries,
        cap=cap, eps=eps, c0=float(c0), exponent=exponent, budget=budget,
    )


def _pair_min_distance_exact(xi_a, w_a: Fraction, a_a: Fraction,
                             xi_b, w_b: Fraction, a_b: Fraction) -> Fraction:
    """Exact squared minimum torus distance of two moving curves over all t."""
    return _PairLattice(xi_a, w_a, xi_b, w_b).min_distance_sq(a_a, a_b)


def pair_common_period(w_a: Fraction, xi_a, w_b: Fraction, xi_b) -> Fraction:
    """Least T > 0 with the joint motion T-periodic (exact)."""
    xa = tuple(Fraction(q) for q in xi_a)
    xb = tuple(Fraction(q) for q in xi_b)
    gens = []
    for w, x in ((w_a, xa), (w_b, xb)):
        gens.extend([w * x[0], w * x[1]])
    g = Fraction(0)
    for c in gens:
        g = _frac_gcd(g, c)
    if g == 0:
        return Fraction(1)
    return 1 / g


def verify_separation(assignment: OffsetAssignment, horizon=None,
                      method: str = "exact", tol: float = 1e-9,
                      denominator_bound: int = 10**18) -> float:
    """Certified minimum pairwise distance over all times.

    method="exact" evaluates the lattice formula per pair (certificate is
    exact rational arithmetic); method="sampling" walks one exact common
    period with a step small enough that the Lipschitz slack is below tol
    (only sensible for small assignments).  Same-direction pairs are outside
    the packing statement and are skipped.  Updates assignment.separation.
    """
    curves = sorted(assignment.entries.keys())
    best: Fraction | None = None
    if method == "exact":
        for idx, (di, n) in enumerate(curves):
            xi_a = assignment.directions[di]
            wa = assignment.speeds[n].value
            aa = assignment.entries[(di, n)]
            for (dj, m) in curves[idx + 1:]:
                if dj == di:
                    continue
                d2 = _pair_min_distance_exact(
                    xi_a, wa, aa,
                    assignment.directions[dj], assignment.speeds[m].value,
                    assignment.entries[(dj, m)],
                )
                if best is None or d2 < best:
                    best = d2
        sep = float(best) ** 0.5 if best is not None else float("inf")
    elif method == "sampling":
        sep = float("inf")
        for idx, (di, n) in enumerate(curves):
            xi_a = np.array([float(q) for q in assignment.directions[di]])
            wa = float(assignment.speeds[n].value)
            aa = float(assignment.entries[(di, n)])
            for (dj, m) in curves[idx + 1:]:
                if dj == di:
                    continue
                xi_b = np.array([float(q) for q in assignment.directions[dj]])
                wb = float(assignment.speeds[m].value)
                ab = float(assignment.entries[(dj, m)])
                T = pair_common_period(
                    assignment.speeds[n].value, assignment.directions[di],
                    assignment.speeds[m].value, assignment.directions[dj],
                )
                if T.numerator > denominator_bound:
                    raise PackingError(f"common period overflow: {T}")
                lip = wa + wb
                step = tol / (2 * lip) if lip > 0 else float(T)
                mct = int(min(np.ceil(float(T) / step) + 1, 5e7))
                ts = np.linspace(0.0, float(T), mct)
                za = (wa * ts)[:, None] * xi_a + aa * np.array([-xi_a[1], xi_a[0]])
                zb = (wb * ts)[:, None] * xi_b + ab * np.array([-xi_b[1], xi_b[0]])
                diff = za - zb
                diff -= np.round(diff)
                d = np.sqrt((diff * diff).sum(axis=1)).min()
                slack = lip * (ts[1] - ts[0]) / 2 if mct > 1 else 0.0
                sep = min(sep, float(d) - slack)
    else:
        raise ValueError(f"unknown method {method}")
    assignment.separation = sep
    return sep
