"""Finite families of rational unit directions with smooth nonnegative
decomposition of arbitrary unit vectors.

d=2 families are the eight signed/swapped points of one primitive Pythagorean
triple; overlapping charts are the exactly-orthogonal skip pairs (xi, rot90 xi)
blended by a smooth partition of unity in angle.  d=3 families are 24-point
orbits of an outward-tilted octant triple (a, -s1, -s2)/c under sign flips and
cyclic shifts; charts are the eight octant triples blended by a product
partition of unity, with a build-time certificate that every chart solve stays
nonnegative on the (enlarged) octant it is used on.

All direction coordinates are exact rationals; only the blend weights and the
chart solves use floating point.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import atan2, gcd, isqrt, pi

import numpy as np

from .profiles import smooth_step


class FamilyConstructionError(ValueError):
    pass


@dataclass(frozen=True)
class OrthoPair:
    """A rational unit direction with an exact rational orthogonal complement."""

    xi: tuple
    xi_perp: tuple

    def __post_init__(self):
        d = len(self.xi)
        if sum(q * q for q in self.xi) != 1:
            raise ValueError("xi is not an exact unit vector")
        if sum(q * q for q in self.xi_perp) != 1:
            raise ValueError("xi_perp is not an exact unit vector")
        if sum(a * b for a, b in zip(self.xi, self.xi_perp)) != 0:
            raise ValueError("xi and xi_perp are not exactly orthogonal")

    @property
    def dim(self) -> int:
        return len(self.xi)

    @property
    def xi_float(self) -> np.ndarray:
        return np.array([float(q) for q in self.xi])

    @property
    def xi_perp_float(self) -> np.ndarray:
        return np.array([float(q) for q in self.xi_perp])


def _primitive_pythagorean_triples(count: int) -> list[tuple[int, int, int]]:
    """First `count` primitive triples (a, b, c), a<b, sorted by c then a."""
    triples = []
    m = 2
    while len(triples) < count:
        for n in range(1, m):
            if (m - n) % 2 == 1 and gcd(m, n) == 1:
                a, b, c = m * m - n * n, 2 * m * n, m * m + n * n
                lo, hi = min(a, b), max(a, b)
                triples.append((c, lo, hi))
        m += 1
        if m > 200:
            break
    triples.sort()
    return [(lo, hi, c) for (c, lo, hi) in triples[:count]]


# integer quadruples (a, s1, s2, c) with a^2+s1^2+s2^2 = c^2 and a dominant;
# each yields a certified 24-direction family in d=3.
_D3_BASE_QUADRUPLES = [
    (12, 3, 4, 13),
    (14, 2, 5, 15),
    (18, 1, 6, 19),
    (19, 4, 8, 21),
    (22, 3, 6, 23),
    (24, 8, 9, 27),
]

_D3_EPS = 0.08  # half-width of the octant blend transition


@dataclass(frozen=True)
class DirectionFamily:
    """One decomposition-complete family of rational unit directions."""

    dim: int
    directions: tuple  # tuple of tuples of Fractions
    charts: tuple  # tuples of direction indices (pairs d=2, triples d=3)
    label: str
    # blend data: d=2 -> sorted angles per direction order; d=3 -> (eps, chart sign patterns)
    blend: tuple

    @property
    def dirs_float(self) -> np.ndarray:
        return np.array([[float(q) for q in d] for d in self.directions])

    def direction_set(self) -> frozenset:
        return frozenset(self.directions)


def _family_d2(triple: tuple[int, int, int]) -> DirectionFamily:
    a, b, c = triple
    pts = []
    for (x, y) in [(b, a), (a, b), (-a, b), (-b, a), (-b, -a), (-a, -b), (a, -b), (b, -a)]:
        pts.append((Fraction(x, c), Fraction(y, c)))
    # sorted by angle already by construction above; verify and keep order
    angles = [atan2(float(q[1]), float(q[0])) % (2 * pi) for q in pts]
    order = np.argsort(angles)
    pts = [pts[i] for i in order]
    angles = sorted(angles)
    charts = tuple((j, (j + 2) % 8) for j in range(8))
    for (j, k) in charts:
        dot = pts[j][0] * pts[k][0] + pts[j][1] * pts[k][1]
        if dot != 0:
            raise FamilyConstructionError("skip pair is not exactly orthogonal")
    return DirectionFamily(
        dim=2,
        directions=tuple(pts),
        charts=charts,
        label=f"pyth-{a}-{b}-{c}",
        blend=tuple(angles),
    )


def _d3_family_directions(quad) -> list[tuple]:
    a, s1, s2, c = quad
    base = [
        (Fraction(a, c), Fraction(-s1, c), Fraction(-s2, c)),
        (Fraction(-s2, c), Fraction(a, c), Fraction(-s1, c)),
        (Fraction(-s1, c), Fraction(-s2, c), Fraction(a, c)),
    ]
    dirs = []
    signs = [(sx, sy, sz) for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)]
    for sg in signs:
        for v in base:
            dirs.append(tuple(s * q for s, q in zip(sg, v)))
    # dedupe preserving order (all 24 should be distinct for valid quadruples)
    seen, out = set(), []
    for d in dirs:
        if d not in seen:
            seen.add(d)
            out.append(d)
    return out


def _certify_octant_chart(m_inv: np.ndarray, eps: float, samples: int = 20000) -> float:
    """Min chart coefficient over the enlarged positive octant {R_i >= -eps}.

    Dense low-discrepancy sampling of the unit sphere restricted to the
    region; the returned margin must be > 0 for the family to be usable.
    """
    i = np.arange(samples)
    phi = np.arccos(1 - 2 * (i + 0.5) / samples)
    golden = pi * (3 - np.sqrt(5.0))
    theta = golden * i
    pts = np.stack(
        [np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)], axis=1
    )
    region = pts[(pts >= -eps).all(axis=1)]
    coeff = region @ m_inv.T
    return float(coeff.min())


def _family_d3(quad) -> DirectionFamily:
    a, s1, s2, c = quad
    if a * a + s1 * s1 + s2 * s2 != c * c:
        raise FamilyConstructionError(f"{quad} is not a rational-sphere quadruple")
    dirs = _d3_family_directions(quad)
    if len(dirs) != 24:
        raise FamilyConstructionError(f"{quad} does not generate 24 distinct directions")
    signs = [(sx, sy, sz) for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)]
    # direction index layout: block of 3 per sign pattern, in `signs` order
    charts = tuple(tuple(3 * s + i for i in range(3)) for s in range(8))
    fam = DirectionFamily(
        dim=3,
        directions=tuple(dirs),
        charts=charts,
        label=f"oct-{a}-{s1}-{s2}-{c}",
        blend=(_D3_EPS, tuple(signs)),
    )
    margin = _certify_octant_chart(_d3_chart_inverse(fam), _D3_EPS)
    if margin <= 0.0:
        raise FamilyConstructionError(
            f"octant chart for {quad} loses nonnegativity on the enlarged octant "
            f"(margin {margin:.3e}); a flatter tilt (larger a/c) is required"
        )
    return fam


def _d3_chart_inverse(fam: DirectionFamily) -> np.ndarray:
    """Inverse of the (+++) chart matrix whose columns are the base directions."""
    cols = fam.dirs_float[:3].T  # first sign pattern is (+,+,+)
    return np.linalg.inv(cols)


def build_families(d: int, count: int) -> list[DirectionFamily]:
    """`count` pairwise-disjoint decomposition-complete families."""
    if d not in (2, 3):
        raise ValueError("d must be 2 or 3")
    if count < 1:
        raise ValueError("count must be >= 1")
    fams: list[DirectionFamily] = []
    if d == 2:
        triples = _primitive_pythagorean_triples(count)
        if len(triples) < count:
            raise FamilyConstructionError(
                f"only {len(triples)} primitive triples available below the "
                f"generator bound; cannot build {count} families"
            )
        fams = [_family_d2(t) for t in triples]
    else:
        errors = []
        for quad in _D3_BASE_QUADRUPLES:
            if len(fams) == count:
                break
            try:
                fams.append(_family_d3(quad))
            except FamilyConstructionError as e:
                errors.append(str(e))
        if len(fams) < count:
            raise FamilyConstructionError(
                f"only {len(fams)} certified 24-direction families available "
                f"from the built-in quadruple list (requested {count}); "
                + "; ".join(errors)
            )
    used = set()
    for f in fams:
        ds = f.direction_set()
        if used & ds:
            raise FamilyConstructionError("families share a direction")
        used |= ds
    return fams


def _decompose_batch_d2(fam: DirectionFamily, R: np.ndarray) -> np.ndarray:
    angles = np.array(fam.blend)
    dirs = fam.dirs_float
    theta = np.arctan2(R[:, 1], R[:, 0]) % (2 * pi)
    k = np.searchsorted(angles, theta, side="right") - 1
    k = np.where(k < 0, 7, k)  # wrap: theta below angles[0] sits in the last interval
    gaps = (np.roll(angles, -1) - angles) % (2 * pi)
    # blend parameter on interval I_k, smooth-step ramp from chart k-1 to chart k
    tau = ((theta - angles[k]) % (2 * pi)) / gaps[k]
    r = smooth_step(tau)
    coeffs = np.zeros((len(dirs), len(R)))
    idx = np.arange(len(R))
    for shift, weight in (( -1, 1.0 - r), (0, r)):
        cj = (k + shift) % 8
        a_idx = cj
        b_idx = (cj + 2) % 8
        # exactly orthonormal rational pair: coefficients are plain projections
        A = R[:, 0] * dirs[a_idx, 0] + R[:, 1] * dirs[a_idx, 1]
        B = R[:, 0] * dirs[b_idx, 0] + R[:, 1] * dirs[b_idx, 1]
        np.add.at(coeffs, (a_idx, idx), weight * np.maximum(A, 0.0))
        np.add.at(coeffs, (b_idx, idx), weight * np.maximum(B, 0.0))
    return coeffs


def _decompose_batch_d3(fam: DirectionFamily, R: np.ndarray) -> np.ndarray:
    eps, signs = fam.blend
    m_inv = _d3_chart_inverse(fam)
    # h(tau) smooth step with h(t)+h(-t)=1, support tau > -eps
    def h(tau):
        return smooth_step((tau + eps) / (2 * eps))

    coeffs = np.zeros((len(fam.directions), len(R)))
    for s_idx, sg in enumerate(signs):
        sg_arr = np.array(sg, dtype=float)
        flipped = R * sg_arr
        w = h(flipped[:, 0]) * h(flipped[:, 1]) * h(flipped[:, 2])
        act = w > 0
        if not act.any():
            continue
        c = flipped[act] @ m_inv.T
        c = np.maximum(c, 0.0)  # certificate guarantees >= 0 up to float dust
        for i in range(3):
            coeffs[3 * s_idx + i, act.nonzero()[0]] += w[act] * c[:, i]
    return coeffs


def decompose_batch(fam: DirectionFamily, R: np.ndarray) -> np.ndarray:
    """Coefficients a_xi for rows of R (shape (m, dim)); returns (n_dirs, m).

    Guarantees: coefficients nonnegative, smooth in R, and
    sum_xi a_xi(R) xi = R exactly up to float rounding for unit R.
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    mags = np.linalg.norm(R, axis=1)
    if np.any(np.abs(mags - 1.0) > 1e-6):
        raise ValueError("decompose expects unit vectors (|R| within 1e-6 of 1)")
    R = R / mags[:, None]
    if fam.dim == 2:
        return _decompose_batch_d2(fam, R)
    return _decompose_batch_d3(fam, R)


def decompose(R, fam: DirectionFamily) -> dict:
    """Coefficient map xi -> a_xi(R) for a single unit vector R."""
    c = decompose_batch(fam, np.asarray(R, dtype=float)[None, :])[:, 0]
    return {fam.directions[i]: float(c[i]) for i in range(len(fam.directions))}


def _perp_search_d3(P: tuple[int, int, int], bound: int) -> tuple | None:
    """Smallest integer vector orthogonal to P whose norm is a perfect square root."""
    a, b, c = P
    cands = [(-b, a, 0), (-c, 0, a), (0, -c, b)]
    basis = [v for v in cands if any(v)]
    u, w = basis[0], basis[1]
    best = None
    for k in range(-bound, bound + 1):
        for l in range(-bound, bound + 1):
            q = (k * u[0] + l * w[0], k * u[1] + l * w[1], k * u[2] + l * w[2])
            if not any(q):
                continue
            g = gcd(gcd(abs(q[0]), abs(q[1])), abs(q[2]))
            q = (q[0] // g, q[1] // g, q[2] // g)
            n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2]
            r = isqrt(n2)
            if r * r == n2:
                key = (n2, q)
                if best is None or key < best:
                    best = key
    if best is None:
        return None
    n2, q = best
    r = isqrt(n2)
    return tuple(Fraction(x, r) for x in q)


def ortho_complement(xi, d: int | None = None, denominator_bound: int = 40) -> OrthoPair:
    """Exact rational unit vector orthogonal to the rational unit vector xi."""
    xi = tuple(Fraction(q) for q in xi)
    d = d or len(xi)
    if len(xi) != d:
        raise ValueError("dimension mismatch")
    if sum(q * q for q in xi) != 1:
        raise ValueError("xi must be an exact rational unit vector")
    if d == 2:
        return OrthoPair(xi=xi, xi_perp=(-xi[1], xi[0]))
    den = 1
    for q in xi:
        den = den * q.denominator // gcd(den, q.denominator)
    P = tuple(int(q * den) for q in xi)
    g = gcd(gcd(abs(P[0]), abs(P[1])), abs(P[2]))
    P = tuple(x // g for x in P)
    perp = _perp_search_d3(P, denominator_bound)
    if perp is None:
        raise FamilyConstructionError(
            f"no rational orthogonal complement of {xi} found with lattice "
            f"search bound {denominator_bound}"
        )
    return OrthoPair(xi=xi, xi_perp=perp)
