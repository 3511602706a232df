"""One full step of the high-frequency perturbation scheme.

A step takes N density fields, one divergence-free velocity field and N
vector error fields satisfying

    d_t rho_i + div(rho_i u) = -div R_i,   div u = 0,

mollifies them, adds layered travelling-bump perturbations driven by the
error magnitude, localized correctors, and assembles the new (smaller, in
the regime of the estimates) error fields.  Everything is computed time
slice by time slice: all operators are spatial, and time derivatives of the
slow coefficient fields use an internal centered difference on the
mollified state, which is evaluable at arbitrary times.

Two schedule modes exist: "paper" computes the oscillation/concentration
cascade from the closed-form exponent recipe (astronomical values, kept for
documentation and validation), "desk" takes small user-supplied values so a
step actually runs on a grid.  All property checks are mode-independent.

One deliberate extension: the product of a density perturbation with the
full velocity perturbation contains same-direction neighbouring-layer terms
(and, when tubes are too fat for the packing to separate them, cross-family
terms).  Their exact grid values are absorbed into the new error as an
explicit cross term, keeping the update an identity rather than an
approximation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import dim2
from .blocks import BlockSpec, BumpProfiles, theta_dt, theta_eval, w_eval
from .directions import DirectionFamily, OrthoPair, build_families, decompose_batch, ortho_complement
from .grid import (
    GridSpec,
    PeriodicField,
    antidivergence_product,
    continuity_residual,
    derivative,
    divergence,
    grad_inv_laplacian,
    gradient,
    lp_norm,
    mollify,
    norms,
    time_derivative,
)
from .profiles import (
    bump,
    partition_cutoff,
    partition_cutoff_deriv,
    plateau,
    plateau_cutoff,
    smooth_step,
)


class PropertyViolation(RuntimeError):
    def __init__(self, name: str, detail: str):
        self.property_name = name
        super().__init__(f"iteration property '{name}' violated: {detail}")


@dataclass(frozen=True)
class CutoffPair:
    """The layer partition chi (translates sum to one) and its plateau hull."""

    def chi(self, tau):
        return partition_cutoff(tau)

    def chi_deriv(self, tau):
        return partition_cutoff_deriv(tau)

    def chibar(self, tau):
        return plateau_cutoff(tau)


@dataclass(frozen=True)
class ParameterSchedule:
    """Oscillation/concentration cascade parameters.

    paper mode: gamma, alpha, b, beta derived from (d, p, r) by the closed
    formulas; lambda_q = a^(b^q) is astronomically large and the schedule is
    not meant to be run on a grid.  desk mode: the user supplies small
    (a, b, alpha, beta, gamma) directly, plus optionally an explicit kappa
    per stage; lambda stays a monotone sequence of integers so the exact
    grid dilation remains available.
    """

    mode: str
    d: int = 2
    p: float = 2.0
    r: float = 1.1
    a: float = 2.0
    b: float = 2.0
    alpha: float = 4.0
    beta: float = 0.5
    gamma: float = 1.0
    kappa_override: tuple = ()
    cap_exponent_base: int = 16  # dyadic cap for the d=2 speed approximations

    @staticmethod
    def paper(d: int, p: float, r: float, a: float = None) -> "ParameterSchedule":
        pd = p / (p - 1.0)
        if 1.0 / p + 1.0 / r <= 1.0 + 1.0 / d:
            raise ValueError("paper schedule requires 1/p + 1/r > 1 + 1/d")
        gamma = (1.0 + 1.0 / p) / min(d / p, d / pd, -1.0 - d * (1.0 / pd - 1.0 / r))
        alpha = 4.0 + gamma * (d + 1)
        b = max(p, pd) * (3.0 * (1.0 + alpha) * (d + 2) + 2.0)
        beta = 1.0 / (2.0 * b * (b + 1.0))
        return ParameterSchedule(
            mode="paper", d=d, p=p, r=r, a=(a if a is not None else 10.0),
            b=b, alpha=alpha, beta=beta, gamma=gamma,
        )

    @staticmethod
    def desk(d: int = 2, p: float = 2.0, r: float = 1.1, a: float = 2.0,
             b: float = 2.0, alpha: float = 4.0, beta: float = 0.5,
             gamma: float = 1.0, kappa_override: tuple = (),
             cap: int = 16) -> "ParameterSchedule":
        if a <= 1 or b <= 1:
            raise ValueError("desk schedule needs a > 1, b > 1 (monotone lambda)")
        return ParameterSchedule(
            mode="desk", d=d, p=p, r=r, a=a, b=b, alpha=alpha, beta=beta,
            gamma=gamma, kappa_override=tuple(kappa_override),
            cap_exponent_base=cap,
        )

    @property
    def p_dual(self) -> float:
        return self.p / (self.p - 1.0)

    def lam(self, q: int) -> float:
        return self.a ** (self.b**q)

    def lam_int(self, q: int) -> int:
        lam = self.lam(q)
        lam_i = int(round(lam))
        if abs(lam - lam_i) > 1e-9 or lam_i < 1:
            raise ValueError(f"lambda_{q} = {lam} is not a positive integer")
        return lam_i

    def delta(self, q: int) -> float:
        return self.lam(q) ** (-2.0 * self.beta)

    def ell(self, q: int) -> float:
        return self.lam(q) ** (-1.0 - self.alpha)

    def mu(self, q: int) -> float:
        return self.lam(q) ** self.gamma

    def kappa(self, q: int) -> float:
        if self.kappa_override:
            return self.kappa_override[min(q, len(self.kappa_override) - 1)]
        return 40.0 * self.p_dual / self.delta(q + 2)


@dataclass
class RegionSet:
    """a-open localization data: level sets A_i with inner balls B_i."""

    a: int  # the dilation lambda_0
    N: int
    masks: list  # bool arrays over the spatial grid, one per i
    ball_centers: list  # per i: list of centers (all lattice copies)
    ball_radius: float
    support_masks: list  # bool arrays: supp phi_i(lambda_0 x) on the grid


@dataclass
class IterationState:
    q: int
    N: int
    rho: list  # N scalar PeriodicFields
    u: PeriodicField  # vector
    err: list  # N vector PeriodicFields
    schedule: ParameterSchedule
    regions: RegionSet
    localizers: list  # N spatial arrays g_i with unit integral, supported in B_i
    families: list  # 2N direction families, [2i], [2i+1] serving density i
    freeze_head: float = 0.4  # state is frozen (rho=1, R=0, u=0) on [0, this]
    freeze_tail: float = 0.6  # state is settled (R=0, u=0) on [this, 1]
    meta: dict = field(default_factory=dict)

    @property
    def grid(self) -> GridSpec:
        return self.u.grid


def _plateau_bump(r):
    """Smooth bump that is 1 on |r|<=2/3 and 0 on |r|>=1."""
    return smooth_step(3.0 * (1.0 - np.abs(r)))


def _grad_dot_const(scalar: np.ndarray, vec: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Spectral gradient of a scalar slice dotted with a constant vector."""
    ks = grid.wavenumbers()
    hat = np.fft.fftn(scalar)
    acc = np.zeros_like(hat)
    for ax in range(grid.dim):
        acc += 1j * ks[ax] * hat * vec[ax]
    return np.real(np.fft.ifftn(acc))


def make_seed_profiles(N: int, grid: GridSpec):
    """Unit-mass plateau bumps with mutually separated supports.

    Centers sit on a row; support radius 3/(8N) leaves gaps of exactly
    1/(4N) between neighbouring supports and the plateau {phi_i > 1}
    contains a ball of radius 1/(4N).
    """
    d = grid.dim
    r_supp = 3.0 / (8.0 * N)
    coords = grid.spatial_meshgrid()
    profiles = []
    centers = []
    for i in range(N):
        ctr = np.full(d, 0.5)
        ctr[0] = (i + 0.5) / N
        disp = [c - ctr[ax] for ax, c in enumerate(coords)]
        disp = [dd - np.round(dd) for dd in disp]
        rr = np.sqrt(sum(dd * dd for dd in disp)) / r_supp
        raw = _plateau_bump(rr)
        mass = raw.mean()
        profiles.append(raw / mass)
        centers.append(ctr)
    return profiles, centers, r_supp


def _dilate_grid_field(arr: np.ndarray, lam: int) -> np.ndarray:
    """phi(x) -> phi(lam x) by exact index striding (lam divides n)."""
    n = arr.shape[0]
    if n % lam:
        raise ValueError(f"lambda_0={lam} must divide n={n}")
    idx = (np.arange(n) * lam) % n
    out = arr
    for ax in range(arr.ndim):
        out = np.take(out, idx, axis=ax)
    return out


def time_ramp(t):
    """Smooth 0->1 ramp supported on [2/5, 3/5] with slope below 20."""
    return smooth_step((np.asarray(t) - 0.4) / 0.2)


def time_ramp_deriv(t):
    from .profiles import smooth_step_deriv

    return smooth_step_deriv((np.asarray(t) - 0.4) / 0.2) / 0.2


def init_state(N: int, schedule: ParameterSchedule, grid: GridSpec,
               residual_report: bool = True) -> IterationState:
    """Stage-0 triples: densities ramp from 1 to dilated seed bumps."""
    lam0 = schedule.lam_int(0)
    if grid.n % lam0:
        raise ValueError(f"lambda_0={lam0} must divide n={grid.n}")
    profiles, centers, r_supp = make_seed_profiles(N, grid)
    d = grid.dim
    times = grid.times
    chi = time_ramp(times)
    dchi = time_ramp_deriv(times)

    rho, err = [], []
    masks, supp_masks, ball_centers = [], [], []
    localizers = []
    r_ball = 1.0 / (4.0 * lam0 * N)
    coords = grid.spatial_meshgrid()
    for i in range(N):
        phi_l = _dilate_grid_field(profiles[i], lam0)
        shape = (1, grid.nt) + (grid.n,) * d
        arr = np.empty(shape)
        for j in range(grid.nt):
            arr[0, j] = (1.0 - chi[j]) + chi[j] * phi_l
        rho.append(PeriodicField(grid, arr))

        base = grad_inv_laplacian(
            PeriodicField(GridSpec(d, grid.n, 2), np.stack([phi_l - 1.0, phi_l - 1.0])[None])
        ).samples[:, 0]
        rarr = np.empty((d, grid.nt) + (grid.n,) * d)
        for j in range(grid.nt):
            rarr[:, j] = -dchi[j] * base
        err.append(PeriodicField(grid, rarr))

        masks.append(phi_l > 1.0)
        supp_masks.append(phi_l > 0.0)
        ctrs = []
        for k in np.ndindex(*([lam0] * d)):
            ctrs.append((np.array(centers[i]) + np.array(k)) / lam0)
        ball_centers.append(ctrs)

        # localizer: unit-mass bump inside the primary inner ball
        disp = [c - ctrs[0][ax] for ax, c in enumerate(coords)]
        disp = [dd - np.round(dd) for dd in disp]
        rr = np.sqrt(sum(dd * dd for dd in disp)) / (0.9 * r_ball)
        g = bump(rr)
        g /= g.mean()
        localizers.append(g)

    u0 = PeriodicField.zeros(grid, components=d)
    regions = RegionSet(a=lam0, N=N, masks=masks, ball_centers=ball_centers,
                        ball_radius=r_ball, support_masks=supp_masks)
    fams = build_families(d, 2 * N)
    state = IterationState(
        q=0, N=N, rho=rho, u=u0, err=err, schedule=schedule, regions=regions,
        localizers=localizers, families=fams,
    )
    if residual_report:
        resid = max(
            continuity_residual(rho[i], u0, err[i], t)
            for i in range(N) for t in range(0, grid.nt, max(1, grid.nt // 8))
        )
        state.meta["init_residual"] = resid
    return state


# ---------------------------------------------------------------------------
# mollification


@dataclass
class MollifiedState:
    """Convolved stage fields plus the commutator errors, time-evaluable."""

    base: IterationState
    ell: float
    rho_l: list  # N scalar PeriodicFields
    u_l: PeriodicField
    err_l: list  # N vector PeriodicFields
    err_space: list  # N vector fields, spatially mollified only
    commutators: list  # N vector PeriodicFields: (rho u)_l - rho_l u_l
    warnings: tuple = ()

    def err_at(self, i: int, t: float) -> np.ndarray:
        """Mollified error field of density i at an arbitrary time.

        The time taps of the mollifier are applied to the spatially
        mollified samples with linear interpolation between slices, so grid
        times reproduce the stored err_l slices exactly.
        """
        return _mollified_time_eval(self.err_space[i].samples, self.base.grid, self.ell, t)


def _mollifier_time_taps(ell: float, dt: float, max_taps: int):
    from .grid import _mollifier_taps

    return _mollifier_taps(ell, dt, max_taps)


def _lerp_time(samples: np.ndarray, grid: GridSpec, t: float) -> np.ndarray:
    tt = min(max(t, 0.0), 1.0) * (grid.nt - 1)
    j0 = int(np.floor(tt))
    j1 = min(j0 + 1, grid.nt - 1)
    w = tt - j0
    return (1.0 - w) * samples[:, j0] + w * samples[:, j1]


def _mollified_time_eval(samples: np.ndarray, grid: GridSpec, ell: float, t: float) -> np.ndarray:
    """Apply the mollifier's time taps at an arbitrary time with linear
    interpolation between stored slices and edge replication."""
    taps, _ = _mollifier_time_taps(ell, grid.dt, grid.nt - 1)
    m = len(taps) // 2
    out = None
    for j, w in enumerate(taps):
        off = (j - m) * grid.dt
        sl = _lerp_time(samples, grid, t - off)
        out = w * sl if out is None else out + w * sl
    return out


def _spatial_mollify_samples(f: PeriodicField, ell: float) -> PeriodicField:
    """Space-only part of the mollifier (used so time evaluation stays exact)."""
    from .grid import _fftn, _ifftn, _mollifier_taps

    grid = f.grid
    sw, _ = _mollifier_taps(ell, grid.dx, grid.n // 2 - 1)
    kern = np.zeros(grid.n)
    m = len(sw) // 2
    for j, w in enumerate(sw):
        kern[(j - m) % grid.n] += w
    kern_hat = np.fft.fft(kern)
    hat = _fftn(f.samples, grid.dim)
    for ax in range(grid.dim):
        shape = [1] * grid.dim
        shape[ax] = grid.n
        hat = hat * kern_hat.reshape(shape)
    return PeriodicField(grid, _ifftn(hat, grid.dim))


def mollify_state(state: IterationState, ell: float | None = None) -> MollifiedState:
    """Convolve the triple and account the product commutator.

    The returned bundle solves the defect system with errors
    err_l + commutator to the same fidelity as the input state.
    """
    sched = state.schedule
    if ell is None:
        ell = sched.ell(state.q)
    grid = state.grid
    warnings: list = []

    def moll(f: PeriodicField) -> PeriodicField:
        out = mollify(f, ell)
        warnings.extend(out.warnings)
        return out

    rho_l = [moll(r) for r in state.rho]
    u_l = moll(state.u)
    err_l = [moll(e) for e in state.err]
    err_space = [_spatial_mollify_samples(e, ell) for e in state.err]
    commutators = []
    for i in range(state.N):
        prod = PeriodicField(grid, state.rho[i].samples * state.u.samples)
        prod_l = moll(prod)
        comm = prod_l.samples - rho_l[i].samples * u_l.samples
        commutators.append(PeriodicField(grid, comm))
    ms = MollifiedState(
        base=state, ell=ell, rho_l=rho_l, u_l=u_l, err_l=err_l,
        err_space=err_space, commutators=commutators,
        warnings=tuple(set(warnings)),
    )
    return ms


# ---------------------------------------------------------------------------
# the step computer


REG_FLOOR = 1e-12  # relative scale of the |R| regularization near its zeros
LAYER_MIN = 12


@dataclass
class StepReport:
    q: int
    kappa: float
    lam: int
    mu: float
    ell: float
    layer_window: tuple  # (min active n, max active n) over the whole step
    empty_window: bool
    err_l1_before: list
    err_l1_after: list
    perturbation_budget: float  # property (a) left-hand side
    positivity_off_region: list  # min of rho_{q+1,i} off A_i
    positivity_on_region: list  # min drop of rho_{q+1,i} on A_i
    freeze_verified_until: float  # property (c)
    tail_settled_from: float  # property (d) time
    support_overlap_mass: float  # property (d) cross-density overlap at t=1
    residual_max: float
    residual_tol: float
    transport_tail: float  # measured spectral tail of the diagonal product
    activation_tail: float  # measured time-grid defect of the layer cutoffs
    mollified_residual: float  # discrete residual of the mollified triple
    product_identity_dev: float  # max |theta_i (sum_k w_k - w_i)| over slices
    cross_term_l1: float
    div_u_rel: float
    commutator_l1: float

    def rows(self) -> list:
        return [
            ("a_perturbation_budget", self.perturbation_budget),
            ("b_positivity_off_region", min(self.positivity_off_region)),
            ("b_positivity_on_region_drop", min(self.positivity_on_region)),
            ("c_freeze_verified_until", self.freeze_verified_until),
            ("d_support_overlap_mass", self.support_overlap_mass),
            ("residual_max", self.residual_max),
            ("residual_tol", self.residual_tol),
            ("err_ratio", max(
                a / b if b > 0 else float("inf")
                for a, b in zip(self.err_l1_after, self.err_l1_before))),
            ("product_identity_dev", self.product_identity_dev),
            ("div_u_rel", self.div_u_rel),
        ]

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items()}
        return d


class StepComputer:
    """Shared machinery of one perturbation step at fixed stage q."""

    def __init__(self, state: IterationState, kappa: float | None = None,
                 mu: float | None = None, rho0: float = 0.2,
                 fd_dt: float = 1e-5, ell: float | None = None,
                 layer_cap: int = 64):
        self.state = state
        self.sched = state.schedule
        self.grid = state.grid
        self.d = self.grid.dim
        self.p = self.sched.p
        self.lam = self.sched.lam_int(state.q + 1)
        if self.grid.n % self.lam:
            raise ValueError(f"lambda_{state.q+1}={self.lam} must divide n={self.grid.n}")
        self.mu = mu if mu is not None else self.sched.mu(state.q + 1)
        self.profiles = BumpProfiles(dim=self.d, rho0=rho0)
        self.cut = CutoffPair()
        self.fd_dt = fd_dt
        self.mstate = mollify_state(state, ell=ell)
        self.kappa = kappa if kappa is not None else self.sched.kappa(state.q)
        self.layer_cap = layer_cap

        # global layer window over all densities and times
        rmax = max(float(np.sqrt((e.samples**2).sum(axis=0)).max())
                   for e in self.mstate.err_l)
        self.reg = REG_FLOOR * max(rmax, 1.0)
        nmax = int(np.floor(self.kappa * rmax + 0.8))
        self.n_min = LAYER_MIN
        self.n_max = min(nmax, self.n_min + layer_cap - 1)
        self.empty_window = self.n_max < self.n_min
        if nmax > self.n_max and not self.empty_window:
            self.truncated_window = True
        else:
            self.truncated_window = False

        self._ortho: dict = {}
        self._build_speeds_and_offsets()
        coords = self.grid.spatial_meshgrid()
        self.pts = np.stack(coords, axis=-1)
        self.lam_pts = (self.lam * self.pts) % 1.0

    # -- block bookkeeping ---------------------------------------------------

    def _xi_pair(self, xi) -> OrthoPair:
        if xi not in self._ortho:
            self._ortho[xi] = ortho_complement(xi, self.d)
        return self._ortho[xi]

    def _build_speeds_and_offsets(self):
        self.sigma_of_n: dict = {}
        self.speed_override: dict = {}
        self.offsets: dict = {}
        if self.empty_window:
            self.assignment = None
            return
        ns = list(range(self.n_min, self.n_max + 1))
        if self.d == 2:
            cap = self.sched.cap_exponent_base
            pd = self.sched.p_dual
            targets = [min((n / self.kappa) ** (1.0 / pd), float(cap)) for n in ns]
            speeds = dim2.dyadic_speed_approx(targets, cap)
            fams = self.state.families
            self.assignment = dim2.choose_offsets(fams, speeds, cap=cap)
            dir_index = {d: k for k, d in enumerate(self.assignment.directions)}
            mu_exp = self.d / pd
            mu_pow = self.mu**mu_exp
            rational_speed = (
                abs(mu_exp - round(mu_exp)) < 1e-12
                and abs(self.mu - round(self.mu)) < 1e-12
            )
            for j, n in enumerate(ns):
                vt = speeds[j].value  # dyadic approximation of (n/kappa)^{1/p'}
                self.sigma_of_n[n] = float(vt) ** pd if vt > 0 else (n / self.kappa)
                if vt > 0 and rational_speed:
                    ov = Fraction(round(self.mu)) ** round(mu_exp) * vt
                else:
                    ov = None
                for fam in fams:
                    for xi in fam.directions:
                        pair = self._xi_pair(xi)
                        a = self.assignment.entries[(dir_index[xi], j)]
                        perp = pair.xi_perp_float
                        self.offsets[(xi, n)] = float(a) * perp
                        if ov is not None:
                            self.speed_override[(xi, n)] = ov
        else:
            from .blocks import assign_offsets_d3

            for n in ns:
                self.sigma_of_n[n] = n / self.kappa
            base_specs = []
            seen = []
            for fam in self.state.families:
                for xi in fam.directions:
                    pair = self._xi_pair(xi)
                    base_specs.append(BlockSpec(
                        xi=pair, mu=self.mu, sigma=1.0, p=self.p,
                        profiles=self.profiles))
                    seen.append(xi)
            assigned = assign_offsets_d3(base_specs)
            for xi, spec in zip(seen, assigned):
                for n in ns:
                    self.offsets[(xi, n)] = np.asarray(spec.offset)
            self.assignment = None

    def block_spec(self, xi, n: int) -> BlockSpec:
        pair = self._xi_pair(xi)
        sigma = self.sigma_of_n[n]
        override = None
        if (xi, n) in self.speed_override:
            override = self.speed_override[(xi, n)]
        return BlockSpec(
            xi=pair, mu=self.mu, sigma=sigma, p=self.p,
            offset=tuple(self.offsets[(xi, n)]),
            profiles=self.profiles, speed_override=override, mu0=1.0,
        )

    def family_for(self, i: int, n: int) -> DirectionFamily:
        parity = 0 if n % 2 == 1 else 1  # odd layers use the first family
        return self.state.families[2 * i + parity]

    # -- slow fields ----------------------------------------------------------

    def _slow_data(self, i: int, t: float, err_slice: np.ndarray | None = None):
        """Regularized magnitude and unit direction of the mollified error."""
        if err_slice is None:
            err_slice = self.mstate.err_at(i, t)
        rm = np.sqrt((err_slice**2).sum(axis=0) + self.reg**2)
        rhat = err_slice / rm[None]
        return rm, rhat

    def _layer_coeffs(self, i: int, n: int, rm, rhat):
        """chi_n, chibar_n and the direction coefficients on the grid.

        Coefficients are only evaluated where some cutoff is active (there
        the regularized direction is a unit vector to machine precision);
        they vanish with the cutoffs elsewhere.
        """
        tau = self.kappa * rm - n
        chi_n = self.cut.chi(tau)
        chb_n = self.cut.chibar(tau)
        fam = self.family_for(i, n)
        mask = chb_n > 0.0
        coeffs = np.zeros((len(fam.directions),) + rm.shape)
        if mask.any():
            pts = np.moveaxis(rhat, 0, -1)[mask]
            coeffs[:, mask] = decompose_batch(fam, pts)
        return chi_n, chb_n, fam, coeffs

    # -- slice assembly --------------------------------------------------------

    def slice_fields(self, j: int, want_errors: bool = True) -> dict:
        """All new fields at time index j, plus error components."""
        t = self.grid.times[j]
        N = self.state.N
        d = self.d
        shape = (self.grid.n,) * d
        out = {
            "theta_p": [np.zeros(shape) for _ in range(N)],
            "theta_c": [np.zeros(shape) for _ in range(N)],
            "w_p": [np.zeros((d,) + shape) for _ in range(N)],
            "w_c": [np.zeros((d,) + shape) for _ in range(N)],
            "diag": [np.zeros((d,) + shape) for _ in range(N)],
            "r_quadr": [np.zeros((d,) + shape) for _ in range(N)],
            "r_time": [np.zeros((d,) + shape) for _ in range(N)],
            "r_tilde": [np.zeros((d,) + shape) for _ in range(N)],
            "dtheta2": [np.zeros(shape) for _ in range(N)],
            "m": [0.0 for _ in range(N)],
            # spatial-tail accounting: modeled divergence pieces of the
            # diagonal product and of the antidivergence outputs, to compare
            # against their spectral divergences
            "a_grad": [np.zeros(shape) for _ in range(N)],
            "a_dt": [np.zeros(shape) for _ in range(N)],
            "div_quadr_model": [np.zeros(shape) for _ in range(N)],
            "div_wc_model": [np.zeros(shape) for _ in range(N)],
        }
        if self.empty_window:
            return out
        dt = self.fd_dt
        for i in range(N):
            err_sl = self.mstate.err_l[i].samples[:, j]
            rm, rhat = self._slow_data(i, t, err_slice=err_sl)
            kmax = float(self.kappa * rm.max())
            if kmax < self.n_min - 0.8:
                continue
            rm_p, rhat_p = self._slow_data(i, t + dt)
            rm_m, rhat_m = self._slow_data(i, t - dt)
            for n in range(self.n_min, self.n_max + 1):
                if self.kappa * rm.max() < n - 0.8 and \
                   self.kappa * rm_p.max() < n - 0.8 and \
                   self.kappa * rm_m.max() < n - 0.8:
                    continue
                chi_n, chb_n, fam, coeffs = self._layer_coeffs(i, n, rm, rhat)
                chi_p, _, _, coeffs_p = self._layer_coeffs(i, n, rm_p, rhat_p)
                chi_m, _, _, coeffs_m = self._layer_coeffs(i, n, rm_m, rhat_m)
                sigma = self.sigma_of_n[n]
                out["r_tilde"][i] += (chi_n * sigma) * rhat
                if want_errors:
                    gchb = gradient(PeriodicField(
                        GridSpec(d, self.grid.n, 2),
                        np.stack([chb_n, chb_n])[None])).samples[:, 0]
                for k, xi in enumerate(fam.directions):
                    spec = self.block_spec(xi, n)
                    th = theta_eval(spec, self.lam * t, self.lam_pts)
                    wv = np.moveaxis(w_eval(spec, self.lam * t, self.lam_pts), -1, 0)
                    a_k = coeffs[k]
                    slow = chi_n * a_k
                    out["theta_p"][i] += slow * th
                    out["w_p"][i] += chb_n[None] * wv
                    thw = th[None] * wv
                    out["diag"][i] += slow[None] * thw
                    if want_errors:
                        dslow = (chi_p * coeffs_p[k] - chi_m * coeffs_m[k]) / (2 * dt)
                        out["dtheta2"][i] += dslow * th
                        # oscillation-adapted antidivergence pieces; the grid
                        # means of the sampled fast fields ride along exactly
                        # as slow-times-constant terms
                        xi_f = spec.xi.xi_float
                        target = thw - sigma * xi_f.reshape((d,) + (1,) * d)
                        tbar = target.mean(axis=tuple(range(1, d + 1)))
                        t0 = target - tbar.reshape((d,) + (1,) * d)
                        slow_f = PeriodicField(
                            GridSpec(d, self.grid.n, 2),
                            np.stack([slow, slow])[None])
                        grad_slow = gradient(slow_f).samples[:, 0]
                        out["r_quadr"][i] += self._antidiv_sum(grad_slow, t0)
                        out["r_quadr"][i] += slow[None] * tbar.reshape((d,) + (1,) * d)
                        prod0 = (grad_slow * t0).sum(axis=0)
                        out["m"][i] += float(prod0.mean())
                        out["div_quadr_model"][i] += prod0 - prod0.mean()
                        out["div_quadr_model"][i] += _grad_dot_const(slow, tbar, self.grid)
                        wbar = wv.mean(axis=tuple(range(1, d + 1)))
                        w0 = wv - wbar.reshape((d,) + (1,) * d)
                        out["w_c"][i] -= self._antidiv_sum(gchb, w0)
                        out["w_c"][i] -= chb_n[None] * wbar.reshape((d,) + (1,) * d)
                        prodw = (gchb * w0).sum(axis=0)
                        out["div_wc_model"][i] -= prodw - prodw.mean()
                        out["div_wc_model"][i] -= _grad_dot_const(chb_n, wbar, self.grid)
                        out["a_grad"][i] += (grad_slow * thw).sum(axis=0)
                        out["a_dt"][i] += slow * (self.lam * theta_dt(
                            spec, self.lam * t, self.lam_pts))
        return out

    def _antidiv_sum(self, slow_vec: np.ndarray, fast_vec: np.ndarray) -> np.ndarray:
        """Sum over components of the product antidivergence (one time slice).

        fast_vec must be demeaned per component by the caller.
        """
        d = self.d
        g2 = GridSpec(d, self.grid.n, 2)
        acc = np.zeros((d,) + (self.grid.n,) * d)
        for c in range(d):
            f = PeriodicField(g2, np.stack([slow_vec[c]] * 2)[None])
            g = PeriodicField(g2, np.stack([fast_vec[c]] * 2)[None])
            acc += antidivergence_product(f, g, mean_tol=1.0).samples[:, 0]
        return acc

    # -- full step -------------------------------------------------------------

    def run(self, check_positivity: bool = True) -> tuple:
        state = self.state
        grid = self.grid
        N = state.N
        d = self.d
        nt = grid.nt
        shape = (grid.n,) * d

        rho_new = [np.empty((1, nt) + shape) for _ in range(N)]
        err_new = [np.empty((d, nt) + shape) for _ in range(N)]
        u_new = np.empty((d, nt) + shape)
        theta_hist = [np.empty((nt,) + shape) for _ in range(N)]
        dtheta_model = [np.empty((nt,) + shape) for _ in range(N)]
        prod_dev = 0.0
        cross_l1 = 0.0
        tail_max = 0.0
        moll_resid = 0.0
        layer_lo, layer_hi = None, None
        from .grid import divergence_slice

        for j in range(nt):
            sf = self.slice_fields(j)
            w_tot = sum(sf["w_p"]) + sum(sf["w_c"])
            u_l = self.mstate.u_l.samples[:, j]
            u_new[:, j] = u_l + w_tot
            w_p_tot = sum(sf["w_p"])
            for i in range(N):
                rho_l = self.mstate.rho_l[i].samples[0, j]
                comm = self.mstate.commutators[i].samples[:, j]
                err_l = self.mstate.err_l[i].samples[:, j]
                theta_p = sf["theta_p"][i]
                mean_tp = theta_p.mean()
                theta_c = -self.state.localizers[i] * mean_tp
                sf["theta_c"][i] = theta_c
                rho_new[i][0, j] = rho_l + theta_p + theta_c

                # cross term: actual principal product minus its diagonal
                cross = theta_p[None] * w_p_tot - sf["diag"][i]
                dev = float(np.abs(theta_p[None] * (w_p_tot - sf["w_p"][i])).max())
                prod_dev = max(prod_dev, dev)
                cross_l1 = max(cross_l1, float(np.abs(cross).mean()))

                # spectral tails that remain in the discrete residual: the
                # diagonal-product transport defect and the antidivergence
                # product defect (the velocity corrector's own defect only
                # affects div u, not the density residual)
                d1 = divergence_slice(grid, sf["diag"][i]) - sf["a_grad"][i] \
                    + sf["a_dt"][i]
                d_quadr = divergence_slice(grid, sf["r_quadr"][i]) - sf["div_quadr_model"][i]
                tail_here = float(np.abs(d1).mean()) + float(np.abs(d_quadr).mean())
                tail_max = max(tail_max, tail_here)

                # defect of the mollified triple itself at this slice
                if 0 < j < nt - 1:
                    fd_rho_l = (self.mstate.rho_l[i].samples[0, j + 1]
                                - self.mstate.rho_l[i].samples[0, j - 1]) / (2 * grid.dt)
                    e_moll = fd_rho_l + divergence_slice(
                        grid, rho_l[None] * u_l) + divergence_slice(
                        grid, err_l + comm)
                    moll_resid = max(moll_resid, float(np.abs(e_moll).mean()))
                theta_hist[i][j] = theta_p
                dtheta_model[i][j] = sf["dtheta2"][i] + sf["a_dt"][i]

                # time corrector: d/dt of the zero-average enforcement
                int_rate = sf["m"][i] + float(sf["dtheta2"][i].mean())
                dtheta_c = -self.state.localizers[i] * int_rate
                bracket = sf["dtheta2"][i] + dtheta_c + sf["m"][i]
                bracket -= bracket.mean()
                g2 = GridSpec(d, grid.n, 2)
                r_time = grad_inv_laplacian(
                    PeriodicField(g2, np.stack([bracket] * 2)[None]),
                    mean_tol=1.0).samples[:, 0]

                r_space = (u_l + w_tot) * theta_c[None]
                total = (
                    sf["r_quadr"][i]
                    + (sf["r_tilde"][i] - err_l)
                    + r_time
                    + r_space
                    + theta_p[None] * u_l
                    + rho_l[None] * w_tot
                    + theta_p[None] * sum(sf["w_c"])
                    + comm
                    + cross
                )
                err_new[i][:, j] = -total
            if not self.empty_window:
                layer_lo = self.n_min if layer_lo is None else layer_lo
                layer_hi = self.n_max

        new_state = IterationState(
            q=state.q + 1, N=N,
            rho=[PeriodicField(grid, r) for r in rho_new],
            u=PeriodicField(grid, u_new),
            err=[PeriodicField(grid, e) for e in err_new],
            schedule=state.schedule, regions=state.regions,
            localizers=state.localizers, families=state.families,
            freeze_head=state.freeze_head, freeze_tail=state.freeze_tail,
            meta=dict(state.meta),
        )
        # layer-activation tail: centered differences of the density
        # perturbation against its modeled time derivative
        act_tail = 0.0
        if nt >= 3:
            for i in range(N):
                fd = (theta_hist[i][2:] - theta_hist[i][:-2]) / (2 * grid.dt)
                gap = np.abs(fd - dtheta_model[i][1:-1])
                act_tail = max(act_tail, float(gap.mean(axis=tuple(range(1, 1 + d)))
                                               .max()))
        report = self._report(new_state, prod_dev, cross_l1, tail_max, act_tail,
                              moll_resid, (layer_lo, layer_hi), check_positivity)
        return new_state, report

    def _report(self, new_state: IterationState, prod_dev, cross_l1, tail_max,
                act_tail, moll_resid, window, check_positivity) -> StepReport:
        state = self.state
        grid = self.grid
        N = state.N
        sched = state.schedule
        p = sched.p
        r = sched.r
        pd = sched.p_dual

        err_before = [
            max(lp_norm(state.err[i], 1.0, t) for t in range(grid.nt))
            for i in range(N)
        ]
        err_after = [
            max(lp_norm(new_state.err[i], 1.0, t) for t in range(grid.nt))
            for i in range(N)
        ]

        # property (a): perturbation budget
        budget = 0.0
        for t in range(grid.nt):
            du = PeriodicField(grid, new_state.u.samples - state.u.samples)
            term = lp_norm(du, pd, t) ** pd
            nr = norms(du, [pd], t, r=r)
            term += nr.w1r**r
            for i in range(N):
                drho = PeriodicField(grid, new_state.rho[i].samples - state.rho[i].samples)
                term += lp_norm(drho, p, t) ** p
            budget = max(budget, term)

        # property (b): positivity
        pos_off, pos_on = [], []
        for i in range(N):
            off = ~state.regions.masks[i]
            vals = new_state.rho[i].samples[0][:, off]
            pos_off.append(float(vals.min()) if vals.size else 0.0)
            on = state.regions.masks[i]
            before = state.rho[i].samples[0][:, on]
            after = new_state.rho[i].samples[0][:, on]
            pos_on.append(float((after - before).min()) if after.size else 0.0)
        if check_positivity:
            for i, v in enumerate(pos_off):
                if v < -1e-8:
                    raise PropertyViolation(
                        "positivity", f"density {i} reaches {v:.3e} off its region")

        # property (c): freezing near t=0
        slack = self.mstate.ell + 2 * grid.dt
        t_freeze = state.freeze_head - slack
        freeze_ok_until = 0.0
        for j, t in enumerate(grid.times):
            if t > t_freeze:
                break
            ok = all(
                np.allclose(new_state.rho[i].samples[0, j], 1.0, atol=1e-8)
                and np.abs(new_state.err[i].samples[:, j]).max() < 1e-8
                for i in range(N)
            ) and np.abs(new_state.u.samples[:, j]).max() < 1e-8
            if not ok:
                break
            freeze_ok_until = t

        # property (d): support confinement and overlap at t = 1
        overlap = 0.0
        supports = []
        for i in range(N):
            final = np.abs(new_state.rho[i].samples[0, -1])
            supports.append(final)
        total_mass = sum(float(s.mean()) for s in supports)
        for i in range(N):
            for k in range(i + 1, N):
                overlap += float(np.minimum(supports[i], supports[k]).mean())
        overlap_rel = overlap / total_mass if total_mass > 0 else 0.0

        # residual and its discretization tolerance
        resid = 0.0
        for i in range(N):
            for t in range(grid.nt):
                resid = max(resid, continuity_residual(
                    new_state.rho[i], new_state.u, new_state.err[i], t))
        # discretization tolerance from the three measured defect sources:
        # the mollified triple's own discrete residual, the time-grid defect
        # of the layer cutoffs (twice: once directly, once through the mean
        # driving the density corrector), and the spectral transport tails
        tol = moll_resid + 2.0 * act_tail + tail_max + 1e-12

        dv = divergence(new_state.u)
        uscale = max(float(np.abs(new_state.u.samples).max()), 1e-30)
        div_rel = float(np.abs(dv.samples).max()) / (uscale * self.mu * self.lam /
                                                     self.profiles.rho0)

        comm_l1 = max(
            max(lp_norm(self.mstate.commutators[i], 1.0, t) for t in range(grid.nt))
            for i in range(N)
        )

        return StepReport(
            q=state.q, kappa=self.kappa, lam=self.lam, mu=self.mu,
            ell=self.mstate.ell,
            layer_window=window, empty_window=self.empty_window,
            err_l1_before=err_before, err_l1_after=err_after,
            perturbation_budget=budget,
            positivity_off_region=pos_off, positivity_on_region=pos_on,
            freeze_verified_until=freeze_ok_until,
            tail_settled_from=state.freeze_tail + self.mstate.ell + 2 * grid.dt,
            support_overlap_mass=overlap_rel,
            residual_max=resid, residual_tol=tol, transport_tail=tail_max,
            activation_tail=act_tail, mollified_residual=moll_resid,
            product_identity_dev=prod_dev, cross_term_l1=cross_l1,
            div_u_rel=div_rel, commutator_l1=comm_l1,
        )


def principal_perturbations(computer: StepComputer) -> tuple:
    """Full-grid principal perturbation fields (theta_p per density, w_p)."""
    grid = computer.grid
    N = computer.state.N
    d = computer.d
    th = [np.zeros((1, grid.nt) + (grid.n,) * d) for _ in range(N)]
    wp = [np.zeros((d, grid.nt) + (grid.n,) * d) for _ in range(N)]
    for j in range(grid.nt):
        sf = computer.slice_fields(j, want_errors=False)
        for i in range(N):
            th[i][0, j] = sf["theta_p"][i]
            wp[i][:, j] = sf["w_p"][i]
    return ([PeriodicField(grid, a) for a in th],
            [PeriodicField(grid, a) for a in wp])


def density_corrector(theta_p: PeriodicField, g: np.ndarray) -> PeriodicField:
    """Zero-average enforcement: -g(x) integral of theta_p, per time slice."""
    grid = theta_p.grid
    means = theta_p.samples.mean(axis=theta_p.spatial_axes(), keepdims=True)
    out = -g[(None, None) + (slice(None),) * grid.dim] * means
    return PeriodicField(grid, np.broadcast_to(out, theta_p.samples.shape).copy())


def iterate(state: IterationState, **kw) -> tuple:
    """One full step: mollify, perturb, correct, reassemble the error."""
    comp = StepComputer(state, **kw)
    return comp.run()


def auto_kappa(state: IterationState, peak_layers: int = 40,
               ell: float | None = None) -> float:
    """Layer density so the peak error magnitude activates ~peak_layers layers."""
    ms = mollify_state(state, ell=ell)
    rmax = max(float(np.sqrt((e.samples**2).sum(axis=0)).max()) for e in ms.err_l)
    if rmax <= 0:
        return 1.0
    return (LAYER_MIN + peak_layers) / rmax
