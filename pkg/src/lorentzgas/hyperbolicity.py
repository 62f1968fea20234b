"""Numeric verification of the hyperbolicity hypotheses.

Cone fields and their invariance, adapted-norm expansion floors, stable
distortion constants, one-step expansion sums with homogeneity cutting,
and curvature propagation of unstable curves.  Every check is a sampled
measurement with the extremal sample recorded; nothing here is a proof.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CurveNotHomogeneous, ValidationFailed
from .classical_map import PhasePoint, homogeneity_index, DEFAULT_K0
from .curve_machinery import (NormParams, StableCurve, pullback_generation,
                              sample_stable_curves, strip_indices)


@dataclass
class ConeField:
    """A slope sector dphi/dr, constant over phase space."""

    kind: str  # "stable" | "unstable"
    slope_lo: float
    slope_hi: float

    def __post_init__(self):
        if not self.slope_lo < self.slope_hi:
            raise ValidationFailed("cone", "need slope_lo < slope_hi")

    @classmethod
    def unstable(cls, metrics, eps1=0.0, c1=0.0, c2=0.0):
        """Unstable cone from config metrics, optionally widened by eps1."""
        lo = metrics.K_min * (1.0 - c1 * eps1)
        hi = (metrics.K_max + 1.0 / metrics.tau_min) * (1.0 + c2 * eps1)
        return cls("unstable", lo, hi)

    @classmethod
    def stable(cls, metrics, eps1=0.0, c1=0.0, c2=0.0):
        u = cls.unstable(metrics, eps1, c1, c2)
        return cls("stable", -u.slope_hi, -u.slope_lo)

    def contains(self, slope, margin=0.0):
        return (self.slope_lo + margin <= slope) & (slope <= self.slope_hi
                                                    - margin)

    def sample_slopes(self, n_interior=3):
        return np.concatenate([[self.slope_lo, self.slope_hi],
                               np.linspace(self.slope_lo, self.slope_hi,
                                           n_interior + 2)[1:-1]])

    def scaled(self, factor):
        """Cone shrunk (factor < 1) or grown about its center."""
        mid = 0.5 * (self.slope_lo + self.slope_hi)
        half = 0.5 * (self.slope_hi - self.slope_lo) * factor
        return ConeField(self.kind, mid - half, mid + half)


@dataclass
class HypothesisReport:
    """Pass/fail verdicts and measured constants for (H1)-(H5)."""

    results: dict = field(default_factory=dict)

    def record(self, name, passed, constants, n_samples, worst=None):
        self.results[name] = {"passed": bool(passed),
                              "constants": constants,
                              "n_samples": int(n_samples),
                              "worst": worst or {}}

    @property
    def all_passed(self):
        return all(v["passed"] for v in self.results.values())

    def to_dict(self):
        return {"all_passed": self.all_passed, "hypotheses": self.results}


def adapted_norm(x, v, config):
    """Norm (K(x) + |V|) / sqrt(1 + V^2) * ||v|| of a tangent vector."""
    v = np.asarray(v, dtype=float)
    K = float(config[x.scatterer].curvature_r(x.r))
    nrm = float(np.hypot(v[0], v[1]))
    if nrm == 0.0:
        return 0.0
    if v[0] == 0.0:
        return nrm  # vertical: factor (K + |V|)/sqrt(1+V^2) -> 1
    V = v[1] / v[0]
    return (K + abs(V)) / math.sqrt(1.0 + V * V) * nrm


# ----------------------------------------------------------------------
# sampling helpers

def _sample_points(config, n, seed, margin=1e-3):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(config), n)
    Ls = np.array([s.L for s in config.scatterers])
    r = rng.uniform(0.0, 1.0, n) * Ls[idx]
    phi = rng.uniform(-math.pi / 2 + margin, math.pi / 2 - margin, n)
    return idx, r, phi


def _batch_step(map_def, idx, r, phi):
    """(K, K1, cosphi, cosphi1, tau, slope map fn, ok) for circle configs."""
    cfg = map_def.config
    jj, r1, phi1, tau, ok = map_def.forward_batch(idx, r, phi)
    ok = ok & (math.pi / 2 - np.abs(phi1) > 1e-9)
    Rs = np.array([s.R for s in cfg.scatterers])
    K = 1.0 / Rs[idx]
    K1 = 1.0 / Rs[jj]
    return jj, r1, phi1, tau, K, K1, ok


def _image_data_scalar(map_def, x):
    res = map_def.forward(x)
    J = map_def.dt(x).m
    y = res.next
    K = float(map_def.config[x.scatterer].curvature_r(x.r))
    K1 = float(map_def.config[y.scatterer].curvature_r(y.r))
    return y, J, K, K1


def check_cone_invariance(map_def, cone, n_samples=10000, seed=0,
                          margin_frac=0.0):
    """Strict invariance of an unstable cone under the map differential."""
    cfg = map_def.config
    slopes = cone.sample_slopes()
    failures = 0
    worst = {"margin": math.inf, "point": None}
    checked = 0
    if hasattr(map_def, "forward_batch") and getattr(map_def, "all_circles",
                                                     False):
        idx, r, phi = _sample_points(cfg, n_samples, seed)
        jj, r1, phi1, tau, K, K1, ok = _batch_step(map_def, idx, r, phi)
        c, c1 = np.cos(phi), np.cos(phi1)
        for s in slopes:
            a = tau * K + c + tau * s
            b = K1 * (tau * K + c) + K * c1 + (tau * K1 + c1) * s
            V1 = np.where(ok, b / a, 0.0)
            inside = cone.contains(V1, margin=margin_frac)
            bad = ok & ~inside
            failures += int(bad.sum())
            checked += int(ok.sum())
            m = np.where(ok, np.minimum(V1 - cone.slope_lo,
                                        cone.slope_hi - V1), math.inf)
            i = int(np.argmin(m))
            if m[i] < worst["margin"]:
                worst = {"margin": float(m[i]),
                         "point": (int(idx[i]), float(r[i]), float(phi[i]),
                                   float(s))}
    else:
        rng = np.random.default_rng(seed)
        idx, r, phi = _sample_points(cfg, n_samples, seed)
        for i in range(n_samples):
            x = PhasePoint(int(idx[i]), float(r[i]), float(phi[i]))
            try:
                y, J, K, K1 = _image_data_scalar(map_def, x)
            except Exception:
                continue
            for s in slopes:
                u = J @ np.array([1.0, s])
                if u[0] == 0:
                    failures += 1
                    continue
                V1 = u[1] / u[0]
                checked += 1
                m = min(V1 - cone.slope_lo, cone.slope_hi - V1)
                if m < worst["margin"]:
                    worst = {"margin": float(m),
                             "point": (x.scatterer, x.r, x.phi, float(s))}
                if not cone.contains(V1, margin=margin_frac):
                    failures += 1
    return {"failures": failures, "checked": checked, "worst": worst}


def expansion_stats(map_def, cone, n_samples=10000, seed=0):
    """One-step adapted-norm expansion over the unstable cone, plus the
    grazing law expansion * cos(phi1) ~ const."""
    cfg = map_def.config
    slopes = cone.sample_slopes()
    lam_min = math.inf
    worst = None
    log_ratio = []
    log_cos1 = []
    if hasattr(map_def, "forward_batch") and getattr(map_def, "all_circles",
                                                     False):
        idx, r, phi = _sample_points(cfg, n_samples, seed)
        jj, r1, phi1, tau, K, K1, ok = _batch_step(map_def, idx, r, phi)
        c, c1 = np.cos(phi), np.cos(phi1)
        for s in slopes:
            a = (tau * K + c + tau * s) / c1  # |u_dr| up to sign
            b = (K1 * (tau * K + c) + K * c1 + (tau * K1 + c1) * s) / c1
            V1 = np.where(a != 0, b / np.where(a != 0, a, 1.0), np.inf)
            f = np.where(ok, (K1 + np.abs(V1)) * np.abs(a) / (K + abs(s)),
                         np.inf)
            i = int(np.argmin(f))
            if f[i] < lam_min:
                lam_min = float(f[i])
                worst = (int(idx[i]), float(r[i]), float(phi[i]), float(s))
            eucl = np.abs(a) * np.sqrt(1 + V1 ** 2) / math.sqrt(1 + s * s)
            sel = ok & np.isfinite(eucl)
            log_ratio.append(np.log(eucl[sel] * c1[sel]))
            log_cos1.append(np.log(c1[sel]))
    else:
        idx, r, phi = _sample_points(cfg, n_samples, seed)
        for i in range(n_samples):
            x = PhasePoint(int(idx[i]), float(r[i]), float(phi[i]))
            try:
                y, J, K, K1 = _image_data_scalar(map_def, x)
            except Exception:
                continue
            for s in slopes:
                v = np.array([1.0, s])
                u = J @ v
                num = adapted_norm(y, u, cfg)
                den = adapted_norm(x, v, cfg)
                f = num / den
                if f < lam_min:
                    lam_min = float(f)
                    worst = (x.scatterer, x.r, x.phi, float(s))
                eucl = np.linalg.norm(u) / np.linalg.norm(v)
                log_ratio.append([math.log(eucl * math.cos(y.phi))])
                log_cos1.append([math.log(math.cos(y.phi))])
    ly = np.concatenate([np.atleast_1d(v) for v in log_ratio])
    lx = np.concatenate([np.atleast_1d(v) for v in log_cos1])
    slope_fit, intercept = np.polyfit(lx, ly, 1)
    band = float(np.max(np.abs(ly - np.median(ly))))
    return {"Lambda_measured": lam_min, "worst": worst,
            "grazing_fit": {"slope": float(slope_fit),
                            "intercept": float(intercept),
                            "band": band},
            "n_samples": int(lx.size)}


# ----------------------------------------------------------------------
# distortion

def _orbit_jacobians(map_def, x, slope, n):
    """Per-step stable Jacobians, measure Jacobians, and strip indices."""
    cfg = map_def.config
    jw, jmu = [], []
    itinerary = [(x.scatterer, homogeneity_index(x.phi))]
    v = np.array([1.0, slope])
    cur = x
    for _ in range(n):
        res = map_def.forward(cur)
        J = map_def.dt(cur).m
        u = J @ v
        jw.append(float(np.linalg.norm(u) / np.linalg.norm(v)))
        det = abs(float(np.linalg.det(J)))
        jmu.append(det * math.cos(res.next.phi) / math.cos(cur.phi))
        cur = res.next
        itinerary.append((cur.scatterer, homogeneity_index(cur.phi)))
        v = u / np.linalg.norm(u)
    return np.array(jw), np.array(jmu), itinerary


def distortion_constant(map_def, curves, n=3, pairs_per_curve=12, seed=0):
    """Empirical Hölder-1/3 distortion constants along stable curves.

    Pairs whose orbits separate (different scatterer sequence or strip
    sequence) are skipped; returns sup |ln J ratio| / d^(1/3) for the
    curve Jacobian and the measure Jacobian.
    """
    rng = np.random.default_rng(seed)
    quot_w = []
    quot_mu = []
    for W in curves:
        a, b = W.interval
        for _ in range(pairs_per_curve):
            r1, r2 = sorted(rng.uniform(a, b, 2))
            if r2 - r1 < 1e-7:
                continue
            x1 = W.point(r1)
            x2 = W.point(r2)
            try:
                jw1, jm1, s1 = _orbit_jacobians(map_def, x1,
                                                float(W.slope_at(r1)), n)
                jw2, jm2, s2 = _orbit_jacobians(map_def, x2,
                                                float(W.slope_at(r2)), n)
            except Exception:
                continue
            if s1 != s2:
                continue
            d = (r2 - r1) * math.hypot(1.0, float(W.slope_at(0.5 * (r1 + r2))))
            dw = abs(math.log(np.prod(jw1)) - math.log(np.prod(jw2)))
            dmu = abs(math.log(np.prod(jm1)) - math.log(np.prod(jm2)))
            quot_w.append(dw / d ** (1.0 / 3.0))
            quot_mu.append(dmu / d ** (1.0 / 3.0))
    qw = np.asarray(quot_w) if quot_w else np.zeros(1)
    qmu = np.asarray(quot_mu) if quot_mu else np.zeros(1)
    # the raw sup over random pairs is heavy-tailed and never saturates;
    # a high quantile is the refinement-stable estimate
    return {"C_d_W": float(np.quantile(qw, 0.95)),
            "C_d_mu": float(np.quantile(qmu, 0.95)),
            "C_d_W_sup": float(qw.max()),
            "C_d_mu_sup": float(qmu.max()),
            "pairs": len(quot_w)}


# ----------------------------------------------------------------------
# one-step expansion sums

def one_step_expansion_sum(map_def, W, params=None, sigma=5.0 / 6.0):
    """Adapted-norm and sigma-power Jacobian sums over one pullback step.

    The sum runs over maximal homogeneous components of the preimage;
    the length-cap subdivision used in deeper trees is deliberately not
    applied here.
    """
    params = params or NormParams()
    cfg = map_def.config
    nocap = NormParams(p=params.p, q=params.q, alpha=params.alpha,
                       beta=params.beta, delta0=1e9, eps0=params.eps0,
                       k0=params.k0, b=params.b)
    tree = pullback_generation(W, map_def, 1, nocap)
    sum_star = 0.0
    sum_sigma = 0.0
    pieces = 0
    for nd in tree.nodes(1):
        V = nd.curve
        rr = V.r
        sl = V.slope_at(rr)
        Kx = np.asarray([cfg[V.scatterer].curvature_r(float(x)) for x in rr])
        par = nd.parent_r
        slw = W.slope_at(par)
        Kw = np.asarray([cfg[W.scatterer].curvature_r(float(x)) for x in par])
        fac_w = (Kw + np.abs(slw)) / np.sqrt(1.0 + slw ** 2)
        fac_v = (Kx + np.abs(sl)) / np.sqrt(1.0 + sl ** 2)
        jstar = nd.cum_jac * fac_w / fac_v
        sum_star += float(np.max(jstar))
        sum_sigma += nd.jac_c0 ** sigma
        pieces += 1
    return {"sum_star": sum_star, "sum_sigma": sum_sigma, "pieces": pieces}


def calibrate_delta0(map_def, metrics, n_curves=60, target=0.9, seed=0,
                     lo=2e-3, hi=0.4, iters=12, params=None):
    """Largest delta0 whose worst one-step adapted sum stays below target."""
    base = params or NormParams()

    def worst_sum(delta0):
        p = NormParams(p=base.p, q=base.q, alpha=base.alpha, beta=base.beta,
                       delta0=delta0, eps0=min(base.eps0, delta0 / 2),
                       k0=base.k0, b=base.b)
        curves = sample_stable_curves(map_def.config, metrics, n_curves, p,
                                      seed=seed)
        worst = 0.0
        for W in curves:
            s = one_step_expansion_sum(map_def, W, p)["sum_star"]
            worst = max(worst, s)
        return worst

    if worst_sum(lo) > target:
        return lo, worst_sum(lo)
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        if worst_sum(mid) <= target:
            lo = mid
        else:
            hi = mid
    return lo, worst_sum(lo)


# ----------------------------------------------------------------------
# curvature propagation of unstable curves

def _orbit_of(map_def, x, n):
    """Scatterer itinerary and points of the forward orbit, or None."""
    pts = [x]
    seq = [x.scatterer]
    cur = x
    for _ in range(n):
        try:
            cur = map_def.forward(cur).next
        except Exception:
            return None, None
        pts.append(cur)
        seq.append(cur.scatterer)
    return seq, pts


def _fit_second_derivative(rs, phis):
    """Least-squares quadratic fit: returns 2 * (quadratic coefficient)."""
    r0 = rs.mean()
    A = np.column_stack([np.ones_like(rs), rs - r0, (rs - r0) ** 2])
    coef, *_ = np.linalg.lstsq(A, phis, rcond=None)
    return 2.0 * float(coef[2])


def curvature_propagation(map_def, curve_pts, n=4, centers=5, img_span=2e-3):
    """Max |d2 phi / dr2| of the forward image graphs of an unstable curve.

    curve_pts: (scatterer, r array, phi array) of a smooth unstable curve.
    At each step the image curvature is measured through a 5-point stencil
    around tracked center points, with the stencil width shrunk so the
    image spread stays at img_span (keeping all points on one branch).
    """
    from scipy.interpolate import CubicSpline
    sc, rr, phi = curve_pts
    spline = CubicSpline(rr, phi)
    d2s = spline.derivative(2)(np.linspace(rr[0], rr[-1], 65))
    out = [float(np.max(np.abs(d2s)))]
    span = rr[-1] - rr[0]
    center_rs = np.linspace(rr[0] + 0.2 * span, rr[-1] - 0.2 * span, centers)
    for level in range(1, n + 1):
        vals = []
        for c in center_rs:
            x0 = PhasePoint(sc, float(c), float(spline(c)))
            ref_seq, ref_pts = _orbit_of(map_def, x0, level)
            if ref_seq is None:
                continue
            h = 0.05 * span
            for _attempt in range(30):
                offs = np.array([-h, -h / 2, 0.0, h / 2, h])
                ok = True
                r_img, p_img = [], []
                for o in offs:
                    rc = float(c + o)
                    if rc < rr[0] or rc > rr[-1]:
                        ok = False
                        break
                    seq, pts = _orbit_of(
                        map_def, PhasePoint(sc, rc, float(spline(rc))), level)
                    if seq != ref_seq:
                        ok = False
                        break
                    r_img.append(pts[-1].r)
                    p_img.append(pts[-1].phi)
                if ok:
                    spread = max(r_img) - min(r_img)
                    if spread > 2.0 * img_span:
                        h *= 0.8 * img_span / spread * 2.0
                        continue
                    if spread < 0.2 * img_span and h < 0.2 * span:
                        h = min(h * 2.0, 0.2 * span)
                        continue
                    r_arr = np.asarray(r_img)
                    if np.any(np.diff(np.sort(r_arr)) <= 0):
                        ok = False
                    else:
                        vals.append(abs(_fit_second_derivative(
                            r_arr, np.asarray(p_img))))
                        break
                if not ok:
                    h *= 0.5
                    if h < 1e-12:
                        break
        out.append(float(np.max(vals)) if vals else math.nan)
    return out


# ----------------------------------------------------------------------
# measure Jacobian bound (H5)

def measure_jacobian_bound(map_def, n_samples=5000, seed=0):
    """Measured max of (J_mu T)^{-1}; equals 1 for the classical map."""
    cfg = map_def.config
    idx, r, phi = _sample_points(cfg, n_samples, seed)
    eta = 0.0
    worst = None
    for i in range(n_samples):
        x = PhasePoint(int(idx[i]), float(r[i]), float(phi[i]))
        try:
            res = map_def.forward(x)
            J = map_def.dt(x).m
        except Exception:
            continue
        jmu = abs(float(np.linalg.det(J))) * math.cos(res.next.phi) \
            / math.cos(x.phi)
        if 1.0 / jmu > eta:
            eta = 1.0 / jmu
            worst = (x.scatterer, x.r, x.phi)
    return {"eta_measured": eta, "worst": worst}


def verify_hypotheses(map_def, metrics, params=None, n_samples=20000,
                      n_curves=40, seed=0, eps1=0.0, cone_widening=(2.0, 2.0),
                      lambda_floor=None):
    """Assemble a HypothesisReport for (H1)-(H5) on one map."""
    params = params or NormParams()
    rep = HypothesisReport()
    c1, c2 = cone_widening if eps1 > 0 else (0.0, 0.0)
    cone = ConeField.unstable(metrics, eps1, c1, c2)

    inv = check_cone_invariance(map_def, cone, n_samples, seed)
    rep.record("H1", inv["failures"] == 0,
               {"slope_lo": cone.slope_lo, "slope_hi": cone.slope_hi,
                "failures": inv["failures"]},
               inv["checked"], {"margin": inv["worst"]["margin"]})

    exp = expansion_stats(map_def, cone, n_samples, seed)
    floor = lambda_floor if lambda_floor is not None else (
        1.0 + metrics.K_min * metrics.tau_min / (3.0 if eps1 > 0 else 1.0))
    rep.record("H2", exp["Lambda_measured"] >= floor - 1e-6,
               {"Lambda_measured": exp["Lambda_measured"],
                "Lambda_floor": floor,
                "grazing_slope": exp["grazing_fit"]["slope"]},
               exp["n_samples"], {"point": exp["worst"]})

    curves = sample_stable_curves(map_def.config, metrics,
                                  max(10, n_curves // 2), params, seed=seed)
    oss_worst = 0.0
    sig_worst = 0.0
    for W in curves[:n_curves]:
        s = one_step_expansion_sum(map_def, W, params)
        oss_worst = max(oss_worst, s["sum_star"])
        sig_worst = max(sig_worst, s["sum_sigma"])
    rep.record("H3", oss_worst < 1.0,
               {"theta_star": oss_worst, "sigma_sum": sig_worst,
                "delta0": params.delta0, "k0": params.k0}, len(curves))

    dc = distortion_constant(map_def, curves[:n_curves], n=3, seed=seed)
    rep.record("H4", math.isfinite(dc["C_d_W"]) and dc["pairs"] > 0,
               {"C_d_W": dc["C_d_W"], "C_d_mu": dc["C_d_mu"]}, dc["pairs"])

    mj = measure_jacobian_bound(map_def, min(n_samples, 5000), seed)
    eta = mj["eta_measured"]
    lam = max(exp["Lambda_measured"], 1.0 + 1e-9)
    bound = min(lam ** params.beta, lam ** params.q,
                oss_worst ** (params.alpha - 1.0) if oss_worst > 0 else
                math.inf)
    rep.record("H5", eta <= bound + 1e-9,
               {"eta_measured": eta, "eta_bound": bound}, min(n_samples, 5000),
               {"point": mj["worst"]})
    return rep
