"""Closed-form population engine for the 2-d linear setting.

With a scalar invariant feature z_c ~ N(y mu_c, sigma_c^2), a scalar
non-causal feature z_e ~ N(y mu_i, sigma_e^2), and the linear map
Phi = (a, b), the margin y(a z_c + b z_e) is N(m_i, s^2) with
m_i = a mu_c + b mu_i and s^2 = a^2 sigma_c^2 + b^2 sigma_e^2,
whatever the label. Every risk functional of (a, b, w) then reduces to
1-d Gaussian expectations, evaluated by 128-node Gauss-Hermite
quadrature (64 nodes leave ~5e-3 relative error in the implicit-vs-
finite-difference gradient identity; 128 brings it under 1e-3), and the
per-environment optimal predictor is the Bayes slope w*_i = 2 m_i / s^2
in closed form.

This is the exact fast path behind the weight-ratio experiments; the
sampled-data trainer estimates the same quantities up to sampling error.
All array functions broadcast over a leading grid axis so a whole angle
sweep evaluates in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import solver as slv
from .envgen import EnvironmentSuite, SuiteError

_NODES, _RAW_W = np.polynomial.hermite.hermgauss(128)
_Q = np.sqrt(2.0) * _NODES
_W = _RAW_W / np.sqrt(np.pi)


def quad_rg(w, m, s, need_g: bool = False):
    """R (and optionally G) alone; the hot path of inner minimizations."""
    m = np.asarray(m, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    wb = np.asarray(w, dtype=np.float64)[..., None]
    t = m[..., None] + s[..., None] * _Q
    x = wb * t
    r = slv.softplus(-x) @ _W
    if not need_g:
        return r
    return r, (t * -slv.sigmoid(-x)) @ _W


def quad_eval(w, m, s) -> dict[str, np.ndarray]:
    """Gaussian-expectation primitives of the logistic loss at scores w*t.

    t ~ N(m, s^2) is integrated over the quadrature nodes; the returned
    arrays share the broadcast shape of (w, m, s):

    R      mean loss                   E[l(w t)]
    G      risk slope in w             E[t l'(w t)]
    H      risk curvature in w         E[t^2 l''(w t)]
    dR_dm, dR_ds                       location/scale derivatives of R
    dG_dm, dG_ds                       the same for G
    """
    m = np.asarray(m, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    wb = np.asarray(w, dtype=np.float64)[..., None]
    t = m[..., None] + s[..., None] * _Q
    x = wb * t
    lp = -slv.sigmoid(-x)
    lpp = slv.sigmoid(x) * slv.sigmoid(-x)
    inner = lp + wb * t * lpp
    return {
        "R": slv.softplus(-x) @ _W,
        "G": (t * lp) @ _W,
        "H": (t * t * lpp) @ _W,
        "dR_dm": (wb * lp) @ _W,
        "dR_ds": (wb * _Q * lp) @ _W,
        "dG_dm": inner @ _W,
        "dG_ds": (_Q * inner) @ _W,
    }


@dataclass(frozen=True)
class Population2D:
    """Exact population view of a 2-d suite: one mu_c, per-env mus."""

    mu_c: float
    mus: np.ndarray
    sigma_c: float = 1.0
    sigma_e: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mus",
                           np.atleast_1d(np.asarray(self.mus, dtype=np.float64)))
        if self.mus.ndim != 1 or self.mus.shape[0] < 2:
            raise SuiteError("population view needs >= 2 scalar env means")
        if self.sigma_c <= 0 or self.sigma_e <= 0:
            raise SuiteError("sigmas must be positive")

    @classmethod
    def from_suite(cls, suite: EnvironmentSuite) -> "Population2D":
        spec = suite.specs[0]
        if spec.d_c != 1 or spec.d_e != 1:
            raise SuiteError("population fast path needs scalar z_c and z_e")
        if any(s.bias_degree != 1.0 for s in suite.specs):
            raise SuiteError("population fast path assumes bias degree 1")
        if suite.rotation is not None:
            raise SuiteError("population fast path assumes unrotated features")
        return cls(mu_c=float(suite.mu_c[0]), mus=suite.mus[:, 0],
                   sigma_c=suite.sigma_c, sigma_e=suite.sigma_e)

    @property
    def n_envs(self) -> int:
        return self.mus.shape[0]

    def margins(self, a, b):
        """Margin means m (grid..., E) and shared stds s (grid...)."""
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        m = a[..., None] * self.mu_c + b[..., None] * self.mus
        s = np.sqrt(a * a * self.sigma_c ** 2 + b * b * self.sigma_e ** 2)
        return m, s

    def optimal_w(self, a, b) -> np.ndarray:
        """Per-env Bayes slope 2 m_i / s^2, shape (grid..., E)."""
        m, s = self.margins(a, b)
        return 2.0 * m / (np.asarray(s) ** 2)[..., None]

    def pooled_w(self, a, b) -> np.ndarray:
        """Scalar minimizer of the summed env risks, by Newton."""
        m, s = self.margins(a, b)
        w = np.asarray(2.0 * m.mean(axis=-1) / np.asarray(s) ** 2)
        for _ in range(60):
            p = quad_eval(w[..., None], m, s[..., None]
                          if np.ndim(s) else s)
            g = p["G"].sum(axis=-1)
            h = np.maximum(p["H"].sum(axis=-1), 1e-30)
            step = g / h
            w = w - step
            if float(np.max(np.abs(g))) < 1e-13:
                break
        return w

    def chain(self, a, b):
        """d(m, s)/d(a, b) factors for the chain rule."""
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        _, s = self.margins(a, b)
        return {"dm_da": self.mu_c, "dm_db": self.mus,
                "ds_da": a * self.sigma_c ** 2 / s,
                "ds_db": b * self.sigma_e ** 2 / s}

    def risk_dab(self, p: dict[str, np.ndarray], a, b):
        """(dR/da, dR/db) per env from quad_eval pieces at fixed w."""
        c = self.chain(a, b)
        da = c["dm_da"] * p["dR_dm"] + \
            np.asarray(c["ds_da"])[..., None] * p["dR_ds"]
        db = c["dm_db"] * p["dR_dm"] + \
            np.asarray(c["ds_db"])[..., None] * p["dR_ds"]
        return da, db

    def slope_dab(self, p: dict[str, np.ndarray], a, b):
        """(dG/da, dG/db) per env at fixed w; the mixed second derivative."""
        c = self.chain(a, b)
        da = c["dm_da"] * p["dG_dm"] + \
            np.asarray(c["ds_da"])[..., None] * p["dG_ds"]
        db = c["dm_db"] * p["dG_dm"] + \
            np.asarray(c["ds_db"])[..., None] * p["dG_ds"]
        return da, db

    def env_pieces(self, a, b, w):
        """quad_eval at a shared predictor, one entry per environment."""
        m, s = self.margins(a, b)
        return quad_eval(np.asarray(w, dtype=np.float64)[..., None]
                         if np.ndim(w) == np.ndim(s) else w, m,
                         np.asarray(s)[..., None] if np.ndim(s) else s)

    def cross_risks(self, a, b) -> np.ndarray:
        """R_P(w*_Q) matrix, shape (grid..., E_Q, E_P)."""
        m, s = self.margins(a, b)
        w_star = self.optimal_w(a, b)
        return quad_rg(w_star[..., :, None], m[..., None, :],
                       np.asarray(s)[..., None, None])

    def transfer_values(self, a, b) -> dict[str, float | np.ndarray]:
        """Both transfer-risk variants from the closed-form predictors."""
        cross = self.cross_risks(a, b)
        e = self.n_envs
        off = ~np.eye(e, dtype=bool)
        masked = np.where(off, cross, -np.inf)
        sumsup = masked.max(axis=-1).sum(axis=-1)
        sumsum = np.where(off, cross, 0.0).sum(axis=(-2, -1))
        return {"sum_sup": sumsup, "sum_sum": sumsum, "cross": cross}

    def pred_distance(self, a, b):
        """Mean squared gap between per-env optimal predictors, all pairs."""
        w = self.optimal_w(a, b)
        e = self.n_envs
        diffs = w[..., :, None] - w[..., None, :]
        return (diffs ** 2).sum(axis=(-2, -1)) / (e * (e - 1))


def mean_sq_loss(pop: Population2D, a, b, w) -> np.ndarray:
    """Per-env E[l(w t)^2], a reported diagnostic for the biased sweeps."""
    m, s = pop.margins(a, b)
    t = m[..., None] + np.asarray(s)[..., None] * _Q
    x = np.asarray(w, dtype=np.float64)[..., None] * t
    return slv.softplus(-x) ** 2 @ _W


def _coarse_then_golden(fn, lo, hi, coarse: int = 65, iters: int = 60):
    """Global 1-d minimum per grid element: bracket scan, then refine.

    fn maps an array of w values (one per grid element) to objective
    values of the same shape. The coarse pass localizes the global
    minimum among possibly several local ones; golden-section then
    contracts the two-cell bracket by 0.618 per iteration.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    grid = np.linspace(0.0, 1.0, coarse)
    vals = np.stack([fn(lo + g * (hi - lo)) for g in grid])
    best = np.argmin(vals, axis=0)
    cell = (hi - lo) / (coarse - 1)
    a = lo + np.maximum(best - 1, 0) * cell
    b = lo + np.minimum(best + 1, coarse - 1) * cell
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        smaller = fc < fd
        b = np.where(smaller, d, b)
        a = np.where(smaller, a, c)
        c = b - invphi * (b - a)
        d = a + invphi * (b - a)
        fc, fd = fn(c), fn(d)
    mid = 0.5 * (a + b)
    return mid, fn(mid)


def angle_grid(resolution: int = 4096) -> np.ndarray:
    """Uniform angles on [0, pi); objectives are pi-periodic in theta."""
    return np.arange(resolution) * (np.pi / resolution)


def grid_values(pop: Population2D, thetas: np.ndarray, objective: str,
                lam_irm: float = 10.0, beta_rex: float = 10.0,
                trm_variant: str = "sum_sum") -> np.ndarray:
    """Objective value at Phi = (cos t, sin t) for every grid angle.

    erm:      min_w sum_i R_i(w)
    irmv1:    min_w sum_i R_i(w) + lam_irm * sum_i G_i(w)^2
    rex:      min_w sum_i R_i(w) + beta_rex * Var_i(R_i(w))
    groupdro: min_w max_i R_i(w)
    trm:      sum_Q R_Q(w_pool) + sum_Q agg_{P != Q} R_P(w*_Q), the
              full training objective with unit gradient-matching
              weight, where agg is max for sum_sup and sum otherwise.

    Inner minimizations run a coarse scan plus golden-section per angle,
    bracketed by the closed-form per-env optima.
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    a, b = np.cos(thetas), np.sin(thetas)
    m, s = pop.margins(a, b)
    s_col = s[..., None]

    if objective == "trm":
        w_pool = pop.pooled_w(a, b)
        pooled = quad_eval(w_pool[..., None], m, s_col)["R"].sum(axis=-1)
        tv = pop.transfer_values(a, b)
        return pooled + tv["sum_sup" if trm_variant == "sum_sup" else "sum_sum"]

    w_star = pop.optimal_w(a, b)
    # Pad by half the per-env spread: the variance penalty can push
    # stationary points outside the hull of the per-env optima.
    pad = 1.0 + 0.5 * (w_star.max(axis=-1) - w_star.min(axis=-1))
    lo = np.minimum(w_star.min(axis=-1), 0.0) - pad
    hi = np.maximum(w_star.max(axis=-1), 0.0) + pad

    if objective == "erm":
        def fn(w):
            return quad_rg(w[..., None], m, s_col).sum(axis=-1)
    elif objective == "irmv1":
        def fn(w):
            r, g = quad_rg(w[..., None], m, s_col, need_g=True)
            return r.sum(axis=-1) + lam_irm * (g ** 2).sum(axis=-1)
    elif objective == "rex":
        def fn(w):
            r = quad_rg(w[..., None], m, s_col)
            return r.sum(axis=-1) + beta_rex * r.var(axis=-1)
    elif objective == "groupdro":
        def fn(w):
            return quad_rg(w[..., None], m, s_col).max(axis=-1)
    else:
        raise ValueError(f"unknown grid objective {objective!r}")

    _, vals = _coarse_then_golden(fn, lo, hi)
    return vals


@dataclass
class PopStep:
    """One population-mode gradient evaluation."""

    g_a: float
    g_b: float
    g_w: float
    per_env: np.ndarray
    components: dict[str, float]
    transfer_losses: dict[int, float] | None = None


def erm_pop_step(pop: Population2D, a: float, b: float, w: float) -> PopStep:
    p = pop.env_pieces(a, b, w)
    da, db = pop.risk_dab(p, a, b)
    return PopStep(g_a=float(da.sum()), g_b=float(db.sum()),
                   g_w=float(p["G"].sum()), per_env=p["R"],
                   components={"risk_sum": float(p["R"].sum())})


def irmv1_pop_step(pop: Population2D, a: float, b: float, w: float,
                   lam: float) -> PopStep:
    p = pop.env_pieces(a, b, w)
    da, db = pop.risk_dab(p, a, b)
    gda, gdb = pop.slope_dab(p, a, b)
    g = p["G"]
    penalty = float((g ** 2).sum())
    scale = 1.0 / lam if lam > 1.0 else 1.0
    return PopStep(
        g_a=scale * float(da.sum() + 2.0 * lam * (g * gda).sum()),
        g_b=scale * float(db.sum() + 2.0 * lam * (g * gdb).sum()),
        g_w=scale * float(g.sum() + 2.0 * lam * (g * p["H"]).sum()),
        per_env=p["R"],
        components={"risk_sum": float(p["R"].sum()),
                    "irmv1_penalty": penalty})


def rex_pop_step(pop: Population2D, a: float, b: float, w: float,
                 beta: float) -> PopStep:
    p = pop.env_pieces(a, b, w)
    da, db = pop.risk_dab(p, a, b)
    r = p["R"]
    e = r.shape[0]
    dev = r - r.mean()
    scale = 1.0 / beta if beta > 1.0 else 1.0
    return PopStep(
        g_a=scale * float(da.sum() + (2.0 * beta / e) * (dev * da).sum()),
        g_b=scale * float(db.sum() + (2.0 * beta / e) * (dev * db).sum()),
        g_w=scale * float(p["G"].sum() + (2.0 * beta / e) * (dev * p["G"]).sum()),
        per_env=r,
        components={"risk_sum": float(r.sum()),
                    "loss_variance": float(r.var())})


def groupdro_pop_step(pop: Population2D, a: float, b: float, w: float,
                      weights: np.ndarray) -> PopStep:
    p = pop.env_pieces(a, b, w)
    da, db = pop.risk_dab(p, a, b)
    q = np.asarray(weights, dtype=np.float64)
    return PopStep(g_a=float((q * da).sum()), g_b=float((q * db).sum()),
                   g_w=float((q * p["G"]).sum()), per_env=p["R"],
                   components={"weighted_risk": float((q * p["R"]).sum())},
                   transfer_losses={i: float(v) for i, v in enumerate(p["R"])})


def transfer_grad_2d(pop: Population2D, a: float, b: float, q_env: int,
                     mix=None, damping: float = 0.0) -> dict:
    """Mixture transfer loss at the frozen optimum w*_Q, with its full
    feature gradient split into the direct piece (w fixed) and the
    implicit piece routed through the preconditioned vector v_Q.

    direct + implicit equals the total derivative of
    sum_P mix_P R_P(w*_Q(a, b)) because dw*_Q/d(a,b) = -dG_Q/d(a,b) / H_Q
    and v_Q = sum_P mix_P G_P(w*_Q) / H_Q.
    """
    m, s = pop.margins(a, b)
    w_q = float(2.0 * m[q_env] / s ** 2)
    others = [i for i in range(pop.n_envs) if i != q_env]
    mix = np.ones(len(others)) if mix is None \
        else np.asarray(mix, dtype=np.float64)

    p_all = quad_eval(w_q, m, s)
    da_all, db_all = pop.risk_dab(p_all, a, b)
    gda_all, gdb_all = pop.slope_dab(p_all, a, b)
    v_q = float((mix * p_all["G"][others]).sum()) \
        / (float(p_all["H"][q_env]) + damping)
    return {
        "value": float((mix * p_all["R"][others]).sum()),
        "w_q": w_q, "v_q": v_q, "others": others,
        "g_q": float(p_all["G"][q_env]),
        "risks": p_all["R"],
        "direct_a": float((mix * da_all[others]).sum()),
        "direct_b": float((mix * db_all[others]).sum()),
        "implicit_a": float(-v_q * gda_all[q_env]),
        "implicit_b": float(-v_q * gdb_all[q_env]),
    }


def trm_pop_step(pop: Population2D, a: float, b: float, w_all: float,
                 q_env: int, alpha: dict[int, float] | None, lam: float,
                 variant: str = "sum_sup", damping: float = 1e-4) -> PopStep:
    """Three-term gradient for one sampled environment Q.

    The per-env optimum w_Q and the preconditioned transfer vector v_Q
    are frozen; a scalar Hessian makes the inverse exact (the truncated
    series with automatic scaling collapses to the same value).
    """
    others = [i for i in range(pop.n_envs) if i != q_env]
    if variant == "sum_sup":
        if alpha is None:
            raise ValueError("sum_sup needs mixture weights")
        mix = np.array([alpha[i] for i in others])
    else:
        mix = np.ones(len(others))

    t = transfer_grad_2d(pop, a, b, q_env, mix=mix, damping=damping)

    own = pop.env_pieces(a, b, w_all)
    own_da, own_db = pop.risk_dab(own, a, b)

    g_a = float(own_da[q_env] + t["direct_a"] + lam * t["implicit_a"])
    g_b = float(own_db[q_env] + t["direct_b"] + lam * t["implicit_b"])
    gm_value = float(t["v_q"] * t["g_q"])
    return PopStep(
        g_a=g_a, g_b=g_b, g_w=float(own["G"][q_env]), per_env=own["R"],
        components={"erm_term": float(own["R"][q_env]),
                    "transfer_term": t["value"],
                    "grad_match_term": gm_value,
                    "w_q": t["w_q"], "v_q": t["v_q"]},
        transfer_losses={i: float(t["risks"][i]) for i in others})
