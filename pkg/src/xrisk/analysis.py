"""Analytical experiments: ratio sweeps, brute-force angle oracles, and
the Monte-Carlo certificate for the piecewise counterexample classifier.

The sweep half trains each algorithm on 2-d population suites and
reports spurious-to-invariant weight ratios with ordering and
monotonicity checks. The certificate half constructs a high-dimensional
piecewise-invariant classifier whose gradient penalty is near zero while
a per-environment optimal predictor transfers badly, and verifies the
three quantitative clauses by chunked Monte-Carlo with 95% intervals.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import linear2d as l2
from . import solver as slv
from . import trainer as tr
from .envgen import EnvironmentSuite, SuiteConfig, make_suite
from .objectives import TRMHyper

SWEEP_COMMENT = "# xrisk-sweep v1"
CERT_COMMENT = "# xrisk-certificate v1"


class ConstructionError(ValueError):
    """Counterexample geometry violates a required inequality."""


def weight_ratio(phi) -> float:
    """|b/a| of a 2-d feature pair; +inf sentinel when a = 0."""
    if hasattr(phi, "ab"):
        a, b = phi.ab
    else:
        arr = np.asarray(phi, dtype=np.float64).reshape(-1)
        if arr.shape[0] != 2:
            raise ValueError(f"expected a 2-d pair, got {arr.shape[0]} entries")
        a, b = float(arr[0]), float(arr[1])
    return abs(b / a) if a != 0.0 else math.inf


def trailing_ratio(metrics: tr.RunMetrics, fraction: float = 0.25) -> float:
    """Weight ratio from the direction-averaged tail of a run.

    Constant-rate steps oscillate around the optimum, so the tail angles
    are averaged with the doubled-angle trick (the objective and the
    ratio are pi-periodic in the angle) before taking |tan|.
    """
    a = metrics.column("a")
    b = metrics.column("b")
    keep = np.isfinite(a) & np.isfinite(b)
    a, b = a[keep], b[keep]
    if a.size == 0:
        raise ValueError("run logged no 2-d feature pairs")
    tail = max(1, int(math.ceil(fraction * a.size)))
    theta = np.arctan2(b[-tail:], a[-tail:])
    c = np.cos(2 * theta).mean()
    s = np.sin(2 * theta).mean()
    if math.hypot(c, s) < 1e-12:
        return weight_ratio((a[-1], b[-1]))
    mean_theta = 0.5 * math.atan2(s, c)
    return abs(math.tan(mean_theta))


def bruteforce_ratio(suite: EnvironmentSuite, objective: str,
                     resolution: int = 4096, lam_irm: float = 10.0,
                     beta_rex: float = 10.0,
                     trm_variant: str = "sum_sum") -> dict:
    """Grid oracle: the weight ratio minimizing an objective over angles.

    Evaluates the objective at Phi = (cos t, sin t) on a uniform grid
    over [0, pi) with inner predictors from the closed form (or inner
    1-d minimization where the objective requires it) and returns the
    argmin angle, its |tan|, and the value grid.
    """
    pop = l2.Population2D.from_suite(suite)
    thetas = l2.angle_grid(resolution)
    values = l2.grid_values(pop, thetas, objective, lam_irm=lam_irm,
                            beta_rex=beta_rex, trm_variant=trm_variant)
    idx = int(np.argmin(values))
    theta = float(thetas[idx])
    return {"theta": theta, "ratio": abs(math.tan(theta)), "index": idx,
            "values": values, "thetas": thetas,
            "grid_step": math.pi / resolution}


GRID_OBJECTIVE = {"erm": "erm", "irmv1": "irmv1", "rex": "rex",
                  "groupdro": "groupdro", "trm": "trm"}


def sweep_train_config(algorithm: str, iterations: int = 2000,
                       seed: int = 0, lam_irm: float = 10.0,
                       beta_rex: float = 10.0) -> tr.TrainConfig:
    """The frozen recipe behind the weight-ratio experiments.

    Plain momentum steps, not adaptive ones: with the unit-norm feature
    constraint, per-coordinate rescaling bends the projected direction
    and settles measurably off the true constrained optimum.
    """
    return tr.TrainConfig(
        algorithm=algorithm, iterations=iterations, seed=seed,
        optimizer="sgd", eta_phi=0.01, eta_w=0.01,
        population_mode=True, constrained_2d=True,
        hyper=TRMHyper(lam=1.0, variant="sum_sum"),
        lam_irm=lam_irm, beta_rex=beta_rex, warmup=0)


@dataclass
class SweepPoint:
    """One grid value's medians and derived ratios across seeds."""

    value: float
    runs: dict[str, list[float]]
    medians: dict[str, float]
    half_widths: dict[str, float]
    margin_erm_trm: float
    margin_irm_trm: float
    k_diag: float


@dataclass
class RatioSweepResult:
    """Ratio sweep along mu_c or env count, with the two printed checks."""

    axis: str
    points: list[SweepPoint]
    seeds: list[int]
    ordering_ok: bool = False
    monotone_ok: bool = False

    def margins(self) -> list[float]:
        return [p.margin_erm_trm for p in self.points]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(SWEEP_COMMENT + "\n")
            fh.write("axis,value,algorithm,seed,ratio\n")
            for p in self.points:
                for alg, runs in sorted(p.runs.items()):
                    for seed, ratio in zip(self.seeds, runs):
                        fh.write(f"{self.axis},{p.value!r},{alg},{seed},"
                                 f"{ratio!r}\n")

    def summary_csv(self, path) -> None:
        algs = sorted(self.points[0].medians)
        with open(path, "w", newline="") as fh:
            fh.write(SWEEP_COMMENT + "\n")
            cols = ["axis", "value"] + [f"r_{a}" for a in algs] + \
                [f"hw_{a}" for a in algs] + \
                ["margin_erm_trm", "margin_irmv1_trm", "k_diag"]
            fh.write(",".join(cols) + "\n")
            for p in self.points:
                cells = [self.axis, repr(p.value)]
                cells += [repr(p.medians[a]) for a in algs]
                cells += [repr(p.half_widths[a]) for a in algs]
                cells += [repr(p.margin_erm_trm), repr(p.margin_irm_trm),
                          repr(p.k_diag)]
                fh.write(",".join(cells) + "\n")

    def summary(self) -> str:
        lines = [f"ratio sweep over {self.axis} "
                 f"({len(self.seeds)} seeds/point)"]
        for p in self.points:
            meds = "  ".join(f"{a}={p.medians[a]:.4f}"
                             for a in sorted(p.medians))
            lines.append(f"  {self.axis}={p.value:g}: {meds}  "
                         f"erm/trm={p.margin_erm_trm:.3f}")
        lines.append(f"  ordering r_trm <= r_irmv1 <= r_erm: "
                     f"{'ok' if self.ordering_ok else 'VIOLATED'}")
        lines.append(f"  erm/trm margin non-increasing: "
                     f"{'ok' if self.monotone_ok else 'VIOLATED'}")
        return "\n".join(lines)


def _median_halfwidth(values: Sequence[float]) -> float:
    # Normal-approximation CI for a median: 1.57 * IQR / sqrt(n).
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size < 2:
        return 0.0
    q1, q3 = np.quantile(v, [0.25, 0.75])
    return float(1.57 * (q3 - q1) / math.sqrt(v.size))


def _check_monotone(margins: Sequence[float], allowed_inversions: int = 1,
                    rel_slack: float = 0.02) -> bool:
    bad = 0
    for prev, cur in zip(margins, margins[1:]):
        if cur > prev * (1.0 + rel_slack):
            bad += 1
    return bad <= allowed_inversions


# Extra budget for the stochastic env pick: the one-environment-per-step
# estimator leaves O(1e-3) tail noise at the deterministic baselines'
# horizon, comparable to the tightest ordering gaps in the sweeps.
TRM_SAMPLING_FACTOR = 3


def sweep_iterations(algorithm: str, iterations: int, lam_irm: float,
                     beta_rex: float, eta_dro: float = 0.1) -> int:
    """Iteration budget equalizing effective convergence across algorithms.

    Penalized baselines divide their gradients by the penalty weight
    once it exceeds one (step-size protection), which stretches their
    convergence horizon by the same factor. The per-step environment
    sampling in the transfer objective adds gradient noise instead, and
    the minimax weights move on the 1/eta_dro timescale before the
    worst-group balance point pins the features down; every budget is
    stretched so the algorithms are compared at convergence.
    """
    if algorithm == "irmv1" and lam_irm > 1.0:
        return int(round(iterations * lam_irm))
    if algorithm == "rex" and beta_rex > 1.0:
        return int(round(iterations * beta_rex))
    if algorithm == "groupdro" and eta_dro < 1.0:
        return int(round(iterations / eta_dro))
    if algorithm == "trm":
        return iterations * TRM_SAMPLING_FACTOR
    return iterations


def sweep_cell(axis: str, value: float, seed: int, n_envs: int = 5,
               mu_c: float = 1.0,
               algorithms: Sequence[str] = ("erm", "irmv1", "trm"),
               target_mean_mu: float = 1.0, target_var_mu: float = 1.0,
               n_samples: int = 1000, iterations: int = 2000,
               lam_irm: float = 10.0, beta_rex: float = 10.0,
               compensate: bool = True) -> dict:
    """All algorithms for one (grid value, seed); the parallel work unit."""
    point_envs = int(value) if axis == "n_envs" else n_envs
    point_mu_c = float(value) if axis == "mu_c" else mu_c
    suite = make_suite(SuiteConfig(
        n_envs=point_envs, mu_c=point_mu_c,
        target_mean_mu=target_mean_mu, target_var_mu=target_var_mu,
        n_samples=n_samples), seed=seed)
    ratios = {}
    k_diag = math.nan
    for alg in algorithms:
        iters = sweep_iterations(alg, iterations, lam_irm, beta_rex) \
            if compensate else iterations
        config = sweep_train_config(alg, iterations=iters, seed=seed,
                                    lam_irm=lam_irm, beta_rex=beta_rex)
        model, metrics = tr.train(suite, config)
        ratios[alg] = trailing_ratio(metrics)
        if alg == "irmv1":
            pop = l2.Population2D.from_suite(suite)
            a, b = model.feature_map.ab
            w = float(model.w_all[0])
            k_diag = float(l2.mean_sq_loss(pop, a, b, w).mean())
    return {"ratios": ratios, "k": k_diag}


def assemble_sweep(axis: str, values: Sequence[float],
                   seeds: Sequence[int], algorithms: Sequence[str],
                   cells: dict) -> RatioSweepResult:
    """Fold per-(value, seed) cells into ordered points and run checks."""
    points = []
    for value in values:
        runs: dict[str, list[float]] = {a: [] for a in algorithms}
        k_vals = []
        for seed in seeds:
            cell = cells[(float(value), seed)]
            for alg in algorithms:
                runs[alg].append(cell["ratios"][alg])
            if math.isfinite(cell["k"]):
                k_vals.append(cell["k"])
        medians = {a: float(np.median(runs[a])) for a in algorithms}
        hws = {a: _median_halfwidth(runs[a]) for a in algorithms}
        trm_med = medians.get("trm", math.nan)
        points.append(SweepPoint(
            value=float(value), runs=runs, medians=medians, half_widths=hws,
            margin_erm_trm=medians.get("erm", math.nan) / trm_med
            if trm_med > 0 else math.inf,
            margin_irm_trm=medians.get("irmv1", math.nan) / trm_med
            if trm_med > 0 else math.inf,
            k_diag=float(np.median(k_vals)) if k_vals else math.nan))
    result = RatioSweepResult(axis=axis, points=points, seeds=list(seeds))
    orderings = [p.medians.get("trm", 0.0) <= p.medians.get("irmv1", math.inf)
                 <= p.medians.get("erm", math.inf) for p in points]
    result.ordering_ok = sum(not ok for ok in orderings) <= 1
    result.monotone_ok = _check_monotone(result.margins())
    return result


def ratio_sweep(values: Sequence[float], axis: str = "mu_c",
                n_envs: int = 5, mu_c: float = 1.0,
                seeds: Sequence[int] = tuple(range(10)),
                algorithms: Sequence[str] = ("erm", "irmv1", "trm"),
                target_mean_mu: float = 1.0, target_var_mu: float = 1.0,
                n_samples: int = 1000, iterations: int = 2000,
                lam_irm: float = 10.0, beta_rex: float = 10.0,
                compensate: bool = True, progress=None) -> RatioSweepResult:
    """Train each algorithm across a mu_c or environment-count grid.

    Every (grid value, seed) pair gets a fresh suite whose non-causal
    means hit the target mean/variance exactly; ratios come from the
    direction-averaged tail of each population-mode run. Medians over
    seeds feed the ordering check (r_trm <= r_irmv1 <= r_erm) and the
    non-increasing erm/trm margin check, each allowing one seed-noise
    inversion.
    """
    if axis not in ("mu_c", "n_envs"):
        raise ValueError(f"axis must be mu_c or n_envs, got {axis!r}")
    cells = {}
    for value in values:
        for seed in seeds:
            cells[(float(value), seed)] = sweep_cell(
                axis, float(value), seed, n_envs=n_envs, mu_c=mu_c,
                algorithms=algorithms, target_mean_mu=target_mean_mu,
                target_var_mu=target_var_mu, n_samples=n_samples,
                iterations=iterations, lam_irm=lam_irm, beta_rex=beta_rex,
                compensate=compensate)
            if progress is not None:
                progress(axis, value, seed)
    return assemble_sweep(axis, values, seeds, algorithms, cells)


@dataclass(frozen=True)
class ConstructionSpec:
    """Geometry of the piecewise counterexample; validated on demand.

    The designated far-separated environment index is special_i, and the
    witness environment j realizes the anti-aligned inner product.
    Radius defaults to sqrt(2 d_e).
    """

    d_c: int
    d_e: int
    mu_c: np.ndarray
    mus: np.ndarray
    sigma_c: float = 1.0
    special_i: int = 0
    radius: float | None = None
    mc_samples: int = 1_000_000

    def __post_init__(self):
        object.__setattr__(self, "mu_c",
                           np.asarray(self.mu_c, dtype=np.float64))
        object.__setattr__(self, "mus",
                           np.atleast_2d(np.asarray(self.mus,
                                                    dtype=np.float64)))
        if self.radius is None:
            object.__setattr__(self, "radius", math.sqrt(2.0 * self.d_e))

    @property
    def n_envs(self) -> int:
        return self.mus.shape[0]

    def violations(self) -> list[str]:
        """Every violated inequality, with its actual numbers."""
        out = []
        root = math.sqrt(self.d_e)
        nc = float(np.linalg.norm(self.mu_c))
        if self.mu_c.shape[0] != self.d_c or self.mus.shape[1] != self.d_e:
            out.append(f"mean dimensions {self.mu_c.shape[0]}/"
                       f"{self.mus.shape[1]} do not match d_c={self.d_c}, "
                       f"d_e={self.d_e}")
            return out
        if not root <= nc <= 8 * root:
            out.append(f"|mu_c|={nc:.4f} outside [sqrt(d_e), 8 sqrt(d_e)]"
                       f"=[{root:.4f}, {8 * root:.4f}]")
        for k in range(self.n_envs):
            nk = float(np.linalg.norm(self.mus[k]))
            if nk > 8 * root + 1e-12:
                out.append(f"|mu_{k}|={nk:.4f} exceeds 8 sqrt(d_e)"
                           f"={8 * root:.4f}")
        i = self.special_i
        sep = 2.0 * math.sqrt(2.0 * self.d_e)
        for k in range(self.n_envs):
            if k == i:
                continue
            # Separation from both signed ball centers: the environment
            # i samples must stay outside every ball w.h.p.
            for sign, tag in ((1.0, "-"), (-1.0, "+")):
                dist = float(np.linalg.norm(self.mus[i] - sign * self.mus[k]))
                if dist < sep - 1e-12:
                    out.append(f"|mu_{i} {tag} mu_{k}|={dist:.4f} below "
                               f"2 sqrt(2 d_e)={sep:.4f}")
        bound = -(nc ** 2) / self.sigma_c ** 2
        dots = [float(self.mus[i] @ self.mus[j])
                for j in range(self.n_envs) if j != i]
        if not any(d <= bound + 1e-9 for d in dots):
            out.append(f"no environment j with mu_i.mu_j <= "
                       f"-|mu_c|^2/sigma_c^2={bound:.4f}; "
                       f"closest {min(dots):.4f}")
        return out

    def validate(self) -> None:
        bad = self.violations()
        if bad:
            raise ConstructionError("; ".join(bad))

    @property
    def witness_j(self) -> int:
        bound = -(float(np.linalg.norm(self.mu_c)) ** 2) / self.sigma_c ** 2
        for j in range(self.n_envs):
            if j != self.special_i and \
                    float(self.mus[self.special_i] @ self.mus[j]) <= bound + 1e-9:
                return j
        raise ConstructionError("no witness environment")

    def digest(self) -> str:
        blob = json.dumps({
            "d_c": self.d_c, "d_e": self.d_e, "sigma_c": self.sigma_c,
            "special_i": self.special_i, "radius": self.radius,
            "mu_c": self.mu_c.tolist(), "mus": self.mus.tolist()},
            sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def default_construction(d_e: int, d_c: int = 8, n_envs: int = 3,
                         sigma_c: float = 1.0,
                         mc_samples: int = 1_000_000) -> ConstructionSpec:
    """Deterministic means meeting the geometry with room to spare.

    mu_c = sqrt(d_e) e_1; the far-separated mean is 8 sqrt(d_e) e_1; the
    witness mean is anti-aligned on the same axis scaled so the inner
    product equals -|mu_c|^2/sigma_c^2 exactly; remaining means sit on
    fresh orthogonal axes at twice the ball radius.
    """
    if n_envs < 2:
        raise ConstructionError("need at least 2 environments")
    if d_e < n_envs - 1:
        raise ConstructionError(
            f"d_e={d_e} too small for {n_envs} orthogonal environment means")
    mu_c = np.zeros(d_c)
    mu_c[0] = math.sqrt(d_e)
    mus = np.zeros((n_envs, d_e))
    mus[0, 0] = 8.0 * math.sqrt(d_e)
    mus[1, 0] = -d_e / (sigma_c ** 2 * 8.0 * math.sqrt(d_e))
    for k in range(2, n_envs):
        mus[k, k - 1] = 2.0 * math.sqrt(2.0 * d_e)
    spec = ConstructionSpec(d_c=d_c, d_e=d_e, mu_c=mu_c, mus=mus,
                            sigma_c=sigma_c, mc_samples=mc_samples)
    spec.validate()
    return spec


@dataclass
class PiecewiseClassifier:
    """Features pass z_c always; z_e only outside the exclusion balls.

    Balls of the construction radius sit at both signs of every
    non-special environment mean. The bundled predictor pairs the
    invariant slope 2 mu_c / sigma_c^2 with 2 mu_i on the non-causal
    block.
    """

    spec: ConstructionSpec
    centers: np.ndarray = field(init=False)
    w: np.ndarray = field(init=False)

    def __post_init__(self):
        s = self.spec
        others = [k for k in range(s.n_envs) if k != s.special_i]
        self.centers = np.concatenate([s.mus[others], -s.mus[others]])
        self.w = np.concatenate([2.0 * s.mu_c / s.sigma_c ** 2,
                                 2.0 * s.mus[s.special_i]])

    def invariant_branch(self, z_e: np.ndarray) -> np.ndarray:
        """True where z_e lies in some exclusion ball (z_e suppressed)."""
        z_e = np.atleast_2d(z_e)
        sq = (z_e ** 2).sum(axis=1)[:, None] - 2.0 * z_e @ self.centers.T \
            + (self.centers ** 2).sum(axis=1)[None, :]
        return (sq <= self.spec.radius ** 2).any(axis=1)

    def features(self, z_c: np.ndarray, z_e: np.ndarray) -> np.ndarray:
        z_c = np.atleast_2d(z_c)
        z_e = np.atleast_2d(z_e)
        mask = self.invariant_branch(z_e)
        out = np.concatenate([z_c, np.where(mask[:, None], 0.0, z_e)], axis=1)
        return out

    def predictor_for(self, k: int) -> np.ndarray:
        """The per-env optimal predictor family member for environment k."""
        return np.concatenate([2.0 * self.spec.mu_c / self.spec.sigma_c ** 2,
                               2.0 * self.spec.mus[k]])


def build_counterexample(spec: ConstructionSpec) -> PiecewiseClassifier:
    spec.validate()
    return PiecewiseClassifier(spec=spec)


def invariant_reference(spec: ConstructionSpec) -> PiecewiseClassifier:
    """Same interface, but z_e is suppressed everywhere (radius inf)."""
    inf_spec = ConstructionSpec(
        d_c=spec.d_c, d_e=spec.d_e, mu_c=spec.mu_c, mus=spec.mus,
        sigma_c=spec.sigma_c, special_i=spec.special_i,
        radius=math.inf, mc_samples=spec.mc_samples)
    clf = PiecewiseClassifier(spec=inf_spec)
    clf.w = np.concatenate([2.0 * spec.mu_c / spec.sigma_c ** 2,
                            np.zeros(spec.d_e)])
    return clf


@dataclass
class ClauseResult:
    name: str
    estimate: float
    half_width: float
    threshold: float
    direction: str
    passed: bool
    decisive: bool

    def line(self) -> str:
        op = "<=" if self.direction == "le" else ">="
        state = "pass" if self.passed else "FAIL"
        extra = "" if self.decisive else " (CI inconclusive at cap)"
        return (f"  {self.name}: {self.estimate:.6g} +/- "
                f"{self.half_width:.2g} {op} {self.threshold} -> "
                f"{state}{extra}")


@dataclass
class Certificate:
    passed: bool
    clauses: list[ClauseResult]
    per_env_penalty: dict[int, float]
    per_env_loss: dict[int, float]
    mc_samples: int
    seed: int
    spec_digest: str
    d_e: int
    widenings: int

    def summary(self) -> str:
        head = "certificate PASSED" if self.passed else "certificate FAILED"
        lines = [f"{head} (d_e={self.d_e}, {self.mc_samples} MC samples, "
                 f"seed={self.seed}, spec={self.spec_digest}, "
                 f"widenings={self.widenings})"]
        lines += [c.line() for c in self.clauses]
        lines.append("  per-env penalty: " + "  ".join(
            f"{k}:{v:.3g}" for k, v in sorted(self.per_env_penalty.items())))
        lines.append("  per-env loss:    " + "  ".join(
            f"{k}:{v:.4f}" for k, v in sorted(self.per_env_loss.items())))
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(CERT_COMMENT + "\n")
            fh.write(f"# spec={self.spec_digest} seed={self.seed} "
                     f"samples={self.mc_samples} d_e={self.d_e}\n")
            fh.write("clause,estimate,half_width,threshold,direction,"
                     "passed,decisive\n")
            for c in self.clauses:
                fh.write(f"{c.name},{c.estimate!r},{c.half_width!r},"
                         f"{c.threshold!r},{c.direction},"
                         f"{int(c.passed)},{int(c.decisive)}\n")
            for k in sorted(self.per_env_penalty):
                fh.write(f"penalty_env_{k},{self.per_env_penalty[k]!r},,,"
                         f"le,,\n")


def _clause(name: str, estimate: float, half_width: float, threshold: float,
            direction: str) -> ClauseResult:
    if direction == "le":
        passed = estimate + half_width <= threshold
        decisive = passed or (estimate - half_width > threshold)
    else:
        passed = estimate - half_width >= threshold
        decisive = passed or (estimate + half_width < threshold)
    return ClauseResult(name=name, estimate=estimate, half_width=half_width,
                        threshold=threshold, direction=direction,
                        passed=passed, decisive=decisive)


def _mc_pass(clf: PiecewiseClassifier, spec: ConstructionSpec, n: int,
             seed, chunk: int = 20_000):
    """One full Monte-Carlo accumulation over all environments."""
    e = spec.n_envs
    d = spec.d_c + spec.d_e
    i, j = spec.special_i, spec.witness_j
    w = clf.w
    w_j = clf.predictor_for(j)
    w_inv_c = 2.0 * spec.mu_c / spec.sigma_c ** 2
    root = np.random.SeedSequence(seed)
    stats = {}
    for env in range(e):
        rng = np.random.Generator(np.random.Philox(root.spawn(1)[0]))
        acc = {"n": 0, "loss": 0.0, "loss2": 0.0, "diff": 0.0, "diff2": 0.0,
               "g": np.zeros(d), "g2": np.zeros(d),
               "transfer": 0.0, "transfer2": 0.0}
        remaining = n
        while remaining > 0:
            m = min(chunk, remaining)
            remaining -= m
            y = np.where(rng.random(m) < 0.5, 1.0, -1.0)
            z_c = y[:, None] * spec.mu_c + \
                spec.sigma_c * rng.standard_normal((m, spec.d_c))
            z_e = y[:, None] * spec.mus[env] + rng.standard_normal((m, spec.d_e))
            feats = clf.features(z_c, z_e)
            margins = y * (feats @ w)
            losses = slv.softplus(-margins)
            inv_losses = slv.softplus(-(y * (z_c @ w_inv_c)))
            diffs = losses - inv_losses
            grad_rows = (-slv.sigmoid(-margins) * y)[:, None] * feats
            acc["n"] += m
            acc["loss"] += float(losses.sum())
            acc["loss2"] += float((losses ** 2).sum())
            acc["diff"] += float(diffs.sum())
            acc["diff2"] += float((diffs ** 2).sum())
            acc["g"] += grad_rows.sum(axis=0)
            acc["g2"] += (grad_rows ** 2).sum(axis=0)
            if env == i:
                tm = y * (feats @ w_j)
                tl = slv.softplus(-tm)
                acc["transfer"] += float(tl.sum())
                acc["transfer2"] += float((tl ** 2).sum())
        stats[env] = acc
    return stats


def certify_counterexample(clf: PiecewiseClassifier, spec: ConstructionSpec,
                           mc_samples: int | None = None, seed: int = 0,
                           max_widenings: int = 2,
                           penalty_threshold: float = 0.05,
                           excess_threshold: float = 0.05,
                           transfer_threshold: float = 0.5) -> Certificate:
    """Monte-Carlo certificate of the three counterexample clauses.

    Gradient penalty (sum over envs of the squared predictor-gradient
    norm, with the sampling bias of the squared mean subtracted), excess
    pooled loss over the always-invariant reference, and the transfer
    statistic of the witness environment's predictor evaluated on the
    far-separated environment. Clauses must clear their thresholds
    including the 95% half-width; inconclusive intervals double the
    sample count up to max_widenings before failing with the achieved
    width.
    """
    n = spec.mc_samples if mc_samples is None else mc_samples
    e = spec.n_envs
    widenings = 0
    while True:
        stats = _mc_pass(clf, spec, n, (seed, widenings))
        penalty, penalty_hw = 0.0, 0.0
        per_env_penalty, per_env_loss = {}, {}
        excess, excess_var = 0.0, 0.0
        for env, acc in stats.items():
            cnt = acc["n"]
            g_bar = acc["g"] / cnt
            g_var = acc["g2"] / cnt - g_bar ** 2
            # |mean|^2 is biased upward by the mean's variance; subtract
            # it and fold it into the width as well.
            correction = float(g_var.sum()) / cnt
            sq = float(g_bar @ g_bar)
            per_env_penalty[env] = max(sq - correction, 0.0)
            penalty += per_env_penalty[env]
            penalty_hw += 1.96 * math.sqrt(
                float(4.0 * (g_bar ** 2 * g_var).sum()) / cnt) + correction
            per_env_loss[env] = acc["loss"] / cnt
            excess += acc["diff"] / cnt / e
            excess_var += max(acc["diff2"] / cnt - (acc["diff"] / cnt) ** 2,
                              0.0) / cnt / e ** 2
        t_acc = stats[spec.special_i]
        t_mean = t_acc["transfer"] / t_acc["n"]
        t_var = max(t_acc["transfer2"] / t_acc["n"] - t_mean ** 2, 0.0)
        clauses = [
            _clause("irmv1_penalty", penalty, penalty_hw,
                    penalty_threshold, "le"),
            _clause("excess_erm", excess, 1.96 * math.sqrt(excess_var),
                    excess_threshold, "le"),
            _clause("transfer_statistic", t_mean,
                    1.96 * math.sqrt(t_var / t_acc["n"]),
                    transfer_threshold, "ge"),
        ]
        if all(c.decisive for c in clauses) or widenings >= max_widenings:
            return Certificate(
                passed=all(c.passed for c in clauses), clauses=clauses,
                per_env_penalty=per_env_penalty, per_env_loss=per_env_loss,
                mc_samples=n, seed=seed, spec_digest=spec.digest(),
                d_e=spec.d_e, widenings=widenings)
        widenings += 1
        n *= 2
