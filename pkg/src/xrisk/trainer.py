"""Training loops over shared model families.

One loop per algorithm: the three-term per-environment objective with
its adversarial mixture, plus ERM, gradient-penalty, loss-variance, and
worst-group baselines. Runs log a metrics row per iteration (per-env
losses, both transfer-risk variants, gradient penalty, weight ratio,
predictor distance, mixture weights), support the exact population path
for 2-d linear suites, and serialize checkpoints as flat binary plus a
JSON manifest.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import linear2d as l2
from . import objectives as obj
from . import solver as slv
from .envgen import EnvironmentSuite, philox
from .models import LinearFeatureMap, OneHiddenTanh

ALGORITHMS = ("trm", "erm", "irmv1", "rex", "groupdro")
REQUIRED_COLUMNS = ("iter", "env", "loss", "transfer_risk_sumsup",
                    "transfer_risk_sumsum", "irmv1_penalty", "weight_ratio",
                    "pred_distance")
METRICS_COMMENT = "# xrisk-metrics v1"
CHECKPOINT_MAGIC = b"XRSKCKPT"


class TrainerError(RuntimeError):
    """Aborted run; carries the last finite state for post-mortems."""

    def __init__(self, message, model=None, metrics=None, iteration=None):
        super().__init__(message)
        self.model = model
        self.metrics = metrics
        self.iteration = iteration


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def update(self, key: str, param: np.ndarray,
               grad: np.ndarray) -> np.ndarray:
        g = np.asarray(grad, dtype=np.float64)
        t = self.t.get(key, 0) + 1
        self.t[key] = t
        m = self.beta1 * self.m.get(key, np.zeros_like(g)) + (1 - self.beta1) * g
        v = self.beta2 * self.v.get(key, np.zeros_like(g)) + \
            (1 - self.beta2) * g * g
        self.m[key], self.v[key] = m, v
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        return param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Momentum:
    """SGD with a momentum buffer per parameter name."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.buf: dict[str, np.ndarray] = {}

    def update(self, key: str, param: np.ndarray,
               grad: np.ndarray) -> np.ndarray:
        g = np.asarray(grad, dtype=np.float64)
        buf = self.momentum * self.buf.get(key, np.zeros_like(g)) + g
        self.buf[key] = buf
        return param - self.lr * buf


@dataclass
class TrainConfig:
    """One training run's complete recipe."""

    algorithm: str
    iterations: int = 2000
    seed: int = 0
    eta_phi: float = 0.01
    eta_w: float = 0.01
    eta_alpha: float = 0.1
    momentum: float = 0.9
    optimizer: str = "adam"
    population_mode: bool = False
    constrained_2d: bool = False
    init_angle: float = math.pi / 4
    hyper: obj.TRMHyper = field(default_factory=obj.TRMHyper)
    lam_irm: float = 10.0
    beta_rex: float = 10.0
    eta_dro: float = 0.1
    warmup: int = 0
    metric_every: int = 1
    model: str = "linear"
    hidden_width: int = 16
    feature_dim: int = 1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        for name in ("eta_phi", "eta_w", "eta_alpha", "eta_dro"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.model not in ("linear", "mlp"):
            raise ValueError(f"unknown model family {self.model!r}")
        if self.warmup < 0 or self.metric_every < 1:
            raise ValueError("warmup must be >= 0 and metric_every >= 1")


def config_digest(config: TrainConfig) -> str:
    """Stable short hash of the full config, for checkpoint manifests."""
    blob = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ModelFamily:
    """Feature map, shared predictor, and per-env predictor cache."""

    feature_map: object
    w_all: np.ndarray
    w_cache: dict[int, np.ndarray] = field(default_factory=dict)

    def params(self) -> dict[str, np.ndarray]:
        out = dict(self.feature_map.get_params())
        out["w_all"] = self.w_all
        return out


@dataclass
class RunMetrics:
    """Per-iteration rows in insertion order, CSV-serializable."""

    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    wall_time: float = 0.0

    def add(self, row: dict) -> None:
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([row.get(name, np.nan) for row in self.rows],
                        dtype=np.float64)

    def iter_index(self) -> np.ndarray:
        return self.column("iter").astype(np.int64)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(METRICS_COMMENT + "\n")
            fh.write(",".join(self.columns) + "\n")
            for row in self.rows:
                cells = []
                for col in self.columns:
                    v = row.get(col)
                    if v is None or (isinstance(v, float) and math.isnan(v)):
                        cells.append("")
                    else:
                        # float() strips numpy scalar types so repr stays "3.0"
                        cells.append(repr(float(v)) if isinstance(v, float)
                                     else str(v))
                fh.write(",".join(cells) + "\n")

    @classmethod
    def from_csv(cls, path) -> "RunMetrics":
        with open(path) as fh:
            comment = fh.readline().strip()
            if not comment.startswith("#"):
                raise ValueError("missing metrics version comment")
            columns = fh.readline().strip().split(",")
            rows = []
            for line in fh:
                cells = line.rstrip("\n").split(",")
                row = {}
                for col, cell in zip(columns, cells):
                    if cell == "":
                        continue
                    row[col] = int(cell) if col in ("iter", "env") else float(cell)
                rows.append(row)
        return cls(columns=columns, rows=rows)


def _metric_columns(env_ids, algorithm: str, variant: str) -> list[str]:
    cols = list(REQUIRED_COLUMNS)
    cols += ["a", "b", "w_norm", "erm_term", "transfer_term", "grad_match_term"]
    cols += [f"loss_env_{i}" for i in env_ids]
    if algorithm == "groupdro" or (algorithm == "trm" and variant == "sum_sup"):
        cols += [f"alpha_{i}" for i in env_ids]
    if algorithm == "trm":
        cols += [f"tloss_{i}" for i in env_ids]
    return cols


def _ratio(a: float, b: float) -> float:
    return abs(b / a) if a != 0.0 else math.inf


def _make_optimizer(config: TrainConfig, lr: float):
    if config.optimizer == "adam":
        return Adam(lr)
    return Momentum(lr, config.momentum)


def _check_finite(values, iteration: int, model, metrics):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise TrainerError(
                f"non-finite loss or gradient at iteration {iteration}",
                model=model, metrics=metrics, iteration=iteration)


def _sync_pair(model: ModelFamily, ab: np.ndarray, w: np.ndarray) -> None:
    model.feature_map.set_params({"phi": ab.reshape(2, 1).copy()})
    model.w_all = np.atleast_1d(np.asarray(w, dtype=np.float64)).copy()


def _sum_pop_steps(parts):
    """Combine per-owner steps into one full-sum step.

    per_env is shared (all owners see the same pooled predictor);
    transfer losses accumulate because every env is a transfer target
    of every other owner.
    """
    tl: dict[int, float] = {}
    for p in parts:
        for i, v in p.transfer_losses.items():
            tl[i] = tl.get(i, 0.0) + v
    keys = ("erm_term", "transfer_term", "grad_match_term")
    return l2.PopStep(
        g_a=sum(p.g_a for p in parts), g_b=sum(p.g_b for p in parts),
        g_w=sum(p.g_w for p in parts), per_env=parts[0].per_env,
        components={k: sum(p.components[k] for p in parts) for k in keys},
        transfer_losses=tl)


def _train_population(suite: EnvironmentSuite, config: TrainConfig):
    """Exact 2-d path: risks and derivatives via Gaussian quadrature."""
    pop = l2.Population2D.from_suite(suite)
    e = pop.n_envs
    env_ids = list(range(e))
    hyper = config.hyper
    rng = philox(config.seed)
    ab = np.array([math.cos(config.init_angle), math.sin(config.init_angle)])
    w_all = np.array(0.0)
    opt_phi = _make_optimizer(config, config.eta_phi)
    opt_w = _make_optimizer(config, config.eta_w)
    dro_weights = np.full(e, 1.0 / e)
    alpha_states: dict[int, obj.SimplexWeights] = {}
    model = ModelFamily(feature_map=LinearFeatureMap.pair(*ab), w_all=w_all)
    metrics = RunMetrics(columns=_metric_columns(env_ids, config.algorithm,
                                                 hyper.variant))
    started = time.perf_counter()

    for t in range(config.iterations):
        a, b, w = float(ab[0]), float(ab[1]), float(w_all)
        lam_eff = _warm_lambda(config, t)
        row: dict = {"iter": t, "env": -1}
        if config.algorithm == "trm":
            if hyper.full_sum:
                owners = env_ids
                sw = None
                alpha = None
            else:
                owners = [int(rng.integers(e))]
                row["env"] = owners[0]
                sw = None
                alpha = None
                if hyper.variant == "sum_sup":
                    sw = alpha_states.setdefault(
                        owners[0], obj.SimplexWeights.uniform(
                            env_ids, owners[0], config.eta_alpha))
                    alpha = sw.alpha
            parts = [l2.trm_pop_step(pop, a, b, w, q, alpha, hyper.lam,
                                     hyper.variant, hyper.neumann.damping)
                     for q in owners]
            step = parts[0] if len(parts) == 1 else _sum_pop_steps(parts)
            loss = step.components["erm_term"] + step.components["transfer_term"] \
                - hyper.lam * step.components["grad_match_term"]
            row.update({k: step.components[k] for k in
                        ("erm_term", "transfer_term", "grad_match_term")})
        elif config.algorithm == "erm":
            step = l2.erm_pop_step(pop, a, b, w)
            loss = step.components["risk_sum"]
        elif config.algorithm == "irmv1":
            step = l2.irmv1_pop_step(pop, a, b, w, lam_eff)
            loss = step.components["risk_sum"] + \
                lam_eff * step.components["irmv1_penalty"]
        elif config.algorithm == "rex":
            step = l2.rex_pop_step(pop, a, b, w, lam_eff)
            loss = step.components["risk_sum"] + \
                lam_eff * step.components["loss_variance"]
        else:
            step = l2.groupdro_pop_step(pop, a, b, w, dro_weights)
            loss = step.components["weighted_risk"]

        _check_finite([loss, step.g_a, step.g_b, step.g_w], t, model, metrics)
        ab_new = opt_phi.update("phi", ab, np.array([step.g_a, step.g_b]))
        if config.constrained_2d:
            ab_new = ab_new / np.linalg.norm(ab_new)
        w_new = opt_w.update("w_all", w_all, np.asarray(step.g_w))
        _check_finite([ab_new, w_new], t, model, metrics)
        ab, w_all = ab_new, w_new

        if config.algorithm == "trm" and hyper.variant == "sum_sup":
            alpha_states[owners[0]] = obj.eg_update(sw, step.transfer_losses)
            for i, v in alpha_states[owners[0]].alpha.items():
                row[f"alpha_{i}"] = v
        if config.algorithm == "trm":
            for i, v in step.transfer_losses.items():
                row[f"tloss_{i}"] = v
        if config.algorithm == "groupdro":
            dro_weights = obj.groupdro_weights_update(
                dro_weights, step.per_env, config.eta_dro)
            for i in env_ids:
                row[f"alpha_{i}"] = float(dro_weights[i])

        if t % config.metric_every == 0 or t == config.iterations - 1:
            a1, b1, w1 = float(ab[0]), float(ab[1]), float(w_all)
            pieces = pop.env_pieces(a1, b1, w1)
            tv = pop.transfer_values(a1, b1)
            row.update({
                "loss": loss,
                "transfer_risk_sumsup": float(tv["sum_sup"]),
                "transfer_risk_sumsum": float(tv["sum_sum"]),
                "irmv1_penalty": float((pieces["G"] ** 2).sum()),
                "weight_ratio": _ratio(a1, b1),
                "pred_distance": float(pop.pred_distance(a1, b1)),
                "a": a1, "b": b1, "w_norm": abs(w1),
            })
            for i in env_ids:
                row[f"loss_env_{i}"] = float(pieces["R"][i])
            metrics.add(row)

    _sync_pair(model, ab, w_all)
    m, s = pop.margins(float(ab[0]), float(ab[1]))
    for i in env_ids:
        model.w_cache[i] = np.atleast_1d(2.0 * m[i] / s ** 2)
    metrics.wall_time = time.perf_counter() - started
    return model, metrics


def _warm_lambda(config: TrainConfig, t: int) -> float:
    """Penalty warm-up: unit weight before the switch iteration."""
    full = {"irmv1": config.lam_irm, "rex": config.beta_rex}.get(
        config.algorithm)
    if full is None:
        return config.hyper.lam
    return 1.0 if t < config.warmup else full


def _init_feature_map(suite: EnvironmentSuite, config: TrainConfig):
    d = suite.datasets[0].d
    if config.model == "mlp":
        return OneHiddenTanh.init(d, config.hidden_width, config.feature_dim,
                                  seed=config.seed)
    if d == 2 and config.feature_dim == 1:
        return LinearFeatureMap.pair(math.cos(config.init_angle),
                                     math.sin(config.init_angle))
    rng = philox(np.random.SeedSequence(config.seed).spawn(1)[0])
    return LinearFeatureMap(rng.standard_normal((d, config.feature_dim))
                            / math.sqrt(d))


def _solve_all(feature_map, suite, cache: dict, tol: float = 1e-8):
    """Per-env optimal predictors, warm-started from the previous solves."""
    out = {}
    for ds in suite.datasets:
        res = obj.solve_env_predictor(feature_map, ds, tol=tol,
                                      w0=cache.get(ds.env_id))
        cache[ds.env_id] = res.w
        out[ds.env_id] = res.w
    return out


def _metric_bundle(feature_map, w_all, suite, cache):
    """Shared per-iteration metric set for the sampled-data path."""
    ids = sorted(suite.env_ids())
    solved = _solve_all(feature_map, suite, cache)
    cross = {q: {p: obj.env_risk_value(feature_map, solved[q], suite.dataset(p))
                 for p in ids if p != q} for q in ids}
    sumsup = sum(max(row.values()) for row in cross.values())
    sumsum = sum(sum(row.values()) for row in cross.values())
    pairs = [(i, j) for k, i in enumerate(ids) for j in ids[k + 1:]]
    pred = sum(float(np.sum((solved[i] - solved[j]) ** 2))
               for i, j in pairs) / len(pairs)
    per_env = {i: obj.env_risk_value(feature_map, w_all, suite.dataset(i))
               for i in ids}
    penalty = obj.irmv1_penalty_value(feature_map, w_all, suite)
    return {"sumsup": sumsup, "sumsum": sumsum, "pred": pred,
            "per_env": per_env, "penalty": penalty}


def _apply_updates(model: ModelFamily, opt_phi, opt_w, grads: dict,
                   config: TrainConfig):
    params = model.feature_map.get_params()
    new_params = {name: opt_phi.update(name, params[name], grads[name])
                  for name in params}
    if config.constrained_2d and isinstance(model.feature_map, LinearFeatureMap) \
            and new_params["phi"].shape == (2, 1):
        new_params["phi"] = new_params["phi"] / np.linalg.norm(new_params["phi"])
    model.feature_map.set_params(new_params)
    model.w_all = opt_w.update("w_all", model.w_all, grads["w_all"])


def _train_general(suite: EnvironmentSuite, config: TrainConfig):
    """Sampled-data path over the autodiff tape; any model family."""
    ids = sorted(suite.env_ids())
    e = len(ids)
    hyper = config.hyper
    rng = philox(config.seed)
    model = ModelFamily(feature_map=_init_feature_map(suite, config),
                        w_all=np.zeros(config.feature_dim))
    opt_phi = _make_optimizer(config, config.eta_phi)
    opt_w = _make_optimizer(config, config.eta_w)
    dro_weights = np.full(e, 1.0 / e)
    alpha_states: dict[int, obj.SimplexWeights] = {}
    metrics = RunMetrics(columns=_metric_columns(ids, config.algorithm,
                                                 hyper.variant))
    started = time.perf_counter()

    for t in range(config.iterations):
        lam_eff = _warm_lambda(config, t)
        row: dict = {"iter": t, "env": -1}
        tloss: dict[int, float] = {}
        if config.algorithm == "trm":
            if hyper.full_sum:
                owners = ids
                sw = None
            else:
                owners = [ids[int(rng.integers(e))]]
                row["env"] = owners[0]
                sw = None
                if hyper.variant == "sum_sup":
                    sw = alpha_states.setdefault(
                        owners[0], obj.SimplexWeights.uniform(
                            ids, owners[0], config.eta_alpha))
            grads = {}
            loss = 0.0
            comps = dict.fromkeys(
                ("erm_term", "transfer_term", "grad_match_term"), 0.0)
            for q in owners:
                res = obj.trm_step_objective(model.feature_map, model.w_all,
                                             suite, q, sw, hyper,
                                             w_q_warm=model.w_cache.get(q))
                model.w_cache[q] = res.w_q
                for k, g in res.grads.items():
                    grads[k] = grads[k] + g if k in grads else g
                loss += res.report.total
                for k in comps:
                    comps[k] += res.report.components[k]
                for p in ids:
                    if p != q:
                        tloss[p] = tloss.get(p, 0.0) + obj.env_risk_value(
                            model.feature_map, res.w_q, suite.dataset(p))
            row.update(comps)
        elif config.algorithm == "erm":
            rep = obj.erm_risk(model.feature_map, model.w_all, suite,
                               differentiable=True)
            grads = dict(rep.grads)
            grads["w_all"] = grads.pop("w")
            loss = rep.total
        elif config.algorithm in ("irmv1", "rex"):
            fn = obj.irmv1_risk if config.algorithm == "irmv1" else obj.rex_risk
            rep = fn(model.feature_map, model.w_all, suite, lam_eff,
                     differentiable=True)
            grads = dict(rep.grads)
            grads["w_all"] = grads.pop("w")
            loss = rep.total
            if lam_eff > 1.0:
                grads = {k: g / lam_eff for k, g in grads.items()}
        else:
            nodes = model.feature_map.make_nodes()
            w_node = ad.leaf(model.w_all, name="w_all")
            per_nodes = [obj.env_risk_node(model.feature_map, nodes, w_node,
                                           suite.dataset(i)) for i in ids]
            total = None
            for qw, node in zip(dro_weights, per_nodes):
                term = ad.mul(ad.constant(float(qw)), node)
                total = term if total is None else ad.add(total, term)
            gmap = ad.grad(total, list(nodes.values()) + [w_node])
            grads = {name: gmap[node].value for name, node in nodes.items()}
            grads["w_all"] = gmap[w_node].value
            loss = float(total.value)
            dro_losses = np.array([float(n.value) for n in per_nodes])

        _check_finite([loss, *grads.values()], t, model, metrics)
        last_good = (copy.deepcopy(model.feature_map.get_params()),
                     model.w_all.copy())
        _apply_updates(model, opt_phi, opt_w, grads, config)
        finite = all(np.all(np.isfinite(v))
                     for v in model.feature_map.get_params().values())
        if not finite or not np.all(np.isfinite(model.w_all)):
            model.feature_map.set_params(last_good[0])
            model.w_all = last_good[1]
            raise TrainerError(f"non-finite parameters at iteration {t}",
                               model=model, metrics=metrics, iteration=t)

        if config.algorithm == "trm":
            if hyper.variant == "sum_sup":
                alpha_states[owners[0]] = obj.eg_update(sw, tloss)
                for i, v in alpha_states[owners[0]].alpha.items():
                    row[f"alpha_{i}"] = v
            for i, v in tloss.items():
                row[f"tloss_{i}"] = v
        if config.algorithm == "groupdro":
            dro_weights = obj.groupdro_weights_update(dro_weights, dro_losses,
                                                      config.eta_dro)
            for i, v in zip(ids, dro_weights):
                row[f"alpha_{i}"] = float(v)

        if t % config.metric_every == 0 or t == config.iterations - 1:
            bundle = _metric_bundle(model.feature_map, model.w_all, suite,
                                    model.w_cache)
            row.update({
                "loss": loss,
                "transfer_risk_sumsup": bundle["sumsup"],
                "transfer_risk_sumsum": bundle["sumsum"],
                "irmv1_penalty": bundle["penalty"],
                "pred_distance": bundle["pred"],
                "w_norm": float(np.linalg.norm(model.w_all)),
            })
            if isinstance(model.feature_map, LinearFeatureMap) and \
                    model.feature_map.phi.shape == (2, 1):
                a1, b1 = model.feature_map.ab
                row.update({"a": a1, "b": b1, "weight_ratio": _ratio(a1, b1)})
            for i in ids:
                row[f"loss_env_{i}"] = bundle["per_env"][i]
            metrics.add(row)

    metrics.wall_time = time.perf_counter() - started
    return model, metrics


def train(suite: EnvironmentSuite, config: TrainConfig):
    if config.population_mode:
        return _train_population(suite, config)
    return _train_general(suite, config)


def train_trm(suite: EnvironmentSuite, config: TrainConfig):
    if config.algorithm != "trm":
        raise ValueError("train_trm needs algorithm='trm'")
    return train(suite, config)


def train_baseline(suite: EnvironmentSuite, config: TrainConfig):
    if config.algorithm == "trm":
        raise ValueError("train_baseline covers erm/irmv1/rex/groupdro")
    return train(suite, config)


def predictor_distance(model: ModelFamily, suite: EnvironmentSuite) -> float:
    """Mean squared distance between per-env optimal predictors."""
    ids = sorted(suite.env_ids())
    if len(ids) < 2:
        raise ValueError("predictor distance needs >= 2 environments")
    solved = _solve_all(model.feature_map, suite, model.w_cache)
    pairs = [(i, j) for k, i in enumerate(ids) for j in ids[k + 1:]]
    return sum(float(np.sum((solved[i] - solved[j]) ** 2))
               for i, j in pairs) / len(pairs)


def regret_trace(metrics: RunMetrics, baseline_iter: int = 100,
                 factor: float = 3.0) -> dict:
    """Mixture-weight regret of a sum_sup run, from the logged rows.

    For each owner environment Q the regret after n of its turns is
    max_P avg losses of P minus the avg mixture gain actually collected.
    The combined trace averages current regrets over owners seen so far;
    bounded means trace(T)*sqrt(T) stays within `factor` times its value
    at `baseline_iter` (the claimed 1/sqrt(T) decay, self-normalized).
    """
    counts: dict[int, int] = {}
    cum_loss: dict[int, dict[int, float]] = {}
    cum_gain: dict[int, float] = {}
    iters, combined = [], []
    for row in metrics.rows:
        q = row.get("env", -1)
        tloss = {}
        for key, v in row.items():
            if key.startswith("tloss_"):
                tloss[int(key.split("_")[1])] = v
        alpha = {}
        for key, v in row.items():
            if key.startswith("alpha_"):
                alpha[int(key.split("_")[1])] = v
        if q < 0 or not tloss or not alpha:
            continue
        gain = sum(alpha.get(p, 0.0) * lv for p, lv in tloss.items())
        counts[q] = counts.get(q, 0) + 1
        acc = cum_loss.setdefault(q, {})
        for p, lv in tloss.items():
            acc[p] = acc.get(p, 0.0) + lv
        cum_gain[q] = cum_gain.get(q, 0.0) + gain
        regrets = [max(sums.values()) / counts[o] - cum_gain[o] / counts[o]
                   for o, sums in cum_loss.items()]
        iters.append(int(row["iter"]))
        combined.append(float(np.mean(regrets)))
    iters = np.array(iters, dtype=np.int64)
    combined = np.array(combined)
    result = {"iters": iters, "combined": combined, "bounded": None,
              "ratio": math.nan}
    if len(iters) and iters[-1] > 2 * baseline_iter:
        base_idx = int(np.searchsorted(iters, baseline_iter))
        base = combined[base_idx] * math.sqrt(iters[base_idx] + 1)
        final = combined[-1] * math.sqrt(iters[-1] + 1)
        result["ratio"] = final / base if base > 0 else 0.0
        result["bounded"] = bool(final <= factor * base or base == 0.0)
    return result


def save_checkpoint(path, model: ModelFamily, config: TrainConfig) -> None:
    """Flat binary: magic, u32 manifest length, JSON manifest, f64 arrays."""
    params = model.params()
    names = sorted(params)
    manifest = {
        "version": 1,
        "algorithm": config.algorithm,
        "config_hash": config_digest(config),
        "params": [{"name": n, "shape": list(np.shape(params[n]))}
                   for n in names],
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.asarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (params dict, manifest dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (length,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(length).decode())
        params = {}
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * count), dtype="<f8").copy()
            params[entry["name"]] = arr.reshape(shape)
    return params, manifest
