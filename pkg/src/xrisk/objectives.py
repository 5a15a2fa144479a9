"""Risk functionals over environment suites.

ERM, the gradient-penalty invariance objective, the loss-variance objective,
worst-group exponentiated weighting, transfer risk in its sum-sup and
sum-sum variants, and the three-term per-environment training objective
whose value couples a pooled predictor, a frozen per-environment optimal
predictor, and a weighted gradient-matching correction.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import solver as slv
from .envgen import Dataset, EnvironmentSuite

logger = logging.getLogger("xrisk.objectives")


@dataclass
class SimplexWeights:
    """Adversarial mixture weights over all environments except owner_q."""

    owner_q: int
    alpha: dict[int, float]
    eta: float = 0.1

    def __post_init__(self):
        if self.owner_q in self.alpha:
            raise ValueError(
                f"weights include the owner environment {self.owner_q}")
        vals = np.array(list(self.alpha.values()))
        if np.any(vals < 0):
            raise ValueError("simplex weights must be non-negative")
        if abs(vals.sum() - 1.0) > 1e-9:
            raise ValueError(f"simplex weights sum to {vals.sum()}, expected 1")

    @classmethod
    def uniform(cls, env_ids, owner_q: int, eta: float = 0.1) -> "SimplexWeights":
        others = [e for e in env_ids if e != owner_q]
        return cls(owner_q=owner_q,
                   alpha={e: 1.0 / len(others) for e in others}, eta=eta)

    def as_items(self):
        return sorted(self.alpha.items())


@dataclass
class RiskReport:
    """Per-environment losses plus named objective components."""

    per_env: dict[int, float]
    components: dict[str, float]
    total: float
    node: ad.Node | None = None
    grads: dict[str, np.ndarray] | None = None

    def rows(self, iteration: int) -> list[tuple[int, int, str, float]]:
        """(iteration, env, component, value) rows; -1 marks suite-level."""
        out = [(iteration, env, "env_loss", v)
               for env, v in sorted(self.per_env.items())]
        out += [(iteration, -1, name, v)
                for name, v in sorted(self.components.items())]
        out.append((iteration, -1, "total", self.total))
        return out


@dataclass(frozen=True)
class TRMHyper:
    """Gradient-matching coefficient, series config, and risk variant.

    full_sum replaces the per-step owner draw with a deterministic sum
    over all owner environments; its stationary points coincide with
    the angle-grid objective, which makes it the oracle-comparison mode.
    """

    lam: float = 0.1
    neumann: slv.NeumannConfig = field(default_factory=slv.NeumannConfig)
    variant: str = "sum_sup"
    exact_inverse: bool = False
    full_sum: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.variant not in ("sum_sup", "sum_sum"):
            raise ValueError(f"unknown variant {self.variant!r}")
        # Mixture weights are per-owner state tied to the sampled pass.
        if self.full_sum and self.variant != "sum_sum":
            raise ValueError("full_sum aggregation requires the sum_sum "
                             "variant")


def env_risk_node(feature_map, nodes: dict, w_node: ad.Node,
                  ds: Dataset) -> ad.Node:
    """Differentiable mean logistic loss of one environment."""
    feats = feature_map.apply_node(ds.features, nodes)
    scores = ad.matvec(feats, w_node)
    margins = ad.mul(ad.constant(ds.labels.astype(np.float64)), scores)
    return ad.mean(ad.logistic_loss(margins))


def env_risk_value(feature_map, w: np.ndarray, ds: Dataset) -> float:
    feats = feature_map.apply(ds.features)
    return slv.logistic_risk(feats, ds.labels.astype(np.float64), w)


def erm_risk(feature_map, w: np.ndarray, suite: EnvironmentSuite,
             differentiable: bool = False) -> RiskReport:
    """Per-environment and pooled mean logistic loss.

    The pooled loss is the sample-size-weighted mean, identical to the
    loss on the concatenated data.
    """
    per_env, sizes = {}, {}
    for ds in suite.datasets:
        per_env[ds.env_id] = env_risk_value(feature_map, w, ds)
        sizes[ds.env_id] = ds.n
    n_total = sum(sizes.values())
    pooled = sum(per_env[e] * sizes[e] for e in per_env) / n_total
    report = RiskReport(per_env=per_env,
                        components={"erm_pooled": pooled,
                                    "erm_sum": sum(per_env.values())},
                        total=pooled)
    if differentiable:
        nodes = feature_map.make_nodes()
        w_node = ad.leaf(w, name="w")
        total = None
        for ds in suite.datasets:
            scaled = ad.mul(ad.constant(sizes[ds.env_id] / n_total),
                            env_risk_node(feature_map, nodes, w_node, ds))
            total = scaled if total is None else ad.add(total, scaled)
        report.node = total
        gmap = ad.grad(total, list(nodes.values()) + [w_node])
        report.grads = {name: gmap[node].value for name, node in nodes.items()}
        report.grads["w"] = gmap[w_node].value
    return report


def irmv1_risk(feature_map, w: np.ndarray, suite: EnvironmentSuite,
               lam_irm: float, differentiable: bool = False) -> RiskReport:
    """Sum of env risks plus lam * sum of squared per-env w-gradients.

    The penalty is built through the tape so it stays differentiable in
    both the features and the shared predictor.
    """
    nodes = feature_map.make_nodes()
    w_node = ad.leaf(w, name="w")
    risk_sum, penalty = None, None
    per_env = {}
    for ds in suite.datasets:
        r = env_risk_node(feature_map, nodes, w_node, ds)
        per_env[ds.env_id] = float(r.value)
        g = ad.grad(r, [w_node])[w_node]
        p = ad.norm2(g)
        risk_sum = r if risk_sum is None else ad.add(risk_sum, r)
        penalty = p if penalty is None else ad.add(penalty, p)
    total = ad.add(risk_sum, ad.mul(ad.constant(lam_irm), penalty))
    report = RiskReport(
        per_env=per_env,
        components={"risk_sum": float(risk_sum.value),
                    "irmv1_penalty": float(penalty.value)},
        total=float(total.value), node=total)
    if differentiable:
        gmap = ad.grad(total, list(nodes.values()) + [w_node])
        report.grads = {name: gmap[node].value for name, node in nodes.items()}
        report.grads["w"] = gmap[w_node].value
    return report


def irmv1_penalty_value(feature_map, w: np.ndarray,
                        suite: EnvironmentSuite) -> float:
    """Metric-mode penalty: sum over envs of ||grad_w env risk||^2."""
    total = 0.0
    for ds in suite.datasets:
        feats = feature_map.apply(ds.features)
        g = slv.logistic_risk_grad(feats, ds.labels.astype(np.float64), w)
        total += float(g @ g)
    return total


def rex_risk(feature_map, w: np.ndarray, suite: EnvironmentSuite,
             beta: float, differentiable: bool = False) -> RiskReport:
    """Sum of env risks plus beta times their population variance."""
    if suite.n_envs < 2:
        raise ValueError("loss variance needs at least 2 environments")
    nodes = feature_map.make_nodes()
    w_node = ad.leaf(w, name="w")
    risks = [env_risk_node(feature_map, nodes, w_node, ds)
             for ds in suite.datasets]
    e = len(risks)
    risk_sum = risks[0]
    for r in risks[1:]:
        risk_sum = ad.add(risk_sum, r)
    mean_risk = ad.mul(ad.constant(1.0 / e), risk_sum)
    var = None
    for r in risks:
        dev = ad.square(ad.sub(r, mean_risk))
        var = dev if var is None else ad.add(var, dev)
    var = ad.mul(ad.constant(1.0 / e), var)
    total = ad.add(risk_sum, ad.mul(ad.constant(beta), var))
    report = RiskReport(
        per_env={ds.env_id: float(r.value)
                 for ds, r in zip(suite.datasets, risks)},
        components={"risk_sum": float(risk_sum.value),
                    "loss_variance": float(var.value)},
        total=float(total.value), node=total)
    if differentiable:
        gmap = ad.grad(total, list(nodes.values()) + [w_node])
        report.grads = {name: gmap[node].value for name, node in nodes.items()}
        report.grads["w"] = gmap[w_node].value
    return report


def _eg_core(alpha: np.ndarray, losses: np.ndarray, eta: float) -> np.ndarray:
    # Multiplicative update; the max shift cancels in the normalizer and
    # keeps exp() in range.
    z = eta * losses
    scaled = alpha * np.exp(z - np.max(z))
    return scaled / scaled.sum()


def groupdro_weights_update(weights: np.ndarray, losses: np.ndarray,
                            eta: float) -> np.ndarray:
    """Exponentiated ascent over all environments for a shared predictor."""
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must lie on the simplex")
    return _eg_core(weights, np.asarray(losses, dtype=np.float64), eta)


def eg_update(sw: SimplexWeights, losses: Mapping[int, float],
              eta: float | None = None) -> SimplexWeights:
    """alpha_i <- alpha_i * exp(eta * loss_i) / normalizer over owner's peers."""
    eta = sw.eta if eta is None else eta
    ids = sorted(sw.alpha)
    alpha = np.array([sw.alpha[i] for i in ids])
    loss = np.array([losses[i] for i in ids], dtype=np.float64)
    if not np.all(np.isfinite(loss)):
        raise ValueError("losses must be finite")
    new = _eg_core(alpha, loss, eta)
    return SimplexWeights(owner_q=sw.owner_q,
                          alpha=dict(zip(ids, new)), eta=sw.eta)


def solve_env_predictor(feature_map, ds: Dataset, tol: float = 1e-8,
                        max_iters: int = 100,
                        w0: np.ndarray | None = None) -> slv.SolveResult:
    feats = feature_map.apply(ds.features)
    return slv.solve_optimal_predictor(feats, ds.labels.astype(np.float64),
                                       tol=tol, max_iters=max_iters, w0=w0)


def transfer_risk(feature_map, suite: EnvironmentSuite, variant: str = "sum_sup",
                  eg_states: Mapping[int, SimplexWeights] | None = None,
                  training: bool = False, tol: float = 1e-8,
                  warm_starts: Mapping[int, np.ndarray] | None = None,
                  differentiable: bool = False) -> RiskReport:
    """Transfer risk over a suite, as metric and optionally as a node.

    For each environment Q the per-env optimal predictor is solved and
    scored on every other environment. sum_sup takes the worst single
    environment (the supremum over the simplex sits at a vertex; ties go
    to the lowest env id), sum_sum adds all of them. When EG states are
    given their smoothed mixture is reported as a third component. The
    differentiable node freezes each solved w(Q), so only the direct
    feature dependence carries gradient.
    """
    ids = sorted(suite.env_ids())
    cross: dict[int, dict[int, float]] = {}
    solved: dict[int, np.ndarray] = {}
    skipped = []
    for q in ids:
        ds_q = suite.dataset(q)
        w0 = warm_starts.get(q) if warm_starts else None
        try:
            res = solve_env_predictor(feature_map, ds_q, tol=tol, w0=w0)
        except slv.SingleClassError:
            if training:
                raise
            warnings.warn(f"environment {q} has a single class, skipped")
            skipped.append(q)
            continue
        solved[q] = res.w
        cross[q] = {p: env_risk_value(feature_map, res.w, suite.dataset(p))
                    for p in ids if p != q}
    sum_sup, sum_sum, sum_eg = 0.0, 0.0, 0.0
    worst: dict[int, int] = {}
    for q, row in cross.items():
        losses = sorted(row.items())
        best_env, best_loss = losses[0]
        for env_id, loss in losses[1:]:
            if loss > best_loss:
                best_env, best_loss = env_id, loss
        worst[q] = best_env
        sum_sup += best_loss
        sum_sum += sum(row.values())
        if eg_states and q in eg_states:
            sum_eg += sum(a * row[i] for i, a in eg_states[q].alpha.items())
    per_env = {q: max(row.values()) for q, row in cross.items()}
    components = {"transfer_sumsup": sum_sup, "transfer_sumsum": sum_sum}
    if eg_states:
        components["transfer_eg"] = sum_eg
    total = sum_sup if variant == "sum_sup" else sum_sum
    report = RiskReport(per_env=per_env, components=components, total=total)
    report.components["worst_env"] = float(worst.get(ids[0], -1))
    if skipped:
        report.components["skipped_envs"] = float(len(skipped))
    if differentiable:
        nodes = feature_map.make_nodes()
        node = None
        for q, row in cross.items():
            w_q = ad.stop_gradient(ad.constant(solved[q]))
            targets = [worst[q]] if variant == "sum_sup" else sorted(row)
            for p in targets:
                term = env_risk_node(feature_map, nodes, w_q, suite.dataset(p))
                node = term if node is None else ad.add(node, term)
        report.node = node
        gmap = ad.grad(node, list(nodes.values()))
        report.grads = {name: gmap[n].value for name, n in nodes.items()}
    return report


@dataclass
class TRMStepResult:
    report: RiskReport
    grads: dict[str, np.ndarray]
    w_q: np.ndarray
    v_q: np.ndarray
    solve: slv.SolveResult


def trm_step_objective(feature_map, w_all: np.ndarray, suite: EnvironmentSuite,
                       q: int, alpha: SimplexWeights | None,
                       hyper: TRMHyper, tol: float = 1e-8,
                       w_q_warm: np.ndarray | None = None) -> TRMStepResult:
    """Differentiable three-term objective for one sampled environment Q.

    term 1: pooled-predictor risk on Q.
    term 2: the frozen per-env optimal predictor w(Q) scored on the
            adversarial mixture (sum_sup) or on all other envs (sum_sum);
            w(Q) enters as a constant so only the features carry gradient.
    term 3: minus lam times v_Q . grad_w(risk_Q at w(Q)), with v_Q the
            inverse-Hessian-preconditioned transfer gradient, frozen. Its
            value is ~0 at the solved optimum; its feature gradient is not.
    """
    ds_q = suite.dataset(q)
    res = solve_env_predictor(feature_map, ds_q, tol=tol, w0=w_q_warm)
    w_q = res.w

    if hyper.variant == "sum_sup":
        if alpha is None:
            raise ValueError("sum_sup needs simplex weights for the mixture")
        mix = alpha.as_items()
    else:
        others = [e for e in suite.env_ids() if e != q]
        mix = [(e, 1.0) for e in others]

    nodes = feature_map.make_nodes()
    w_all_node = ad.leaf(w_all, name="w_all")
    erm_node = env_risk_node(feature_map, nodes, w_all_node, ds_q)

    w_q_const = ad.stop_gradient(ad.constant(w_q, name="w_q"))
    transfer_node = None
    for env_id, a in mix:
        term = ad.mul(ad.constant(a),
                      env_risk_node(feature_map, nodes, w_q_const,
                                    suite.dataset(env_id)))
        transfer_node = term if transfer_node is None else \
            ad.add(transfer_node, term)

    # v_Q from plain arrays: mixture gradient at w(Q), preconditioned.
    feats_q = feature_map.apply(ds_q.features)
    labels_q = ds_q.labels.astype(np.float64)
    g_transfer = np.zeros_like(w_q)
    for env_id, a in mix:
        ds_p = suite.dataset(env_id)
        feats_p = feature_map.apply(ds_p.features)
        g_transfer += a * slv.logistic_risk_grad(
            feats_p, ds_p.labels.astype(np.float64), w_q)
    h_op = slv.hessian_at(w_q, feats_q, labels_q)
    v_q = slv.transfer_vector(h_op, g_transfer, hyper.neumann,
                              exact=hyper.exact_inverse)

    w_q_leaf = ad.leaf(w_q, name="w_q_inner")
    inner_risk = env_risk_node(feature_map, nodes, w_q_leaf, ds_q)
    g_inner = ad.grad(inner_risk, [w_q_leaf])[w_q_leaf]
    gm_node = ad.dot(ad.constant(v_q), g_inner)

    total = ad.sub(ad.add(erm_node, transfer_node),
                   ad.mul(ad.constant(hyper.lam), gm_node))
    gmap = ad.grad(total, list(nodes.values()) + [w_all_node])
    grads = {name: gmap[node].value for name, node in nodes.items()}
    grads["w_all"] = gmap[w_all_node].value

    report = RiskReport(
        per_env={q: float(erm_node.value)},
        components={"erm_term": float(erm_node.value),
                    "transfer_term": float(transfer_node.value),
                    "grad_match_term": float(gm_node.value)},
        total=float(total.value), node=total)
    return TRMStepResult(report=report, grads=grads, w_q=w_q, v_q=v_q,
                         solve=res)
