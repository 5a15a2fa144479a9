"""Synthetic multi-environment data: label-conditioned Gaussian latents.

Each environment draws y in {+1,-1}, an invariant block z_c ~ N(y*mu_c,
sigma_c^2 I) shared across environments, and a non-causal block z_e ~
N(y*mu_i, sigma_e^2 I) whose mean mu_i varies by environment. The observed
x is the concatenation [z_c, z_e], optionally passed through a fixed
orthogonal rotation. A bias degree < 1 replaces z_e's mean by a decoy with
the complementary probability.

All sampling uses the counter-based Philox generator keyed by SeedSequence,
so identical seeds give bit-identical datasets across platforms.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

CSV_HEADER_PREFIX = ("env_id", "y")
BINARY_MAGIC = b"XRSK1"


class SuiteError(ValueError):
    """Invalid environment or suite configuration."""


def philox(seed) -> np.random.Generator:
    """Counter-based generator stream for one seed (or SeedSequence)."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def _vec(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class GaussianEnvSpec:
    """Generative parameters of one environment."""

    mu_c: np.ndarray
    mu_e: np.ndarray
    sigma_c: float
    sigma_e: float
    n_samples: int
    label_prior: float = 0.5
    bias_degree: float = 1.0
    decoy_means: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "mu_c", _vec(self.mu_c))
        object.__setattr__(self, "mu_e", _vec(self.mu_e))
        if self.decoy_means is not None:
            d = np.atleast_2d(np.asarray(self.decoy_means, dtype=np.float64))
            object.__setattr__(self, "decoy_means", d)
        if self.sigma_c <= 0 or self.sigma_e <= 0:
            raise SuiteError(
                f"sigmas must be positive, got sigma_c={self.sigma_c}, "
                f"sigma_e={self.sigma_e}")
        if not 0.0 <= self.bias_degree <= 1.0:
            raise SuiteError(f"bias_degree must be in [0,1], got {self.bias_degree}")
        if not 0.0 < self.label_prior < 1.0:
            raise SuiteError(f"label_prior must be in (0,1), got {self.label_prior}")
        if self.n_samples < 1:
            raise SuiteError(f"n_samples must be positive, got {self.n_samples}")
        if self.bias_degree < 1.0 and (
                self.decoy_means is None or len(self.decoy_means) == 0):
            raise SuiteError("bias_degree < 1 requires non-empty decoy_means")
        if self.decoy_means is not None and \
                self.decoy_means.shape[1] != self.mu_e.shape[0]:
            raise SuiteError(
                f"decoy means have dimension {self.decoy_means.shape[1]}, "
                f"expected {self.mu_e.shape[0]}")

    @property
    def d_c(self) -> int:
        return self.mu_c.shape[0]

    @property
    def d_e(self) -> int:
        return self.mu_e.shape[0]


@dataclass(frozen=True)
class Dataset:
    """Sampled labeled points of one environment. Immutable after creation."""

    features: np.ndarray
    labels: np.ndarray
    env_id: int

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if not np.all(np.isfinite(f)):
            raise SuiteError("dataset features must be finite")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels",
                           np.asarray(self.labels, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


def sample_environment(spec: GaussianEnvSpec, seed, env_id: int = 0,
                       rotation: np.ndarray | None = None,
                       return_alignment: bool = False):
    """Draw one environment's dataset; reproducible per seed.

    rotation, if given, is a fixed orthogonal matrix applied to [z_c, z_e]
    (an injective feature mixing; identity concatenation by default).
    return_alignment additionally yields the bias-coin outcome per row,
    a diagnostic used by tests.
    """
    rng = philox(seed)
    n = spec.n_samples
    y = np.where(rng.random(n) < spec.label_prior, 1, -1).astype(np.int64)
    z_c = y[:, None] * spec.mu_c[None, :] \
        + spec.sigma_c * rng.standard_normal((n, spec.d_c))
    aligned = rng.random(n) < spec.bias_degree
    means_e = np.repeat(spec.mu_e[None, :], n, axis=0)
    if not np.all(aligned):
        idx = rng.integers(0, len(spec.decoy_means), size=n)
        means_e[~aligned] = spec.decoy_means[idx[~aligned]]
    z_e = y[:, None] * means_e + spec.sigma_e * rng.standard_normal((n, spec.d_e))
    x = np.concatenate([z_c, z_e], axis=1)
    if rotation is not None:
        x = x @ rotation.T
    ds = Dataset(features=x, labels=y, env_id=env_id)
    if return_alignment:
        return ds, aligned
    return ds


def sample_multiclass_environment(class_means_c: np.ndarray,
                                  class_means_e: np.ndarray,
                                  sigma_c: float, sigma_e: float,
                                  n_samples: int, bias_degree: float,
                                  seed, env_id: int = 0) -> Dataset:
    """Bias-degree scenario with K classes and one designated mean each.

    With probability bias_degree a sample's z_e mean is its own class's
    mean; otherwise a uniformly drawn other class's mean acts as the decoy.
    """
    mc = np.atleast_2d(np.asarray(class_means_c, dtype=np.float64))
    me = np.atleast_2d(np.asarray(class_means_e, dtype=np.float64))
    k = mc.shape[0]
    if me.shape[0] != k or k < 2:
        raise SuiteError("need matching per-class mean lists with K >= 2")
    rng = philox(seed)
    y = rng.integers(0, k, size=n_samples)
    z_c = mc[y] + sigma_c * rng.standard_normal((n_samples, mc.shape[1]))
    aligned = rng.random(n_samples) < bias_degree
    decoy_shift = rng.integers(1, k, size=n_samples)
    e_class = np.where(aligned, y, (y + decoy_shift) % k)
    z_e = me[e_class] + sigma_e * rng.standard_normal((n_samples, me.shape[1]))
    return Dataset(features=np.concatenate([z_c, z_e], axis=1),
                   labels=y, env_id=env_id)


@dataclass
class SuiteConfig:
    """Parameters for a whole environment collection.

    Either mus lists each environment's non-causal mean explicitly, or
    (target_mean_mu, target_var_mu) asks for E i.i.d. Gaussian draws
    affinely corrected so the empirical mean and population variance of
    the constructed means hit the targets exactly, per coordinate.
    """

    n_envs: int
    mu_c: Sequence[float] | float
    sigma_c: float = 1.0
    sigma_e: float = 1.0
    n_samples: int = 10000
    d_e: int = 1
    mus: Sequence | None = None
    target_mean_mu: float | None = None
    target_var_mu: float | None = None
    label_prior: float = 0.5
    bias_degree: float = 1.0
    decoy_means: Sequence | None = None
    rotate: bool = False

    def __post_init__(self):
        if self.n_envs < 2:
            raise SuiteError(f"need at least 2 environments, got {self.n_envs}")
        if self.mus is None:
            if self.target_mean_mu is None or self.target_var_mu is None:
                raise SuiteError("give explicit mus or both moment targets")
            if self.target_var_mu < 0:
                raise SuiteError("variance target must be non-negative")


@dataclass
class EnvironmentSuite:
    """E environments sharing dimensions and noise scales."""

    specs: list[GaussianEnvSpec]
    datasets: list[Dataset]
    rotation: np.ndarray | None = None

    def __post_init__(self):
        if len(self.specs) < 2:
            raise SuiteError("a suite needs at least 2 environments")
        d_c = {s.d_c for s in self.specs}
        d_e = {s.d_e for s in self.specs}
        if len(d_c) != 1 or len(d_e) != 1:
            raise SuiteError("environments must share d_c and d_e")

    @property
    def n_envs(self) -> int:
        return len(self.specs)

    @property
    def mu_c(self) -> np.ndarray:
        return self.specs[0].mu_c

    @property
    def mus(self) -> np.ndarray:
        """Stacked non-causal means, shape (E, d_e)."""
        return np.stack([s.mu_e for s in self.specs])

    @property
    def sigma_c(self) -> float:
        return self.specs[0].sigma_c

    @property
    def sigma_e(self) -> float:
        return self.specs[0].sigma_e

    @property
    def mean_mu(self) -> np.ndarray:
        return self.mus.mean(axis=0)

    @property
    def var_mu(self) -> np.ndarray:
        """Population variance of the non-causal means, per coordinate."""
        return self.mus.var(axis=0)

    def env_ids(self) -> list[int]:
        return [d.env_id for d in self.datasets]

    def dataset(self, env_id: int) -> Dataset:
        for d in self.datasets:
            if d.env_id == env_id:
                return d
        raise SuiteError(f"no environment with id {env_id}")


def correct_moments(draws: np.ndarray, target_mean: float,
                    target_var: float) -> np.ndarray:
    """Affinely map draws so each column has exact mean/population variance."""
    draws = np.atleast_2d(np.asarray(draws, dtype=np.float64))
    if draws.shape[0] < 2 and target_var > 0:
        raise SuiteError("variance target > 0 needs at least 2 environments")
    m = draws.mean(axis=0)
    s = draws.std(axis=0)
    if target_var == 0:
        return np.tile(target_mean, draws.shape)
    if np.any(s == 0):
        raise SuiteError("degenerate draws: zero spread, cannot hit variance target")
    return (draws - m) / s * np.sqrt(target_var) + target_mean


def make_suite(config: SuiteConfig, seed) -> EnvironmentSuite:
    """Build an EnvironmentSuite with exact requested mean moments."""
    root = np.random.SeedSequence(seed)
    mu_seed, rot_seed, *env_seeds = root.spawn(config.n_envs + 2)

    if config.mus is not None:
        mus = np.atleast_2d(np.asarray(config.mus, dtype=np.float64))
        if mus.shape[0] != config.n_envs:
            raise SuiteError(
                f"got {mus.shape[0]} means for {config.n_envs} environments")
    else:
        draws = philox(mu_seed).standard_normal((config.n_envs, config.d_e))
        mus = correct_moments(draws, config.target_mean_mu, config.target_var_mu)

    mu_c = _vec(config.mu_c)
    rotation = None
    if config.rotate:
        d = mu_c.shape[0] + mus.shape[1]
        g = philox(rot_seed).standard_normal((d, d))
        rotation, _ = np.linalg.qr(g)

    decoys = None
    if config.decoy_means is not None:
        decoys = np.atleast_2d(np.asarray(config.decoy_means, dtype=np.float64))

    specs, datasets = [], []
    for i in range(config.n_envs):
        spec = GaussianEnvSpec(
            mu_c=mu_c, mu_e=mus[i], sigma_c=config.sigma_c,
            sigma_e=config.sigma_e, n_samples=config.n_samples,
            label_prior=config.label_prior, bias_degree=config.bias_degree,
            decoy_means=decoys)
        specs.append(spec)
        datasets.append(sample_environment(spec, env_seeds[i], env_id=i,
                                           rotation=rotation))
    return EnvironmentSuite(specs=specs, datasets=datasets, rotation=rotation)


class MixtureView:
    """Expectations under a convex mixture of a suite's environments.

    Evaluated as the weight-averaged per-environment empirical expectation;
    no resampling happens.
    """

    def __init__(self, suite: EnvironmentSuite, weights: Mapping[int, float],
                 exclude: int):
        ids = set(suite.env_ids())
        if exclude not in ids:
            raise SuiteError(f"excluded env {exclude} not in suite")
        total = 0.0
        for env_id, a in weights.items():
            if env_id == exclude:
                raise SuiteError(
                    f"mixture places weight on excluded environment {exclude}")
            if env_id not in ids:
                raise SuiteError(f"mixture references unknown environment {env_id}")
            if a < -1e-12:
                raise SuiteError(f"negative mixture weight {a} on env {env_id}")
            total += a
        if abs(total - 1.0) > 1e-9:
            raise SuiteError(f"mixture weights sum to {total}, expected 1")
        self.suite = suite
        self.weights = dict(weights)
        self.exclude = exclude

    def expect(self, fn: Callable[[Dataset], float]) -> float:
        return sum(a * fn(self.suite.dataset(env_id))
                   for env_id, a in self.weights.items())


def mixture_view(suite: EnvironmentSuite, weights: Mapping[int, float],
                 exclude: int) -> MixtureView:
    return MixtureView(suite, weights, exclude)


def save_csv(datasets: Sequence[Dataset], path) -> None:
    """Header env_id,y,z_1..z_d; float fields use repr for exact round-trip."""
    d = datasets[0].d
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(CSV_HEADER_PREFIX) + [f"z_{j + 1}" for j in range(d)])
        for ds in datasets:
            for row in range(ds.n):
                writer.writerow([ds.env_id, int(ds.labels[row])]
                                + [repr(float(v)) for v in ds.features[row]])


def load_csv(path) -> list[Dataset]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[:2]) != CSV_HEADER_PREFIX:
            raise SuiteError(f"unexpected CSV header {header[:2]}")
        by_env: dict[int, tuple[list, list]] = {}
        for row in reader:
            env_id, y = int(row[0]), int(row[1])
            feats, labels = by_env.setdefault(env_id, ([], []))
            feats.append([float(v) for v in row[2:]])
            labels.append(y)
    return [Dataset(features=np.array(f), labels=np.array(l), env_id=e)
            for e, (f, l) in sorted(by_env.items())]


def save_binary(datasets: Sequence[Dataset], path) -> None:
    """Magic XRSK1, then per env: id, n, d as u32 and rows as little-endian f64."""
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<I", len(datasets)))
        for ds in datasets:
            fh.write(struct.pack("<III", ds.env_id, ds.n, ds.d))
            block = np.empty((ds.n, ds.d + 1), dtype="<f8")
            block[:, 0] = ds.labels
            block[:, 1:] = ds.features
            fh.write(block.tobytes())


def load_binary(path) -> list[Dataset]:
    with open(path, "rb") as fh:
        magic = fh.read(len(BINARY_MAGIC))
        if magic != BINARY_MAGIC:
            raise SuiteError(f"bad magic {magic!r}, expected {BINARY_MAGIC!r}")
        (n_envs,) = struct.unpack("<I", fh.read(4))
        datasets = []
        for _ in range(n_envs):
            env_id, n, d = struct.unpack("<III", fh.read(12))
            block = np.frombuffer(fh.read(8 * n * (d + 1)), dtype="<f8")
            block = block.reshape(n, d + 1)
            datasets.append(Dataset(features=block[:, 1:].copy(),
                                    labels=block[:, 0].astype(np.int64),
                                    env_id=env_id))
    return datasets


def suite_from_datasets(datasets: Sequence[Dataset],
                        specs: Sequence[GaussianEnvSpec]) -> EnvironmentSuite:
    return EnvironmentSuite(specs=list(specs), datasets=list(datasets))
