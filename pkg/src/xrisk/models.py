"""Feature-map families: linear maps and a one-hidden-layer tanh perceptron.

Parameters live as plain float64 arrays; differentiable evaluations build
fresh autodiff leaves per step via make_nodes()/apply_node().
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class LinearFeatureMap:
    """x -> x @ phi with phi of shape (d_in, d_out)."""

    names = ("phi",)

    def __init__(self, matrix: np.ndarray):
        self.phi = np.array(matrix, dtype=np.float64)
        if self.phi.ndim != 2:
            raise ValueError(f"expected matrix, got shape {self.phi.shape}")

    @classmethod
    def pair(cls, a: float, b: float) -> "LinearFeatureMap":
        """The scalar-output 2-d special case Phi(x) = a z_c + b z_e."""
        return cls(np.array([[a], [b]]))

    @property
    def in_dim(self) -> int:
        return self.phi.shape[0]

    @property
    def out_dim(self) -> int:
        return self.phi.shape[1]

    @property
    def ab(self) -> tuple[float, float]:
        if self.phi.shape != (2, 1):
            raise ValueError("ab only defined for the 2-d pair feature map")
        return float(self.phi[0, 0]), float(self.phi[1, 0])

    def get_params(self) -> dict[str, np.ndarray]:
        return {"phi": self.phi}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.phi = np.asarray(params["phi"], dtype=np.float64)

    def make_nodes(self) -> dict[str, ad.Node]:
        return {"phi": ad.leaf(self.phi, name="phi")}

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.phi

    def apply_node(self, x: np.ndarray, nodes: dict[str, ad.Node]) -> ad.Node:
        return ad.matmul(ad.constant(x), nodes["phi"])


class OneHiddenTanh:
    """x -> tanh(x @ w1 + b1) @ w2, a small nonlinear alternative."""

    names = ("w1", "b1", "w2")

    def __init__(self, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray):
        self.w1 = np.array(w1, dtype=np.float64)
        self.b1 = np.array(b1, dtype=np.float64)
        self.w2 = np.array(w2, dtype=np.float64)

    @classmethod
    def init(cls, d_in: int, width: int, d_out: int, seed=0) -> "OneHiddenTanh":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        return cls(rng.standard_normal((d_in, width)) / np.sqrt(d_in),
                   np.zeros(width),
                   rng.standard_normal((width, d_out)) / np.sqrt(width))

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def get_params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.w1 = np.asarray(params["w1"], dtype=np.float64)
        self.b1 = np.asarray(params["b1"], dtype=np.float64)
        self.w2 = np.asarray(params["w2"], dtype=np.float64)

    def make_nodes(self) -> dict[str, ad.Node]:
        return {k: ad.leaf(v, name=k) for k, v in self.get_params().items()}

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.w1 + self.b1) @ self.w2

    def apply_node(self, x: np.ndarray, nodes: dict[str, ad.Node]) -> ad.Node:
        n = x.shape[0]
        pre = ad.matmul(ad.constant(x), nodes["w1"])
        # Materialized row broadcast: ones(n,1) @ b1(1,h).
        width = self.b1.shape[0]
        bias = ad.matmul(ad.constant(np.ones((n, 1))),
                         ad.reshape(nodes["b1"], (1, width)))
        return ad.matmul(ad.tanh(ad.add(pre, bias)), nodes["w2"])
