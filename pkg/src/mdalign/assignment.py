"""Domain tags, the per-sample assignment matrix, and the domain predictor.

The assignment matrix is the single bridge between the domain predictor and
every alignment layer in a network: one probability row per sample over the
k latent source domains plus the target, with hard-labeled rows pinned and
excluded from gradient.  All layers consume the same instance (a shared
view), and their assignment gradients accumulate into one buffer that later
flows back through the predictor's softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .primitives import (
    ParamBlock,
    dense_backward,
    dense_forward,
    he_normal,
    relu_backward,
    relu_forward,
    softmax,
)

__all__ = [
    "Assignment",
    "DomainPredictor",
    "DomainTag",
    "KNOWN_SOURCE",
    "TARGET",
    "UNKNOWN_SOURCE",
    "merge_assignments",
]

KNOWN_SOURCE = "known-source"
UNKNOWN_SOURCE = "unknown-source"
TARGET = "target"


@dataclass(frozen=True)
class DomainTag:
    """Provenance of one sample: a labeled source domain, an unlabeled source, or the target."""

    kind: str
    index: int | None = None

    def __post_init__(self):
        if self.kind not in (KNOWN_SOURCE, UNKNOWN_SOURCE, TARGET):
            raise ValueError(f"unknown tag kind {self.kind!r}")
        if self.kind == KNOWN_SOURCE:
            if self.index is None or self.index < 0:
                raise ValueError("known-source tag needs a domain index >= 0")
        elif self.index is not None:
            raise ValueError(f"{self.kind} tag carries no index")

    @classmethod
    def known_source(cls, index: int) -> "DomainTag":
        return cls(KNOWN_SOURCE, index)

    @classmethod
    def unknown_source(cls) -> "DomainTag":
        return cls(UNKNOWN_SOURCE)

    @classmethod
    def target(cls) -> "DomainTag":
        return cls(TARGET)

    @property
    def is_source(self) -> bool:
        return self.kind != TARGET


class Assignment:
    """Per-sample probabilities over the k source domains plus the target.

    probs is [b, k+1] with columns ordered (source_1 .. source_k, target);
    fixed marks hard-assigned rows.  `grad` accumulates the assignment
    gradients of every alignment layer; fixed rows accumulate exactly zero.
    """

    def __init__(self, probs: np.ndarray, fixed: np.ndarray):
        probs = np.asarray(probs, dtype=np.float64)
        fixed = np.asarray(fixed, dtype=bool)
        if probs.ndim != 2:
            raise ValueError("assignment probabilities must be [batch, domains]")
        if fixed.shape != (probs.shape[0],):
            raise ValueError("fixed mask must have one entry per row")
        if np.any(probs < 0) or np.any(probs > 1):
            raise ValueError("assignment entries must lie in [0, 1]")
        if probs.size and np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("assignment rows must sum to 1")
        self.probs = probs
        self.fixed = fixed
        self.grad = np.zeros_like(probs)

    @classmethod
    def unchecked(cls, probs: np.ndarray, fixed: np.ndarray) -> "Assignment":
        """Bypass row validation; gradient probing perturbs rows off the simplex."""
        obj = cls.__new__(cls)
        obj.probs = np.asarray(probs, dtype=np.float64)
        obj.fixed = np.asarray(fixed, dtype=bool)
        obj.grad = np.zeros_like(obj.probs)
        return obj

    @property
    def n_domains(self) -> int:
        return self.probs.shape[1]

    def share(self, layer_count: int) -> tuple["Assignment", ...]:
        """Views handed to the alignment layers: the same object, not copies."""
        return (self,) * layer_count

    def add_grad(self, grad_w: np.ndarray) -> None:
        if grad_w.shape != self.probs.shape:
            raise ValueError(f"gradient shape {grad_w.shape} does not match {self.probs.shape}")
        free = ~self.fixed
        self.grad[free] += grad_w[free]

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def merge_assignments(pred: np.ndarray, tags: list[DomainTag]) -> Assignment:
    """Combine predicted domain probabilities with hard domain knowledge.

    Target rows become one-hot on the target column and fixed; known-source
    rows one-hot on their labeled column and fixed; unknown-source rows carry
    the predicted probabilities with an exact zero in the target column and
    stay free to receive gradient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[0] != len(tags):
        raise ValueError(f"predictions {pred.shape} do not match {len(tags)} tags")
    b, k = pred.shape
    probs = np.zeros((b, k + 1))
    fixed = np.zeros(b, dtype=bool)
    for i, tag in enumerate(tags):
        if tag.kind == TARGET:
            probs[i, k] = 1.0
            fixed[i] = True
        elif tag.kind == KNOWN_SOURCE:
            if tag.index >= k:
                raise ValueError(f"domain label {tag.index} out of range for k={k}")
            probs[i, tag.index] = 1.0
            fixed[i] = True
        else:
            probs[i, :k] = pred[i]
    return Assignment(probs, fixed)


class DomainPredictor:
    """Two-layer head predicting a softmax over the k latent source domains.

    Attached to the shared trunk right after its first block, where features
    are still domain-sensitive.
    """

    def __init__(self, in_dim: int, k: int, hidden: int = 64, seed: int = 0):
        if k < 1:
            raise ValueError("need at least one latent source domain")
        rng = np.random.default_rng(seed)
        self.w1 = ParamBlock(he_normal(rng, in_dim, (in_dim, hidden)))
        self.b1 = ParamBlock(np.zeros(hidden))
        self.w2 = ParamBlock(he_normal(rng, hidden, (hidden, k)))
        self.b2 = ParamBlock(np.zeros(k))
        self.k = k

    def params(self) -> list[ParamBlock]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, features: np.ndarray):
        """Returns (probs, cache): probability rows over the k domains."""
        z1 = dense_forward(features, self.w1.value, self.b1.value)
        a1 = relu_forward(z1)
        z2 = dense_forward(a1, self.w2.value, self.b2.value)
        probs = softmax(z2)
        return probs, (features, z1, a1)

    def backward(self, cache, grad_logits: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient at the input features."""
        features, z1, a1 = cache
        g_a1, g_w2, g_b2 = dense_backward(a1, self.w2.value, grad_logits)
        self.w2.grad += g_w2
        self.b2.grad += g_b2
        g_z1 = relu_backward(z1, g_a1)
        g_in, g_w1, g_b1 = dense_backward(features, self.w1.value, g_z1)
        self.w1.grad += g_w1
        self.b1.grad += g_b1
        return g_in
