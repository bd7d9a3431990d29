"""Multi-domain alignment layers: per-domain weighted normalization.

Each sample in a batch carries a probability row over the domains (the k
latent source domains plus the target).  Column-normalizing those rows gives
per-sample weights for estimating a mean and a biased variance per domain and
channel; the same rows then mix the per-domain normalized copies of every
sample back into a single output.  With one domain and unit weights the layer
collapses to ordinary batch normalization.

The backward pass is exact: gradients flow to the inputs through the direct
path and through the batch statistics, and to the assignment probabilities
through the mixing weights and the per-column normalizer that couples all
samples assigned to a domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .primitives import ParamBlock

__all__ = [
    "AlignConfig",
    "AlignmentLayer",
    "AlphaWeights",
    "DomainStats",
    "RunningStats",
    "UninitializedStatsError",
    "compute_alpha",
    "weighted_moments",
]


class UninitializedStatsError(RuntimeError):
    """A domain needs statistics that were never estimated."""


@dataclass
class AlignConfig:
    """Knobs of an alignment layer.

    eps guards the variance inside the square root; running_momentum drives
    the exponential averages used at inference; zero_mass_threshold is the
    total column weight below which a domain is treated as absent from the
    batch.
    """

    eps: float = 1e-5
    affine: bool = True
    running_momentum: float = 0.1
    zero_mass_threshold: float = 1e-6

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if not 0.0 < self.running_momentum <= 1.0:
            raise ValueError("running_momentum must be in (0, 1]")
        if self.zero_mass_threshold < 0:
            raise ValueError("zero_mass_threshold must be >= 0")


@dataclass
class AlphaWeights:
    """Column-normalized assignment weights.

    alpha[i, d] = w[i, d] / sum_j w[j, d] for live columns; columns whose
    total mass is at or below the threshold are flagged dead and left all
    zero instead of dividing by a vanishing normalizer.
    """

    alpha: np.ndarray
    live: np.ndarray
    total_weight: np.ndarray


@dataclass
class DomainStats:
    """Per-domain, per-channel weighted mean and biased variance.

    Rows of dead (zero-mass) domains are zero-filled and must be treated as
    invalid; consult `live` before using them.
    """

    mean: np.ndarray
    var: np.ndarray
    total_weight: np.ndarray
    live: np.ndarray


def compute_alpha(weights: np.ndarray, threshold: float = 1e-6) -> AlphaWeights:
    """Normalize assignment probabilities per domain column into sample weights."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"assignment matrix must be rank 2, got {w.ndim}")
    if np.any(w < 0):
        raise ValueError("assignment weights must be non-negative")
    total = w.sum(axis=0)
    live = total > threshold
    alpha = np.zeros_like(w)
    alpha[:, live] = w[:, live] / total[live]
    return AlphaWeights(alpha=alpha, live=live, total_weight=total)


def _as_bcm(x: np.ndarray) -> np.ndarray:
    """View [b, c] or [b, c, h, w] input as [b, c, positions]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[:, :, None]
    if x.ndim == 4:
        return x.reshape(x.shape[0], x.shape[1], -1)
    raise ValueError(f"expected rank 2 or 4 input, got rank {x.ndim}")


def weighted_moments(x: np.ndarray, aw: AlphaWeights) -> DomainStats:
    """Weighted per-domain moments of a batch.

    Rank-4 inputs spread each sample's weight uniformly over its spatial
    positions, so the statistics cover all activations of a channel while
    still weighting per sample.
    """
    xr = _as_bcm(x)
    if aw.alpha.shape[0] != xr.shape[0]:
        raise ValueError(f"{aw.alpha.shape[0]} weight rows for {xr.shape[0]} samples")
    sample_mean = xr.mean(axis=2)
    sample_sq = (xr**2).mean(axis=2)
    mean = aw.alpha.T @ sample_mean
    var = np.maximum(aw.alpha.T @ sample_sq - mean**2, 0.0)
    mean[~aw.live] = 0.0
    var[~aw.live] = 0.0
    return DomainStats(mean=mean, var=var, total_weight=aw.total_weight.copy(), live=aw.live.copy())


class RunningStats:
    """Exponential running averages of per-domain statistics for inference.

    Domains never updated stay flagged uninitialized; asking the layer to
    normalize against them raises rather than silently substituting."""

    def __init__(self, n_domains: int, channels: int):
        self.mean = np.zeros((n_domains, channels))
        self.var = np.ones((n_domains, channels))
        self.count = np.zeros(n_domains, dtype=np.int64)

    def initialized(self) -> np.ndarray:
        return self.count > 0

    def update(self, stats: DomainStats, momentum: float) -> None:
        live = stats.live
        self.mean[live] = (1.0 - momentum) * self.mean[live] + momentum * stats.mean[live]
        self.var[live] = (1.0 - momentum) * self.var[live] + momentum * stats.var[live]
        self.count[live] += 1


@dataclass
class _Cache:
    x_shape: tuple
    xr: np.ndarray
    w: np.ndarray
    fixed: np.ndarray
    aw: AlphaWeights
    mean: np.ndarray
    inv_std: np.ndarray
    mix_scale: np.ndarray
    y_mix: np.ndarray


class AlignmentLayer:
    """Normalization layer mixing per-domain statistics by assignment weights.

    Owns the optional per-channel affine parameters (shared across domains)
    and the running statistics used at inference.  A layer instance belongs
    to one training thread; inference against frozen running statistics is
    read-only.
    """

    def __init__(self, channels: int, n_domains: int, cfg: AlignConfig | None = None):
        if channels < 1 or n_domains < 1:
            raise ValueError("channels and n_domains must be >= 1")
        self.cfg = cfg if cfg is not None else AlignConfig()
        self.channels = channels
        self.n_domains = n_domains
        self.running = RunningStats(n_domains, channels)
        if self.cfg.affine:
            self.gamma = ParamBlock(np.ones(channels))
            self.beta = ParamBlock(np.zeros(channels))
        else:
            self.gamma = None
            self.beta = None

    def params(self) -> list[ParamBlock]:
        return [self.gamma, self.beta] if self.cfg.affine else []

    def _check(self, x: np.ndarray, w: np.ndarray) -> None:
        if w.ndim != 2 or w.shape[0] != x.shape[0]:
            raise ValueError(f"assignment rows {w.shape} do not match batch {x.shape[0]}")
        if w.shape[1] != self.n_domains:
            raise ValueError(f"layer built for {self.n_domains} domains, got {w.shape[1]}")
        if x.shape[1] != self.channels:
            raise ValueError(f"layer built for {self.channels} channels, got {x.shape[1]}")

    def forward(self, x: np.ndarray, assignment, update_running: bool = True):
        """Normalize a training batch with per-domain batch statistics.

        Returns (y, cache); the cache feeds backward().  Running statistics
        are updated for every domain with batch mass unless update_running is
        off (finite-difference probing relies on a side-effect-free forward).
        A domain whose column carries weight but has no batch mass falls back
        to its running statistics, treated as constants; if those were never
        initialized the batch is degenerate and an error is raised.
        """
        w = assignment.probs
        self._check(x, w)
        xr = _as_bcm(x)
        aw = compute_alpha(w, self.cfg.zero_mass_threshold)
        stats = weighted_moments(x, aw)

        mean = stats.mean.copy()
        var = stats.var.copy()
        fallback = ~aw.live & (w.max(axis=0) > 0.0)
        if fallback.any():
            missing = fallback & ~self.running.initialized()
            if missing.any():
                raise UninitializedStatsError(
                    f"domains {np.flatnonzero(missing).tolist()} carry weight but have "
                    "neither batch mass nor initialized running statistics"
                )
            mean[fallback] = self.running.mean[fallback]
            var[fallback] = self.running.var[fallback]

        used = aw.live | fallback
        inv_std = np.zeros_like(mean)
        inv_std[used] = 1.0 / np.sqrt(var[used] + self.cfg.eps)

        # y_i = sum_d w[i,d] * (x_i - mean_d) / std_d, folded into one affine
        # map per sample and channel; dead columns have inv_std rows of zero.
        mix_scale = w @ inv_std
        mix_shift = w @ (mean * inv_std)
        y_mix = mix_scale[:, :, None] * xr - mix_shift[:, :, None]

        if self.cfg.affine:
            y = self.gamma.value[None, :, None] * y_mix + self.beta.value[None, :, None]
        else:
            y = y_mix
        if update_running:
            self.running.update(stats, self.cfg.running_momentum)

        cache = _Cache(
            x_shape=x.shape,
            xr=xr,
            w=w,
            fixed=np.asarray(assignment.fixed, dtype=bool),
            aw=aw,
            mean=mean,
            inv_std=inv_std,
            mix_scale=mix_scale,
            y_mix=y_mix,
        )
        return y.reshape(x.shape), cache

    def backward(self, cache: _Cache, grad_out: np.ndarray):
        """Exact gradients of forward(): (grad_x, grad_w, grad_gamma, grad_beta).

        grad_x covers the direct path plus the paths through every live
        domain's mean and variance; grad_w covers the direct mixing path plus
        the path through the column-normalized weights, whose normalizer
        couples all samples in a domain.  Fixed assignment rows always come
        back with exactly zero gradient.  Fallback domains normalized with
        running statistics contribute only direct paths, since running
        estimates are treated as constants.
        """
        if grad_out.shape != cache.x_shape:
            raise ValueError(f"grad shape {grad_out.shape} does not match {cache.x_shape}")
        gr = _as_bcm(grad_out)
        if self.cfg.affine:
            grad_gamma = (gr * cache.y_mix).sum(axis=(0, 2))
            grad_beta = gr.sum(axis=(0, 2))
            gy = gr * self.gamma.value[None, :, None]
        else:
            grad_gamma = None
            grad_beta = None
            gy = gr

        xr = cache.xr
        w = cache.w
        alpha = cache.aw.alpha
        live = cache.aw.live
        mean = cache.mean
        inv_std = cache.inv_std
        n_pos = xr.shape[2]

        gy_sum = gy.sum(axis=2)
        gyx_sum = (gy * xr).sum(axis=2)

        # Per-domain reductions of the upstream gradient: G1 = sum w*gy,
        # G2 = sum w*gy*xhat.  Only rows of used domains ever get consumed.
        g1 = w.T @ gy_sum
        g2 = (w.T @ gyx_sum - mean * g1) * inv_std

        # Input gradient: direct mixing term minus the mean/variance paths of
        # the live domains, spread over spatial positions.
        c1 = alpha[:, live] @ (g1 * inv_std)[live]
        c2 = alpha[:, live] @ (g2 * inv_std**2)[live]
        c3 = alpha[:, live] @ (mean * g2 * inv_std**2)[live]
        grad_x = gy * cache.mix_scale[:, :, None] - (c1[:, :, None] + xr * c2[:, :, None] - c3[:, :, None]) / n_pos

        # Direct path of the assignment gradient: sum over channels and
        # positions of gy * xhat per domain.
        grad_w = gyx_sum @ inv_std.T - gy_sum @ (mean * inv_std).T

        if live.any():
            sample_mean = xr.mean(axis=2)
            sample_sq = (xr**2).mean(axis=2)
            h1 = (g1 * inv_std)[live]
            h2 = (g2 * inv_std**2 / 2.0)[live]
            mu = mean[live]
            # d loss / d alpha[i, d] through the live statistics
            g_alpha = -(
                sample_mean @ h1.T
                + sample_sq @ h2.T
                - 2.0 * sample_mean @ (mu * h2).T
                + (mu**2 * h2).sum(axis=1)[None, :]
            )
            # project through alpha = w / column_total
            colsum = (alpha[:, live] * g_alpha).sum(axis=0)
            grad_w[:, live] += (g_alpha - colsum[None, :]) / cache.aw.total_weight[live][None, :]

        grad_w[cache.fixed] = 0.0
        return grad_x.reshape(cache.x_shape), grad_w, grad_gamma, grad_beta

    def infer(self, x: np.ndarray, assignment) -> np.ndarray:
        """Normalize with running statistics; no state is touched.

        Every domain that receives any weight must have initialized running
        statistics.  Works for a single-sample batch since no batch moments
        are involved.
        """
        w = assignment.probs
        self._check(x, w)
        needed = w.max(axis=0) > 0.0
        missing = needed & ~self.running.initialized()
        if missing.any():
            raise UninitializedStatsError(
                f"domains {np.flatnonzero(missing).tolist()} have no running statistics"
            )
        xr = _as_bcm(x)
        inv_std = np.zeros_like(self.running.mean)
        inv_std[needed] = 1.0 / np.sqrt(self.running.var[needed] + self.cfg.eps)
        y = (w @ inv_std)[:, :, None] * xr - (w @ (self.running.mean * inv_std))[:, :, None]
        if self.cfg.affine:
            y = self.gamma.value[None, :, None] * y + self.beta.value[None, :, None]
        return y.reshape(x.shape)
