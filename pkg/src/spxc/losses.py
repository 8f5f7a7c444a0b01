"""Training objectives: discretized logistic mixture NLL, Gaussian KL, and
their composition into the joint image + patch loss.

Pixels are modeled over the 256 byte values.  In normalized [-1, 1] units
the 256 bins tile the range with half-bin width 1/255; the probability of a
target bin under one logistic component is CDF(y + 1/255) - CDF(y - 1/255)
with the outer bins integrating to -inf / +inf.  Components are mixed
through a softmax over the logit weights.  Everything is computed in log
space with the usual guards so gradients stay finite for extreme scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import denormalize_array, normalize_array
from .network import MixtureParams, PosteriorParams

HALF_BIN = 1.0 / 255.0
LN2 = math.log(2.0)


@dataclass
class LossBreakdown:
    """Per-batch mean loss components, all in nats."""

    patch_nll: float
    recon_nll: float
    kl: float
    total: float
    bpd_patch: float

    def __post_init__(self):
        for name in ("patch_nll", "recon_nll", "kl", "total", "bpd_patch"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite loss component: {name}")
        if self.kl < 0:
            raise ValueError("kl must be nonnegative")


def _as_batched_targets(targets):
    t = np.asarray(targets)
    if t.ndim == 2:
        t = t[None]
    if t.min() < 0 or t.max() > 255:
        raise ValueError("targets must be bytes in [0, 255]")
    return t


def dlm_log_probs(mix: MixtureParams, targets) -> Tensor:
    """Per-pixel log probability of byte targets under the mixture.

    ``targets`` is (B, H, W) (or (H, W)) with values in 0..255; the result
    is a (B, H, W) tensor of log probabilities.
    """
    t = _as_batched_targets(targets)
    dt = mix.means.dtype
    x = normalize_array(t).astype(dt)[:, None]  # (B, 1, H, W), broadcasts over K

    centered = ad.add(ad.mul(mix.means, -1.0), x)
    inv_s = ad.exp(ad.mul(mix.log_scales, -1.0))
    plus_in = ad.mul(inv_s, ad.add(centered, HALF_BIN))
    min_in = ad.mul(inv_s, ad.add(centered, -HALF_BIN))

    log_cdf_plus = ad.add(plus_in, ad.mul(ad.softplus(plus_in), -1.0))
    log_one_minus_cdf_min = ad.mul(ad.softplus(min_in), -1.0)
    cdf_delta = ad.add(ad.sigmoid(plus_in), ad.mul(ad.sigmoid(min_in), -1.0))
    mid_in = ad.mul(inv_s, centered)
    log_pdf_mid = ad.add(ad.add(mid_in, ad.mul(mix.log_scales, -1.0)),
                         ad.mul(ad.softplus(mid_in), -2.0))

    # interior bins: exact CDF difference, falling back to a density
    # approximation when the difference underflows
    interior = ad.where(
        cdf_delta.data > 1e-5,
        ad.log(ad.maximum_const(cdf_delta, 1e-12)),
        ad.add(log_pdf_mid, -math.log(127.5)),
    )
    lp = ad.where(x < -0.999, log_cdf_plus,
                  ad.where(x > 0.999, log_one_minus_cdf_min, interior))
    return ad.logsumexp(ad.add(ad.log_softmax(mix.logit_probs, axis=1), lp), axis=1)


def dlm_nll(mix: MixtureParams, targets) -> Tensor:
    """Negative log likelihood in nats per patch (mean over the batch)."""
    lp = dlm_log_probs(mix, targets)
    return ad.mul(ad.mean(ad.sum_(lp, axis=(1, 2))), -1.0)


def bits_per_dim(nll_nats: float, dims: int) -> float:
    """Convert a summed NLL in nats to bits per dimension."""
    if dims <= 0:
        raise ValueError("dims must be positive")
    return float(nll_nats) / (dims * LN2)


def kl_gauss(posterior: PosteriorParams) -> Tensor:
    """KL(q || N(0, I)) summed over latent dims, averaged over the batch."""
    mu, logvar = posterior.mu, posterior.logvar
    term = ad.add(ad.add(ad.square(mu), ad.exp(logvar)), ad.add(ad.mul(logvar, -1.0), -1.0))
    return ad.mul(ad.mean(ad.sum_(ad.mul(term, 0.5), axis=-1)), 1.0)


def image_loss(x, recon_params: MixtureParams, posterior: PosteriorParams) -> tuple[Tensor, Tensor]:
    """VAE objective pieces: (reconstruction NLL, KL), both batch means.

    ``x`` may be byte images (B, n, n) or normalized reals, in which case
    they are mapped back to bytes through the exact inverse transform.
    """
    xv = np.asarray(x)
    if xv.dtype != np.uint8:
        xv = denormalize_array(xv)
    if xv.ndim == 2:
        xv = xv[None]
    recon = ad.mul(ad.mean(ad.sum_(dlm_log_probs(recon_params, xv), axis=(1, 2))), -1.0)
    return recon, kl_gauss(posterior)


def patch_loss(mix: MixtureParams, patch_targets) -> Tensor:
    """Patch NLL given grid- and latent-conditioned mixture parameters."""
    return dlm_nll(mix, patch_targets)


def total_loss(lx: Tensor, ly: Tensor) -> Tensor:
    """The unweighted sum of the image loss and the patch loss."""
    return ad.add(lx, ly)
