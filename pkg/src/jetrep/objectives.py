"""Training objectives: NT-Xent, SupCon, masked-particle reconstruction,
VAE (reconstruction + KL), and supervised cross-entropy.

All losses are scalar TensorNodes built from tape primitives, so their
gradients come from the same reverse pass as the encoder's.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import TensorNode
from .jetdata import N_FEATURES, N_TYPES

log = logging.getLogger(__name__)

N_CONTINUOUS = N_FEATURES - N_TYPES  # leading feature block is continuous
_SELF_MASK = -1e9


class ObjectiveError(Exception):
    pass


@dataclass
class ContrastiveBatch:
    """Two L2-normalized views stacked to [2B, D] with a pairing involution."""

    embeddings: TensorNode        # [2B, D], rows unit-norm
    pair_index: np.ndarray        # [2B] int, pair_index[pair_index[i]] == i != i
    labels: np.ndarray = None     # [2B] int, optional

    def __post_init__(self):
        n = self.embeddings.shape[0]
        idx = np.asarray(self.pair_index)
        if np.any(idx[idx] != np.arange(n)) or np.any(idx == np.arange(n)):
            raise ObjectiveError("pair_index must be an involution without fixed points")
        norms = np.linalg.norm(self.embeddings.values, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ObjectiveError("contrastive embeddings must be unit-norm")
        if self.labels is not None and len(self.labels) != n:
            raise ObjectiveError("labels length must match embeddings")

    @property
    def n_rows(self):
        return self.embeddings.shape[0]


def two_view_batch(z1, z2, labels=None):
    """Stack two view embeddings [B, D] into a ContrastiveBatch."""
    b = z1.shape[0]
    emb = ad.concat([z1, z2], axis=0)
    pair = np.concatenate([np.arange(b) + b, np.arange(b)])
    lab = None if labels is None else np.concatenate([labels, labels])
    return ContrastiveBatch(emb, pair, lab)


def _masked_log_softmax(cb, tau):
    """Row log-probabilities over k != i at temperature tau."""
    n = cb.n_rows
    sim = ad.matmul(cb.embeddings, ad.transpose(cb.embeddings, (1, 0)))
    logits = ad.mul(sim, TensorNode(1.0 / tau))
    self_mask = np.zeros((n, n))
    np.fill_diagonal(self_mask, _SELF_MASK)
    return ad.log_softmax(ad.add(logits, TensorNode(self_mask)), axis=-1)


def ntxent_loss(cb: ContrastiveBatch, tau=0.1):
    """Normalized temperature-scaled cross-entropy over paired views."""
    n = cb.n_rows
    if n < 4:
        raise ObjectiveError(f"NT-Xent needs at least 2 jets (4 rows), got {n} rows")
    logp = _masked_log_softmax(cb, tau)
    pick = np.zeros((n, n))
    pick[np.arange(n), cb.pair_index] = 1.0
    picked = ad.reduce_sum(ad.mul(logp, TensorNode(pick)))
    return ad.mul(picked, TensorNode(-1.0 / n))


def supcon_loss(cb: ContrastiveBatch, tau=0.07):
    """Supervised contrastive loss, L_out variant (mean of per-positive logs).

    Positives of anchor i are all other rows sharing its label; anchors
    without positives are skipped (and logged).
    """
    if cb.labels is None:
        raise ObjectiveError("supcon_loss requires labels")
    n = cb.n_rows
    labels = np.asarray(cb.labels)
    pos = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(pos, 0.0)
    counts = pos.sum(axis=1)
    valid = counts > 0
    n_valid = int(np.count_nonzero(valid))
    if n_valid == 0:
        raise ObjectiveError("every anchor is positive-free; SupCon undefined")
    if n_valid < n:
        log.debug("supcon: skipped %d positive-free anchors", n - n_valid)
    weights = np.zeros_like(pos)
    weights[valid] = pos[valid] / counts[valid, None]
    logp = _masked_log_softmax(cb, tau)
    total = ad.reduce_sum(ad.mul(logp, TensorNode(weights)))
    return ad.mul(total, TensorNode(-1.0 / n_valid))


# ---------------------------------------------------------------------------
# masked particle modeling
# ---------------------------------------------------------------------------

@dataclass
class MaskPlan:
    mask: np.ndarray          # [B, Nmax] bool, True = masked (real particles only)
    flat_indices: np.ndarray  # [M] indices into the flattened [B*Nmax] token table
    targets: np.ndarray       # [M, N_FEATURES] original feature rows
    type_targets: np.ndarray  # [M] int type flags

    @property
    def n_masked(self):
        return self.flat_indices.size


def make_mask_plan(batch, rate=0.3, rng=None) -> MaskPlan:
    """Mask ~rate of the real particles per jet (at least one when n >= 2).

    The count is round-half-up(rate * n_real); padded positions are never
    masked.
    """
    b, nmax = batch.mask.shape
    sel = np.zeros((b, nmax), dtype=bool)
    for i in range(b):
        real = np.flatnonzero(batch.mask[i] > 0.0)
        n_real = real.size
        n_masked = int(np.floor(rate * n_real + 0.5))
        if n_real >= 2:
            n_masked = max(1, n_masked)
        n_masked = min(n_masked, n_real)
        if n_masked > 0:
            sel[i, rng.choice(real, size=n_masked, replace=False)] = True
    flat = np.flatnonzero(sel.reshape(-1))
    targets = batch.features.reshape(b * nmax, -1)[flat]
    type_targets = np.argmax(targets[:, N_CONTINUOUS:], axis=-1)
    return MaskPlan(sel, flat, targets, type_targets)


def mpm_loss(reconstructed, plan: MaskPlan):
    """Squared error on continuous features plus cross-entropy on the type
    flag, both averaged over masked tokens only.

    `reconstructed` is [M, N_FEATURES]: the leading block predicts the
    continuous features, the trailing N_TYPES block are type logits.
    """
    m = plan.n_masked
    if m == 0:
        raise ObjectiveError("mask plan holds zero masked tokens; loss undefined")
    cont_pred = ad.slice_last(reconstructed, 0, N_CONTINUOUS)
    diff = ad.sub(cont_pred, TensorNode(plan.targets[:, :N_CONTINUOUS]))
    cont = ad.mul(ad.reduce_sum(ad.mul(diff, diff)), TensorNode(1.0 / m))
    type_logits = ad.slice_last(reconstructed, N_CONTINUOUS, N_FEATURES)
    return ad.add(cont, cross_entropy_loss(type_logits, plan.type_targets))


def cross_entropy_loss(logits, labels):
    """Stable mean negative log softmax probability of the true class."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if np.any(labels < 0) or np.any(labels >= c):
        raise ObjectiveError(f"labels outside [0, {c})")
    logp = ad.log_softmax(logits, axis=-1)
    pick = np.zeros((n, c))
    pick[np.arange(n), labels] = 1.0
    return ad.mul(ad.reduce_sum(ad.mul(logp, TensorNode(pick))), TensorNode(-1.0 / n))


def vae_loss(mu, log_var, reconstructed, targets, mask=None, beta=1.0):
    """MSE over real particles plus beta * KL(q(z|x) || N(0, I)).

    KL per sample is 0.5 * sum_d(mu^2 + exp(log_var) - log_var - 1),
    averaged over the batch.
    """
    b, n, f = reconstructed.shape
    if mask is None:
        mask = np.ones((b, n))
    diff = ad.sub(reconstructed, TensorNode(targets))
    sq = ad.mul(ad.mul(diff, diff), TensorNode(mask[:, :, None]))
    n_real = float(mask.sum())
    mse = ad.mul(ad.reduce_sum(sq), TensorNode(1.0 / (n_real * f)))
    kl_terms = ad.sub(ad.add(ad.mul(mu, mu), ad.exp(log_var)),
                      ad.add(log_var, TensorNode(1.0)))
    kl = ad.mul(ad.reduce_sum(kl_terms), TensorNode(0.5 / b))
    return ad.add(mse, ad.mul(kl, TensorNode(beta)))
