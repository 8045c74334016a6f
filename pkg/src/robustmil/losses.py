"""Classification, paired-score and paired-embedding losses with gradients.

Every loss returns ``(value, grads)`` where ``grads`` mirrors the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from robustmil.errors import ConfigError, DataError, NumericError


@dataclass
class LossConfig:
    lam: float = 0.0
    temperature: float = 0.1
    n_negatives: int = 5
    # independent weights are representable; both default to lam
    lam_embedding: float | None = None
    lam_score: float | None = None

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"LossConfig.lam must be >= 0, got {self.lam}")
        if not self.temperature > 0:
            raise ConfigError(f"LossConfig.temperature must be > 0, got {self.temperature}")
        if self.n_negatives < 1:
            raise ConfigError(f"LossConfig.n_negatives must be >= 1, got {self.n_negatives}")
        for name in ("lam_embedding", "lam_score"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"LossConfig.{name} must be >= 0, got {v}")

    @property
    def embedding_weight(self) -> float:
        return self.lam if self.lam_embedding is None else self.lam_embedding

    @property
    def score_weight(self) -> float:
        return self.lam if self.lam_score is None else self.lam_score


def _normalize(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("...d,...d->...", x, x))[..., None]
    if np.any(norms == 0):
        bad = np.argwhere(norms[..., 0] == 0)[0]
        raise NumericError(f"zero-norm {what} embedding at index {tuple(int(i) for i in bad)}")
    return x / norms, norms


def _normalize_backward(unit: np.ndarray, norms: np.ndarray, dunit: np.ndarray) -> np.ndarray:
    out = unit * -np.einsum("...d,...d->...", unit, dunit)[..., None]
    out += dunit
    out /= norms
    return out


def info_nce(
    anchors: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    temperature: float = 0.1,
) -> tuple[float, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """One-directional InfoNCE, averaged over anchors.

    anchors, positives: (N, d) raw embeddings; negatives: (N, K, d).
    Inputs are l2-normalized internally and gradients flow through the
    normalization.
    """
    anchors = np.asarray(anchors)
    positives = np.asarray(positives)
    negatives = np.asarray(negatives)
    if anchors.shape != positives.shape or negatives.ndim != 3 or negatives.shape[0] != anchors.shape[0]:
        raise DataError(
            f"info_nce shapes: anchors {anchors.shape}, positives {positives.shape}, negatives {negatives.shape}"
        )
    N = anchors.shape[0]
    ua, na = _normalize(anchors, "anchor")
    up, np_ = _normalize(positives, "positive")
    un, nn = _normalize(negatives, "negative")
    s_pos = np.einsum("nd,nd->n", ua, up) / temperature  # (N,)
    s_neg = np.einsum("nd,nkd->nk", ua, un) / temperature  # (N, K)
    logits = np.concatenate([s_pos[:, None], s_neg], axis=1)
    mx = logits.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
    loss = float(np.mean(lse - s_pos))

    prob = np.exp(logits - lse[:, None])  # softmax over (pos, negs)
    dlogits = prob.copy()
    dlogits[:, 0] -= 1.0
    dlogits /= N * temperature
    d_ua = dlogits[:, :1] * up + np.einsum("nk,nkd->nd", dlogits[:, 1:], un)
    d_up = dlogits[:, :1] * ua
    d_un = dlogits[:, 1:, None] * ua[:, None, :]
    return loss, (
        _normalize_backward(ua, na, d_ua),
        _normalize_backward(up, np_, d_up),
        _normalize_backward(un, nn, d_un),
    )


def embedding_loss(
    z_a: np.ndarray,
    z_b: np.ndarray,
    neg_a: np.ndarray,
    neg_b: np.ndarray,
    temperature: float = 0.1,
) -> tuple[float, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """Symmetric paired InfoNCE: 0.5 * (L_{a->b} + L_{b->a}).

    ``z_a[i]`` and ``z_b[i]`` are corresponding tiles. ``neg_a[i]`` are the
    negatives for anchor ``z_a[i]`` (other patients, scanner of arm a) and
    ``neg_b[i]`` likewise for arm b.
    """
    l_ab, (ga, gb1, gna) = info_nce(z_a, z_b, neg_a, temperature)
    l_ba, (gb, ga2, gnb) = info_nce(z_b, z_a, neg_b, temperature)
    return 0.5 * (l_ab + l_ba), (0.5 * (ga + ga2), 0.5 * (gb + gb1), 0.5 * gna, 0.5 * gnb)


def _scatter_rows(target: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    if len(np.unique(idx)) == len(idx):
        target[idx] += rows
    else:
        np.add.at(target, idx, rows)


def _info_nce_rows(
    U: np.ndarray, anchor: np.ndarray, positive: np.ndarray, neg: np.ndarray, temperature: float, dU: np.ndarray
) -> float:
    """One direction of InfoNCE on rows of unit vectors ``U``; adds dL/dU into ``dU``."""
    N, K = neg.shape
    ua, up, un = U[anchor], U[positive], U[neg]
    s_pos = np.einsum("nd,nd->n", ua, up) / temperature
    s_neg = np.einsum("nd,nkd->nk", ua, un) / temperature
    logits = np.concatenate([s_pos[:, None], s_neg], axis=1)
    mx = logits.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
    loss = float(np.mean(lse - s_pos))
    dlog = np.exp(logits - lse[:, None])
    dlog[:, 0] -= 1.0
    dlog /= N * temperature
    d_ua = dlog[:, :1] * up + np.einsum("nk,nkd->nd", dlog[:, 1:], un)
    _scatter_rows(dU, anchor, d_ua)
    _scatter_rows(dU, positive, dlog[:, :1] * ua)
    # negatives repeat across anchors: scatter through a sparse (rows x anchors) matrix
    scatter = sparse.csr_matrix(
        (dlog[:, 1:].ravel(), (neg.ravel(), np.repeat(np.arange(N), K))), shape=(U.shape[0], N)
    )
    dU += scatter @ ua
    return loss


def embedding_loss_indexed(
    z: np.ndarray,
    idx_a: np.ndarray,
    idx_b: np.ndarray,
    neg_a: np.ndarray,
    neg_b: np.ndarray,
    temperature: float = 0.1,
) -> tuple[float, np.ndarray]:
    """:func:`embedding_loss` on rows of one embedding matrix.

    ``idx_a``/``idx_b`` (N,) give corresponding rows; ``neg_a``/``neg_b``
    (N, K) give negative rows. Returns the loss and dL/dz. Every row is
    normalized once, so this is much cheaper than gathering first.
    """
    U, norms = _normalize(z, "tile")
    dU = np.zeros_like(U)
    l_ab = _info_nce_rows(U, idx_a, idx_b, neg_a, temperature, dU)
    l_ba = _info_nce_rows(U, idx_b, idx_a, neg_b, temperature, dU)
    dU *= 0.5
    return 0.5 * (l_ab + l_ba), _normalize_backward(U, norms, dU)


def score_loss(logits_a: np.ndarray, logits_b: np.ndarray) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Mean squared difference of paired logits over all N x C entries."""
    logits_a = np.asarray(logits_a)
    logits_b = np.asarray(logits_b)
    if logits_a.shape != logits_b.shape:
        raise DataError(f"score_loss shape mismatch: {logits_a.shape} vs {logits_b.shape}")
    diff = logits_a - logits_b
    n = diff.size
    g = 2.0 * diff / n
    return float((diff * diff).sum() / n), (g, -g)


def classification_loss(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy with 0-based integer targets (log-sum-exp stable)."""
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    N, C = logits.shape
    if targets.shape != (N,) or targets.min(initial=0) < 0 or targets.max(initial=0) >= C:
        raise DataError(f"targets must be {N} class indices in [0, {C})")
    mx = logits.max(axis=1, keepdims=True)
    shifted = logits - mx
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - log_norm
    rows = np.arange(N)
    loss = float(-logp[rows, targets].mean())
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    return loss, grad / N


def total_loss(cls: float, emb: float, score: float, lam: float, lam_score: float | None = None) -> float:
    """cls + lam * emb + lam * score (``lam_score`` overrides the score weight)."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return cls + lam * emb + (lam if lam_score is None else lam_score) * score
