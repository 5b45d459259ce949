"""Read-weight generation: scoring MLP, last-read mask, and discretization.

Three discretization modes:
  * reinforce-sample: softmax weights, multinomial sample, log-prob kept for
    the score-function estimator;
  * gumbel-st: learned inverse temperature, Gumbel perturbation, hard one-hot
    forward with the soft weights on the backward pass (straight-through);
  * argmax: deterministic, used at evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .memory import MemoryState

MODES = ("reinforce-sample", "gumbel-st", "argmax")

LAST_READ_PENALTY = 100.0
USAGE_EPS = 1e-5


@dataclass
class AddressingParams:
    """Weights of the cell-scoring MLP plus the inverse-temperature head."""

    score: Tensor      # (hidden, 1) combination vector
    w_hidden: Tensor   # (d_h, hidden)
    w_input: Tensor    # (d_x, hidden)
    w_cell: Tensor     # (a+c, hidden)
    w_usage: Tensor    # (k, hidden)
    bias: Tensor       # (hidden,)
    temp_w: Tensor     # (d_h, 1)
    temp_b: Tensor     # (1,)

    def named(self, prefix="addr"):
        return {f"{prefix}/{k}": v for k, v in self.__dict__.items()}


@dataclass
class ReadDecision:
    """Everything one addressing event produces."""

    logits: Tensor          # masked scores, (..., k)
    soft_weights: Tensor    # simplex weights the estimator differentiates
    onehot: np.ndarray      # discrete choice, (..., k)
    index: object           # int or (batch,) ints
    log_prob: Tensor        # log soft_weights[index]
    read_weights: object    # what read() consumes: np one-hot or ST tensor
    temperature: Tensor = None  # gumbel mode only, >= 1


def normalize_usage(counts: np.ndarray, eps: float = USAGE_EPS) -> np.ndarray:
    """Center the read tallies and divide by their standard deviation."""
    centered = counts - counts.mean(axis=-1, keepdims=True)
    std = centered.std(axis=-1, keepdims=True)
    return centered / (std + eps)


def update_usage(memory: MemoryState, onehot: np.ndarray, index) -> np.ndarray:
    """Tally this step's read and return the normalized usage vector."""
    memory.record_read(onehot, index)
    return normalize_usage(memory.usage_counts)


def read_logits(params: AddressingParams, h: Tensor, x: Tensor,
                memory: MemoryState, usage: np.ndarray) -> Tensor:
    """score^T tanh(W_h h + W_x x + W_cell M[i] + W_u u) per cell i."""
    rows = memory.full_rows()                            # (..., k, a+c)
    per_cell = ad.matmul(rows, params.w_cell)            # (..., k, hidden)
    base = ad.matmul(h, params.w_hidden)
    base = ad.add(base, ad.matmul(x, params.w_input))
    base = ad.add(base, ad.matmul(Tensor(usage), params.w_usage))
    base = ad.add(base, params.bias)
    base = ad.reshape(base, base.data.shape[:-1] + (1, base.data.shape[-1]))
    feat = ad.tanh(ad.add(per_cell, base))
    scores = ad.matmul(feat, params.score)               # (..., k, 1)
    return ad.reshape(scores, scores.data.shape[:-1])


def mask_last_read(logits: Tensor, last_read_index) -> Tensor:
    """Subtract 100 from the logit of the cell read last step."""
    if last_read_index is None:
        return logits
    penalty = np.zeros_like(logits.data)
    if np.asarray(last_read_index).ndim == 0:
        penalty[..., int(last_read_index)] = -LAST_READ_PENALTY
    else:
        idx = np.asarray(last_read_index, dtype=np.intp)
        np.put_along_axis(penalty, idx[..., None], -LAST_READ_PENALTY, axis=-1)
    return ad.add(logits, Tensor(penalty))


def _onehot(index, k: int) -> np.ndarray:
    idx = np.asarray(index, dtype=np.intp)
    out = np.zeros(idx.shape + (k,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flat = probs.reshape(-1, probs.shape[-1])
    u = rng.random(flat.shape[0])
    cdf = flat.cumsum(axis=-1)
    idx = (u[:, None] > cdf).sum(axis=-1)
    return idx.reshape(probs.shape[:-1])


def _log_prob_of(logits: Tensor, onehot: np.ndarray) -> Tensor:
    nll = ad.cross_entropy_with_softmax(logits, Tensor(onehot))
    return ad.mul(nll, Tensor(-1.0))


def discretize(logits: Tensor, h: Tensor, params: AddressingParams, mode: str,
               rng: np.random.Generator = None, *, gumbel_noise: np.ndarray = None,
               frozen_index=None, straight_through: bool = True,
               need_log_prob: bool = True) -> ReadDecision:
    """Turn masked logits into a one-hot read decision.

    `gumbel_noise` and `frozen_index` replay recorded draws so a decision can
    be frozen for finite-difference checks. `straight_through=False` keeps the
    soft weights on the forward pass too (the differentiable surrogate that
    gradient checks compare against). The score-function estimator always gets
    its log probability; the other modes compute it only on request.
    """
    if mode not in MODES:
        raise ValueError(f"discretize: unknown mode {mode!r}; expected one of {MODES}")
    if not np.isfinite(logits.data).all():
        raise FloatingPointError("discretize: non-finite logits")
    k = logits.data.shape[-1]

    if mode == "reinforce-sample":
        soft = ad.softmax(logits)
        if frozen_index is not None:
            index = frozen_index
        else:
            index = _sample_rows(soft.data, rng)
        onehot = _onehot(index, k)
        return ReadDecision(logits, soft, onehot, index,
                            _log_prob_of(logits, onehot), onehot)

    if mode == "gumbel-st":
        temp = ad.add(ad.softplus(ad.add(ad.matmul(h, params.temp_w), params.temp_b)),
                      Tensor(1.0))
        if gumbel_noise is None:
            gumbel_noise = rng.gumbel(size=logits.data.shape)
        noisy = ad.add(logits, Tensor(gumbel_noise))
        tempered = ad.mul(noisy, temp)
        soft = ad.softmax(tempered)
        index = soft.data.argmax(axis=-1)
        if index.ndim == 0:
            index = int(index)
        onehot = _onehot(index, k)
        if straight_through:
            # forward equals the one-hot; backward sees the soft weights
            weights = ad.add(soft, Tensor(onehot - soft.data))
        else:
            weights = soft
        log_prob = _log_prob_of(tempered, onehot) if need_log_prob else None
        return ReadDecision(logits, soft, onehot, index, log_prob, weights,
                            temperature=temp)

    # argmax
    index = logits.data.argmax(axis=-1)
    if index.ndim == 0:
        index = int(index)
    onehot = _onehot(index, k)
    soft = ad.softmax(logits)
    log_prob = _log_prob_of(logits, onehot) if need_log_prob else None
    return ReadDecision(logits, soft, onehot, index, log_prob, onehot)
