"""Soft-target bidirectional contrastive loss over unit-norm representations.

For a batch of ``K`` aligned pairs with representations ``a`` (modality 1)
and ``b`` (modality 2)::

    l12[i, j] = -log softmax_j(<a_i, b_j> / tau)
    l21[j, i] = -log softmax_i(<b_j, a_i> / tau)
    t[i, j]   =  softmax_j((<a_i, a_j> + <b_i, b_j>) / (2 tau))
    loss      =  sum_ij (t[i, j] l12[i, j] + t[j, i] l21[j, i]) / (2K)

The targets are constants: no gradient flows through them, including their
dependence on ``tau``.
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import kernels
from .autograd import Tensor
from .errors import ContractError, ShapeError
from .model import encode_modality

UNIT_NORM_TOL = 1e-4


@dataclass
class LossReport:
    total: Tensor
    l12: Tensor
    l21: Tensor
    targets12: np.ndarray
    targets21: np.ndarray
    tau: float


def _check_unit_rows(x, name):
    norms = np.sqrt((np.asarray(x.data, dtype=np.float64) ** 2).sum(axis=1))
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if bad.size:
        raise ContractError(f"{name}: row {int(bad[0])} has norm {norms[bad[0]]:.6f}, expected unit rows")


def cosine_similarity_matrix(a, b):
    """``[K, K]`` matrix of dot products between unit rows of ``a`` and ``b``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_similarity_matrix: incompatible shapes {a.shape} and {b.shape}")
    _check_unit_rows(a, "a")
    _check_unit_rows(b, "b")
    return ag.matmul(a, ag.transpose(b))


def _tau_value(tau):
    value = float(tau.data) if isinstance(tau, Tensor) else float(tau)
    if not value > 0:
        raise ContractError(f"temperature must be positive, got {value}")
    return value


def pairwise_contrastive_loss(sim, tau):
    """Row-wise ``-log softmax(sim / tau)``; differentiable in ``sim`` and ``tau``."""
    _tau_value(tau)
    if isinstance(tau, Tensor):
        logits = ag.div(sim, tau)
    else:
        logits = ag.mul(sim, 1.0 / float(tau))
    return ag.neg(ag.log_softmax_rows(logits))


def soft_targets(sim11, sim22, tau):
    """Detached ``softmax_j((sim11 + sim22) / (2 tau))`` as a plain array."""
    t = _tau_value(tau)
    s11 = sim11.data if isinstance(sim11, Tensor) else np.asarray(sim11)
    s22 = sim22.data if isinstance(sim22, Tensor) else np.asarray(sim22)
    if s11.shape != s22.shape or s11.ndim != 2 or s11.shape[0] != s11.shape[1]:
        raise ShapeError(f"soft_targets: need equal square matrices, got {s11.shape} and {s22.shape}")
    logits = np.ascontiguousarray((s11 + s22) / (2.0 * t), dtype=s11.dtype)
    return kernels.softmax_rows(logits)


def total_loss(m1hat, m2hat, tau, targets=None):
    """Full objective for one batch.

    ``tau`` is a positive scalar tensor (usually ``exp(log_tau)``) or a float.
    ``targets`` may supply a precomputed target matrix; by default it is
    built from the current batch.  The targets for the 2->1 direction use
    the same row-softmax construction, so ``targets21 == targets12``.
    """
    if m1hat.shape != m2hat.shape:
        raise ShapeError(f"total_loss: batch shapes differ, {m1hat.shape} vs {m2hat.shape}")
    k = m1hat.shape[0]
    sim12 = cosine_similarity_matrix(m1hat, m2hat)
    sim21 = ag.transpose(sim12)
    l12 = pairwise_contrastive_loss(sim12, tau)
    l21 = pairwise_contrastive_loss(sim21, tau)
    if targets is None:
        with ag.no_grad():
            sim11 = ag.matmul(m1hat, ag.transpose(m1hat))
            sim22 = ag.matmul(m2hat, ag.transpose(m2hat))
        targets = soft_targets(sim11, sim22, tau)
    t = Tensor(np.asarray(targets), dtype=m1hat.dtype)
    weighted = ag.add(ag.tsum(ag.mul(t, l12)), ag.tsum(ag.mul(t, l21)))
    total = ag.mul(weighted, 1.0 / (2.0 * k))
    return LossReport(total, l12, l21, t.data, t.data, _tau_value(tau))


def dfe_loss(params, x1, x2, targets=None):
    """Encode both modalities and return the batch :class:`LossReport`."""
    a = encode_modality(params, x1, 1)
    b = encode_modality(params, x2, 2)
    return total_loss(a, b, ag.exp(params.log_tau), targets=targets)


def frozen_target_loss(params, x1, x2):
    """Loss closure with targets pinned at the current parameters.

    The analytic gradient treats targets as constants, so a finite-difference
    probe must hold them fixed too; otherwise it measures a different function.
    """
    with ag.no_grad():
        targets = dfe_loss(params, x1, x2).targets12.astype(np.float64)
    return lambda p: dfe_loss(p, x1, x2, targets=targets).total
