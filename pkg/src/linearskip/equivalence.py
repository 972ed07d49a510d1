"""Constructive conversions between skip-connection parameterizations.

An orthogonal-skip stage can be rewritten with identity skips by folding
Q^L into the layer feeding the stage and wrapping every branch composite
with fixed 1x1 mixes (post Q^(L-i), pre Q^(i-L-1)). An idempotent-skip
stage diagonalizes to {0,1} skips via P = U^-1 diag(lam) U, with branch
wraps U / U^-1 and a change of basis U^-1 on the stage output. Both
rewrites leave the network's function unchanged up to floating-point
accumulation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Graph, backward, reduce_sum, Tensor
from .network import Network
from .transforms import (diagonalize_idempotent, is_idempotent, is_orthogonal,
                         matrix_power)

__all__ = [
    "EquivalenceReport",
    "MixingReport",
    "convert_orthogonal_to_identity",
    "convert_idempotent_to_diagonal",
    "verify_equivalence",
    "input_gradient_deviation",
    "mixing_interaction_report",
]


def _mix_output_channels(kernel, mat: np.ndarray) -> None:
    """Left-multiply a conv kernel's output-channel axis by a matrix."""
    kd = kernel.data
    kernel.data = np.einsum("oc,cihw->oihw", mat.astype(kd.dtype), kd)


def _feeding_kernel(net: Network, stage: int):
    """The convolution whose output is the 1-based stage's input."""
    return net.stem if stage == 1 else net.transitions[stage - 2]


def _stage_matrix(net: Network, stage: int) -> np.ndarray:
    blocks = net.stages[stage - 1]
    widths = {b.width for b in blocks}
    if len(widths) != 1:
        raise ValueError(f"stage {stage} mixes widths {sorted(widths)}; "
                         "conversion requires constant width")
    p = net.stage_skip_matrix(stage)
    if p is None:
        raise ValueError(f"stage {stage} has no skip transform to convert")
    return p


def convert_orthogonal_to_identity(net: Network) -> Network:
    """Rewrite every stage's orthogonal skips as identity skips.

    Requires each stage to share one orthogonal matrix Q. The returned
    network computes the same function as the input for every input.
    """
    out = net.copy()
    for stage in (1, 2, 3):
        q = _stage_matrix(out, stage)
        if not is_orthogonal(q, 1e-9):
            raise ValueError(
                f"stage {stage} skip matrix is not orthogonal; "
                "use convert_idempotent_to_diagonal for idempotent skips")
        blocks = out.stages[stage - 1]
        lcount = len(blocks)
        _mix_output_channels(_feeding_kernel(out, stage),
                             matrix_power(q, lcount))
        eye = np.eye(q.shape[0])
        qt = q.T
        for i, blk in enumerate(blocks, start=1):
            blk.post_mix = matrix_power(q, lcount - i)
            blk.pre_mix = matrix_power(qt, lcount + 1 - i)
            blk.set_skip(eye)
    return out


def convert_idempotent_to_diagonal(net: Network) -> Network:
    """Rewrite every stage's idempotent skips as diagonal {0,1} skips."""
    out = net.copy()
    for stage in (1, 2, 3):
        p = _stage_matrix(out, stage)
        if not is_idempotent(p, 1e-8):
            raise ValueError(
                f"stage {stage} skip matrix is not idempotent; "
                "use convert_orthogonal_to_identity for orthogonal skips")
        diag = diagonalize_idempotent(p)
        blocks = out.stages[stage - 1]
        _mix_output_channels(_feeding_kernel(out, stage), diag.U)
        lam = np.diag(diag.lam)
        for blk in blocks:
            blk.post_mix = diag.U
            blk.pre_mix = diag.U_inv
            blk.set_skip(lam)
        out.stage_unmix[stage - 1] = diag.U_inv
    return out


@dataclass
class EquivalenceReport:
    max_deviation: float
    tol: float
    num_inputs: int

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tol


def verify_equivalence(net_a: Network, net_b: Network, num_inputs: int = 32,
                       seed: int = 0, tol: float = 1e-8) -> EquivalenceReport:
    """Max |logits_a - logits_b| over seeded random inputs, eval mode."""
    if net_a.spec.input_shape != net_b.spec.input_shape:
        raise ValueError(
            f"input shapes differ: {net_a.spec.input_shape} vs "
            f"{net_b.spec.input_shape}")
    if net_a.spec.num_classes != net_b.spec.num_classes:
        raise ValueError(
            f"output sizes differ: {net_a.spec.num_classes} vs "
            f"{net_b.spec.num_classes}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((num_inputs,) + tuple(net_a.spec.input_shape))
    out_a = net_a.forward(x, mode="eval").data
    out_b = net_b.forward(x, mode="eval").data
    return EquivalenceReport(float(np.abs(out_a - out_b).max()), tol,
                             num_inputs)


def input_gradient_deviation(net_a: Network, net_b: Network,
                             num_inputs: int = 4, seed: int = 0) -> float:
    """Max deviation of d(sum of logits)/d(input) between two networks."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((num_inputs,) + tuple(net_a.spec.input_shape))
    grads = []
    for net in (net_a, net_b):
        xt = Tensor(x, requires_grad=True, dtype=net.dtype)
        with Graph() as g:
            loss = reduce_sum(net.forward(xt, mode="eval"))
        grads.append(backward(g, loss)[xt].data)
    return float(np.abs(grads[0] - grads[1]).max())


@dataclass
class MixingReport:
    """Whether a block's fixed wraps exchange information across branches."""

    mixing: bool
    pre_block_diagonal: bool
    post_block_diagonal: bool
    pre_pattern: Optional[np.ndarray]
    post_pattern: Optional[np.ndarray]


def _branch_pattern(mat: Optional[np.ndarray], branches: int,
                    tol: float = 1e-12):
    """(is_block_diagonal, BxB nonzero-block pattern) for one wrap matrix."""
    if mat is None:
        return True, None
    r = mat.shape[0]
    w = r // branches
    pattern = np.zeros((branches, branches), dtype=bool)
    for i in range(branches):
        for j in range(branches):
            block = mat[i * w:(i + 1) * w, j * w:(j + 1) * w]
            pattern[i, j] = bool(np.abs(block).max() > tol)
    off_diag = pattern & ~np.eye(branches, dtype=bool)
    return not off_diag.any(), pattern


def mixing_interaction_report(block) -> MixingReport:
    """Check the pre/post wraps against the block's branch partition."""
    if block.groups < 2:
        raise ValueError("mixing report requires a multi-branch block")
    pre_bd, pre_pat = _branch_pattern(block.pre_mix, block.groups)
    post_bd, post_pat = _branch_pattern(block.post_mix, block.groups)
    return MixingReport(mixing=not (pre_bd and post_bd),
                        pre_block_diagonal=pre_bd,
                        post_block_diagonal=post_bd,
                        pre_pattern=pre_pat, post_pattern=post_pat)
