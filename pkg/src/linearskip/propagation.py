"""Numerical verification of how features and gradients travel along the
skip path of a stage.

The key identities, for blocks m..n of one stage with shared matrix P and
branch outputs x'_{i+1} = F(x_i):

    forward:   x_n = P^(n-m) x_m + sum_i P^(n-i-1) x'_{i+1}
    backward:  dL/dx_m = (P^(n-m))^T dL/dx_n
                         + sum_i J_i^T (P^(n-i-1))^T dL/dx_n

where J_i is the Jacobian of x'_{i+1} with respect to x_m. Both are exact
chain-rule rearrangements, so deviations measure floating-point
accumulation only.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import transforms
from .autodiff import Graph, add, reduce_sum, vjp
from .network import Network
from .transforms import apply_transform, is_idempotent, matrix_power

__all__ = [
    "PropagationTrace",
    "ExpansionCheck",
    "NullSpaceSplit",
    "FlowReport",
    "capture_trace",
    "verify_forward_expansion",
    "verify_backward_expansion",
    "skip_path_gain",
    "gradient_skip_gain",
    "null_space_components",
    "flow_report",
]


@dataclass
class PropagationTrace:
    """Recorded inputs, branch outputs, and gradients for blocks m..n.

    ``inputs[j]`` is x_{m+j}; ``branch_outputs[j]`` is x'_{m+j+1};
    ``gradients[j]`` is dL/dx_{m+j} for the probe loss L = sum(x_n).
    """

    stage: int
    m: int
    n: int
    transform: np.ndarray
    inputs: list
    branch_outputs: list
    gradients: list
    _graph: Graph
    _input_tensors: list
    _branch_tensors: list

    def x(self, i: int) -> np.ndarray:
        if not self.m <= i <= self.n:
            raise IndexError(f"block index {i} outside trace range "
                             f"[{self.m}, {self.n}]")
        return self.inputs[i - self.m]

    def branch(self, i: int) -> np.ndarray:
        """x'_{i+1} = F(x_i), for m <= i < n."""
        if not self.m <= i < self.n:
            raise IndexError(f"branch index {i} outside trace range "
                             f"[{self.m}, {self.n})")
        return self.branch_outputs[i - self.m]

    def grad(self, i: int) -> np.ndarray:
        if not self.m <= i <= self.n:
            raise IndexError(f"gradient index {i} outside trace range "
                             f"[{self.m}, {self.n}]")
        return self.gradients[i - self.m]


def capture_trace(network: Network, x, stage: int, m: int, n: int,
                  mode: str = "eval") -> PropagationTrace:
    """Run the network over blocks m..n of a stage and record the trace.

    The probe loss is the sum of the entries of x_n; gradients with
    respect to every recorded block input come from one reverse pass.
    Batch-norm runs in eval mode by default so capture has no side
    effects.
    """
    blocks = network.stages[stage - 1]
    k = len(blocks)
    if not (1 <= m < n <= k):
        raise ValueError(
            f"need 1 <= m < n <= {k} blocks in stage {stage}, got m={m}, n={n}")
    p = network.stage_skip_matrix(stage)
    if p is None:
        p = np.zeros((blocks[0].width, blocks[0].width))

    with Graph() as graph:
        h = network.stage_input(x, stage, mode)
        h.requires_grad = True
        input_tensors = []
        branch_tensors = []
        for i in range(1, n):
            if i >= m:
                input_tensors.append(h)
            blk = blocks[i - 1]
            if i >= m:
                branch = blk.branch_output(h, mode)
                branch_tensors.append(branch)
                if blk.skip is not None:
                    h = add(apply_transform(blk.skip, h), branch)
                else:
                    h = branch
            else:
                h = blk.forward(h, mode)
        input_tensors.append(h)  # x_n
        loss = reduce_sum(h)

    grads = vjp(graph, loss)
    gradients = [np.asarray(grads[t]) for t in input_tensors]
    trace = PropagationTrace(
        stage=stage, m=m, n=n, transform=np.asarray(p, dtype=np.float64),
        inputs=[t.data for t in input_tensors],
        branch_outputs=[t.data for t in branch_tensors],
        gradients=gradients, _graph=graph, _input_tensors=input_tensors,
        _branch_tensors=branch_tensors)
    _check_trace(trace)
    return trace


def _check_trace(trace: PropagationTrace, tol: float = 1e-10) -> None:
    """Replay y = P x + F(x) from the recorded pieces."""
    scale = max(np.abs(trace.inputs[0]).max(), 1.0)
    for i in range(trace.m, trace.n):
        recon = apply_transform(trace.transform, trace.x(i)) + trace.branch(i)
        dev = np.abs(recon - trace.x(i + 1)).max()
        if dev > tol * scale:
            raise AssertionError(
                f"trace violates the block equation at block {i}: "
                f"deviation {dev:.3e}")


@dataclass
class ExpansionCheck:
    deviation: float
    collapsed_deviation: Optional[float] = None

    def __float__(self) -> float:
        return self.deviation


def verify_forward_expansion(trace: PropagationTrace, m: Optional[int] = None,
                             n: Optional[int] = None) -> ExpansionCheck:
    """Rebuild x_n from x_m and the branch outputs; report max deviation.

    For an idempotent P the collapsed form (every positive power replaced
    by P itself) is checked as well.
    """
    m = trace.m if m is None else m
    n = trace.n if n is None else n
    if not (trace.m <= m < n <= trace.n):
        raise ValueError(f"need {trace.m} <= m < n <= {trace.n}")
    p = trace.transform

    def reconstruct(power):
        rhs = apply_transform(power(n - m), trace.x(m))
        for i in range(m, n):
            rhs = rhs + apply_transform(power(n - i - 1), trace.branch(i))
        return rhs

    rhs = reconstruct(lambda k: matrix_power(p, k))
    deviation = float(np.abs(rhs - trace.x(n)).max())

    collapsed = None
    if is_idempotent(p, 1e-8):
        eye = np.eye(p.shape[0])
        rhs_c = reconstruct(lambda k: eye if k == 0 else p)
        collapsed = float(np.abs(rhs_c - trace.x(n)).max())
    return ExpansionCheck(deviation, collapsed)


def verify_backward_expansion(trace: PropagationTrace, m: Optional[int] = None,
                              n: Optional[int] = None) -> float:
    """Rebuild dL/dx_m from dL/dx_n plus branch vector-Jacobian terms."""
    m = trace.m if m is None else m
    n = trace.n if n is None else n
    if not (trace.m <= m < n <= trace.n):
        raise ValueError(f"need {trace.m} <= m < n <= {trace.n}")
    p = trace.transform
    g_n = trace.grad(n)
    x_m_tensor = trace._input_tensors[m - trace.m]

    recon = apply_transform(matrix_power(p, n - m).T, g_n)
    for i in range(m, n):
        cotangent = apply_transform(matrix_power(p, n - i - 1).T, g_n)
        branch_tensor = trace._branch_tensors[i - trace.m]
        pulled = vjp(trace._graph, branch_tensor, seed=cotangent,
                     wrt=[x_m_tensor])
        if x_m_tensor in pulled:
            recon = recon + pulled[x_m_tensor]
    return float(np.abs(recon - trace.grad(m)).max())


def _norm(v) -> float:
    return float(np.linalg.norm(np.asarray(v).ravel()))


def skip_path_gain(p, k: int, x) -> float:
    """|| P^k x ||_2 / || x ||_2 over k stacked skip-connections."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    mat = p.matrix if isinstance(p, transforms.StructuredTransform) else \
        np.asarray(p, dtype=np.float64)
    xd = np.asarray(x, dtype=np.float64)
    base = _norm(xd)
    if base == 0.0:
        raise ValueError("skip_path_gain is undefined for a zero input")
    pk = matrix_power(mat, k)
    out = apply_transform(pk, xd) if xd.ndim == 4 else pk @ xd
    return _norm(out) / base


def gradient_skip_gain(p, k: int, g) -> float:
    """|| (P^k)^T g ||_2 / || g ||_2 for a gradient signal g."""
    mat = p.matrix if isinstance(p, transforms.StructuredTransform) else \
        np.asarray(p, dtype=np.float64)
    return skip_path_gain(mat.T, k, g)


@dataclass
class NullSpaceSplit:
    column_part: np.ndarray
    null_part: np.ndarray
    fractions: Optional[tuple]


def null_space_components(p, v) -> NullSpaceSplit:
    """Split v = Pv + (v - Pv) for an idempotent P.

    For symmetric P the two parts are orthogonal and the squared-norm
    fractions sum to 1; for oblique projectors only the algebraic split
    is meaningful and ``fractions`` is None.
    """
    mat = p.matrix if isinstance(p, transforms.StructuredTransform) else \
        np.asarray(p, dtype=np.float64)
    if not is_idempotent(mat, 1e-8):
        raise ValueError("null-space split requires an idempotent matrix")
    vd = np.asarray(v, dtype=np.float64)
    col = apply_transform(mat, vd) if vd.ndim == 4 else mat @ vd
    null = vd - col
    fractions = None
    if np.abs(mat - mat.T).max() <= 1e-10:
        total = _norm(vd) ** 2
        if total > 0:
            fractions = (_norm(col) ** 2 / total, _norm(null) ** 2 / total)
    return NullSpaceSplit(column_part=col, null_part=null, fractions=fractions)


@dataclass
class FlowReport:
    """Signal accounting along one traced span of blocks."""

    stage: int
    m: int
    n: int
    skip_gain: float
    gradient_gain: float
    term_norms: list
    forward_deviation: float
    backward_deviation: float
    null_fraction_x_m: Optional[float]
    null_fraction_x_n: Optional[float]

    def to_text(self) -> str:
        out = io.StringIO()
        out.write(f"stage {self.stage}, blocks {self.m}..{self.n}\n")
        out.write(f"  skip-path gain      {self.skip_gain:.6f}\n")
        out.write(f"  gradient skip gain  {self.gradient_gain:.6f}\n")
        out.write(f"  forward expansion   max dev {self.forward_deviation:.3e}\n")
        out.write(f"  backward expansion  max dev {self.backward_deviation:.3e}\n")
        for i, nrm in enumerate(self.term_norms):
            out.write(f"  |P^{self.n - self.m - i - 1} x'_{self.m + i + 1}|"
                      f"  {nrm:.6f}\n")
        if self.null_fraction_x_m is not None:
            out.write(f"  null-space fraction of x_m  "
                      f"{self.null_fraction_x_m:.6f}\n")
            out.write(f"  null-space fraction of x_n  "
                      f"{self.null_fraction_x_n:.6f}\n")
        return out.getvalue()

    def csv_rows(self) -> list:
        head = ["stage", "m", "n", "skip_gain", "gradient_gain",
                "forward_deviation", "backward_deviation",
                "null_fraction_x_m", "null_fraction_x_n"]
        row = [self.stage, self.m, self.n, self.skip_gain, self.gradient_gain,
               self.forward_deviation, self.backward_deviation,
               "" if self.null_fraction_x_m is None else self.null_fraction_x_m,
               "" if self.null_fraction_x_n is None else self.null_fraction_x_n]
        return [head, row]


def flow_report(trace: PropagationTrace) -> FlowReport:
    """Gains, expansion deviations, and null-space shares for one trace."""
    p = trace.transform
    x_m = trace.x(trace.m)
    g_n = trace.grad(trace.n)
    span = trace.n - trace.m
    forward = verify_forward_expansion(trace)
    backward = verify_backward_expansion(trace)
    terms = [_norm(apply_transform(matrix_power(p, trace.n - i - 1),
                                   trace.branch(i)))
             for i in range(trace.m, trace.n)]
    nf_m = nf_n = None
    if is_idempotent(p, 1e-8) and np.abs(p - p.T).max() <= 1e-10:
        split_m = null_space_components(p, x_m)
        split_n = null_space_components(p, trace.x(trace.n))
        if split_m.fractions is not None:
            nf_m = split_m.fractions[1]
        if split_n.fractions is not None:
            nf_n = split_n.fractions[1]
    return FlowReport(
        stage=trace.stage, m=trace.m, n=trace.n,
        skip_gain=skip_path_gain(p, span, x_m) if _norm(x_m) else 0.0,
        gradient_gain=gradient_skip_gain(p, span, g_n) if _norm(g_n) else 0.0,
        term_norms=terms, forward_deviation=forward.deviation,
        backward_deviation=backward, null_fraction_x_m=nf_m,
        null_fraction_x_n=nf_n)
