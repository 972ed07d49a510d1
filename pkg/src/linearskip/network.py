"""Building blocks and full classification networks.

A block computes ``y = P x + F(x)`` where the branch composite F is
BN -> conv3x3 -> BN -> ReLU -> conv3x3 and P is a fixed square
channel-mixing matrix (or absent, for the no-skip control). Networks are
a 3x3 stem, three constant-width stages of K blocks, stride-2 transition
convolutions between stages, and a global-pool + dense head.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import transforms
from .autodiff import (BatchNormState, Tensor, add, batch_norm, channel_mix,
                       conv2d, dense, global_avg_pool, relu)
from .transforms import StructuredTransform

__all__ = [
    "NetworkSpec",
    "BNLayer",
    "BuildingBlock",
    "Network",
    "make_transform",
    "build_block",
    "build_network",
    "describe",
    "NetworkSummary",
]

BRANCH_MODES = ("single", "multi", "depthwise")
TRANSFORM_KINDS = transforms.KINDS + ("none",)


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass
class NetworkSpec:
    """Declarative architecture description.

    ``transform_kind`` accepts any structured-transform kind plus
    ``"none"`` for the no-skip control (P = 0). ``transform_params`` may
    carry ``B`` (an integer or ``"width"``, resolved per stage), ``N``
    (period), and ``seed``. ``share_random_per_stage`` forces one shared
    random orthogonal matrix per stage instead of one per block.
    """

    blocks_per_stage: int
    stage_widths: tuple = (16, 32, 64)
    branch_mode: str = "single"
    num_branches: int = 1
    transform_kind: str = "identity"
    transform_params: dict = field(default_factory=dict)
    num_classes: int = 10
    input_shape: tuple = (3, 32, 32)
    share_random_per_stage: bool = False

    @property
    def depth_label(self) -> int:
        # two convolutions per block, three stages, stem and head layers
        return 6 * self.blocks_per_stage + 2

    def resolve_branches(self, width: int) -> int:
        if self.branch_mode == "single":
            return 1
        if self.branch_mode == "depthwise":
            return width
        return self.num_branches

    def resolve_transform_b(self, width: int) -> int:
        b = self.transform_params.get("B", self.num_branches
                                      if self.branch_mode == "multi" else width)
        return width if b == "width" else int(b)

    def validate(self) -> None:
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be a positive integer")
        if len(self.stage_widths) != 3 or any(w < 1 for w in self.stage_widths):
            raise ValueError("stage_widths must be 3 positive integers")
        if self.branch_mode not in BRANCH_MODES:
            raise ValueError(f"branch_mode must be one of {BRANCH_MODES}, "
                             f"got {self.branch_mode!r}")
        if self.branch_mode == "multi":
            if self.num_branches < 2:
                raise ValueError("multi-branch mode requires num_branches >= 2")
            for w in self.stage_widths:
                if w % self.num_branches:
                    raise ValueError(
                        f"stage width {w} is not divisible by "
                        f"{self.num_branches} branches")
        if self.transform_kind not in TRANSFORM_KINDS:
            raise ValueError(f"transform_kind must be one of {TRANSFORM_KINDS}, "
                             f"got {self.transform_kind!r}")
        if self.transform_kind.startswith("orthogonal"):
            for w in self.stage_widths:
                if not _is_power_of_two(w):
                    raise ValueError(
                        f"orthogonal transforms require power-of-2 widths, "
                        f"stage width {w} is not")
        if self.transform_kind.startswith("idempotent"):
            for w in self.stage_widths:
                b = self.resolve_transform_b(w)
                if b < 1 or w % b:
                    raise ValueError(
                        f"idempotent transform branch count {b} does not "
                        f"divide stage width {w}")
        if self.transform_kind == "periodic":
            if int(self.transform_params.get("N", 1)) < 1:
                raise ValueError("periodic transform requires N >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (channels, height, width)")

    def to_dict(self) -> dict:
        return {
            "blocks_per_stage": self.blocks_per_stage,
            "stage_widths": list(self.stage_widths),
            "branch_mode": self.branch_mode,
            "num_branches": self.num_branches,
            "transform_kind": self.transform_kind,
            "transform_params": dict(self.transform_params),
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "share_random_per_stage": self.share_random_per_stage,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown NetworkSpec keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("stage_widths", "input_shape"):
            if key in kw:
                kw[key] = tuple(kw[key])
        spec = cls(**kw)
        spec.validate()
        return spec


class BNLayer:
    """Trainable scale/shift plus running statistics for one batch norm."""

    def __init__(self, channels: int, dtype=np.float64):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.state = BatchNormState(channels)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, mode)


def _he_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int,
             dtype) -> Tensor:
    std = np.sqrt(2.0 / (in_ch * k * k))
    w = rng.standard_normal((out_ch, in_ch, k, k)) * std
    return Tensor(w.astype(dtype), requires_grad=True)


class BuildingBlock:
    """One ``y = P x + F(x)`` unit at constant width.

    The branch set is realized as grouped convolutions: ``groups = 1`` for
    a single branch, ``groups = B`` for B parallel branches on disjoint
    channel slices, and ``groups = width`` for the depthwise extreme. The
    optional ``pre_mix``/``post_mix`` matrices wrap the whole branch
    composite (used by the equivalence conversions).
    """

    def __init__(self, width: int, groups: int, skip: Optional[np.ndarray],
                 rng: np.random.Generator, dtype=np.float64,
                 transform_kind: Optional[str] = None):
        if width % groups:
            raise ValueError(f"width {width} not divisible by {groups} branches")
        self.width = width
        self.groups = groups
        self.transform_kind = transform_kind
        self.bn1 = BNLayer(width, dtype)
        self.conv1 = _he_conv(rng, width, width // groups, 3, dtype)
        self.bn2 = BNLayer(width, dtype)
        self.conv2 = _he_conv(rng, width, width // groups, 3, dtype)
        self.pre_mix: Optional[np.ndarray] = None
        self.post_mix: Optional[np.ndarray] = None
        self.set_skip(skip)

    def set_skip(self, skip: Optional[np.ndarray]) -> None:
        if skip is not None:
            skip = np.asarray(skip, dtype=np.float64)
            if skip.shape != (self.width, self.width):
                raise ValueError(
                    f"skip matrix shape {skip.shape} does not match width "
                    f"{self.width}")
        self.skip = skip
        self._skip_is_identity = skip is not None and \
            np.array_equal(skip, np.eye(self.width))

    @property
    def num_branches(self) -> int:
        return self.groups

    def branch_parameters(self, branch: int):
        """Views of the two convolution kernels belonging to one branch."""
        og = self.width // self.groups
        sl = slice(branch * og, (branch + 1) * og)
        return self.conv1.data[sl], self.conv2.data[sl]

    def branch_output(self, x: Tensor, mode: str) -> Tensor:
        """The regular-connection term F(x) (with any conversion wraps)."""
        h = x
        if self.pre_mix is not None:
            h = channel_mix(h, self.pre_mix)
        h = self.bn1(h, mode)
        h = conv2d(h, self.conv1, stride=1, padding=1, groups=self.groups)
        h = self.bn2(h, mode)
        h = relu(h)
        h = conv2d(h, self.conv2, stride=1, padding=1, groups=self.groups)
        if self.post_mix is not None:
            h = channel_mix(h, self.post_mix)
        return h

    def forward(self, x: Tensor, mode: str) -> Tensor:
        branch = self.branch_output(x, mode)
        if self.skip is None:
            return branch
        if self._skip_is_identity:
            return add(x, branch)
        return add(channel_mix(x, self.skip), branch)


class Network:
    """Instantiated stem / stages / transitions / head with fixed skips."""

    def __init__(self, spec: NetworkSpec, stem: Tensor,
                 stages: Sequence[Sequence[BuildingBlock]],
                 transitions: Sequence[Tensor], head_weight: Tensor,
                 head_bias: Tensor, dtype):
        self.spec = spec
        self.stem = stem
        self.stages = [list(s) for s in stages]
        self.transitions = list(transitions)
        self.head_weight = head_weight
        self.head_bias = head_bias
        self.stage_unmix: list[Optional[np.ndarray]] = [None, None, None]
        self.dtype = dtype

    # -- forward ------------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        c, h, w = self.spec.input_shape
        if x.data.ndim != 4 or x.data.shape[1:] != (c, h, w):
            raise ValueError(
                f"input shape {x.data.shape} does not match spec "
                f"(N, {c}, {h}, {w})")

    def stage_input(self, x, stage: int, mode: str = "eval") -> Tensor:
        """Forward through everything before 1-based ``stage``."""
        if stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2, or 3, got {stage}")
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        self._check_input(x)
        h = conv2d(x, self.stem, stride=1, padding=1)
        for s in range(stage - 1):
            h = self._run_stage(h, s, mode)
            h = conv2d(h, self.transitions[s], stride=2, padding=1)
        return h

    def _run_stage(self, h: Tensor, s: int, mode: str) -> Tensor:
        for block in self.stages[s]:
            h = block.forward(h, mode)
        if self.stage_unmix[s] is not None:
            h = channel_mix(h, self.stage_unmix[s])
        return h

    def forward(self, x, mode: str = "eval") -> Tensor:
        """Logits for a batch; ``mode`` selects batch-norm behavior."""
        h = self.stage_input(x, 1, mode)
        for s in range(3):
            h = self._run_stage(h, s, mode)
            if s < 2:
                h = conv2d(h, self.transitions[s], stride=2, padding=1)
        h = global_avg_pool(h)
        return dense(h, self.head_weight, self.head_bias)

    # -- parameters and state ------------------------------------------

    def parameters(self):
        """(name, tensor, decays) triples for every trainable tensor."""
        out = [("stem", self.stem, True)]
        for s, stage in enumerate(self.stages):
            for i, blk in enumerate(stage):
                pre = f"stage{s + 1}.block{i + 1}"
                out += [
                    (f"{pre}.bn1.gamma", blk.bn1.gamma, False),
                    (f"{pre}.bn1.beta", blk.bn1.beta, False),
                    (f"{pre}.conv1", blk.conv1, True),
                    (f"{pre}.bn2.gamma", blk.bn2.gamma, False),
                    (f"{pre}.bn2.beta", blk.bn2.beta, False),
                    (f"{pre}.conv2", blk.conv2, True),
                ]
        for t, tr in enumerate(self.transitions):
            out.append((f"transition{t + 1}", tr, True))
        out += [("head.weight", self.head_weight, True),
                ("head.bias", self.head_bias, False)]
        return out

    def parameter_count(self) -> int:
        return sum(t.size for _, t, _ in self.parameters())

    def state_dict(self) -> dict:
        """All arrays needed to reconstruct the network exactly."""
        out = {name: t.data for name, t, _ in self.parameters()}
        for s, stage in enumerate(self.stages):
            for i, blk in enumerate(stage):
                pre = f"stage{s + 1}.block{i + 1}"
                out[f"{pre}.bn1.running_mean"] = blk.bn1.state.running_mean
                out[f"{pre}.bn1.running_var"] = blk.bn1.state.running_var
                out[f"{pre}.bn2.running_mean"] = blk.bn2.state.running_mean
                out[f"{pre}.bn2.running_var"] = blk.bn2.state.running_var
                if blk.skip is not None:
                    out[f"{pre}.skip"] = blk.skip
                if blk.pre_mix is not None:
                    out[f"{pre}.pre_mix"] = blk.pre_mix
                if blk.post_mix is not None:
                    out[f"{pre}.post_mix"] = blk.post_mix
            if self.stage_unmix[s] is not None:
                out[f"stage{s + 1}.unmix"] = self.stage_unmix[s]
        return out

    def load_state(self, state: dict) -> None:
        params = {name: t for name, t, _ in self.parameters()}
        consumed = set()
        for name, tensor in params.items():
            if name not in state:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=tensor.dtype)
            if arr.shape != tensor.data.shape:
                raise ValueError(
                    f"checkpoint tensor {name!r} has shape {arr.shape}, "
                    f"expected {tensor.data.shape}")
            tensor.data = arr.copy()
            consumed.add(name)
        for s, stage in enumerate(self.stages):
            shared_skip = None
            for i, blk in enumerate(stage):
                pre = f"stage{s + 1}.block{i + 1}"
                for attr, key in (("running_mean", f"{pre}.bn1.running_mean"),
                                  ("running_var", f"{pre}.bn1.running_var")):
                    setattr(blk.bn1.state, attr, np.asarray(state[key],
                                                            dtype=np.float64))
                    consumed.add(key)
                for attr, key in (("running_mean", f"{pre}.bn2.running_mean"),
                                  ("running_var", f"{pre}.bn2.running_var")):
                    setattr(blk.bn2.state, attr, np.asarray(state[key],
                                                            dtype=np.float64))
                    consumed.add(key)
                skip_key = f"{pre}.skip"
                if skip_key in state:
                    arr = np.asarray(state[skip_key], dtype=np.float64)
                    if shared_skip is not None and np.array_equal(shared_skip, arr):
                        blk.set_skip(shared_skip)
                    else:
                        blk.set_skip(arr)
                        shared_skip = blk.skip
                    consumed.add(skip_key)
                else:
                    blk.set_skip(None)
                for attr in ("pre_mix", "post_mix"):
                    key = f"{pre}.{attr}"
                    if key in state:
                        setattr(blk, attr, np.asarray(state[key],
                                                      dtype=np.float64))
                        consumed.add(key)
                    else:
                        setattr(blk, attr, None)
            key = f"stage{s + 1}.unmix"
            if key in state:
                self.stage_unmix[s] = np.asarray(state[key], dtype=np.float64)
                consumed.add(key)
            else:
                self.stage_unmix[s] = None
        leftover = set(state) - consumed
        if leftover:
            raise ValueError(f"checkpoint has unexpected tensors: "
                             f"{sorted(leftover)}")

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def stage_skip_matrix(self, stage: int) -> Optional[np.ndarray]:
        """The skip matrix shared by a 1-based stage, or None if absent.

        Raises if the stage's blocks do not all carry the same matrix.
        """
        blocks = self.stages[stage - 1]
        first = blocks[0].skip
        for blk in blocks[1:]:
            same = (blk.skip is None and first is None) or (
                blk.skip is not None and first is not None
                and np.array_equal(blk.skip, first))
            if not same:
                raise ValueError(
                    f"stage {stage} blocks do not share one skip matrix")
        return first


def make_transform(kind: str, width: int, b: int = 1, n: int = 2,
                   seed: int = 0) -> Optional[StructuredTransform]:
    """Construct one transform by kind name; ``"none"`` gives None."""
    if kind == "none":
        return None
    if kind == "identity":
        return transforms.make_identity(width)
    if kind == "idempotent_mr":
        return transforms.make_idempotent_mr(width, b)
    if kind == "idempotent_cmr":
        return transforms.make_idempotent_cmr(width, b)
    if kind == "orthogonal_tp":
        return transforms.make_orthogonal_tp(width)
    if kind == "orthogonal_random":
        return transforms.make_orthogonal_random(width, seed)
    if kind == "periodic":
        return transforms.make_periodic(width, n, seed)
    raise ValueError(f"unknown transform kind {kind!r}")


def _stage_transform_matrices(spec: NetworkSpec, width: int,
                              seed_rng: np.random.Generator) -> list:
    """Per-block skip matrices for one stage; shared kinds share instances."""
    kind = spec.transform_kind
    k = spec.blocks_per_stage
    if kind == "none":
        return [None] * k
    if kind == "orthogonal_random" and not spec.share_random_per_stage:
        return [make_transform(kind, width,
                               seed=int(seed_rng.integers(2 ** 31))).matrix
                for _ in range(k)]
    t = make_transform(kind, width, b=spec.resolve_transform_b(width),
                       n=int(spec.transform_params.get("N", 2)),
                       seed=int(seed_rng.integers(2 ** 31)))
    return [t.matrix] * k


def build_block(width: int, branch_mode: str = "single",
                transform: Union[str, StructuredTransform, None] = "identity",
                seed: int = 0, num_branches: int = 1,
                transform_params: Optional[dict] = None,
                dtype=np.float64) -> BuildingBlock:
    """Construct a single block with He-initialized branch convolutions.

    ``transform`` may be a kind name (constructed here for this width), an
    existing StructuredTransform, or None for no skip.
    """
    if branch_mode not in BRANCH_MODES:
        raise ValueError(f"branch_mode must be one of {BRANCH_MODES}")
    groups = {"single": 1, "multi": num_branches, "depthwise": width}[branch_mode]
    if branch_mode == "multi" and num_branches < 2:
        raise ValueError("multi-branch mode requires num_branches >= 2")
    if width % groups:
        raise ValueError(f"width {width} not divisible by {groups} branches")
    kind = None
    if isinstance(transform, str):
        params = transform_params or {}
        b = params.get("B", num_branches if branch_mode == "multi" else width)
        b = width if b == "width" else int(b)
        t = make_transform(transform, width, b=b,
                           n=int(params.get("N", 2)),
                           seed=int(params.get("seed", seed)))
        skip = None if t is None else t.matrix
        kind = None if t is None else transform
    elif isinstance(transform, StructuredTransform):
        if transform.size != width:
            raise ValueError(
                f"transform is {transform.size}x{transform.size}, block width "
                f"is {width}")
        skip, kind = transform.matrix, transform.kind
    elif transform is None:
        skip = None
    else:
        raise TypeError("transform must be a kind name, StructuredTransform, "
                        "or None")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    return BuildingBlock(width, groups, skip, rng, dtype, transform_kind=kind)


def build_network(spec: NetworkSpec, seed: int = 0,
                  dtype=np.float64) -> Network:
    """Instantiate a full network from its spec, deterministically."""
    spec.validate()
    root = np.random.SeedSequence(seed)
    param_ss, transform_ss = root.spawn(2)
    rng = np.random.default_rng(param_ss)
    seed_rng = np.random.default_rng(transform_ss)

    c_in = spec.input_shape[0]
    widths = spec.stage_widths
    stem = _he_conv(rng, widths[0], c_in, 3, dtype)
    stages = []
    kind_tag = None if spec.transform_kind == "none" else spec.transform_kind
    for s, width in enumerate(widths):
        groups = {"single": 1, "multi": spec.num_branches,
                  "depthwise": width}[spec.branch_mode]
        mats = _stage_transform_matrices(spec, width, seed_rng)
        # set_skip keeps the instance when the dtype already matches, so
        # blocks built from one stage matrix share it
        stages.append([BuildingBlock(width, groups, mats[i], rng, dtype,
                                     transform_kind=kind_tag)
                       for i in range(spec.blocks_per_stage)])
    transitions = [_he_conv(rng, widths[1], widths[0], 3, dtype),
                   _he_conv(rng, widths[2], widths[1], 3, dtype)]
    head_w = Tensor((rng.standard_normal((spec.num_classes, widths[2]))
                     * np.sqrt(2.0 / widths[2])).astype(dtype),
                    requires_grad=True)
    head_b = Tensor(np.zeros(spec.num_classes, dtype=dtype), requires_grad=True)
    return Network(spec, stem, stages, transitions, head_w, head_b, dtype)


@dataclass
class NetworkSummary:
    depth_label: int
    layers: list
    parameter_count: int
    stage_transform_ranks: list

    def __str__(self) -> str:
        lines = [f"depth label: {self.depth_label}",
                 f"parameters: {self.parameter_count}",
                 "stage transform ranks: "
                 + ", ".join(str(r) for r in self.stage_transform_ranks)]
        lines += [f"  {name:<28s} {shape!s:<22s} {count:>8d}"
                  for name, shape, count in self.layers]
        return "\n".join(lines)


def describe(network: Network) -> NetworkSummary:
    """Deterministic layer list, parameter count, and per-stage skip ranks."""
    layers = [(name, tuple(t.shape), t.size)
              for name, t, _ in network.parameters()]
    ranks = []
    for s in range(1, 4):
        mats = [b.skip for b in network.stages[s - 1]]
        if mats[0] is None:
            ranks.append(0)
        else:
            ranks.append(transforms.rank(mats[0]))
    return NetworkSummary(depth_label=network.spec.depth_label, layers=layers,
                          parameter_count=network.parameter_count(),
                          stage_transform_ranks=ranks)
