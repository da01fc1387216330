"""Model construction: squeeze-expand branches, redundant parallel modules,
and the U-shaped segmentation network with per-level heads.

Every stage of the U owns exactly one parallel redundant module (PRM); a
network of depth d therefore carries 2d - 1 PRMs, registered in execution
order (enc_1 .. enc_{d-1}, bn, dec_1 .. dec_{d-1}) for the pruning
machinery to address.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .convops import conv3, transposed_conv3
from .errors import ConfigError, LifecycleError, ShapeError

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5


class BranchState(enum.Enum):
    ACTIVE = "A"
    MASKED = "M"
    PRUNED = "P"


@dataclass(frozen=True)
class EfficientBlockSpec:
    """Shape-preserving squeeze/expand branch: channels C in, C out."""

    kernel: tuple[int, int, int]
    channels: int
    squeeze_ratio: float = 0.5

    def __post_init__(self):
        if any(k not in (1, 3) for k in self.kernel):
            raise ConfigError(f"branch kernel extents must be 1 or 3, got {self.kernel}")

    @property
    def squeeze_channels(self) -> int:
        return max(1, math.floor(self.channels * self.squeeze_ratio))


class Branch:
    """One branch of a PRM: parameters, a learnable scalar weight, and a
    lifecycle state.  Pruned branches hold no parameters and never return."""

    def __init__(self, spec: EfficientBlockSpec, rng: Optional[np.random.Generator],
                 n_branches: int, dtype=np.float32):
        self.spec = spec
        self.state = BranchState.ACTIVE
        c, cs = spec.channels, spec.squeeze_channels
        k = spec.kernel
        if rng is None:  # placeholder for an already-pruned slot
            self.state = BranchState.PRUNED
            self.squeeze_w = self.squeeze_b = None
            self.norm_scale = self.norm_shift = None
            self.expand_w = None
            self.weight = None
            return
        self.squeeze_w = ag.parameter(he_init(rng, (cs, c, 1, 1, 1)), dtype=dtype)
        self.squeeze_b = ag.parameter(np.zeros(cs), dtype=dtype)
        self.norm_scale = ag.parameter(np.ones(cs), dtype=dtype)
        self.norm_shift = ag.parameter(np.zeros(cs), dtype=dtype)
        self.expand_w = ag.parameter(he_init(rng, (c, cs) + k), dtype=dtype)
        self.weight = ag.parameter(np.asarray(1.0 / n_branches), dtype=dtype)

    def parameters(self) -> list[tuple[str, Tensor]]:
        if self.state is BranchState.PRUNED:
            return []
        return [("squeeze.w", self.squeeze_w), ("squeeze.b", self.squeeze_b),
                ("norm.scale", self.norm_scale), ("norm.shift", self.norm_shift),
                ("expand.w", self.expand_w), ("w", self.weight)]

    def param_count(self) -> int:
        """Parameter total including the branch weight scalar."""
        return sum(t.size for _, t in self.parameters())

    def free(self):
        self.squeeze_w = self.squeeze_b = None
        self.norm_scale = self.norm_shift = None
        self.expand_w = None
        self.weight = None


def eb_forward(branch: Branch, x: Tensor) -> Tensor:
    """Squeeze to floor(C/2) channels, normalize, activate, expand back to C."""
    if branch.state is BranchState.PRUNED:
        raise LifecycleError("eb_forward on a pruned branch")
    h = conv3(x, branch.squeeze_w, branch.squeeze_b)
    h = ag.instance_norm(h, branch.norm_scale, branch.norm_shift, eps=NORM_EPS)
    h = ag.leaky_relu(h, LEAKY_SLOPE)
    return conv3(h, branch.expand_w)


_PRM_CAPTURE: list[Optional[list]] = [None]


class capture_prm_io:
    """Context manager collecting (prm_id, input, output) arrays per forward."""

    def __init__(self):
        self.records: list[tuple[str, np.ndarray, np.ndarray]] = []

    def __enter__(self):
        _PRM_CAPTURE.append(self.records)
        return self

    def __exit__(self, exc_type, exc, tb):
        _PRM_CAPTURE.pop()


class PRM:
    """Residual sum of parallel branches with learnable scalar weights."""

    def __init__(self, identifier: str, channels: int, branches: list[Branch]):
        self.identifier = identifier
        self.channels = channels
        self.branches = branches

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"PRM {self.identifier} expects {self.channels} channels, "
                             f"got {x.shape[1]}")
        out = x
        for br in self.branches:
            if br.state is not BranchState.ACTIVE:
                continue
            out = ag.add(out, ag.multiply(eb_forward(br, x), br.weight))
        if _PRM_CAPTURE[-1] is not None:
            _PRM_CAPTURE[-1].append((self.identifier, x.data, out.data))
        return out

    def active_indices(self) -> list[int]:
        return [i for i, b in enumerate(self.branches) if b.state is BranchState.ACTIVE]

    def states(self) -> list[str]:
        return [b.state.value for b in self.branches]


def prm_forward(prm: PRM, x: Tensor) -> Tensor:
    return prm.forward(x)


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    channels: tuple[int, ...]
    kernels: tuple[tuple[int, int, int], ...]
    num_classes: int
    in_channels: int = 1
    variant: str = "custom"

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if len(self.channels) != self.depth:
            raise ConfigError(f"need one channel width per stage: depth {self.depth} "
                              f"vs {len(self.channels)} widths")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        for k in self.kernels:
            if len(k) != 3 or any(e not in (1, 3) for e in k):
                raise ConfigError(f"branch kernels must be triples over {{1,3}}, got {k}")

    @property
    def branch_count(self) -> int:
        return len(self.kernels)

    @property
    def supervision_levels(self) -> int:
        return self.depth - 1


VARIANT_KERNELS_4 = ((1, 1, 1), (1, 3, 3), (3, 1, 3), (3, 3, 1))
VARIANT_KERNELS_7 = ((1, 1, 1), (1, 1, 3), (1, 3, 1), (3, 1, 1),
                     (1, 3, 3), (3, 1, 3), (3, 3, 1))


def variant_config(name: str, num_classes: int = 2, in_channels: int = 1) -> ModelConfig:
    if name == "S":
        return ModelConfig(5, (16, 32, 64, 128, 256), VARIANT_KERNELS_4,
                           num_classes, in_channels, "S")
    if name == "B":
        return ModelConfig(5, (16, 32, 64, 128, 256), VARIANT_KERNELS_7,
                           num_classes, in_channels, "B")
    if name == "L":
        return ModelConfig(6, (16, 32, 64, 128, 256, 320), VARIANT_KERNELS_7,
                           num_classes, in_channels, "L")
    raise ConfigError(f"unknown variant {name!r} (expected S, B, or L)")


# default prune step per variant
VARIANT_PRUNE_STEP = {"S": 1, "B": 1, "L": 2}


def he_init(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class ConvNormAct:
    """Plain conv (no bias) followed by instance norm and leaky ReLU."""

    def __init__(self, rng, cin, cout, k, stride, dtype):
        self.stride = stride
        self.w = ag.parameter(he_init(rng, (cout, cin, k, k, k)), dtype=dtype)
        self.scale = ag.parameter(np.ones(cout), dtype=dtype)
        self.shift = ag.parameter(np.zeros(cout), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = conv3(x, self.w, stride=self.stride)
        h = ag.instance_norm(h, self.scale, self.shift, eps=NORM_EPS)
        return ag.leaky_relu(h, LEAKY_SLOPE)

    def parameters(self):
        return [("w", self.w), ("norm.scale", self.scale), ("norm.shift", self.shift)]


class Head:
    """1x1x1 projection to class logits."""

    def __init__(self, rng, cin, num_classes, dtype):
        self.w = ag.parameter(he_init(rng, (num_classes, cin, 1, 1, 1)), dtype=dtype)
        self.b = ag.parameter(np.zeros(num_classes), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return conv3(x, self.w, self.b)

    def parameters(self):
        return [("w", self.w), ("b", self.b)]


@dataclass
class ForwardOutputs:
    """logits and decoder features are ordered finest level first."""

    logits: list[Tensor]
    features: list[Tensor]
    encoder_code: Tensor


class Network:
    """U-shaped encoder/decoder with one PRM per stage and deep supervision."""

    def __init__(self, config: ModelConfig, seed: int,
                 prm_layout: Optional[list[list[tuple[tuple[int, int, int], str]]]] = None,
                 dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        d = config.depth
        ch = config.channels
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))

        if prm_layout is None:
            prm_layout = [[(k, "A") for k in config.kernels] for _ in range(2 * d - 1)]
        if len(prm_layout) != 2 * d - 1:
            raise ConfigError(f"prm_layout must describe {2 * d - 1} PRMs, "
                              f"got {len(prm_layout)}")

        def make_prm(identifier, channels, layout):
            n = sum(1 for _, state in layout if state != BranchState.PRUNED.value)
            branches = []
            for kernel, state in layout:
                spec = EfficientBlockSpec(tuple(kernel), channels)
                if state == BranchState.PRUNED.value:
                    branches.append(Branch(spec, None, n, self.dtype))
                else:
                    br = Branch(spec, rng, max(1, n), self.dtype)
                    br.state = BranchState(state)
                    branches.append(br)
            return PRM(identifier, channels, branches)

        layout_iter = iter(prm_layout)
        self.stem = ConvNormAct(rng, config.in_channels, ch[0], 3, 1, self.dtype)
        self.enc_downs: list[Optional[ConvNormAct]] = [None]
        self.enc_prms: list[PRM] = [make_prm("enc_1", ch[0], next(layout_iter))]
        for i in range(1, d - 1):
            self.enc_downs.append(ConvNormAct(rng, ch[i - 1], ch[i], 3, 2, self.dtype))
            self.enc_prms.append(make_prm(f"enc_{i + 1}", ch[i], next(layout_iter)))
        self.bn_down = ConvNormAct(rng, ch[d - 2], ch[d - 1], 3, 2, self.dtype)
        self.bn_prm = make_prm("bn", ch[d - 1], next(layout_iter))
        # decoder runs coarse-to-fine: dec_1 at the coarsest decoder level
        self.up_ws: list[Tensor] = []
        self.fuses: list[ConvNormAct] = []
        self.dec_prms: list[PRM] = []
        self.heads: list[Head] = []
        for idx, j in enumerate(range(d - 2, -1, -1)):
            self.up_ws.append(ag.parameter(he_init(rng, (ch[j + 1], ch[j], 2, 2, 2)),
                                           dtype=self.dtype))
            self.fuses.append(ConvNormAct(rng, 2 * ch[j], ch[j], 1, 1, self.dtype))
            self.dec_prms.append(make_prm(f"dec_{idx + 1}", ch[j], next(layout_iter)))
            self.heads.append(Head(rng, ch[j], config.num_classes, self.dtype))
        self.prms: list[PRM] = self.enc_prms + [self.bn_prm] + self.dec_prms

    # -- forward -------------------------------------------------------------
    def _check_extents(self, x: Tensor):
        divisor = 2 ** (self.config.depth - 1)
        bad = [e for e in x.shape[2:] if e % divisor != 0 or e == 0]
        if bad:
            raise ShapeError(
                f"input spatial extents {tuple(x.shape[2:])} must be positive multiples "
                f"of {divisor} (minimal valid extent {divisor})")

    def encode(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        """Run stem + encoder; returns (per-level skips, bottleneck input code)."""
        self._check_extents(x)
        h = self.stem.forward(x)
        skips = []
        for i, prm in enumerate(self.enc_prms):
            if self.enc_downs[i] is not None:
                h = self.enc_downs[i].forward(h)
            h = prm.forward(h)
            skips.append(h)
        code = self.bn_down.forward(h)
        return skips, code

    def forward(self, x: Tensor) -> ForwardOutputs:
        skips, code = self.encode(x)
        h = self.bn_prm.forward(code)
        feats_coarse_first = []
        logits_coarse_first = []
        for idx, j in enumerate(range(self.config.depth - 2, -1, -1)):
            h = transposed_conv3(h, self.up_ws[idx], 2)
            h = ag.concat_channels([h, skips[j]])
            h = self.fuses[idx].forward(h)
            h = self.dec_prms[idx].forward(h)
            feats_coarse_first.append(h)
            logits_coarse_first.append(self.heads[idx].forward(h))
        return ForwardOutputs(logits=logits_coarse_first[::-1],
                              features=feats_coarse_first[::-1],
                              encoder_code=code)

    def forward_encoder(self, x: Tensor) -> Tensor:
        """Encoder-only pass; returns the bottleneck input feature map."""
        _, code = self.encode(x)
        return code

    # -- parameter access ------------------------------------------------------
    def parameters(self) -> list[tuple[str, Tensor]]:
        """Stable (name, tensor) list over live parameters, construction order."""
        items: list[tuple[str, Tensor]] = []
        for n, t in self.stem.parameters():
            items.append((f"stem.{n}", t))
        for i, prm in enumerate(self.enc_prms):
            if self.enc_downs[i] is not None:
                for n, t in self.enc_downs[i].parameters():
                    items.append((f"{prm.identifier}.down.{n}", t))
            items.extend(_prm_params(prm))
        for n, t in self.bn_down.parameters():
            items.append((f"bn.down.{n}", t))
        items.extend(_prm_params(self.bn_prm))
        for idx, prm in enumerate(self.dec_prms):
            items.append((f"{prm.identifier}.up.w", self.up_ws[idx]))
            for n, t in self.fuses[idx].parameters():
                items.append((f"{prm.identifier}.fuse.{n}", t))
            items.extend(_prm_params(prm))
            for n, t in self.heads[idx].parameters():
                items.append((f"{prm.identifier}.head.{n}", t))
        return items

    def parameter_counts(self) -> dict[str, int]:
        """Effective (forward-participating), masked, and total live counts."""
        effective = 0
        masked = 0
        for name, t in self.parameters():
            effective += t.size
        for prm in self.prms:
            for br in prm.branches:
                if br.state is BranchState.MASKED:
                    cnt = br.param_count()
                    masked += cnt
                    effective -= cnt
        return {"effective": effective, "masked": masked, "total": effective + masked}

    def active_branch_count(self) -> int:
        return sum(len(prm.active_indices()) for prm in self.prms)

    def prm_by_id(self, identifier: str) -> PRM:
        for prm in self.prms:
            if prm.identifier == identifier:
                return prm
        raise KeyError(f"no PRM named {identifier!r}")

    # -- descriptor -------------------------------------------------------------
    def descriptor(self) -> dict:
        cfg = self.config
        return {
            "depth": cfg.depth,
            "channels": list(cfg.channels),
            "kernels": [list(k) for k in cfg.kernels],
            "num_classes": cfg.num_classes,
            "in_channels": cfg.in_channels,
            "variant": cfg.variant,
            "branch_states": [prm.states() for prm in self.prms],
            "prm_ids": [prm.identifier for prm in self.prms],
        }


def _prm_params(prm: PRM) -> list[tuple[str, Tensor]]:
    items = []
    for bi, br in enumerate(prm.branches):
        for n, t in br.parameters():
            items.append((f"{prm.identifier}.b{bi}.{n}", t))
    return items


def build_network(config: ModelConfig, seed: int, dtype=np.float32) -> Network:
    return Network(config, seed, dtype=dtype)


def network_from_descriptor(desc: dict, seed: int, dtype=np.float32,
                            compact: bool = False) -> Network:
    """Rebuild a network from an architecture descriptor.

    With ``compact`` every retained branch starts fresh and Active (the
    re-training construction) and pruned slots stay as empty placeholders so
    branch indices keep lining up with the kernel set; without it the branch
    grid is reproduced state-for-state, ready to receive checkpointed
    parameters.
    """
    config = ModelConfig(depth=desc["depth"], channels=tuple(desc["channels"]),
                         kernels=tuple(tuple(k) for k in desc["kernels"]),
                         num_classes=desc["num_classes"],
                         in_channels=desc.get("in_channels", 1),
                         variant=desc.get("variant", "custom"))
    layout = []
    for states in desc["branch_states"]:
        if len(states) != len(config.kernels):
            raise ConfigError("branch_states rows must match the kernel set size")
        row = list(zip((tuple(k) for k in config.kernels), states))
        if compact:
            row = [(k, "P" if s == BranchState.PRUNED.value else "A") for k, s in row]
        layout.append(row)
    return Network(config, seed, prm_layout=layout, dtype=dtype)


def active_parameter_count(net: Network) -> int:
    return net.parameter_counts()["effective"]
