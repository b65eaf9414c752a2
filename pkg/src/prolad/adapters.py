"""Task adapters attachable to a frozen :class:`~prolad.nn.Backbone`.

``TAAdapter`` adds a 1x1 convolution beside every 3x3 convolution.  The
normalization adapter family maps each block output ``y``; the default
``TANAdapter`` computes ``y + GroupConv(SN(y))`` where SN is batchnorm
without affine parameters.
"""
from __future__ import annotations

import numpy as np

from . import nn
from . import plad
from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor

TA_INIT_STD = 1e-5
TAN_INIT_STD = 1e-4
GROUP_SIZE = 8
SN_MOMENTUM = 0.8

FILM = "FiLM"
CONV1X1 = "Conv1x1"
GROUPCONV = "GroupConv"
SN_CONV1X1 = "SN+Conv1x1"
SN_FILM = "SN+FiLM"
SN_GROUPCONV = "SN+GroupConv"
VARIANTS = (FILM, CONV1X1, GROUPCONV, SN_CONV1X1, SN_FILM, SN_GROUPCONV)


class TAAdapter:
    """Parallel 1x1 convolutions, one per 3x3 convolution site."""

    def __init__(self, backbone, rng, std=TA_INIT_STD):
        self.sites = []
        self.strides = []
        for b in backbone.blocks:
            self.sites.append(Tensor(rng.normal(0.0, std, size=(b.cout, b.cin, 1, 1)),
                                     requires_grad=True))
            self.strides.append(b.stride)
        self.channels = [(b.cin, b.cout) for b in backbone.blocks]

    def params(self):
        return list(self.sites)

    def hooks(self):
        return [self._site(i) for i in range(len(self.sites))]

    def _site(self, i):
        w, s = self.sites[i], self.strides[i]
        return lambda h: T.conv2d(h, w, stride=s)

    def state_dict(self):
        return {f"ta/site{i}": w.data.copy() for i, w in enumerate(self.sites)}

    def load_state_dict(self, state):
        for i, w in enumerate(self.sites):
            w.data = np.array(state[f"ta/site{i}"], dtype=np.float64)

    def copy(self):
        other = TAAdapter.__new__(TAAdapter)
        other.sites = [Tensor(w.data, requires_grad=True) for w in self.sites]
        other.strides = list(self.strides)
        other.channels = list(self.channels)
        return other


class BlockAdapter:
    """One per-block map of the normalization adapter family."""

    def __init__(self, channels, variant, rng, std=TAN_INIT_STD, group_size=GROUP_SIZE,
                 sn_momentum=SN_MOMENTUM):
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown adapter variant {variant!r}; choose from {VARIANTS}")
        self.channels = channels
        self.variant = variant
        self.sn = nn.BatchNorm(channels, momentum=sn_momentum, affine=False) \
            if variant.startswith("SN+") else None
        self.kernel = self.scale = self.shift = None
        self.groups = 1
        if variant in (GROUPCONV, SN_GROUPCONV):
            if channels % group_size:
                raise ConfigurationError(
                    f"block width {channels} is not divisible by group size {group_size}")
            self.groups = channels // group_size
            self.kernel = Tensor(rng.normal(0.0, std, size=(channels, group_size, 3, 3)),
                                 requires_grad=True)
        elif variant in (CONV1X1, SN_CONV1X1):
            self.kernel = Tensor(rng.normal(0.0, std, size=(channels, channels, 1, 1)),
                                 requires_grad=True)
        elif variant == FILM:
            self.scale = Tensor(np.ones(channels), requires_grad=True)
            self.shift = Tensor(np.zeros(channels), requires_grad=True)
        else:  # SN+FiLM: residual scale/shift of the standardized stream, near-zero scale
            self.scale = Tensor(rng.normal(0.0, std, size=channels), requires_grad=True)
            self.shift = Tensor(np.zeros(channels), requires_grad=True)

    def params(self):
        return [p for p in (self.kernel, self.scale, self.shift) if p is not None]

    def num_params(self):
        return sum(p.size for p in self.params())

    def __call__(self, y):
        if self.variant == FILM:
            return T.channel_affine(y, self.scale, self.shift)
        h = self.sn(y) if self.sn is not None else y
        if self.variant == SN_FILM:
            return y + T.channel_affine(h, self.scale, self.shift)
        pad = 1 if self.kernel.shape[-1] == 3 else 0
        return y + T.conv2d(h, self.kernel, padding=pad, groups=self.groups)


class TANAdapter:
    """Per-block normalization adapters; ``variant=SN+GroupConv`` is the default TAN."""

    def __init__(self, backbone, rng, variant=SN_GROUPCONV, std=TAN_INIT_STD,
                 group_size=GROUP_SIZE, sn_momentum=SN_MOMENTUM):
        self.variant = variant
        self.blocks = [BlockAdapter(b.cout, variant, rng, std, group_size, sn_momentum)
                       for b in backbone.blocks]
        self.channels = [b.cout for b in backbone.blocks]

    def params(self):
        return [p for b in self.blocks for p in b.params()]

    def num_params(self):
        return sum(b.num_params() for b in self.blocks)

    def hooks(self):
        return list(self.blocks)

    def norms(self):
        return [b.sn for b in self.blocks if b.sn is not None]

    def set_mode(self, mode):
        for sn in self.norms():
            sn.mode = mode

    def state_dict(self):
        out = {}
        for i, b in enumerate(self.blocks):
            if b.sn is not None:
                out[f"tan/block{i}/sn/running_mean"] = b.sn.running_mean.copy()
                out[f"tan/block{i}/sn/running_var"] = b.sn.running_var.copy()
            if b.kernel is not None:
                out[f"tan/block{i}/gc"] = b.kernel.data.copy()
            if b.scale is not None:
                out[f"tan/block{i}/film/scale"] = b.scale.data.copy()
                out[f"tan/block{i}/film/shift"] = b.shift.data.copy()
        return out


def variant_param_counts(backbone, group_size=GROUP_SIZE):
    """Adapter parameter count for every variant on ``backbone``."""
    rng = np.random.default_rng(0)
    return {v: TANAdapter(backbone, rng, v, group_size=group_size).num_params() for v in VARIANTS}


class AdaptedModel:
    """Frozen backbone plus optional TA / TAN adapters and the alignment map."""

    def __init__(self, backbone, ta=None, tan=None):
        self.backbone = backbone
        self.ta = ta
        self.tan = tan
        self.alignment = None

    def embed(self, x):
        return self.backbone.forward(
            x, ta=self.ta.hooks() if self.ta else None, tan=self.tan.hooks() if self.tan else None)

    __call__ = embed

    def set_mode(self, mode):
        """Mode of the adapter normalization layers; backbone statistics stay frozen."""
        if self.tan is not None:
            self.tan.set_mode(mode)

    def save(self, directory, manifest=None):
        state = {}
        if self.ta is not None:
            state.update(self.ta.state_dict())
        if self.tan is not None:
            state.update(self.tan.state_dict())
        if self.alignment is not None:
            state["head/alignment"] = self.alignment.data.copy()
        return plad.save_checkpoint(directory, state, manifest)


def attach(backbone, ta=None, tan=None):
    """Freeze ``backbone`` (parameters and statistics) and route its forward through adapters."""
    widths = [b.cout for b in backbone.blocks]
    if ta is not None and ta.channels != [(b.cin, b.cout) for b in backbone.blocks]:
        raise ConfigurationError(f"TA sites {ta.channels} do not match backbone widths {widths}")
    if tan is not None and tan.channels != widths:
        raise ConfigurationError(f"TAN widths {tan.channels} do not match backbone widths {widths}")
    backbone.freeze(True)
    backbone.set_mode(nn.INFERENCE)
    return AdaptedModel(backbone, ta, tan)


def trainable_params(model):
    """Parameter groups ``{"ta": [...], "tan": [...], "alignment": [...]}`` (absent groups omitted)."""
    groups = {}
    if model.ta is not None:
        groups["ta"] = model.ta.params()
    if model.tan is not None:
        groups["tan"] = model.tan.params()
    if model.alignment is not None:
        groups["alignment"] = [model.alignment]
    return groups
