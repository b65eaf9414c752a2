"""Layers, the small convolutional backbone, losses and optimizers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import plad
from . import tensor as T
from .errors import ConfigurationError, ContractError, InputError
from .tensor import Tensor

TRAINING = "training"
INFERENCE = "inference"


class BatchNorm:
    """Batch normalization over axis 1.

    Without ``affine`` this is the plain standardizing layer used inside the
    normalization adapter.  Running statistics follow
    ``running <- (1 - m) * running + m * batch`` with the biased batch
    variance, so ``momentum=1`` stores exactly the last batch's statistics.
    """

    def __init__(self, num_channels, momentum=0.1, affine=True, eps=1e-5):
        if not 0.0 < momentum <= 1.0:
            raise ConfigurationError(f"batchnorm momentum must lie in (0, 1], got {momentum}")
        self.num_channels = num_channels
        self.momentum = momentum
        self.eps = eps
        self.mode = TRAINING
        self.running_mean = np.zeros(num_channels)
        self.running_var = np.ones(num_channels)
        self.affine = affine
        if affine:
            self.weight = Tensor(np.ones(num_channels), requires_grad=True)
            self.bias = Tensor(np.zeros(num_channels), requires_grad=True)
        else:
            self.weight = self.bias = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias} if self.affine else {}

    def __call__(self, x):
        return batchnorm_forward(x, self)


def batchnorm_forward(x, layer):
    x = T.as_tensor(x)
    if x.ndim < 2 or x.shape[1] != layer.num_channels:
        raise InputError(f"batchnorm expects {layer.num_channels} channels, got shape {x.shape}")
    if layer.mode == TRAINING:
        if x.shape[0] < 2:
            raise InputError("batchnorm in training mode needs a batch of at least 2 samples "
                             "(variance is degenerate)")
        y, mu, var = T.batch_norm(x, layer.weight, layer.bias, layer.eps)
        m = layer.momentum
        layer.running_mean = (1.0 - m) * layer.running_mean + m * mu
        layer.running_var = (1.0 - m) * layer.running_var + m * var
        return y
    inv = 1.0 / np.sqrt(layer.running_var + layer.eps)
    if not layer.affine:
        return T.channel_affine(x, inv, -layer.running_mean * inv)
    scale = layer.weight * Tensor._wrap(inv)
    shift = layer.bias - scale * Tensor._wrap(layer.running_mean)
    return T.channel_affine(x, scale, shift)


def kaiming(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Block:
    def __init__(self, cin, cout, stride, rng, residual=False, bn_momentum=0.1):
        self.cin, self.cout, self.stride = cin, cout, stride
        self.conv = Tensor(kaiming(rng, (cout, cin, 3, 3)), requires_grad=True)
        self.bn = BatchNorm(cout, momentum=bn_momentum)
        self.residual = residual and cin == cout and stride == 1


class Backbone:
    """Stack of conv3x3 -> BatchNorm -> ReLU blocks followed by global average pooling.

    The first block keeps resolution; later blocks downsample with stride 2.
    """

    def __init__(self, widths=(16, 32, 64, 64), in_channels=3, residual=False, seed=0,
                 bn_momentum=0.1):
        if not widths:
            raise ConfigurationError("backbone needs at least one block")
        rng = np.random.default_rng(seed)
        self.widths = list(widths)
        self.in_channels = in_channels
        self.blocks = []
        cin = in_channels
        for i, w in enumerate(self.widths):
            self.blocks.append(Block(cin, w, 1 if i == 0 else 2, rng, residual, bn_momentum))
            cin = w

    @property
    def embed_dim(self):
        return self.widths[-1]

    def named_params(self):
        out = {}
        for i, b in enumerate(self.blocks):
            out[f"block{i}/conv"] = b.conv
            out[f"block{i}/bn/weight"] = b.bn.weight
            out[f"block{i}/bn/bias"] = b.bn.bias
        return out

    def batchnorms(self):
        return [b.bn for b in self.blocks]

    def set_mode(self, mode):
        for bn in self.batchnorms():
            bn.mode = mode

    def freeze(self, frozen=True):
        for p in self.named_params().values():
            p.requires_grad = not frozen
            p.grad = None

    def forward(self, x, ta=None, tan=None, capture=None):
        """Embed NCHW images.

        ``ta[i](h)`` is added to block ``i``'s 3x3 convolution output and
        ``tan[i](y)`` maps block ``i``'s output; both may be None.
        ``capture``, when a list, receives every block output.
        """
        h = T.as_tensor(x)
        for i, b in enumerate(self.blocks):
            z = T.conv2d(h, b.conv, stride=b.stride, padding=1)
            if ta is not None and ta[i] is not None:
                z = z + ta[i](h)
            y = T.relu(b.bn(z))
            if b.residual:
                y = y + h
            if tan is not None and tan[i] is not None:
                y = tan[i](y)
            if capture is not None:
                capture.append(y)
            h = y
        return T.global_avg_pool(h)

    __call__ = forward

    def state_dict(self):
        out = {k: v.data.copy() for k, v in self.named_params().items()}
        for i, b in enumerate(self.blocks):
            out[f"block{i}/bn/running_mean"] = b.bn.running_mean.copy()
            out[f"block{i}/bn/running_var"] = b.bn.running_var.copy()
        return out

    def load_state_dict(self, state):
        for k, v in self.named_params().items():
            if state[k].shape != v.data.shape:
                raise ConfigurationError(f"{k}: checkpoint shape {state[k].shape} != {v.data.shape}")
            v.data = np.array(state[k], dtype=np.float64)
        for i, b in enumerate(self.blocks):
            b.bn.running_mean = np.array(state[f"block{i}/bn/running_mean"], dtype=np.float64)
            b.bn.running_var = np.array(state[f"block{i}/bn/running_var"], dtype=np.float64)

    def clone(self):
        other = Backbone.__new__(Backbone)
        other.widths = list(self.widths)
        other.in_channels = self.in_channels
        other.blocks = []
        for b in self.blocks:
            nb = Block.__new__(Block)
            nb.cin, nb.cout, nb.stride, nb.residual = b.cin, b.cout, b.stride, b.residual
            nb.conv = Tensor(b.conv.data, requires_grad=b.conv.requires_grad)
            nb.bn = BatchNorm(b.cout, b.bn.momentum, True, b.bn.eps)
            nb.bn.mode = b.bn.mode
            nb.bn.weight = Tensor(b.bn.weight.data, requires_grad=b.bn.weight.requires_grad)
            nb.bn.bias = Tensor(b.bn.bias.data, requires_grad=b.bn.bias.requires_grad)
            nb.bn.running_mean = b.bn.running_mean.copy()
            nb.bn.running_var = b.bn.running_var.copy()
            other.blocks.append(nb)
        return other

    def save(self, directory, manifest=None):
        doc = {"widths": self.widths, "in_channels": self.in_channels,
               "residual": any(b.residual for b in self.blocks)}
        doc.update(manifest or {})
        return plad.save_checkpoint(directory, self.state_dict(), doc)

    @classmethod
    def load(cls, directory):
        state, manifest = plad.load_checkpoint(directory)
        model = cls(manifest["widths"], manifest.get("in_channels", 3),
                    manifest.get("residual", False))
        model.load_state_dict(state)
        return model, manifest


class Linear:
    def __init__(self, din, dout, rng):
        self.weight = Tensor(rng.normal(0.0, 1.0 / math.sqrt(din), size=(din, dout)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros((1, dout)), requires_grad=True)

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return x @ self.weight + self.bias


# -- losses ---------------------------------------------------------------------------------
def _one_hot(labels, k):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise InputError(f"labels must be a non-empty vector, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be integer class indices")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = T.as_tensor(logits)
    if logits.ndim != 2:
        raise InputError(f"logits must be N x K, got shape {logits.shape}")
    n, k = logits.shape
    onehot = _one_hot(labels, k)
    if onehot.shape[0] != n:
        raise InputError(f"{n} logit rows but {onehot.shape[0]} labels")
    return -(T.log_softmax(logits, axis=1) * Tensor._wrap(onehot)).sum() * (1.0 / n)


def cosine_batch(features, teacher, eps=1e-12):
    """Mean cosine similarity between paired rows; the teacher carries no gradient."""
    features = T.as_tensor(features)
    t = T.as_tensor(teacher).detach()
    if features.ndim != 2 or features.shape != t.shape:
        raise InputError(f"feature rows {features.shape} and teacher rows {t.shape} do not pair up")
    num = (features * t).sum(axis=1)
    den = T.l2_norm(features, axis=1) * T.l2_norm(t, axis=1) + eps
    return (num / den).mean()


def distill_loss(features, teacher):
    return 1.0 - cosine_batch(features, teacher)


# -- optimizers ----------------------------------------------------------------------------
SGD_MOMENTUM = "sgd_momentum"
ADADELTA = "adadelta"


@dataclass
class OptimizerState:
    kind: str
    lr: float
    rho: float
    eps: float = 1e-6
    weight_decay: float = 0.0
    accumulators: list = field(default_factory=list)
    steps: int = 0


def init_state(kind, params, lr, rho=None, eps=1e-6, weight_decay=0.0):
    shapes = [np.shape(p.data if isinstance(p, Tensor) else p) for p in params]
    if kind == SGD_MOMENTUM:
        acc = [{"velocity": np.zeros(s)} for s in shapes]
        rho = 0.9 if rho is None else rho
    elif kind == ADADELTA:
        acc = [{"square_avg": np.zeros(s), "acc_delta": np.zeros(s)} for s in shapes]
        rho = 0.9 if rho is None else rho
    else:
        raise ConfigurationError(f"unknown optimizer kind {kind!r}")
    return OptimizerState(kind, lr, rho, eps, weight_decay, acc)


def _check(params, grads, state):
    if not (len(params) == len(grads) == len(state.accumulators)):
        raise ContractError(f"{len(params)} params, {len(grads)} grads, "
                            f"{len(state.accumulators)} accumulator sets")
    for p, g, acc in zip(params, grads, state.accumulators):
        for a in acc.values():
            if p.shape != g.shape or p.shape != a.shape:
                raise ContractError(f"param {p.shape}, grad {g.shape}, state {a.shape} mismatch")


def step_sgd_momentum(params, grads, state):
    """In-place ``v <- rho v + g (+ wd p)``, ``p <- p - lr v``."""
    _check(params, grads, state)
    for p, g, acc in zip(params, grads, state.accumulators):
        if state.weight_decay:
            g = g + state.weight_decay * p
        v = acc["velocity"]
        v *= state.rho
        v += g
        p -= state.lr * v
    state.steps += 1


def step_adadelta(params, grads, state):
    """In-place Adadelta update (running E[g^2], E[dx^2]; step scaled by lr)."""
    _check(params, grads, state)
    rho, eps = state.rho, state.eps
    for p, g, acc in zip(params, grads, state.accumulators):
        if state.weight_decay:
            g = g + state.weight_decay * p
        sq, ad = acc["square_avg"], acc["acc_delta"]
        sq *= rho
        sq += (1.0 - rho) * g * g
        delta = np.sqrt(ad + eps) / np.sqrt(sq + eps) * g
        ad *= rho
        ad += (1.0 - rho) * delta * delta
        p -= state.lr * delta
    state.steps += 1


_STEP = {SGD_MOMENTUM: step_sgd_momentum, ADADELTA: step_adadelta}


class Optimizer:
    """Parameter groups, each with its own optimizer state and learning rate."""

    def __init__(self):
        self.groups = []

    def add_group(self, tensors, kind, lr, **kw):
        tensors = [t for t in tensors if t is not None]
        if tensors:
            self.groups.append((tensors, init_state(kind, tensors, lr, **kw)))
        return self

    def zero_grad(self):
        for tensors, _ in self.groups:
            for t in tensors:
                t.zero_grad()

    def step(self):
        for tensors, state in self.groups:
            _STEP[state.kind]([t.data for t in tensors], [t.grad for t in tensors], state)

    def set_lr_scale(self, base_lrs, scale):
        for (_, state), lr in zip(self.groups, base_lrs):
            state.lr = lr * scale


def cosine_annealing(base_lr, step, total):
    if total <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total))
