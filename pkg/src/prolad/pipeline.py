"""Source pretraining and the two-stage adapter fine-tuning on one episode.

Stage 1 trains the backbone with cross-entropy.  Stage 2 trains the TA
adapter on the support set and records the teacher embeddings.  Stage 3
trains TA (warm-started) and TAN together under
``(1 - lam) * CE + lam * (1 - cos(student, teacher))``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adapters as ad
from . import nn
from . import plad
from . import similarity as sim
from . import tensor as T
from .errors import ContractError, InputError, TrainingError
from .tensor import Tensor

log = logging.getLogger(__name__)

WEIGHT_DECAY = 7e-4


@dataclass
class FinetuneConfig:
    adapter_lr: float = 0.5
    head_lr: float = 1.0
    seen_lr_scale: float = 0.1
    tau: float = 10.0
    target_acc: float = 0.99
    extra_iters: int = 25
    max_iters: int = 200
    alignment_init_std: float = 1e-3
    ta_init_std: float = ad.TA_INIT_STD
    tan_init_std: float = ad.TAN_INIT_STD
    group_size: int = ad.GROUP_SIZE
    sn_momentum: float = ad.SN_MOMENTUM
    query_sn: str = "running"


# -- prototype head -----------------------------------------------------------------------------
class PrototypeHead:
    """Cosine logits ``tau * cos(A f(x), prototype_k)`` with a learned alignment map ``A``."""

    def __init__(self, dim, rng, tau=10.0, init_std=1e-3):
        self.tau = tau
        self.alignment = Tensor(np.eye(dim) + rng.normal(0.0, init_std, size=(dim, dim)),
                                requires_grad=True)

    def align(self, emb):
        return T.matmul(emb, T.transpose(self.alignment))

    @staticmethod
    def _unit_rows(z):
        return z / (T.l2_norm(z, axis=1, keepdims=True) + 1e-12)

    def prototypes(self, support_emb, labels):
        labels = np.asarray(labels)
        k = int(labels.max()) + 1
        avg = np.zeros((k, len(labels)))
        avg[labels, np.arange(len(labels))] = 1.0
        avg /= avg.sum(axis=1, keepdims=True)
        return T.matmul(Tensor._wrap(avg), self.align(support_emb))

    def logits(self, support_emb, labels, query_emb):
        protos = self._unit_rows(self.prototypes(support_emb, labels))
        q = self._unit_rows(self.align(query_emb))
        return T.matmul(q, T.transpose(protos)) * self.tau


@dataclass
class StageResult:
    stage: int
    params: dict
    iterations: int
    support_acc: float
    cap_hit: bool = False
    teacher: np.ndarray = None
    lam: float = None
    loss_trace: list = field(default_factory=list)
    model: object = None
    head: object = None


# -- stage 1 ---------------------------------------------------------------------------------------
def stage1_pretrain(backbone, images, labels, epochs=30, lr=0.1, batch_size=64, seed=0,
                    weight_decay=WEIGHT_DECAY, momentum=0.9, checkpoint_dir=None,
                    val_images=None, val_labels=None):
    """Train ``backbone`` with a linear classifier and cross-entropy on the source set."""
    rng = np.random.default_rng([seed, 0x57A6E1])
    labels = np.asarray(labels)
    k = int(labels.max()) + 1
    head = nn.Linear(backbone.embed_dim, k, rng)
    backbone.freeze(False)
    backbone.set_mode(nn.TRAINING)
    params = list(backbone.named_params().values()) + head.params()
    opt = nn.Optimizer().add_group(params, nn.SGD_MOMENTUM, lr, rho=momentum,
                                   weight_decay=weight_decay)
    n = len(labels)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total = epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            if len(idx) < 2:
                continue
            opt.set_lr_scale([lr], nn.cosine_annealing(1.0, step, total))
            opt.zero_grad()
            loss = nn.cross_entropy(head(backbone(images[idx])), labels[idx])
            if not np.isfinite(loss.item()):
                raise TrainingError(f"pretraining loss diverged (NaN/inf) in epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        history.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("pretrain epoch %d loss %.4f", epoch, history[-1])
    backbone.set_mode(nn.INFERENCE)
    backbone.freeze(True)
    result = {"loss_history": history, "head": head}
    if val_images is not None:
        with T.no_grad():
            pred = head(backbone(val_images)).data.argmax(axis=1)
        result["val_acc"] = float((pred == np.asarray(val_labels)).mean())
    if checkpoint_dir is not None:
        backbone.save(checkpoint_dir, {
            "stage": 1, "epochs": epochs, "lr": lr, "batch_size": batch_size,
            "weight_decay": weight_decay, "momentum": momentum, "seed": seed,
            "num_classes": k, "loss_history": history, "val_acc": result.get("val_acc")})
    return result


# -- fine-tuning loop ---------------------------------------------------------------------------------
def _finetune(model, head, x, y, cfg, lr_scale, loss_fn):
    groups = ad.trainable_params(model)
    opt = nn.Optimizer()
    for name in ("ta", "tan"):
        if name in groups:
            opt.add_group(groups[name], nn.ADADELTA, cfg.adapter_lr * lr_scale)
    opt.add_group([head.alignment], nn.ADADELTA, cfg.head_lr * lr_scale)
    model.set_mode(nn.TRAINING)
    crossed, acc, trace = None, 0.0, []
    it = 0
    for it in range(cfg.max_iters):
        emb = model.embed(x)
        logits = head.logits(emb, y, emb)
        loss = loss_fn(emb, logits)
        acc = float((logits.data.argmax(axis=1) == y).mean())
        trace.append(loss.item())
        if not np.isfinite(trace[-1]):
            raise TrainingError(f"fine-tuning loss diverged at iteration {it}")
        opt.zero_grad()
        if loss.requires_grad:
            loss.backward()
            opt.step()
        if crossed is None and acc >= cfg.target_acc:
            crossed = it
        if crossed is not None and it - crossed >= cfg.extra_iters:
            break
    return it + 1, acc, crossed is None, trace


def _lr_scale(episode, cfg):
    return cfg.seen_lr_scale if episode.shift == 0.0 else 1.0


def _new_head(backbone, rng, cfg):
    return PrototypeHead(backbone.embed_dim, rng, cfg.tau, cfg.alignment_init_std)


def stage2_finetune(backbone, episode, rng, cfg=None):
    """Train a fresh TA adapter and head on the support set; return it with teacher embeddings."""
    cfg = cfg or FinetuneConfig()
    ta = ad.TAAdapter(backbone, rng, cfg.ta_init_std)
    model = ad.attach(backbone, ta=ta)
    head = _new_head(backbone, rng, cfg)
    model.alignment = head.alignment
    y = np.asarray(episode.support_y)
    iters, acc, cap_hit, trace = _finetune(
        model, head, episode.support_x, y, cfg, _lr_scale(episode, cfg),
        lambda emb, logits: nn.cross_entropy(logits, y))
    with T.no_grad():
        teacher = model.embed(episode.support_x).data.copy()
    if not np.isfinite(teacher).all() or (np.linalg.norm(teacher, axis=1) == 0).any():
        raise TrainingError("teacher embeddings contain non-finite or zero-norm rows")
    return StageResult(2, ta.state_dict(), iters, acc, cap_hit, teacher=teacher,
                       loss_trace=trace, model=model, head=head)


def stage3_loss(emb, logits, labels, teacher, lam):
    """``(1 - lam) * CE + lam * distill``; an endpoint evaluates only its own term."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"distillation coefficient must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return nn.cross_entropy(logits, labels)
    if lam == 1.0:
        return nn.distill_loss(emb, teacher)
    return nn.cross_entropy(logits, labels) * (1.0 - lam) + nn.distill_loss(emb, teacher) * lam


def stage3_finetune(backbone, episode, lam, rng, ta_state=None, teacher=None, cfg=None,
                    use_ta=True, variant=ad.SN_GROUPCONV, use_tan=True):
    """Joint TA + TAN fine-tuning with adaptive distillation toward ``teacher``.

    ``ta_state`` warm-starts TA (progressive learning); ``None`` trains it
    from scratch.  ``lam > 0`` requires ``teacher``.
    """
    cfg = cfg or FinetuneConfig()
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"distillation coefficient must lie in [0, 1], got {lam}")
    if lam > 0 and teacher is None:
        raise ContractError("distillation needs teacher embeddings")
    ta = None
    if use_ta:
        ta = ad.TAAdapter(backbone, rng, cfg.ta_init_std)
        if ta_state is not None:
            ta.load_state_dict(ta_state)
    tan = ad.TANAdapter(backbone, rng, variant, cfg.tan_init_std, cfg.group_size,
                        cfg.sn_momentum) if use_tan else None
    model = ad.attach(backbone, ta=ta, tan=tan)
    head = _new_head(backbone, rng, cfg)
    model.alignment = head.alignment
    y = np.asarray(episode.support_y)
    tt = None if teacher is None else Tensor._wrap(np.asarray(teacher))
    iters, acc, cap_hit, trace = _finetune(
        model, head, episode.support_x, y, cfg, _lr_scale(episode, cfg),
        lambda emb, logits: stage3_loss(emb, logits, y, tt, lam))
    state = {}
    if ta is not None:
        state.update(ta.state_dict())
    if tan is not None:
        state.update(tan.state_dict())
    return StageResult(3, state, iters, acc, cap_hit, lam=lam, loss_trace=trace,
                       model=model, head=head)


def predict(model, head, support_x, support_y, query_x, query_sn="running"):
    """Query logits and labels; prototypes come from the current support embeddings."""
    if len(query_x) == 0:
        raise InputError("empty query set")
    model.set_mode(nn.INFERENCE if query_sn == "running" else nn.TRAINING)
    saved = [(sn.running_mean, sn.running_var) for sn in (model.tan.norms() if model.tan else [])]
    with T.no_grad():
        s_emb = model.embed(support_x)
        q_emb = model.embed(query_x)
        logits = head.logits(s_emb, np.asarray(support_y), q_emb).data
    for sn, (m, v) in zip(model.tan.norms() if model.tan else [], saved):
        sn.running_mean, sn.running_var = m, v
    return logits, logits.argmax(axis=1)


def query_accuracy(result, episode, cfg=None):
    cfg = cfg or FinetuneConfig()
    _, pred = predict(result.model, result.head, episode.support_x, episode.support_y,
                      episode.query_x, cfg.query_sn)
    return float((pred == episode.query_y).mean())


# -- adaptive coefficient ------------------------------------------------------------------------
def pretrained_embeddings(backbone, x):
    backbone.set_mode(nn.INFERENCE)
    with T.no_grad():
        return backbone.forward(x).data


def compute_lambda(backbone, episode, kind="sim", beta=1.5, tau=10.0):
    """Adaptive coefficient from the adapter-free pretrained extractor on the support set.

    Returns ``(lam, info)`` where ``info`` holds the intermediate statistics.
    """
    emb = pretrained_embeddings(backbone, episode.support_x)
    if kind == "sim":
        stats = sim.SimilarityStats.from_features(emb, episode.support_y)
        return sim.coeff_sim(stats, beta), {"abs_diff": stats.abs_diff,
                                            "mean_feat_sim": stats.mean_feat_sim,
                                            "mean_intercls_sim": stats.mean_intercls_sim}
    if kind == "loss":
        loss, acc = sim.prototype_loss_acc(emb, episode.support_y, tau)
        return sim.coeff_loss(loss, acc, beta), {"loss": loss, "acc": acc}
    raise ValueError(f"unknown coefficient kind {kind!r}")


def save_stage(directory, result, extra=None):
    """Persist one stage's adapter tensors, teacher and manifest under ``directory``."""
    directory = Path(directory)
    tensors = dict(result.params)
    if result.teacher is not None:
        tensors["teacher"] = result.teacher
    manifest = {"stage": result.stage, "iterations": result.iterations,
                "support_acc": result.support_acc, "cap_hit": result.cap_hit, "lambda": result.lam}
    manifest.update(extra or {})
    plad.save_checkpoint(directory, tensors, manifest)
    (directory / "stage.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory
