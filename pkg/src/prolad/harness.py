"""Episode-level evaluation, confidence intervals and ablation grids.

Every cell of a grid sees the same episode stream: episode ``j`` of domain
``d`` is drawn from a generator seeded by ``splitmix64`` of the master seed,
``d`` and ``j``.  Work is organised episode-major, so the stage-2 (TA)
result and the adaptive coefficients are computed once per episode and
reused by every method that needs them.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adapters as ad
from . import data
from . import nn
from . import pipeline
from . import similarity as sim
from .errors import ConfigurationError

log = logging.getLogger(__name__)

LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(11))
BETA_GRID = (0.5, 1.0, 1.5, 2.0, 2.5)
KINDS = ("adapters", "training", "lambda_sweep", "beta_sweep", "variants")

_MASK64 = (1 << 64) - 1


def splitmix64(x):
    """One step of the SplitMix64 mixer (64-bit in, 64-bit out)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def episode_seed(master, domain_index, episode_index):
    s = splitmix64(master & _MASK64)
    s = splitmix64(s ^ domain_index)
    return splitmix64(s ^ (episode_index + 1))


# -- methods ------------------------------------------------------------------------------------
@dataclass(frozen=True)
class Method:
    """One pipeline variant.  ``tag`` is the label printed in reports."""

    name: str
    lam: float = None
    beta: float = None
    variant: str = ad.SN_GROUPCONV

    @property
    def tag(self):
        if self.name == "fixed":
            return f"fixed-λ({self.lam:.1f})"
        if self.name == "variant":
            return f"variant({self.variant})"
        if self.name == "prolad-sim" and self.beta is not None:
            return f"ProLAD-sim(β={self.beta:g})"
        return _TAGS[self.name]

    @property
    def slug(self):
        t = self.tag.replace("λ", "lambda").replace("β", "beta").replace("+", "_")
        return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in t).strip("_")

    @property
    def needs_stage2(self):
        return self.name not in ("tan", "scratch")


_TAGS = {"ta": "TA", "tan": "TAN", "scratch": "TAN+TA scratch", "p": "P", "d+a": "D+A",
         "prolad-sim": "ProLAD-sim", "prolad-loss": "ProLAD-loss"}


def method_from_config(cfg):
    if cfg.method == "fixed":
        return Method("fixed", lam=cfg.lam)
    if cfg.method == "variant":
        if cfg.variant not in ad.VARIANTS:
            raise ConfigurationError(f"config field 'variant': unknown {cfg.variant!r}")
        return Method("variant", variant=cfg.variant)
    if cfg.method not in _TAGS:
        raise ConfigurationError(
            f"config field 'method': unknown {cfg.method!r}; choose from "
            f"{sorted(_TAGS) + ['fixed', 'variant']}")
    return Method(cfg.method)


def grid_methods(kind):
    if kind == "adapters":
        return [Method("ta"), Method("tan"), Method("scratch")]
    if kind == "training":
        return [Method("scratch"), Method("p"), Method("d+a"), Method("prolad-sim")]
    if kind == "lambda_sweep":
        return [Method("fixed", lam=v) for v in LAMBDA_GRID]
    if kind == "beta_sweep":
        return [Method("prolad-sim", beta=b) for b in BETA_GRID]
    if kind == "variants":
        return [Method("variant", variant=v) for v in ad.VARIANTS]
    raise ConfigurationError(f"unknown ablation kind {kind!r}; choose from {KINDS}")


# -- reports ------------------------------------------------------------------------------------
@dataclass
class EvalReport:
    method: str
    accuracies: list
    lambdas: list = field(default_factory=list)
    domain_ids: list = field(default_factory=list)
    shifts: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    seed: int = 0
    config: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.accuracies)

    @property
    def mean(self):
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")

    @property
    def sd(self):
        """Sample standard deviation (``ddof=1``); 0 for a single episode."""
        return float(np.std(self.accuracies, ddof=1)) if self.n > 1 else 0.0

    @property
    def ci95(self):
        return ci95(self.accuracies)

    @property
    def groups(self):
        return [group_of(s) for s in self.shifts]

    def group_mean(self, group):
        acc = [a for a, g in zip(self.accuracies, self.groups) if g == group]
        return float(np.mean(acc)) if acc else float("nan")

    def domain_means(self):
        out = {}
        for a, s in zip(self.accuracies, self.shifts):
            out.setdefault(s, []).append(a)
        return {s: float(np.mean(v)) for s, v in sorted(out.items())}

    def summary(self):
        groups = sorted(set(self.groups))
        return {"method": self.method, "episodes": self.n, "mean": self.mean, "sd": self.sd,
                "ci95": self.ci95, "group_means": {g: self.group_mean(g) for g in groups},
                "domain_means": {f"{s:g}": m for s, m in self.domain_means().items()}}

    def to_dict(self):
        doc = self.summary()
        doc.update({"seed": self.seed, "config": self.config, "per_episode": [
            {"episode": i, "domain_id": d, "s": s, "group": group_of(s), "accuracy": a,
             "lambda": lam, "iterations": it}
            for i, (a, lam, d, s, it) in enumerate(zip(
                self.accuracies, self.lambdas, self.domain_ids, self.shifts, self.iterations))]})
        return doc

    @classmethod
    def from_dict(cls, doc):
        eps = doc["per_episode"]
        return cls(doc["method"], [e["accuracy"] for e in eps], [e["lambda"] for e in eps],
                   [e["domain_id"] for e in eps], [e["s"] for e in eps],
                   [e["iterations"] for e in eps], doc.get("seed", 0), doc.get("config", {}))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def write(self, directory, stem):
        """Write ``<stem>.json`` (summary + episodes) and ``<stem>.csv`` (episode rows)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.json").write_text(self.to_json(), encoding="utf-8")
        with open(directory / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "domain_id", "s", "group", "accuracy", "lambda", "iterations"])
            for row in self.to_dict()["per_episode"]:
                w.writerow([row["episode"], row["domain_id"], row["s"], row["group"],
                            repr(row["accuracy"]),
                            "" if row["lambda"] is None else repr(row["lambda"]),
                            row["iterations"]])
        return directory / f"{stem}.json"


def ci95(values):
    """Half-width ``1.96 * sd / sqrt(N)`` with the sample standard deviation."""
    n = len(values)
    if n < 2:
        return 0.0
    return float(1.96 * np.std(values, ddof=1) / math.sqrt(n))


def group_of(s):
    if s <= data.SIMILAR_MAX_SHIFT:
        return "similar"
    if s >= data.DISSIMILAR_MIN_SHIFT:
        return "dissimilar"
    return "intermediate"


# -- episode execution --------------------------------------------------------------------------
def episode_plan(cfg):
    """``[(domain_index, episode_index, seed, DomainSpec)]`` in report order."""
    domains = data.domain_grid(cfg.shifts, **cfg.domain_kwargs())
    return [(d, j, episode_seed(cfg.seed, d, j), dom)
            for d, dom in enumerate(domains) for j in range(cfg.episodes)]


def make_episode(cfg, seed, domain):
    rng = np.random.default_rng(seed)
    layout = data.sample_layout([domain], rng, (cfg.way_min, cfg.way_max),
                                (cfg.shot_min, cfg.shot_max), cfg.query_per_class)
    return data.render_episode(layout)


def run_episode(backbone, episode, seed, methods, cfg):
    """Run every method on one episode; returns ``{tag: (accuracy, lambda, iterations)}``."""
    fcfg = cfg.finetune_config()
    out = {}
    stage2 = None
    lam_cache = {}

    def rng(stage):
        return np.random.default_rng([seed, stage])

    def lam_of(kind, beta):
        if (kind, beta) not in lam_cache:
            lam_cache[(kind, beta)] = pipeline.compute_lambda(backbone, episode, kind, beta,
                                                              cfg.tau)[0]
        return lam_cache[(kind, beta)]

    for m in methods:
        if m.needs_stage2 and stage2 is None:
            stage2 = pipeline.stage2_finetune(backbone, episode, rng(2), fcfg)
        lam = None
        if m.name == "ta":
            res = stage2
        elif m.name == "tan":
            res = pipeline.stage3_finetune(backbone, episode, 0.0, rng(3), cfg=fcfg, use_ta=False)
        elif m.name == "scratch":
            res = pipeline.stage3_finetune(backbone, episode, 0.0, rng(3), cfg=fcfg)
        elif m.name == "p":
            res = pipeline.stage3_finetune(backbone, episode, 0.0, rng(3), stage2.params,
                                           stage2.teacher, fcfg)
        else:
            if m.name == "fixed":
                lam = m.lam
            elif m.name == "prolad-loss":
                lam = lam_of("loss", cfg.beta)
            else:
                lam = lam_of("sim", cfg.beta if m.beta is None else m.beta)
            warm = None if m.name == "d+a" else stage2.params
            res = pipeline.stage3_finetune(backbone, episode, lam, rng(3), warm, stage2.teacher,
                                           fcfg, variant=m.variant)
        out[m.tag] = (pipeline.query_accuracy(res, episode, fcfg), lam, res.iterations)
    return out


def load_backbone(cfg):
    path = checkpoint_path(cfg)
    if not (path / "manifest.json").exists():
        raise ConfigurationError(f"no pretrained checkpoint at {path}; run `prolad pretrain` first")
    backbone, _ = nn.Backbone.load(path)
    if backbone.widths != list(cfg.widths):
        raise ConfigurationError(
            f"config field 'widths': {cfg.widths} does not match checkpoint {backbone.widths}")
    return backbone


def checkpoint_path(cfg):
    p = Path(cfg.checkpoint)
    if not p.is_absolute() and cfg.out_dir is not None:
        p = Path(cfg.out_dir) / p
    return p


def evaluate(cfg, methods, backbone=None):
    """Run ``methods`` on the shared episode stream; returns one report per method."""
    backbone = backbone if backbone is not None else load_backbone(cfg)
    tags = [m.tag for m in methods]
    if len(set(tags)) != len(tags):
        raise ConfigurationError(f"duplicate methods in grid: {tags}")
    plan = episode_plan(cfg)

    def work(item, bb):
        d, j, seed, dom = item
        ep = make_episode(cfg, seed, dom)
        return run_episode(bb, ep, seed, methods, cfg)

    if cfg.threads == 1:
        rows = [work(item, backbone) for item in plan]
    else:
        # each worker owns a backbone copy; results are gathered in plan order
        local = threading.local()

        def threaded(item):
            if not hasattr(local, "backbone"):
                local.backbone = backbone.clone()
            return work(item, local.backbone)

        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            rows = list(pool.map(threaded, plan))
    resolved = cfg.to_dict()
    reports = []
    for m in methods:
        r = EvalReport(m.tag, [], seed=cfg.seed, config=resolved)
        for (d, j, seed, dom), row in zip(plan, rows):
            acc, lam, iters = row[m.tag]
            r.accuracies.append(acc)
            r.lambdas.append(lam)
            r.domain_ids.append(dom.domain_id)
            r.shifts.append(dom.shift)
            r.iterations.append(iters)
        reports.append(r)
    return reports


def _out_dir(cfg):
    if cfg.out_dir is None:
        raise ConfigurationError("config field 'out_dir': no output directory given")
    return Path(cfg.out_dir)


def run_eval(cfg, backbone=None, write=True):
    """Evaluate ``cfg.method``; writes ``reports/<method>.{json,csv}`` under ``out_dir``."""
    method = method_from_config(cfg)
    report = evaluate(cfg, [method], backbone)[0]
    if write:
        report.write(_out_dir(cfg) / "reports", method.slug)
    return report


def run_ablation_grid(kind, cfg, backbone=None, write=True):
    """One report per grid cell, all on identical episodes.  Returns ``{tag: report}``."""
    methods = grid_methods(kind)
    reports = evaluate(cfg, methods, backbone)
    if write:
        directory = _out_dir(cfg) / f"ablate_{kind}"
        for m, r in zip(methods, reports):
            r.write(directory, m.slug)
        summary = {"kind": kind, "seed": cfg.seed, "config": cfg.to_dict(),
                   "cells": [r.summary() for r in reports]}
        (directory / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
            encoding="utf-8")
    return {r.method: r for r in reports}


# -- pretraining and coefficient traces ---------------------------------------------------------
def source_spec(cfg):
    kw = cfg.domain_kwargs()
    kw["num_classes"] = cfg.source_classes
    return data.DomainSpec(0, 0.0, **kw)


def pretrain(cfg):
    """Stage 1 on the source domain; writes the checkpoint and returns the training record."""
    spec = source_spec(cfg)
    classes = data.source_classes(cfg.source_classes)
    ddir = cfg.dataset_dir
    train = data.cached_dataset(ddir, spec, classes, cfg.samples_per_class, cfg.seed)
    val = data.generate_dataset(spec, classes, max(1, cfg.samples_per_class // 4), cfg.seed + 1)
    backbone = nn.Backbone(cfg.widths, seed=cfg.seed)
    result = pipeline.stage1_pretrain(
        backbone, train.images, train.labels, epochs=cfg.epochs, lr=cfg.pretrain_lr,
        batch_size=cfg.batch_size, seed=cfg.seed, weight_decay=cfg.weight_decay,
        checkpoint_dir=checkpoint_path(cfg), val_images=val.images, val_labels=val.labels)
    return backbone, result


def coefficient_trace(cfg, backbone=None):
    """Per-episode ``lambda_sim`` and ``lambda_loss`` with their intermediate statistics."""
    backbone = backbone if backbone is not None else load_backbone(cfg)
    rows = []
    for i, (d, j, seed, dom) in enumerate(episode_plan(cfg)):
        ep = make_episode(cfg, seed, dom)
        lam_s, info_s = pipeline.compute_lambda(backbone, ep, "sim", cfg.beta, cfg.tau)
        lam_l, info_l = pipeline.compute_lambda(backbone, ep, "loss", cfg.beta, cfg.tau)
        rows.append({"episode_id": i, "domain_id": dom.domain_id, "s": dom.shift,
                     "lambda_sim": lam_s, "abs_diff": abs(info_s["mean_feat_sim"]
                                                          - info_s["mean_intercls_sim"]),
                     "lambda_loss": lam_l, "loss": info_l["loss"], "acc": info_l["acc"]})
    return rows


# -- domain similarity and statistics profiles ---------------------------------------------------
def domain_prototypes(cfg, backbone, spec, classes, samples_per_class):
    ds = data.generate_dataset(spec, classes, samples_per_class, cfg.seed)
    emb = pipeline.pretrained_embeddings(backbone, ds.images)
    return sim.class_prototypes(emb, ds.labels)


def _emd(a, b):
    return sim.solve_emd(sim.TransportProblem(a, b))[1]


def similarity_matrix(cfg, backbone, samples_per_class=20):
    """Pairwise ``exp(-gamma * EMD)`` between the grid domains' novel-class prototypes."""
    domains = data.domain_grid(cfg.shifts, **cfg.domain_kwargs())
    protos = [domain_prototypes(cfg, backbone, d, d.novel_classes(), samples_per_class)
              for d in domains]
    k = len(domains)
    emd = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            emd[i, j] = emd[j, i] = _emd(protos[i], protos[j])
    mat = np.exp(-cfg.gamma * emd)
    return [d.shift for d in domains], mat, emd


def source_similarity(cfg, backbone, samples_per_class=20, num_classes=20):
    """``[(s, EMD, Sim)]`` of every grid shift against the source domain.

    The same source classes are rendered at ``s = 0`` and under each shift, so
    the distance isolates the domain shift from class-set differences.
    """
    classes = data.source_classes(min(num_classes, cfg.source_classes))
    kw = cfg.domain_kwargs()
    kw["num_classes"] = cfg.source_classes
    ref = domain_prototypes(cfg, backbone, data.DomainSpec(0, 0.0, **kw), classes,
                            samples_per_class)
    out = []
    for s in cfg.shifts:
        # domain id 0 for every shift: identical sampling noise, only the shift differs
        e = _emd(ref, domain_prototypes(cfg, backbone, data.DomainSpec(0, float(s), **kw), classes,
                                        samples_per_class))
        out.append((float(s), e, sim.domain_similarity(e, cfg.gamma)))
    return out


def profile_domains(cfg, samples_per_class=10):
    """``(DomainSpec, images)`` for every grid domain, rendered from its novel classes."""
    for d in data.domain_grid(cfg.shifts, **cfg.domain_kwargs()):
        yield d, data.generate_dataset(d, d.novel_classes(), samples_per_class, cfg.seed).images
