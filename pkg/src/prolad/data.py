"""Synthetic multi-domain grating images, episode sampling and dataset caching.

Each class is a sinusoidal grating with its own orientation, spatial
frequency and colour.  A domain applies a shift ``s`` in [0, 1] on top:
per-channel contrast scaling, per-channel mean offsets and, above
``s = 0.7``, polarity inversion.  ``s = 0`` is the source domain.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import plad
from .errors import ConfigurationError

SIMILAR_MAX_SHIFT = 0.4
DISSIMILAR_MIN_SHIFT = 0.6
INVERT_ABOVE = 0.7
NOVEL_CLASS_BASE = 1000

# per-channel direction of the mean offset and log contrast scale at s = 1
_OFFSET_SIGN = np.array([1.0, -1.0, 1.0])
_LOG_SCALE = np.array([1.0, -1.0, 0.5])


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    shift: float
    image_size: int = 16
    noise: float = 0.5
    offset_magnitude: float = 1.0
    scale_magnitude: float = 2.0
    num_classes: int = 20
    cast: float = 0.0
    contrast_jitter: float = 0.0
    shift_exponent: float = 1.0
    colour_min: float = 0.2
    phase_jitter: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.shift <= 1.0:
            raise ConfigurationError(f"domain shift must lie in [0, 1], got {self.shift}")
        if self.image_size < 4:
            raise ConfigurationError(f"image_size must be >= 4, got {self.image_size}")
        if self.noise < 0 or self.offset_magnitude < 0 or self.scale_magnitude < 1:
            raise ConfigurationError("noise, offset_magnitude >= 0 and scale_magnitude >= 1 required")

    @property
    def strength(self):
        """Effective shift ``s ** shift_exponent`` driving offsets and scales."""
        return self.shift ** self.shift_exponent

    @property
    def channel_offsets(self):
        return self.strength * self.offset_magnitude * _OFFSET_SIGN

    @property
    def channel_scales(self):
        return np.exp(self.strength * np.log(self.scale_magnitude) * _LOG_SCALE)

    @property
    def inverted(self):
        return self.shift > INVERT_ABOVE

    @property
    def group(self):
        if self.shift <= SIMILAR_MAX_SHIFT:
            return "similar"
        if self.shift >= DISSIMILAR_MIN_SHIFT:
            return "dissimilar"
        return "intermediate"

    def novel_classes(self):
        """Evaluation classes of this domain (disjoint from every source class)."""
        start = NOVEL_CLASS_BASE * (self.domain_id + 1)
        return list(range(start, start + self.num_classes))


def source_classes(n):
    return list(range(n))


def class_params(class_id, colour_min=0.2):
    """Orientation in [0, pi), spatial frequency (cycles per image) and RGB colour of a class.

    Colour channels are drawn from ``[colour_min, 1]``; a higher floor makes
    classes less separable by colour alone.
    """
    r = np.random.default_rng([class_id, 0x5EED])
    theta = r.uniform(0.0, np.pi)
    freq = r.uniform(1.0, 4.0)
    colour = colour_min + (1.0 - colour_min) * r.random(size=3)
    colour /= np.linalg.norm(colour) / np.sqrt(3.0)
    return theta, freq, colour


@dataclass
class LabeledSet:
    images: np.ndarray
    labels: np.ndarray
    class_ids: list

    def __len__(self):
        return len(self.labels)


def render(spec, class_ids, labels, rng):
    """Render one image per entry of ``labels`` (indices into ``class_ids``)."""
    n, size = len(labels), spec.image_size
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    params = [class_params(c, spec.colour_min) for c in class_ids]
    out = np.empty((n, 3, size, size))
    phase = rng.uniform(0.0, 2 * np.pi * spec.phase_jitter, size=n)
    jitter = rng.normal(0.0, 0.08, size=n)
    amp = rng.uniform(0.8, 1.2, size=n)
    noise = rng.normal(0.0, spec.noise, size=out.shape)
    for i, lab in enumerate(labels):
        theta, freq, colour = params[lab]
        th = theta + jitter[i]
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(th) + yy * np.sin(th)) + phase[i])
        out[i] = amp[i] * colour[:, None, None] * wave
    out += noise
    # exact zero spatial mean per image and channel; the domain sets the means
    out -= out.mean(axis=(2, 3), keepdims=True)
    if spec.contrast_jitter:
        out *= np.exp(rng.normal(0.0, spec.contrast_jitter, size=(n, 3, 1, 1)))
    if spec.cast:
        out += rng.normal(0.0, spec.cast, size=(n, 3, 1, 1))
    if spec.inverted:
        out = -out
    out *= spec.channel_scales[None, :, None, None]
    out += spec.channel_offsets[None, :, None, None]
    return out


def generate_dataset(spec, classes, samples_per_class, seed):
    """Deterministic labeled image set: ``samples_per_class`` images for each class."""
    if samples_per_class < 1:
        raise ConfigurationError(f"samples_per_class must be >= 1, got {samples_per_class}")
    if not classes:
        raise ConfigurationError("generate_dataset needs at least one class")
    rng = np.random.default_rng([seed, spec.domain_id, 0xDA7A])
    labels = np.repeat(np.arange(len(classes)), samples_per_class)
    return LabeledSet(render(spec, list(classes), labels, rng), labels, list(classes))


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    way: int
    shots: list
    class_ids: list
    domain_id: int
    shift: float
    seed: int

    @property
    def group(self):
        return DomainSpec(self.domain_id, self.shift).group


@dataclass
class EpisodeLayout:
    domain: DomainSpec
    class_ids: list
    shots: list
    query_per_class: int
    seed: int = field(default=0)

    @property
    def way(self):
        return len(self.class_ids)


def sample_layout(domains, rng, way_range=(5, 10), shot_range=(1, 10), query_per_class=10):
    """Draw the structure of an episode (domain, classes, shots) without rendering."""
    if not domains:
        raise ConfigurationError("no domains to sample from")
    domain = domains[int(rng.integers(len(domains)))]
    pool = domain.novel_classes()
    lo, hi = way_range
    if lo > len(pool):
        raise ConfigurationError(f"way {lo} exceeds the {len(pool)} classes of domain {domain.domain_id}")
    way = int(rng.integers(lo, min(hi, len(pool)) + 1))
    picked = sorted(int(c) for c in rng.choice(pool, size=way, replace=False))
    shots = [int(s) for s in rng.integers(shot_range[0], shot_range[1] + 1, size=way)]
    seed = int(rng.integers(2**63 - 1))
    return EpisodeLayout(domain, picked, shots, query_per_class, seed)


def render_episode(layout):
    rng = np.random.default_rng([layout.seed, 0xE915])
    sup = np.repeat(np.arange(layout.way), layout.shots)
    qry = np.repeat(np.arange(layout.way), layout.query_per_class)
    d = layout.domain
    return Episode(
        support_x=render(d, layout.class_ids, sup, rng), support_y=sup,
        query_x=render(d, layout.class_ids, qry, rng), query_y=qry,
        way=layout.way, shots=list(layout.shots), class_ids=list(layout.class_ids),
        domain_id=d.domain_id, shift=d.shift, seed=layout.seed)


def sample_episode(domains, rng, way_range=(5, 10), shot_range=(1, 10), query_per_class=10):
    """One rendered few-shot episode drawn from ``domains`` with generator ``rng``."""
    return render_episode(sample_layout(domains, rng, way_range, shot_range, query_per_class))


def domain_grid(shifts, **kw):
    return [DomainSpec(i + 1, float(s), **kw) for i, s in enumerate(shifts)]


# -- caching --------------------------------------------------------------------------------
def save_dataset(directory, spec, data, seed=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"domain{spec.domain_id}"
    plad.save_tensor(directory / f"{stem}_images.plad", data.images)
    plad.save_tensor(directory / f"{stem}_labels.plad", data.labels.astype(np.float64))
    index_path = directory / "index.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    index[stem] = {"domain_id": spec.domain_id, "s": spec.shift, "spec": asdict(spec), "seed": seed,
                   "classes": data.class_ids,
                   "counts": np.bincount(data.labels, minlength=len(data.class_ids)).tolist()}
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True))


def load_dataset(directory, domain_id):
    directory = Path(directory)
    stem = f"domain{domain_id}"
    index = json.loads((directory / "index.json").read_text())
    if stem not in index:
        raise KeyError(f"domain {domain_id} is not cached in {directory}")
    entry = index[stem]
    images = plad.load_tensor(directory / f"{stem}_images.plad")
    labels = plad.load_tensor(directory / f"{stem}_labels.plad").astype(np.int64)
    return DomainSpec(**entry["spec"]), LabeledSet(images, labels, entry["classes"])


def cached_seed(directory, domain_id):
    index = json.loads((Path(directory) / "index.json").read_text())
    return index[f"domain{domain_id}"].get("seed")


def cached_dataset(directory, spec, classes, samples_per_class, seed):
    """Load ``spec``'s dataset from ``directory`` if the cached copy matches, else build and cache it.

    A cached copy matches when its spec, class list, size and seed all agree.
    """
    if directory is not None:
        try:
            cached_spec, data = load_dataset(directory, spec.domain_id)
            cseed = cached_seed(directory, spec.domain_id)
        except (FileNotFoundError, KeyError):
            pass
        else:
            if (cached_spec == spec and data.class_ids == list(classes) and cseed == seed
                    and len(data) == len(classes) * samples_per_class):
                return data
    data = generate_dataset(spec, classes, samples_per_class, seed)
    if directory is not None:
        save_dataset(directory, spec, data, seed)
    return data
