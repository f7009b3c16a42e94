"""Procedural urban-scene stand-ins with exact label maps.

A scene is composed in layers over the 7 super classes (flat, construction,
object, nature, sky, human, vehicle): a sky band on top, a flat band at the
bottom, a construction or nature backdrop in between, then nature blobs or
buildings, poles, vehicles and pedestrians. The share of each class tracks
the domain's ``class_frequency_bias``. Rendering maps every class to a
palette colour and perturbs it (hue rotation, brightness, per-class texture,
Gaussian noise) without ever touching the labels.

Per-scene seeds: ``scene_seed(seed, i) = splitmix64(splitmix64(seed) + i)``
(arithmetic mod 2**64).
"""

from __future__ import annotations

import colorsys
import copy
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from mtuda.errors import ConfigurationError, ContractError, ValidationError
from mtuda.tensor import IGNORE

CLASS_NAMES = ("flat", "construction", "object", "nature", "sky", "human", "vehicle")
FLAT, CONSTRUCTION, OBJECT, NATURE, SKY, HUMAN, VEHICLE = range(7)

IMG_MAGIC = b"MTIMG1"
LBL_MAGIC = b"MTLBL1"
MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def scene_seed(seed: int, index: int) -> int:
    return splitmix64((splitmix64(seed & MASK64) + index) & MASK64)


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    palette: tuple
    hue_shift: float = 0.0
    brightness: float = 1.0
    noise_sigma: float = 0.0
    class_frequency_bias: tuple = (1.0,) * 7
    texture_grain: int = 0
    border: int = 0  # IGNORE band width at the image edge

    def __post_init__(self):
        pal = np.asarray(self.palette, dtype=float)
        if pal.shape != (7, 3) or pal.min() < 0 or pal.max() > 1:
            raise ConfigurationError(f"{self.domain_id}: palette must be 7 RGB triples in [0, 1]")
        bias = np.asarray(self.class_frequency_bias, dtype=float)
        if bias.shape != (7,) or bias.min() < 0:
            raise ConfigurationError(f"{self.domain_id}: class_frequency_bias must be 7 non-negative values")
        if np.count_nonzero(bias) < 3:
            raise ConfigurationError(f"{self.domain_id}: class_frequency_bias needs at least 3 nonzero entries")
        if self.brightness <= 0 or self.noise_sigma < 0 or self.texture_grain < 0:
            raise ConfigurationError(f"{self.domain_id}: brightness > 0, noise_sigma >= 0, texture_grain >= 0")


def _rgb(*c):
    return tuple(v / 255.0 for v in c)


_CITY_PALETTE = (
    _rgb(128, 64, 128),
    _rgb(70, 70, 70),
    _rgb(153, 153, 153),
    _rgb(107, 142, 35),
    _rgb(70, 130, 180),
    _rgb(220, 20, 60),
    _rgb(0, 0, 142),
)

PRESETS = {
    "synth": DomainSpec(
        "synth",
        _CITY_PALETTE,
        noise_sigma=0.02,
        class_frequency_bias=(3.0, 2.5, 0.6, 1.5, 2.2, 0.4, 1.0),
        texture_grain=4,
    ),
    "euro": DomainSpec(
        "euro",
        _CITY_PALETTE,
        hue_shift=60.0,
        brightness=0.8,
        noise_sigma=0.03,
        class_frequency_bias=(3.0, 2.8, 0.6, 1.6, 2.0, 0.5, 1.0),
        texture_grain=4,
    ),
    "india": DomainSpec(
        "india",
        _CITY_PALETTE,
        hue_shift=-45.0,
        brightness=1.15,
        noise_sigma=0.04,
        class_frequency_bias=(3.0, 1.8, 1.0, 1.2, 2.0, 0.8, 1.6),
        texture_grain=4,
    ),
    "world": DomainSpec(
        "world",
        _CITY_PALETTE,
        hue_shift=120.0,
        brightness=0.9,
        noise_sigma=0.08,
        class_frequency_bias=(3.0, 2.2, 0.8, 1.8, 2.2, 0.5, 1.1),
        texture_grain=4,
    ),
}


def preset(name: str) -> DomainSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown domain preset {name!r}; have {sorted(PRESETS)}") from None


def appearance_only(spec: DomainSpec, like: DomainSpec) -> DomainSpec:
    """``spec``'s appearance with ``like``'s content statistics (pure appearance shift)."""
    return replace(spec, class_frequency_bias=like.class_frequency_bias)


@dataclass
class Scene:
    image: np.ndarray  # (3, H, W) in [0, 1]
    labels: np.ndarray  # (H, W) uint8 over 0..6 and IGNORE
    domain_id: str


# --------------------------------------------------------------------------
# layout


def _layout(spec: DomainSpec, rng, h, w):
    bias = np.asarray(spec.class_frequency_bias, dtype=float)
    frac = bias / bias.sum() * rng.lognormal(0.0, 0.25, size=7)
    frac[bias == 0] = 0.0
    frac /= frac.sum()
    area = frac * h * w
    lab = np.empty((h, w), dtype=np.uint8)

    sky_rows = int(round(frac[SKY] * h))
    flat_rows = int(round(frac[FLAT] * h))
    if sky_rows + flat_rows > h - 4:
        scale = (h - 4) / (sky_rows + flat_rows)
        sky_rows, flat_rows = int(sky_rows * scale), int(flat_rows * scale)
    flat_top = h - flat_rows

    if bias[CONSTRUCTION] == 0 and bias[NATURE] == 0:
        mid = (sky_rows + flat_top) // 2
        sky_rows = mid if bias[SKY] > 0 else 0
        flat_top = mid if bias[FLAT] > 0 else h
    backdrop = CONSTRUCTION if bias[CONSTRUCTION] >= bias[NATURE] else NATURE
    second = NATURE if backdrop == CONSTRUCTION else CONSTRUCTION

    lab[:] = backdrop
    lab[:sky_rows] = SKY if bias[SKY] > 0 else backdrop
    lab[flat_top:] = FLAT if bias[FLAT] > 0 else backdrop
    mid_lo, mid_hi = sky_rows, max(flat_top, sky_rows + 1)

    def boxes(cls, target, hw_fn, anchor):
        placed = 0.0
        while target - placed > 0:
            bh, bw = hw_fn()
            if placed + 0.5 * bh * bw > target:
                break
            x0 = int(rng.integers(0, max(1, w - bw + 1)))
            bottom = anchor(bh)
            y0 = max(0, bottom - bh)
            if cls == NATURE:
                yy, xx = np.ogrid[:h, :w]
                cy, cx = (y0 + bottom) / 2.0, x0 + bw / 2.0
                blob = ((yy - cy) / (bh / 2.0)) ** 2 + ((xx - cx) / (bw / 2.0)) ** 2 <= 1.0
                lab[blob] = cls
                placed += np.pi / 4 * bh * bw
            else:
                lab[y0:bottom, x0 : x0 + bw] = cls
                placed += bh * bw

    def on_ground(jitter):
        return lambda bh: int(np.clip(flat_top + rng.integers(0, jitter + 1), bh, h))

    if second == NATURE:
        boxes(
            NATURE,
            area[NATURE],
            lambda: (int(rng.integers(h // 8, h // 3)), int(rng.integers(w // 6, w // 2))),
            lambda bh: int(rng.integers(mid_lo + bh // 2, mid_hi + 1)) if mid_hi > mid_lo + bh // 2 else mid_hi,
        )
    else:
        boxes(
            CONSTRUCTION,
            area[CONSTRUCTION],
            lambda: (int(rng.integers(h // 4, h // 2)), int(rng.integers(w // 8, w // 3))),
            on_ground(0),
        )
    boxes(OBJECT, area[OBJECT], lambda: (int(rng.integers(h // 4, h // 2)), int(rng.integers(1, 4))), on_ground(2))
    boxes(
        VEHICLE,
        area[VEHICLE],
        lambda: (int(rng.integers(h // 12, h // 6)), int(rng.integers(w // 8, w // 4))),
        on_ground(max(1, flat_rows // 2)),
    )
    boxes(
        HUMAN,
        area[HUMAN],
        lambda: (int(rng.integers(h // 10, h // 5)), int(rng.integers(2, 5))),
        on_ground(max(1, flat_rows // 2)),
    )
    if spec.border:
        b = spec.border
        lab[:b], lab[-b:], lab[:, :b], lab[:, -b:] = IGNORE, IGNORE, IGNORE, IGNORE
    return lab


# --------------------------------------------------------------------------
# rendering


def shifted_palette(spec: DomainSpec) -> np.ndarray:
    out = np.array(spec.palette, dtype=float)
    if spec.hue_shift % 360.0 == 0.0:
        return np.clip(out * spec.brightness, 0.0, 1.0)
    for c, rgb in enumerate(spec.palette):
        hh, s, v = colorsys.rgb_to_hsv(*rgb)
        out[c] = colorsys.hsv_to_rgb((hh + spec.hue_shift / 360.0) % 1.0, s, v)
    return np.clip(out * spec.brightness, 0.0, 1.0)


def _texture(cls, rng, h, w, grain):
    yy, xx = np.mgrid[:h, :w]
    if cls == FLAT:
        return ((yy // grain) % 2).astype(float)
    if cls == CONSTRUCTION:
        return (((yy // grain) + (xx // grain)) % 2).astype(float)
    if cls == NATURE:
        coarse = rng.random((h // grain + 2, w // grain + 2))
        return coarse[yy // grain, xx // grain]
    if cls == SKY:
        return yy / max(1, h - 1)
    if cls == VEHICLE:
        return ((xx // grain) % 2).astype(float)
    return np.full((h, w), 0.5)


def _render(spec: DomainSpec, lab, rng):
    h, w = lab.shape
    colors = shifted_palette(spec)
    safe = np.where(lab == IGNORE, 0, lab)
    img = colors[safe].transpose(2, 0, 1).copy()
    if spec.texture_grain > 0:
        mod = np.zeros((h, w))
        for c in range(7):
            mask = lab == c
            if mask.any():
                mod[mask] = _texture(c, rng, h, w, spec.texture_grain)[mask]
        img *= 1.0 + 0.3 * (mod - 0.5)
    if spec.noise_sigma > 0:
        img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_scene(spec: DomainSpec, seed: int, h: int = 64, w: int = 64) -> Scene:
    if h < 32 or w < 32:
        raise ConfigurationError(f"scene size must be at least 32x32, got {h}x{w}")
    rng = np.random.default_rng(seed & MASK64)
    lab = _layout(spec, rng, h, w)
    return Scene(_render(spec, lab, rng), lab, spec.domain_id)


# --------------------------------------------------------------------------
# datasets


@dataclass
class DomainDataset:
    """A domain's scenes. Labels of unlabeled sets are held for evaluation only."""

    scenes: list
    labeled: bool
    domain_id: str
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.scenes)

    def images(self, indices) -> np.ndarray:
        return np.stack([self.scenes[i].image for i in indices])

    def labels(self, indices) -> np.ndarray:
        if not self.labeled:
            raise ContractError(f"dataset {self.domain_id!r} is unlabeled; labels are not available for training")
        return np.stack([self.scenes[i].labels for i in indices])

    def eval_labels(self, indices) -> np.ndarray:
        return np.stack([self.scenes[i].labels for i in indices])

    def domain_ids(self):
        return [s.domain_id for s in self.scenes]

    def subset(self, indices, labeled=None) -> "DomainDataset":
        return DomainDataset(
            [self.scenes[i] for i in indices],
            self.labeled if labeled is None else labeled,
            self.domain_id,
            dict(self.meta),
        )

    def with_labels(self, labeled: bool) -> "DomainDataset":
        return DomainDataset(self.scenes, labeled, self.domain_id, dict(self.meta))

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256(self.domain_id.encode())
        for s in self.scenes:
            h.update(s.image.tobytes())
            h.update(s.labels.tobytes())
        return h.hexdigest()[:16]


def generate_dataset(spec: DomainSpec, n: int, seed: int, h: int = 64, w: int = 64, labeled: bool = False):
    if n < 1:
        raise ConfigurationError("dataset size must be >= 1")
    scenes = [generate_scene(spec, scene_seed(seed, i), h, w) for i in range(n)]
    return DomainDataset(scenes, labeled, spec.domain_id, {"seed": seed})


def train_val_split(n: int, n_val: int, seed: int):
    """Disjoint ``(train_idx, val_idx)`` covering ``range(n)``."""
    if not 0 <= n_val <= n:
        raise ValueError("n_val must be within [0, n]")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def merge_datasets(datasets) -> DomainDataset:
    """Round-robin interleave: d1[0], d2[0], ..., d1[1], d2[1], ...; exhausted sets drop out."""
    datasets = list(datasets)
    if not datasets:
        raise ContractError("nothing to merge")
    flags = {d.labeled for d in datasets}
    if len(flags) != 1:
        raise ContractError("cannot merge labeled and unlabeled datasets")
    scenes = []
    for i in range(max(len(d) for d in datasets)):
        for d in datasets:
            if i < len(d):
                scenes.append(d.scenes[i])
    name = "+".join(d.domain_id for d in datasets)
    return DomainDataset(scenes, flags.pop(), name, {"merged": [d.domain_id for d in datasets]})


# --------------------------------------------------------------------------
# file formats


def write_image(path, image: np.ndarray):
    image = np.ascontiguousarray(image, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC + struct.pack("<III", *image.shape) + image.tobytes())


def read_image(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:6] != IMG_MAGIC:
        raise ValidationError(f"{path}: bad image magic")
    c, h, w = struct.unpack_from("<III", buf, 6)
    return np.frombuffer(buf, dtype="<f8", offset=18, count=c * h * w).reshape(c, h, w).astype(np.float64)


def write_labels(path, labels: np.ndarray):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(LBL_MAGIC + struct.pack("<II", *labels.shape) + labels.tobytes())


def read_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:6] != LBL_MAGIC:
        raise ValidationError(f"{path}: bad label magic")
    h, w = struct.unpack_from("<II", buf, 6)
    return np.frombuffer(buf, dtype=np.uint8, offset=14, count=h * w).reshape(h, w).copy()


def export_dataset(ds: DomainDataset, directory) -> Path:
    """Write ``manifest.tsv`` plus one ``.img``/``.lbl`` pair per scene."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [
        "# mtuda dataset v1",
        f"# domain_id\t{ds.domain_id}",
        f"# labeled\t{int(ds.labeled)}",
        "index\tdomain_id\timage\tlabels",
    ]
    for i, s in enumerate(ds.scenes):
        img, lbl = f"{i:05d}.img", f"{i:05d}.lbl"
        write_image(d / img, s.image)
        write_labels(d / lbl, s.labels)
        lines.append(f"{i}\t{s.domain_id}\t{img}\t{lbl}")
    (d / "manifest.tsv").write_text("\n".join(lines) + "\n")
    return d


def import_dataset(directory) -> DomainDataset:
    d = Path(directory)
    meta, scenes = {}, []
    for lineno, line in enumerate((d / "manifest.tsv").read_text().splitlines(), 1):
        if line.startswith("#"):
            parts = line[1:].strip().split("\t")
            if len(parts) == 2:
                meta[parts[0]] = parts[1]
            continue
        if line.startswith("index\t") or not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValidationError("malformed manifest", [(lineno, f"expected 4 fields, got {len(parts)}")])
        _, dom, img, lbl = parts
        scenes.append(Scene(read_image(d / img), read_labels(d / lbl), dom))
    if "domain_id" not in meta or "labeled" not in meta:
        raise ValidationError(f"{d}: manifest lacks domain_id/labeled header")
    return DomainDataset(scenes, meta["labeled"] == "1", meta["domain_id"])


def spec_to_dict(spec: DomainSpec) -> dict:
    return {
        "domain_id": spec.domain_id,
        "palette": [list(map(float, c)) for c in spec.palette],
        "hue_shift": spec.hue_shift,
        "brightness": spec.brightness,
        "noise_sigma": spec.noise_sigma,
        "class_frequency_bias": list(map(float, spec.class_frequency_bias)),
        "texture_grain": spec.texture_grain,
        "border": spec.border,
    }


def spec_from_dict(d: dict) -> DomainSpec:
    d = copy.deepcopy(d)
    d["palette"] = tuple(tuple(c) for c in d["palette"])
    d["class_frequency_bias"] = tuple(d["class_frequency_bias"])
    return DomainSpec(**d)


def parallel_generate(spec, n, seed, h=64, w=64, labeled=False, workers=None):
    """Same result as :func:`generate_dataset`, scenes built in a process pool."""
    workers = workers or os.cpu_count() or 1
    if workers <= 1 or n < 8:
        return generate_dataset(spec, n, seed, h, w, labeled)
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(workers) as ex:
        scenes = list(ex.map(generate_scene, [spec] * n, [scene_seed(seed, i) for i in range(n)], [h] * n, [w] * n))
    return DomainDataset(scenes, labeled, spec.domain_id, {"seed": seed})
