"""Entropy-based pseudo-labels and one round of self-training refinement.

Pseudo-labels are taken from the target-specific heads (one per target
domain) or, for the merged baseline, from its single head. Selection is
class-wise: among the pixels predicted as class ``c``, the ``keep_fraction``
share with the lowest normalized entropy is kept. They are extracted once
and held fixed for the whole refinement pass.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mtuda import nets, synth
from mtuda.errors import ConfigurationError, ContractError
from mtuda.tensor import IGNORE, LOG_FLOOR, Tensor
from mtuda.trainers import Method, TrainState, run, training_targets


class PLStrategy(enum.Enum):
    TEACHER_ONLY = "TeacherOnly"
    TEACHER_PLUS_KL_MASK = "TeacherPlusKLMask"
    TEACHER_PLUS_AGNOSTIC = "TeacherPlusAgnostic"

    @classmethod
    def parse(cls, text):
        for v in cls:
            if text in (v.value, v.name):
                return v
        raise ConfigurationError(f"unknown PL strategy {text!r}; choose from {[v.value for v in cls]}")


@dataclass
class PseudoLabelMap:
    labels: np.ndarray  # (H, W) uint8 over 0..C-1 and IGNORE
    source_head: str
    selection_fraction: float  # share of pixels actually kept


def normalized_entropy(probs: np.ndarray) -> np.ndarray:
    """``H(p) / log C`` over the channel axis of a (C, H, W) map."""
    p = np.asarray(probs, dtype=np.float64)
    h = -np.sum(p * np.log(np.maximum(p, LOG_FLOOR)), axis=0)
    return h / math.log(p.shape[0])


def _check_fraction(keep_fraction):
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigurationError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")


def select_pixels(probs, keep_fraction: float) -> np.ndarray:
    """Class-wise lowest-entropy selection; returns the (H, W) label map.

    For each predicted class with ``n_c`` pixels, ``floor(keep_fraction * n_c)``
    pixels are kept, in order of increasing entropy with ties going to the
    lower flat pixel index.
    """
    _check_fraction(keep_fraction)
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    pred = nets.predict_labels(p[None])[0]
    ent = normalized_entropy(p).ravel()
    flat = pred.ravel()
    out = np.full(flat.shape, IGNORE, dtype=np.uint8)
    for c in np.unique(flat):
        idx = np.flatnonzero(flat == c)
        k = int(math.floor(keep_fraction * idx.size + 1e-9))
        if k == 0:
            continue
        order = np.lexsort((idx, ent[idx]))
        out[idx[order[:k]]] = c
    return out.reshape(pred.shape)


def extract_pseudo_labels(probs, keep_fraction: float, source_head: str = "main") -> PseudoLabelMap:
    labels = select_pixels(probs, keep_fraction)
    return PseudoLabelMap(labels, source_head, float(np.mean(labels != IGNORE)))


def extract_for_dataset(state: TrainState, dataset, head_id: str, keep_fraction: float, batch_size: int = 16):
    """(N, H, W) pseudo-label maps for every scene of ``dataset``."""
    if head_id == "agn":
        raise ContractError("pseudo-labels come from target-specific heads, never the agnostic head")
    out = []
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        probs = nets.segmenter_forward(state.segmenter, Tensor(dataset.images(idx)), head_id).probs.data
        out.extend(select_pixels(p, keep_fraction) for p in probs)
    return np.stack(out)


class PLContext:
    """Frozen pseudo-labels plus the variant switches read by the trainers."""

    def __init__(self, maps, strategy: PLStrategy | None):
        self.maps = maps
        self.strategy = strategy
        self.refine_agnostic = strategy is PLStrategy.TEACHER_PLUS_AGNOSTIC

    def labels(self, n, idx):
        return self.maps[n][np.asarray(idx)]

    def kl_masks(self, students, batches):
        """Zero the KL only where a pseudo-label exists and the student disagrees.

        Pixels without a pseudo-label keep their KL term, so an empty
        selection leaves the distillation loss unchanged.
        """
        if self.strategy is not PLStrategy.TEACHER_PLUS_KL_MASK:
            return None
        masks = {}
        for n, probs in students.items():
            pl = self.labels(n, batches[n][1])
            agree = nets.predict_labels(probs) == pl
            mask = (pl == IGNORE) | agree
            masks[n] = None if mask.all() else mask
        return masks


def refine_mtkt(state: TrainState, source, targets, strategy, refine_iters: int, keep_fraction: float) -> TrainState:
    """One extraction round from each ``spec_n`` head, then ``refine_iters`` more MTKT iterations."""
    strategy = PLStrategy.parse(strategy) if isinstance(strategy, str) else strategy
    if state.cfg.method is not Method.MTKT:
        raise ContractError(f"{strategy.value} refinement needs an MTKT state, got {state.cfg.method.value}")
    targets = list(targets)
    if len(targets) != state.cfg.T:
        raise ContractError(f"state has {state.cfg.T} teachers, got {len(targets)} target sets")
    _check_fraction(keep_fraction)
    maps = [extract_for_dataset(state, t, f"spec_{n + 1}", keep_fraction) for n, t in enumerate(targets)]
    return run(state, source, targets, until=state.iteration + refine_iters, pl=PLContext(maps, strategy))


def refine_baseline(state: TrainState, source, targets, refine_iters: int, keep_fraction: float) -> TrainState:
    """Self-training of a single-head model on pseudo-labels from its own head."""
    if state.cfg.method not in (Method.MULTI_TARGET_BASELINE, Method.SINGLE_TARGET):
        raise ContractError(f"baseline refinement needs a baseline state, got {state.cfg.method.value}")
    _check_fraction(keep_fraction)
    tg = training_targets(state.cfg, targets)
    maps = [extract_for_dataset(state, tg[0], "main", keep_fraction)]
    return run(state, source, tg, until=state.iteration + refine_iters, pl=PLContext(maps, None))


def default_refine_iters(iters: int) -> int:
    return max(1, iters // 4)


def export_pseudo_labels(maps, directory, domain_id: str, head_id: str, keep_fraction: float) -> Path:
    """Write ``MTLBL1`` files plus a ``pseudo_labels.json`` sidecar."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, m in enumerate(maps):
        name = f"pl_{i:05d}.lbl"
        synth.write_labels(d / name, m)
        names.append(name)
    sidecar = {
        "domain_id": domain_id,
        "head_id": head_id,
        "keep_fraction": keep_fraction,
        "files": names,
        "selected_fraction": float(np.mean(np.asarray(maps) != IGNORE)),
    }
    (d / "pseudo_labels.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return d


def import_pseudo_labels(directory):
    d = Path(directory)
    meta = json.loads((d / "pseudo_labels.json").read_text())
    return np.stack([synth.read_labels(d / n) for n in meta["files"]]), meta
