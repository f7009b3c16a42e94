"""Training procedures: single-target, merged multi-target baseline, Multi-Dis., MTKT.

Every iteration alternates a segmenter step (discriminators frozen) with a
discriminator step (segmenter outputs detached), one update each. Source
batches are drawn with the state's RNG; target batches are read
sequentially from each target set with a wrap-around cursor, so a merged
target set (round-robin interleaved) yields batches that alternate domains.

All randomness derives from ``TrainConfig.seed``; given the same config and
data, every iteration is bitwise reproducible, including across a
checkpoint/resume boundary.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from mtuda import checkpoint, nets
from mtuda import tensor as tc
from mtuda.errors import ConfigurationError, ContractError
from mtuda.losses import (
    AdvWeights,
    EmptySelectionWarning,
    Representation,
    adv_fool_loss,
    disc_loss_single,
    frozen,
    mtkt_agnostic_loss,
    multidis_disc_losses,
    multidis_total_segmenter_loss,
    represent,
    seg_loss,
    single_target_segmenter_loss,
)
from mtuda.optim import SGD, Adam
from mtuda.synth import DomainDataset, merge_datasets
from mtuda.tensor import IGNORE, Tensor


class Method(enum.Enum):
    SINGLE_TARGET = "SingleTarget"
    MULTI_TARGET_BASELINE = "MultiTargetBaseline"
    MULTIDIS = "MultiDis"
    MTKT = "MTKT"
    SOURCE_ONLY = "SourceOnly"  # no-adaptation control

    @classmethod
    def parse(cls, text):
        for m in cls:
            if text in (m.value, m.name):
                return m
        raise ConfigurationError(f"unknown method {text!r}; choose from {[m.value for m in cls]}")


@dataclass
class TrainConfig:
    method: Method = Method.MULTIDIS
    representation: Representation = Representation.SELF_INFORMATION
    weights: AdvWeights = field(default_factory=AdvWeights)
    iters: int = 3000
    warmup_iters: int = 500
    batch_size: int = 4
    seg_lr: float = 2.5e-4
    seg_momentum: float = 0.9
    seg_weight_decay: float = 1e-4
    disc_lr: float = 1e-4
    seed: int = 0
    T: int = 2
    num_classes: int = nets.NUM_CLASSES
    kl_weight: float = 1.0  # multiplier on the agnostic distillation loss
    agn_adversarial: bool = False
    agn_source_ce: bool = False
    seg_arch: dict = field(default_factory=dict)
    disc_arch: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.method, str):
            self.method = Method.parse(self.method)
        if isinstance(self.representation, str):
            self.representation = Representation.parse(self.representation)
        if isinstance(self.weights, dict):
            self.weights = AdvWeights(**self.weights)
        self.validate()

    def validate(self):
        if self.iters < 0 or self.batch_size < 1 or self.T < 1:
            raise ConfigurationError("iters >= 0, batch_size >= 1 and T >= 1 required")
        if self.method is Method.MTKT and not 0 <= self.warmup_iters < max(self.iters, 1):
            raise ConfigurationError(f"warmup_iters ({self.warmup_iters}) must be below iters ({self.iters})")
        if self.method is Method.SINGLE_TARGET and self.T != 1:
            raise ConfigurationError(f"SingleTarget trains on exactly one target, got T={self.T}")
        if self.method is Method.MULTIDIS and self.T < 2:
            raise ConfigurationError("MultiDis needs T >= 2")
        if self.kl_weight < 0:
            raise ConfigurationError("kl_weight must be non-negative")
        if min(self.seg_lr, self.disc_lr) <= 0:
            raise ConfigurationError("learning rates must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["method"] = self.method.value
        d["representation"] = self.representation.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def segmenter_arch(self):
        heads = nets.mtkt_heads(self.T) if self.method is Method.MTKT else ["main"]
        return nets.segmenter_arch(self.num_classes, heads, **self.seg_arch)

    def discriminator_arch(self):
        return nets.discriminator_arch(self.num_classes, **self.disc_arch)

    @property
    def deploy_head(self):
        return "agn" if self.method is Method.MTKT else "main"


def derive_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([int(seed), *parts]).generate_state(1, np.uint64)[0])


@dataclass
class TrainState:
    cfg: TrainConfig
    segmenter: nets.SegmenterParams
    bank: nets.DiscriminatorBank
    seg_opt: SGD
    disc_opt: Adam
    rng: np.random.Generator
    iteration: int = 0
    cursors: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)
    hook: object = None  # transient instrumentation callback, never saved

    def log(self, name, value):
        self.history.setdefault(name, []).append(float(value))

    def emit(self, event, **info):
        if self.hook is not None:
            self.hook(event, state=self, **info)


def _n_disc(cfg):
    if cfg.method is Method.SOURCE_ONLY:
        return 0, 0
    if cfg.method in (Method.SINGLE_TARGET, Method.MULTI_TARGET_BASELINE):
        return 1, 0
    if cfg.method is Method.MULTIDIS:
        return cfg.T, cfg.T
    return cfg.T, 0


def init_state(cfg: TrainConfig) -> TrainState:
    seg = nets.init_params(cfg.segmenter_arch(), cfg.seed)
    n_st, n_tt = _n_disc(cfg)
    darch = cfg.discriminator_arch()
    bank = nets.DiscriminatorBank(
        {n: nets.init_params(darch, derive_seed(cfg.seed, 1, n)) for n in range(1, n_st + 1)},
        {n: nets.init_params(darch, derive_seed(cfg.seed, 2, n)) for n in range(1, n_tt + 1)},
    )
    return TrainState(
        cfg=cfg,
        segmenter=seg,
        bank=bank,
        seg_opt=SGD(seg.parameters(), cfg.seg_lr, cfg.seg_momentum, cfg.seg_weight_decay),
        disc_opt=Adam(bank.parameters(), cfg.disc_lr),
        rng=np.random.default_rng(derive_seed(cfg.seed, 3)),
    )


# --------------------------------------------------------------------------
# batches


def _source_batch(state, source):
    idx = state.rng.integers(0, len(source), size=state.cfg.batch_size)
    return Tensor(source.images(idx)), source.labels(idx)


def _target_batch(state, n, ds):
    c = state.cursors.get(n, 0)
    idx = [(c + k) % len(ds) for k in range(state.cfg.batch_size)]
    state.cursors[n] = (c + state.cfg.batch_size) % len(ds)
    return Tensor(ds.images(idx)), idx


def _zero_all(state):
    for p in state.segmenter.parameters():
        p.grad = None
    for p in state.bank.parameters():
        p.grad = None


def _seg_update(state, loss):
    _zero_all(state)
    loss.backward()
    state.emit("after_seg_backward")
    state.seg_opt.step()


def _disc_update(state, loss, n_updates):
    _zero_all(state)
    loss.backward()
    state.emit("after_disc_backward", n_updates=n_updates)
    state.disc_opt.step()


def _check_data(source, targets):
    if not source.labeled:
        raise ContractError("source dataset must be labeled")
    if len(source) == 0 or any(len(t) == 0 for t in targets):
        raise ContractError("empty dataset")
    for t in targets:
        if t.labeled:
            raise ContractError(f"target {t.domain_id!r} must be unlabeled")


# --------------------------------------------------------------------------
# one iteration per method


def _iter_source_only(state, source, targets, pl=None):
    xs, ys = _source_batch(state, source)
    ps = nets.segmenter_forward(state.segmenter, xs, "main").probs
    loss = seg_loss(ps, ys)
    _seg_update(state, loss)
    state.log("seg", loss.item())


def _iter_single(state, source, targets, pl=None):
    cfg = state.cfg
    (target,) = targets
    d = state.bank.source_target[1]
    xs, ys = _source_batch(state, source)
    xt, tidx = _target_batch(state, 0, target)
    ps = nets.segmenter_forward(state.segmenter, xs, "main").probs
    pt = nets.segmenter_forward(state.segmenter, xt, "main").probs
    qs, qt = represent(ps, cfg.representation), represent(pt, cfg.representation)
    with frozen(d.parameters()):
        loss, parts = single_target_segmenter_loss(ps, ys, qt, d, cfg.weights.lambda_adv)
        if pl is not None:
            l_pl = seg_loss(pt, pl.labels(0, tidx), warn=False)
            state.emit("pl_term", loss=l_pl, head="main", kind="ce")
            loss = loss + l_pl
            state.log("pl_ce", l_pl.item())
        _seg_update(state, loss)
    l_d = disc_loss_single(d, qs.detach(), qt.detach())
    _disc_update(state, l_d, 1)
    state.log("seg", parts["seg"].item())
    state.log("adv", parts["adv"].item())
    state.log("disc", l_d.item())


def _iter_multidis(state, source, targets, pl=None):
    cfg = state.cfg
    xs, ys = _source_batch(state, source)
    batches = [_target_batch(state, n, t) for n, t in enumerate(targets)]
    ps = nets.segmenter_forward(state.segmenter, xs, "main").probs
    pts = [nets.segmenter_forward(state.segmenter, xt, "main").probs for xt, _ in batches]
    qs = represent(ps, cfg.representation)
    qts = [represent(p, cfg.representation) for p in pts]
    with frozen(state.bank.parameters()):
        loss, parts = multidis_total_segmenter_loss(ps, ys, qts, state.bank, cfg.weights)
        _seg_update(state, loss)
    hook = None if state.hook is None else (lambda *a: state.emit("tt_batch", info=a))
    dl = multidis_disc_losses(state.bank, qs.detach(), [q.detach() for q in qts], hook=hook)
    _disc_update(state, dl["L_Dst"] + dl["L_Dt"], len(state.bank))
    state.log("seg", parts["seg"].item())
    state.log("adv_s", parts["adv_s"].item())
    state.log("adv_t", parts["adv_t"].item())
    state.log("disc_st", dl["L_Dst"].item())
    state.log("disc_tt", dl["L_Dt"].item())


def _iter_mtkt(state, source, targets, pl=None):
    cfg = state.cfg
    seg, T = state.segmenter, len(targets)
    distill = state.iteration >= cfg.warmup_iters
    xs, ys = _source_batch(state, source)
    batches = [_target_batch(state, n, t) for n, t in enumerate(targets)]
    hw = xs.shape[2:]
    fs = nets.features(seg, xs)
    fts = [nets.features(seg, xt) for xt, _ in batches]
    discs = [state.bank.source_target[n + 1] for n in range(T)]

    loss, q_pairs, teachers = Tensor(0.0), [], {}
    l_seg = l_adv = l_pl = 0.0
    with frozen(state.bank.parameters()):
        for n in range(T):
            head = f"spec_{n + 1}"
            ps = nets.head_forward(seg, fs, head, hw).probs
            pt = nets.head_forward(seg, fts[n], head, hw).probs
            qs, qt = represent(ps, cfg.representation), represent(pt, cfg.representation)
            ce, adv = seg_loss(ps, ys), adv_fool_loss(discs[n], qt)
            loss = loss + ce + adv * cfg.weights.lambda_adv
            state.emit("seg_term", head=head)
            if pl is not None:
                ce_pl = seg_loss(pt, pl.labels(n, batches[n][1]), warn=False)
                state.emit("pl_term", loss=ce_pl, head=head, kind="ce")
                loss = loss + ce_pl
                l_pl += ce_pl.item()
            q_pairs.append((qs, qt))
            teachers[n] = pt.detach()
            l_seg += ce.item()
            l_adv += adv.item()
        if distill:
            students = {n: nets.head_forward(seg, fts[n], "agn", hw).probs for n in range(T)}
            masks = pl.kl_masks(students, batches) if pl is not None else None
            l_agn = mtkt_agnostic_loss(teachers, students, masks)
            if masks is not None:
                state.emit("pl_term", loss=l_agn, head="agn", kind="kl_mask")
            loss = loss + (l_agn * cfg.kl_weight if cfg.kl_weight != 1.0 else l_agn)
            state.emit("seg_term", head="agn")
            if cfg.agn_source_ce:
                loss = loss + seg_loss(nets.head_forward(seg, fs, "agn", hw).probs, ys)
            if cfg.agn_adversarial:
                for n in range(T):
                    q = represent(students[n], cfg.representation)
                    loss = loss + adv_fool_loss(discs[n], q) * (cfg.weights.lambda_adv / T)
            if pl is not None and pl.refine_agnostic:
                for n in range(T):
                    ce_pl = seg_loss(students[n], pl.labels(n, batches[n][1]), warn=False)
                    state.emit("pl_term", loss=ce_pl, head="agn", kind="ce")
                    loss = loss + ce_pl
                    l_pl += ce_pl.item()
            state.log("kl", l_agn.item())
        _seg_update(state, loss)
    l_d = Tensor(0.0)
    for n in range(T):
        qs, qt = q_pairs[n]
        l_d = l_d + disc_loss_single(discs[n], qs.detach(), qt.detach())
    _disc_update(state, l_d, T)
    state.log("seg", l_seg)
    state.log("adv", l_adv)
    state.log("disc", l_d.item())
    if pl is not None:
        state.log("pl_ce", l_pl)


_ITER = {
    Method.SOURCE_ONLY: _iter_source_only,
    Method.SINGLE_TARGET: _iter_single,
    Method.MULTI_TARGET_BASELINE: _iter_single,
    Method.MULTIDIS: _iter_multidis,
    Method.MTKT: _iter_mtkt,
}


def training_targets(cfg: TrainConfig, targets):
    """The target sets the iteration sees (the baseline trains on their merge)."""
    targets = list(targets)
    if cfg.method is Method.MULTI_TARGET_BASELINE:
        return [merge_datasets(targets)]
    if cfg.method is Method.SOURCE_ONLY:
        return []
    return targets


def run(state: TrainState, source: DomainDataset, targets, until: int | None = None, pl=None) -> TrainState:
    """Advance ``state`` to iteration ``until`` (default: ``cfg.iters``)."""
    until = state.cfg.iters if until is None else until
    step = _ITER[state.cfg.method]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptySelectionWarning)
        while state.iteration < until:
            step(state, source, targets, pl)
            state.iteration += 1
            state.emit("iteration_done")
    return state


def _start(cfg, source, targets, expected_T, state, until, hook):
    targets = list(targets)
    if expected_T is not None and len(targets) != expected_T:
        raise ContractError(f"{cfg.method.value} with T={cfg.T} got {len(targets)} target sets")
    _check_data(source, targets)
    state = state or init_state(cfg)
    state.hook = hook
    return state, training_targets(cfg, targets)


def train_source_only(cfg, source, state=None, until=None, hook=None):
    state, _ = _start(cfg, source, [], None, state, until, hook)
    return run(state, source, [], until)


def train_single_target(cfg, source, target, state=None, until=None, hook=None):
    state, tg = _start(cfg, source, [target], 1, state, until, hook)
    return run(state, source, tg, until)


def train_multi_target_baseline(cfg, source, targets, state=None, until=None, hook=None):
    state, tg = _start(cfg, source, targets, cfg.T, state, until, hook)
    return run(state, source, tg, until)


def train_multidis(cfg, source, targets, state=None, until=None, hook=None):
    state, tg = _start(cfg, source, targets, cfg.T, state, until, hook)
    return run(state, source, tg, until)


def train_mtkt(cfg, source, targets, state=None, until=None, hook=None):
    state, tg = _start(cfg, source, targets, cfg.T, state, until, hook)
    return run(state, source, tg, until)


_TRAIN = {
    Method.SOURCE_ONLY: lambda cfg, s, t, **kw: train_source_only(cfg, s, **kw),
    Method.SINGLE_TARGET: lambda cfg, s, t, **kw: train_single_target(cfg, s, *t, **kw),
    Method.MULTI_TARGET_BASELINE: train_multi_target_baseline,
    Method.MULTIDIS: train_multidis,
    Method.MTKT: train_mtkt,
}


def train(cfg: TrainConfig, source, targets, state=None, until=None, hook=None) -> TrainState:
    """Dispatch on ``cfg.method``."""
    targets = list(targets)
    if cfg.method is Method.SINGLE_TARGET and len(targets) != 1:
        raise ContractError(f"SingleTarget needs exactly one target, got {len(targets)}")
    return _TRAIN[cfg.method](cfg, source, targets, state=state, until=until, hook=hook)


# --------------------------------------------------------------------------
# inference


def predict(state: TrainState, image) -> np.ndarray:
    """Label map from the deployment head (``main``, or ``agn`` for MTKT); ties go to the lowest class."""
    x = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    probs = nets.segmenter_forward(state.segmenter, Tensor(x), state.cfg.deploy_head).probs
    labels = nets.predict_labels(probs)
    return labels[0] if single else labels


def head_probs(state: TrainState, images, head_id: str) -> np.ndarray:
    return nets.segmenter_forward(state.segmenter, Tensor(np.asarray(images)), head_id).probs.data


# --------------------------------------------------------------------------
# persistence


def state_records(state: TrainState):
    recs = []
    for name, t in state.segmenter.named_parameters():
        recs.append((f"seg/{name}", t.data))
    for dname, d in state.bank.items():
        for name, t in d.named_parameters():
            recs.append((f"disc/{dname}/{name}", t.data))
    for k, v in state.seg_opt.buffers().items():
        recs.append((f"opt/seg/{k}", v))
    for k, v in state.disc_opt.buffers().items():
        recs.append((f"opt/disc/{k}", v))
    for k, v in sorted(state.history.items()):
        recs.append((f"history/{k}", np.asarray(v, dtype=np.float64)))
    return recs


def state_header(state: TrainState) -> dict:
    return {
        "format": "mtuda-train-state",
        "config": state.cfg.to_dict(),
        "config_hash": state.cfg.config_hash(),
        "segmenter_arch": state.segmenter.arch,
        "discriminator_arch": state.cfg.discriminator_arch(),
        "bank": {"source_target": sorted(state.bank.source_target), "target_target": sorted(state.bank.target_target)},
        "iteration": state.iteration,
        "cursors": {str(k): v for k, v in state.cursors.items()},
        "rng": state.rng.bit_generator.state,
    }


def save_state(path, state: TrainState, extra: dict | None = None):
    header = state_header(state)
    if extra:
        header["extra"] = extra
    checkpoint.save(path, header, state_records(state))


def state_from_records(header: dict, tensors: dict) -> TrainState:
    cfg = TrainConfig.from_dict(header["config"])
    state = init_state(cfg)
    for name, t in state.segmenter.named_parameters():
        t.data[...] = tensors[f"seg/{name}"]
    for dname, d in state.bank.items():
        for name, t in d.named_parameters():
            t.data[...] = tensors[f"disc/{dname}/{name}"]
    state.seg_opt.load_buffers({k[8:]: v for k, v in tensors.items() if k.startswith("opt/seg/")})
    state.disc_opt.load_buffers({k[9:]: v for k, v in tensors.items() if k.startswith("opt/disc/")})
    state.history = {k[8:]: list(v) for k, v in tensors.items() if k.startswith("history/")}
    state.iteration = int(header["iteration"])
    state.cursors = {int(k): int(v) for k, v in header["cursors"].items()}
    state.rng.bit_generator.state = header["rng"]
    return state


def load_state(path) -> TrainState:
    header, tensors = checkpoint.load(path)
    if header.get("format") != "mtuda-train-state":
        raise ContractError(f"{path} is not a training-state checkpoint")
    return state_from_records(header, tensors)


def load_header(path) -> dict:
    return checkpoint.load(path)[0]


__all__ = [
    "AdvWeights",
    "IGNORE",
    "Method",
    "TrainConfig",
    "TrainState",
    "init_state",
    "load_state",
    "predict",
    "run",
    "save_state",
    "train",
    "train_mtkt",
    "train_multi_target_baseline",
    "train_multidis",
    "train_single_target",
    "train_source_only",
]
