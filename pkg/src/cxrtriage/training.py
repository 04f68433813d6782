"""Losses, Adam, plateau scheduling and the single/two-phase training loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dataio import NORMAL, PATHOLOGIES, ClassStats, SampleRecord, compute_class_stats
from .evaluation import UndefinedAUC, auc_trapezoid, macro_auc
from .networks import MULTIPATH_HEAD, ModelBundle, bundle_from_parts, read_container, save_bundle
from .preprocess import AugmentConfig, augment, decode_image, prepare
from .tensor import NumericError, Tape, gradients, load_state_dict, param_refs, state_dict

log = logging.getLogger(__name__)

CLAMP = 1e-7


# ---------------------------------------------------------------------------
# losses


@dataclass
class WeightedLossConfig:
    w_p: np.ndarray
    w_n: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"w_p": self.w_p.tolist(), "w_n": self.w_n.tolist(), "class_names": self.class_names}


def compute_weights(stats: ClassStats) -> WeightedLossConfig:
    """w_p = freq_n and w_n = freq_p, so w_p * freq_p == w_n * freq_n per class."""
    freq_p = stats.freq_p
    w_p, w_n = 1.0 - freq_p, freq_p.copy()
    for c, name in enumerate(stats.class_names):
        if stats.positives[c] == 0:
            log.warning("class %s has no positives; using w_p=1, w_n=0", name)
            w_p[c], w_n[c] = 1.0, 0.0
    return WeightedLossConfig(w_p, w_n, list(stats.class_names))


def _check_shapes(scores, labels):
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")


def weighted_bce(scores, labels, weights: WeightedLossConfig, return_grad: bool = False):
    """-mean(w_p*y*log f + w_n*(1-y)*log(1-f)) with f clamped to [1e-7, 1-1e-7]."""
    f = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    _check_shapes(f, y)
    fc = np.clip(f, CLAMP, 1.0 - CLAMP)
    w_p, w_n = weights.w_p[None, :], weights.w_n[None, :]
    loss = -np.mean(w_p * y * np.log(fc) + w_n * (1 - y) * np.log1p(-fc))
    if not return_grad:
        return float(loss)
    inside = (f > CLAMP) & (f < 1.0 - CLAMP)
    grad = -(w_p * y / fc - w_n * (1 - y) / (1 - fc)) * inside / f.size
    return float(loss), grad


def loss_contributions(scores, labels, weights: WeightedLossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-class summed positive-term and negative-term losses."""
    f = np.clip(np.asarray(scores, dtype=np.float64), CLAMP, 1.0 - CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    pos = -(weights.w_p * y * np.log(f)).sum(axis=0)
    neg = -(weights.w_n * (1 - y) * np.log1p(-f)).sum(axis=0)
    return pos, neg


def categorical_ce(probs, onehot, class_weights=None, return_grad: bool = False):
    """-mean log p(true class); the gradient is with respect to ``probs``."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    _check_shapes(p, y)
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot rows")
    w = np.ones(p.shape[1]) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    pc = np.clip(p, CLAMP, 1.0)
    row_w = y @ w
    loss = -np.mean(row_w * np.log(np.sum(pc * y, axis=1)))
    if not return_grad:
        return float(loss)
    grad = -(y * w[None, :] / pc) * (p > CLAMP) / p.shape[0]
    return float(loss), grad


# ---------------------------------------------------------------------------
# optimizer and scheduler


class Adam:
    """Adam with bias correction; step counts are kept per parameter so arrays
    that start training late (after unfreezing) get a correct first step."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, refs, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        bad = {k: int(np.count_nonzero(~np.isfinite(g))) for k, g in grads.items() if not np.all(np.isfinite(g))}
        if bad:
            raise NumericError(f"non-finite gradients (name: count) {bad}")
        for ref in refs:
            g = grads.get(ref.name)
            if g is None or not ref.layer.trainable:
                continue
            p = ref.value
            g = g.astype(p.dtype, copy=False)
            if ref.name not in self.m:
                self.m[ref.name] = np.zeros_like(p)
                self.v[ref.name] = np.zeros_like(p)
                self.t[ref.name] = 0
            m, v = self.m[ref.name], self.v[ref.name]
            t = self.t[ref.name] = self.t[ref.name] + 1
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            mhat = m / p.dtype.type(1 - self.beta1 ** t)
            vhat = v / p.dtype.type(1 - self.beta2 ** t)
            p -= p.dtype.type(lr) * mhat / (np.sqrt(vhat) + p.dtype.type(self.eps))


class PlateauScheduler:
    """Multiply lr by ``factor`` once the monitored loss fails to improve by more
    than ``min_delta`` for ``patience`` consecutive epochs; never below ``min_lr``."""

    def __init__(self, lr: float = 1e-3, factor: float = 0.1, patience: int = 2,
                 min_delta: float = 1e-4, min_lr: float = 1e-5):
        self.lr, self.factor, self.patience = lr, factor, patience
        self.min_delta, self.min_lr = min_delta, min_lr
        self.best = math.inf
        self.wait = 0

    def step(self, loss: float) -> float:
        if loss < self.best - self.min_delta:
            self.best, self.wait = loss, 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best if math.isfinite(self.best) else None, "wait": self.wait}

    def load(self, s: dict) -> None:
        self.lr, self.wait = s["lr"], s["wait"]
        self.best = math.inf if s["best"] is None else s["best"]


# ---------------------------------------------------------------------------
# configuration and data


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 0.1
    plateau_patience: int = 2
    plateau_min_delta: float = 1e-4
    min_lr: float = 1e-5
    epochs: int = 20
    phase1_epochs: int = 15
    phase2_epochs: int = 15
    phase1_step_fraction: float = 0.5
    batch_size: int = 16
    seed: int = 0
    threshold: float = 0.5
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if not self.lr0 > self.min_lr > 0:
            raise ValueError("need lr0 > min_lr > 0")
        if min(self.epochs, self.phase1_epochs, self.phase2_epochs, self.batch_size) < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 < self.phase1_step_fraction <= 1:
            raise ValueError("phase1_step_fraction must be in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class ArrayDataset:
    """Records with their deterministic preprocessing applied once and cached.

    Images are stored as 2-D float32 arrays in [0, 1]; batches replicate
    them to three channels after optional augmentation.
    """

    def __init__(self, records: list[SampleRecord], root: str | Path, preprocessing, target: str):
        if target not in ("triage", "pathology"):
            raise ValueError(f"unknown target {target!r}")
        self.records = list(records)
        self.target = target
        self.images = np.stack([prepare(decode_image(Path(root) / r.image_path), preprocessing).astype(np.float32)
                                for r in self.records]) if self.records else np.zeros((0, 1, 1), np.float32)
        labels = np.stack([r.labels for r in self.records]) if self.records else np.zeros((0, 9), np.int8)
        if target == "triage":
            abnormal = labels[:, :NORMAL].any(axis=1)
            self.labels = np.stack([~abnormal, abnormal], axis=1).astype(np.float64)
        else:
            self.labels = labels[:, :NORMAL].astype(np.float64)

    def __len__(self) -> int:
        return len(self.records)

    def batch(self, idx, rng: np.random.Generator | None = None, aug: AugmentConfig | None = None):
        imgs = []
        for i in idx:
            img = self.images[i]
            if rng is not None and aug is not None and aug.enabled:
                img = augment(img, aug, rng)[0]
            imgs.append(img)
        x = np.repeat(np.stack(imgs)[:, None], 3, axis=1).astype(np.float32, copy=False)
        return x, self.labels[np.asarray(idx, dtype=np.int64)]


def split_records(records, split: str) -> list[SampleRecord]:
    return [r for r in records if r.split == split]


def pathology_stats(records) -> ClassStats:
    return compute_class_stats(records, PATHOLOGIES)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class Phase:
    name: str
    epochs: int
    step_fraction: float
    extractor_trainable: bool
    fresh_optimizer: bool = False  # restart Adam and the plateau schedule at lr0


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list[dict]
    best_val_loss: float
    best_state: dict[str, np.ndarray]


HISTORY_FIELDS = ("epoch", "phase", "lr", "train_loss", "val_loss", "val_auc_macro")


def write_history(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, HISTORY_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(history)


class Trainer:
    """Runs a list of phases with one optimizer and scheduler, checkpointing
    after every epoch so that a resumed run follows the identical trajectory."""

    CHECKPOINT = "checkpoint.cxr"

    def __init__(self, bundle: ModelBundle, train: ArrayDataset, val: ArrayDataset, cfg: TrainConfig,
                 weights: WeightedLossConfig | None = None, checkpoint_dir: str | Path | None = None,
                 on_epoch_end: Callable[[dict], None] | None = None,
                 on_phase_end: Callable[[str, ModelBundle], None] | None = None):
        if len(train) == 0 or len(val) == 0:
            raise ValueError("train and validation splits must be non-empty")
        self.bundle, self.train, self.val, self.cfg = bundle, train, val, cfg
        self.multilabel = bundle.spec.head == MULTIPATH_HEAD
        if self.multilabel and weights is None:
            raise ValueError("the multi-label head needs class weights")
        self.weights = weights
        self.ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.on_epoch_end, self.on_phase_end = on_epoch_end, on_phase_end
        self._fresh_optimizer()
        self.rng = np.random.default_rng(cfg.seed)
        self.history: list[dict] = []
        self.best_val_loss = math.inf
        self.best_state: dict[str, np.ndarray] = {}
        self.position = (0, 0)  # (phase index, epochs completed in that phase)

    # loss on the network output
    def _loss(self, out, y, grad: bool):
        if self.multilabel:
            return weighted_bce(out, y, self.weights, return_grad=grad)
        return categorical_ce(out, y, return_grad=grad)

    def _set_phase(self, phase: Phase) -> None:
        self.bundle.graph.set_trainable(True)
        self.bundle.extractor.set_trainable(phase.extractor_trainable)

    def train_epoch(self, phase: Phase) -> float:
        graph = self.bundle.graph
        n, bs = len(self.train), self.cfg.batch_size
        steps = math.ceil(n / bs)
        steps = max(1, math.ceil(steps * phase.step_fraction))
        order = self.rng.permutation(n)
        refs = param_refs(graph)
        total, count = 0.0, 0
        for s in range(steps):
            idx = order[s * bs:(s + 1) * bs]
            if idx.size == 0:
                break
            x, y = self.train.batch(idx, self.rng, self.cfg.augment)
            tape = Tape(train=True, rng=self.rng)
            out = graph.forward(x, tape)
            loss, g = self._loss(out, y, True)
            if not np.isfinite(loss):
                self.save_checkpoint()
                raise NumericError(f"non-finite training loss in {phase.name}, step {s}")
            graph.backward(g.astype(out.dtype), tape, need_input_grad=False)
            self.adam.step(refs, gradients(graph, tape), self.sched.lr)
            total += loss * idx.size
            count += idx.size
        return total / count

    def predict(self, data: ArrayDataset, batch_size: int | None = None) -> np.ndarray:
        bs = batch_size or self.cfg.batch_size
        outs = [self.bundle.graph.forward(data.batch(np.arange(i, min(i + bs, len(data))))[0])
                for i in range(0, len(data), bs)]
        return np.concatenate(outs).astype(np.float64)

    def validate(self) -> tuple[float, float]:
        out = self.predict(self.val)
        loss = self._loss(out, self.val.labels, False)
        if self.multilabel:
            auc = macro_auc(out, self.val.labels)
        else:
            try:
                auc = auc_trapezoid(out[:, 1], self.val.labels[:, 1])
            except UndefinedAUC:
                auc = float("nan")
        return loss, auc

    def run(self, phases: list[Phase]) -> TrainResult:
        start_phase, start_epoch = self.position
        epoch_no = len(self.history)
        for pi in range(start_phase, len(phases)):
            phase = phases[pi]
            self._set_phase(phase)
            first = start_epoch if pi == start_phase else 0
            if phase.fresh_optimizer and first == 0:
                self._fresh_optimizer()
            for e in range(first, phase.epochs):
                lr = self.sched.lr
                train_loss = self.train_epoch(phase)
                val_loss, val_auc = self.validate()
                epoch_no += 1
                rec = {"epoch": epoch_no, "phase": phase.name, "lr": lr, "train_loss": train_loss,
                       "val_loss": val_loss, "val_auc_macro": val_auc}
                self.history.append(rec)
                log.info("epoch %d %s lr=%.1e train=%.4f val=%.4f auc=%.4f", epoch_no, phase.name, lr,
                         train_loss, val_loss, val_auc)
                if val_loss < self.best_val_loss:
                    self.best_val_loss = val_loss
                    self.best_state = {k: v.copy() for k, v in state_dict(self.bundle.graph).items()}
                self.sched.step(val_loss)
                self.position = (pi, e + 1) if e + 1 < phase.epochs else (pi + 1, 0)
                self.save_checkpoint()
                if self.on_epoch_end:
                    self.on_epoch_end(rec)
            if self.on_phase_end:
                self.on_phase_end(phase.name, self.bundle)
        self.bundle.graph.set_trainable(True)
        self.bundle.threshold = self.cfg.threshold
        if self.ckpt_dir:
            write_history(self.history, self.ckpt_dir / "history.csv")
            best = ModelBundle(self.bundle.spec, self.bundle.spec.build(), self.bundle.preprocessing,
                               self.bundle.threshold)
            load_state_dict(best.graph, self.best_state)
            save_bundle(best, self.ckpt_dir / "best.cxr")
        return TrainResult(self.bundle, self.history, self.best_val_loss, self.best_state)

    def _fresh_optimizer(self) -> None:
        cfg = self.cfg
        self.adam = Adam(cfg.lr0, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.sched = PlateauScheduler(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience,
                                      cfg.plateau_min_delta, cfg.min_lr)

    # -- checkpointing ----------------------------------------------------
    def save_checkpoint(self) -> None:
        if not self.ckpt_dir:
            return
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        state = {"position": list(self.position), "history": self.history,
                 "best_val_loss": None if math.isinf(self.best_val_loss) else self.best_val_loss,
                 "scheduler": self.sched.state(), "adam_t": self.adam.t,
                 "rng": self.rng.bit_generator.state, "train_config": self.cfg.to_dict()}
        arrays = [(f"adam_m:{k}", v) for k, v in self.adam.m.items()]
        arrays += [(f"adam_v:{k}", v) for k, v in self.adam.v.items()]
        arrays += [(f"best:{k}", v) for k, v in self.best_state.items()]
        save_bundle(self.bundle, self.ckpt_dir / self.CHECKPOINT, {"checkpoint": state}, arrays)

    def load_checkpoint(self) -> bool:
        path = self.ckpt_dir / self.CHECKPOINT if self.ckpt_dir else None
        if path is None or not path.exists():
            return False
        header, arrays = read_container(path)
        restored = bundle_from_parts(header, arrays)
        load_state_dict(self.bundle.graph, state_dict(restored.graph))
        st = header["checkpoint"]
        self.position = tuple(st["position"])
        self.history = st["history"]
        self.best_val_loss = math.inf if st["best_val_loss"] is None else st["best_val_loss"]
        self.sched.load(st["scheduler"])
        self.adam.t = {k: int(v) for k, v in st["adam_t"].items()}
        self.adam.m = {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam_m:")}
        self.adam.v = {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam_v:")}
        self.best_state = {k[5:]: v.copy() for k, v in arrays.items() if k.startswith("best:")}
        self.rng.bit_generator.state = st["rng"]
        log.info("resumed from %s at phase %d epoch %d", path, *self.position)
        return True


def single_phase(cfg: TrainConfig) -> list[Phase]:
    return [Phase("single", cfg.epochs, 1.0, True)]


def two_phases(cfg: TrainConfig) -> list[Phase]:
    return [Phase("phase1", cfg.phase1_epochs, cfg.phase1_step_fraction, False),
            Phase("phase2", cfg.phase2_epochs, 1.0, True, fresh_optimizer=True)]


def train_single_phase(bundle: ModelBundle, train: ArrayDataset, val: ArrayDataset, cfg: TrainConfig,
                       weights: WeightedLossConfig | None = None, checkpoint_dir=None, resume: bool = False,
                       **callbacks) -> TrainResult:
    trainer = Trainer(bundle, train, val, cfg, weights, checkpoint_dir, **callbacks)
    if resume:
        trainer.load_checkpoint()
    return trainer.run(single_phase(cfg))


def train_two_phase(bundle: ModelBundle, train: ArrayDataset, val: ArrayDataset, cfg: TrainConfig,
                    weights: WeightedLossConfig | None = None, checkpoint_dir=None, resume: bool = False,
                    **callbacks) -> TrainResult:
    """Phase 1 trains the head on a frozen extractor at a fraction of the steps
    per epoch; phase 2 unfreezes every layer and restarts Adam and the plateau
    schedule at ``lr0``, as a recompile would."""
    frozen = [r for r in param_refs(bundle.extractor) if not r.layer.trainable]
    if not frozen:
        raise ValueError("train_two_phase expects a transplanted, frozen extractor")
    trainer = Trainer(bundle, train, val, cfg, weights, checkpoint_dir, **callbacks)
    if resume:
        trainer.load_checkpoint()
    return trainer.run(two_phases(cfg))


def label_matrix(records, target: str) -> np.ndarray:
    labels = np.stack([r.labels for r in records])
    if target == "triage":
        return labels[:, :NORMAL].any(axis=1).astype(np.int8)
    return labels[:, :NORMAL]

