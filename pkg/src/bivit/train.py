"""Teacher pre-training, teacher-initialised student training and evaluation.

Desk-scale defaults (8x8 digits, patch 2, dim 64, depth 4, 4 heads, 20
epochs, batch 64, Adam at 1e-3 with cosine decay). The reference ImageNet
recipe is 300 epochs, batch 512, base lr 5e-4, LAMB, weight decay 0 and no
warm-up; only "weight decay 0" and "no warm-up" carry over here.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import ARCH_HEADER, Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, batches
from .distill import RANKING_STAGES, TeacherBundle, cross_entropy, dist_loss, ranking_loss, total_loss
from .layers import ATTN_BINARIZERS, PrecisionConfig, TinyViT, ViTArch, ste_grad_fraction

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 1e-3
    lam: float = 10.0
    temperature: float = 1.0
    seed: int = 0
    optimizer: str = "adam"
    weight_decay: float = 0.0
    mhsa: str = "w1a1"
    mlp: str = "w1a1"
    ranking_stage: str = "pre_softmax"
    attn_binarizer: str = "threshold_01"
    lsf: bool = True
    grad_clip: float = 5.0
    teacher_epochs: int = 20
    teacher_lr: float = 1e-3
    arch: ViTArch = field(default_factory=ViTArch)

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.base_lr <= 0:
            raise ValueError("epochs, batch_size and base_lr must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.ranking_stage not in RANKING_STAGES:
            raise ValueError(f"ranking_stage must be one of {RANKING_STAGES}")
        if self.attn_binarizer not in ATTN_BINARIZERS:
            raise ValueError(f"attn_binarizer must be one of {ATTN_BINARIZERS}")
        self.precision  # validates the labels

    @property
    def precision(self) -> PrecisionConfig:
        return PrecisionConfig.from_labels(self.mhsa, self.mlp)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.describe()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("arch"), str):
            d["arch"] = ViTArch.parse(d["arch"])
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- optimisers ------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            if self.wd:
                g = g + self.wd * p.data
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        out["t"] = np.array(float(self.t))
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = state[f"m/{k}"].copy()
            self.v[k] = state[f"v/{k}"].copy()


class SGD:
    def __init__(self, params: dict, lr=1e-2, momentum=0.9, weight_decay=0.0):
        self.params, self.lr, self.mom, self.wd = params, lr, momentum, weight_decay
        self.buf = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads, lr):
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            if self.wd:
                g = g + self.wd * p.data
            self.buf[k] = self.mom * self.buf[k] + g
            p.data -= lr * self.buf[k]

    def state(self):
        return {f"buf/{k}": v for k, v in self.buf.items()}

    def load_state(self, state):
        for k in self.params:
            self.buf[k] = state[f"buf/{k}"].copy()


def make_optimizer(name: str, params: dict, lr: float, weight_decay: float):
    if name == "adam":
        return Adam(params, lr, weight_decay=weight_decay)
    return SGD(params, lr, weight_decay=weight_decay)


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / max(total, 1)))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def _project_scales(model: TinyViT) -> None:
    # keep head-wise and channel-wise scales strictly positive after updates
    for blk in model.blocks:
        for lin in blk.linears():
            np.maximum(lin.alpha.data, 1e-4, out=lin.alpha.data)
        a = blk.attn
        for t in (a.alpha_q, a.alpha_k, a.alpha_v, a.alpha_A):
            np.maximum(t.data, 1e-4, out=t.data)
        np.clip(a.tau_A.data, 1e-4, 1.0, out=a.tau_A.data)


# -- model plumbing ------------------------------------------------------------------


def arch_block(model: TinyViT) -> str:
    p = model.precision
    return "\n".join([
        ARCH_HEADER,
        model.arch.describe(),
        f"precision={p.mhsa_weights},{p.mhsa_acts},{p.mlp_weights},{p.mlp_acts},{p.attention_acts}",
        f"attn_binarizer={model.attn_binarizer}",
        f"learnable_scales={int(model.learnable_scales)}",
    ])


def model_from_arch_block(text: str) -> TinyViT:
    lines = text.splitlines()
    if not lines or lines[0] != ARCH_HEADER:
        raise ValueError("not an architecture block")
    arch = ViTArch.parse(lines[1])
    kv = dict(line.split("=", 1) for line in lines[2:])
    bits = [int(b) for b in kv["precision"].split(",")]
    return TinyViT(arch, PrecisionConfig(*bits), attn_binarizer=kv["attn_binarizer"],
                   learnable_scales=bool(int(kv["learnable_scales"])))


def state_dict(model: TinyViT) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in model.all_tensors().items()}


def load_state_dict(model: TinyViT, state: dict[str, np.ndarray]) -> None:
    tensors = model.all_tensors()
    missing = set(tensors) - set(state)
    if missing:
        raise KeyError(f"state is missing {sorted(missing)[:5]}")
    for k, t in tensors.items():
        if state[k].shape != t.shape:
            raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
        t.data[...] = state[k]


def save_model(path, model: TinyViT, meta: dict | None = None) -> None:
    save_checkpoint(path, Checkpoint(arch_block(model), state_dict(model), meta=meta or {}))


def load_model(path) -> TinyViT:
    ck = load_checkpoint(path)
    model = model_from_arch_block(ck.arch)
    load_state_dict(model, ck.tensors)
    return model


# -- evaluation ------------------------------------------------------------------------


def predict(model: TinyViT, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        logits, _ = model(x[i : i + batch_size])
        out.append(logits.data.argmax(axis=-1))
    return np.concatenate(out)


def evaluate(model: TinyViT, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Top-1 accuracy in [0, 1]. Runs without a tape, so parameters are untouched."""
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float((predict(model, x, batch_size) == np.asarray(y)).mean())


# -- teacher ------------------------------------------------------------------------------


def train_teacher(cfg: TrainConfig, data: Dataset) -> tuple[TinyViT, float]:
    """Train a real-valued TinyViT with cross-entropy; returns (model, val acc)."""
    model = TinyViT(cfg.arch, PrecisionConfig.full(), seed=cfg.seed)
    params = model.trainable()
    opt = make_optimizer(cfg.optimizer, params, cfg.teacher_lr, cfg.weight_decay)
    n = len(data.x_train)
    total = cfg.teacher_epochs * math.ceil(n / cfg.batch_size)
    step = 0
    for epoch in range(cfg.teacher_epochs):
        for idx in batches(n, cfg.batch_size, cfg.seed, epoch):
            with ad.Tape() as tape:
                logits, _ = model(data.x_train[idx])
                loss = cross_entropy(logits, data.y_train[idx])
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"teacher loss diverged at step {step}")
            grads = {k: g for k, g in ((t.name, g) for t, g in ad.backward(tape, loss).items())}
            clip_global_norm(grads, cfg.grad_clip)
            opt.step(grads, cosine_lr(cfg.teacher_lr, step, total))
            step += 1
    acc = evaluate(model, data.x_val, data.y_val)
    log.info("teacher val acc %.4f", acc)
    model.freeze()
    return model, acc


# -- student -------------------------------------------------------------------------------


def init_student_from_teacher(teacher: TinyViT, cfg: TrainConfig, calib_images: np.ndarray) -> TinyViT:
    """Copy the teacher's latent weights into a binarized student and calibrate its scales."""
    if teacher.arch != cfg.arch:
        raise ValueError(f"architecture mismatch: teacher {teacher.arch} vs config {cfg.arch}")
    student = TinyViT(cfg.arch, cfg.precision, attn_binarizer=cfg.attn_binarizer,
                      learnable_scales=cfg.lsf, seed=cfg.seed)
    src = teacher.parameters()
    for name, t in student.parameters().items():
        if name in src:
            t.data[...] = src[name].data
    student.calibrate(calib_images)
    return student


METRIC_FIELDS = ("step", "epoch", "l_dist", "l_ranking", "total", "lr")


def _metric_row(step, epoch, report, lr, fractions) -> dict:
    row = {"step": step, "epoch": epoch, "l_dist": float(report.l_dist),
           "l_ranking": float(report.l_ranking), "total": float(report.total), "lr": float(lr)}
    for i, rec in enumerate(fractions):
        vals = [v.mean() for v in rec.values()]
        row[f"ste_zero_frac_b{i}"] = float(np.mean(vals)) if vals else 0.0
    return row


def write_metrics(path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as f:
        # fixed column order, whatever order the row dicts carry (resumed rows come from JSON)
        blocks = sorted(int(k.rsplit("_b", 1)[1]) for k in rows[0] if k not in METRIC_FIELDS)
        extra = [f"ste_zero_frac_b{i}" for i in blocks]
        w = csv.DictWriter(f, fieldnames=list(METRIC_FIELDS) + extra)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})


def train_student(cfg: TrainConfig, teacher: TeacherBundle, data: Dataset, *,
                  student: TinyViT | None = None, ckpt_dir=None, resume=None,
                  stop_after_epoch: int | None = None) -> tuple[TinyViT, list[dict]]:
    """Optimise ``l_dist + lam * l_ranking`` over latent weights and scales.

    ``teacher`` must hold precomputed outputs for ``data.x_train`` (indexed
    by sample). Checkpoints are written per epoch to ``ckpt_dir``;
    ``resume`` continues from such a checkpoint.
    """
    n = len(data.x_train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    rows: list[dict] = []
    start_epoch, step = 0, 0
    if resume is not None:
        ck = load_checkpoint(resume)
        student = model_from_arch_block(ck.arch)
        load_state_dict(student, ck.tensors)
        start_epoch, step = ck.epoch, ck.step
        rows = ck.meta.get("metrics", [])
    elif student is None:
        first = next(batches(n, cfg.batch_size, cfg.seed, 0))
        student = init_student_from_teacher(teacher.model, cfg, data.x_train[first])
    params = student.trainable()
    opt = make_optimizer(cfg.optimizer, params, cfg.base_lr, cfg.weight_decay)
    if resume is not None:
        opt.load_state(ck.optimizer)
    for epoch in range(start_epoch, cfg.epochs):
        for idx in batches(n, cfg.batch_size, cfg.seed, epoch):
            t_logits, t_maps = teacher.lookup(idx)
            with ad.Tape() as tape:
                logits, recs = student(data.x_train[idx])
                l_dist = dist_loss(logits, t_logits, data.y_train[idx], cfg.temperature)
                s_maps = [r.scores if cfg.ranking_stage == "pre_softmax" else r.attn for r in recs]
                l_rank = ranking_loss(t_maps, s_maps)
                loss, report = total_loss(l_dist, l_rank, cfg.lam)
            if not math.isfinite(report.total):
                raise DivergenceError(f"student loss diverged at step {step}")
            grads = {t.name: g for t, g in ad.backward(tape, loss).items()}
            fractions = ste_grad_fraction(student)
            clip_global_norm(grads, cfg.grad_clip)
            lr = cosine_lr(cfg.base_lr, step, total)
            opt.step(grads, lr)
            _project_scales(student)
            rows.append(_metric_row(step, epoch, report, lr, fractions))
            step += 1
        if ckpt_dir is not None:
            Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(
                Path(ckpt_dir) / f"epoch{epoch + 1:03d}.ckpt",
                Checkpoint(arch_block(student), state_dict(student), opt.state(), epoch + 1, step,
                           {"order": "epoch_order(seed, epoch)", "seed": cfg.seed},
                           {"config": cfg.to_dict(), "metrics": rows}),
            )
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            break
    return student, rows
