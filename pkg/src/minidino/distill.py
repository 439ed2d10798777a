"""Offline distillation of a frozen teacher into a smaller student.

The teacher comes from a checkpoint (logits recomputed on the fly) or from a
precomputed logits file keyed by record id; its weights never change. The
student is a fresh backbone plus, when output widths differ, a trainable
linear projection onto the teacher's dimension (part of the student for
optimization, excluded from backbone parameter counts).

The loss blends hard-label cross-entropy and temperature-softened KL:
L = (1 - alpha) * CE(labels, student) + alpha * KL(teacher_T || student_T),
with the KL term scaled by T^2 by default so gradient magnitudes stay
comparable across temperatures. alpha=1 is the soft-only mode and never
reads labels.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from . import autograd as ag
from .autograd import Tensor
from .augment import canonical_view, generate_crops
from .config import RunConfig, config_to_pairs
from .data import ImageRecord, record_rng
from .nets import Model, ParameterSet, _he_normal, build_model, count_params
from .schedules import OptimizerState, cosine_interp, sgd_step
from .serial import Checkpoint, load_container, load_checkpoint, save_checkpoint, save_container


class DistillError(Exception):
    pass


# Loss -------------------------------------------------------------------


def softened(logits: np.ndarray, temp: float) -> np.ndarray:
    z = np.asarray(logits) / np.float32(temp)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def distill_loss(
    student_logits,
    teacher_logits: np.ndarray,
    labels: np.ndarray | None,
    alpha: float,
    temp: float,
    scale_kl_by_t2: bool = True,
) -> Tensor:
    """Blended hard/soft loss; gradients flow only into the student logits."""
    if not 0 <= alpha <= 1:
        raise DistillError(f"alpha must be in [0, 1], got {alpha}")
    student_logits = ag.as_tensor(student_logits)
    teacher_logits = np.asarray(teacher_logits)
    if student_logits.shape != teacher_logits.shape:
        raise DistillError(
            f"logit shape mismatch: student {student_logits.shape} vs teacher {teacher_logits.shape}"
        )
    k = student_logits.shape[-1]
    terms = []
    if alpha < 1:
        if labels is None:
            raise DistillError("alpha < 1 requires hard labels")
        onehot = np.eye(k, dtype=teacher_logits.dtype)[np.asarray(labels)]
        ce = ag.mul(ag.tmean(ag.tsum(ag.mul(ag.log_softmax(student_logits), onehot), axis=-1)), -1.0)
        terms.append(ag.mul(ce, 1.0 - alpha))
    if alpha > 0:
        p = softened(teacher_logits, temp)
        p_logp = float(xlogy(p, p).sum(axis=-1).mean())
        q_lsm = ag.log_softmax(ag.mul(student_logits, 1.0 / temp), axis=-1)
        cross = ag.tmean(ag.tsum(ag.mul(q_lsm, p), axis=-1))
        kl = ag.add(ag.mul(cross, -1.0), p_logp)
        scale = alpha * (temp * temp if scale_kl_by_t2 else 1.0)
        terms.append(ag.mul(kl, scale))
    total = terms[0]
    for extra in terms[1:]:
        total = ag.add(total, extra)
    return total


def mean_kl(student_logits: np.ndarray, teacher_logits: np.ndarray, temp: float) -> float:
    """Raw KL(teacher_T || student_T) without the T^2 factor, for monitoring."""
    p = softened(teacher_logits, temp)
    q = softened(student_logits, temp)
    return float((xlogy(p, p) - xlogy(p, np.maximum(q, 1e-30))).sum(axis=-1).mean())


# Teacher sources -----------------------------------------------------------


@dataclass
class TeacherLogitsFile:
    logits: np.ndarray  # (N, Kt)
    ids: list[str]
    teacher_id: str
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            for i, rid in enumerate(self.ids):
                if rid in self.index:
                    raise DistillError(f"duplicate record id in logits file: {rid}")
                self.index[rid] = i

    def rows(self, ids: list[str]) -> np.ndarray:
        out = np.empty((len(ids), self.logits.shape[1]), dtype=self.logits.dtype)
        for i, rid in enumerate(ids):
            if rid not in self.index:
                raise DistillError(f"no teacher logits for record id {rid}")
            out[i] = self.logits[self.index[rid]]
        return out


def export_teacher_logits(
    checkpoint_path: str,
    records: list[ImageRecord],
    out_path: str,
    which: str = "teacher",
    batch_size: int = 64,
) -> TeacherLogitsFile:
    """Forward every record's canonical view through a frozen model to a file."""
    from .dino import model_from_checkpoint

    ckpt = load_checkpoint(checkpoint_path)
    model, cfg = model_from_checkpoint(ckpt, which=which)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise DistillError(f"record id collision: {dupes[:3]}")
    size = cfg.augment.global_size
    rows = []
    with ag.no_grad():
        tensors = model.params.tensors()
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            x = np.stack([canonical_view(r.pixels, size) for r in chunk])
            rows.append(model.forward(tensors, x).data)
    logits = np.concatenate(rows, axis=0).astype(np.float32)
    teacher_id = f"{os.path.basename(checkpoint_path)}:{which}"
    save_container(
        out_path,
        "teacher_logits",
        {"ids": ids, "teacher_id": teacher_id, "n": len(ids), "dim": int(logits.shape[1])},
        {"logits": logits},
    )
    return TeacherLogitsFile(logits=logits, ids=ids, teacher_id=teacher_id)


def load_teacher_logits(path: str) -> TeacherLogitsFile:
    c = load_container(path, expect_kind="teacher_logits")
    return TeacherLogitsFile(
        logits=c.arrays["logits"], ids=list(c.meta["ids"]), teacher_id=str(c.meta["teacher_id"])
    )


# Student with optional dimension-matching projection -------------------------


def match_dim_projection(ps: ParameterSet, rng: np.random.Generator, in_dim: int, out_dim: int):
    """Trainable linear map from student embeddings to the teacher's width."""
    ps.add("proj.w", _he_normal(rng, (in_dim, out_dim), fan_in=in_dim))
    ps.add("proj.b", np.zeros(out_dim, dtype=np.float32))

    def fwd(t, z):
        return ag.linear(z, t["proj.w"], t["proj.b"])

    return fwd


@dataclass
class DistillStudent:
    model: Model
    proj_fwd: object | None  # None -> identity (dims already equal)

    @property
    def params(self) -> ParameterSet:
        return self.model.params

    def logits(self, tensors, x) -> Tensor:
        z = self.model.embed(tensors, x)
        return self.proj_fwd(tensors, z) if self.proj_fwd is not None else z

    def backbone_param_count(self) -> int:
        return count_params(self.model.params.subset("backbone"))


def build_distill_student(cfg: RunConfig, teacher_dim: int, rng: np.random.Generator | None = None) -> DistillStudent:
    if rng is None:
        rng = np.random.default_rng([cfg.seed, 0xD157])
    model = build_model(cfg.backbone_config(), None, rng)
    proj = None
    if cfg.distill.match_dim or model.embed_dim != teacher_dim:
        if model.embed_dim != teacher_dim and not cfg.distill.match_dim:
            raise DistillError(
                f"student dim {model.embed_dim} != teacher dim {teacher_dim}; enable distill.match_dim"
            )
        proj = match_dim_projection(model.params, rng, model.embed_dim, teacher_dim)
    return DistillStudent(model=model, proj_fwd=proj)


# Step and loop ----------------------------------------------------------------


@dataclass
class DistillStepStats:
    loss: float
    kl: float


def distill_step(
    batch: list[ImageRecord],
    views: np.ndarray,
    student: DistillStudent,
    teacher_logits: np.ndarray,
    opt: OptimizerState,
    cfg: RunConfig,
    lr: float,
) -> DistillStepStats:
    """One student update against frozen teacher logits for the same views."""
    labels = None
    if cfg.distill.alpha < 1:
        if any(r.label is None for r in batch):
            raise DistillError("alpha < 1 requires labeled records")
        labels = np.array([r.label for r in batch])
    tensors = student.params.tensors(requires_grad=True)
    logits = student.logits(tensors, views)
    loss = distill_loss(
        logits, teacher_logits, labels, cfg.distill.alpha, cfg.distill.temp, cfg.distill.scale_kl_by_t2
    )
    loss_val = loss.item()
    loss.backward()
    grads = {name: t.grad for name, t in tensors.items() if t.grad is not None}
    sgd_step(student.params, grads, opt, lr, wd=0.0)
    return DistillStepStats(
        loss=loss_val, kl=mean_kl(logits.data, teacher_logits, cfg.distill.temp)
    )


@dataclass
class DistillResult:
    out_dir: str
    checkpoint_path: str
    metrics: list[dict] = field(default_factory=list)


def run_distill(
    cfg: RunConfig,
    records: list[ImageRecord],
    teacher_path: str,
    out_dir: str,
    augmented: bool = False,
) -> DistillResult:
    """Distill a frozen teacher into a fresh student over the dataset.

    Default mode uses the canonical (unaugmented) view per record; augmented
    mode draws a fresh global crop each epoch and recomputes teacher logits
    on it, which requires a checkpoint teacher.
    """
    from .config import echo_config
    from .dino import model_from_checkpoint

    cfg.validate()
    if not records:
        raise DistillError("empty dataset")
    os.makedirs(out_dir, exist_ok=True)

    teacher_model = None
    logits_file = None
    if cfg.distill.source == "checkpoint":
        teacher_model, teacher_cfg = model_from_checkpoint(load_checkpoint(teacher_path), which="teacher")
        teacher_dim = teacher_model.out_dim or teacher_model.embed_dim
        teacher_size = teacher_cfg.augment.global_size
    else:
        if augmented:
            raise DistillError("augmented distillation requires a checkpoint teacher, not a logits file")
        logits_file = load_teacher_logits(teacher_path)
        teacher_dim = logits_file.logits.shape[1]
        teacher_size = None

    student = build_distill_student(cfg, teacher_dim)
    opt = OptimizerState(clip_grad=cfg.clip_grad, momentum=cfg.sgd_momentum, clip_mode=cfg.clip_mode)
    size = cfg.augment.global_size
    epochs = cfg.distill.epochs
    metrics: list[dict] = []

    with open(os.path.join(out_dir, "config.echo"), "w", encoding="utf-8") as f:
        f.write(echo_config(cfg))
    log_file = open(os.path.join(out_dir, "metrics.log"), "w", encoding="utf-8")

    canonical = {r.id: canonical_view(r.pixels, size) for r in records}
    teacher_canonical_logits = None
    if teacher_model is not None and not augmented:
        teacher_canonical_logits = _teacher_logits_for(
            teacher_model, records, teacher_size, cfg.batch_size_eval
        )

    try:
        t = 0
        total_iters = epochs * ((len(records) + cfg.batch_size - 1) // cfg.batch_size)
        for epoch in range(epochs):
            order = np.random.default_rng([cfg.seed, epoch, 0xD15]).permutation(len(records))
            losses, kls = [], []
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                batch = [records[int(i)] for i in idx]
                if augmented:
                    aug = cfg.augment_config()
                    crops = [
                        generate_crops(r, aug, record_rng(cfg.seed, epoch, int(i))).globals[0]
                        for r, i in zip(batch, idx)
                    ]
                    views = np.stack(crops)
                    with ag.no_grad():
                        t_logits = teacher_model.forward(teacher_model.params.tensors(), views).data
                else:
                    views = np.stack([canonical[r.id] for r in batch])
                    if logits_file is not None:
                        t_logits = logits_file.rows([r.id for r in batch])
                    else:
                        t_logits = teacher_canonical_logits.rows([r.id for r in batch])
                lr = cosine_interp(cfg.distill.lr, 0.0, t, max(total_iters - 1, 1))
                stats = distill_step(batch, views, student, t_logits, opt, cfg, lr)
                losses.append(stats.loss)
                kls.append(stats.kl)
                t += 1
            entry = {
                "t": t,
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                "kl": float(np.mean(kls)),
                "lr": lr,
            }
            metrics.append(entry)
            log_file.write(
                " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in entry.items()) + "\n"
            )
            log_file.flush()
    finally:
        log_file.close()

    ckpt_path = os.path.join(out_dir, "student_final.bin")
    ckpt = Checkpoint(
        config_pairs=config_to_pairs(cfg),
        student=student.params,
        teacher=student.params.copy(),
        center=np.zeros(teacher_dim, dtype=np.float32),
        opt_buffers=opt.buffers,
        t=t - 1,
        epoch=epochs - 1,
        meta={
            "seed": cfg.seed,
            "embed_dim": student.model.embed_dim,
            "out_dim": teacher_dim,
            "has_head": False,
            "teacher_source": os.path.basename(teacher_path),
            "backbone_param_count": student.backbone_param_count(),
        },
    )
    save_checkpoint(ckpt_path, ckpt)
    with open(os.path.join(out_dir, "DONE"), "w", encoding="utf-8") as f:
        f.write(time.strftime("%Y-%m-%dT%H:%M:%S") + "\n")
    return DistillResult(out_dir=out_dir, checkpoint_path=ckpt_path, metrics=metrics)


def _teacher_logits_for(model: Model, records: list[ImageRecord], size: int, batch_size: int) -> TeacherLogitsFile:
    rows = []
    batch_size = max(1, batch_size)
    with ag.no_grad():
        tensors = model.params.tensors()
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            x = np.stack([canonical_view(r.pixels, size) for r in chunk])
            rows.append(model.forward(tensors, x).data)
    logits = np.concatenate(rows, axis=0).astype(np.float32)
    return TeacherLogitsFile(logits=logits, ids=[r.id for r in records], teacher_id="inline")
