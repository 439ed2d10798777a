"""Momentum-teacher self-distillation: losses, the training step, pretraining.

The teacher is an EMA copy of the student and receives no gradients. Teacher
outputs are centered (EMA of batch means, subtracted before the softmax) and
sharpened with a lower temperature than the student; the loss is the mean
cross-entropy between teacher and student distributions over all
(teacher view, student view) pairs excluding same-view pairs.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from . import autograd as ag
from .autograd import Tensor
from .augment import CropSet
from .config import RunConfig, config_to_pairs
from .data import ImageRecord, batch_iterator, iterations_per_epoch
from .nets import Model, ParameterSet, build_model
from .schedules import (
    CosineSchedule,
    OptimizerState,
    cosine_value,
    momentum_schedule,
    sgd_step,
    weight_decay_schedule,
)
from .serial import Checkpoint, load_checkpoint, save_checkpoint


class TrainingDiverged(Exception):
    """Non-finite loss: the run aborts after dumping a checkpoint."""


@dataclass
class TeacherState:
    """Teacher parameters plus the centering vector.

    Both are updated only by ema_update / update_center, never by the
    optimizer.
    """

    params: ParameterSet
    center: np.ndarray
    center_momentum: float = 0.9


# Distribution ops --------------------------------------------------------


def teacher_probs(logits: np.ndarray, center: np.ndarray, teacher_temp: float) -> np.ndarray:
    """softmax((logits - center) / temp) rowwise, computed without gradients."""
    z = (np.asarray(logits) - center) / np.float32(teacher_temp)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def student_log_probs(logits, student_temp: float) -> Tensor:
    """log-softmax(logits / temp) rowwise; differentiable."""
    return ag.log_softmax(ag.mul(ag.as_tensor(logits), 1.0 / student_temp), axis=-1)


def rows_entropy(probs: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of probability rows."""
    return float(-xlogy(probs, probs).sum(axis=-1).mean())


def dino_loss(teacher: np.ndarray, student_lp) -> Tensor:
    """Mean cross-entropy over (teacher view, student view) pairs.

    `teacher`: probabilities for the 2 global views, shape (2, B, K).
    `student_lp`: log-probabilities for all n views, a Tensor of shape
    (n, B, K) or a list of (B, K) Tensors ordered [global0, global1,
    locals...]. Same-view pairs (0,0) and (1,1) are excluded; gradients flow
    only into the student side.
    """
    teacher = np.asarray(teacher)
    if isinstance(student_lp, (list, tuple)):
        student_lp = ag.concat([ag.reshape(lp, (1,) + lp.shape) for lp in student_lp], axis=0)
    n = student_lp.shape[0]
    if n < 2 or teacher.shape[0] != 2:
        raise ValueError(f"need 2 teacher views and >= 2 student views, got {teacher.shape[0]} and {n}")
    _, b, k = teacher.shape
    tflat = teacher.reshape(2, b * k)
    sflat = ag.reshape(student_lp, (n, b * k))
    # ce_matrix[t, s] = sum over batch and classes of P_t * logP_s
    ce_matrix = ag.matmul(Tensor(tflat), ag.transpose(sflat, (1, 0)))
    mask = np.ones((2, n), dtype=tflat.dtype)
    mask[0, 0] = 0.0
    mask[1, 1] = 0.0
    n_pairs = 2 * n - 2
    return ag.mul(ag.tsum(ag.mul(ce_matrix, mask)), -1.0 / (b * n_pairs))


def update_center(center: np.ndarray, teacher_logits: np.ndarray, momentum: float) -> np.ndarray:
    """EMA of raw teacher logit means over the batch (both global views)."""
    if teacher_logits.size == 0:
        raise ValueError("update_center: empty batch")
    batch_mean = teacher_logits.reshape(-1, teacher_logits.shape[-1]).mean(axis=0)
    m = np.float32(momentum)
    return m * center + (np.float32(1.0) - m) * batch_mean


def ema_update(teacher: ParameterSet, student: ParameterSet, m: float) -> None:
    """In place: every teacher entry <- m * teacher + (1 - m) * student."""
    t_names, s_names = teacher.names(), student.names()
    if t_names != s_names:
        extra = set(t_names) ^ set(s_names)
        raise ValueError(f"ema_update: parameter name mismatch, first difference: {sorted(extra)[:3]}")
    if m == 1.0:
        return  # teacher frozen, bit for bit
    m32 = np.float32(m)
    one_minus = np.float32(1.0) - m32
    for name, t_arr in teacher.items():
        s_arr = student[name]
        if t_arr.shape != s_arr.shape:
            raise ValueError(f"ema_update: shape mismatch for entry {name}: {t_arr.shape} vs {s_arr.shape}")
        teacher[name] = m32 * t_arr + one_minus * s_arr
    teacher.version += 1


# Training step -------------------------------------------------------------


@dataclass
class StepStats:
    loss: float
    teacher_entropy: float
    center_norm: float


def _stack_views(batch: list[CropSet]) -> tuple[np.ndarray, np.ndarray | None, int]:
    """(2B, 3, S, S) globals, ((n-2)B, 3, s, s) locals (or None), and n."""
    n = 2 + len(batch[0].locals)
    g = np.concatenate(
        [np.stack([cs.globals[v] for cs in batch]) for v in range(2)], axis=0
    )
    loc = None
    if n > 2:
        loc = np.concatenate(
            [np.stack([cs.locals[v] for cs in batch]) for v in range(n - 2)], axis=0
        )
    return g, loc, n


def train_step(
    batch: list[CropSet],
    student: Model,
    teacher: TeacherState,
    opt: OptimizerState,
    cfg: RunConfig,
    lr: float,
    wd: float,
    m: float,
) -> StepStats:
    """One optimization step.

    Order: teacher forward on globals (no gradients), student forward on all
    crops, pairwise loss, backward into the student only, clipped SGD step,
    EMA teacher update from the post-step student, center update.
    """
    b = len(batch)
    globals_x, locals_x, n = _stack_views(batch)
    k = student.out_dim

    with ag.no_grad():
        t_tensors = teacher.params.tensors()
        t_logits = student.forward(t_tensors, globals_x).data  # (2B, K)
    t_probs = teacher_probs(t_logits.reshape(2, b, k), teacher.center, cfg.teacher_temp)

    s_tensors = student.params.tensors(requires_grad=True)
    s_parts = [ag.reshape(student.forward(s_tensors, globals_x), (2, b, k))]
    if locals_x is not None:
        s_parts.append(ag.reshape(student.forward(s_tensors, locals_x), (n - 2, b, k)))
    s_logits = ag.concat(s_parts, axis=0) if len(s_parts) > 1 else s_parts[0]
    s_lp = student_log_probs(s_logits, cfg.student_temp)

    loss = dino_loss(t_probs, s_lp)
    loss_val = loss.item()
    if not np.isfinite(loss_val):
        raise TrainingDiverged(
            f"non-finite loss on batch of ids {[cs.source_id for cs in batch]}"
        )
    loss.backward()
    grads = {name: t.grad for name, t in s_tensors.items() if t.grad is not None}

    sgd_step(student.params, grads, opt, lr, wd)
    ema_update(teacher.params, student.params, m)
    teacher.center = update_center(teacher.center, t_logits, teacher.center_momentum)

    return StepStats(
        loss=loss_val,
        teacher_entropy=rows_entropy(t_probs),
        center_norm=float(np.linalg.norm(teacher.center)),
    )


# Pretraining loop ------------------------------------------------------------


@dataclass
class PretrainResult:
    out_dir: str
    checkpoint_path: str
    metrics: list[dict] = field(default_factory=list)


def build_student(cfg: RunConfig, rng: np.random.Generator | None = None) -> Model:
    if rng is None:
        rng = np.random.default_rng([cfg.seed, 0xD1B0])
    backbone_cfg = cfg.backbone_config()
    model = build_model(backbone_cfg, cfg.head_config(in_dim=0), rng)
    return model


def _format_metrics(entry: dict) -> str:
    return " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in entry.items())


def _load_params_into(dst: ParameterSet, src: ParameterSet, prefix: str | None = None) -> int:
    copied = 0
    for name, arr in src.items():
        if prefix is not None and not name.startswith(prefix + "."):
            continue
        if name in dst and dst[name].shape == arr.shape:
            dst[name] = arr.astype(dst[name].dtype)
            copied += 1
    return copied


def pretrain(cfg: RunConfig, records: list[ImageRecord], out_dir: str, resume: bool = False) -> PretrainResult:
    """Run the self-distillation loop over the dataset.

    The run directory receives the resolved config echo, an append-only
    metrics log, periodic checkpoints and a final checkpoint; a DONE marker
    makes a completed directory immutable.
    """
    from .config import echo_config  # local import to avoid cycle at module load

    cfg.validate()
    if not records:
        raise ValueError("pretrain: empty dataset")
    os.makedirs(out_dir, exist_ok=True)
    done_marker = os.path.join(out_dir, "DONE")
    final_path = os.path.join(out_dir, "checkpoint_final.bin")
    metrics_path = os.path.join(out_dir, "metrics.log")
    if os.path.exists(done_marker):
        raise RuntimeError(f"run directory {out_dir} is complete and immutable (DONE marker present)")
    existing = [f for f in os.listdir(out_dir) if f.startswith("checkpoint")]
    if existing and not resume:
        raise RuntimeError(
            f"run directory {out_dir} already holds checkpoints; pass resume=True to continue"
        )

    ipe = iterations_per_epoch(len(records), cfg.batch_size)
    total_iters = cfg.n_epochs * ipe
    lr_sched = CosineSchedule(
        eta_min=cfg.min_lr,
        eta_max=cfg.lr,
        total_iters=total_iters,
        warmup_iters=cfg.warmup_epochs * ipe,
        warmup_start=0.0,
        eq2_verbatim=cfg.eq2_verbatim,
    )

    aug_cfg = cfg.augment_config()
    student = build_student(cfg)
    teacher = TeacherState(
        params=student.params.copy(),
        center=np.zeros(cfg.out_dim, dtype=np.float32),
        center_momentum=cfg.center_momentum,
    )
    opt = OptimizerState(clip_grad=cfg.clip_grad, momentum=cfg.sgd_momentum, clip_mode=cfg.clip_mode)
    start_epoch = 0
    t = 0
    metrics: list[dict] = []

    if resume and existing:
        ckpt = load_checkpoint(_latest_checkpoint(out_dir))
        _restore_from_checkpoint(student, teacher, opt, ckpt)
        t = ckpt.t + 1  # checkpoint records the last completed iteration
        start_epoch = ckpt.epoch + 1
    else:
        if cfg.pretrained and cfg.pretrained_path:
            src = load_checkpoint(cfg.pretrained_path)
            copied = _load_params_into(student.params, src.student, prefix="backbone")
            if copied == 0:
                raise RuntimeError(f"pretrained_path {cfg.pretrained_path}: no matching backbone entries")
            teacher.params = student.params.copy()
        if cfg.pretrained and cfg.pretrained_teacher_path:
            src = load_checkpoint(cfg.pretrained_teacher_path)
            _load_params_into(teacher.params, src.teacher)
        with open(os.path.join(out_dir, "config.echo"), "w", encoding="utf-8") as f:
            f.write(echo_config(cfg))

    log_mode = "a" if (resume and existing) else "w"
    log_file = open(metrics_path, log_mode, encoding="utf-8")
    try:
        for epoch in range(start_epoch, cfg.n_epochs):
            epoch_loss = []
            epoch_entropy = []
            last = None
            for batch in batch_iterator(records, cfg.batch_size, aug_cfg, cfg.seed, epoch):
                lr = cosine_value(lr_sched, t)
                wd = weight_decay_schedule(t, total_iters, cfg.weight_decay, cfg.weight_decay_end)
                m = momentum_schedule(t, total_iters, cfg.momentum_teacher, cfg.momentum_teacher_end)
                try:
                    stats = train_step(batch, student, teacher, opt, cfg, lr, wd, m)
                except TrainingDiverged:
                    _save_state(os.path.join(out_dir, "checkpoint_abort.bin"), cfg, student, teacher, opt, t, epoch)
                    raise
                epoch_loss.append(stats.loss)
                epoch_entropy.append(stats.teacher_entropy)
                last = (lr, wd, m, stats.center_norm)
                t += 1
            if cfg.logging_freq > 0 and ((epoch + 1) % cfg.logging_freq == 0 or epoch + 1 == cfg.n_epochs):
                entry = {
                    "t": t,
                    "epoch": epoch,
                    "loss": float(np.mean(epoch_loss)),
                    "teacher_entropy": float(np.mean(epoch_entropy)),
                    "lr": last[0],
                    "wd": last[1],
                    "m": last[2],
                    "center_norm": last[3],
                }
                metrics.append(entry)
                log_file.write(_format_metrics(entry) + "\n")
                log_file.flush()
            if cfg.ckpt_freq and (epoch + 1) % cfg.ckpt_freq == 0 and epoch + 1 < cfg.n_epochs:
                _save_state(os.path.join(out_dir, f"checkpoint_ep{epoch:04d}.bin"), cfg, student, teacher, opt, t - 1, epoch)
        _save_state(final_path, cfg, student, teacher, opt, t - 1, cfg.n_epochs - 1)
        with open(done_marker, "w", encoding="utf-8") as f:
            f.write(time.strftime("%Y-%m-%dT%H:%M:%S") + "\n")
    finally:
        log_file.close()
    return PretrainResult(out_dir=out_dir, checkpoint_path=final_path, metrics=metrics)


def _save_state(path, cfg, student: Model, teacher: TeacherState, opt: OptimizerState, t: int, epoch: int) -> None:
    ckpt = Checkpoint(
        config_pairs=config_to_pairs(cfg),
        student=student.params,
        teacher=teacher.params,
        center=teacher.center,
        opt_buffers=opt.buffers,
        t=t,
        epoch=epoch,
        meta={
            "seed": cfg.seed,
            "embed_dim": student.embed_dim,
            "out_dim": student.out_dim,
            "has_head": student.head_fwd is not None,
            "rng": {"scheme": "counter-based (seed, epoch, index)", "seed": cfg.seed},
        },
    )
    save_checkpoint(path, ckpt)


def _latest_checkpoint(out_dir: str) -> str:
    final = os.path.join(out_dir, "checkpoint_final.bin")
    if os.path.exists(final):
        return final
    epochs = sorted(
        f for f in os.listdir(out_dir) if f.startswith("checkpoint_ep") and f.endswith(".bin")
    )
    if not epochs:
        raise RuntimeError(f"no checkpoints to resume from in {out_dir}")
    return os.path.join(out_dir, epochs[-1])


def _restore_from_checkpoint(student: Model, teacher: TeacherState, opt: OptimizerState, ckpt: Checkpoint) -> None:
    if student.params.names() != ckpt.student.names():
        raise RuntimeError("checkpoint architecture does not match the configured model")
    for name, arr in ckpt.student.items():
        student.params[name] = arr
    for name, arr in ckpt.teacher.items():
        teacher.params[name] = arr
    teacher.center = ckpt.center.copy()
    opt.buffers = {name: arr.copy() for name, arr in ckpt.opt_buffers.items()}


def model_from_checkpoint(ckpt: Checkpoint, which: str = "teacher") -> tuple[Model, RunConfig]:
    """Rebuild the architecture recorded in a checkpoint and load weights."""
    from .config import config_from_pairs

    cfg = config_from_pairs(ckpt.config_pairs)
    if ckpt.meta.get("has_head", True):
        model = build_student(cfg)
    else:
        from .nets import build_model

        model = build_model(cfg.backbone_config(), None, np.random.default_rng([cfg.seed, 0xD1B0]))
    src = {"student": ckpt.student, "teacher": ckpt.teacher}[which]
    missing = [n for n in model.params.names() if n not in src]
    if missing:
        raise RuntimeError(f"checkpoint is missing entries for this architecture: {missing[:3]}")
    for name in model.params.names():
        model.params[name] = src[name]
    return model, cfg
