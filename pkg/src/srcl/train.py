"""Training regimes: supervised baseline, SRC fine-tuning, contrastive pre-training, joint.

Every regime runs through :func:`_train_loop`, which toggles three loss terms:

* ``sup``: MSE (or cross-entropy) between student class probabilities and
  one-hot labels, over the labeled rows of each batch;
* ``con``: supervised contrastive loss over two augmented views per image;
* ``src``: relation consistency between student activations on augmented
  views and teacher activations on clean images, after warm-up.

Augmentations are keyed by (seed, phase, epoch, dataset index, view) and
batches by (seed, phase, epoch), so regimes that switch a term off replay the
exact random draws of the regime without it.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .data import AugmentConfig, Dataset, augment_view, make_batches, make_contrastive_views, normalize
from .evaluation import metrics_report, predict_proba
from .nn import ConfigError, EncoderConfig, ModelParams, OptimizerState, backward, forward, init_params, optimizer_step
from .numerics import RandomStream
from .teacher import TeacherConfig, ema_update, gates

REGIMES = ("supervised", "src", "srcl", "srcl-joint")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_pre: int = 100
    epochs_down: int = 100
    warmup: int = 20
    batch_size: int = 20
    tau: float = 0.1
    lambda_sup: float = 1.0
    lambda_con: float = 1.0
    lambda_src: float = 1.0
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = 0.99
    ema_granularity: str = "epoch"
    supervised_loss: str = "mse"
    log_wall_time: bool = False
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        for name in ("epochs_pre", "epochs_down", "warmup"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.tau <= 0:
            raise ConfigError("tau > 0 required")
        for name in ("lambda_sup", "lambda_con", "lambda_src"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.supervised_loss not in ("mse", "ce"):
            raise ConfigError("supervised_loss must be 'mse' or 'ce'")
        # validates alpha / granularity
        self.teacher_config

    @property
    def teacher_config(self) -> TeacherConfig:
        return TeacherConfig(self.alpha, self.warmup, self.ema_granularity)

    def new_optimizer(self) -> OptimizerState:
        return OptimizerState(self.optimizer, self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class EpochLog:
    epoch: int
    loss_total: float
    loss_sup: float
    loss_con: float
    loss_src: float
    val_auroc: float | None = None
    val_accuracy: float | None = None
    seconds: float | None = None
    step_losses: list[tuple[float, float, float, float]] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        record = asdict(self)
        record.pop("step_losses")
        return json.dumps(record)


@dataclass
class _Terms:
    sup: float = 0.0
    con: float = 0.0
    src: float = 0.0


def _key(phase: str, epoch: int):
    return f"{phase}:{epoch}" if phase else epoch


def _student_view(batch, aug: AugmentConfig, stream: RandomStream) -> np.ndarray:
    # view 0 of each sample: the same draw make_contrastive_views uses for row 2k
    return np.stack([augment_view(img, aug, stream.split(int(i), 0)) for img, i in zip(batch.images, batch.indices)])


def _train_loop(
    student: ModelParams,
    train_set: Dataset,
    val_set: Dataset | None,
    config: TrainConfig,
    epochs: int,
    *,
    w_sup: float,
    w_con: float,
    w_src: float,
    use_teacher: bool,
    phase: str = "",
    on_epoch=None,
):
    """Shared epoch/batch loop. Returns (params per epoch, final teacher, logs).

    ``on_epoch(epoch, student, teacher)`` is called after each epoch's teacher update.
    """
    if epochs < 1:
        raise TrainingError("need at least one epoch")
    if len(train_set) < config.batch_size:
        raise TrainingError(f"{len(train_set)} training images cannot fill a batch of {config.batch_size}")
    if w_sup > 0 and not train_set.labeled_mask.any():
        raise TrainingError("no labeled images in the training set; supervision is impossible")

    aug = config.augment
    tcfg = config.teacher_config
    k = train_set.num_classes
    opt = config.new_optimizer()
    teacher = student.copy() if use_teacher else None
    val_x = normalize(val_set.pixels, aug) if val_set is not None and w_sup > 0 else None

    checkpoints: list[ModelParams] = []
    logs: list[EpochLog] = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        update_teacher, apply_src = gates(epoch, tcfg) if use_teacher else (False, False)
        if use_teacher and epoch == tcfg.warmup_epochs:
            teacher = student.copy()
        stream = RandomStream(config.seed).split("augment", _key(phase, epoch))
        steps = []
        for batch in make_batches(train_set, config.batch_size, _key(phase, epoch), config.seed):
            terms = _Terms()
            upstream: dict[str, np.ndarray] = {}
            if w_con > 0:
                views = make_contrastive_views(batch, aug, stream)
                out, trace = forward(student, views, projection=True, classifier=w_sup > 0)
                con = losses.supcon_loss(out["embeddings"], batch.labels, config.tau)
                terms.con = w_con * con.value
                upstream["embeddings"] = w_con * con.grads["embeddings"]
                rows = slice(0, None, 2)
            else:
                out, trace = forward(student, _student_view(batch, aug, stream), projection=False, classifier=w_sup > 0)
                rows = slice(None)
            n_rows = out["activation"].shape[0]

            labeled = batch.labeled
            if w_sup > 0 and labeled.any():
                probs = out["probabilities"][rows]
                targets = losses.one_hot(batch.labels[labeled], k, probs.dtype)
                if config.supervised_loss == "mse":
                    sup = losses.mse_supervised_loss(probs[labeled], targets)
                    gkey = "probabilities"
                else:
                    sup = losses.cross_entropy_loss(probs[labeled], targets)
                    gkey = "logits"
                g = np.zeros((n_rows, k), dtype=probs.dtype)
                g[np.flatnonzero(labeled) * (2 if w_con > 0 else 1)] = w_sup * sup.grads[gkey]
                upstream[gkey] = g
                terms.sup = w_sup * sup.value

            if w_src > 0 and apply_src:
                clean = normalize(batch.images, aug)
                t_act, _ = forward(teacher, clean, projection=False, classifier=False)
                src = losses.src_loss(out["activation"][rows], t_act["activation"])
                g = np.zeros_like(out["activation"])
                g[rows] = w_src * src.grads["student"]
                upstream["activation"] = g
                terms.src = w_src * src.value

            grads = backward(trace, student, upstream) if upstream else {}
            student, opt = optimizer_step(student, grads, opt)
            if use_teacher and update_teacher and tcfg.ema_granularity == "step":
                teacher = ema_update(teacher, student, tcfg.alpha)
            steps.append((terms.sup + terms.con + terms.src, terms.sup, terms.con, terms.src))

        if use_teacher and update_teacher and tcfg.ema_granularity == "epoch":
            teacher = ema_update(teacher, student, tcfg.alpha)

        mean = np.mean(np.array(steps, dtype=np.float64), axis=0)
        log = EpochLog(epoch, float(mean[0]), float(mean[1]), float(mean[2]), float(mean[3]), step_losses=steps)
        if val_x is not None:
            report = metrics_report(predict_proba(student, val_x), val_set.labels)
            log.val_auroc = report.macro_auroc
            log.val_accuracy = report.accuracy
        if config.log_wall_time:
            log.seconds = time.perf_counter() - t0
        logs.append(log)
        checkpoints.append(student)
        if on_epoch is not None:
            on_epoch(epoch, student, teacher)
    return checkpoints, teacher, logs


def select_best(logs: list[EpochLog], checkpoints: list[ModelParams]) -> ModelParams:
    """Checkpoint with the highest validation macro-AUROC; earliest epoch wins ties."""
    if len(logs) != len(checkpoints):
        raise ValueError("one checkpoint per log record is required")
    best, best_score = None, None
    for log, ckpt in zip(logs, checkpoints):
        if log.val_auroc is None:
            continue
        if best_score is None or log.val_auroc > best_score:
            best, best_score = ckpt, log.val_auroc
    if best is None:
        raise ValueError("no validated epochs to select from")
    return best


def pretrain_contrastive(train_set: Dataset, config: TrainConfig, student: ModelParams | None = None):
    """Contrastive pre-training of encoder + projection head; the classifier is untouched."""
    if len(train_set) == 0:
        raise TrainingError("empty training set")
    if student is None:
        student = init_params(config.encoder, train_set.num_classes, config.seed)
    ckpts, _, logs = _train_loop(
        student, train_set, None, config, config.epochs_pre, w_sup=0.0, w_con=1.0, w_src=0.0, use_teacher=False
    )
    return ckpts[-1], logs


def finetune_src(
    student: ModelParams, train_set: Dataset, val_set: Dataset, config: TrainConfig, phase: str = "", on_epoch=None
):
    """Supervised fine-tuning plus teacher relation consistency after warm-up."""
    ckpts, teacher, logs = _train_loop(
        student,
        train_set,
        val_set,
        config,
        config.epochs_down,
        w_sup=1.0,
        w_con=0.0,
        w_src=config.lambda_src,
        use_teacher=True,
        phase=phase,
        on_epoch=on_epoch,
    )
    return select_best(logs, ckpts), teacher, logs


def train_joint(
    train_set: Dataset, val_set: Dataset, config: TrainConfig, student: ModelParams | None = None, on_epoch=None
):
    """Single-stage multi-task objective: weighted supervision + contrastive + relation terms."""
    if student is None:
        student = init_params(config.encoder, train_set.num_classes, config.seed)
    ckpts, teacher, logs = _train_loop(
        student,
        train_set,
        val_set,
        config,
        config.epochs_down,
        w_sup=config.lambda_sup,
        w_con=config.lambda_con,
        w_src=config.lambda_src,
        use_teacher=True,
        on_epoch=on_epoch,
    )
    if all(log.val_auroc is None for log in logs):
        return ckpts[-1], teacher, logs
    return select_best(logs, ckpts), teacher, logs


def train_supervised(train_set: Dataset, val_set: Dataset, config: TrainConfig, student: ModelParams | None = None):
    if student is None:
        student = init_params(config.encoder, train_set.num_classes, config.seed)
    ckpts, _, logs = _train_loop(
        student, train_set, val_set, config, config.epochs_down, w_sup=1.0, w_con=0.0, w_src=0.0, use_teacher=False
    )
    return select_best(logs, ckpts), logs


def run_regime(regime: str, train_set: Dataset, val_set: Dataset, config: TrainConfig):
    """Train one regime from a fresh seeded init; returns (selected model, logs)."""
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}; choose from {', '.join(REGIMES)}")
    student = init_params(config.encoder, train_set.num_classes, config.seed)
    if regime == "supervised":
        return train_supervised(train_set, val_set, config, student)
    if regime == "src":
        best, _, logs = finetune_src(student, train_set, val_set, config)
        return best, logs
    if regime == "srcl":
        pre, pre_logs = pretrain_contrastive(train_set, config, student)
        best, _, logs = finetune_src(pre, train_set, val_set, config, phase="down")
        for log in logs:
            log.epoch += len(pre_logs)
        return best, pre_logs + logs
    best, _, logs = train_joint(train_set, val_set, config, student)
    return best, logs
