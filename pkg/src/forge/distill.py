"""Self-knowledge distillation: losses, updates, and the training loop.

The main student learns from ground truth plus the soft targets of an
auxiliary student; the auxiliary never receives gradients and is updated
once per iteration as an exponential moving average of the main student.
Mode semantics:

    ours       dual weight selection, main = subset 0, auxiliary = subset 1
    ours_swap  same with the two subsets' roles reversed
    cm1        single selected student, cross-entropy only
    cm2-cm4    fresh init (truncated-normal / Xavier / Kaiming), CE only

Cross entropy is applied to the same temperature-scaled probabilities the
distillation term uses (the equations share one softmax); set
``ce_temperature="one"`` for the conventional untempered variant.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, one_hot
from .errors import (
    ConfigError,
    HyperparameterError,
    LabelError,
    ShapeError,
    TrainingContractError,
)
from .models import ModelSpec, Parameters, build_model, forward
from .rng import derive_seed, substream
from .surgery import apply_plan, dual_plans, write_archive
from .tensor import Tape, Tensor, backward

MODES = ("ours", "ours_swap", "cm1", "cm2", "cm3", "cm4")
SELECTION_MODES = ("ours", "ours_swap", "cm1")
_INIT_BY_MODE = {"cm2": "default", "cm3": "xavier", "cm4": "kaiming"}


@dataclass
class TrainConfig:
    alpha: float = 0.6
    beta: float = 0.9
    tau: float = 4.0
    eta: float = 0.1
    epochs: int = 30
    batch: int = 32
    mode: str = "ours"
    master_seed: int = 0
    ce_temperature: str = "tau"  # "tau" applies Eq-1 probabilities to CE too
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; options: {MODES}")
        if not 0 <= self.alpha <= 1:
            raise HyperparameterError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0 <= self.beta <= 1:
            raise HyperparameterError(f"beta must be in [0, 1], got {self.beta}")
        if self.tau <= 0:
            raise HyperparameterError(f"tau must be positive, got {self.tau}")
        if self.eta <= 0:
            raise HyperparameterError(f"eta must be positive, got {self.eta}")
        if self.epochs <= 0 or self.batch <= 0:
            raise HyperparameterError("epochs and batch must be positive")
        if self.ce_temperature not in ("tau", "one"):
            raise ConfigError(f"ce_temperature must be 'tau' or 'one', got {self.ce_temperature!r}")

    def ce_tau(self) -> float:
        """Temperature CE sees: cm2-cm4 ignore tau entirely."""
        if self.mode in ("cm2", "cm3", "cm4"):
            return 1.0
        return self.tau if self.ce_temperature == "tau" else 1.0


@dataclass
class TrainState:
    step: int
    params_main: Parameters
    params_aux: Parameters | None
    history: list  # (step, ce, skd, total)
    aux_gap: list = field(default_factory=list)  # (step, Linf(main - aux))


# ---------------------------------------------------------------------------
# losses (Eqs. 3-5)


def _check_probs(p: np.ndarray, what: str) -> None:
    if p.ndim != 2:
        raise ShapeError(f"{what} must be (batch, classes), got {p.shape}")
    sums = p.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-5:
        raise ShapeError(f"{what} rows do not sum to 1 (max deviation {np.abs(sums-1).max():.2e})")


def skd_loss(p_main: Tensor, p_aux: Tensor) -> Tensor:
    """Batch-mean KL(aux || main); gradient flows only through p_main."""
    if p_main.data.shape != p_aux.data.shape:
        raise ShapeError(f"probability shapes differ: {p_main.data.shape} vs {p_aux.data.shape}")
    _check_probs(p_main.data, "p_main")
    _check_probs(p_aux.data, "p_aux")
    p_aux = p_aux.detach()
    b = p_main.data.shape[0]
    terms = T.mul(p_aux, T.sub(T.log_clamped(p_aux), T.log_clamped(p_main)))
    return T.scale(T.sum_all(terms), 1.0 / b)


def ce_loss(p_main: Tensor, y: Tensor) -> Tensor:
    """Batch-mean cross entropy against one-hot targets."""
    if p_main.data.shape != y.data.shape:
        raise ShapeError(f"probs {p_main.data.shape} vs targets {y.data.shape}")
    ydata = y.data
    if not (np.all((ydata == 0) | (ydata == 1)) and np.all(ydata.sum(axis=1) == 1)):
        raise LabelError("targets must be exact one-hot rows")
    b = p_main.data.shape[0]
    return T.scale(T.sum_all(T.mul(y.detach(), T.log_clamped(p_main))), -1.0 / b)


def total_loss(l_ce: Tensor, l_skd: Tensor, alpha: float, tau: float) -> Tensor:
    """alpha * CE + (1 - alpha) * tau^2 * SKD."""
    if not 0 <= alpha <= 1:
        raise HyperparameterError(f"alpha must be in [0, 1], got {alpha}")
    if tau <= 0:
        raise HyperparameterError(f"tau must be positive, got {tau}")
    return T.add(T.scale(l_ce, alpha), T.scale(l_skd, (1.0 - alpha) * tau * tau))


# ---------------------------------------------------------------------------
# updates (Eqs. 6-7)


def sgd_step(params: Parameters, eta: float) -> None:
    """theta <- theta - eta * grad for every trainable tensor; grads clear."""
    eta32 = np.float32(eta)
    for name, t in params.items():
        if not t.requires_grad:
            continue
        if t.grad is None:
            raise TrainingContractError(f"no gradient on trainable tensor {name!r}")
        t.data -= eta32 * t.grad
        t.grad = None


def ema_update(theta_aux: Parameters, theta_main: Parameters, beta: float) -> None:
    """theta_aux <- beta * theta_aux + (1 - beta) * theta_main, elementwise."""
    if list(theta_aux.keys()) != list(theta_main.keys()):
        raise TrainingContractError("EMA name tables differ")
    if beta == 1.0:  # degenerate: auxiliary frozen, keep it bit-exact
        return
    b32 = np.float32(beta)
    one_minus = np.float32(1.0 - beta)
    for name, aux in theta_aux.items():
        main = theta_main[name]
        if aux.data.shape != main.data.shape:
            raise TrainingContractError(f"EMA shape mismatch on {name!r}")
        if beta == 0.0:
            aux.data = main.data.copy()
        else:
            aux.data = b32 * aux.data + one_minus * main.data


# ---------------------------------------------------------------------------
# training loop


def predict(params: Parameters, spec: ModelSpec, batch: Tensor) -> np.ndarray:
    """Argmax class indices; ties break toward the lowest index."""
    logits = forward(params, spec, batch)
    return np.argmax(logits.data, axis=1)


def predict_dataset(params: Parameters, spec: ModelSpec, dataset: Dataset, batch: int = 64) -> np.ndarray:
    out = []
    for lo in range(0, dataset.n, batch):
        xb = Tensor(dataset.images.data[lo : lo + batch])
        out.append(predict(params, spec, xb))
    return np.concatenate(out)


def _freeze(params: Parameters) -> Parameters:
    return {name: Tensor(t.data.copy(), requires_grad=False) for name, t in params.items()}


def _init_students(config, student_spec, teacher, teacher_spec, strategy):
    """Build main (and auxiliary) parameters according to the mode."""
    mode = config.mode
    if mode in SELECTION_MODES:
        if teacher is None or teacher_spec is None:
            raise ConfigError(f"mode {mode!r} needs a teacher checkpoint and spec")
        select_seed = derive_seed(config.master_seed, "select")
        plan0, plan1 = dual_plans(teacher, teacher_spec, student_spec, strategy, select_seed)
        main_plan, aux_plan = (plan1, plan0) if mode == "ours_swap" else (plan0, plan1)
        main = apply_plan(teacher, main_plan, student_spec, derive_seed(config.master_seed, "init"))
        if mode == "cm1":
            return main, None
        aux = apply_plan(teacher, aux_plan, student_spec, derive_seed(config.master_seed, "init:aux"))
        return main, _freeze(aux)
    main = build_model(student_spec, _INIT_BY_MODE[mode], derive_seed(config.master_seed, "init"))
    return main, None


def train(
    config: TrainConfig,
    student_spec: ModelSpec,
    dataset: Dataset,
    teacher: Parameters | None = None,
    teacher_spec: ModelSpec | None = None,
    strategy: str = "uniform",
    history_path=None,
    checkpoint_dir=None,
) -> TrainState:
    """Run the full training loop for one mode and return the final state."""
    config.validate()
    student_spec.validate()
    if dataset.n == 0:
        raise ConfigError("dataset is empty")
    if dataset.classes != student_spec.classes:
        raise ConfigError(
            f"dataset has {dataset.classes} classes but spec expects {student_spec.classes}"
        )
    params_main, params_aux = _init_students(config, student_spec, teacher, teacher_spec, strategy)
    distilling = params_aux is not None
    ce_tau = config.ce_tau()
    batch_rng = substream(config.master_seed, "batch-order")
    labels_1h = one_hot(dataset.labels, dataset.classes)
    history = []
    aux_gap = []
    step = 0
    writer = None
    history_file = None
    if history_path is not None:
        history_file = open(history_path, "w", newline="")
        writer = csv.writer(history_file)
        writer.writerow(["step", "ce", "skd", "total"])
    try:
        for epoch in range(config.epochs):
            order = batch_rng.permutation(dataset.n)
            for lo in range(0, dataset.n, config.batch):
                idx = order[lo : lo + config.batch]
                xb = Tensor(dataset.images.data[idx])
                yb = Tensor(labels_1h[idx])
                if distilling:
                    # auxiliary forward runs outside any tape: pure inference
                    aux_logits = forward(params_aux, student_spec, xb)
                    p_aux = T.softmax_temperature(aux_logits, config.tau).detach()
                with Tape() as tape:
                    logits = forward(params_main, student_spec, xb)
                    p_ce = T.softmax_temperature(logits, ce_tau)
                    l_ce = ce_loss(p_ce, yb)
                    if distilling:
                        p_kd = p_ce if ce_tau == config.tau else T.softmax_temperature(logits, config.tau)
                        l_skd = skd_loss(p_kd, p_aux)
                        l_total = total_loss(l_ce, l_skd, config.alpha, config.tau)
                    else:
                        l_skd = None
                        l_total = l_ce
                backward(l_total, tape)
                sgd_step(params_main, config.eta)
                if distilling:
                    ema_update(params_aux, params_main, config.beta)
                row = (
                    step,
                    l_ce.item(),
                    l_skd.item() if l_skd is not None else 0.0,
                    l_total.item(),
                )
                history.append(row)
                if writer is not None:
                    writer.writerow(row)
                step += 1
            if distilling:
                gap = max(
                    float(np.abs(params_main[n].data - params_aux[n].data).max())
                    for n in params_main
                )
                aux_gap.append((step, gap))
            if (
                checkpoint_dir is not None
                and config.checkpoint_every
                and (epoch + 1) % config.checkpoint_every == 0
            ):
                write_archive(params_main, f"{checkpoint_dir}/epoch{epoch + 1:04d}.nta")
    finally:
        if history_file is not None:
            history_file.close()
    return TrainState(step, params_main, params_aux, history, aux_gap)
