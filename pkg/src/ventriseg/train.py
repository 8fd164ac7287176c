"""Optimization protocol: warmup cross-entropy, then soft Dice, Adam with a
staged learning-rate schedule, full-volume validation and early stopping on
the best validation Dice."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import coords as coords_mod
from . import infer as infer_mod
from . import metrics as metrics_mod
from .grid import Case
from .nets import Network

#: soft-Dice division guard
DICE_DELTA = 1e-10
#: probability floor applied before the log in the cross-entropy
PROB_FLOOR = 1e-12


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries the partial history."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    """Hyper-parameters of the optimization protocol.

    Defaults follow the reference protocol: 5000 warmup steps of
    cross-entropy, Adam(0.9, 0.999, 1e-8), learning rate 1e-4 until
    iteration 10000, 2e-5 until 20000, then 5e-6, and early stopping with a
    5000-iteration patience on the best validation Dice.
    """

    patch_shape: tuple[int, int, int] = (1, 128, 128)
    batch_size: int = 8
    warmup_steps: int = 5000
    lr_stages: tuple[tuple[int, float], ...] = ((0, 1e-4), (10000, 2e-5), (20000, 5e-6))
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    patience: int = 5000
    val_cadence: int = 500
    max_iterations: int = 30000
    seed: int = 0
    dice_delta: float = DICE_DELTA
    device: str = "cpu"
    strict_determinism: bool = False
    val_batch_slices: int = 16
    window_extent: int = 32       # z extent of 3D inference windows
    window_overlap: float = 0.75

    def __post_init__(self):
        self.patch_shape = tuple(int(v) for v in self.patch_shape)
        self.lr_stages = tuple((int(i), float(r)) for i, r in self.lr_stages)
        rates = [r for _, r in self.lr_stages]
        if any(r <= 0 for r in rates):
            raise ValueError("learning rates must be positive")
        if any(b > a for a, b in zip(rates, rates[1:])):
            raise ValueError("learning rates must be non-increasing across stages")
        if self.patience < self.val_cadence:
            raise ValueError("patience must be at least the validation cadence")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "patch_shape" in d:
            d["patch_shape"] = tuple(d["patch_shape"])
        if "lr_stages" in d:
            d["lr_stages"] = tuple(tuple(s) for s in d["lr_stages"])
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


@dataclass
class TrainHistory:
    """Per-iteration losses and the validation curve."""

    loss_names: list[str] = field(default_factory=list)
    loss_values: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    val_iterations: list[int] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)
    best_iteration: int = 0
    best_val_dice: float = float("-inf")
    stop_reason: str = ""
    wall_time_s: float = 0.0


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def soft_dice_loss(y, y_hat, delta: float = DICE_DELTA):
    """1 - 2*sum(y*y_hat) / (delta + sum(y) + sum(y_hat)).

    ``y`` is binary, ``y_hat`` holds class-1 probabilities; any shapes, the
    sums run over every element.  Works on numpy arrays and torch tensors
    and is differentiable in the latter case.
    """
    if isinstance(y_hat, torch.Tensor):
        y = y if isinstance(y, torch.Tensor) else torch.as_tensor(
            np.asarray(y), dtype=y_hat.dtype)
        y = y.to(y_hat.dtype)
        inter = (y * y_hat).sum()
        return 1.0 - 2.0 * inter / (delta + y.sum() + y_hat.sum())
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    inter = float((y * y_hat).sum())
    return 1.0 - 2.0 * inter / (delta + float(y.sum()) + float(y_hat.sum()))


def _class_axis(prob_shape, label_shape) -> int:
    """0 for a single (2, *spatial) field, 1 for a batched (B, 2, *spatial)."""
    if len(prob_shape) != len(label_shape) + 1:
        raise ValueError(
            f"cannot align labels {tuple(label_shape)} with probabilities {tuple(prob_shape)}"
        )
    if prob_shape[0] == 2 and tuple(prob_shape[1:]) == tuple(label_shape):
        return 0
    if prob_shape[1] == 2 and prob_shape[0] == label_shape[0] \
            and tuple(prob_shape[2:]) == tuple(label_shape[1:]):
        return 1
    raise ValueError(
        f"cannot align labels {tuple(label_shape)} with probabilities {tuple(prob_shape)}"
    )


def cross_entropy_loss(y, probabilities, floor: float = PROB_FLOOR):
    """Mean negative log-probability of the true class.

    ``probabilities`` is a softmax field, (2, *spatial) or (B, 2, *spatial);
    ``y`` holds 0/1 labels of the matching shape without the class axis.
    Probabilities are floored before the log.
    """
    if isinstance(probabilities, torch.Tensor):
        y_t = y if isinstance(y, torch.Tensor) else torch.as_tensor(np.asarray(y))
        axis = _class_axis(probabilities.shape, y_t.shape)
        fg = probabilities.select(axis, 1)
        bg = probabilities.select(axis, 0)
        p_true = torch.where(y_t.bool(), fg, bg)
        return -(torch.clamp(p_true, min=floor)).log().mean()
    y = np.asarray(y)
    p = np.asarray(probabilities, dtype=np.float64)
    axis = _class_axis(p.shape, y.shape)
    p_true = np.where(y.astype(bool), np.take(p, 1, axis=axis), np.take(p, 0, axis=axis))
    return float(-np.log(np.maximum(p_true, floor)).mean())


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Piecewise-constant learning rate; a stage boundary belongs to the
    later stage."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    rate = config.lr_stages[0][1]
    for start, r in config.lr_stages:
        if iteration >= start:
            rate = r
    return rate


# ---------------------------------------------------------------------------
# Patch sampling
# ---------------------------------------------------------------------------

def sample_patch(case: Case, patch_shape, rng: np.random.Generator,
                 cppn_channels: np.ndarray | None = None):
    """Draw one uniformly located patch with its aligned coordinate crop.

    Returns (image_patch, label_patch, coord_patch); the coordinate crop is
    taken from ``cppn_channels`` (the full-volume 9-channel field, computed
    once per side and reused).
    """
    shape = case.volume.shape
    patch_shape = tuple(int(v) for v in patch_shape)
    for p, s in zip(patch_shape, shape):
        if p > s:
            raise ValueError(f"patch shape {patch_shape} exceeds volume shape {shape}")
    origin = tuple(int(rng.integers(0, s - p + 1)) for p, s in zip(patch_shape, shape))
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_shape))
    img = case.volume.data[sl]
    lab = case.labels.data[sl]
    coord = None
    if cppn_channels is not None:
        coord = cppn_channels[(slice(None),) + sl]
    return img, lab, coord


def _make_batch(cases, cfg: TrainConfig, rng, cppn_channels, dims: int):
    imgs, labs, crds = [], [], []
    for _ in range(cfg.batch_size):
        case = cases[int(rng.integers(0, len(cases)))]
        img, lab, crd = sample_patch(case, cfg.patch_shape, rng, cppn_channels)
        if dims == 2:  # drop the singleton z axis of (1, H, W) patches
            img, lab = img[0], lab[0]
            crd = None if crd is None else crd[:, 0]
        imgs.append(img[None])
        labs.append(lab)
        crds.append(crd)
    x = np.stack(imgs).astype(np.float32)
    y = np.stack(labs).astype(np.float32)
    c = None if crds[0] is None else np.stack(crds).astype(np.float32)
    return x, y, c


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _default_validate(net: Network, val_cases, cfg: TrainConfig):
    dices = []
    for case in val_cases:
        if net.spec.family == "unet2d":
            _, pred = infer_mod.segment_2d(net, case.volume,
                                           batch_slices=cfg.val_batch_slices)
        else:
            _, pred = infer_mod.segment_3d(net, case.volume,
                                           extent=cfg.window_extent,
                                           overlap=cfg.window_overlap)
        dices.append(metrics_mod.dice(case.labels, pred))
    return float(np.mean(dices))


def train(net: Network, datasets, config: TrainConfig,
          validate_fn=None, log_path=None):
    """Optimize ``net`` and return ``(best_checkpoint, history)``.

    ``datasets`` is ``(train_cases, val_cases)``.  The loss is the
    cross-entropy for the first ``warmup_steps`` iterations and the soft
    Dice afterwards.  Every ``val_cadence`` iterations the whole validation
    set is segmented and the mean Dice recorded; training stops when no new
    best appears within ``patience`` iterations, or at ``max_iterations``.
    The returned checkpoint is the best-validation one.

    ``validate_fn(net, val_cases, cfg) -> float`` may replace the
    full-volume validation (used by protocol tests and schedulers).
    """
    from . import checkpoint as ckpt_mod

    train_cases, val_cases = datasets
    if not train_cases:
        raise ValueError("training set is empty")
    if not val_cases:
        raise ValueError("validation set is empty")
    if validate_fn is None:
        validate_fn = _default_validate

    if config.strict_determinism:
        torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    side = train_cases[0].volume.shape[0]
    cppn_channels = None
    if net.spec.use_cppn:
        cppn_channels = coords_mod.cached_cppn_input(side).channels
    dims = net.spec.spatial_dims

    optimizer = torch.optim.Adam(
        net.parameters(), lr=config.lr_stages[0][1],
        betas=config.adam_betas, eps=config.adam_eps,
    )

    history = TrainHistory()
    best_ckpt = None
    log_file = open(log_path, "w") if log_path else None
    t0 = time.perf_counter()
    dtype = next(net.parameters()).dtype

    try:
        iteration = 0
        while iteration < config.max_iterations:
            x, y, c = _make_batch(train_cases, config, rng, cppn_channels, dims)
            xt = torch.as_tensor(x, dtype=dtype)
            yt = torch.as_tensor(y, dtype=dtype)
            ct = None if c is None else torch.as_tensor(c, dtype=dtype)

            lr = lr_at(iteration, config)
            for group in optimizer.param_groups:
                group["lr"] = lr

            net.train(True)
            probs = net(xt, ct)
            if iteration < config.warmup_steps:
                loss_name = "cross_entropy"
                loss = cross_entropy_loss(yt, probs)
            else:
                loss_name = "soft_dice"
                loss = soft_dice_loss(yt, probs[:, 1], delta=config.dice_delta)
            loss_value = float(loss.detach())

            history.loss_names.append(loss_name)
            history.loss_values.append(loss_value)
            history.learning_rates.append(lr)

            if not np.isfinite(loss_value):
                history.stop_reason = "non_finite_loss"
                raise TrainingDiverged(
                    f"loss became non-finite at iteration {iteration}", history
                )

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            net.eval()
            iteration += 1

            validated = iteration % config.val_cadence == 0
            if validated:
                vd = float(validate_fn(net, val_cases, config))
                history.val_iterations.append(iteration)
                history.val_dice.append(vd)
                if vd > history.best_val_dice:
                    history.best_val_dice = vd
                    history.best_iteration = iteration
                    best_ckpt = ckpt_mod.Checkpoint.capture(
                        net, iteration=iteration, optimizer=optimizer,
                        numpy_rng=rng, extra={"val_dice": vd},
                    )
            if log_file:
                line = f"iter={iteration} loss={loss_name} value={loss_value:.6f} lr={lr:g}"
                if validated:
                    line += f" val_dice={history.val_dice[-1]:.6f}"
                log_file.write(line + "\n")

            if (history.best_iteration > 0
                    and iteration - history.best_iteration >= config.patience):
                history.stop_reason = "early_stop"
                break
        else:
            history.stop_reason = "max_iterations"
        if not history.stop_reason:
            history.stop_reason = "max_iterations"
    finally:
        history.wall_time_s = time.perf_counter() - t0
        if log_file:
            log_file.close()

    if best_ckpt is None:
        # No validation point was ever recorded (max_iterations < cadence).
        best_ckpt = ckpt_mod.Checkpoint.capture(
            net, iteration=len(history.loss_values), optimizer=optimizer,
            numpy_rng=rng, extra={"val_dice": float("nan")},
        )
    return best_ckpt, history
