"""Training: k-space MSE, Adam with inverse-time learning-rate decay, early stopping,
and fresh Poisson-disc masks for every sample on every epoch.
"""
import contextlib
import csv
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .cascade import _pad_kspace, cascade_graph, keep_weights, pack
from .data import ImageVolume, KSpaceVolume
from .errors import DivergenceError, ParameterError, ShapeError
from .network import read_tensors, write_tensors
from .sampling import epoch_mask_seed, fixed_mask_seed, poisson_disc_mask

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    decay: float = 1e-6
    max_epochs: int = 50
    patience: int = 5
    batch_size: int = 4
    seed: int = 0
    r: float = 4.0
    center_radius: int = 16

    def __post_init__(self):
        if self.lr < 0 or self.decay < 0:
            raise ParameterError("learning rate and decay must be nonnegative")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ParameterError("epochs, patience and batch size must be positive")
        if self.patience > self.max_epochs:
            raise ParameterError("patience cannot exceed the epoch budget")
        if self.r < 1:
            raise ParameterError("acceleration must be >= 1")


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0

    @property
    def best_val(self):
        return min(self.val_loss) if self.val_loss else float("inf")

    def record(self, epoch, train_loss, val_loss, seconds):
        self.epochs.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.seconds.append(seconds)

    def rows(self):
        return list(zip(self.epochs, self.train_loss, self.val_loss, self.seconds))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "seconds"])
            for epoch, tl, vl, sec in self.rows():
                writer.writerow([epoch, repr(float(tl)), repr(float(vl)), f"{sec:.3f}"])


def mse_loss(pred, target, n=None):
    """``(1/N) sum ||pred_i - target_i||^2``, N = leading (sample) extent; complex errors use |.|^2."""
    p = pred.data if isinstance(pred, (KSpaceVolume, ImageVolume)) else np.asarray(pred)
    t = target.data if isinstance(target, (KSpaceVolume, ImageVolume)) else np.asarray(target)
    if p.shape != t.shape:
        raise ShapeError(f"loss shapes differ: {p.shape} vs {t.shape}")
    d = (p - t).astype(np.complex128 if np.iscomplexobj(p) or np.iscomplexobj(t) else np.float64)
    n = p.shape[0] if n is None else n
    return float(np.sum(d.real**2 + d.imag**2) / n) if np.iscomplexobj(d) else float(np.sum(d * d) / n)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def decayed_lr(config, t):
    """Learning rate for update number ``t`` (1-based), counting the ``t - 1`` updates already applied."""
    return config.lr / (1.0 + config.decay * (t - 1))


def adam_step(params, grads, state, config):
    """One bias-corrected Adam update, in place on ``params`` (name -> array)."""
    state.t += 1
    t = state.t
    lr = decayed_lr(config, t)
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        step = (lr * (m / c1) / (np.sqrt(v / c2) + EPSILON)).astype(p.dtype, copy=False)
        p -= step
    return params, state


def as_slices(dataset):
    """Stack volumes into one complex ``[N, Nc, Ny, Nz]`` array of slices."""
    if isinstance(dataset, KSpaceVolume):
        return dataset.data
    if isinstance(dataset, np.ndarray):
        return dataset
    arrays = [v.data if isinstance(v, KSpaceVolume) else np.asarray(v) for v in dataset]
    if not arrays:
        raise ParameterError("empty dataset")
    return np.concatenate(arrays, axis=0)


@contextlib.contextmanager
def deterministic_mode(enabled=True):
    """Single-threaded numerics so repeated runs are bit-identical."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield


def _masks(ny, nz, config, seeds):
    return np.stack([poisson_disc_mask(ny, nz, config.r, config.center_radius, s).grid for s in seeds])


def _loss_graph(model, full, masks):
    """k-space MSE of the cascade output against the fully sampled target."""
    spec = model.spec
    n, nc, ny, nz = full.shape
    window = None
    if model.needs_multiple_of_8:
        full, window = _pad_kspace(full, ny, nz)
        masks, _ = _pad_kspace(masks, ny, nz)
    x_u = np.where(masks[:, None], full, 0)
    packed_u = pack(x_u, spec.config).astype(model.dtype, copy=False)
    target = pack(full, spec.config).astype(model.dtype, copy=False)
    keep = keep_weights(masks, n, nc, spec.config, model.dtype)
    out = cascade_graph(model, packed_u, keep)
    if window is not None:
        # padding rows carry no measured signal; leave them out of the loss
        inside = np.zeros(full.shape[-2:], dtype=model.dtype)
        a, h, c, w = window
        inside[a : a + h, c : c + w] = 1
        out = ag.mul_const(out, inside)
    return ag.mse(out, target, n)


def evaluate_loss(model, full, masks, batch_size):
    total = 0.0
    with ag.no_grad():
        for start in range(0, len(full), batch_size):
            sl = slice(start, start + batch_size)
            total += float(_loss_graph(model, full[sl], masks[sl]).data) * len(full[sl])
    return total / len(full)


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    epoch: int = 0
    adam: AdamState = field(default_factory=AdamState)
    best_state: dict = None
    best_val: float = float("inf")
    wait: int = 0
    history: TrainHistory = field(default_factory=TrainHistory)
    stopped: bool = False


def save_train_state(path, model, state):
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"m/{k}": v for k, v in state.adam.m.items()})
    tensors.update({f"v/{k}": v for k, v in state.adam.v.items()})
    if state.best_state is not None:
        tensors.update({f"best/{k}": v for k, v in state.best_state.items()})
    h = state.history
    meta = {
        "epoch": state.epoch,
        "adam_t": state.adam.t,
        "best_val": repr(state.best_val),
        "wait": state.wait,
        "stopped": int(state.stopped),
        "stop_epoch": h.stop_epoch,
        "best_epoch": h.best_epoch,
        "history": ";".join(f"{e},{tl!r},{vl!r},{s!r}" for e, tl, vl, s in h.rows()),
    }
    write_tensors(path, tensors, meta)


def load_train_state(path, model):
    meta, tensors = read_tensors(path)
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    model.load_state_dict(params)
    adam = AdamState(
        m={k[2:]: v.copy() for k, v in tensors.items() if k.startswith("m/")},
        v={k[2:]: v.copy() for k, v in tensors.items() if k.startswith("v/")},
        t=int(meta["adam_t"]),
    )
    best = {k[5:]: v.copy() for k, v in tensors.items() if k.startswith("best/")} or None
    history = TrainHistory(stop_epoch=int(meta["stop_epoch"]), best_epoch=int(meta["best_epoch"]))
    for row in filter(None, meta["history"].split(";")):
        e, tl, vl, s = row.split(",")
        history.record(int(e), float(tl), float(vl), float(s))
    return TrainState(
        epoch=int(meta["epoch"]),
        adam=adam,
        best_state=best,
        best_val=float(meta["best_val"]),
        wait=int(meta["wait"]),
        history=history,
        stopped=bool(int(meta["stopped"])),
    )


def train(model, train_set, val_set, config, state=None, on_epoch_end=None, log=None):
    """Fit ``model`` in place; returns ``(best_model, history)``.

    Epoch ``e`` draws the mask for training sample ``i`` from seed
    ``epoch_mask_seed(config.seed, e, i)``; validation masks are drawn once.
    Stops after ``patience`` epochs without a strict validation improvement.
    Pass a :class:`TrainState` (from :func:`load_train_state`) to resume.
    """
    full = as_slices(train_set)
    val = as_slices(val_set)
    if len(full) == 0 or len(val) == 0:
        raise ParameterError("training and validation sets must be nonempty")
    if full.shape[1:] != val.shape[1:]:
        raise ShapeError(f"training slices {full.shape[1:]} and validation slices {val.shape[1:]} differ")
    _, nc, ny, nz = full.shape
    if model.spec.config == "MC" and nc != model.spec.nc:
        raise ShapeError(f"MC model expects {model.spec.nc} coils, data has {nc}")
    val_masks = _masks(ny, nz, config, [fixed_mask_seed(config.seed, i) for i in range(len(val))])
    state = state or TrainState()
    history = state.history
    params = {k: t for k, t in model.parameters().items()}

    epoch = state.epoch
    while epoch < config.max_epochs and not state.stopped:
        epoch += 1
        tic = time.perf_counter()
        order = np.random.default_rng(np.random.SeedSequence([config.seed, 0x0DE7, epoch])).permutation(len(full))
        running = 0.0
        for step, start in enumerate(range(0, len(full), config.batch_size), 1):
            idx = np.sort(order[start : start + config.batch_size])
            masks = _masks(ny, nz, config, [epoch_mask_seed(config.seed, epoch, i) for i in idx])
            for t in params.values():
                t.grad = None
            loss = _loss_graph(model, full[idx], masks)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}", epoch=epoch, step=step)
            loss.backward()
            adam_step(
                {k: t.data for k, t in params.items()},
                {k: t.grad for k, t in params.items()},
                state.adam,
                config,
            )
            running += value * len(idx)
        train_loss = running / len(full)
        val_loss = evaluate_loss(model, val, val_masks, config.batch_size)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
        history.record(epoch, train_loss, val_loss, time.perf_counter() - tic)
        if val_loss < state.best_val:
            state.best_val = val_loss
            state.best_state = model.state_dict()
            history.best_epoch = epoch
            state.wait = 0
        else:
            state.wait += 1
            if state.wait >= config.patience:
                state.stopped = True
        history.stop_epoch = epoch
        state.epoch = epoch
        if log is not None:
            log(f"epoch {epoch}: train {train_loss:.6g} val {val_loss:.6g} ({history.seconds[-1]:.1f}s)")
        if on_epoch_end is not None:
            on_epoch_end(model, state)

    best = model.copy()
    if state.best_state is not None:
        best.load_state_dict(state.best_state)
    return best, history
