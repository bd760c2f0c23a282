"""Optimisation: Adam, the epoch loop with early stopping, fine-tuning."""

import functools
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import Checkpoint
from .data import epoch_batches
from .errors import ContractError, NumericalError
from .model import TAU_MAX, TAU_MIN, encode_modality
from .objective import dfe_loss
from .rng import STREAM_HEAD, STREAM_SHUFFLE, STREAM_SPLIT, get_state, make_rng, set_state

log = logging.getLogger(__name__)

LOG_TAU_MIN, LOG_TAU_MAX = math.log(TAU_MIN), math.log(TAU_MAX)


@functools.lru_cache(maxsize=None)
def log_tau_bounds(dtype):
    """Clamp bounds for ``log_tau`` representable in ``dtype``.

    The bounds are rounded inwards so that exp() of a clamped value never
    leaves [TAU_MIN, TAU_MAX], neither in ``dtype`` nor in 64-bit.
    """
    dt = np.dtype(dtype)

    def inside(x, lo):
        vals = (float(np.exp(x)), math.exp(float(x)))
        return all(v >= TAU_MIN for v in vals) if lo else all(v <= TAU_MAX for v in vals)

    lo, hi = dt.type(LOG_TAU_MIN), dt.type(LOG_TAU_MAX)
    while not inside(lo, True):
        lo = np.nextafter(lo, dt.type(0))
    while not inside(hi, False):
        hi = np.nextafter(hi, dt.type(0))
    return lo, hi


@dataclass
class TrainConfig:
    batch_k: int = 64
    max_epochs: int = 500
    patience: int = 20
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps_opt: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.1
    precision: int = 32
    min_delta: float = 1e-5
    max_grad_norm: float | None = None

    def validate(self):
        if self.batch_k < 1:
            raise ContractError("batch_k must be positive")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if self.lr < 0:
            raise ContractError("lr must be nonnegative")
        if self.max_epochs < 0:
            raise ContractError("max_epochs must be nonnegative")
        if self.precision not in (32, 64):
            raise ContractError("precision must be 32 or 64")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# ---------------------------------------------------------------- Adam


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, named):
        return cls({k: np.zeros_like(t.data) for k, t in named.items()}, {k: np.zeros_like(t.data) for k, t in named.items()}, 0)


def clip_grad_norm(named, max_norm):
    total = math.sqrt(sum(float((t.grad.astype(np.float64) ** 2).sum()) for t in named.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for t in named.values():
            t.grad *= t.grad.dtype.type(scale)
    return total


def adam_step(named, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected Adam update of every tensor in ``named``, in place.

    Gradients are read from ``tensor.grad``.  A tensor named ``log_tau`` is
    clamped afterwards so that ``exp(log_tau)`` stays in [0.01, 100].
    """
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, t in named.items():
        g = t.grad
        if g is None:
            raise ContractError(f"{name} has no gradient")
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        t.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(t.dtype)
    if "log_tau" in named:
        lt = named["log_tau"].data
        np.clip(lt, *log_tau_bounds(lt.dtype), out=lt)


# ---------------------------------------------------------------- contrastive training


def split_train_val(data, val_fraction, seed):
    """Seeded disjoint train/val split of a set."""
    n_val = int(round(val_fraction * data.n))
    if n_val < 1 or n_val >= data.n:
        raise ContractError(f"val_fraction={val_fraction} leaves an empty split for n={data.n}")
    perm = make_rng(seed, STREAM_SPLIT).permutation(data.n)
    return data.subset(np.sort(perm[n_val:]), "train"), data.subset(np.sort(perm[:n_val]), "val")


def _as_batch(array, dtype):
    return Tensor(array, dtype=dtype)


def validation_loss(params, data, batch_k):
    """Mean objective over consecutive blocks of ``batch_k`` rows, without gradient."""
    if data.n == 0:
        raise ContractError("empty validation set")
    total, dtype = 0.0, params.dtype
    with ag.no_grad():
        for start in range(0, data.n, batch_k):
            sl = slice(start, start + batch_k)
            rep = dfe_loss(params, _as_batch(data.m1[sl], dtype), _as_batch(data.m2[sl], dtype))
            total += float(rep.total.data) * (min(start + batch_k, data.n) - start)
    return total / data.n


@dataclass
class FitResult:
    params: object
    history: list
    initial_val_loss: float
    best_val_loss: float
    stopped_early: bool


class Trainer:
    """Owns the parameters, optimiser and sampler state of one training run."""

    def __init__(self, params, train, val, config):
        config.validate()
        if val is None or val.n == 0:
            raise ContractError("a non-empty validation set is required")
        if config.batch_k > train.n:
            raise ContractError(f"batch_k={config.batch_k} exceeds n_train={train.n}")
        self.params = params
        self.train = train
        self.val = val
        self.config = config
        self.named = params.named_tensors()
        self.opt = OptimizerState.zeros_like(self.named)
        self.rng = make_rng(config.seed, STREAM_SHUFFLE)
        self.epoch = 0
        self.best_val = math.inf
        self.best_state = params.state_dict()
        self.bad_epochs = 0
        self.initial_val = None
        self.history = []

    def step(self, idx):
        dtype = self.params.dtype
        self.params.zero_grad()
        rep = dfe_loss(self.params, _as_batch(self.train.m1[idx], dtype), _as_batch(self.train.m2[idx], dtype))
        loss = float(rep.total.data)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss {loss} at epoch {self.epoch + 1}, step {self.opt.step + 1}")
        rep.total.backward()
        if self.config.max_grad_norm is not None:
            clip_grad_norm(self.named, self.config.max_grad_norm)
        cfg = self.config
        adam_step(self.named, self.opt, cfg.lr, cfg.betas, cfg.eps_opt)
        return loss

    def train_epoch(self):
        losses = [self.step(idx) for idx in epoch_batches(self.train.n, self.config.batch_k, self.rng)]
        return float(np.mean(losses))

    def run_epoch(self):
        """One epoch plus validation and early-stopping bookkeeping."""
        if self.initial_val is None:
            self.initial_val = validation_loss(self.params, self.val, self.config.batch_k)
        train_loss = self.train_epoch()
        val_loss = validation_loss(self.params, self.val, self.config.batch_k)
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {self.epoch + 1}")
        self.epoch += 1
        if val_loss < self.best_val - self.config.min_delta:
            self.best_val = val_loss
            self.best_state = self.params.state_dict()
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        rec = {"epoch": self.epoch, "train_loss": train_loss, "val_loss": val_loss, "tau": self.params.tau(), "steps": self.opt.step}
        self.history.append(rec)
        log.debug("epoch %d train %.6f val %.6f tau %.4f", self.epoch, train_loss, val_loss, rec["tau"])
        return rec

    @property
    def should_stop(self):
        return self.bad_epochs >= self.config.patience

    def fit(self, on_epoch=None):
        while self.epoch < self.config.max_epochs and not self.should_stop:
            rec = self.run_epoch()
            if on_epoch is not None:
                on_epoch(self, rec)
        if self.initial_val is None:
            self.initial_val = validation_loss(self.params, self.val, self.config.batch_k)
        best = self.params.copy()
        best.load_state_dict(self.best_state)
        best_val = self.best_val if self.history else self.initial_val
        return FitResult(best, list(self.history), self.initial_val, best_val, self.should_stop)

    # -------------------------------------------------------- persistence
    def checkpoint(self):
        return Checkpoint(
            params=self.params.state_dict(),
            dfe_config=self.params.config.to_dict(),
            train_config=self.config.to_dict(),
            opt_m={k: v.copy() for k, v in self.opt.m.items()},
            opt_v={k: v.copy() for k, v in self.opt.v.items()},
            step=self.opt.step,
            epoch=self.epoch,
            best_val=self.best_val,
            best_params={k: v.copy() for k, v in self.best_state.items()},
            extra={
                "rng_state": get_state(self.rng),
                "bad_epochs": self.bad_epochs,
                "initial_val": self.initial_val,
                "history": self.history,
            },
        )

    @classmethod
    def from_checkpoint(cls, ckpt, train, val, config=None):
        params = ckpt.to_params()
        config = config or TrainConfig.from_dict(ckpt.train_config)
        tr = cls(params, train, val, config)
        tr.opt = OptimizerState({k: v.copy() for k, v in ckpt.opt_m.items()}, {k: v.copy() for k, v in ckpt.opt_v.items()}, ckpt.step)
        tr.epoch = ckpt.epoch
        tr.best_val = ckpt.best_val
        if ckpt.best_params is not None:
            tr.best_state = {k: v.copy() for k, v in ckpt.best_params.items()}
        extra = ckpt.extra or {}
        if "rng_state" in extra:
            set_state(tr.rng, extra["rng_state"])
        tr.bad_epochs = extra.get("bad_epochs", 0)
        tr.initial_val = extra.get("initial_val")
        tr.history = list(extra.get("history", []))
        return tr


def train_epoch(params, data, config, state=None, rng=None):
    """One pass over ``data`` in shuffled minibatches; returns the mean batch loss.

    ``state`` (an :class:`OptimizerState`) and ``rng`` persist across calls
    when supplied.
    """
    named = params.named_tensors()
    state = state if state is not None else OptimizerState.zeros_like(named)
    rng = rng if rng is not None else make_rng(config.seed, STREAM_SHUFFLE)
    dtype = params.dtype
    losses = []
    for idx in epoch_batches(data.n, config.batch_k, rng):
        params.zero_grad()
        rep = dfe_loss(params, _as_batch(data.m1[idx], dtype), _as_batch(data.m2[idx], dtype))
        if not math.isfinite(float(rep.total.data)):
            raise NumericalError("non-finite loss")
        rep.total.backward()
        if config.max_grad_norm is not None:
            clip_grad_norm(named, config.max_grad_norm)
        adam_step(named, state, config.lr, config.betas, config.eps_opt)
        losses.append(float(rep.total.data))
    return float(np.mean(losses))


def fit(params, data, config, val=None):
    """Train with early stopping; returns a :class:`FitResult`.

    Without ``val`` a seeded ``config.val_fraction`` of ``data`` is held out.
    ``params`` ends at the last epoch's state; ``result.params`` is the best.
    """
    if val is None:
        data, val = split_train_val(data, config.val_fraction, config.seed)
    return Trainer(params, data, val, config).fit()


# ---------------------------------------------------------------- classifier heads


@dataclass
class LinearHead:
    w: Tensor
    b: Tensor

    @classmethod
    def zeros(cls, d_in, num_classes, dtype):
        return cls(
            Tensor(np.zeros((d_in, num_classes)), requires_grad=True, dtype=dtype),
            Tensor(np.zeros(num_classes), requires_grad=True, dtype=dtype),
        )

    def named_tensors(self):
        return {"head.w": self.w, "head.b": self.b}

    def logits(self, feats):
        return ag.linear(feats, self.w, self.b)

    def predict(self, feats):
        feats = feats.data if isinstance(feats, Tensor) else feats
        return np.argmax(feats @ self.w.data + self.b.data, axis=1)


@dataclass
class ClassifierConfig:
    epochs: int = 100
    lr: float = 1e-2
    dfe_lr: float = 1e-3
    batch_k: int = 64
    eval_every: int = 20
    betas: tuple = (0.9, 0.999)
    eps_opt: float = 1e-8
    seed: int = 0


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy against integer labels."""
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = ag.tsum(ag.mul(Tensor(onehot), ag.log_softmax_rows(logits)))
    return ag.mul(picked, -1.0 / len(labels))


def accuracy(pred, labels):
    return float(np.mean(np.asarray(pred) == np.asarray(labels))) if len(labels) else 0.0


def train_classifier(features, labels, head, config, params=None, evaluate=None):
    """Shared loop behind the linear probe and fine-tuning.

    ``features(idx)`` returns the ``[k, d]`` feature tensor for training rows
    ``idx``.  When ``params`` is given its tensors are updated as well, at
    ``config.dfe_lr``.  ``evaluate()`` is called every ``eval_every`` epochs
    and after the last one; the returned curve lists ``(epoch, value)``.
    """
    labels = np.asarray(labels)
    head_named = head.named_tensors()
    head_opt = OptimizerState.zeros_like(head_named)
    dfe_named = params.named_tensors() if params is not None else {}
    dfe_opt = OptimizerState.zeros_like(dfe_named) if params is not None else None
    rng = make_rng(config.seed, STREAM_HEAD)
    curve = []
    for epoch in range(1, config.epochs + 1):
        for idx in epoch_batches(len(labels), min(config.batch_k, len(labels)), rng):
            for t in head_named.values():
                t.zero_grad()
            if params is not None:
                params.zero_grad()
            loss = cross_entropy(head.logits(features(idx)), labels[idx])
            loss.backward()
            adam_step(head_named, head_opt, config.lr, config.betas, config.eps_opt)
            if params is not None:
                adam_step(dfe_named, dfe_opt, config.dfe_lr, config.betas, config.eps_opt)
        if evaluate is not None and config.eval_every and epoch % config.eval_every == 0:
            curve.append((epoch, evaluate()))
    if evaluate is not None and (not curve or curve[-1][0] != config.epochs):
        curve.append((config.epochs, evaluate()))
    return curve


@dataclass
class FinetuneResult:
    params: object
    head: LinearHead
    curve: list
    final_accuracy: float


def _require_labels(data, what):
    if data.labels is None:
        raise ContractError(f"{what} needs labelled data")


def finetune(params, labeled, num_classes, config=None, test=None, freeze_dfe=False):
    """Train a fresh zero-initialised linear head jointly with the DFE.

    Modality-1 rows are the inputs.  With ``freeze_dfe`` only the head moves,
    which reproduces the linear probe.  ``params`` is copied, never mutated.
    Accuracy is measured on ``test`` (default: the training rows).
    """
    config = config or ClassifierConfig()
    _require_labels(labeled, "finetune")
    test = test if test is not None else labeled
    _require_labels(test, "finetune evaluation")
    params = params.copy()
    dtype = params.dtype
    head = LinearHead.zeros(params.config.d_out, num_classes, dtype)

    def features(idx):
        x = Tensor(labeled.m1[idx], dtype=dtype)
        if freeze_dfe:
            with ag.no_grad():
                return encode_modality(params, x, 1)
        return encode_modality(params, x, 1)

    def evaluate():
        return accuracy(head.predict(encode_features(params, test.m1)), test.labels)

    curve = train_classifier(features, labeled.labels, head, config, None if freeze_dfe else params, evaluate)
    return FinetuneResult(params, head, curve, curve[-1][1])


def encode_features(params, rows, modality=1, batch=512):
    """Encode raw rows without gradient, in blocks, as a numpy array."""
    out = []
    with ag.no_grad():
        for start in range(0, len(rows), batch):
            out.append(encode_modality(params, Tensor(rows[start : start + batch], dtype=params.dtype), modality).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.config.d_out), dtype=params.dtype)

