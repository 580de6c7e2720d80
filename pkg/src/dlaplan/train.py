"""Adam, the alternating generator / two-discriminator loop, and evaluation."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .adversarial import (
    AdvWeights,
    Discriminator,
    NoiseConfig,
    adversarial_term,
    adversarial_term_grad,
    disc_loss_grad,
    loss_d1,
    loss_d2,
    loss_generator_total,
    loss_seg,
    loss_seg_grad,
    patch_noise_backward,
    patch_noise_forward,
    smooth_labels,
)
from .blocks import FusedModelError, SegModel
from .checkpoint import save_checkpoint
from .io_utils import atomic_write_text
from .metrics import HeadMetrics, Metrics
from .tensor import ShapeError

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, last_finite):
        super().__init__(f"non-finite loss at iteration {iteration}; last finite losses: {last_finite}")
        self.iteration = iteration
        self.last_finite = last_finite


# -- Adam ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(params):
    return AdamState({k: np.zeros_like(p) for k, p in params.items()},
                     {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state: AdamState, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.0):
    """Bias-corrected Adam update, applied in place to every array in ``params``."""
    if set(params) != set(grads):
        raise ShapeError(f"parameter / gradient names differ: {sorted(set(params) ^ set(grads))}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
        if weight_decay:
            g = g + weight_decay * p
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# -- configuration --------------------------------------------------------------------

@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 64, 128)
    disc_blocks: str = "desk"
    disc_width: int = 8
    disc_stem_stride: int = 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ConfigError(f"model.channels must be four positive widths, got {self.channels}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    iterations: int = 500
    batch_size: int = 8
    seed: int = 42
    eval_every: int = 100
    checkpoint_dir: str | None = None
    adv: AdvWeights = field(default_factory=AdvWeights)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"train.learning_rate must be > 0, got {self.learning_rate}")
        if int(self.iterations) < 1:
            raise ConfigError(f"train.iterations must be >= 1, got {self.iterations}")
        if int(self.batch_size) < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if int(self.eval_every) < 1:
            raise ConfigError(f"train.eval_every must be >= 1, got {self.eval_every}")

    _SECTIONS = {"adv": AdvWeights, "noise": NoiseConfig, "model": ModelConfig}

    def to_dict(self):
        d = asdict(self)
        out = {"train": {k: v for k, v in d.items() if k not in self._SECTIONS}}
        for name in self._SECTIONS:
            out[name] = d[name]
        out["model"]["channels"] = list(out["model"]["channels"])
        return out

    @classmethod
    def from_dict(cls, d):
        """Build from ``{"train": {...}, "adv": {...}, "noise": {...}, "model": {...}}``.

        Unknown sections or keys raise :class:`ConfigError`.
        """
        allowed = {"train"} | set(cls._SECTIONS)
        for sec in d:
            if sec not in allowed:
                raise ConfigError(f"unknown config section {sec!r}")
        scalars = {f.name for f in fields(cls)} - set(cls._SECTIONS)
        train_part = dict(d.get("train", {}))
        for k in train_part:
            if k not in scalars:
                raise ConfigError(f"unknown config key 'train.{k}'")
        kwargs = dict(train_part)
        for sec, typ in cls._SECTIONS.items():
            part = dict(d.get(sec, {}))
            known = {f.name for f in fields(typ)}
            for k in part:
                if k not in known:
                    raise ConfigError(f"unknown config key '{sec}.{k}'")
            try:
                kwargs[sec] = typ(**part)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{sec}: {exc}") from None
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


# -- training loop ----------------------------------------------------------------

HISTORY_FIELDS = ("iteration", "l_seg", "l_adv1", "l_adv2", "l_d1", "l_d2")


@dataclass
class TrainResult:
    model: SegModel
    d1: Discriminator | None
    d2: Discriminator | None
    history: list  # rows of HISTORY_FIELDS
    evals: list = field(default_factory=list)  # (iteration, Metrics)

    def column(self, name):
        i = HISTORY_FIELDS.index(name)
        return np.array([row[i] for row in self.history])


def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for row in history:
        w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return buf.getvalue()


def smoothed(values, window=50):
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        window = len(values)
    return np.convolve(values, np.ones(window) / window, mode="valid")


def _seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def build_networks(cfg: TrainConfig, n_boundary, n_room):
    s_model, s_d1, s_d2 = _seeds(cfg.seed, 5)[:3]
    m = cfg.model
    model = SegModel(m.channels, 3, n_boundary, n_room, seed=s_model)
    d1 = Discriminator(n_boundary + n_room, m.disc_blocks, m.disc_width, m.disc_stem_stride, seed=s_d1)
    d2 = Discriminator(n_boundary + n_room, m.disc_blocks, m.disc_width, m.disc_stem_stride, seed=s_d2)
    return model, d1, d2


class _Batches:
    """Shuffled epochs over ``n`` indices; a wrapped final batch tops up from the next epoch."""

    def __init__(self, n, batch_size, rng):
        self.n, self.bs, self.rng = n, batch_size, rng
        self.queue = np.empty(0, dtype=np.int64)

    def next(self):
        while len(self.queue) < self.bs:
            self.queue = np.concatenate([self.queue, self.rng.permutation(self.n)])
        idx, self.queue = self.queue[:self.bs], self.queue[self.bs:]
        return np.sort(idx)


def _check_finite(it, last_finite, values):
    if not np.all(np.isfinite(values)):
        raise TrainingDiverged(it, last_finite)


def train(cfg: TrainConfig, dataset, model=None, d1=None, d2=None, eval_dataset=None,
          callback=None) -> TrainResult:
    """Alternate one generator step with one D1 and one D2 step per iteration.

    A discriminator whose adversarial weight is zero is never called.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    n_b, n_r = dataset.n_boundary, dataset.n_room
    built = build_networks(cfg, n_b, n_r)
    model = model if model is not None else built[0]
    if model.fused:
        raise FusedModelError("cannot train a fused model")
    if (model.n_boundary, model.n_room) != (n_b, n_r):
        raise ConfigError(f"model classes ({model.n_boundary}, {model.n_room}) != dataset ({n_b}, {n_r})")
    lam1, lam2 = cfg.adv.lambda_adv1, cfg.adv.lambda_adv2
    use_d1, use_d2 = lam1 > 0, lam2 > 0
    d1 = (d1 if d1 is not None else built[1]) if use_d1 else None
    d2 = (d2 if d2 is not None else built[2]) if use_d2 else None

    _, _, _, s_batch, s_noise = _seeds(cfg.seed, 5)
    batches = _Batches(len(dataset), min(cfg.batch_size, len(dataset)), np.random.default_rng(s_batch))
    noise_rng = np.random.default_rng(s_noise)
    opt = dict(lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
               weight_decay=cfg.weight_decay)
    g_params = dict(model.named_params())
    g_state = adam_init(g_params)
    d1_params = dict(d1.named_params()) if use_d1 else None
    d1_state = adam_init(d1_params) if use_d1 else None
    d2_params = dict(d2.named_params()) if use_d2 else None
    d2_state = adam_init(d2_params) if use_d2 else None

    result = TrainResult(model, d1, d2, [])
    last_finite = None
    for it in range(1, int(cfg.iterations) + 1):
        x, yb, yr = dataset.batch(batches.next())
        n = len(x)
        sm = cfg.adv.label_smoothing
        real = np.concatenate([smooth_labels(yb, sm), smooth_labels(yr, sm)], axis=1)

        # generator step
        pb, pr = model.forward(x, train=True)
        l_seg = loss_seg(pb, yb) + loss_seg(pr, yr)
        _check_finite(it, last_finite, l_seg)
        g_pb, g_pr = loss_seg_grad(pb, yb), loss_seg_grad(pr, yr)
        pred = np.concatenate([pb, pr], axis=1)
        l_adv1 = l_adv2 = l_d1 = l_d2 = 0.0
        d1_pred = d2_noisy = noisy = None
        if use_d1:
            d1_pred = d1.forward(pred, train=True)
            _check_finite(it, last_finite, d1_pred)
            l_adv1 = adversarial_term(d1_pred)
            g = d1.backward(lam1 * adversarial_term_grad(d1_pred))
            g_pb, g_pr = g_pb + g[:, :n_b], g_pr + g[:, n_b:]
        if use_d2:
            nb, ctx_b = patch_noise_forward(pb, cfg.noise, noise_rng)
            nr, ctx_r = patch_noise_forward(pr, cfg.noise, noise_rng)
            noisy = np.concatenate([nb, nr], axis=1)
            d2_noisy = d2.forward(noisy, train=True)
            _check_finite(it, last_finite, d2_noisy)
            l_adv2 = adversarial_term(d2_noisy)
            g = d2.backward(lam2 * adversarial_term_grad(d2_noisy))
            g_pb = g_pb + patch_noise_backward(g[:, :n_b], ctx_b)
            g_pr = g_pr + patch_noise_backward(g[:, n_b:], ctx_r)
        total = loss_generator_total(l_seg, d1_pred, d2_noisy, cfg.adv)
        if not math.isfinite(total):
            raise TrainingDiverged(it, last_finite)
        model.backward(g_pb, g_pr)
        adam_step(g_params, dict(model.named_grads()), g_state, **opt)

        # discriminator steps on detached maps: fakes first, ground truth second
        if use_d1:
            d = d1.forward(np.concatenate([pred, real]), train=True)
            _check_finite(it, last_finite, d)
            l_d1 = loss_d1(d[:n], d[n:])
            gf, gr = disc_loss_grad(d[:n], d[n:])
            d1.backward(np.concatenate([gf, gr]))
            adam_step(d1_params, dict(d1.named_grads()), d1_state, **opt)
        if use_d2:
            d = d2.forward(np.concatenate([noisy, real]), train=True)
            _check_finite(it, last_finite, d)
            l_d2 = loss_d2(d[:n], d[n:])
            gf, gr = disc_loss_grad(d[:n], d[n:])
            d2.backward(np.concatenate([gf, gr]))
            adam_step(d2_params, dict(d2.named_grads()), d2_state, **opt)

        row = (it, l_seg, l_adv1, l_adv2, l_d1, l_d2)
        if not all(math.isfinite(v) for v in row[1:]):
            raise TrainingDiverged(it, last_finite)
        last_finite = dict(zip(HISTORY_FIELDS, row))
        result.history.append(row)

        if it % cfg.eval_every == 0 or it == cfg.iterations:
            log.info("iter %d  l_seg %.4f  l_adv1 %.4f  l_adv2 %.4f  l_d1 %.4f  l_d2 %.4f", *row)
            if eval_dataset is not None:
                result.evals.append((it, evaluate(model, eval_dataset)))
            if cfg.checkpoint_dir:
                save_checkpoint(os.path.join(cfg.checkpoint_dir, f"iter_{it:06d}.ckpt"), model, d1, d2,
                                {"iteration": it})
        if callback is not None:
            callback(it, result)
    return result


def write_history(path, history):
    atomic_write_text(path, history_csv(history))


# -- evaluation ------------------------------------------------------------------------

def evaluate(model, dataset, batch_size=16) -> Metrics:
    """Argmax predictions (ties to the lowest class) scored with pooled counts."""
    if (model.n_boundary, model.n_room) != (dataset.n_boundary, dataset.n_room):
        raise ConfigError(
            f"checkpoint predicts ({model.n_boundary}, {model.n_room}) classes but the dataset has "
            f"({dataset.n_boundary}, {dataset.n_room})")
    mb = HeadMetrics(tuple(dataset.boundary_classes))
    mr = HeadMetrics(tuple(dataset.room_classes))
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        pred_b, pred_r = model.predict(dataset.images[sl])
        mb.add(pred_b, dataset.boundary[sl])
        mr.add(pred_r, dataset.room[sl])
    return Metrics(mb, mr)
