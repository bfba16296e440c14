"""Losses, Adam, the warmup-cosine schedule, paired augmentation and the training loop."""
from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autograd as ag
from .autograd import Graph, make, value
from .data import IGNORE
from .evaluation import ods_ois_ap
from .network import MS2Edge, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

EPS = 1e-6
LOSSES = ("BCE", "WCE", "FL", "HFL")


# losses ------------------------------------------------------------------------

def _prep(pred, gt):
    p = np.asarray(value(pred), np.float64)
    y = np.asarray(gt, np.float64)
    if p.shape != y.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {y.shape} differ in shape")
    valid = y != IGNORE
    y = np.where(valid, y, 0.0)
    pc = np.clip(p, EPS, 1 - EPS)
    inside = (p >= EPS) & (p <= 1 - EPS)     # clamp passes gradient only inside
    return p, pc, y, valid, inside


def _reduce(per_pixel, valid, reduction):
    n = int(valid.sum())
    if n == 0:
        warnings.warn("every ground-truth pixel is ignored; loss is 0")
        return 0.0, 0.0
    if reduction == "sum":
        return float(per_pixel[valid].sum()), 1.0
    if reduction == "mean":
        return float(per_pixel[valid].sum() / n), 1.0 / n
    raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def _node(pred, loss, grad):
    return make(np.asarray(loss, value(pred).dtype), (pred,),
                lambda g: (np.asarray(g * grad, value(pred).dtype),))


def _weighted_ce(pred, gt, w_pos, w_neg, reduction):
    p, pc, y, valid, inside = _prep(pred, gt)
    per = -(w_pos * y * np.log(pc) + w_neg * (1 - y) * np.log(1 - pc))
    loss, k = _reduce(per, valid, reduction)
    d = -(w_pos * y / pc - w_neg * (1 - y) / (1 - pc)) * (valid & inside) * k
    return _node(pred, loss, d)


def bce_loss(pred, gt, reduction="mean"):
    return _weighted_ce(pred, gt, 1.0, 1.0, reduction)


def _class_balance(gt):
    """beta = |Y-| / |Y| per image over non-ignored pixels, broadcast to gt's shape."""
    y = np.asarray(gt)
    flat = y.reshape((-1,) + y.shape[-3:])
    betas = []
    for img in flat:
        v = img != IGNORE
        n = int(v.sum())
        betas.append(np.sum(img[v] == 0) / n if n else 0.0)
    b = np.asarray(betas, np.float64).reshape(-1, 1, 1, 1)
    return np.broadcast_to(b, flat.shape).reshape(y.shape)


def wce_loss(pred, gt, reduction="mean"):
    """Class-balanced cross-entropy: positives weighted by beta, negatives by 1 - beta."""
    beta = _class_balance(gt)
    return _weighted_ce(pred, gt, beta, 1 - beta, reduction)


def focal_loss(pred, gt, gamma=2.0, alpha=0.5, reduction="mean"):
    """-a_t (1 - p_t)^gamma log p_t; alpha=None drops the class weighting."""
    p, pc, y, valid, inside = _prep(pred, gt)
    pt = np.where(y == 1, pc, 1 - pc)
    at = 1.0 if alpha is None else np.where(y == 1, alpha, 1 - alpha)
    mod = (1 - pt) ** gamma
    per = -at * mod * np.log(pt)
    loss, k = _reduce(per, valid, reduction)
    # d/dpt of -(1-pt)^g log pt, then dpt/dp = +-1
    dpt = at * (gamma * (1 - pt) ** (gamma - 1) * np.log(pt) - mod / pt) if gamma else -at / pt
    d = np.where(y == 1, dpt, -dpt) * (valid & inside) * k
    return _node(pred, loss, d)


def dice_term(pred, gt, eps=1e-6):
    """1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps) per image, averaged over the batch."""
    p = np.asarray(value(pred), np.float64)
    y = np.asarray(gt, np.float64)
    valid = y != IGNORE
    y = np.where(valid, y, 0.0)
    pm = p * valid
    axes = tuple(range(p.ndim - 3, p.ndim))
    inter = (pm * y).sum(axis=axes, keepdims=True)
    den = pm.sum(axis=axes, keepdims=True) + y.sum(axis=axes, keepdims=True) + eps
    num = 2 * inter + eps
    n_img = int(np.prod(p.shape[:-3])) if p.ndim > 3 else 1
    loss = float(np.mean(1 - num / den))
    d = -(2 * y * den - num) / den ** 2 * valid / n_img
    return _node(pred, loss, d)


def hybrid_loss(pred, gt, gamma=2.0, alpha=0.5):
    """Approximation of a hybrid focal loss: pixel-level focal term plus an image-level Dice term."""
    return ag.add(focal_loss(pred, gt, gamma, alpha), dice_term(pred, gt))


def loss_fn(kind):
    table = {"BCE": bce_loss, "WCE": wce_loss, "FL": focal_loss, "HFL": hybrid_loss}
    if kind not in table:
        raise ValueError(f"loss must be one of {LOSSES}, got {kind!r}")
    return table[kind]


# optimizer and schedule ------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = [np.zeros_like(p.data, np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, np.float64) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype)

    def state(self, names):
        out = {}
        for n, m, v in zip(names, self.m, self.v):
            out[f"adam_m/{n}"], out[f"adam_v/{n}"] = m, v
        return out

    def load(self, names, tensors, t):
        for i, n in enumerate(names):
            self.m[i] = np.array(tensors[f"adam_m/{n}"], np.float64)
            self.v[i] = np.array(tensors[f"adam_v/{n}"], np.float64)
        self.t = int(t)


def lr_at(step, total_steps, warmup_steps, peak):
    """Linear warmup to `peak`, then cosine decay to 0 at `total_steps`."""
    if step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    frac = min(1.0, (step - warmup_steps) / span)
    return peak * 0.5 * (1 + math.cos(math.pi * frac))


# augmentation ------------------------------------------------------------------

FLIPS = ("none", "h", "v", "hv")
ANGLES = tuple(range(0, 360, 15))


def inner_rect(h, w, angle_deg):
    """Largest axis-aligned rectangle inside an h x w rectangle rotated by angle."""
    if angle_deg % 90 == 0:
        return (h, w) if angle_deg % 180 == 0 else (w, h)
    a = math.radians(angle_deg % 180)
    sin, cos = abs(math.sin(a)), abs(math.cos(a))
    long, short = (w, h) if w >= h else (h, w)
    if short <= 2 * sin * cos * long or abs(sin - cos) < 1e-10:
        x = 0.5 * short
        wr, hr = (x / sin, x / cos) if w >= h else (x / cos, x / sin)
    else:
        c2 = cos * cos - sin * sin
        wr, hr = (w * cos - h * sin) / c2, (h * cos - w * sin) / c2
    return int(math.floor(hr)), int(math.floor(wr))


def _flip(a, f):
    if "h" in f:
        a = a[..., :, ::-1]
    if "v" in f:
        a = a[..., ::-1, :]
    return a


def apply_transform(image, gt, flip, angle):
    img, g = _flip(image, flip), _flip(gt, flip)
    if angle % 90 == 0:
        k = (angle // 90) % 4
        img, g = np.rot90(img, k, axes=(-2, -1)), np.rot90(g, k, axes=(-2, -1))
    else:
        h, w = img.shape[-2:]
        img = ndimage.rotate(img, angle, axes=(-1, -2), reshape=True, order=1, mode="constant", cval=0.0)
        g = ndimage.rotate(g, angle, axes=(-1, -2), reshape=True, order=0, mode="constant", cval=0.0)
        rh, rw = (max(1, v - 2) for v in inner_rect(h, w, angle))   # 1-pixel margin for interpolation
        cy, cx = img.shape[-2] // 2, img.shape[-1] // 2
        sl = (Ellipsis, slice(cy - rh // 2, cy - rh // 2 + rh), slice(cx - rw // 2, cx - rw // 2 + rw))
        img, g = np.clip(img[sl], 0, 1), g[sl]
    return np.ascontiguousarray(img, np.float32), np.ascontiguousarray(g, np.float32)


def draw_transform(rng, mode="full", square=True):
    if mode == "none":
        return "none", 0
    flip = FLIPS[int(rng.integers(len(FLIPS)))]
    if mode == "flip":
        angles = (0, 90, 180, 270) if square else (0, 180)
    elif mode == "full":
        angles = ANGLES
    else:
        raise ValueError(f"augmentation mode must be none, flip or full, got {mode!r}")
    return flip, angles[int(rng.integers(len(angles)))]


def augment(image, gt, seed=0, mode="full"):
    """One seeded draw of flip x rotation, applied identically to image and GT."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flip, angle = draw_transform(rng, mode, image.shape[-1] == image.shape[-2])
    return apply_transform(image, gt, flip, angle)


# training loop -----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    warmup_epochs: float = 4
    lr: float = 1e-3
    schedule: str = "cosine"
    batch_size: int = 8
    crop_size: int | None = None
    loss: str = "HFL"
    side_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    augment: str = "flip"
    seed: int = 0
    tol: float = 0.0075
    log_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs must lie in [0, epochs), got {self.warmup_epochs}")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.schedule != "cosine":
            raise ValueError("only the warmup + cosine schedule is implemented")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        loss_fn(self.loss)
        self.side_weights = tuple(float(w) for w in self.side_weights)
        if self.augment not in ("none", "flip", "full"):
            raise ValueError(f"augment must be none, flip or full, got {self.augment!r}")

    def to_dict(self):
        d = asdict(self)
        d["side_weights"] = list(self.side_weights)
        return d


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class FitResult:
    best_ods: float
    best_epoch: int
    history: list = field(default_factory=list)
    seconds: float = 0.0


def _augment_batch(samples, cfg: TrainConfig, rng):
    imgs, gts = [], []
    for s in samples:
        img, g = augment(s.image, s.gt, rng, cfg.augment)
        if cfg.crop_size:
            cs = cfg.crop_size
            if min(img.shape[-2:]) < cs:
                raise ValueError(f"crop_size {cs} exceeds the augmented image {img.shape[-2:]}")
            y = int(rng.integers(0, img.shape[-2] - cs + 1))
            x = int(rng.integers(0, img.shape[-1] - cs + 1))
            img, g = img[:, y:y + cs, x:x + cs], g[:, y:y + cs, x:x + cs]
        imgs.append(img)
        gts.append(g)
    if len({i.shape for i in imgs}) > 1:
        raise ValueError("augmented images differ in size; set crop_size")
    return np.stack(imgs), np.stack(gts)


def training_loss(net, images, gts, cfg: TrainConfig):
    outs = net.forward_train(images)
    f = loss_fn(cfg.loss)
    total = None
    wsum = sum(cfg.side_weights)
    for w, o in zip(cfg.side_weights, outs):
        if not w:
            continue
        term = ag.scale(f(o, gts), w / wsum)
        total = term if total is None else ag.add(total, term)
    return total


def predict(net, images, batch_size=8):
    """Eval-mode full-resolution probabilities from the training graph, [N,1,H,W]."""
    mode = net.training
    net.eval()
    try:
        out = [net.forward_train(images[s:s + batch_size])[0].data
               for s in range(0, len(images), batch_size)]
    finally:
        net.train(mode)
    return np.concatenate(out)


def validate(net, val_set, tol=0.0075, batch_size=8):
    imgs = np.stack([s.image for s in val_set])
    preds = predict(net, imgs, batch_size)
    return ods_ois_ap(list(preds), [s.gt for s in val_set], "C", tol).ods


def _names(net):
    return [n for n, _ in net.named_parameters()]


def _save(net, opt, path, meta):
    save_checkpoint(net, path, opt.state(_names(net)), meta)


def fit(net: MS2Edge, train_set, cfg: TrainConfig, val_set=None, out_dir=None, resume=None) -> FitResult:
    """Train with Adam; keep the best validation-ODS state and load it at the end.

    Writes metrics.jsonl, last.ckpt and best.ckpt under out_dir when given.
    `resume` is a checkpoint written by an earlier call.
    """
    train_set = list(train_set)
    if not train_set:
        raise ValueError("training set is empty")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    opt = Adam(net.parameters(), cfg.lr)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warm = int(round(cfg.warmup_epochs * steps_per_epoch))
    start_epoch, step = 0, 0
    best_ods, best_epoch, best_state = -1.0, -1, None
    history = []
    if resume:
        rnet, meta, extra = load_checkpoint(resume)
        net.load_state_dict(rnet.state_dict())
        opt.load(_names(net), extra, meta["adam_t"])
        start_epoch, step = meta["epoch"] + 1, meta["step"]
        best_ods, best_epoch = meta.get("best_ods", -1.0), meta.get("best_epoch", -1)
        if "best_state" in meta and Path(meta["best_state"]).exists():
            best_state = load_checkpoint(meta["best_state"])[0].state_dict()
    t0 = time.perf_counter()
    good = {k: v.copy() for k, v in net.state_dict().items()}
    metrics = open(out / "metrics.jsonl", "a", encoding="utf-8") if out else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            net.train()
            rng = np.random.default_rng([cfg.seed, epoch])
            losses = []
            lr = cfg.lr
            for idx in np.array_split(rng.permutation(len(train_set)), steps_per_epoch):
                imgs, gts = _augment_batch([train_set[i] for i in idx], cfg, rng)
                lr = lr_at(step, total, warm, cfg.lr)
                with Graph() as g:
                    loss = training_loss(net, imgs, gts, cfg)
                lv = float(loss.data)
                if not math.isfinite(lv):
                    net.load_state_dict(good)
                    raise TrainingDiverged(f"loss became {lv} at epoch {epoch} step {step}; "
                                           "restored the last good parameters")
                net.zero_grad()
                g.backward(loss)
                g.release()
                opt.step(lr)
                step += 1
                losses.append(lv)
                if metrics and cfg.log_every and step % cfg.log_every == 0:
                    metrics.write(json.dumps({"epoch": epoch, "step": step, "loss": lv, "lr": lr,
                                              "val_ods": None}) + "\n")
            good = {k: v.copy() for k, v in net.state_dict().items()}
            ods = validate(net, val_set, cfg.tol, cfg.batch_size) if val_set else float("nan")
            rec = {"epoch": epoch, "step": step, "loss": float(np.mean(losses)), "lr": lr,
                   "val_ods": None if math.isnan(ods) else ods}
            history.append(rec)
            log.info("epoch %d step %d loss %.5f lr %.2e val_ods %s", epoch, step, rec["loss"], lr, rec["val_ods"])
            if metrics:
                metrics.write(json.dumps(rec) + "\n")
                metrics.flush()
            improved = val_set is not None and ods > best_ods
            if improved or val_set is None:
                best_ods, best_epoch = (ods if val_set else best_ods), epoch
                best_state = good
                if out:
                    _save(net, opt, out / "best.ckpt", {"epoch": epoch, "step": step, "adam_t": opt.t,
                                                         "best_ods": best_ods, "best_epoch": epoch})
            if out:
                meta = {"epoch": epoch, "step": step, "adam_t": opt.t, "best_ods": best_ods,
                        "best_epoch": best_epoch, "train_config": cfg.to_dict()}
                if (out / "best.ckpt").exists():
                    meta["best_state"] = str(out / "best.ckpt")
                _save(net, opt, out / "last.ckpt", meta)
    finally:
        if metrics:
            metrics.close()
    if best_state is not None:
        net.load_state_dict(best_state)
    return FitResult(best_ods, best_epoch, history, time.perf_counter() - t0)
