"""Pore segmentation of CT slices.

Two routes: the classical global threshold (fixed or Otsu), and a small
U-shaped encoder-decoder network written directly in numpy with manual
backpropagation. Network activations are channels-last, ``(N, H, W, C)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .voxelcore import Label, LabelMask, SliceImage, VoxelGrid


class NoThresholdError(ValueError):
    pass


class InvalidConfig(ValueError):
    pass


# ---------------------------------------------------------------- classical


def _pixels(image):
    return np.asarray(image.values if isinstance(image, SliceImage) else image, dtype=np.float64)


def threshold_segment(image, threshold):
    """Binary foreground (material) map: 1 where intensity >= ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return (_pixels(image) >= threshold).astype(np.uint8)


def histogram256(values):
    bins = np.clip(np.floor(np.asarray(values, dtype=np.float64) * 256.0), 0, 255).astype(np.int64)
    return np.bincount(bins.ravel(), minlength=256)


def otsu_threshold(image):
    """Global threshold maximizing the between-class variance of a 256-bin histogram.

    Candidate ``k`` splits bins ``< k`` from bins ``>= k`` and is returned
    as the intensity ``k / 256``; ties go to the lowest ``k``.
    """
    hist = histogram256(_pixels(image)).astype(np.float64)
    if np.count_nonzero(hist) < 2:
        raise NoThresholdError("image has a single intensity level; no threshold separates it")
    levels = np.arange(256, dtype=np.float64)
    total = hist.sum()
    w0 = np.cumsum(hist)[:-1]  # weight below candidate k = 1..255
    m0 = np.cumsum(hist * levels)[:-1]
    w1 = total - w0
    m1 = (hist * levels).sum() - m0
    valid = (w0 > 0) & (w1 > 0)
    between = np.full(255, -np.inf)
    between[valid] = w0[valid] * w1[valid] * (m0[valid] / w0[valid] - m1[valid] / w1[valid]) ** 2
    return (int(np.argmax(between)) + 1) / 256.0


# ------------------------------------------------------------------ network


@dataclass(frozen=True)
class SegNetConfig:
    depth: int = 2
    base_channels: int = 8
    in_channels: int = 3
    out_channels: int = 1
    input_size: int = 128
    threshold: float = 0.8

    def validate(self):
        if self.depth < 1:
            raise InvalidConfig("depth must be >= 1")
        if min(self.base_channels, self.in_channels, self.out_channels) < 1:
            raise InvalidConfig("channel counts must be >= 1")
        if self.input_size % (2**self.depth):
            raise InvalidConfig(f"input size {self.input_size} is not divisible by 2**{self.depth}")
        if not 0.0 <= self.threshold <= 1.0:
            raise InvalidConfig("threshold must lie in [0, 1]")

    def channels(self, level):
        """Feature channels at encoder level ``level`` (0-based); ``depth`` is the bottleneck."""
        return self.base_channels * 2**level


def layer_shapes(config):
    """Ordered ``{name: shape}`` of every tensor in the network.

    3x3 kernels are (3, 3, in, out), up-convolutions (in, out, 2, 2) and
    the final 1x1 convolution (in, out).
    """
    shapes = {}

    def conv(name, cin, cout):
        shapes[f"{name}.w"] = (3, 3, cin, cout)
        shapes[f"{name}.b"] = (cout,)

    cin = config.in_channels
    for k in range(config.depth):
        c = config.channels(k)
        conv(f"enc{k}.conv0", cin, c)
        conv(f"enc{k}.conv1", c, c)
        cin = c
    c = config.channels(config.depth)
    conv("mid.conv0", cin, c)
    conv("mid.conv1", c, c)
    for k in reversed(range(config.depth)):
        c = config.channels(k)
        shapes[f"dec{k}.up.w"] = (2 * c, c, 2, 2)
        shapes[f"dec{k}.up.b"] = (c,)
        conv(f"dec{k}.conv0", 2 * c, c)
        conv(f"dec{k}.conv1", c, c)
    shapes["head.w"] = (config.base_channels, config.out_channels)
    shapes["head.b"] = (config.out_channels,)
    return shapes


@dataclass
class SegNet:
    config: SegNetConfig
    params: dict

    @property
    def n_params(self):
        return int(sum(p.size for p in self.params.values()))

    def copy(self):
        return SegNet(self.config, {k: v.copy() for k, v in self.params.items()})


def count_params(config):
    return int(sum(math.prod(s) for s in layer_shapes(config).values()))


def segnet_init(config, seed=0, dtype=np.float64):
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in layer_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 4 and shape[0] == 3:
            fan_in = 9 * shape[2]
        else:
            fan_in = shape[0]
        params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
    return SegNet(config, params)


def _conv3(x, w, b):
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.stack([xp[:, i : i + h, j : j + wd, :] for i in range(3) for j in range(3)], axis=3)
    cols = cols.reshape(n * h * wd, 9 * c)
    y = cols @ w.reshape(9 * c, -1) + b
    return y.reshape(n, h, wd, -1), cols


def _conv3_back(dy, cols, x_shape, w):
    n, h, wd, c = x_shape
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(9 * c, -1).T).reshape(n, h, wd, 9, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dy.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        dxp[:, i : i + h, j : j + wd, :] += dcols[:, :, :, k, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _pool(x):
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = win.argmax(axis=-1)
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], arg


def _pool_back(dy, arg, x_shape):
    n, h, w, c = x_shape
    dwin = np.zeros(dy.shape + (4,), dtype=dy.dtype)
    np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
    return dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(x_shape)


def _upconv(x, w, b):
    n, h, wd, c = x.shape
    cout = w.shape[1]
    y = x.reshape(-1, c) @ w.reshape(c, -1)
    y = y.reshape(n, h, wd, cout, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h, 2 * wd, cout)
    return y + b


def _upconv_back(dy, x, w):
    n, h, wd, c = x.shape
    cout = w.shape[1]
    d = dy.reshape(n, h, 2, wd, 2, cout).transpose(0, 1, 3, 5, 2, 4).reshape(-1, cout * 4)
    dw = (x.reshape(-1, c).T @ d).reshape(w.shape)
    db = dy.reshape(-1, cout).sum(axis=0)
    dx = (d @ w.reshape(c, -1).T).reshape(x.shape)
    return dx, dw, db


def _as_batch(net, images):
    x = np.asarray(images, dtype=next(iter(net.params.values())).dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    cfg = net.config
    if x.ndim != 4 or x.shape[-1] != cfg.in_channels:
        raise ValueError(f"expected images shaped (N, H, W, {cfg.in_channels}), got {np.shape(images)}")
    if x.shape[1] % 2**cfg.depth or x.shape[2] % 2**cfg.depth:
        raise ValueError(f"image size {x.shape[1:3]} is not divisible by 2**{cfg.depth}")
    return x, single


def _forward(net, x):
    """Logits and the cache needed for the backward pass."""
    p, cfg = net.params, net.config
    cache = []

    def conv_relu(name, h):
        z, cols = _conv3(h, p[f"{name}.w"], p[f"{name}.b"])
        cache.append(("conv", name, cols, h.shape, z > 0))
        return np.maximum(z, 0)

    skips = []
    h = x
    for k in range(cfg.depth):
        h = conv_relu(f"enc{k}.conv1", conv_relu(f"enc{k}.conv0", h))
        skips.append(h)
        shape = h.shape
        h, arg = _pool(h)
        cache.append(("pool", k, arg, shape, None))
    h = conv_relu("mid.conv1", conv_relu("mid.conv0", h))
    for k in reversed(range(cfg.depth)):
        u = _upconv(h, p[f"dec{k}.up.w"], p[f"dec{k}.up.b"])
        cache.append(("up", f"dec{k}.up", h, None, None))
        h = np.concatenate([skips[k], u], axis=-1)
        cache.append(("cat", k, skips[k].shape[-1], None, None))
        h = conv_relu(f"dec{k}.conv1", conv_relu(f"dec{k}.conv0", h))
    n, hh, ww, c = h.shape
    logits = (h.reshape(-1, c) @ p["head.w"] + p["head.b"]).reshape(n, hh, ww, -1)
    cache.append(("head", "head", h, None, None))
    return logits, cache


def _backward(net, cache, dlogits):
    p = net.params
    grads = {}
    skip_grads = {}
    dh = None
    for kind, name, a, b, c in reversed(cache):
        if kind == "head":
            h = a
            d2 = dlogits.reshape(-1, dlogits.shape[-1])
            grads["head.w"] = h.reshape(-1, h.shape[-1]).T @ d2
            grads["head.b"] = d2.sum(axis=0)
            dh = (d2 @ p["head.w"].T).reshape(h.shape)
        elif kind == "conv":
            dz = dh * c
            dh, grads[f"{name}.w"], grads[f"{name}.b"] = _conv3_back(dz, a, b, p[f"{name}.w"])
        elif kind == "cat":
            skip_grads[name] = dh[..., :a]
            dh = dh[..., a:]
        elif kind == "up":
            dh, grads[f"{name}.w"], grads[f"{name}.b"] = _upconv_back(dh, a, p[f"{name}.w"])
        elif kind == "pool":
            # the skip copy of the pooled map gets its decoder gradient here
            dh = _pool_back(dh, a, b) + skip_grads.pop(name)
    return grads


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def segnet_forward(net, image):
    """Per-pixel pore probability, same spatial size as ``image``.

    ``image`` is ``(H, W, C)`` or a batch ``(N, H, W, C)``; the result
    drops the channel axis when ``out_channels == 1``.
    """
    x, single = _as_batch(net, image)
    logits, _ = _forward(net, x)
    prob = _sigmoid(logits)
    if net.config.out_channels == 1:
        prob = prob[..., 0]
    return prob[0] if single else prob


def bce_loss(net, images, masks):
    """Mean per-pixel binary cross-entropy and its gradient for every tensor."""
    x, _ = _as_batch(net, images)
    y = np.asarray(masks, dtype=x.dtype).reshape(x.shape[:3] + (-1,))
    logits, cache = _forward(net, x)
    loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
    dlogits = (_sigmoid(logits) - y) / logits.size
    return loss, _backward(net, cache, dlogits), _sigmoid(logits)


def segnet_predict_labels(net, image, threshold=None):
    """Binary pore mask: probability >= ``threshold`` (default the config's 0.8)."""
    t = net.config.threshold if threshold is None else threshold
    return (segnet_forward(net, image) >= t).astype(np.uint8)


def labels_from_probability(prob, threshold=0.8):
    return (np.asarray(prob) >= threshold).astype(np.uint8)


@dataclass(frozen=True)
class SegTrainConfig:
    batch_size: int = 10
    epochs: int = 50
    train_fraction: float = 0.9
    learning_rate: float = 0.05
    seed: int = 0

    def validate(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidConfig("batch_size must be >= 1 and epochs >= 0")
        if not 0.0 < self.train_fraction <= 1.0:
            raise InvalidConfig("train_fraction must lie in (0, 1]")
        if self.learning_rate < 0:
            raise InvalidConfig("learning_rate must be >= 0")


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)

    def rows(self):
        for k in range(len(self.loss)):
            yield k + 1, self.loss[k], self.acc[k], self.val_loss[k], self.val_acc[k]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "acc", "val_loss", "val_acc"])
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _evaluate(net, images, masks, batch_size):
    total_loss, hits, pixels = 0.0, 0, 0
    t = net.config.threshold
    for s in range(0, len(images), batch_size):
        x, _ = _as_batch(net, images[s : s + batch_size])
        y = np.asarray(masks[s : s + batch_size], dtype=x.dtype).reshape(x.shape[:3] + (-1,))
        logits, _ = _forward(net, x)
        total_loss += float(np.sum(np.logaddexp(0.0, logits) - y * logits))
        hits += int(np.count_nonzero((_sigmoid(logits) >= t) == (y > 0.5)))
        pixels += logits.size
    return total_loss / pixels, hits / pixels


def split_indices(n, train_fraction, rng):
    order = rng.permutation(n)
    n_train = min(n, max(1, int(round(train_fraction * n))))
    return order[:n_train], order[n_train:]


def segnet_train(net, images, masks, cfg=SegTrainConfig(), progress=None):
    """Mini-batch gradient descent on per-pixel cross-entropy.

    ``images`` is ``(N, H, W, C)``, ``masks`` ``(N, H, W)`` with values
    0/1. The data are split once into train/validation by the seed, and
    the training set is reshuffled every epoch from the same generator,
    so a seed fixes the result exactly. Returns a trained copy of ``net``
    and the per-epoch history; training loss and accuracy are averaged
    over the epoch's batches, pixel-weighted.
    """
    cfg.validate()
    images = np.asarray(images)
    masks = np.asarray(masks)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if len(images) != len(masks):
        raise ValueError("images and masks differ in count")
    if not np.all((masks == 0) | (masks == 1)):
        raise ValueError("masks must be binary")
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = split_indices(len(images), cfg.train_fraction, rng)
    history = TrainHistory()
    t = net.config.threshold
    for epoch in range(cfg.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        total_loss, hits, pixels = 0.0, 0, 0
        for s in range(0, order.size, cfg.batch_size):
            batch = np.sort(order[s : s + cfg.batch_size])
            loss, grads, prob = bce_loss(net, images[batch], masks[batch])
            total_loss += loss * prob.size
            hits += int(np.count_nonzero((prob >= t) == (masks[batch].reshape(prob.shape) > 0.5)))
            pixels += prob.size
            if cfg.learning_rate:
                for name, g in grads.items():
                    net.params[name] -= cfg.learning_rate * g
        history.loss.append(total_loss / pixels)
        history.acc.append(hits / pixels)
        if val_idx.size:
            vl, va = _evaluate(net, images[val_idx], masks[val_idx], cfg.batch_size)
        else:
            vl, va = math.nan, math.nan
        history.val_loss.append(vl)
        history.val_acc.append(va)
        if not math.isfinite(history.loss[-1]):
            raise FloatingPointError(f"segmentation training diverged at epoch {epoch + 1}")
        if progress:
            progress(epoch + 1, history)
    return net, history


def iou(pred, truth):
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    union = np.count_nonzero(pred | truth)
    return 1.0 if union == 0 else np.count_nonzero(pred & truth) / union


def blob_dataset(n, size=64, seed=0, channels=3, noise=0.05, radii=(2.0, 7.0), max_blobs=6):
    """Synthetic training images: bright material with dark elliptical pores.

    Returns ``images`` (n, size, size, channels) in [0, 1] and binary pore
    ``masks`` (n, size, size).
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, size, size, channels))
    masks = np.zeros((n, size, size), dtype=np.uint8)
    for i in range(n):
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(rng.integers(1, max_blobs + 1)):
            cy, cx = rng.uniform(0, size, 2)
            ry, rx = rng.uniform(*radii, 2)
            mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img = np.where(mask, 0.1, 0.9) + rng.normal(0.0, noise, (size, size))
        images[i] = np.clip(img, 0.0, 1.0)[..., None]
        masks[i] = mask
    return images, masks


def to_channels(image, channels=3):
    """Replicate a grayscale image across ``channels`` (channels-last)."""
    img = np.asarray(image, dtype=np.float64)
    return np.repeat(img[..., None], channels, axis=-1)


def segment_image(net, image, threshold=None):
    """Pore mask for a grayscale image of any size (reflect-padded to fit the net)."""
    img = np.asarray(image, dtype=np.float64)
    m = 2**net.config.depth
    h, w = img.shape
    ph, pw = (-h) % m, (-w) % m
    padded = np.pad(img, ((0, ph), (0, pw)), mode="reflect" if min(h, w) > 1 else "edge")
    out = segnet_predict_labels(net, to_channels(padded, net.config.in_channels), threshold)
    return out[:h, :w]



# ------------------------------------------------------------------ volumes


def mask_from_maps(material, pores, pitch):
    """Three-class mask from a material map and a pore map.

    The sample is the material with its enclosed cavities filled; pore
    voxels count only inside it and everything else is background.
    """
    material = np.asarray(material, bool)
    sample = ndimage.binary_fill_holes(material)
    labels = np.zeros(material.shape, dtype=np.uint8)
    labels[sample] = Label.MATERIAL
    labels[sample & np.asarray(pores, bool)] = Label.PORE
    return LabelMask(labels, pitch)


def threshold_volume(grid, threshold=None):
    """Classical route over a whole volume; ``threshold`` defaults to Otsu."""
    values = grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid)
    t = otsu_threshold(values) if threshold is None else threshold
    material = values >= t
    return mask_from_maps(material, ~material, grid.pitch)


def segnet_volume(net, grid, threshold=None, batch=8):
    """Network route over a whole volume, one XY slice at a time.

    The sample outline comes from the Otsu threshold; inside it, pores are
    the pixels the network marks at or above ``threshold``.
    """
    values = np.asarray(grid.values, dtype=np.float64)
    material = values >= otsu_threshold(values)
    m = 2**net.config.depth
    nx, ny, nz = values.shape
    px, py = (-nx) % m, (-ny) % m
    mode = "reflect" if min(nx, ny) > 1 else "edge"
    pores = np.zeros(values.shape, dtype=bool)
    t = net.config.threshold if threshold is None else threshold
    for z0 in range(0, nz, batch):
        chunk = np.moveaxis(values[:, :, z0 : z0 + batch], 2, 0)
        chunk = np.pad(chunk, ((0, 0), (0, px), (0, py)), mode=mode)
        prob = segnet_forward(net, to_channels(chunk, net.config.in_channels))
        pores[:, :, z0 : z0 + batch] = np.moveaxis(prob[:, :nx, :ny] >= t, 0, 2)
    return mask_from_maps(material & ~pores, pores, grid.pitch)


# --------------------------------------------------------------------- I/O

MAGIC = "SEGNET1"


def save_segnet(net, path):
    cfg = net.config
    lines = [MAGIC, " ".join(f"{k}={v}" for k, v in asdict(cfg).items())]
    for name, arr in net.params.items():
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name} {shape} " + " ".join(f"{v:.17g}" for v in arr.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_segnet(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MAGIC:
        raise ValueError(f"{path}: bad magic, expected {MAGIC}")
    fields = dict(item.split("=", 1) for item in lines[1].split())
    types = {"threshold": float}
    cfg = SegNetConfig(**{k: types.get(k, int)(v) for k, v in fields.items()})
    expected = layer_shapes(cfg)
    params = {}
    for line in lines[2:]:
        name, shape, *vals = line.split()
        shape = tuple(int(d) for d in shape.split(","))
        if expected.get(name) != shape:
            raise ValueError(f"{path}: tensor {name} has shape {shape}, config implies {expected.get(name)}")
        params[name] = np.array([float(v) for v in vals], dtype=np.float64).reshape(shape)
    missing = set(expected) - set(params)
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    return SegNet(cfg, {k: params[k] for k in expected})
