"""A small two-head dense-prediction network in plain numpy.

The net maps a single-channel image to a full-resolution localization
heatmap (sigmoid output) and a half-resolution density map. A shared
trunk computes stride-2 features; the localization head upsamples back
to input resolution with a transposed convolution; the counting head
stays at stride 2.

Forward and reverse passes are exact (reverse mode, float64), parameters
live in one flat vector with per-layer views, and the optimizer is Adam
with bias correction. Everything is deterministic given (seed, config,
data): no threads touch the parameter vector, and all randomness flows
through a single Rng stream per concern.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .core import (
    DataValidationError,
    DenseGrid,
    DivergenceError,
    FormatError,
    ImageRecord,
    PointAnnotation,
    Rng,
)
from .losses import LossConfig, fp_loss, fp_region, mse_loss, nsf_loss, total_loss
from .supervision import SupervisionConfig, make_density, make_heatmap

CHECKPOINT_MAGIC = b"DPW1"


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


# --- layers ---------------------------------------------------------------
#
# Every layer exposes: describe(), param_shapes(), bind(params, grads),
# init_params(rng), forward(x), backward(g). Activations own no parameters
# except PReLU (one learned slope per channel). forward caches whatever
# backward needs; backward accumulates into the bound gradient views and
# returns the input gradient.


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, kernel: int,
                 stride: int = 1, pad: int = 0, bias_init: float = 0.0):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.bias_init = bias_init

    def describe(self) -> str:
        return (f"conv({self.in_ch}>{self.out_ch},"
                f"k{self.kernel},s{self.stride},p{self.pad})")

    def param_shapes(self):
        return [(self.out_ch, self.in_ch, self.kernel, self.kernel),
                (self.out_ch,)]

    def bind(self, params, grads):
        self.weight, self.bias = params
        self.gw, self.gb = grads

    def init_params(self, rng: Rng) -> None:
        bound = 1.0 / math.sqrt(self.in_ch * self.kernel * self.kernel)
        self.weight[...] = rng.uniform(-bound, bound, self.weight.shape)
        self.bias[...] = self.bias_init

    def forward(self, x: np.ndarray) -> np.ndarray:
        k, s, p = self.kernel, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
        self._win, self._in_shape = win, x.shape
        out = np.tensordot(self.weight, win, axes=([1, 2, 3], [0, 3, 4]))
        return out + self.bias[:, None, None]

    def backward(self, g: np.ndarray) -> np.ndarray:
        k, s, p = self.kernel, self.stride, self.pad
        _, h, w = self._in_shape
        ho, wo = g.shape[1], g.shape[2]
        self.gb += g.sum(axis=(1, 2))
        self.gw += np.tensordot(g, self._win, axes=([1, 2], [1, 2]))
        t = np.tensordot(self.weight, g, axes=([0], [0]))
        dxp = np.zeros((self.in_ch, h + 2 * p, w + 2 * p))
        for u in range(k):
            for v in range(k):
                dxp[:, u:u + s * ho:s, v:v + s * wo:s] += t[:, u, v]
        return dxp[:, p:p + h, p:p + w]


class Deconv2d:
    """Transposed convolution; inverts the spatial mapping of a strided conv."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int,
                 stride: int = 1, pad: int = 0):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, pad

    def describe(self) -> str:
        return (f"deconv({self.in_ch}>{self.out_ch},"
                f"k{self.kernel},s{self.stride},p{self.pad})")

    def param_shapes(self):
        return [(self.in_ch, self.out_ch, self.kernel, self.kernel),
                (self.out_ch,)]

    def bind(self, params, grads):
        self.weight, self.bias = params
        self.gw, self.gb = grads

    def init_params(self, rng: Rng) -> None:
        taps = self.kernel * self.kernel
        if self.kernel % self.stride == 0:
            taps = (self.kernel // self.stride) ** 2
        bound = 1.0 / math.sqrt(self.in_ch * taps)
        self.weight[...] = rng.uniform(-bound, bound, self.weight.shape)
        self.bias[...] = 0.0

    def _out_size(self, n: int) -> int:
        return (n - 1) * self.stride - 2 * self.pad + self.kernel

    def forward(self, x: np.ndarray) -> np.ndarray:
        k, s, p = self.kernel, self.stride, self.pad
        _, h, w = x.shape
        t = np.tensordot(self.weight, x, axes=([0], [0]))
        buf = np.zeros((self.out_ch, (h - 1) * s + k, (w - 1) * s + k))
        for u in range(k):
            for v in range(k):
                buf[:, u:u + s * h:s, v:v + s * w:s] += t[:, u, v]
        self._x, self._in_shape = x, x.shape
        out = buf[:, p:p + self._out_size(h), p:p + self._out_size(w)]
        return out + self.bias[:, None, None]

    def backward(self, g: np.ndarray) -> np.ndarray:
        k, s, p = self.kernel, self.stride, self.pad
        _, h, w = self._in_shape
        gbuf = np.zeros((self.out_ch, (h - 1) * s + k, (w - 1) * s + k))
        gbuf[:, p:p + g.shape[1], p:p + g.shape[2]] = g
        gwin = sliding_window_view(gbuf, (k, k), axis=(1, 2))[:, ::s, ::s]
        self.gb += g.sum(axis=(1, 2))
        self.gw += np.tensordot(self._x, gwin, axes=([1, 2], [1, 2]))
        return np.tensordot(self.weight, gwin, axes=([1, 2, 3], [0, 3, 4]))


class ReLU:
    def describe(self) -> str:
        return "relu"

    def param_shapes(self):
        return []

    def bind(self, params, grads):
        pass

    def init_params(self, rng: Rng) -> None:
        pass

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0.0
        return np.where(self._mask, x, 0.0)

    def backward(self, g: np.ndarray) -> np.ndarray:
        return g * self._mask


class PReLU:
    """Leaky rectifier with one learned negative-side slope per channel."""

    def __init__(self, channels: int, slope_init: float = 0.25):
        self.channels = channels
        self.slope_init = slope_init

    def describe(self) -> str:
        return f"prelu({self.channels})"

    def param_shapes(self):
        return [(self.channels,)]

    def bind(self, params, grads):
        (self.slope,) = params
        (self.gs,) = grads

    def init_params(self, rng: Rng) -> None:
        self.slope[...] = self.slope_init

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return np.where(x > 0.0, x, self.slope[:, None, None] * x)

    def backward(self, g: np.ndarray) -> np.ndarray:
        neg = self._x <= 0.0
        self.gs += np.sum(g * self._x * neg, axis=(1, 2))
        return g * np.where(neg, self.slope[:, None, None], 1.0)


class Sigmoid:
    def describe(self) -> str:
        return "sigmoid"

    def param_shapes(self):
        return []

    def bind(self, params, grads):
        pass

    def init_params(self, rng: Rng) -> None:
        pass

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._y = expit(x)
        return self._y

    def backward(self, g: np.ndarray) -> np.ndarray:
        return g * self._y * (1.0 - self._y)


# --- the network ----------------------------------------------------------

def _default_trunk():
    return [Conv2d(1, 16, 3, 1, 1), ReLU(),
            Conv2d(16, 32, 3, 2, 1), ReLU(),
            Conv2d(32, 32, 3, 1, 1), ReLU()]


def _default_loc_head():
    return [Deconv2d(32, 16, 4, 2, 1), ReLU(),
            Conv2d(16, 8, 3, 1, 1), ReLU(),
            Conv2d(8, 1, 1, 1, 0, bias_init=_logit(0.01)), Sigmoid()]


def _default_count_head():
    return [Conv2d(32, 8, 3, 1, 1), PReLU(8),
            Conv2d(8, 1, 1, 1, 0), PReLU(1)]


class MicroNet:
    """Two-head net: shared stride-2 trunk, heatmap head, density head.

    Parameters live in ``self.params`` (flat float64); ``self.grads`` is the
    matching accumulator that ``backward`` adds into. Layer weight arrays
    are views into these vectors, so optimizer updates on ``params``
    propagate with no copying.
    """

    def __init__(self, trunk=None, loc_head=None, count_head=None):
        self.trunk = trunk if trunk is not None else _default_trunk()
        self.loc_head = loc_head if loc_head is not None else _default_loc_head()
        self.count_head = count_head if count_head is not None else _default_count_head()
        self._layers = [*self.trunk, *self.loc_head, *self.count_head]

        shapes = [s for layer in self._layers for s in layer.param_shapes()]
        sizes = [int(np.prod(s)) for s in shapes]
        self.params = np.zeros(sum(sizes))
        self.grads = np.zeros_like(self.params)
        offset = 0
        for layer in self._layers:
            p_views, g_views = [], []
            for shape in layer.param_shapes():
                size = int(np.prod(shape))
                p_views.append(self.params[offset:offset + size].reshape(shape))
                g_views.append(self.grads[offset:offset + size].reshape(shape))
                offset += size
            layer.bind(p_views, g_views)

    @property
    def n_params(self) -> int:
        return self.params.size

    def describe(self) -> str:
        parts = ["|".join(l.describe() for l in seq)
                 for seq in (self.trunk, self.loc_head, self.count_head)]
        return "trunk[{}];loc[{}];count[{}]".format(*parts)

    def digest(self) -> bytes:
        return hashlib.sha256(self.describe().encode("ascii")).digest()

    def init_params(self, rng: Rng) -> None:
        for layer in self._layers:
            layer.init_params(rng)

    def zero_grads(self) -> None:
        self.grads[...] = 0.0

    def _forward(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = pixels[None, :, :]
        for layer in self.trunk:
            x = layer.forward(x)
        feat = x
        h = feat
        for layer in self.loc_head:
            h = layer.forward(h)
        d = feat
        for layer in self.count_head:
            d = layer.forward(d)
        self._out_shapes = (h.shape, d.shape)
        return h[0], d[0]

    def forward(self, image: DenseGrid) -> tuple[DenseGrid, DenseGrid]:
        v = image.values
        if v.shape[0] % 2 or v.shape[1] % 2:
            raise DataValidationError(
                f"input dimensions must be even, got {v.shape}"
            )
        heat, dens = self._forward(v)
        return DenseGrid(heat), DenseGrid(dens)

    def _backward(self, grad_heatmap: np.ndarray, grad_density: np.ndarray) -> None:
        hs, ds = self._out_shapes
        if grad_heatmap.shape != hs[1:] or grad_density.shape != ds[1:]:
            raise DataValidationError(
                "output gradient shapes do not match the last forward pass"
            )
        g = grad_heatmap[None, :, :]
        for layer in reversed(self.loc_head):
            g = layer.backward(g)
        gf = g
        g = grad_density[None, :, :]
        for layer in reversed(self.count_head):
            g = layer.backward(g)
        gf = gf + g
        for layer in reversed(self.trunk):
            gf = layer.backward(gf)

    def backward(self, grad_heatmap: DenseGrid, grad_density: DenseGrid) -> np.ndarray:
        """Accumulate parameter gradients for the most recent forward pass.

        Returns the live gradient vector. Call ``zero_grads`` first unless
        accumulation over samples is intended.
        """
        self._backward(grad_heatmap.values, grad_density.values)
        return self.grads

    @classmethod
    def tiny(cls) -> "MicroNet":
        """A few-hundred-parameter variant for exhaustive gradient checks."""
        trunk = [Conv2d(1, 3, 3, 1, 1), ReLU(),
                 Conv2d(3, 4, 3, 2, 1), ReLU()]
        loc = [Deconv2d(4, 3, 4, 2, 1), ReLU(),
               Conv2d(3, 1, 1, 1, 0, bias_init=_logit(0.01)), Sigmoid()]
        count = [Conv2d(4, 3, 3, 1, 1), PReLU(3),
                 Conv2d(3, 1, 1, 1, 0), PReLU(1)]
        return cls(trunk, loc, count)


# --- optimizer ------------------------------------------------------------

class Adam:
    """Adam with bias correction; state arrays sized to the parameter vector."""

    def __init__(self, n_params: int, lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0 or eps <= 0 or not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise DataValidationError("invalid optimizer hyperparameters")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# --- training -------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 16
    batch: int = 2
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    crop: int = 64
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1:
            raise DataValidationError("epochs must be >= 0 and batch >= 1")
        if self.lr < 0 or self.eps <= 0:
            raise DataValidationError("lr must be >= 0 and eps > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DataValidationError("betas must lie in [0, 1)")
        if self.crop < 2 or self.crop % 2:
            raise DataValidationError("crop must be even and >= 2")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise DataValidationError("flip_prob must lie in [0, 1]")


def _random_crop(record: ImageRecord, crop: int, rng: Rng) -> ImageRecord:
    h, w = record.height, record.width
    if crop > h or crop > w:
        raise DataValidationError(
            f"image {record.id!r}: crop {crop} exceeds image size {w}x{h}"
        )
    oy = int(rng.integers(0, h - crop + 1))
    ox = int(rng.integers(0, w - crop + 1))
    pts = [
        PointAnnotation(p.x - ox, p.y - oy, p.box_w, p.box_h)
        for p in record.points
        if 0 <= p.x - ox < crop and 0 <= p.y - oy < crop
    ]
    pixels = DenseGrid(record.pixels.values[oy:oy + crop, ox:ox + crop])
    return ImageRecord(record.id, crop, crop, tuple(pts), pixels)


def _flip_horizontal(record: ImageRecord) -> ImageRecord:
    w = record.width
    pts = [
        PointAnnotation(max(w - 1.0 - p.x, 0.0), p.y, p.box_w, p.box_h)
        for p in record.points
    ]
    pixels = DenseGrid(record.pixels.values[:, ::-1])
    return ImageRecord(record.id, w, record.height, tuple(pts), pixels)


def train(net: MicroNet, dataset, cfg: TrainConfig,
          loss_cfg: LossConfig | None = None,
          sup_cfg: SupervisionConfig | None = None) -> list[tuple]:
    """Optimize ``net`` in place; return the per-epoch mean loss curve.

    Each step samples a crop per batch element, flips it with probability
    ``flip_prob``, builds supervision targets on the crop, and applies one
    Adam update with the batch-mean gradient. Curve rows are
    (l_nsf, l_fp, l_r, total) means over the epoch's samples.

    Raises DivergenceError the moment any sample's outputs or losses go
    non-finite.
    """
    if not dataset:
        raise DataValidationError("training needs a non-empty dataset")
    if any(rec.pixels is None for rec in dataset):
        raise DataValidationError("every training record needs pixels")
    loss_cfg = loss_cfg if loss_cfg is not None else LossConfig()
    sup_cfg = sup_cfg if sup_cfg is not None else SupervisionConfig()
    rng = Rng(cfg.seed)
    opt = Adam(net.n_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        epoch_sums = np.zeros(4)
        for start in range(0, len(order), cfg.batch):
            chunk = order[start:start + cfg.batch]
            net.zero_grads()
            for idx in chunk:
                step += 1
                rec = _random_crop(dataset[int(idx)], cfg.crop, rng)
                if rng.random() < cfg.flip_prob:
                    rec = _flip_horizontal(rec)
                heat_gt = make_heatmap(rec, sup_cfg)
                dens_gt = make_density(rec, sup_cfg)
                heat, dens = net._forward(rec.pixels.values)
                if not (np.isfinite(heat).all() and np.isfinite(dens).all()):
                    raise DivergenceError(
                        f"non-finite network output at step {step} (epoch {epoch + 1})"
                    )
                pred_h, pred_d = DenseGrid(heat), DenseGrid(dens)
                nsf = nsf_loss(pred_h, heat_gt, loss_cfg)
                fp = fp_loss(pred_h, fp_region(heat_gt, pred_h, loss_cfg), loss_cfg)
                reg = mse_loss(pred_d, dens_gt)
                tot = total_loss(nsf, fp, reg, loss_cfg)
                if not math.isfinite(tot.value):
                    raise DivergenceError(
                        f"non-finite loss at step {step} (epoch {epoch + 1}): "
                        f"nsf={nsf.value!r} fp={fp.value!r} mse={reg.value!r}"
                    )
                net._backward(tot.loc_grad.values, tot.count_grad.values)
                epoch_sums += (nsf.value, fp.value, reg.value, tot.value)
            net.grads /= len(chunk)
            opt.step(net.params, net.grads)
        curve.append(tuple(epoch_sums / len(order)))
    return curve


def write_loss_curve(curve, path) -> None:
    """Loss curve as CSV: epoch index plus the four per-epoch mean losses."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,l_nsf,l_fp,l_r,total\n")
        for i, (l_nsf, l_fp, l_r, total) in enumerate(curve, start=1):
            fh.write(f"{i},{l_nsf!r},{l_fp!r},{l_r!r},{total!r}\n")


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(net: MicroNet, path) -> None:
    """Binary checkpoint: magic, architecture digest, count, f64 LE params."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(net.digest())
        fh.write(struct.pack("<Q", net.n_params))
        fh.write(net.params.astype("<f8").tobytes())


def load_checkpoint(net: MicroNet, path) -> None:
    """Restore ``net.params`` from ``path``; the architecture must match."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header = 4 + 32 + 8
    if len(blob) < header or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    if blob[4:36] != net.digest():
        raise FormatError(f"{path}: checkpoint was written for a different architecture")
    (count,) = struct.unpack("<Q", blob[36:44])
    if count != net.n_params:
        raise FormatError(
            f"{path}: checkpoint holds {count} parameters, net has {net.n_params}"
        )
    payload = blob[header:]
    if len(payload) != 8 * count:
        raise FormatError(f"{path}: truncated parameter payload")
    net.params[...] = np.frombuffer(payload, dtype="<f8")
