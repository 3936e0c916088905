"""Small residual CNN denoiser trained with a high-frequency-aware loss.

Architecture ("small-resnet"): conv3x3(1->16) - ReLU - conv3x3(16->16) - ReLU -
conv3x3(16->1), with a global skip so the output is ``input + net(input)``.
Convolutions use reflect padding.  Images enter the network divided by
``params.scale`` (HU -> roughly unit range) and the loss is measured in the
same normalised units, averaged over pixels.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

log = logging.getLogger(__name__)

ARCHITECTURES = {"small-resnet": (1, 16, 16, 1)}


class TrainingError(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class ConvNetParams:
    weights: list  # kernels, each (3, 3, c_in, c_out)
    biases: list  # each (c_out,)
    architecture: str = "small-resnet"
    init_seed: int = 0
    scale: float = 1000.0

    def __post_init__(self):
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[:2] != (3, 3) or w.shape[3] != b.shape[0]:
                raise ValueError(f"layer {k} has inconsistent shapes")
            if k and w.shape[2] != self.weights[k - 1].shape[3]:
                raise ValueError(f"layer {k} input channels do not chain")

    def arrays(self):
        return self.weights + self.biases

    def copy(self):
        return copy.deepcopy(self)

    @classmethod
    def init(cls, seed=0, std=np.sqrt(0.005), architecture="small-resnet", scale=1000.0):
        chans = ARCHITECTURES[architecture]
        rng = np.random.default_rng(seed)
        weights = [rng.normal(0.0, std, size=(3, 3, a, b)) for a, b in zip(chans[:-1], chans[1:])]
        biases = [np.zeros(b) for b in chans[1:]]
        return cls(weights, biases, architecture, seed, scale)

    @classmethod
    def zeros(cls, architecture="small-resnet"):
        return cls.init(0, 0.0, architecture)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    batch_size: int = 1
    momentum: float = 0.99
    alpha: float = 10.0
    init_std: float = float(np.sqrt(0.005))
    seed: int = 0
    log_sigma: float = 0.5
    log_size: int = 15

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr_start < 0 or self.lr_end < 0 or self.alpha < 0:
            raise ValueError("learning rates and alpha must be nonnegative")

    def learning_rate(self, step, total):
        """Geometric decay from ``lr_start`` towards ``lr_end`` over ``total`` steps."""
        if self.lr_start == 0:
            return 0.0
        return self.lr_start * (self.lr_end / self.lr_start) ** (step / total)


# -- high-frequency filter ---------------------------------------------------

def log_kernel(std=0.5, size=15):
    """Laplacian-of-Gaussian kernel, mean-subtracted so it has exactly zero DC."""
    if size % 2 == 0:
        raise ValueError("LoG kernel size must be odd")
    if not std > 0:
        raise ValueError("std must be positive")
    r = np.arange(size) - size // 2
    xx, yy = np.meshgrid(r, r)
    q = (xx ** 2 + yy ** 2) / (2 * std ** 2)
    k = -(1.0 - q) * np.exp(-q) / (np.pi * std ** 4)
    return k - k.mean()


def _reflect_index(n, pad):
    """Source index of every position in a half-sample-symmetric padding of length n."""
    return np.pad(np.arange(n), pad, mode="symmetric")


def highpass(image, kernel):
    """Filter with reflect boundaries, so constant images map exactly to zero."""
    return ndimage.convolve(image, kernel, mode="reflect")


def highpass_adjoint(image, kernel):
    """Exact adjoint of :func:`highpass`: zero-padded correlation folded back onto the image."""
    pad = kernel.shape[0] // 2
    full = ndimage.correlate(np.pad(image, pad), kernel, mode="constant", cval=0.0)
    rows = _reflect_index(image.shape[0], pad)
    cols = _reflect_index(image.shape[1], pad)
    folded = np.zeros((image.shape[0], full.shape[1]))
    np.add.at(folded, rows, full)
    out = np.zeros(image.shape)
    np.add.at(out.T, cols, folded.T)
    return out


# -- convolution layers --------------------------------------------------------

def _conv(x, w, b):
    """Reflect-padded 3x3 cross-correlation, ``x`` (C, H, W) -> (D, H, W)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (C, H, W, 3, 3)
    out = np.tensordot(win, w, axes=([0, 3, 4], [2, 0, 1]))  # (H, W, D)
    return out.transpose(2, 0, 1) + b[:, None, None]


def _unpad_reflect(g):
    """Adjoint of 1-pixel reflect padding on the last two axes."""
    g = g.copy()
    g[:, 2, :] += g[:, 0, :]
    g[:, -3, :] += g[:, -1, :]
    g = g[:, 1:-1, :]
    g[:, :, 2] += g[:, :, 0]
    g[:, :, -3] += g[:, :, -1]
    return g[:, :, 1:-1]


def _conv_backward(x, w, gout):
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))
    gw = np.tensordot(win, gout, axes=([1, 2], [1, 2])).transpose(1, 2, 0, 3)  # (3, 3, C, D)
    gb = gout.sum(axis=(1, 2))
    gpad = np.pad(gout, ((0, 0), (2, 2), (2, 2)))
    gwin = sliding_window_view(gpad, (3, 3), axis=(1, 2))  # (D, H+2, W+2, 3, 3)
    gxp = np.tensordot(gwin, w[::-1, ::-1], axes=([0, 3, 4], [3, 0, 1])).transpose(2, 0, 1)
    return _unpad_reflect(gxp), gw, gb


def _forward_cached(params: ConvNetParams, image):
    x = np.asarray(image, dtype=np.float64) / params.scale
    acts = [x[None]]
    pre = []
    h = x[None]
    n = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = _conv(h, w, b)
        pre.append(z)
        h = np.maximum(z, 0.0) if k < n - 1 else z
        acts.append(h)
    out = x + h[0]
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite activations in network forward pass")
    return out, acts, pre


def forward(params: ConvNetParams, image):
    """Network output in HU, same shape as ``image``.

    The skip connection is added in HU so a zero residual returns the input unrounded.
    """
    image = np.asarray(image, dtype=np.float64)
    _, acts, _ = _forward_cached(params, image)
    return image + acts[-1][0] * params.scale


def _backward(params, acts, pre, gout):
    n = len(params.weights)
    gws, gbs = [None] * n, [None] * n
    g = gout[None]
    for k in reversed(range(n)):
        if k < n - 1:
            g = g * (pre[k] > 0)
        g_in, gws[k], gbs[k] = _conv_backward(acts[k], params.weights[k], g)
        g = g_in
    return gws, gbs


def loss_and_grad(params: ConvNetParams, batch, alpha=10.0, kernel=None):
    """Loss ``sum ||G(x) - x*||^2 + alpha ||F G(x) - F x*||^2`` and its gradient.

    Squared norms are taken in normalised units and divided by the pixel
    count, which keeps SGD step sizes independent of image size.  Returns
    ``(loss, grads)`` with ``grads`` ordered like ``params.arrays()``.
    """
    if kernel is None:
        kernel = log_kernel()
    total = 0.0
    gws = [np.zeros_like(w) for w in params.weights]
    gbs = [np.zeros_like(b) for b in params.biases]
    for image, target in batch:
        image = np.asarray(image, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        if image.shape != target.shape:
            raise ValueError("input/target shape mismatch")
        out, acts, pre = _forward_cached(params, image)
        r = out - target / params.scale
        n_px = r.size
        total += float(np.sum(r ** 2)) / n_px
        gout = (2.0 / n_px) * r
        if alpha:
            fr = highpass(r, kernel)
            total += alpha * float(np.sum(fr ** 2)) / n_px
            gout = gout + (2.0 * alpha / n_px) * highpass_adjoint(fr, kernel)
        gw, gb = _backward(params, acts, pre, gout)
        for k in range(len(gws)):
            gws[k] += gw[k]
            gbs[k] += gb[k]
    return total, gws + gbs


def train_supervised(pairs, cfg: TrainConfig = TrainConfig(), params: ConvNetParams | None = None):
    """SGD with momentum on ``pairs`` of (input, target) HU images.

    Returns ``(params, trace)``; ``trace`` has per-step losses and per-epoch
    mean losses.
    """
    if len(pairs) < 1:
        raise ValueError("need at least one training pair")
    if params is None:
        params = ConvNetParams.init(cfg.seed, cfg.init_std)
    else:
        params = params.copy()
    kernel = log_kernel(cfg.log_sigma, cfg.log_size)
    arrays = params.arrays()
    velocity = [np.zeros_like(a) for a in arrays]
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = int(np.ceil(len(pairs) / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    trace = {"step_loss": [], "epoch_loss": [], "lr": []}
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(pairs), cfg.batch_size):
            batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
            loss, grads = loss_and_grad(params, batch, cfg.alpha, kernel)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}", params.copy())
            lr = cfg.learning_rate(step, total)
            for a, v, g in zip(arrays, velocity, grads):
                v *= cfg.momentum
                v -= lr * g
                a += v
            losses.append(loss)
            trace["step_loss"].append(loss)
            trace["lr"].append(lr)
            step += 1
        trace["epoch_loss"].append(float(np.mean(losses)))
        log.debug("epoch %d mean loss %.6g", epoch, trace["epoch_loss"][-1])
    return params, trace
