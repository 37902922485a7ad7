"""Sobel targets, training corpus, and the small ReLU network that imitates them."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .core import Image
from .datasets import rng_for

log = logging.getLogger(__name__)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])


def _conv_center(window, kernel):
    # (f * g)[c] = sum_{k,l} f[c - k, c - l] g[k, l], kernel indexed from its centre
    total = 0.0
    for k in (-1, 0, 1):
        for l in (-1, 0, 1):
            total += window[1 - k, 1 - l] * kernel[k + 1, l + 1]
    return total


def sobel(window) -> float:
    """Sobel gradient magnitude at the centre of a 3x3 window."""
    w = np.asarray(window, dtype=np.float64).reshape(3, 3)
    gx = _conv_center(w, SOBEL_X)
    gy = _conv_center(w, SOBEL_Y)
    return math.sqrt(gx * gx + gy * gy)


# true convolution flips the kernel; flattened for batched use
_KX = SOBEL_X[::-1, ::-1].ravel()
_KY = SOBEL_Y[::-1, ::-1].ravel()


def sobel_batch(windows) -> np.ndarray:
    """Vectorised ``sobel`` over an ``(N, 9)`` array of row-major windows."""
    w = np.asarray(windows, dtype=np.float64).reshape(-1, 9)
    return np.hypot(w @ _KX, w @ _KY)


def extract_windows(arr) -> np.ndarray:
    """All overlapping 3x3 windows of a 2-D array, one row-major row per interior pixel."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    if h < 3 or w < 3:
        raise ValueError("image must be at least 3x3")
    win = np.lib.stride_tricks.sliding_window_view(arr, (3, 3))
    return win.reshape(-1, 9).copy()


@dataclass
class TrainingSet:
    inputs: np.ndarray
    targets: np.ndarray
    target_scale: float
    omega: float

    def __len__(self):
        return self.targets.size


def build_training_set(img, omega: float = 255.0, normalize: bool = True,
                       target_scale: Optional[float] = None) -> TrainingSet:
    """One sample per interior pixel: the window rescaled into ``[0, omega]`` and its
    Sobel value (divided by ``target_scale``, default: the largest target, when
    ``normalize`` is set)."""
    arr = img.as_array() if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    top = arr.max()
    scaled = arr * (omega / top) if top > 0 else np.zeros_like(arr)
    X = extract_windows(scaled)
    y = sobel_batch(X)
    scale = 1.0
    if normalize:
        scale = target_scale if target_scale is not None else (y.max() if y.max() > 0 else 1.0)
    return TrainingSet(X, y / scale, float(scale), float(omega))


# ---------------------------------------------------------------------------
# Procedural corpus
# ---------------------------------------------------------------------------

def _smooth(a, passes):
    for _ in range(passes):
        a = (a + np.roll(a, 1, 0) + np.roll(a, -1, 0) + np.roll(a, 1, 1) + np.roll(a, -1, 1)) / 5.0
    return a


def synthetic_corpus(n_images: int = 48, side: int = 32, seed: int = 0) -> List[np.ndarray]:
    """Images in ``[0, 1]``: ellipses, oriented steps, ramps, blurred textures and
    binary speckle, at random orientations and contrasts."""
    rng = rng_for(seed)
    yy, xx = np.mgrid[0:side, 0:side] / (side - 1.0)
    out = []
    for i in range(n_images):
        kind = i % 5
        if kind == 0:
            img = np.zeros((side, side))
            for _ in range(rng.integers(1, 4)):
                cx, cy = rng.uniform(0.2, 0.8, 2)
                ax, ay = rng.uniform(0.08, 0.4, 2)
                th = rng.uniform(0, np.pi)
                u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
                v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
                img[(u / ax) ** 2 + (v / ay) ** 2 <= 1] = rng.choice([1.0, rng.uniform(0.3, 1)])
        elif kind == 1:
            th = rng.uniform(0, 2 * np.pi)
            d = (xx - 0.5) * np.cos(th) + (yy - 0.5) * np.sin(th)
            lo, hi = sorted(rng.uniform(0, 1, 2))
            img = np.where(d > rng.uniform(-0.3, 0.3), hi, lo)
        elif kind == 2:
            th = rng.uniform(0, 2 * np.pi)
            img = (xx * np.cos(th) + yy * np.sin(th)) * rng.uniform(0.5, 3)
            img = np.mod(img, 1.0) if rng.random() < 0.5 else img - img.min()
        elif kind == 3:
            img = _smooth(rng.random((side, side)), int(rng.integers(0, 4)))
        else:
            img = (rng.random((side, side)) < rng.uniform(0.2, 0.8)).astype(float)
            img = np.where(_smooth(img, int(rng.integers(0, 2))) > 0.5, 1.0, 0.0)
        top = img.max()
        out.append(img / top if top > 0 else img)
    return out


def binary_windows(omega: float) -> np.ndarray:
    """All 512 windows with pixels in ``{0, omega}``."""
    codes = np.arange(512)[:, None] >> np.arange(9)[None, :] & 1
    return codes.astype(np.float64) * omega


def corpus_training_set(images: Sequence[np.ndarray], omega: float = 255.0,
                        extra_random: int = 4096, binary_repeats: int = 4,
                        seed: int = 0, user_image=None) -> TrainingSet:
    """Windows from ``images`` plus every binary window and uniform random windows,
    with targets normalised by the largest Sobel value in the corpus."""
    blocks = []
    for img in images:
        arr = np.asarray(img, dtype=np.float64)
        top = arr.max()
        if top > 0:
            blocks.append(extract_windows(arr * (omega / top)))
    if user_image is not None:
        arr = np.asarray(user_image, dtype=np.float64)
        blocks.append(extract_windows(arr * (omega / arr.max())))
    blocks.extend([binary_windows(omega)] * binary_repeats)
    if extra_random:
        blocks.append(rng_for(seed + 1).uniform(0, omega, size=(extra_random, 9)))
    X = np.concatenate(blocks)
    y = sobel_batch(X)
    scale = float(y.max()) if y.max() > 0 else 1.0
    return TrainingSet(X, y / scale, scale, float(omega))


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass
class EdgeNet:
    """Fully connected ReLU network; every layer, the output included, applies ReLU.

    ``weights[k]`` has shape ``(n_{k+1}, n_k)`` and acts on raw pixel values in
    ``[0, omega]``.  Outputs are Sobel values divided by ``target_scale``.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    omega: float = 255.0
    target_scale: float = 1.0
    u_bar: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = [np.asarray(W, dtype=np.float64) for W in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias vector per weight matrix")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or W.shape[0] != b.size:
                raise ValueError(f"layer {k}: weight {W.shape} vs bias {b.shape}")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k} input width does not match layer {k - 1}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError("parameters must be finite")

    @property
    def layer_sizes(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights)

    @property
    def n_neurons(self) -> int:
        return sum(W.shape[0] for W in self.weights)

    def forward(self, x) -> np.ndarray:
        """Batched evaluation; ``x`` is ``(9,)`` or ``(N, 9)``."""
        a = np.asarray(x, dtype=np.float64)
        single = a.ndim == 1
        a = np.atleast_2d(a)
        for W, b in zip(self.weights, self.biases):
            a = np.maximum(a @ W.T + b, 0.0)
        out = a[:, 0] if a.shape[1] == 1 else a
        return out[0] if single else out

    def preactivations(self, x) -> List[np.ndarray]:
        a = np.asarray(x, dtype=np.float64)
        pre = []
        for W, b in zip(self.weights, self.biases):
            z = W @ a + b
            pre.append(z)
            a = np.maximum(z, 0.0)
        return pre

    def to_dict(self) -> dict:
        return {
            "format": "edgenet",
            "version": 1,
            "layer_sizes": list(self.layer_sizes),
            "weights": [W.ravel().tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "omega": self.omega,
            "target_scale": self.target_scale,
            "u_bar": self.u_bar,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d) -> "EdgeNet":
        sizes = d["layer_sizes"]
        Ws = [np.asarray(w, dtype=np.float64).reshape(sizes[k + 1], sizes[k])
              for k, w in enumerate(d["weights"])]
        return cls(Ws, [np.asarray(b) for b in d["biases"]], float(d["omega"]),
                   float(d["target_scale"]), d.get("u_bar"), d.get("meta", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "EdgeNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def forward(net: EdgeNet, a) -> float:
    return float(net.forward(np.asarray(a, dtype=np.float64).reshape(-1)))


def random_net(sizes=(9, 9, 9, 1), seed=0, omega=1.0, scale=1.0) -> EdgeNet:
    """He-initialised untrained net; handy for solver tests."""
    rng = rng_for(seed)
    Ws, bs = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        Ws.append(rng.normal(0, scale * math.sqrt(2.0 / a), size=(b, a)))
        bs.append(rng.normal(0, 0.1 * scale, size=b))
    return EdgeNet(Ws, bs, omega=omega)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple = (9, 9)
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 200
    holdout: float = 0.1
    seed: int = 0


@dataclass
class TrainReport:
    epoch_loss: List[float]
    holdout_rmse: float
    max_target: float


def train_edge_net(samples: TrainingSet, cfg: TrainConfig = TrainConfig(),
                   log_fn=None) -> tuple:
    """Mini-batch SGD with momentum on mean squared error.

    Returns ``(net, report)``.  Inputs are divided by ``omega`` during training
    and the factor is folded into the first layer afterwards.
    """
    if len(samples) == 0:
        raise ValueError("empty training set")
    rng = rng_for(cfg.seed)
    X = samples.inputs / samples.omega
    y = samples.targets
    perm = rng.permutation(len(y))
    n_hold = int(round(cfg.holdout * len(y)))
    hold, train = perm[:n_hold], perm[n_hold:]
    Xt, yt = X[train], y[train]

    sizes = (X.shape[1],) + tuple(cfg.hidden) + (1,)
    Ws = [rng.normal(0, math.sqrt(2.0 / a), size=(b, a)) for a, b in zip(sizes[:-1], sizes[1:])]
    bs = [np.full(b, 0.01) for b in sizes[1:]]
    vW = [np.zeros_like(W) for W in Ws]
    vb = [np.zeros_like(b) for b in bs]
    losses = []
    n = len(yt)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            acts = [Xt[idx]]
            for W, b in zip(Ws, bs):
                acts.append(np.maximum(acts[-1] @ W.T + b, 0.0))
            err = acts[-1][:, 0] - yt[idx]
            total += float(err @ err)
            delta = (2.0 / idx.size) * err[:, None] * (acts[-1] > 0)
            for k in range(len(Ws) - 1, -1, -1):
                gW = delta.T @ acts[k]
                gb = delta.sum(axis=0)
                if k:
                    delta = (delta @ Ws[k]) * (acts[k] > 0)
                vW[k] = cfg.momentum * vW[k] - cfg.lr * gW
                vb[k] = cfg.momentum * vb[k] - cfg.lr * gb
                Ws[k] += vW[k]
                bs[k] += vb[k]
        mse = total / n
        if not math.isfinite(mse):
            raise TrainingDiverged(f"loss became {mse} at epoch {epoch}")
        losses.append(mse)
        if log_fn is not None:
            log_fn(epoch, mse)
    out = Xt
    for W, b in zip(Ws, bs):
        out = np.maximum(out @ W.T + b, 0.0)
    if not np.all(np.isfinite(out)):
        raise TrainingDiverged("non-finite parameters after training")
    if np.any(yt != 0) and not np.any(out):
        # every path to the output is inactive: gradients are zero for good
        raise TrainingDiverged("network collapsed to a constant zero output")
    Ws[0] = Ws[0] / samples.omega
    net = EdgeNet(Ws, bs, omega=samples.omega, target_scale=samples.target_scale)
    if n_hold:
        pred = net.forward(samples.inputs[hold])
        rmse = float(np.sqrt(np.mean((pred - y[hold]) ** 2)))
    else:
        rmse = float("nan")
    net.meta.update({"holdout_rmse": rmse, "epochs": cfg.epochs, "seed": cfg.seed})
    return net, TrainReport(losses, rmse, float(y.max()))


def max_output(net: EdgeNet, gap_tol: float = 0.0, store: bool = True) -> float:
    """Global maximum of the network over ``[0, omega]^9`` by branch-and-bound."""
    from .relumip import maximize_output

    sol = maximize_output(net, gap_tol=gap_tol)
    if sol.status != "optimal":
        raise RuntimeError(f"max_output solve ended with status {sol.status}")
    if store:
        net.u_bar = float(sol.objective)
    return float(sol.objective)
