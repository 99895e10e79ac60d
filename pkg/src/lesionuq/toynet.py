"""A small fully-connected dropout network with a learned noise-variance head.

The net maps a flattened 2D patch through tanh hidden layers, each followed
by inverted dropout, to two outputs: a logit ``F`` and a raw variance ``v``
with ``V = softplus(v)``.  One stochastic forward pass draws a dropout mask
per hidden layer and a standard normal ``eps``, and returns

    y_hat = sigmoid(F + sqrt(V) * eps)

Dropout stays active at prediction time; ``mc_predict`` stacks T such passes.
Gradients are written out by hand and checked against finite differences in
the tests.
"""
from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from .rng import Stream
from .volume import SampleStack, atomic_write_bytes

PROB_CLAMP = 1e-7
WEIGHTS_MAGIC = b"TNET"
WEIGHTS_VERSION = 1
# "mean_bce": BCE of each MC sample, averaged.  "mean_prob": BCE of the
# MC-averaged probability, i.e. the noise integrated inside the likelihood.
LOSS_FORMS = ("mean_bce", "mean_prob")


class TrainingError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


def softplus(v):
    return np.logaddexp(0.0, v)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


@dataclass
class ToyNet:
    """Weights are ``[W1, b1, ..., Wk, bk, W_out, b_out]``; ``W_out`` has two
    columns, the logit head and the raw variance head."""

    weights: list
    dropout_p: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        if len(self.weights) < 2 or len(self.weights) % 2:
            raise ValueError("weights must come in (matrix, bias) pairs")
        prev = self.weights[0].shape[0]
        for W, b in zip(self.weights[::2], self.weights[1::2]):
            if W.ndim != 2 or W.shape[0] != prev or b.shape != (W.shape[1],):
                raise ValueError(f"inconsistent layer shapes {W.shape}, {b.shape}")
            prev = W.shape[1]
        if prev != 2:
            raise ValueError("the output layer needs exactly two units (logit, raw variance)")
        for w in self.weights:
            if not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite")

    @classmethod
    def init(cls, n_in: int, hidden=(16,), dropout_p: float = 0.2, seed: int = 0,
             variance_bias: float = -2.0) -> "ToyNet":
        """Glorot-scaled normal weights; the variance head starts small."""
        rng = Stream(seed, stream=1)
        sizes = [int(n_in), *[int(h) for h in hidden], 2]
        weights = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal((a, b)) * math.sqrt(2.0 / (a + b)))
            weights.append(np.zeros(b))
        weights[-1][1] = variance_bias
        return cls(weights, dropout_p)

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden_sizes(self) -> list[int]:
        return [W.shape[1] for W in self.weights[:-2:2]]

    def copy(self) -> "ToyNet":
        return ToyNet([w.copy() for w in self.weights], self.dropout_p)


@dataclass(frozen=True)
class Draws:
    """The random inputs of T forward passes over n patches."""

    masks: list          # per hidden layer, (T, n, h) inverted-dropout multipliers
    eps: np.ndarray      # (T, n) standard normals


def draw(net: ToyNet, n: int, T: int, rng: Stream) -> Draws:
    keep = 1.0 - net.dropout_p
    masks = []
    for h in net.hidden_sizes:
        if net.dropout_p == 0.0:
            masks.append(np.ones((T, n, h)))
        else:
            masks.append(rng.bernoulli(keep, (T, n, h)) / keep)
    return Draws(masks, rng.normal((T, n)))


def _forward(net: ToyNet, X: np.ndarray, d: Draws):
    """Returns the per-layer caches, F, raw v and V, each with leading (T, n)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.n_in:
        raise ValueError(f"expected patches of shape (n, {net.n_in}), got {X.shape}")
    a = np.broadcast_to(X, (d.eps.shape[0], *X.shape))
    caches = []
    for k, m in enumerate(d.masks):
        W, b = net.weights[2 * k], net.weights[2 * k + 1]
        h = np.tanh(a @ W + b)
        caches.append((a, h, m))
        a = h * m
    out = a @ net.weights[-2] + net.weights[-1]
    F, v = out[..., 0], out[..., 1]
    return caches, a, F, v, softplus(v)


def forward_sample(net: ToyNet, X, rng: Stream | None = None, draws: Draws | None = None):
    """One stochastic pass: ``(y_hat, v_hat)`` per patch."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if draws is None:
        draws = draw(net, len(X), 1, rng)
    _, _, F, _, V = _forward(net, X, draws)
    y = sigmoid(F + np.sqrt(V) * draws.eps)
    return y[0], V[0]


def inverse_frequency_weight(labels) -> float:
    """Positive-class weight ``1 / (share of positive labels)``."""
    y = np.asarray(labels)
    share = float(np.mean(y)) if y.size else 0.0
    return 1.0 / share if share > 0 else 1.0


def _check_labels(y):
    y = np.asarray(y, dtype=np.float64).ravel()
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    return y


def mc_loss(net: ToyNet, X, y, T: int, class_weight: float = 1.0,
            rng: Stream | None = None, draws: Draws | None = None,
            form: str = "mean_bce") -> float:
    """Weighted BCE over T MC samples, averaged over patches.

    With ``form="mean_bce"`` the per-sample losses are averaged; with
    ``"mean_prob"`` the loss is taken of the averaged probability.
    """
    return mc_loss_and_grad(net, X, y, T, class_weight, rng, draws, form, need_grad=False)[0]


def _wbce(p, y, w):
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(w * y * np.log(pc) + (1.0 - y) * np.log1p(-pc))


def mc_loss_and_grad(net: ToyNet, X, y, T: int, class_weight: float = 1.0,
                     rng: Stream | None = None, draws: Draws | None = None,
                     form: str = "mean_bce", need_grad: bool = True):
    """Loss and its gradient with respect to every weight array.

    Pass ``draws`` to hold the dropout masks and noise fixed; otherwise they
    are drawn from ``rng``.  Where the clamp is active the gradient is zero.
    """
    if form not in LOSS_FORMS:
        raise ValueError(f"loss form must be one of {LOSS_FORMS}, got {form!r}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = _check_labels(y)
    if T < 1:
        raise ValueError("T must be >= 1")
    if draws is None:
        draws = draw(net, len(X), T, rng)
    caches, a_last, F, v, V = _forward(net, X, draws)
    s = np.sqrt(V)
    z = F + s * draws.eps
    p = sigmoid(z)
    w = float(class_weight)
    T_, n = z.shape
    inside = lambda q: (q > PROB_CLAMP) & (q < 1.0 - PROB_CLAMP)
    if form == "mean_bce":
        loss = float(_wbce(p, y, w).sum() / (T_ * n))
    else:
        pbar = p.mean(axis=0)
        loss = float(_wbce(pbar, y, w).sum() / n)
    if not need_grad:
        return loss, None

    # d loss / d z, zero where the clamp bites.
    if form == "mean_bce":
        dz = (-w * y * (1.0 - p) + (1.0 - y) * p) / (T_ * n)
        dz = np.where(inside(p), dz, 0.0)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            dpbar = np.where(inside(pbar), (-w * y / pbar + (1.0 - y) / (1.0 - pbar)) / n, 0.0)
        dz = dpbar * p * (1.0 - p) / T_
    dF = dz
    with np.errstate(divide="ignore", invalid="ignore"):
        dV = np.where(s > 0, dz * draws.eps / (2.0 * s), 0.0)
    dv = dV * sigmoid(v)
    dout = np.stack([dF, dv], axis=-1)                       # (T, n, 2)

    grads = [None] * len(net.weights)
    grads[-2] = np.einsum("tni,tnj->ij", a_last, dout)
    grads[-1] = dout.sum(axis=(0, 1))
    da = dout @ net.weights[-2].T
    for k in range(len(caches) - 1, -1, -1):
        a_in, h, m = caches[k]
        dpre = da * m * (1.0 - h * h)
        grads[2 * k] = np.einsum("tni,tnj->ij", a_in, dpre)
        grads[2 * k + 1] = dpre.sum(axis=(0, 1))
        if k:
            da = dpre @ net.weights[2 * k].T
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    T_train: int = 10
    learning_rate: float = 1.0
    steps: int = 800
    class_weight: float | None = None   # None: inverse positive frequency of the data
    seed: int = 0
    loss: str = "mean_bce"

    def __post_init__(self):
        if self.T_train < 1:
            raise ValueError("T_train must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.loss not in LOSS_FORMS:
            raise ValueError(f"loss must be one of {LOSS_FORMS}, got {self.loss!r}")


def train(net: ToyNet, X, y, cfg: TrainConfig) -> tuple[ToyNet, list[float]]:
    """Full-batch gradient descent on ``mc_loss``; the input net is not modified.

    Raises:
        TrainingError: when the loss becomes non-finite.
    """
    net = net.copy()
    y = _check_labels(y)
    w = inverse_frequency_weight(y) if cfg.class_weight is None else float(cfg.class_weight)
    rng = Stream(cfg.seed, stream=2)
    trace = []
    for step in range(cfg.steps):
        loss, grads = mc_loss_and_grad(net, X, y, cfg.T_train, w, rng, form=cfg.loss)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingError(step, loss)
        trace.append(loss)
        for p, g in zip(net.weights, grads):
            p -= cfg.learning_rate * g
    return net, trace


def mc_predict(net: ToyNet, X, T: int, seed: int = 0, grid_shape=None) -> SampleStack:
    """T stochastic passes over the patches, as a stack of (nx, ny, 1) grids.

    ``grid_shape`` is the (nx, ny) layout of the patches in x-fastest order;
    by default the patches form a single row.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if T < 1:
        raise ValueError("T must be >= 1")
    n = len(X)
    nx, ny = grid_shape if grid_shape is not None else (n, 1)
    if nx * ny != n:
        raise ValueError(f"grid {nx}x{ny} does not hold {n} patches")
    d = draw(net, n, T, Stream(seed, stream=3))
    _, _, F, _, V = _forward(net, X, d)
    preds = sigmoid(F + np.sqrt(V) * d.eps)
    shape = (T, nx, ny, 1)
    as_grid = lambda a: a.reshape((T, ny, nx)).transpose(0, 2, 1).reshape(shape)
    return SampleStack(as_grid(preds).astype(np.float32), as_grid(V).astype(np.float32))


# --- data ------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyDataset:
    image: np.ndarray     # (nx, ny) intensities
    truth: np.ndarray     # (nx, ny) clean labels
    labels: np.ndarray    # (nx, ny) training labels, flipped at random in the noisy region
    noisy: np.ndarray     # (nx, ny) bool, the noisy region
    patch: int = 3

    @property
    def shape(self):
        return self.image.shape

    def patches(self) -> np.ndarray:
        return extract_patches(self.image, self.patch)

    def flat(self, a) -> np.ndarray:
        """Per-pixel values in patch order (x fastest)."""
        return np.asarray(a).ravel(order="F")


def extract_patches(image: np.ndarray, k: int = 3) -> np.ndarray:
    """(nx * ny, k * k) edge-padded patches, one per pixel, x fastest."""
    if k < 1 or k % 2 == 0:
        raise ValueError("patch size must be odd and positive")
    image = np.asarray(image, dtype=np.float64)
    r = k // 2
    padded = np.pad(image, r, mode="edge")
    nx, ny = image.shape
    cols = [padded[dx:dx + nx, dy:dy + ny].ravel(order="F")
            for dy in range(k) for dx in range(k)]
    return np.stack(cols, axis=1)


def noisy_clean_dataset(shape=(32, 32), flip_rate: float = 0.25, n_blobs: int = 10,
                        patch: int = 3, seed: int = 0) -> ToyDataset:
    """A 2D image of bright discs; labels in the left half are flipped at ``flip_rate``.

    The left half also carries a tissue offset so the region is visible in
    the input.
    """
    rng = Stream(seed, stream=4)
    nx, ny = shape
    xs, ys = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    truth = np.zeros(shape, dtype=bool)
    centres = rng.uniform((n_blobs, 2)) * [nx, ny]
    radii = rng.uniform((n_blobs,), 1.5, 4.0)
    for (cx, cy), r in zip(centres, radii):
        truth |= (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    noisy = xs < nx // 2
    image = 1.5 * truth + 0.75 * noisy + 0.3 * rng.normal(shape)
    flips = rng.bernoulli(flip_rate, shape) & noisy
    labels = truth ^ flips
    return ToyDataset(image, truth.astype(np.float64), labels.astype(np.float64), noisy, patch)


# --- bundled experiment ------------------------------------------------------------

@dataclass(frozen=True)
class VarianceExperiment:
    net: ToyNet
    trace: list
    stack: SampleStack
    dataset: ToyDataset

    def region_means(self, values) -> tuple[float, float]:
        """(noisy, clean) means of a per-pixel (nx, ny) or (nx, ny, 1) array."""
        v = np.asarray(values, dtype=np.float64).reshape(self.dataset.shape)
        return float(v[self.dataset.noisy].mean()), float(v[~self.dataset.noisy].mean())


def learned_variance_experiment(seed: int = 0, T: int = 10) -> VarianceExperiment:
    """Train on the noisy/clean image and run T dropout passes over it.

    A narrow hidden layer and the ``mean_prob`` loss leave the variance head
    as the cheap way to hedge on the noisy half.
    """
    ds = noisy_clean_dataset(seed=seed)
    X, y = ds.patches(), ds.flat(ds.labels)
    net = ToyNet.init(X.shape[1], hidden=(2,), dropout_p=0.1, seed=seed, variance_bias=-4.0)
    net, trace = train(net, X, y, TrainConfig(seed=seed, loss="mean_prob"))
    stack = mc_predict(net, X, T, seed=seed, grid_shape=ds.shape)
    return VarianceExperiment(net, trace, stack, ds)


# --- persistence -----------------------------------------------------------------

def encode_weights(net: ToyNet) -> bytes:
    """``TNET``, u16 version, f64 dropout_p, u32 array count, then per array a
    u32 rank, u32 dims and row-major little-endian float64 data."""
    out = [WEIGHTS_MAGIC, struct.pack("<Hd I", WEIGHTS_VERSION, net.dropout_p, len(net.weights))]
    for w in net.weights:
        out.append(struct.pack(f"<I{w.ndim}I", w.ndim, *w.shape))
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
    return b"".join(out)


def decode_weights(data: bytes) -> ToyNet:
    if data[:4] != WEIGHTS_MAGIC:
        raise ValueError("not a toy-net weight file (bad magic)")
    head = struct.calcsize("<Hd I")
    try:
        version, p, count = struct.unpack_from("<Hd I", data, 4)
        if version != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weight format version {version}")
        off = 4 + head
        weights = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
            off += 4 + 4 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if off + nbytes > len(data):
                raise ValueError("weight file is truncated")
            weights.append(np.frombuffer(data, "<f8", int(np.prod(shape)), off).reshape(shape).copy())
            off += nbytes
    except struct.error as e:
        raise ValueError(f"weight file is truncated: {e}") from None
    if off != len(data):
        raise ValueError(f"{len(data) - off} trailing bytes after weights")
    return ToyNet(weights, p)


def save_weights(net: ToyNet, path) -> None:
    atomic_write_bytes(path, encode_weights(net))


def load_weights(path) -> ToyNet:
    with open(path, "rb") as f:
        return decode_weights(f.read())


def loss_trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, v in enumerate(trace):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()
