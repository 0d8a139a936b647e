"""Small MLP with hand-written forward/backward passes.

The network is a stack of affine layers with relu between them and softmax
on top. Gradients are derived analytically (the cross-entropy gradient goes
through the softmax as ``z - onehot``), which keeps them tight enough for
finite-difference checks at 1e-4 relative error on float64.

Besides the model this module holds the two losses the training loop needs
(per-sample cross-entropy and the per-class margin ``max_{j!=y} z_j - z_y``
on softmax outputs), the SGD-with-momentum update, and EMA shadow weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor


@dataclass
class Layer:
    w: np.ndarray  # (in_dim, out_dim)
    b: np.ndarray  # (out_dim,)
    dw: np.ndarray = field(init=False)
    db: np.ndarray = field(init=False)

    def __post_init__(self):
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)


@dataclass
class LossBundle:
    """Forward-pass outputs: raw logits and row-normalized softmax."""
    logits: np.ndarray  # (B, C)
    softmax: np.ndarray  # (B, C), rows sum to 1


@dataclass
class ClassMargins:
    """Per-class mean margin for one batch; absent classes are flagged, not zeroed."""
    values: np.ndarray  # (C,), nan where absent
    present: np.ndarray  # (C,) bool

    @classmethod
    def from_values(cls, values) -> "ClassMargins":
        v = np.asarray(values, dtype=np.float64)
        return cls(values=v, present=np.ones(v.shape[0], dtype=bool))

    def present_values(self) -> np.ndarray:
        return self.values[self.present]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax with max-subtraction for stability."""
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


class Mlp:
    """Fully connected relu network; final layer emits logits."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise tensor.DimensionError("model needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.w.shape[1] != nxt.w.shape[0]:
                raise tensor.DimensionError("consecutive layer shapes do not chain")
        self.layers = layers

    @classmethod
    def build(cls, dims: list[int], rng: np.random.Generator) -> "Mlp":
        """He-initialized network with the given layer widths, e.g. [16, 64, 64, 4]."""
        if len(dims) < 2:
            raise tensor.DimensionError("need input and output dims")
        layers = []
        for d_in, d_out in zip(dims, dims[1:]):
            w = rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in)
            b = np.zeros(d_out)
            layers.append(Layer(w=w, b=b))
        return cls(layers)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].w.shape[0]] + [l.w.shape[1] for l in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def n_classes(self) -> int:
        return self.layers[-1].w.shape[1]

    def clone(self) -> "Mlp":
        return Mlp([Layer(w=l.w.copy(), b=l.b.copy()) for l in self.layers])

    def zero_grads(self) -> None:
        for l in self.layers:
            l.dw.fill(0.0)
            l.db.fill(0.0)

    def _forward_cached(self, x: np.ndarray):
        """Returns (logits, pre-activations per layer, inputs per layer)."""
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise tensor.DimensionError(
                f"input shape {x.shape} does not match model input dim {self.in_dim}")
        inputs = []
        pre = []
        h = x
        for i, l in enumerate(self.layers):
            inputs.append(h)
            a = tensor.matmul(h, l.w) + l.b
            pre.append(a)
            if i < len(self.layers) - 1:
                h = tensor.relu(a)
        return pre[-1], pre, inputs

    def forward(self, x: np.ndarray) -> LossBundle:
        logits, _, _ = self._forward_cached(x)
        return LossBundle(logits=logits, softmax=softmax(logits))

    def _backprop(self, g_logits: np.ndarray, pre, inputs, accumulate: bool) -> np.ndarray:
        """Propagates a logit-space gradient down to the input; optionally fills grads."""
        g = g_logits
        for i in reversed(range(len(self.layers))):
            l = self.layers[i]
            if accumulate:
                l.dw += tensor.matmul(inputs[i].T, g)
                l.db += np.sum(g, axis=0)
            g = tensor.matmul(g, l.w.T)
            if i > 0:
                g = g * tensor.relu_grad(pre[i - 1])
        return g

    def backward(self, x: np.ndarray, y: np.ndarray, sample_weights: np.ndarray) -> np.ndarray:
        """Gradient of sum_i sample_weights[i] * ce_i; fills grad buffers, returns d/dx.

        Grad buffers are zeroed first, so each call holds exactly one batch.
        """
        y = _check_labels(y, self.n_classes)
        sample_weights = np.asarray(sample_weights, dtype=np.float64)
        if sample_weights.shape != (x.shape[0],):
            raise tensor.DimensionError(
                f"sample_weights shape {sample_weights.shape} != batch ({x.shape[0]},)")
        if np.any(sample_weights < 0):
            raise ValueError("sample_weights must be non-negative")
        self.zero_grads()
        logits, pre, inputs = self._forward_cached(x)
        z = softmax(logits)
        g = z.copy()
        g[np.arange(x.shape[0]), y] -= 1.0
        g *= sample_weights[:, None]
        return self._backprop(g, pre, inputs, accumulate=True)

    def input_grad(self, x: np.ndarray, y: np.ndarray, objective: str = "ce") -> np.ndarray:
        """d(objective)/dx summed over the batch; parameter grads are untouched.

        objective "ce" is the summed cross-entropy; "cw_margin" is the summed
        per-sample margin max_{j!=y} z_j - z_y on softmax outputs.
        """
        y = _check_labels(y, self.n_classes)
        logits, pre, inputs = self._forward_cached(x)
        z = softmax(logits)
        rows = np.arange(x.shape[0])
        if objective == "ce":
            g = z.copy()
            g[rows, y] -= 1.0
        elif objective == "cw_margin":
            masked = z.copy()
            masked[rows, y] = -np.inf
            j_star = np.argmax(masked, axis=1)
            dz = np.zeros_like(z)
            dz[rows, j_star] += 1.0
            dz[rows, y] -= 1.0
            # softmax jacobian: dL/da = z * (dL/dz - sum_t z_t dL/dz_t)
            g = z * (dz - np.sum(dz * z, axis=1, keepdims=True))
        else:
            raise ValueError(f"unknown attack objective {objective!r}")
        return self._backprop(g, pre, inputs, accumulate=False)


def _check_labels(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise tensor.DimensionError("labels must be a 1-D vector")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y.astype(np.int64)


def ce_loss_per_sample(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """-log z[i, y_i] per sample, no reduction."""
    y = _check_labels(y, z.shape[1])
    return -np.log(z[np.arange(z.shape[0]), y])


def cw_margin_per_class(z: np.ndarray, y: np.ndarray, n_classes: int) -> ClassMargins:
    """Mean of max_{j!=y} z_j - z_y over each class's samples in the batch."""
    if z.shape[0] == 0:
        raise ValueError("margin needs a nonempty batch")
    y = _check_labels(y, n_classes)
    rows = np.arange(z.shape[0])
    masked = z.copy()
    masked[rows, y] = -np.inf
    per_sample = np.max(masked, axis=1) - z[rows, y]
    values = np.full(n_classes, np.nan)
    present = np.zeros(n_classes, dtype=bool)
    for c in range(n_classes):
        sel = y == c
        if np.any(sel):
            present[c] = True
            values[c] = float(np.mean(per_sample[sel]))
    return ClassMargins(values=values, present=present)


class Sgd:
    """SGD with momentum and decoupled-from-nothing classic weight decay.

    v <- momentum * v + (grad + weight_decay * theta);  theta <- theta - lr * v
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def step(self, model: Mlp, lr: float) -> None:
        for i, l in enumerate(model.layers):
            if i not in self._velocity:
                self._velocity[i] = (np.zeros_like(l.w), np.zeros_like(l.b))
            vw, vb = self._velocity[i]
            vw *= self.momentum
            vw += l.dw + self.weight_decay * l.w
            vb *= self.momentum
            vb += l.db + self.weight_decay * l.b
            l.w -= lr * vw
            l.b -= lr * vb


class Ema:
    """Exponential moving average of model parameters.

    shadow <- decay * shadow + (1 - decay) * theta
    """

    def __init__(self, model: Mlp, decay: float):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")
        self.decay = decay
        self.shadow = [(l.w.copy(), l.b.copy()) for l in model.layers]

    def update(self, model: Mlp) -> None:
        d = self.decay
        for (sw, sb), l in zip(self.shadow, model.layers):
            sw *= d
            sw += (1.0 - d) * l.w
            sb *= d
            sb += (1.0 - d) * l.b

    def model(self) -> Mlp:
        return Mlp([Layer(w=sw.copy(), b=sb.copy()) for sw, sb in self.shadow])
