"""Small from-scratch differentiable core.

Layers keep the activations of their last forward pass and accumulate parameter
gradients on ``backward``. Two architectures are built from them: a plain MLP
(``arch="mlp"``, used for Q-networks) and the three-branch trunk shared by the brake
and policy classifiers (``arch="trunk"``): features, a dense+ReLU embedding of
local-frame targets and a gated recurrent encoding of the speed history, concatenated
into a dense head.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

EPS = 1e-7
MAGIC = b"DEFIX-CKPT 1\n"


class GradientError(FloatingPointError):
    """Non-finite gradient encountered during a training step."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    init: str = "fan_in_uniform"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError("layer dims must be > 0")


class Layer:
    kind = ""

    def __init__(self, in_dim: int, out_dim: int):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.params: list[np.ndarray] = []
        self.grads: list[np.ndarray] = []

    def spec(self) -> LayerSpec:
        return LayerSpec(self.kind, self.in_dim, self.out_dim, getattr(self, "init", "none"))

    def zero_grad(self) -> None:
        for g in self.grads:
            g[...] = 0.0


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 init: str = "fan_in_uniform"):
        super().__init__(in_dim, out_dim)
        self.init = init
        if init == "identity":
            W = np.eye(out_dim, in_dim)
        elif init == "zeros":
            W = np.zeros((out_dim, in_dim))
        else:
            limit = 1.0 / math.sqrt(in_dim)
            W = (rng or np.random.default_rng(0)).uniform(-limit, limit, size=(out_dim, in_dim))
        self.W = W
        self.b = np.zeros(out_dim)
        self.params = [self.W, self.b]
        self.grads = [np.zeros_like(self.W), np.zeros_like(self.b)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.W.T + self.b

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.grads[0] += dy.T @ self._x
        self.grads[1] += dy.sum(axis=0)
        return dy @ self.W


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        self._y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self._y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x):
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        self._y = z / z.sum(axis=-1, keepdims=True)
        return self._y

    def backward(self, dy):
        y = self._y
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


class RecurrentCell(Layer):
    """Elman cell with a single update gate.

    z_t = sigmoid(Wz x_t + Uz h_{t-1} + bz)
    c_t = tanh(Wc x_t + Uc h_{t-1} + bc)
    h_t = (1 - z_t) h_{t-1} + z_t c_t
    """

    kind = "recurrent_cell"

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator | None = None,
                 init: str = "fan_in_uniform"):
        super().__init__(in_dim, hidden)
        self.init = init
        rng = rng or np.random.default_rng(0)
        shapes = [(hidden, in_dim), (hidden, hidden), (hidden,)] * 2
        if init == "zeros":
            self.params = [np.zeros(s) for s in shapes]
        else:
            limit = 1.0 / math.sqrt(hidden)
            self.params = [rng.uniform(-limit, limit, size=s) if len(s) == 2 else np.zeros(s) for s in shapes]
        self.grads = [np.zeros_like(p) for p in self.params]

    def forward(self, seq: np.ndarray) -> np.ndarray:
        if seq.ndim == 2:
            seq = seq[:, :, None]
        if seq.shape[1] < 1:
            raise ValueError("empty sequence")
        Wz, Uz, bz, Wc, Uc, bc = self.params
        B, T, _ = seq.shape
        h = np.zeros((B, self.out_dim))
        self._seq = seq
        self._hs, self._zs, self._cs = [h], [], []
        H = self.out_dim
        # both gates in one matmul; the sigmoid is written as 0.5 * (1 + tanh(a / 2))
        scale = np.concatenate([np.full(H, 0.5), np.ones(H)])
        xa = (seq @ np.concatenate([Wz, Wc]).T + np.concatenate([bz, bc])) * scale
        U = np.concatenate([Uz, Uc]).T * scale
        for t in range(T):
            a = np.tanh(xa[:, t] + h @ U)
            z = 0.5 * (1.0 + a[:, :H])
            c = a[:, H:]
            h = h + z * (c - h)
            self._zs.append(z)
            self._cs.append(c)
            self._hs.append(h)
        return h

    def hidden_states(self) -> list[np.ndarray]:
        return self._hs

    def backward(self, dh: np.ndarray) -> np.ndarray:
        Wz, Uz, bz, Wc, Uc, bc = self.params
        gWz, gUz, gbz, gWc, gUc, gbc = self.grads
        seq = self._seq
        T = seq.shape[1]
        daz_all = np.empty((seq.shape[0], T, self.out_dim))
        dac_all = np.empty_like(daz_all)
        for t in range(T - 1, -1, -1):
            z, c, hp = self._zs[t], self._cs[t], self._hs[t]
            daz = dh * (c - hp) * z * (1.0 - z)
            dac = dh * z * (1.0 - c * c)
            gUz += daz.T @ hp
            gUc += dac.T @ hp
            daz_all[:, t] = daz
            dac_all[:, t] = dac
            dh = dh * (1.0 - z) + daz @ Uz + dac @ Uc
        gWz += np.einsum("bth,bti->hi", daz_all, seq)
        gWc += np.einsum("bth,bti->hi", dac_all, seq)
        gbz += daz_all.sum(axis=(0, 1))
        gbc += dac_all.sum(axis=(0, 1))
        return daz_all @ Wz + dac_all @ Wc


LAYER_KINDS = {"dense": Dense, "relu": ReLU, "sigmoid": Sigmoid, "softmax": Softmax,
               "recurrent_cell": RecurrentCell}


def make_layer(spec: LayerSpec, rng: np.random.Generator | None = None) -> Layer:
    cls = LAYER_KINDS[spec.kind]
    if cls in (Dense, RecurrentCell):
        return cls(spec.in_dim, spec.out_dim, rng, spec.init)
    return cls(spec.in_dim, spec.out_dim)


class Sequential:
    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class Model:
    """MLP or classifier trunk; ``forward`` takes an array (mlp) or a (features, targets, speeds) tuple."""

    def __init__(self, arch: str, specs: list[LayerSpec], rng: np.random.Generator | None = None):
        if arch not in ("mlp", "trunk"):
            raise ValueError(f"unknown arch {arch!r}")
        self.arch = arch
        rng = rng or np.random.default_rng(0)
        self.layers = [make_layer(s, rng) for s in specs]
        if arch == "trunk":
            self.target_net = Sequential(self.layers[:2])
            self.speed_cell = self.layers[2]
            self.head = Sequential(self.layers[3:])
            self.n_features = self.head.layers[0].in_dim - self.layers[0].out_dim - self.speed_cell.out_dim
        else:
            self.head = Sequential(self.layers)
        for i, s in enumerate(specs):
            if s.kind == "softmax" and i != len(specs) - 1:
                raise ValueError("softmax is only allowed as the final layer")

    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec() for layer in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads]

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def forward(self, x):
        if self.arch == "mlp":
            x = np.asarray(x, dtype=float)
            if x.shape[-1] != self.in_dim:
                raise ValueError(f"input dim {x.shape[-1]} != {self.in_dim}")
            return self.head.forward(np.atleast_2d(x))
        feats, targets, speeds = (np.atleast_2d(np.asarray(a, dtype=float)) for a in x)
        if feats.shape[-1] != self.n_features or targets.shape[-1] != self.layers[0].in_dim:
            raise ValueError(f"input dims ({feats.shape[-1]}, {targets.shape[-1]}) do not match "
                             f"({self.n_features}, {self.layers[0].in_dim})")
        self._split = (feats.shape[1], self.layers[1].out_dim)
        emb = self.target_net.forward(targets)
        h = self.speed_cell.forward(speeds)
        return self.head.forward(np.concatenate([feats, emb, h], axis=1))

    def backward(self, dy):
        dx = self.head.backward(dy)
        if self.arch == "mlp":
            return dx
        nf, ne = self._split
        dfeat = dx[:, :nf]
        self.target_net.backward(dx[:, nf:nf + ne])
        self.speed_cell.backward(dx[:, nf + ne:])
        return dfeat

    def get_flat(self) -> np.ndarray:
        ps = self.params()
        return np.concatenate([p.ravel() for p in ps]) if ps else np.zeros(0)

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        n = sum(p.size for p in self.params())
        if flat.size != n:
            raise ValueError(f"weight vector has {flat.size} entries, model needs {n}")
        i = 0
        for p in self.params():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> "Model":
        m = Model(self.arch, self.specs)
        m.set_flat(self.get_flat())
        return m


def mlp_specs(sizes: list[int], final: str | None = None) -> list[LayerSpec]:
    specs = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        specs.append(LayerSpec("dense", a, b))
        if k < len(sizes) - 2:
            specs.append(LayerSpec("relu", b, b))
    if final:
        specs.append(LayerSpec(final, sizes[-1], sizes[-1]))
    return specs


def trunk_specs(n_features: int, n_target_inputs: int, embed: int, speed_hidden: int, hidden: int,
                n_out: int, final: str) -> list[LayerSpec]:
    return [
        LayerSpec("dense", n_target_inputs, embed),
        LayerSpec("relu", embed, embed),
        LayerSpec("recurrent_cell", 1, speed_hidden),
        LayerSpec("dense", n_features + embed + speed_hidden, hidden),
        LayerSpec("relu", hidden, hidden),
        LayerSpec("dense", hidden, n_out),
        LayerSpec(final, n_out, n_out),
    ]


def forward(model: Model, x) -> np.ndarray:
    out = model.forward(x)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite model output")
    return out


def recurrent_encode(cell: RecurrentCell, sequence) -> np.ndarray:
    seq = np.asarray(sequence, dtype=float)
    if seq.size == 0:
        raise ValueError("empty sequence")
    return cell.forward(seq.reshape(1, -1, 1))[0]


# --- losses -----------------------------------------------------------------------------------


def bce_loss(pred, target, weights=None) -> float:
    p = np.clip(np.asarray(pred, dtype=float).ravel(), EPS, 1.0 - EPS)
    t = np.asarray(target, dtype=float).ravel()
    if p.size == 0:
        raise ValueError("empty batch")
    if p.shape != t.shape:
        raise ValueError("pred and target lengths differ")
    per = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    if weights is not None:
        per = per * np.asarray(weights, dtype=float).ravel()
    return float(per.mean())


def bce_grad(pred, target, weights=None) -> np.ndarray:
    shape = np.shape(pred)
    p = np.clip(np.asarray(pred, dtype=float).ravel(), EPS, 1.0 - EPS)
    t = np.asarray(target, dtype=float).ravel()
    g = (p - t) / (p * (1.0 - p)) / p.size
    if weights is not None:
        g = g * np.asarray(weights, dtype=float).ravel()
    return g.reshape(shape)


def mce_loss(pred, target, n_classes: int) -> float:
    """Multi-class cross-entropy including the 1/N class-count factor."""
    p = np.atleast_2d(np.asarray(pred, dtype=float))
    t = np.asarray(target).ravel().astype(int)
    if p.shape[0] == 0:
        raise ValueError("empty batch")
    if np.any(t < 0) or np.any(t >= n_classes) or p.shape[1] != n_classes:
        raise ValueError(f"class index outside [0, {n_classes})")
    picked = np.clip(p[np.arange(len(t)), t], EPS, 1.0)
    return float(-np.mean(np.log(picked)) / n_classes)


def mce_grad(pred, target, n_classes: int) -> np.ndarray:
    p = np.atleast_2d(np.asarray(pred, dtype=float))
    t = np.asarray(target).ravel().astype(int)
    g = np.zeros_like(p)
    rows = np.arange(len(t))
    g[rows, t] = -1.0 / (np.clip(p[rows, t], EPS, 1.0) * len(t) * n_classes)
    return g


# --- optimizers -------------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    t: int = 0
    slots: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self.slots:
            n = 2 if self.kind == "adam" else 1
            self.slots = [[np.zeros_like(p) for _ in range(n)] for p in params]
        self.t += 1
        for p, g, slot in zip(params, grads, self.slots):
            if self.kind == "adam":
                m, v = slot
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                mh = m / (1 - self.beta1 ** self.t)
                vh = v / (1 - self.beta2 ** self.t)
                p -= self.lr * mh / (np.sqrt(vh) + 1e-8)
            else:
                vel = slot[0]
                vel *= self.momentum
                vel -= self.lr * g
                p += vel


def check_finite_grads(model: Model) -> None:
    for k, g in enumerate(model.grads()):
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient in parameter block {k} "
                                f"({np.count_nonzero(~np.isfinite(g))} entries)")


def backward_and_step(model: Model, batch, loss_kind: str, opt: OptimizerState) -> tuple[Model, float]:
    """One optimizer step. ``batch`` is (inputs, targets[, weights]); returns the pre-update loss."""
    inputs, targets = batch[0], batch[1]
    weights = batch[2] if len(batch) > 2 else None
    model.zero_grad()
    pred = model.forward(inputs)
    if loss_kind == "bce":
        loss = bce_loss(pred, targets, weights)
        dpred = bce_grad(pred, targets, weights).reshape(pred.shape)
    elif loss_kind == "mce":
        loss = mce_loss(pred, targets, model.out_dim)
        dpred = mce_grad(pred, targets, model.out_dim)
    else:
        raise ValueError(f"unknown loss {loss_kind!r}")
    model.backward(dpred)
    check_finite_grads(model)
    opt.step(model.params(), model.grads())
    return model, loss


# --- checkpoints ------------------------------------------------------------------------------


@dataclass
class ModelCheckpoint:
    arch: str
    specs: list[LayerSpec]
    weights: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype="<f4")
        n = sum(p.size for p in Model(self.arch, self.specs).params())
        if self.weights.size != n:
            raise ValueError(f"weight vector length {self.weights.size} != parameter count {n}")

    def header(self, with_time: bool = True) -> dict:
        meta = dict(self.metadata)
        if not with_time:
            meta.pop("created_at", None)
        return {"arch": self.arch, "specs": [asdict(s) for s in self.specs],
                "n_weights": int(self.weights.size), "dtype": "<f4", "metadata": meta}

    @property
    def id(self) -> str:
        h = hashlib.sha256(json.dumps(self.header(False), sort_keys=True).encode())
        h.update(self.weights.tobytes())
        return h.hexdigest()[:16]

    def build(self) -> Model:
        m = Model(self.arch, self.specs)
        m.set_flat(self.weights.astype(float))
        return m

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode() + b"\n"
        return MAGIC + head + self.weights.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelCheckpoint":
        if not blob.startswith(MAGIC):
            raise ValueError("not a checkpoint file")
        rest = blob[len(MAGIC):]
        nl = rest.index(b"\n")
        head = json.loads(rest[:nl])
        weights = np.frombuffer(rest[nl + 1:], dtype="<f4").copy()
        if weights.size != head["n_weights"]:
            raise ValueError("truncated checkpoint")
        return cls(head["arch"], [LayerSpec(**s) for s in head["specs"]], weights, head["metadata"])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())


def checkpoint_from_model(model: Model, metadata: dict | None = None) -> ModelCheckpoint:
    return ModelCheckpoint(model.arch, model.specs, model.get_flat().astype("<f4"), dict(metadata or {}))


# --- supervised training ------------------------------------------------------------------------


def _take(inputs, idx):
    if isinstance(inputs, tuple):
        return tuple(a[idx] for a in inputs)
    return inputs[idx]


def train_supervised(model: Model, inputs, labels, loss_kind: str, epochs: int, rng: np.random.Generator,
                     opt: OptimizerState, batch: int = 64, weights=None) -> list[float]:
    """Mini-batch training; returns the mean loss per epoch."""
    n = len(labels)
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for k in range(0, n, batch):
            idx = order[k:k + batch]
            b = (_take(inputs, idx), labels[idx]) if weights is None else \
                (_take(inputs, idx), labels[idx], weights[idx])
            _, loss = backward_and_step(model, b, loss_kind, opt)
            losses.append(loss)
        history.append(float(np.mean(losses)) if losses else float("nan"))
    return history


def predict(model: Model, inputs, batch: int = 2048) -> np.ndarray:
    n = len(inputs[0]) if isinstance(inputs, tuple) else len(inputs)
    outs = [model.forward(_take(inputs, slice(k, k + batch))) for k in range(0, n, batch)]
    return np.concatenate(outs) if outs else np.zeros((0, model.out_dim))


# --- gradient checks ----------------------------------------------------------------------------


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor))) if a.size else 0.0


def _central_diff(f, x: np.ndarray, eps: float) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def layer_gradient_error(layer: Layer, x: np.ndarray, rng: np.random.Generator, eps: float = 1e-6) -> float:
    """Max relative error of the layer's parameter and input gradients against central differences."""
    x = np.array(x, dtype=float)
    y = layer.forward(x)
    r = rng.normal(size=y.shape)
    layer.zero_grad()
    dx = layer.backward(r)
    analytic = [g.copy() for g in layer.grads]

    def f():
        return float(np.sum(r * layer.forward(x)))

    errs = [relative_error(a, _central_diff(f, p, eps)) for a, p in zip(analytic, layer.params)]
    errs.append(relative_error(dx.reshape(x.shape), _central_diff(f, x, eps)))
    return max(errs)


def loss_gradient_error(kind: str, rng: np.random.Generator, n: int = 8, n_classes: int = 4,
                        eps: float = 1e-7) -> float:
    if kind == "bce":
        pred = rng.uniform(0.05, 0.95, size=n)
        target = rng.integers(0, 2, size=n).astype(float)
        weights = rng.uniform(0.5, 2.0, size=n)
        analytic = bce_grad(pred, target, weights)
        numeric = _central_diff(lambda: bce_loss(pred, target, weights), pred, eps)
    elif kind == "mce":
        logits = rng.normal(size=(n, n_classes))
        pred = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        target = rng.integers(0, n_classes, size=n)
        analytic = mce_grad(pred, target, n_classes)
        numeric = _central_diff(lambda: mce_loss(pred, target, n_classes), pred, eps)
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return relative_error(analytic, numeric)


def gradient_suite(seed: int) -> dict[str, float]:
    """Max relative gradient error per layer kind and loss for one seed."""
    rng = np.random.default_rng(seed)
    B = 3
    errs = {}
    for kind, cls in LAYER_KINDS.items():
        if cls is RecurrentCell:
            layer, x = cls(2, 4, rng), rng.normal(size=(B, 5, 2))
        elif cls is Dense:
            layer, x = cls(5, 4, rng), rng.normal(size=(B, 5))
        else:
            layer, x = cls(4, 4), rng.normal(size=(B, 4))
        if cls is ReLU:
            # keep inputs off the kink at 0, where the derivative is undefined
            x = np.where(np.abs(x) < 1e-3, 1e-3, x)
        errs[kind] = layer_gradient_error(layer, x, rng)
    for kind in ("bce", "mce"):
        errs[kind] = loss_gradient_error(kind, rng)
    return errs
