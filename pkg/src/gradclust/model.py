"""Feed-forward networks with manual backprop that keeps per-example factors.

A layer with weights ``W`` of shape ``(I, O)`` sees inputs ``A`` and output
gradients ``D``; the weight gradient of one example is ``sum_t A_t D_t^T``
where ``t`` runs over spatial positions (``T = 1`` for fully-connected
layers). Biases are kept as a separate factor block whose input is a
constant one, so every parameter block has the same ``(A, D)`` shape and
the clustering code can treat them uniformly.

Factor arrays are stored example-major: ``A`` is ``(N, T, I)`` and ``D`` is
``(N, T, O)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from gradclust.numerics import ContractError, NumericalError, as_generator

LOSSES = ("logistic", "xent")
ACTIVATIONS = ("relu", "identity")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    activation: str = "relu"
    bias: bool = True
    in_shape: tuple[int, int, int] | None = None  # conv input (H, W, C)
    kernel: tuple[int, int] | None = None  # conv kernel (h, w)

    def __post_init__(self):
        if self.kind not in ("fc", "conv"):
            raise ContractError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ContractError("layer dims must be >= 1")
        if self.kind == "conv":
            if self.in_shape is None or self.kernel is None:
                raise ContractError("conv layers need in_shape and kernel")
            object.__setattr__(self, "in_shape", tuple(int(x) for x in self.in_shape))
            object.__setattr__(self, "kernel", tuple(int(x) for x in self.kernel))
            H, W, C = self.in_shape
            h, w = self.kernel
            if h > H or w > W:
                raise ContractError("kernel larger than input")
            if self.in_dim != h * w * C:
                raise ContractError("conv in_dim must equal h*w*C")

    @classmethod
    def fc(cls, in_dim, out_dim, activation="relu", bias=True):
        return cls("fc", in_dim, out_dim, activation, bias)

    @classmethod
    def conv(cls, in_shape, kernel, out_channels, activation="relu", bias=True):
        H, W, C = in_shape
        h, w = kernel
        return cls("conv", h * w * C, out_channels, activation, bias, tuple(in_shape), tuple(kernel))

    @property
    def positions(self) -> int:
        if self.kind == "fc":
            return 1
        H, W, _ = self.in_shape
        h, w = self.kernel
        return (H - h + 1) * (W - w + 1)

    @property
    def input_size(self) -> int:
        if self.kind == "fc":
            return self.in_dim
        H, W, C = self.in_shape
        return H * W * C

    @property
    def output_size(self) -> int:
        return self.positions * self.out_dim

    @property
    def n_params(self) -> int:
        return self.in_dim * self.out_dim + (self.out_dim if self.bias else 0)

    def to_dict(self):
        d = {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim,
             "activation": self.activation, "bias": self.bias}
        if self.kind == "conv":
            d["in_shape"] = list(self.in_shape)
            d["kernel"] = list(self.kernel)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "in_shape" in d:
            d["in_shape"] = tuple(d["in_shape"])
            d["kernel"] = tuple(d["kernel"])
        return cls(**d)


@dataclass(frozen=True)
class Block:
    """One parameter block (a weight matrix or a bias vector) inside theta."""

    layer: int
    name: str
    offset: int
    in_dim: int
    out_dim: int

    @property
    def size(self):
        return self.in_dim * self.out_dim


def param_blocks(specs) -> list[Block]:
    blocks, off = [], 0
    for l, s in enumerate(specs):
        blocks.append(Block(l, f"W{l}", off, s.in_dim, s.out_dim))
        off += s.in_dim * s.out_dim
        if s.bias:
            blocks.append(Block(l, f"b{l}", off, 1, s.out_dim))
            off += s.out_dim
    return blocks


@dataclass(frozen=True)
class Model:
    """An immutable parameter snapshot of a feed-forward network."""

    specs: tuple[LayerSpec, ...]
    theta: np.ndarray
    loss: str = "xent"
    step: int = 0
    blocks: tuple[Block, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        specs = tuple(self.specs)
        if not specs:
            raise ContractError("model needs at least one layer")
        for prev, nxt in zip(specs, specs[1:]):
            if prev.output_size != nxt.input_size:
                raise ContractError(f"layer size mismatch: {prev.output_size} -> {nxt.input_size}")
        if self.loss not in LOSSES:
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.loss == "logistic" and specs[-1].output_size != 1:
            raise ContractError("logistic loss needs a single output")
        theta = np.array(self.theta, dtype=np.float64).ravel()
        if theta.size != sum(s.n_params for s in specs):
            raise ContractError(f"theta has {theta.size} entries, expected {sum(s.n_params for s in specs)}")
        theta.flags.writeable = False
        object.__setattr__(self, "specs", specs)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "blocks", tuple(param_blocks(specs)))

    @classmethod
    def init(cls, specs, rng, loss="xent", scale=1.0):
        """He-style normal init for weights, zero biases."""
        gen = as_generator(rng)
        parts = []
        for s in specs:
            parts.append(gen.standard_normal(s.in_dim * s.out_dim) * scale * np.sqrt(2.0 / s.in_dim))
            if s.bias:
                parts.append(np.zeros(s.out_dim))
        return cls(tuple(specs), np.concatenate(parts), loss)

    @property
    def n_params(self) -> int:
        return self.theta.size

    def layer_params(self, l):
        s = self.specs[l]
        blocks = [b for b in self.blocks if b.layer == l]
        W = self.theta[blocks[0].offset:blocks[0].offset + blocks[0].size].reshape(s.in_dim, s.out_dim)
        b = None
        if s.bias:
            b = self.theta[blocks[1].offset:blocks[1].offset + blocks[1].size]
        return W, b

    def with_theta(self, theta, step=None):
        return Model(self.specs, theta, self.loss, self.step if step is None else step)


def mlp(sizes, activation="relu", bias=True) -> tuple[LayerSpec, ...]:
    """FC specs for the given layer widths; the last layer is linear."""
    specs = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        act = "identity" if i == len(sizes) - 2 else activation
        specs.append(LayerSpec.fc(a, b, act, bias))
    return tuple(specs)


def extract_patches(h: np.ndarray, spec: LayerSpec) -> np.ndarray:
    """im2col: ``(N, H*W*C)`` -> ``(N, T, h*w*C)`` with (kh, kw, c) patch order."""
    H, W, C = spec.in_shape
    kh, kw = spec.kernel
    img = h.reshape(-1, H, W, C)
    win = sliding_window_view(img, (kh, kw), axis=(1, 2))  # N, H', W', C, kh, kw
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win).reshape(img.shape[0], -1, kh * kw * C)


def fold_patches(dp: np.ndarray, spec: LayerSpec) -> np.ndarray:
    """Adjoint of ``extract_patches``: scatter-add patch gradients into the image."""
    H, W, C = spec.in_shape
    kh, kw = spec.kernel
    Ho, Wo = H - kh + 1, W - kw + 1
    n = dp.shape[0]
    dp = dp.reshape(n, Ho, Wo, kh, kw, C)
    out = np.zeros((n, H, W, C))
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + Ho, j:j + Wo, :] += dp[:, :, :, i, j, :]
    return out.reshape(n, H * W * C)


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else z


def _act_grad(z, kind):
    # relu'(0) = 0 by convention
    return (z > 0).astype(np.float64) if kind == "relu" else np.ones_like(z)


def _loss_and_grad(logits, y, kind):
    """Per-example losses and d loss / d logits."""
    if kind == "logistic":
        z = logits[:, 0]
        y = np.asarray(y, dtype=np.float64)
        m = -y * z
        loss = np.logaddexp(0.0, m)
        # d/dz log(1 + exp(-y z)) = -y * sigmoid(-y z)
        sig = np.exp(-np.logaddexp(0.0, -m))
        return loss, (-y * sig)[:, None]
    y = np.asarray(y, dtype=np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    idx = np.arange(len(y))
    loss = logz - shifted[idx, y]
    p = np.exp(shifted - logz[:, None])
    p[idx, y] -= 1.0
    return loss, p


@dataclass
class ForwardCache:
    inputs: list  # per layer, (N, T, I) patch matrices
    preacts: list  # per layer, (N, T, O)
    logits: np.ndarray


def forward(model: Model, X, y=None, weights=None):
    """Per-example losses (``None`` when ``y`` is omitted) and the backprop cache."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.specs[0].input_size:
        raise ContractError(f"batch has shape {X.shape}, model expects (N, {model.specs[0].input_size})")
    h = X
    inputs, preacts = [], []
    for l, s in enumerate(model.specs):
        W, b = model.layer_params(l)
        A = extract_patches(h, s) if s.kind == "conv" else h[:, None, :]
        z = A @ W
        if b is not None:
            z = z + b
        inputs.append(A)
        preacts.append(z)
        h = _act(z, s.activation).reshape(X.shape[0], -1)
    cache = ForwardCache(inputs, preacts, h)
    if y is None:
        return None, cache
    loss, _ = _loss_and_grad(h, y, model.loss)
    if weights is not None:
        loss = loss * np.asarray(weights, dtype=np.float64)
    return loss, cache


@dataclass
class LayerFactors:
    block: Block
    A: np.ndarray  # (N, T, I)
    D: np.ndarray  # (N, T, O)

    @property
    def T(self):
        return self.A.shape[1]

    def gradients(self) -> np.ndarray:
        """Dense per-example gradients for this block, ``(N, I, O)``."""
        return np.einsum("nti,nto->nio", self.A, self.D)


@dataclass
class PerExampleFactors:
    blocks: list[LayerFactors]
    n: int

    def per_example_gradients(self) -> np.ndarray:
        """All per-example gradients, ``(N, d)`` in theta layout."""
        return np.concatenate([f.gradients().reshape(self.n, -1) for f in self.blocks], axis=1)

    def subset(self, idx) -> PerExampleFactors:
        idx = np.asarray(idx)
        return PerExampleFactors([LayerFactors(f.block, f.A[idx], f.D[idx]) for f in self.blocks], len(idx))


def backward_factored(model: Model, X, y, weights=None, cache=None) -> PerExampleFactors:
    """Per-example ``(A, D)`` factors for every parameter block.

    ``D`` holds derivatives of each example's own loss (not the batch mean),
    so ``A_i D_i^T`` is exactly that example's gradient.
    """
    if cache is None:
        _, cache = forward(model, X)
    X = np.asarray(X)
    n = X.shape[0]
    _, g = _loss_and_grad(cache.logits, y, model.loss)
    if weights is not None:
        g = g * np.asarray(weights, dtype=np.float64)[:, None]
    out = []
    blocks = {b.name: b for b in model.blocks}
    for l in range(len(model.specs) - 1, -1, -1):
        s = model.specs[l]
        z = cache.preacts[l]
        D = g.reshape(z.shape) * _act_grad(z, s.activation)
        A = cache.inputs[l]
        layer = [LayerFactors(blocks[f"W{l}"], A, D)]
        if s.bias:
            layer.append(LayerFactors(blocks[f"b{l}"], np.ones(A.shape[:2] + (1,)), D))
        out = layer + out
        if l > 0:
            W, _ = model.layer_params(l)
            dA = D @ W.T
            g = fold_patches(dA, s) if s.kind == "conv" else dA[:, 0, :]
    return PerExampleFactors(out, n)


def per_example_gradient(factors: PerExampleFactors, i: int) -> np.ndarray:
    if not 0 <= i < factors.n:
        raise IndexError(f"example {i} out of range for batch of {factors.n}")
    return np.concatenate([np.einsum("ti,to->io", f.A[i], f.D[i]).ravel() for f in factors.blocks])


def per_example_gradients(model: Model, X, y, weights=None) -> np.ndarray:
    return backward_factored(model, X, y, weights).per_example_gradients()


def batch_gradient(model: Model, X, y, weights=None) -> np.ndarray:
    """Mean gradient over the batch without materializing per-example gradients."""
    f = backward_factored(model, X, y, weights)
    return np.concatenate([np.einsum("nti,nto->io", b.A, b.D).ravel() for b in f.blocks]) / f.n


def mean_loss(model: Model, X, y) -> float:
    loss, _ = forward(model, X, y)
    return float(loss.mean())


def sgd_step(model: Model, X, y, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """One heavy-ball SGD step; returns ``(new_model, new_velocity)``.

    ``v <- momentum * v + (g + weight_decay * theta)``, ``theta <- theta - lr * v``.
    """
    if lr < 0:
        raise ContractError("lr must be >= 0")
    if not 0 <= momentum < 1:
        raise ContractError("momentum must be in [0, 1)")
    if weight_decay < 0:
        raise ContractError("weight_decay must be >= 0")
    # overflow is caught by the finiteness check below, not reported as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        g = batch_gradient(model, X, y) + weight_decay * model.theta
        v = g if velocity is None else momentum * velocity + g
        theta = model.theta - lr * v
    if not np.all(np.isfinite(theta)):
        raise NumericalError(f"non-finite parameters after step {model.step + 1}")
    return model.with_theta(theta, model.step + 1), v


def save_checkpoint(model: Model, path) -> None:
    """JSON checkpoint; floats are stored as hex strings for exact round-trips."""
    doc = {
        "format": "gradclust-checkpoint",
        "version": CHECKPOINT_VERSION,
        "loss": model.loss,
        "step": model.step,
        "layers": [s.to_dict() for s in model.specs],
        "theta": [float(x).hex() for x in model.theta],
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> Model:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "gradclust-checkpoint" or doc.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    theta = np.array([float.fromhex(x) for x in doc["theta"]])
    specs = tuple(LayerSpec.from_dict(d) for d in doc["layers"])
    return Model(specs, theta, doc["loss"], doc["step"])
