"""Minimal dense-network engine with manual backpropagation.

Everything runs in float64 on flat parameter vectors so that model state can
be copied, averaged, serialised and compared bit-exactly. Two network types
are provided: an embedding backbone (plain MLP with ReLU between layers) and
a two-layer classification head with optional batch-norm and dropout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InputError, UsageError
from . import losses

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # running = m*running + (1-m)*batch


@dataclass(frozen=True)
class Segment:
    """One named slice of a flat parameter vector (a weight matrix, bias, ...)."""

    name: str
    shape: tuple[int, ...]
    trainable: bool = True

    @property
    def size(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


class ParamBlock:
    """Contiguous float64 parameter storage with per-segment shape metadata.

    Views returned by :meth:`view` alias the flat ``values`` array, so code can
    address parameters either as shaped matrices (forward/backward) or as one
    vector (optimiser steps, aggregation, serialisation).
    """

    def __init__(self, segments: Sequence[Segment], values: np.ndarray | None = None):
        self.segments = tuple(segments)
        names = [s.name for s in self.segments]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate segment names: {names}")
        self.size = sum(s.size for s in self.segments)
        if values is None:
            values = np.zeros(self.size, dtype=np.float64)
        else:
            values = np.ascontiguousarray(values, dtype=np.float64)
            if values.ndim != 1 or values.size != self.size:
                raise ConfigurationError(
                    f"parameter vector has length {values.size}, expected {self.size}")
        self.values = values
        self._offsets = {}
        off = 0
        for seg in self.segments:
            self._offsets[seg.name] = off
            off += seg.size
        mask = np.zeros(self.size, dtype=np.float64)
        for seg in self.segments:
            if seg.trainable:
                o = self._offsets[seg.name]
                mask[o:o + seg.size] = 1.0
        self.trainable_mask = mask

    def view(self, name: str) -> np.ndarray:
        seg = next(s for s in self.segments if s.name == name)
        o = self._offsets[name]
        return self.values[o:o + seg.size].reshape(seg.shape)

    def copy(self) -> "ParamBlock":
        return ParamBlock(self.segments, self.values.copy())

    def zeros_grad(self) -> np.ndarray:
        """Flat gradient storage aligned with this block."""
        return np.zeros(self.size, dtype=np.float64)

    def grad_view(self, grads: np.ndarray, name: str) -> np.ndarray:
        seg = next(s for s in self.segments if s.name == name)
        o = self._offsets[name]
        return grads[o:o + seg.size].reshape(seg.shape)

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())


def glorot_uniform(segments: Sequence[Segment], seed) -> np.ndarray:
    """Uniform [-a, a] weight init with a = sqrt(6/(fan_in+fan_out)); zero biases.

    Batch-norm segments get the conventional (1, 0, 0, 1) for
    (gamma, beta, running mean, running var).
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    out = np.zeros(sum(s.size for s in segments), dtype=np.float64)
    off = 0
    for seg in segments:
        span = out[off:off + seg.size]
        if len(seg.shape) == 2:
            fan_in, fan_out = seg.shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            span[:] = rng.uniform(-a, a, size=seg.size)
        elif seg.name.endswith("gamma") or seg.name.endswith("var"):
            span[:] = 1.0
        # biases, bn beta and bn mean stay zero
        off += seg.size
    return out


class EmbeddingNet:
    """MLP feature extractor: linear layers with ReLU between them, linear output."""

    def __init__(self, dims: Sequence[int], params: ParamBlock | None = None,
                 init_seed=None):
        dims = tuple(int(d) for d in dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ConfigurationError(f"embedding dims must be >=2 positive ints, got {dims}")
        self.dims = dims
        segments = []
        for i in range(len(dims) - 1):
            segments.append(Segment(f"w{i}", (dims[i], dims[i + 1])))
            segments.append(Segment(f"b{i}", (dims[i + 1],)))
        if params is None:
            if init_seed is None:
                raise ConfigurationError("either params or init_seed is required")
            params = ParamBlock(segments, glorot_uniform(segments, init_seed))
        else:
            if tuple(params.segments) != tuple(segments):
                raise ConfigurationError("parameter block does not match architecture")
        self.params = params
        self._cache = None

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Map a batch [B, input_dim] to embeddings [B, output_dim].

        Caches layer inputs and pre-activations for a subsequent backward call.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ConfigurationError(
                f"batch shape {x.shape} incompatible with input dim {self.input_dim}")
        n_layers = len(self.dims) - 1
        inputs = [x]
        pre = []
        h = x
        for i in range(n_layers):
            z = h @ self.params.view(f"w{i}") + self.params.view(f"b{i}")
            pre.append(z)
            h = np.maximum(z, 0.0) if i < n_layers - 1 else z
            if i < n_layers - 1:
                inputs.append(h)
        self._cache = {"inputs": inputs, "pre": pre, "x": x, "out": h}
        return h

    def backward(self, d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Backprop d(loss)/d(output) to (flat parameter grads, d(loss)/d(input))."""
        if self._cache is None:
            raise UsageError("backward called before forward")
        inputs, pre = self._cache["inputs"], self._cache["pre"]
        n_layers = len(self.dims) - 1
        grads = self.params.zeros_grad()
        d = np.asarray(d_out, dtype=np.float64)
        for i in range(n_layers - 1, -1, -1):
            if i < n_layers - 1:
                d = d * (pre[i] > 0.0)
            self.params.grad_view(grads, f"w{i}")[:] = inputs[i].T @ d
            self.params.grad_view(grads, f"b{i}")[:] = d.sum(axis=0)
            d = d @ self.params.view(f"w{i}").T
        return grads, d


class MappingNet:
    """Two-layer classification head over embeddings.

    The first linear layer is optionally followed by batch normalisation,
    then ReLU, then optional (inverted) dropout; the second linear layer
    produces the logits. Batch-norm running statistics live in the parameter
    block as non-trainable segments so they travel with the head wherever
    parameters are copied or averaged.
    """

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, *,
                 batchnorm: bool = False, dropout_keep: float = 1.0,
                 params: ParamBlock | None = None, init_seed=None):
        if min(in_dim, hidden_dim, out_dim) < 1:
            raise ConfigurationError("all head dimensions must be positive")
        if not 0.0 < dropout_keep <= 1.0:
            raise ConfigurationError(f"dropout keep probability must be in (0,1], got {dropout_keep}")
        self.in_dim, self.hidden_dim, self.out_dim = int(in_dim), int(hidden_dim), int(out_dim)
        self.batchnorm = bool(batchnorm)
        self.dropout_keep = float(dropout_keep)
        segments = [Segment("w0", (self.in_dim, self.hidden_dim)),
                    Segment("b0", (self.hidden_dim,))]
        if self.batchnorm:
            segments += [Segment("bn_gamma", (self.hidden_dim,)),
                         Segment("bn_beta", (self.hidden_dim,)),
                         Segment("bn_mean", (self.hidden_dim,), trainable=False),
                         Segment("bn_var", (self.hidden_dim,), trainable=False)]
        segments += [Segment("w1", (self.hidden_dim, self.out_dim)),
                     Segment("b1", (self.out_dim,))]
        if params is None:
            if init_seed is None:
                raise ConfigurationError("either params or init_seed is required")
            params = ParamBlock(segments, glorot_uniform(segments, init_seed))
        else:
            if tuple(params.segments) != tuple(segments):
                raise ConfigurationError("parameter block does not match architecture")
        self.params = params
        self._cache = None

    def forward(self, v: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        """Map embeddings [B, in_dim] to logits [B, out_dim].

        In train mode batch-norm uses batch statistics (and updates the running
        ones) and dropout is active; rng is required only when dropout is on.
        Eval mode is deterministic.
        """
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != self.in_dim:
            raise ConfigurationError(
                f"feature shape {v.shape} incompatible with head input dim {self.in_dim}")
        cache = {"v": v, "train": train}
        a = v @ self.params.view("w0") + self.params.view("b0")
        cache["a"] = a
        h = a
        if self.batchnorm:
            gamma = self.params.view("bn_gamma")
            beta = self.params.view("bn_beta")
            if train:
                mu = a.mean(axis=0)
                var = a.var(axis=0)
                rmean = self.params.view("bn_mean")
                rvar = self.params.view("bn_var")
                rmean[:] = BN_MOMENTUM * rmean + (1.0 - BN_MOMENTUM) * mu
                rvar[:] = BN_MOMENTUM * rvar + (1.0 - BN_MOMENTUM) * var
            else:
                mu = self.params.view("bn_mean").copy()
                var = self.params.view("bn_var").copy()
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (a - mu) * inv_std
            h = gamma * xhat + beta
            cache.update(bn_mu=mu, bn_inv_std=inv_std, bn_xhat=xhat)
        z = np.maximum(h, 0.0)
        cache["pre_relu"] = h
        if train and self.dropout_keep < 1.0:
            if rng is None:
                raise InputError("dropout is active: an rng is required in train mode")
            mask = (rng.random(z.shape) < self.dropout_keep).astype(np.float64)
            z = z * mask / self.dropout_keep
            cache["drop_mask"] = mask
        cache["hidden"] = z
        logits = z @ self.params.view("w1") + self.params.view("b1")
        cache["out"] = logits
        self._cache = cache
        return logits

    def backward(self, d_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Backprop d(loss)/d(logits) to (flat parameter grads, d(loss)/d(features))."""
        if self._cache is None:
            raise UsageError("backward called before forward")
        c = self._cache
        grads = self.params.zeros_grad()
        d = np.asarray(d_logits, dtype=np.float64)
        self.params.grad_view(grads, "w1")[:] = c["hidden"].T @ d
        self.params.grad_view(grads, "b1")[:] = d.sum(axis=0)
        d = d @ self.params.view("w1").T
        if "drop_mask" in c:
            d = d * c["drop_mask"] / self.dropout_keep
        d = d * (c["pre_relu"] > 0.0)
        if self.batchnorm:
            gamma = self.params.view("bn_gamma")
            xhat = c["bn_xhat"]
            inv_std = c["bn_inv_std"]
            self.params.grad_view(grads, "bn_gamma")[:] = (d * xhat).sum(axis=0)
            self.params.grad_view(grads, "bn_beta")[:] = d.sum(axis=0)
            dxhat = d * gamma
            if c["train"]:
                b = d.shape[0]
                a_centred = c["a"] - c["bn_mu"]
                dvar = (dxhat * a_centred).sum(axis=0) * (-0.5) * inv_std ** 3
                dmu = -(dxhat.sum(axis=0)) * inv_std + dvar * (-2.0 / b) * a_centred.sum(axis=0)
                d = dxhat * inv_std + dvar * (2.0 / b) * a_centred + dmu / b
            else:
                d = dxhat * inv_std
        self.params.grad_view(grads, "w0")[:] = c["v"].T @ d
        self.params.grad_view(grads, "b0")[:] = d.sum(axis=0)
        d_v = d @ self.params.view("w0").T
        return grads, d_v


def forward_pair(embed: EmbeddingNet, head: MappingNet, batch: np.ndarray,
                 train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Run batch -> embedding -> logits, leaving both caches primed for backward."""
    return head.forward(embed.forward(batch), train=train, rng=rng)


def _head_loss(logits, labels, spec, teacher_logits):
    """Loss value and d(loss)/d(logits) for the model that owns `logits`.

    The model is treated as the distillation student: the classification flag
    selects cross-entropy on its own logits, the distillation flag adds the
    temperature-scaled KL pull toward the supplied (constant) teacher logits.
    """
    if not spec.classification and not spec.distill:
        raise InputError("loss spec enables no term computable from one model's logits")
    total = 0.0
    d = np.zeros_like(logits)
    if spec.classification:
        val, g = losses.cross_entropy_with_grad(logits, labels)
        total += val
        d += g
    if spec.distill:
        if teacher_logits is None:
            raise InputError("distillation term enabled but no teacher logits supplied")
        val, g = losses.kd_kl_with_grad(logits, teacher_logits, spec.temperature)
        total += val
        d += g
    return total, d


def backward(embed: EmbeddingNet, head: MappingNet, batch: np.ndarray,
             labels: np.ndarray, spec: "losses.LossSpec",
             teacher_logits: np.ndarray | None = None,
             loss_scale: float = 1.0) -> tuple[np.ndarray, np.ndarray, float]:
    """Exact reverse-mode gradients of the configured loss for one model.

    Requires a prior forward pass through `embed` and `head` on `batch` (the
    caches must still chain together). Returns flat gradients aligned with the
    embedding and head parameter blocks, plus the batch-mean loss value.
    """
    if embed._cache is None or head._cache is None:
        raise UsageError("backward requires a prior forward pass on this batch")
    if head._cache["v"] is not embed._cache["out"]:
        raise UsageError("head forward cache does not chain from this embedding forward")
    if embed._cache["x"] is not batch and not np.array_equal(embed._cache["x"], batch):
        raise UsageError("forward cache was computed on a different batch")
    logits = head._cache["out"]
    total, d_logits = _head_loss(logits, labels, spec, teacher_logits)
    if loss_scale != 1.0:
        total = loss_scale * total
        d_logits = loss_scale * d_logits
    head_grads, d_feat = head.backward(d_logits)
    embed_grads, _ = embed.backward(d_feat)
    return embed_grads, head_grads, float(total)


def loss_value(embed: EmbeddingNet, head: MappingNet, batch, labels, spec,
               teacher_logits=None, train: bool = False,
               rng: np.random.Generator | None = None) -> float:
    """Forward pass plus the same loss composition `backward` differentiates."""
    logits = forward_pair(embed, head, batch, train=train, rng=rng)
    total, _ = _head_loss(logits, labels, spec, teacher_logits)
    return float(total)


def relu_margin(embed: EmbeddingNet, head: MappingNet, batch,
                train: bool = True) -> float:
    """Smallest |pre-activation| feeding any ReLU for this batch.

    Central differences are only trustworthy where the loss is locally smooth;
    a batch whose margin does not comfortably exceed eps times the activation
    scale can straddle a ReLU kink and should not be used for grad checking.
    """
    forward_pair(embed, head, batch, train=train)
    margins = [np.min(np.abs(z)) for z in embed._cache["pre"][:-1]]
    margins.append(np.min(np.abs(head._cache["pre_relu"])))
    return float(min(margins)) if margins else np.inf


def grad_check(embed: EmbeddingNet, head: MappingNet, batch, labels, spec,
               teacher_logits=None, eps: float = 1e-5, train: bool = True) -> float:
    """Max mixed relative error of analytic gradients vs central differences.

    Per coordinate the error is |a - f| / max(1, |a|, |f|), which degrades to
    absolute error for small gradients and never divides by zero. Dropout must
    be disabled (its masks would be redrawn per evaluation); batch-norm in
    train mode is fine since batch statistics are deterministic. The batch
    should clear :func:`relu_margin` so no central difference crosses a kink.
    """
    if train and head.dropout_keep < 1.0:
        raise UsageError("grad_check requires dropout disabled")
    snap_e = embed.params.values.copy()
    snap_h = head.params.values.copy()
    try:
        forward_pair(embed, head, batch, train=train)
        e_grads, h_grads, _ = backward(embed, head, batch, labels, spec, teacher_logits)
        worst = 0.0
        for vec, grads in ((embed.params.values, e_grads), (head.params.values, h_grads)):
            for i in range(vec.size):
                saved = vec[i]
                vec[i] = saved + eps
                up = loss_value(embed, head, batch, labels, spec, teacher_logits, train=train)
                vec[i] = saved - eps
                down = loss_value(embed, head, batch, labels, spec, teacher_logits, train=train)
                vec[i] = saved
                fd = (up - down) / (2.0 * eps)
                err = abs(grads[i] - fd) / max(1.0, abs(grads[i]), abs(fd))
                worst = max(worst, err)
        return worst
    finally:
        embed.params.values[:] = snap_e
        head.params.values[:] = snap_h


class OptimizerState:
    """SGD state: one momentum buffer aligned with a parameter block."""

    def __init__(self, block: ParamBlock, momentum: float = 0.0,
                 weight_decay: float = 0.0, nesterov: bool = False):
        if nesterov and momentum == 0.0:
            raise ConfigurationError("nesterov requires a nonzero momentum coefficient")
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.nesterov = bool(nesterov)
        self.buf = np.zeros(block.size, dtype=np.float64)

    def reset(self) -> None:
        self.buf[:] = 0.0


def sgd_step(params: ParamBlock, grads: np.ndarray, opt: OptimizerState, lr: float) -> None:
    """In-place SGD update with optional weight decay and (Nesterov) momentum.

    Weight decay is added to the gradient before momentum, and only on
    trainable segments (batch-norm running statistics are never stepped).
    With momentum 0 and weight decay 0 this is exactly w -= lr*g.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.values.shape:
        raise InputError(f"gradient length {grads.size} != parameter length {params.size}")
    if opt.buf.shape != params.values.shape:
        raise InputError("optimizer state does not match this parameter block")
    if not np.isfinite(grads).all():
        bad = np.flatnonzero(~np.isfinite(grads))
        raise InputError(
            f"non-finite gradient at {bad.size} coordinate(s), first index {bad[0]} "
            f"value {grads[bad[0]]}")
    if opt.weight_decay != 0.0:
        g = grads + opt.weight_decay * (params.values * params.trainable_mask)
    else:
        g = grads
    if opt.momentum == 0.0:
        params.values -= lr * g
    else:
        opt.buf *= opt.momentum
        opt.buf += g
        step = g + opt.momentum * opt.buf if opt.nesterov else opt.buf
        params.values -= lr * step
    if not params.all_finite():
        raise InputError("parameters became non-finite after update (lr too large?)")


@dataclass(frozen=True)
class LrSchedule:
    """Step-decay schedule: rate(e) = base * decay^(e // every)."""

    base: float
    decay: float = 0.1
    every: int = 40

    def __post_init__(self):
        if self.base <= 0 or not 0 < self.decay <= 1 or self.every < 1:
            raise ConfigurationError(
                f"invalid schedule (base={self.base}, decay={self.decay}, every={self.every})")

    def at(self, epoch: int) -> float:
        if epoch < 0:
            raise InputError(f"epoch must be >= 0, got {epoch}")
        return self.base * self.decay ** (epoch // self.every)
