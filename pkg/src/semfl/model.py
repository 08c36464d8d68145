"""Semantic-communication classifier.

Pipeline: semantic encoder (conv stack) -> channel encoder (dense to the
semantic vector) -> AWGN channel -> channel decoder (dense) -> semantic
decoder (dense to class logits). The last conv activations are returned
alongside the semantic vector so they can be explained later.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, IngestionError, ParameterError
from .params import ParamVector

EVAL_CHUNK = 256


@dataclass(frozen=True)
class Architecture:
    image_shape: tuple = (1, 16, 16)
    conv_channels: tuple = (8, 16)
    kernel_size: int = 3
    stride: int = 1
    semantic_dim: int = 16
    hidden_dim: int = 32
    num_classes: int = 2
    act_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(d) for d in self.image_shape))
        object.__setattr__(self, "conv_channels", tuple(int(d) for d in self.conv_channels))
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise DimensionError(f"image shape must be [C,H,W], got {self.image_shape}")
        if not self.conv_channels:
            raise ParameterError("need at least one conv layer")
        if self.num_classes < 2:
            raise ParameterError("need at least 2 classes")
        T.check_slope(self.act_slope)
        _, h, w = self.feature_shape
        if h < 1 or w < 1:
            raise DimensionError("conv stack shrinks the image to nothing")
        if self.semantic_dim >= math.prod(self.image_shape):
            raise ParameterError("semantic vector must be shorter than the raw input")

    @property
    def feature_shape(self):
        _, h, w = self.image_shape
        for _ in self.conv_channels:
            h = (h - self.kernel_size) // self.stride + 1
            w = (w - self.kernel_size) // self.stride + 1
        return (self.conv_channels[-1], h, w)

    def manifest(self):
        k = self.kernel_size
        layers = []
        cin = self.image_shape[0]
        for i, cout in enumerate(self.conv_channels):
            layers.append((f"sem_enc.conv{i}.weight", (cout, cin, k, k)))
            layers.append((f"sem_enc.conv{i}.bias", (cout,)))
            cin = cout
        feat = math.prod(self.feature_shape)
        layers += [
            ("chan_enc.weight", (self.semantic_dim, feat)),
            ("chan_enc.bias", (self.semantic_dim,)),
            ("chan_dec.weight", (self.hidden_dim, self.semantic_dim)),
            ("chan_dec.bias", (self.hidden_dim,)),
            ("sem_dec.weight", (self.num_classes, self.hidden_dim)),
            ("sem_dec.bias", (self.num_classes,)),
        ]
        return tuple(layers)

    @property
    def num_params(self):
        return sum(math.prod(s) for _, s in self.manifest())


@dataclass(frozen=True)
class ChannelSpec:
    """Scalar AWGN channel ``y = gain * x + n`` with ``n ~ N(0, noise_std^2)``."""

    gain: float = 1.0
    noise_std: float = 0.0

    def __post_init__(self):
        if not self.gain > 0:
            raise ParameterError(f"channel gain must be positive, got {self.gain}")
        if not self.noise_std >= 0:
            raise ParameterError(f"noise_std must be non-negative, got {self.noise_std}")


def init_params(arch, seed=0):
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in arch.manifest():
        if name.endswith(".bias"):
            chunks.append(np.zeros(math.prod(shape)))
        else:
            fan_in = math.prod(shape[1:])
            chunks.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=math.prod(shape)))
    return ParamVector(np.concatenate(chunks), arch.manifest())


def transmit(X, chan, rng_seed):
    """Pass semantic symbols through the channel.

    The noise is drawn from ``rng_seed`` (an int or a numpy Generator) and is
    a constant as far as gradients are concerned.
    """
    rng = np.random.default_rng(rng_seed)
    X = T.as_tensor(X)
    noise = rng.normal(0.0, 1.0, size=X.shape) * chan.noise_std
    return T.add(T.mul(X, chan.gain), noise)


class SCModel:
    def __init__(self, arch=None):
        self.arch = arch or Architecture()
        self.manifest = self.arch.manifest()

    def bind(self, params, tape=None):
        """Map manifest names to tensors; trainable iff a tape is given."""
        if params.manifest != self.manifest:
            raise ContractError("parameter manifest does not match the architecture")
        if tape is None:
            return {name: T.Tensor(v) for name, v in params.views().items()}
        return {name: tape.param(name, v) for name, v in params.views().items()}

    def _check_input(self, x):
        shape = tuple(x.shape)
        if shape[-3:] != self.arch.image_shape or len(shape) not in (3, 4):
            raise DimensionError(f"input shape {shape} does not match image shape {self.arch.image_shape}")

    def encode(self, x, w, tape=None):
        """Semantic vector ``Q`` and last-conv activations ``A``.

        ``w`` is a bound weight dict or a ParamVector (bound as constants).
        With ``tape`` given and ``x`` a plain array, the input is lifted to a
        tape variable so that ``A`` becomes differentiable.
        """
        if isinstance(w, ParamVector):
            w = self.bind(w)
        self._check_input(x)
        if tape is not None and not isinstance(x, T.Tensor):
            x = tape.variable(x)
        h = T.as_tensor(x)
        slope = self.arch.act_slope
        for i in range(len(self.arch.conv_channels)):
            h = T.conv2d(h, w[f"sem_enc.conv{i}.weight"], self.arch.stride, w[f"sem_enc.conv{i}.bias"])
            h = T.leaky_relu(h, slope)
        A = h
        flat = A.reshape(A.shape[:-3] + (-1,))
        Q = T.dense(flat, w["chan_enc.weight"], w["chan_enc.bias"])
        return Q, A

    def decode(self, Y, w):
        if isinstance(w, ParamVector):
            w = self.bind(w)
        Y = T.as_tensor(Y)
        if Y.shape[-1] != self.arch.semantic_dim:
            raise DimensionError(f"received vector length {Y.shape[-1]} != {self.arch.semantic_dim}")
        h = T.leaky_relu(T.dense(Y, w["chan_dec.weight"], w["chan_dec.bias"]), self.arch.act_slope)
        return T.dense(h, w["sem_dec.weight"], w["sem_dec.bias"])

    def forward(self, x, w, chan, rng_seed, tape=None):
        Q, A = self.encode(x, w, tape)
        Y = transmit(Q, chan, rng_seed)
        return self.decode(Y, w), Q, A

    def forward_loss(self, x, label, params, chan, seed):
        """Cross-entropy of one sample (or a batch, averaged) through the full pipeline."""
        logits, _, _ = self.forward(x, params, chan, seed)
        return float(T.softmax_cross_entropy(logits, label).data)

    def loss_and_grad(self, params, x, labels, chan, rng):
        """Mean batch loss and its flat gradient."""
        tape = T.Tape()
        w = self.bind(params, tape)
        logits, _, _ = self.forward(x, w, chan, rng)
        loss = T.softmax_cross_entropy(logits, labels)
        grads = tape.backward(loss)
        return float(loss.data), params.flatten_grads(grads)

    def per_sample_grads(self, params, x, labels, chan, rng):
        """[B, P] matrix of per-sample loss gradients."""
        tape = T.Tape()
        w = self.bind(params, tape)
        logits, _, _ = self.forward(x, w, chan, rng)
        loss = T.softmax_cross_entropy(logits, labels, reduction="sum")
        grads = tape.backward(loss, per_sample=True)
        return params.flatten_grads(grads)

    def squared_grad_sum(self, params, x, labels, chan, rng):
        """Sum over the batch of squared per-sample loss gradients, flat [P]."""
        tape = T.Tape()
        w = self.bind(params, tape)
        logits, _, _ = self.forward(x, w, chan, rng)
        loss = T.softmax_cross_entropy(logits, labels, reduction="sum")
        return params.flatten_grads(tape.backward(loss, squared=True))

    def _batched(self, x, params, chan, seed, fn):
        """Evaluate ``fn(logits, lo, hi)`` in chunks with chunk-independent noise."""
        rng = np.random.default_rng(seed)
        x = np.asarray(x, dtype=np.float64)
        noise = rng.normal(0.0, 1.0, size=(x.shape[0], self.arch.semantic_dim)) * chan.noise_std
        w = self.bind(params)
        out = []
        for lo in range(0, x.shape[0], EVAL_CHUNK):
            hi = min(lo + EVAL_CHUNK, x.shape[0])
            Q, _ = self.encode(x[lo:hi], w)
            Y = Q.data * chan.gain + noise[lo:hi]
            logits = self.decode(Y, w).data
            out.append(fn(logits, lo, hi))
        return out

    def per_sample_losses(self, x, labels, params, chan, seed):
        labels = np.asarray(labels)
        parts = self._batched(
            x, params, chan, seed,
            lambda z, lo, hi: T.softmax_cross_entropy(z, labels[lo:hi], reduction="none").data,
        )
        return np.concatenate(parts) if parts else np.zeros(0)

    def logits(self, x, params, chan, seed):
        parts = self._batched(x, params, chan, seed, lambda z, lo, hi: z)
        return np.concatenate(parts) if parts else np.zeros((0, self.arch.num_classes))

    def predict(self, x, params, chan, seed):
        return self.logits(x, params, chan, seed).argmax(axis=1)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_CONV_RE = re.compile(r"sem_enc\.conv(\d+)\.weight")


def save_model(path, params, arch):
    """Text header (one ``name shape`` line per layer) then little-endian float32 values."""
    meta = (
        f"# image_shape={','.join(map(str, arch.image_shape))} stride={arch.stride} "
        f"act_slope={arch.act_slope!r}"
    )
    lines = [meta] + [f"{name} {','.join(map(str, shape))}" for name, shape in params.manifest]
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(params.values.astype("<f4").tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise IngestionError(f"{path}: missing header terminator")
    meta = {}
    manifest = []
    for line in blob[:sep].decode("ascii").splitlines():
        if line.startswith("#"):
            for item in line[1:].split():
                key, _, val = item.partition("=")
                meta[key] = val
            continue
        name, shape = line.split()
        manifest.append((name, tuple(int(d) for d in shape.split(","))))
    values = np.frombuffer(blob[sep + 2:], dtype="<f4").astype(np.float64)
    layers = dict(manifest)
    convs = sorted(int(m.group(1)) for n in layers if (m := _CONV_RE.fullmatch(n)))
    if not convs:
        raise IngestionError(f"{path}: no conv layers in header")
    conv_channels = tuple(layers[f"sem_enc.conv{i}.weight"][0] for i in convs)
    first = layers["sem_enc.conv0.weight"]
    if "image_shape" in meta:
        image_shape = tuple(int(d) for d in meta["image_shape"].split(","))
    else:
        # square images, stride 1
        feat = layers["chan_enc.weight"][1] // conv_channels[-1]
        side = math.isqrt(feat) + len(convs) * (first[2] - 1)
        image_shape = (first[1], side, side)
    arch = Architecture(
        image_shape=image_shape,
        conv_channels=conv_channels,
        kernel_size=first[2],
        stride=int(meta.get("stride", 1)),
        semantic_dim=layers["chan_enc.weight"][0],
        hidden_dim=layers["chan_dec.weight"][0],
        num_classes=layers["sem_dec.weight"][0],
        act_slope=float(meta.get("act_slope", 0.01)),
    )
    if tuple(manifest) != arch.manifest():
        raise IngestionError(f"{path}: header does not describe a supported architecture")
    try:
        params = ParamVector(values, tuple(manifest))
    except ContractError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    return params, arch
