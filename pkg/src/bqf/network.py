"""Network assembly: reference architectures, binarized-layer wiring, forward
pass, evaluation, and the discretization step.

Two reference architectures are registered:

  * ``mlp_mnist``:  Flatten, 784-256-256-10 dense stack with LeakyReLU.
  * ``cnn_cifar``:  four 3x3 conv blocks (32/32/64/64 channels, BatchNorm and
    LeakyReLU each, 2x2 average pooling after blocks 1 and 3), dense head.

By default the first and last weight layers stay full precision and every
other Dense/Conv2D is binarized; ``binarize_all`` flips them all. When
activation quantization is enabled, the quantizer sits after the nonlinearity
of each binarized layer (never on the first-layer input or the logits).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bqf import tensor as T
from bqf.binarize import (BinarizedLayerState, BinarizerKind, binarize_weights,
                          discretize_values)
from bqf.layers import (AvgPool2x2, BatchNorm, Conv2D, Dense, Flatten, Layer,
                        LeakyReLU, MaxPool2x2, PACTQuant)
from bqf.quantnet import QuantNet, quantnet_for_layer
from bqf.tensor import Tensor


@dataclass(frozen=True)
class LayerSpec:
    kind: str                 # dense | conv | batchnorm | leaky_relu | avgpool | maxpool | flatten
    args: tuple = ()
    binarizable: bool = False  # weight layer eligible for binarization


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def binarized_flags(self, binarize_all: bool = False) -> list[bool]:
        """Per-layer flags; first and last eligible layers stay full precision
        unless binarize_all is set."""
        idx = [i for i, ls in enumerate(self.layers) if ls.binarizable]
        flags = [False] * len(self.layers)
        for i in idx:
            flags[i] = True
        if not binarize_all and idx:
            flags[idx[0]] = False
            flags[idx[-1]] = False
        return flags


SPECS: dict[str, NetworkSpec] = {
    "mlp_mnist": NetworkSpec(
        name="mlp_mnist",
        input_shape=(1, 28, 28),
        layers=(
            LayerSpec("flatten"),
            LayerSpec("dense", (784, 256), binarizable=True),
            LayerSpec("leaky_relu"),
            LayerSpec("dense", (256, 256), binarizable=True),
            LayerSpec("leaky_relu"),
            LayerSpec("dense", (256, 10), binarizable=True),
        ),
    ),
    "cnn_cifar": NetworkSpec(
        name="cnn_cifar",
        input_shape=(3, 32, 32),
        layers=(
            LayerSpec("conv", (3, 3, 32), binarizable=True),
            LayerSpec("batchnorm", (32,)),
            LayerSpec("leaky_relu"),
            LayerSpec("avgpool"),
            LayerSpec("conv", (3, 32, 32), binarizable=True),
            LayerSpec("batchnorm", (32,)),
            LayerSpec("leaky_relu"),
            LayerSpec("conv", (3, 32, 64), binarizable=True),
            LayerSpec("batchnorm", (64,)),
            LayerSpec("leaky_relu"),
            LayerSpec("avgpool"),
            LayerSpec("conv", (3, 64, 64), binarizable=True),
            LayerSpec("batchnorm", (64,)),
            LayerSpec("leaky_relu"),
            LayerSpec("flatten"),
            LayerSpec("dense", (64 * 8 * 8, 10), binarizable=True),
        ),
    ),
}


def _build_layer(ls: LayerSpec, rng: np.random.Generator, dtype) -> Layer:
    if ls.kind == "dense":
        return Dense(*ls.args, rng=rng, dtype=dtype)
    if ls.kind == "conv":
        k, m, n = ls.args
        return Conv2D(k, m, n, stride=1, pad=1, rng=rng, dtype=dtype)
    if ls.kind == "batchnorm":
        return BatchNorm(*ls.args, dtype=dtype)
    if ls.kind == "leaky_relu":
        return LeakyReLU()
    if ls.kind == "avgpool":
        return AvgPool2x2()
    if ls.kind == "maxpool":
        return MaxPool2x2()
    if ls.kind == "flatten":
        return Flatten()
    raise ValueError(f"unknown layer kind {ls.kind!r}")


class Network:
    """Ordered layers plus binarization state for the flagged weight layers."""

    def __init__(self, spec: NetworkSpec, layers: list[Layer],
                 binarized: dict[int, BinarizedLayerState],
                 activations: dict[int, PACTQuant] | None = None):
        self.spec = spec
        self.layers = layers
        self.binarized = binarized           # layer index -> state
        self.activations = activations or {}  # index of nonlinearity -> quantizer

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, spec_name: str, *, binarizer: BinarizerKind | None,
              rng: np.random.Generator, binarize_all: bool = False,
              activation_bits: int = 0, warm_start: bool = True,
              dtype=np.float32) -> "Network":
        spec = SPECS[spec_name]
        layers = [_build_layer(ls, rng, dtype) for ls in spec.layers]
        binarized: dict[int, BinarizedLayerState] = {}
        activations: dict[int, PACTQuant] = {}
        flags = spec.binarized_flags(binarize_all)
        for i, (layer, on) in enumerate(zip(layers, flags)):
            if not on:
                continue
            if binarizer is not None:
                meta = None
                if binarizer is BinarizerKind.QuantNetMeta:
                    meta = quantnet_for_layer(layer.W.shape, rng=rng,
                                              warm_start=warm_start, dtype=dtype)
                binarized[i] = BinarizedLayerState(W=layer.W, kind=binarizer, meta=meta)
            # activation quantizers sit after the nonlinearity of flagged layers,
            # with or without weight binarization (e.g. restored fixed-point models)
            if activation_bits > 0:
                j = cls._nonlinearity_after(spec, i)
                if j is not None:
                    activations[j] = PACTQuant(activation_bits, dtype=dtype)
        return cls(spec, layers, binarized, activations)

    @staticmethod
    def _nonlinearity_after(spec: NetworkSpec, layer_idx: int) -> int | None:
        for j in range(layer_idx + 1, len(spec.layers)):
            if spec.layers[j].kind == "leaky_relu":
                return j
            if spec.layers[j].kind in ("dense", "conv"):
                return None  # next weight layer first: no nonlinearity to quantize
        return None

    # -- forward / loss ------------------------------------------------------

    def forward(self, x: Tensor, mode: str = "train",
                weight_overrides: dict[int, Tensor] | None = None) -> Tensor:
        train = mode == "train"
        for i, layer in enumerate(self.layers):
            if weight_overrides is not None and i in weight_overrides:
                x = layer.forward(x, mode, weight=weight_overrides[i])
            elif i in self.binarized:
                wq = binarize_weights(self.binarized[i], update_running=train)
                x = layer.forward(x, mode, weight=wq)
            else:
                x = layer.forward(x, mode)
            if i in self.activations:
                x = self.activations[i].forward(x, mode)
        return x

    def loss(self, x: np.ndarray, y: np.ndarray, mode: str = "train",
             weight_overrides: dict[int, Tensor] | None = None) -> Tensor:
        logits = self.forward(Tensor(x.astype(self._dtype())), mode,
                              weight_overrides=weight_overrides)
        return T.softmax_cross_entropy(logits, y)

    def _dtype(self):
        for layer in self.layers:
            for p in layer.named_params().values():
                return p.data.dtype
        return np.float32

    # -- parameter bookkeeping -------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.named_params().items():
                out[f"layer{i}.{name}"] = p
        for i, st in sorted(self.binarized.items()):
            if isinstance(st.meta, QuantNet):
                for name, p in st.meta.named_params().items():
                    out[f"layer{i}.quantnet.{name}"] = p
        for i, q in sorted(self.activations.items()):
            for name, p in q.named_params().items():
                out[f"act{i}.{name}"] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            for name, b in layer.named_buffers().items():
                out[f"layer{i}.{name}"] = b
        for i, st in sorted(self.binarized.items()):
            if isinstance(st.meta, QuantNet):
                for name, b in st.meta.named_buffers().items():
                    out[f"layer{i}.quantnet.{name}"] = b
        return out

    def task_params(self) -> list[Tensor]:
        """Everything the task optimizer owns: all params except shadow weights
        of binarized layers and quantizer parameters."""
        shadow = {id(st.W) for st in self.binarized.values()}
        meta = set()
        for st in self.binarized.values():
            if isinstance(st.meta, QuantNet):
                meta |= {id(p) for p in st.meta.params()}
        return [p for p in self.named_params().values()
                if id(p) not in shadow and id(p) not in meta]

    def shadow_params(self) -> list[Tensor]:
        return [st.W for _, st in sorted(self.binarized.items())]

    def quantnet_params(self) -> list[Tensor]:
        out = []
        for _, st in sorted(self.binarized.items()):
            if isinstance(st.meta, QuantNet):
                out.extend(st.meta.params())
        return out

    def quantnets(self) -> dict[int, QuantNet]:
        return {i: st.meta for i, st in sorted(self.binarized.items())
                if isinstance(st.meta, QuantNet)}

    def param_census(self) -> dict[str, int]:
        shadow = {id(st.W) for st in self.binarized.values()}
        meta_n = sum(p.size for p in self.quantnet_params())
        total = sum(p.size for p in self.named_params().values())
        shadow_n = sum(p.size for p in self.named_params().values() if id(p) in shadow)
        return {"total": total, "meta": meta_n, "shadow": shadow_n,
                "plain": total - meta_n}

    def checksum(self) -> float:
        """Order-stable sum over all parameters and buffers (mutation guard)."""
        acc = 0.0
        for name in sorted(self.named_params()):
            acc += float(np.sum(self.named_params()[name].data.astype(np.float64)))
        for name, b in sorted(self.named_buffers().items()):
            acc += float(np.sum(b.astype(np.float64)))
        return acc


# -- evaluation and discretization -------------------------------------------------


def evaluate(network: Network, x: np.ndarray, y: np.ndarray,
             batch_size: int = 512) -> float:
    """Top-1 accuracy over a split; argmax ties break to the lowest class index."""
    n = x.shape[0]
    if n == 0:
        raise ValueError("evaluate: empty split")
    dtype = network._dtype()
    correct = 0
    for lo in range(0, n, batch_size):
        xb = Tensor(x[lo:lo + batch_size].astype(dtype))
        logits = network.forward(xb, "eval")
        pred = np.argmax(logits.data, axis=1)
        correct += int((pred == y[lo:lo + batch_size]).sum())
    return correct / n


def discretize_model(network: Network) -> Network:
    """Fixed-point clone: every binarized layer's weights become sign(W_q)
    (times the xnor scale where applicable); quantizers and shadow weights are
    dropped. The input network is left untouched; the operation is idempotent.
    """
    rng = np.random.default_rng(0)  # layer builders need one; weights are overwritten
    dtype = network._dtype()
    spec = network.spec
    layers = [_build_layer(ls, rng, dtype) for ls in spec.layers]
    for i, (src, dst) in enumerate(zip(network.layers, layers)):
        for name, p in src.named_params().items():
            dst.named_params()[name].data[:] = p.data
        for name, b in src.named_buffers().items():
            dst.named_buffers()[name][:] = b
    for i, st in network.binarized.items():
        layers[i].W.data[:] = discretize_values(st)
    activations = {}
    for i, q in network.activations.items():
        nq = PACTQuant(q.bits, dtype=dtype)
        nq.alpha.data[:] = q.alpha.data
        activations[i] = nq
    return Network(spec, layers, binarized={}, activations=activations)


def masked_binarized_loss(network: Network, keep_fraction: float,
                          batch_x: np.ndarray, batch_y: np.ndarray
                          ) -> tuple[float, float, int, int]:
    """Loss with full W_q vs. with only the top-k largest-|W_q| kept per layer.

    Returns (full_loss, masked_loss, kept_count, total_count). Read-only:
    evaluates in eval mode through explicit weight overrides.
    """
    full_overrides: dict[int, Tensor] = {}
    masked_overrides: dict[int, Tensor] = {}
    kept = total = 0
    for i, st in network.binarized.items():
        wq = binarize_weights(st).data
        n = wq.size
        k = int(np.ceil(keep_fraction * n))
        k = max(0, min(k, n))
        mask = np.zeros(n, dtype=wq.dtype)
        if k > 0:
            order = np.argsort(-np.abs(wq.reshape(-1)), kind="stable")
            mask[order[:k]] = 1.0
        kept += k
        total += n
        full_overrides[i] = Tensor(wq)
        masked_overrides[i] = Tensor(wq * mask.reshape(wq.shape))
    full = float(network.loss(batch_x, batch_y, "eval", weight_overrides=full_overrides).data)
    masked = float(network.loss(batch_x, batch_y, "eval", weight_overrides=masked_overrides).data)
    return full, masked, kept, total
