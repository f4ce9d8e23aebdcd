"""Meta-quantizer: a small per-layer network that maps full-precision kernels
to soft-binarized weights, trained jointly with the task and alternately
against a sparsity objective.

Pipeline for a (k, k, m, n) weight tensor W:

  1. reshape kernel-wise to a (m*n, k^2) batch (dense layers are treated as
     1x1-kernel convolutions, so every scalar weight is its own kernel);
  2. encode k^2 -> (3k)^2, normalize, LeakyReLU;
  3. compress (3k)^2 -> 2k^2, normalize, LeakyReLU;
  4. decode [compressed, original kernel] -> k^2 (plain affine, no norm);
  5. tanh, restore the original 4-D shape.

The decoder sees the original kernel alongside the compressed features, so a
"warm start" that initializes the final affine to the identity on that input
pathway (zeros elsewhere) makes the whole map the identity: training then
starts exactly at the plain tanh soft binarizer. Zero-initializing the final
affine instead collapses the output to tanh(0) = 0. A cold start draws the
final affine randomly like every other unit.

Normalization inside the quantizer always uses the statistics of the current
kernel batch (the batch is the fixed set of filters, so this is deterministic
in W); batches with fewer than two kernels skip normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bqf import tensor as T
from bqf.layers import BatchNorm, Dense, LeakyReLU, scaled_normal
from bqf.tensor import Tensor


# -- kernel-wise reshaping -----------------------------------------------------


@dataclass
class KernelBatch:
    """(m*n, k^2) matrix of flattened kernels plus the originating 4-D shape.

    Element (i, j, p, q) of the weight tensor lands at row p*n + q,
    column i*k + j.
    """

    matrix: Tensor
    orig_shape: tuple[int, int, int, int]


def reshape_to_kernel_batch(w: Tensor) -> KernelBatch:
    if w.data.ndim != 4:
        raise T.ShapeError(f"reshape_to_kernel_batch: expects 4-D weights, got {w.shape}")
    kh, kw, m, n = w.shape
    if kh != kw:
        raise T.ShapeError(f"reshape_to_kernel_batch: kernels must be square, got {w.shape}")
    mat = T.transpose(w, (2, 3, 0, 1)).reshape(m * n, kh * kw)
    return KernelBatch(matrix=mat, orig_shape=(kh, kw, m, n))


def restore_shape(batch: KernelBatch) -> Tensor:
    if batch.orig_shape is None:
        raise ValueError("restore_shape: missing originating shape record")
    kh, kw, m, n = batch.orig_shape
    return T.transpose(batch.matrix.reshape(m, n, kh, kw), (2, 3, 0, 1))


def dense_as_conv(w: Tensor) -> Tensor:
    """View (in, out) dense weights as (1, 1, in, out) convolution kernels."""
    if w.data.ndim != 2:
        raise T.ShapeError(f"dense_as_conv: expects 2-D weights, got {w.shape}")
    return w.reshape(1, 1, *w.shape)


# -- the quantizer ---------------------------------------------------------------


class QuantNet:
    """Per-layer meta-quantizer producing W_q = tanh(decoder(...(W))).

    Parameters are untied across layers. Encoder widths follow the kernel
    size: k^2 -> (3k)^2 -> 2k^2 -> k^2, with the decoder also fed the raw
    kernel (its identity pathway).
    """

    def __init__(self, kernel_size: int, *, rng: np.random.Generator,
                 warm_start: bool = True, expand_factor: int = 3,
                 dtype=np.float32):
        k2 = kernel_size * kernel_size
        d = expand_factor * kernel_size
        if d <= kernel_size:
            raise ValueError("quantnet: encoder must expand (d > k)")
        hid = d * d
        comp = 2 * k2
        if comp >= hid:
            raise ValueError("quantnet: compressor must contract (c < d^2)")
        self.kernel_size = kernel_size
        self.hidden_dim = hid
        self.compressed_dim = comp
        # no bias on affines feeding BatchNorm: the shift is absorbed by beta
        # (and its gradient would be structurally zero through the normalizer)
        self.encoder = Dense(k2, hid, bias=False, rng=rng, dtype=dtype)
        self.encoder.W.data[:] = scaled_normal((k2, hid), k2, rng, dtype=dtype)
        self.enc_norm = BatchNorm(hid, momentum=0.9, dtype=dtype)
        self.compressor = Dense(hid, comp, bias=False, rng=rng, dtype=dtype)
        self.compressor.W.data[:] = scaled_normal((hid, comp), hid, rng, dtype=dtype)
        self.comp_norm = BatchNorm(comp, momentum=0.9, dtype=dtype)
        self.act = LeakyReLU()
        self.decoder = Dense(comp + k2, k2, rng=rng, dtype=dtype)
        if warm_start:
            wd = np.zeros((comp + k2, k2), dtype=dtype)
            wd[comp:, :] = np.eye(k2, dtype=dtype)  # identity on the raw-kernel pathway
            self.decoder.W.data[:] = wd
        else:
            self.decoder.W.data[:] = scaled_normal((comp + k2, k2), comp + k2, rng, dtype=dtype)

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for unit, prefix in ((self.encoder, "encoder"), (self.enc_norm, "enc_norm"),
                             (self.compressor, "compressor"), (self.comp_norm, "comp_norm"),
                             (self.decoder, "decoder")):
            for name, p in unit.named_params().items():
                out[f"{prefix}.{name}"] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for unit, prefix in ((self.enc_norm, "enc_norm"), (self.comp_norm, "comp_norm")):
            for name, b in unit.named_buffers().items():
                out[f"{prefix}.{name}"] = b
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def transform(self, batch: Tensor, update_running: bool = False) -> Tensor:
        """Map a (filters, k^2) kernel batch to pre-tanh outputs of the same shape."""
        use_norm = batch.shape[0] >= 2
        h = self.encoder.forward(batch)
        if use_norm:
            h = self.enc_norm.forward(h, "train", update_running=update_running)
        h = self.act.forward(h)
        h = self.compressor.forward(h)
        if use_norm:
            h = self.comp_norm.forward(h, "train", update_running=update_running)
        h = self.act.forward(h)
        return self.decoder.forward(T.concat([h, batch], axis=1))

    def forward(self, w: Tensor, update_running: bool = False) -> Tensor:
        """Soft-binarize a weight tensor: tanh of the transformed kernels, original shape."""
        squeeze_dense = w.data.ndim == 2
        w4 = dense_as_conv(w) if squeeze_dense else w
        kb = reshape_to_kernel_batch(w4)
        z = self.transform(kb.matrix, update_running=update_running)
        wq = restore_shape(KernelBatch(T.tanh(z), kb.orig_shape))
        if squeeze_dense:
            wq = wq.reshape(*w.shape)
        return wq


def quantnet_for_layer(weight_shape: tuple[int, ...], *, rng: np.random.Generator,
                       warm_start: bool = True, dtype=np.float32) -> QuantNet:
    """Build a QuantNet sized for a layer's weight tensor (2-D dense or 4-D conv)."""
    if len(weight_shape) == 2:
        kernel_size = 1
    elif len(weight_shape) == 4:
        kernel_size = weight_shape[0]
    else:
        raise T.ShapeError(f"quantnet_for_layer: unsupported weight shape {weight_shape}")
    return QuantNet(kernel_size, rng=rng, warm_start=warm_start, dtype=dtype)


# -- sparsity objective and its alternating optimizer ----------------------------


def sparsity_objective(wq: Tensor) -> Tensor:
    """|| 1 - |w| ||_2 + || w ||_1 over the flattened soft-binarized weights.

    Always >= ||w||_1, with equality iff every |element| is exactly 1. The
    residual term's gradient at an exactly-zero residual is the zero
    subgradient (see tensor.l2_norm).
    """
    flat = wq.reshape(wq.size)
    ones = Tensor(np.ones(wq.size, dtype=wq.data.dtype))
    return T.l2_norm(ones - T.abs_(flat)) + T.l1_norm(flat)


@dataclass
class RegularizerState:
    """Weight of the sparsity objective plus the dedicated optimizer for it."""

    lam: float
    optimizer: object  # bqf.optim.Optimizer over the quantizer's parameters
    last_value: float = field(default=float("nan"))


def regularizer_step(qnet, w: Tensor, state: RegularizerState) -> float:
    """One dedicated-optimizer step on lam * sparsity_objective(qnet(W)) w.r.t.
    the quantizer parameters only. W is treated as a constant and never
    modified. Returns the (unweighted) objective value. No-op when lam == 0.
    """
    wq = qnet.forward(w.detach())
    obj = sparsity_objective(wq)
    state.last_value = float(obj.data)
    if state.lam == 0.0:
        return state.last_value
    for p in state.optimizer.params:
        p.grad = None
    loss = state.lam * obj
    T.backward(loss)
    state.optimizer.step()
    for p in state.optimizer.params:
        p.grad = None
    return state.last_value


# -- gradient plumbing -------------------------------------------------------------


def compute_meta_gradients(grad_wq: np.ndarray, qnet, w: Tensor) -> dict[str, np.ndarray]:
    """Pull an upstream gradient at W_q back onto the quantizer parameters.

    Seeds the reverse sweep with grad_wq by differentiating sum(W_q * grad_wq),
    which equals grad_wq^T dW_q/dTheta: the engine's exact end-to-end gradient,
    with no estimator anywhere on the path.
    """
    grad_wq = np.asarray(grad_wq)
    params = qnet.named_params()
    for p in params.values():
        p.grad = None
    wq = qnet.forward(w.detach())
    if grad_wq.shape != wq.shape:
        raise T.ShapeError(f"compute_meta_gradients: seed shape {grad_wq.shape} != {wq.shape}")
    proxy = (wq * Tensor(grad_wq.astype(wq.data.dtype))).sum()
    T.backward(proxy)
    out = {name: (np.array(p.grad) if p.grad is not None else np.zeros_like(p.data))
           for name, p in params.items()}
    for p in params.values():
        p.grad = None
    return out


def update_shadow_weights(w: Tensor, eta: float, grad_w: np.ndarray) -> Tensor:
    """Plain descent step W <- W - eta * grad (a momentum-0 optimizer step)."""
    grad_w = np.asarray(grad_w)
    if grad_w.shape != w.shape:
        raise T.ShapeError(f"update_shadow_weights: grad shape {grad_w.shape} != {w.shape}")
    w.data -= eta * grad_w.astype(w.data.dtype)
    return w


# -- diagnostics for the two modeling assumptions -----------------------------------


def topk_dominance_diagnostic(network, keep_fraction: float, batch_x: np.ndarray,
                              batch_y: np.ndarray, *, epsilons=(1e-5, 0.05)) -> dict:
    """Loss ratio when only the top-k largest-|W_q| weights are kept.

    Builds a k-sparse mask per binarized layer (k = ceil(keep_fraction * n)),
    evaluates loss(masked W_q) / loss(W_q) on the given batch, and reports
    whether the ratio lies within [1 - eps, 1 + eps] for each configured eps.
    """
    from bqf.network import masked_binarized_loss  # local import: avoids cycle

    full, masked, k_total, n_total = masked_binarized_loss(network, keep_fraction,
                                                           batch_x, batch_y)
    if full == 0.0:
        raise ZeroDivisionError("topk_dominance_diagnostic: zero full loss")
    ratio = masked / full
    return {
        "ratio": ratio,
        "keep_fraction": keep_fraction,
        "kept_weights": k_total,
        "total_weights": n_total,
        "within": {eps: bool(1.0 - eps <= ratio <= 1.0 + eps) for eps in epsilons},
    }


def assumption1_probe(quantizer, w_values) -> list[dict]:
    """Tabulate d tanh(Q(w))/dw against the plain d tanh(w)/dw at probe points.

    Feeds each probe through the quantizer as a single 1x1 kernel (batches of
    one skip normalization), so the column reflects the learned scalar map.
    An identity quantizer reproduces the plain-tanh column exactly.
    """
    rows = []
    for w in w_values:
        wt = Tensor(np.asarray([[w]], dtype=np.float64), requires_grad=True,
                    dtype=T.DType.f64)
        wq = quantizer.forward(wt)
        T.backward(wq.sum())
        g = abs(float(wt.grad.reshape(-1)[0]))
        th = np.tanh(float(w))
        rows.append({"w": float(w),
                     "grad_quantizer": g,
                     "grad_plain_tanh": float(1.0 - th * th)})
    return rows


class IdentityQuantizer:
    """Probe stub: W_q = tanh(W)."""

    def forward(self, w: Tensor, update_running: bool = False) -> Tensor:
        return T.tanh(w)


class ScaleQuantizer:
    """Probe stub: W_q = tanh(c * W) for a fixed scale c."""

    def __init__(self, scale: float):
        self.scale = scale

    def forward(self, w: Tensor, update_running: bool = False) -> Tensor:
        return T.tanh(w * self.scale)
