"""A 1-D convolutional classifier for univariate series, written on plain
numpy in float64.

The architecture is a stack of inception-style modules: a 1x1 bottleneck
feeding three parallel convolutions with long/medium/short kernels, plus a
max-pool branch with its own 1x1 convolution, concatenated, batch-normalized
and ReLU-activated. A 1x1 projection shortcut joins in after every third
module. Global average pooling and a single linear layer produce the
logits. The student variant stacks 3 modules, the teacher 6.

Forward, backward, and initialization are all explicit so gradients can be
checked against finite differences and training is bit-reproducible for a
fixed seed. Convolutions reduce to BLAS matmuls over sliding windows.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ModelParams",
    "init_params",
    "conv1d_forward",
    "inception_module_forward",
    "model_forward",
    "model_forward_cached",
    "model_backward",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"KDCT0001"

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    """All weights of one network, as a flat name -> float64 array mapping.

    Keys follow ``modNN/...`` for module tensors, ``resNN/proj`` for the
    shortcut projections, and ``head/w``, ``head/b`` for the classifier.
    Batch-norm running statistics live next to their module under
    ``.../running_mean`` and ``.../running_var``; they are state, not
    trainable parameters.
    """

    depth: int
    n_classes: int
    n_filters: int
    kernel_sizes: tuple[int, int, int]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def concat_channels(self) -> int:
        return 4 * self.n_filters

    @property
    def n_residual_stages(self) -> int:
        return self.depth // 3

    def trainable_keys(self) -> list[str]:
        return [k for k in self.arrays if "running_" not in k]

    def copy(self) -> "ModelParams":
        return ModelParams(
            depth=self.depth,
            n_classes=self.n_classes,
            n_filters=self.n_filters,
            kernel_sizes=self.kernel_sizes,
            arrays={k: v.copy() for k, v in self.arrays.items()},
        )

    def _module_in_channels(self, i: int) -> int:
        return 1 if i == 0 else self.concat_channels

    def _stage_in_channels(self, stage: int) -> int:
        return 1 if stage == 0 else self.concat_channels


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(
    depth: int,
    n_classes: int,
    seed: int,
    n_filters: int = 32,
    kernel_sizes: tuple[int, int, int] = (40, 20, 10),
) -> ModelParams:
    """Fresh parameters: fan-in-scaled uniform weights, batch-norm at
    identity (scale 1, shift 0, running stats (0, 1)). Deterministic for a
    fixed seed."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    rng = np.random.default_rng(seed)
    p = ModelParams(depth=depth, n_classes=n_classes, n_filters=n_filters,
                    kernel_sizes=tuple(kernel_sizes))
    nf, cat = n_filters, 4 * n_filters
    a = p.arrays
    for i in range(depth):
        cin = p._module_in_channels(i)
        pre = f"mod{i:02d}"
        a[f"{pre}/bottleneck"] = _uniform(rng, (nf, cin, 1), cin)
        for b, k in enumerate(p.kernel_sizes):
            a[f"{pre}/branch{b}"] = _uniform(rng, (nf, nf, k), nf * k)
        a[f"{pre}/pool"] = _uniform(rng, (nf, cin, 1), cin)
        a[f"{pre}/bn/gamma"] = np.ones(cat)
        a[f"{pre}/bn/beta"] = np.zeros(cat)
        a[f"{pre}/bn/running_mean"] = np.zeros(cat)
        a[f"{pre}/bn/running_var"] = np.ones(cat)
    for j in range(p.n_residual_stages):
        cin = p._stage_in_channels(j)
        a[f"res{j:02d}/proj"] = _uniform(rng, (cat, cin, 1), cin)
    a["head/w"] = _uniform(rng, (n_classes, cat), cat)
    a["head/b"] = np.zeros(n_classes)
    return p


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------


def _same_pad(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, (k - 1) - left


def conv1d_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1 cross-correlation with "same" zero padding.

    ``x`` is (batch, in_channels, length), ``w`` is (out_channels,
    in_channels, kernel); the output keeps the input length. Linear in both
    arguments.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"expected 3-d input and weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weights expect {w.shape[1]}")
    k = w.shape[2]
    left, right = _same_pad(k)
    xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
    win = sliding_window_view(xp, k, axis=2)  # (B, Cin, L, k)
    out = np.tensordot(w, win, axes=([1, 2], [1, 3]))  # (Cout, B, L)
    return np.ascontiguousarray(out.transpose(1, 0, 2))


def _conv1d_backward(d_out: np.ndarray, x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = w.shape[2]
    left, right = _same_pad(k)
    xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
    win = sliding_window_view(xp, k, axis=2)
    dw = np.tensordot(d_out, win, axes=([0, 2], [0, 2]))  # (Cout, Cin, k)
    # input gradient: full correlation of d_out with the flipped kernel
    dp = np.pad(d_out, ((0, 0), (0, 0), (k - 1, k - 1)))
    dwin = sliding_window_view(dp, k, axis=2)  # (B, Cout, L+k-1, k)
    wrev = w[:, :, ::-1]
    dxp = np.tensordot(wrev, dwin, axes=([0, 2], [1, 3]))  # (Cin, B, L+k-1)
    dxp = dxp.transpose(1, 0, 2)
    dx = dxp[:, :, left:left + x.shape[2]]
    return np.ascontiguousarray(dx), dw


def _bn_forward(x, gamma, beta, running_mean, running_var, train: bool):
    """Per-channel batch norm over (batch, length).

    Train mode normalizes with biased batch statistics and folds them into
    the running estimates (momentum 0.1, in place); eval mode uses the
    running estimates only.
    """
    if train:
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        running_mean *= 1.0 - _BN_MOMENTUM
        running_mean += _BN_MOMENTUM * mean
        running_var *= 1.0 - _BN_MOMENTUM
        running_var += _BN_MOMENTUM * var
    else:
        mean, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + _BN_EPS)
    xhat = (x - mean[None, :, None]) * invstd[None, :, None]
    out = gamma[None, :, None] * xhat + beta[None, :, None]
    cache = (xhat, invstd, gamma, train, x.shape[0] * x.shape[2])
    return out, cache


def _bn_backward(d_out, cache):
    xhat, invstd, gamma, train, n = cache
    dgamma = (d_out * xhat).sum(axis=(0, 2))
    dbeta = d_out.sum(axis=(0, 2))
    dxhat = d_out * gamma[None, :, None]
    if not train:
        return dxhat * invstd[None, :, None], dgamma, dbeta
    # batch statistics depend on x: subtract the mean components
    s1 = dxhat.sum(axis=(0, 2), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
    dx = (invstd[None, :, None] / n) * (n * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def _maxpool3_forward(x):
    """Window-3, stride-1, same-padded max pool; remembers argmax offsets."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1)), constant_values=-np.inf)
    win = sliding_window_view(xp, 3, axis=2)  # (B, C, L, 3)
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    return out, (idx, x.shape)


def _maxpool3_backward(d_out, cache):
    idx, shape = cache
    dxp = np.zeros((shape[0], shape[1], shape[2] + 2))
    for off in range(3):
        np.add.at(dxp[:, :, off:off + shape[2]], (), 0)  # keep dxp writeable view shape
        dxp[:, :, off:off + shape[2]] += d_out * (idx == off)
    return dxp[:, :, 1:-1]


# ---------------------------------------------------------------------------
# inception module and the full model
# ---------------------------------------------------------------------------


def _module_forward(params: ModelParams, i: int, x: np.ndarray, train: bool):
    a, pre = params.arrays, f"mod{i:02d}"
    bott = conv1d_forward(x, a[f"{pre}/bottleneck"])
    branches = [conv1d_forward(bott, a[f"{pre}/branch{b}"]) for b in range(3)]
    pooled, pool_cache = _maxpool3_forward(x)
    branches.append(conv1d_forward(pooled, a[f"{pre}/pool"]))
    cat = np.concatenate(branches, axis=1)
    bn_out, bn_cache = _bn_forward(
        cat, a[f"{pre}/bn/gamma"], a[f"{pre}/bn/beta"],
        a[f"{pre}/bn/running_mean"], a[f"{pre}/bn/running_var"], train,
    )
    mask = bn_out > 0.0
    out = bn_out * mask
    return out, (x, bott, pooled, pool_cache, bn_cache, mask)


def _module_backward(params: ModelParams, i: int, d_out: np.ndarray, cache, grads: dict):
    a, pre = params.arrays, f"mod{i:02d}"
    x, bott, pooled, pool_cache, bn_cache, mask = cache
    nf = params.n_filters
    d_cat, dgamma, dbeta = _bn_backward(d_out * mask, bn_cache)
    grads[f"{pre}/bn/gamma"] = dgamma
    grads[f"{pre}/bn/beta"] = dbeta
    d_bott = np.zeros_like(bott)
    for b in range(3):
        d_branch = d_cat[:, b * nf:(b + 1) * nf]
        dxb, dwb = _conv1d_backward(d_branch, bott, a[f"{pre}/branch{b}"])
        grads[f"{pre}/branch{b}"] = dwb
        d_bott += dxb
    d_pooled, dw_pool = _conv1d_backward(d_cat[:, 3 * nf:], pooled, a[f"{pre}/pool"])
    grads[f"{pre}/pool"] = dw_pool
    dx_pool = _maxpool3_backward(d_pooled, pool_cache)
    dx_bott, dw_bott = _conv1d_backward(d_bott, x, a[f"{pre}/bottleneck"])
    grads[f"{pre}/bottleneck"] = dw_bott
    return dx_bott + dx_pool


def inception_module_forward(params: ModelParams, index: int, x: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Run one module on its own. ``mode="train"`` uses (and updates) batch
    statistics; ``"eval"`` uses the stored running statistics."""
    out, _ = _module_forward(params, index, _check_mode_input(params, index, x, mode), mode == "train")
    return out


def _check_mode_input(params: ModelParams, index: int, x: np.ndarray, mode: str) -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected (batch, channels, length) input, got shape {x.shape}")
    expected = params._module_in_channels(index)
    if x.shape[1] != expected:
        raise ValueError(f"module {index} expects {expected} input channels, got {x.shape[1]}")
    return x


def model_forward_cached(params: ModelParams, x: np.ndarray, mode: str = "eval"):
    """Forward pass keeping every intermediate needed by the backward pass.

    Input is (batch, length) or (batch, 1, length); returns ``(logits,
    cache)`` with logits of shape (batch, n_classes).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, None, :]
    if x.ndim != 3 or x.shape[1] != 1:
        raise ValueError(f"expected univariate (batch, length) input, got shape {x.shape}")
    if x.shape[2] < max(params.kernel_sizes):
        raise ValueError(
            f"series length {x.shape[2]} shorter than the longest kernel {max(params.kernel_sizes)}"
        )
    train = mode == "train"
    a = params.arrays
    module_caches = []
    residual_caches = {}
    h, x_res, stage = x, x, 0
    for i in range(params.depth):
        h, mc = _module_forward(params, i, h, train)
        module_caches.append(mc)
        if (i + 1) % 3 == 0:
            shortcut = conv1d_forward(x_res, a[f"res{stage:02d}/proj"])
            summed = h + shortcut
            mask = summed > 0.0
            h = summed * mask
            residual_caches[i] = (stage, x_res, mask)
            x_res = h
            stage += 1
    gap = h.mean(axis=2)
    logits = gap @ a["head/w"].T + a["head/b"]
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite activations in forward pass")
    cache = (x, module_caches, residual_caches, h.shape, gap)
    return logits, cache


def model_forward(params: ModelParams, x: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Logits for a batch of univariate series; one row per sample.

    Eval mode is a pure function of (params, input): batch norm uses the
    running statistics and nothing is mutated.
    """
    logits, _ = model_forward_cached(params, x, mode)
    return logits


def model_backward(params: ModelParams, cache, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of the cached forward computation.

    ``d_logits`` is the upstream gradient, one row per sample; the result
    maps every trainable parameter name to its gradient.
    """
    if cache is None:
        raise ValueError("model_backward needs the cache from model_forward_cached")
    x, module_caches, residual_caches, h_shape, gap = cache
    d_logits = np.asarray(d_logits, dtype=np.float64)
    a = params.arrays
    grads: dict[str, np.ndarray] = {}
    grads["head/w"] = d_logits.T @ gap
    grads["head/b"] = d_logits.sum(axis=0)
    d_gap = d_logits @ a["head/w"]
    length = h_shape[2]
    d_h = np.broadcast_to(d_gap[:, :, None] / length, h_shape).copy()
    pending: dict[int, np.ndarray] = {}
    for i in range(params.depth - 1, -1, -1):
        if i in residual_caches:
            stage, x_res, mask = residual_caches[i]
            d_sum = d_h * mask
            dx_res, dw_proj = _conv1d_backward(d_sum, x_res, a[f"res{stage:02d}/proj"])
            grads[f"res{stage:02d}/proj"] = dw_proj
            # the shortcut source is the input of the first module in the stage
            start = i - 2
            pending[start] = pending.get(start, 0.0) + dx_res
            d_h = d_sum
        d_h = _module_backward(params, i, d_h, module_caches[i], grads)
        if i in pending:
            d_h = d_h + pending.pop(i)
    return grads


# ---------------------------------------------------------------------------
# checkpoints
#
# Flat container of named arrays. Layout: the 8-byte magic, a u32 record
# count, then per record: u32 name length, UTF-8 name, u32 ndim, ndim u32
# dims, and the raw float64 data. All integers and floats little-endian.
# Model metadata (depth, class count, widths) travels as meta/ records so a
# checkpoint is self-describing.
# ---------------------------------------------------------------------------


def _meta_arrays(params: ModelParams) -> dict[str, np.ndarray]:
    return {
        "meta/depth": np.array([params.depth], dtype=np.float64),
        "meta/n_classes": np.array([params.n_classes], dtype=np.float64),
        "meta/n_filters": np.array([params.n_filters], dtype=np.float64),
        "meta/kernel_sizes": np.array(params.kernel_sizes, dtype=np.float64),
    }


def save_checkpoint(params: ModelParams, path) -> None:
    """Write all parameter arrays (plus self-description) to ``path``."""
    records = dict(_meta_arrays(params))
    records.update(params.arrays)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes())


def load_checkpoint(path) -> ModelParams:
    """Read a checkpoint written by :func:`save_checkpoint`; arrays round-trip
    bit-exactly."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        records: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n_items = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n_items)
            if len(raw) != 8 * n_items:
                raise ValueError(f"{path}: truncated record {name!r}")
            records[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    try:
        depth = int(records.pop("meta/depth")[0])
        n_classes = int(records.pop("meta/n_classes")[0])
        n_filters = int(records.pop("meta/n_filters")[0])
        kernel_sizes = tuple(int(k) for k in records.pop("meta/kernel_sizes"))
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint missing metadata record {exc}") from exc
    return ModelParams(depth=depth, n_classes=n_classes, n_filters=n_filters,
                       kernel_sizes=kernel_sizes, arrays=records)
