"""Dense MLP with hand-rolled reverse- and forward-mode derivatives.

Matrices are plain float64 numpy arrays in row-major order; a network is
a list of ``(out, in)`` weight matrices plus bias vectors.  Hidden layers
use tanh, the output layer is linear.  The flat parameter ordering is
fixed: layers in order, and within a layer the weight matrix row-major
followed by the bias vector.  Everything downstream (conjugate gradient,
checkpoints, distillation) relies on that ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .rng import Rng

CHECKPOINT_MAGIC = b"DNCP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpParams:
    """Parameters of a fully-connected net: sizes (input, hidden..., output)."""

    layer_sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        sizes = self.layer_sizes
        if len(sizes) < 2:
            raise ShapeError("need at least input and output sizes")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ShapeError("layer count mismatch between sizes and weights/biases")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[l + 1], sizes[l]):
                raise ShapeError(
                    f"layer {l}: weight shape {w.shape} != {(sizes[l + 1], sizes[l])}"
                )
            if b.shape != (sizes[l + 1],):
                raise ShapeError(f"layer {l}: bias shape {b.shape} != ({sizes[l + 1]},)")

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]


def init_mlp(layer_sizes, rng: Rng) -> MlpParams:
    """Scaled-uniform init: W ~ U(-1, 1)/sqrt(fan_in), biases zero."""
    sizes = tuple(int(s) for s in layer_sizes)
    weights, biases = [], []
    for l in range(len(sizes) - 1):
        scale = 1.0 / np.sqrt(sizes[l])
        weights.append(rng.uniform(-scale, scale, size=(sizes[l + 1], sizes[l])))
        biases.append(np.zeros(sizes[l + 1]))
    return MlpParams(sizes, tuple(weights), tuple(biases))


def zeros_mlp(layer_sizes) -> MlpParams:
    sizes = tuple(int(s) for s in layer_sizes)
    return MlpParams(
        sizes,
        tuple(np.zeros((sizes[l + 1], sizes[l])) for l in range(len(sizes) - 1)),
        tuple(np.zeros(sizes[l + 1]) for l in range(len(sizes) - 1)),
    )


def mlp_forward_batch(params: MlpParams, inputs: np.ndarray) -> np.ndarray:
    """Forward pass for a batch of inputs, shape (n, in_dim) -> (n, out_dim)."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"expected (n, {params.in_dim}) inputs, got {x.shape}")
    n_layers = len(params.weights)
    a = x
    for l in range(n_layers):
        z = a @ params.weights[l].T + params.biases[l]
        a = np.tanh(z) if l < n_layers - 1 else z
    return a


def mlp_forward(params: MlpParams, input_vec) -> np.ndarray:
    """Forward pass for a single input vector (hot path in rollouts)."""
    x = np.asarray(input_vec, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.in_dim:
        raise ShapeError(f"expected ({params.in_dim},) input, got {x.shape}")
    n_layers = len(params.weights)
    a = x
    for l in range(n_layers):
        z = params.weights[l] @ a + params.biases[l]
        a = np.tanh(z) if l < n_layers - 1 else z
    return a


def forward_activations(params: MlpParams, x: np.ndarray) -> list[np.ndarray]:
    """Activations a_0..a_L for the batch, a_0 being the input itself."""
    n_layers = len(params.weights)
    acts = [x]
    a = x
    for l in range(n_layers):
        z = a @ params.weights[l].T + params.biases[l]
        a = np.tanh(z) if l < n_layers - 1 else z
        acts.append(a)
    return acts


def mlp_backward_batch(
    params: MlpParams,
    inputs: np.ndarray,
    output_grads: np.ndarray,
    activations: list[np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of sum_t <output_t, output_grads_t> w.r.t. params and inputs.

    Returns (flat parameter gradient, per-row input gradients).  Callers
    that already ran the forward pass can hand in the activation list
    from ``_forward_activations`` to skip recomputing it.
    """
    x = np.asarray(inputs, dtype=np.float64)
    g = np.asarray(output_grads, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"expected (n, {params.in_dim}) inputs, got {x.shape}")
    if g.shape != (x.shape[0], params.out_dim):
        raise ShapeError(
            f"expected ({x.shape[0]}, {params.out_dim}) output grads, got {g.shape}"
        )
    acts = forward_activations(params, x) if activations is None else activations
    n_layers = len(params.weights)
    w_grads: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    b_grads: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    dz = g
    for l in range(n_layers - 1, -1, -1):
        w_grads[l] = dz.T @ acts[l]
        b_grads[l] = dz.sum(axis=0)
        da = dz @ params.weights[l]
        if l > 0:
            dz = da * (1.0 - acts[l] ** 2)  # acts[l] = tanh(z_{l-1})
    flat = np.concatenate(
        [np.concatenate([w.ravel(), b]) for w, b in zip(w_grads, b_grads)]
    )
    return flat, da


def mlp_backward(params: MlpParams, input_vec, output_grad) -> tuple[np.ndarray, np.ndarray]:
    """Single-input reverse pass: gradient of <output, output_grad>."""
    og = np.asarray(output_grad, dtype=np.float64)
    if og.shape != (params.out_dim,):
        raise ShapeError(f"expected ({params.out_dim},) output grad, got {og.shape}")
    x = np.asarray(input_vec, dtype=np.float64)
    flat, dx = mlp_backward_batch(params, x[None, :], og[None, :])
    return flat, dx[0]


def mlp_jvp_batch(
    params: MlpParams,
    inputs: np.ndarray,
    tangent_flat: np.ndarray,
    activations: list[np.ndarray] | None = None,
) -> np.ndarray:
    """Forward-mode directional derivative: J(inputs) @ tangent, per row.

    ``tangent_flat`` is a flat parameter vector in the standard ordering;
    the result has shape (n, out_dim).  Precomputed activations for these
    inputs can be passed to skip the primal forward pass.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"expected (n, {params.in_dim}) inputs, got {x.shape}")
    tangent = unflatten_params(params, tangent_flat)
    acts = forward_activations(params, x) if activations is None else activations
    n_layers = len(params.weights)
    da = np.zeros_like(x)
    for l in range(n_layers):
        a = acts[l]
        dz = a @ tangent.weights[l].T + da @ params.weights[l].T + tangent.biases[l]
        if l < n_layers - 1:
            da = (1.0 - acts[l + 1] ** 2) * dz
        else:
            da = dz
    return da


def flatten_params(params: MlpParams) -> np.ndarray:
    """Flat vector: per layer, weights row-major then biases."""
    return np.concatenate(
        [np.concatenate([w.ravel(), b]) for w, b in zip(params.weights, params.biases)]
    )


def unflatten_params(template: MlpParams, flat) -> MlpParams:
    """Inverse of flatten_params against the template's architecture."""
    v = np.asarray(flat, dtype=np.float64)
    if v.shape != (template.n_params,):
        raise ShapeError(f"expected ({template.n_params},) flat vector, got {v.shape}")
    weights, biases, off = [], [], 0
    for w, b in zip(template.weights, template.biases):
        weights.append(v[off : off + w.size].reshape(w.shape).copy())
        off += w.size
        biases.append(v[off : off + b.size].copy())
        off += b.size
    return MlpParams(template.layer_sizes, tuple(weights), tuple(biases))


def write_checkpoint(path, layer_sizes, flat_params: np.ndarray, log_std: np.ndarray) -> None:
    """Bit-exact binary format: "DNCP", version, layer sizes, params, log-stds.

    All integers are little-endian u32, floats little-endian f64; the
    log-std vector's length equals the last layer size.
    """
    sizes = np.asarray(layer_sizes, dtype="<u4")
    header = (
        CHECKPOINT_MAGIC
        + np.asarray([CHECKPOINT_VERSION, len(sizes)], dtype="<u4").tobytes()
        + sizes.tobytes()
    )
    body = (
        np.asarray(flat_params, dtype="<f8").tobytes()
        + np.asarray(log_std, dtype="<f8").tobytes()
    )
    with open(path, "wb") as fh:
        fh.write(header + body)


def read_checkpoint(path) -> tuple[tuple[int, ...], np.ndarray, np.ndarray]:
    """Read a "DNCP" file back as (layer_sizes, flat_params, log_std)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a DNCP checkpoint")
    version, n_layers = np.frombuffer(raw, dtype="<u4", count=2, offset=4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    sizes = np.frombuffer(raw, dtype="<u4", count=int(n_layers), offset=12)
    sizes = tuple(int(s) for s in sizes)
    n_params = sum(sizes[l + 1] * sizes[l] + sizes[l + 1] for l in range(len(sizes) - 1))
    off = 12 + 4 * len(sizes)
    expected = off + 8 * (n_params + sizes[-1])
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated checkpoint ({len(raw)} != {expected} bytes)")
    flat = np.frombuffer(raw, dtype="<f8", count=n_params, offset=off).copy()
    log_std = np.frombuffer(raw, dtype="<f8", count=sizes[-1], offset=off + 8 * n_params).copy()
    return sizes, flat, log_std
