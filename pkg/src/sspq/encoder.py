"""Trainable query encoder: a small MLP with L2-normalized output.

Forward passes cache every intermediate needed for exact backpropagation;
gradients flow through the final normalization, the activations, and the
affine layers. Checkpoints use the ``SSPQ`` container format.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .embeddings import l2_normalize, normalize_rows
from .errors import BadDimensionError, FormatError, LengthMismatchError

ACT_TANH = "tanh"
ACT_RELU = "relu"
ACT_IDENTITY = "identity"
ACTIVATIONS = (ACT_TANH, ACT_RELU, ACT_IDENTITY)

CHECKPOINT_MAGIC = b"SSPQ"


def _activate(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == ACT_TANH:
        return np.tanh(a)
    if kind == ACT_RELU:
        return np.maximum(a, 0.0)
    return a


def _activate_grad(a: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    if kind == ACT_TANH:
        return 1.0 - h * h
    if kind == ACT_RELU:
        return (a > 0).astype(np.float64)
    return np.ones_like(a)


class QueryEncoder:
    """MLP mapping raw input vectors to unit-norm embeddings.

    Hidden layers apply the chosen activation; the final layer is affine and
    its output is L2-normalized.
    """

    def __init__(self, layer_sizes: list[int], activation: str,
                 weights: list[np.ndarray], biases: list[np.ndarray]):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = list(layer_sizes)
        self.activation = activation
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out_d, in_d = layer_sizes[i + 1], layer_sizes[i]
            if w.shape != (out_d, in_d) or b.shape != (out_d,):
                raise ValueError(f"layer {i} parameter shapes do not match {in_d}->{out_d}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in update order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "QueryEncoder":
        return QueryEncoder(
            self.layer_sizes,
            self.activation,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


def encoder_init(
    d_in: int,
    hidden: list[int],
    d_out: int,
    activation: str = ACT_TANH,
    seed: int = 0,
    gain: float = 1.0,
) -> QueryEncoder:
    """Build an encoder with symmetric uniform fan-in-scaled weights.

    Weights are U(-gain/sqrt(fan_in), +gain/sqrt(fan_in)), biases zero;
    deterministic given the seed.

    Raises:
        BadDimensionError: if any layer size is < 1.
    """
    sizes = [d_in, *hidden, d_out]
    if any(int(s) < 1 for s in sizes):
        raise BadDimensionError(f"all layer sizes must be >= 1, got {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = gain / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return QueryEncoder(sizes, activation, weights, biases)


def encoder_forward(enc: QueryEncoder, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """Forward pass for one input vector.

    Returns:
        (embedding, cache). The embedding is the L2-normalized final affine
        output; a zero pre-normalization output is returned unchanged with
        cache["degenerate"] set. The cache holds every intermediate needed
        by encoder_backward.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (enc.input_dim,):
        raise LengthMismatchError(f"input has shape {x.shape}, expected ({enc.input_dim},)")
    inputs = []
    preacts = []
    h = x
    last = len(enc.weights) - 1
    for i, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        inputs.append(h)
        a = w @ h + b
        preacts.append(a)
        h = a if i == last else _activate(a, enc.activation)
    y, degenerate = l2_normalize(h)
    cache = {
        "inputs": inputs,
        "preacts": preacts,
        "z": h,
        "y": y,
        "z_norm": float(np.linalg.norm(h)),
        "degenerate": degenerate,
    }
    return y, cache


def encoder_backward(enc: QueryEncoder, cache: dict, grad_y: np.ndarray) -> list[np.ndarray]:
    """Backpropagate dLoss/d(embedding) to parameter gradients.

    Returns:
        Gradients aligned with ``enc.parameters()`` order (W0, b0, W1, b1...).
    """
    grad_y = np.asarray(grad_y, dtype=np.float64)
    y, z_norm = cache["y"], cache["z_norm"]
    if cache["degenerate"]:
        delta = grad_y.copy()  # normalization was the identity
    else:
        delta = (grad_y - y * float(np.dot(y, grad_y))) / z_norm

    grads: list[np.ndarray] = []
    last = len(enc.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            # inputs[i + 1] is act(preacts[i]), cached by the forward pass
            delta = delta * _activate_grad(cache["preacts"][i], cache["inputs"][i + 1], enc.activation)
        grads.append(delta)  # db_i
        grads.append(np.outer(delta, cache["inputs"][i]))  # dW_i
        if i > 0:
            delta = enc.weights[i].T @ delta
    grads.reverse()
    return grads


def forward_matrix(enc: QueryEncoder, x: np.ndarray) -> np.ndarray:
    """Vectorized forward pass over matrix rows; rows are L2-normalized."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != enc.input_dim:
        raise LengthMismatchError(f"matrix has shape {h.shape}, expected (n, {enc.input_dim})")
    last = len(enc.weights) - 1
    for i, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        h = h @ w.T + b
        if i != last:
            h = _activate(h, enc.activation)
    return normalize_rows(h)


def save_checkpoint(enc: QueryEncoder, path: str | Path, extra: dict | None = None) -> None:
    """Write an encoder checkpoint: SSPQ magic, JSON header, float64 blocks.

    The header records the architecture and an arbitrary JSON-serializable
    ``extra`` payload (typically the training config echo). Parameter blocks
    follow in parameters() order as little-endian float64.
    """
    header = {
        "layer_sizes": enc.layer_sizes,
        "activation": enc.activation,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = CHECKPOINT_MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes
    blob += b"".join(p.astype("<f8").tobytes() for p in enc.parameters())
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | Path) -> tuple[QueryEncoder, dict]:
    """Read an SSPQ checkpoint back into an encoder.

    Raises:
        FormatError: on bad magic, malformed header, or truncated blocks.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: file too short for SSPQ header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
        sizes = [int(s) for s in header["layer_sizes"]]
        activation = header["activation"]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from exc

    offset = 8 + header_len
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w_bytes = fan_out * fan_in * 8
        b_bytes = fan_out * 8
        if len(raw) < offset + w_bytes + b_bytes:
            raise FormatError(f"{path}: truncated parameter blocks")
        weights.append(
            np.frombuffer(raw, dtype="<f8", count=fan_out * fan_in, offset=offset)
            .reshape(fan_out, fan_in)
            .copy()
        )
        offset += w_bytes
        biases.append(np.frombuffer(raw, dtype="<f8", count=fan_out, offset=offset).copy())
        offset += b_bytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return QueryEncoder(sizes, activation, weights, biases), header.get("extra", {})
