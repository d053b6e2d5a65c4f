"""
Dense ReLU networks in float64 with hand-written backpropagation and Adam.
Weights are stored as (fan_in, fan_out) so a batch maps as X @ W + b.
"""
import os
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.components.errors import CheckpointMismatchError, DimensionError, MissingArtifactError, NumericalError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class MlpParams:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def tensors(self) -> List[np.ndarray]:
        """Parameters interleaved as [W0, b0, W1, b1, ...]."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])


@dataclass
class ForwardCache:
    layer_inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    squeezed: bool


def init_mlp(layer_sizes: Sequence[int], rng: np.random.Generator, output_scale: float = 0.01) -> MlpParams:
    """He-initialized hidden layers; the linear head is scaled down so initial outputs are near zero."""
    if len(layer_sizes) < 2:
        raise DimensionError("an MLP needs at least an input and an output size")
    weights, biases = [], []
    n_layers = len(layer_sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        if i == n_layers - 1:
            w *= output_scale
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def forward_with_cache(params: MlpParams, x) -> Tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    squeezed = x.ndim == 1
    h = x[None, :] if squeezed else x
    if h.shape[-1] != params.weights[0].shape[0]:
        raise DimensionError(f"input has {h.shape[-1]} values, first layer expects {params.weights[0].shape[0]}")
    layer_inputs, pre_activations = [], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        layer_inputs.append(h)
        z = h @ w + b
        pre_activations.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    out = h[0] if squeezed else h
    return out, ForwardCache(layer_inputs, pre_activations, squeezed)


def forward(params: MlpParams, x) -> np.ndarray:
    out, _ = forward_with_cache(params, x)
    return out


def backward(params: MlpParams, cache: ForwardCache, upstream) -> MlpParams:
    """
    Gradients of sum(upstream * output) with respect to every weight and bias.

    Args:
        params (MlpParams): The network the cache was produced with.
        cache (ForwardCache): Intermediates from forward_with_cache on the same input.
        upstream: dLoss/dOutput, shaped like the forward output.

    Returns:
        MlpParams: Gradients with the parameters' shapes.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if cache.squeezed:
        g = g[None, :]
    expected = cache.pre_activations[-1].shape
    if g.shape != expected:
        raise DimensionError(f"upstream gradient shape {g.shape} does not match output {expected}")
    grad_w: List[np.ndarray] = [None] * len(params.weights)
    grad_b: List[np.ndarray] = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        grad_w[i] = cache.layer_inputs[i].T @ g
        grad_b[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.weights[i].T) * (cache.pre_activations[i - 1] > 0.0)
    return MlpParams(grad_w, grad_b)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NumericalError("softmax received non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NumericalError("log_softmax received non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sample_action(probabilities, rng: np.random.Generator) -> Tuple[int, float]:
    """Inverse-CDF draw from a discrete distribution; returns (index, log p(index))."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1 or not np.isfinite(p).all() or (p < 0).any():
        raise NumericalError("probabilities must be a finite, nonnegative vector")
    total = p.sum()
    if total <= 0.0:
        raise NumericalError("cannot sample from an all-zero distribution")
    cdf = np.cumsum(p) / total
    index = int(np.searchsorted(cdf, rng.random(), side="right"))
    # Guard against cdf[-1] rounding below 1 and against trailing zero-mass actions
    index = min(index, int(np.flatnonzero(p > 0)[-1]))
    return index, float(np.log(p[index] / total))


def entropy(probabilities) -> np.ndarray:
    """-sum p log p along the last axis, with 0 log 0 = 0."""
    p = np.asarray(probabilities, dtype=np.float64)
    logs = np.log(np.where(p > 0, p, 1.0))
    return -(p * logs).sum(axis=-1)


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: MlpParams, learning_rate: float) -> "AdamState":
        tensors = params.tensors()
        return cls(learning_rate, m=[np.zeros_like(t) for t in tensors], v=[np.zeros_like(t) for t in tensors])


def _tensor_label(index: int) -> str:
    return f"layer {index // 2} {'weights' if index % 2 == 0 else 'bias'}"


def adam_step(state: AdamState, params: MlpParams, gradients: MlpParams) -> MlpParams:
    """Bias-corrected Adam update applied in place; returns the updated params."""
    tensors, grads = params.tensors(), gradients.tensors()
    if len(tensors) != len(grads) or len(state.m) != len(tensors):
        raise DimensionError("gradient/optimizer structure does not match the parameters")
    for i, (p, g) in enumerate(zip(tensors, grads)):
        if p.shape != g.shape:
            raise DimensionError(f"{_tensor_label(i)}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in {_tensor_label(i)}")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(tensors, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def global_norm(gradients: Sequence[MlpParams]) -> float:
    return float(np.sqrt(sum(float((t * t).sum()) for g in gradients for t in g.tensors())))


def clip_by_global_norm(gradients: Sequence[MlpParams], max_norm: float) -> float:
    """Scales all gradients in place so their joint norm is at most max_norm; returns the original norm."""
    norm = global_norm(gradients)
    if norm > max_norm:
        scale = max_norm / norm
        for g in gradients:
            for t in g.tensors():
                t *= scale
    return norm


# --- Checkpoints ---
def _params_to_dict(params: MlpParams) -> Dict[str, Any]:
    return {
        "layer_sizes": params.layer_sizes,
        "weights": [w.ravel(order="C").tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def _params_from_dict(name: str, data: Dict[str, Any]) -> MlpParams:
    sizes = data["layer_sizes"]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        flat_w, flat_b = data["weights"][i], data["biases"][i]
        if len(flat_w) != fan_in * fan_out or len(flat_b) != fan_out:
            raise CheckpointMismatchError(f"{name} layer {i} holds the wrong number of values")
        weights.append(np.asarray(flat_w, dtype=np.float64).reshape(fan_in, fan_out))
        biases.append(np.asarray(flat_b, dtype=np.float64))
    return MlpParams(weights, biases)


def save_checkpoint(path: str, networks: Dict[str, MlpParams], header: Dict[str, Any]) -> str:
    """
    Writes networks as versioned JSON: a header (architecture dims plus caller
    provenance such as feature/config hashes) and row-major flat weight arrays.
    """
    document = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "header": {**header, "architecture": {name: p.layer_sizes for name, p in networks.items()}},
        "networks": {name: _params_to_dict(p) for name, p in networks.items()},
    }
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(document, f, sort_keys=True)
        f.write("\n")
    return path


def load_checkpoint(path: str, expected_architecture: Optional[Dict[str, List[int]]] = None,
                    expected_header: Optional[Dict[str, Any]] = None) -> Tuple[Dict[str, MlpParams], Dict[str, Any]]:
    """
    Reads a checkpoint and validates it against the caller's expectations.

    Args:
        path (str): Checkpoint JSON path.
        expected_architecture (Optional[Dict[str, List[int]]]): Required layer sizes per network.
        expected_header (Optional[Dict[str, Any]]): Header values that must match (e.g. feature_names_hash).

    Returns:
        Tuple[Dict[str, MlpParams], Dict[str, Any]]: Networks by name and the header.
    """
    if not os.path.exists(path):
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        document = json.load(f)
    if document.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointMismatchError(f"unsupported checkpoint format {document.get('format_version')!r}")
    header = document["header"]
    for key, value in (expected_header or {}).items():
        if header.get(key) != value:
            raise CheckpointMismatchError(f"checkpoint {key} {header.get(key)!r} does not match {value!r}")
    for name, sizes in (expected_architecture or {}).items():
        if list(header["architecture"].get(name, [])) != list(sizes):
            raise CheckpointMismatchError(
                f"checkpoint {name} architecture {header['architecture'].get(name)} does not match {list(sizes)}")
    networks = {name: _params_from_dict(name, data) for name, data in document["networks"].items()}
    for name, params in networks.items():
        if params.layer_sizes != list(header["architecture"][name]):
            raise CheckpointMismatchError(f"{name} weights disagree with the header architecture")
    return networks, header
