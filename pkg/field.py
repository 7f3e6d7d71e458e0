"""Attenuation MLP: encoded features in, mu in (0, 1) out, with hand-written reverse mode.

Default network: three 32-wide ReLU layers and a single sigmoid neuron; the
raw encoder output is concatenated onto the first layer's activation before
the second layer. Rows of the input matrix are points (rays x samples
flattened), so one call evaluates a whole batch.
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from errors import ConfigError, ShapeMismatchError


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    width: int = 32
    depth: int = 4
    skip_layer: Optional[int] = 1

    def __post_init__(self):
        if self.input_dim < 1 or self.width < 1 or self.depth < 1:
            raise ConfigError(f"bad MLP shape: {self}")
        if self.skip_layer is not None and not (1 <= self.skip_layer < self.depth):
            raise ConfigError(f"skip_layer must be in [1, {self.depth - 1}], got {self.skip_layer}")

    def layer_shapes(self) -> List[Tuple[int, int]]:
        shapes = []
        fan_in = self.input_dim
        for i in range(self.depth):
            if i == self.skip_layer:
                fan_in += self.input_dim
            fan_out = 1 if i == self.depth - 1 else self.width
            shapes.append((fan_in, fan_out))
            fan_in = fan_out
        return shapes

    def activations(self) -> List[str]:
        return ['relu'] * (self.depth - 1) + ['sigmoid']

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: List[np.ndarray]  # (fan_in, fan_out)
    biases: List[np.ndarray]   # (fan_out,)

    def arrays(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    @property
    def dtype(self):
        return self.weights[0].dtype


@dataclass
class MlpCache:
    inputs: List[np.ndarray]
    preacts: List[np.ndarray]
    mu: np.ndarray
    params: MlpParams


def init_params(seed: int, spec: MlpSpec, dtype=np.float32) -> MlpParams:
    """Uniform Kaiming fan-in weights (std sqrt(2/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_shapes():
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(spec=spec, weights=weights, biases=biases)


def sigmoid(z: np.ndarray) -> np.ndarray:
    with np.errstate(over='ignore'):
        return 1.0 / (1.0 + np.exp(-z))


def mlp_forward(features: np.ndarray, params: MlpParams) -> Tuple[np.ndarray, MlpCache]:
    x = np.atleast_2d(np.asarray(features, dtype=params.dtype))
    if x.shape[1] != params.spec.input_dim:
        raise ShapeMismatchError(f"MLP expects {params.spec.input_dim} input features, got {x.shape[1]}")
    inputs, preacts = [], []
    h = x
    last = params.spec.depth - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        layer_in = np.concatenate([h, x], axis=1) if i == params.spec.skip_layer else h
        z = layer_in @ w + b
        inputs.append(layer_in)
        preacts.append(z)
        h = sigmoid(z) if i == last else np.maximum(z, 0)
    mu = h[:, 0]
    return mu, MlpCache(inputs=inputs, preacts=preacts, mu=mu, params=params)


def mlp_backward(cache: MlpCache, d_mu: np.ndarray) -> Tuple[MlpParams, np.ndarray]:
    """Exact gradients for every weight and bias plus dL/dfeatures.

    ReLU subgradient at 0 is 0.
    """
    params = cache.params
    spec = params.spec
    mu = cache.mu
    d = (np.asarray(d_mu, dtype=mu.dtype).reshape(-1) * mu * (1.0 - mu))[:, None]
    d_x = np.zeros((mu.shape[0], spec.input_dim), dtype=mu.dtype)
    grad_w: List[Optional[np.ndarray]] = [None] * spec.depth
    grad_b: List[Optional[np.ndarray]] = [None] * spec.depth
    for i in reversed(range(spec.depth)):
        grad_w[i] = cache.inputs[i].T @ d
        grad_b[i] = d.sum(axis=0)
        d_in = d @ params.weights[i].T
        if i == spec.skip_layer:
            d_x += d_in[:, -spec.input_dim:]
            d_in = d_in[:, :-spec.input_dim]
        if i == 0:
            d_x += d_in
        else:
            d = d_in * (cache.preacts[i - 1] > 0)
    return MlpParams(spec=spec, weights=grad_w, biases=grad_b), d_x
