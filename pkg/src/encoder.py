from dataclasses import dataclass
from typing import Dict, List, Tuple
import logging

import numpy as np

from src.exceptions import DimensionMismatch, ZeroNorm
from src.numerics import EPS, SeededRng

logger = logging.getLogger(__name__)


@dataclass
class ForwardCache:
    """Intermediate values of one forward pass, kept for the backward pass."""
    layer_inputs: List[np.ndarray]
    hidden: List[np.ndarray]
    norms: np.ndarray
    output: np.ndarray


class EncoderParams:
    """A perceptron D_in -> H -> H -> D with tanh between layers and an l2-normalized output.

    Batches are row-major: an input batch is b×D_in and the embeddings come out b×D, one unit-norm row per sample.
    Parameters are exposed in a fixed order (W0, b0, W1, b1, W2, b2), which is also the checkpoint layout.
    """
    def __init__(self, weights: List[np.ndarray], biases: List[np.ndarray]) -> None:
        """
        Constructor for EncoderParams class

        :param List[np.ndarray] weights: Layer matrices, layer l maps width(l) to width(l+1)
        :param List[np.ndarray] biases: Layer bias vectors
        """
        if len(weights) != len(biases) or not weights:
            raise DimensionMismatch('one bias vector per weight matrix is required')
        for w, b in zip(weights, biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionMismatch(f'layer shapes {w.shape} and {b.shape} do not fit')
        for w_prev, w_next in zip(weights, weights[1:]):
            if w_prev.shape[1] != w_next.shape[0]:
                raise DimensionMismatch('consecutive layers do not chain')
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @staticmethod
    def initialize(input_dim: int, hidden_dim: int, output_dim: int, rng: SeededRng) -> 'EncoderParams':
        """
        Glorot-uniform weights, zero biases

        :param int input_dim: D_in
        :param int hidden_dim: H
        :param int output_dim: D
        :param SeededRng rng: The stream to draw the weights from
        :return EncoderParams: Fresh parameters
        """
        sizes = [input_dim, hidden_dim, hidden_dim, output_dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return EncoderParams(weights, biases)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def named_arrays(self) -> List[Tuple[str, np.ndarray]]:
        named = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named.append((f'W{i}', w))
            named.append((f'b{i}', b))
        return named

    def copy(self) -> 'EncoderParams':
        return EncoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
        """
        Embeds a batch

        :param np.ndarray x: b×D_in inputs
        :return Tuple[np.ndarray, ForwardCache]: b×D unit-norm embeddings and the cache for `backward`
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionMismatch(f'expected inputs of width {self.input_dim}, got shape {x.shape}')
        layer_inputs, hidden = [], []
        a = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            layer_inputs.append(a)
            z = a @ w + b
            if i < last:
                a = np.tanh(z)
                hidden.append(a)
            else:
                a = z
        norms = np.sqrt(np.einsum('ij,ij->i', a, a))
        if np.any(~(norms > EPS)):
            raise ZeroNorm('encoder produced a zero pre-normalization activation')
        output = a / norms[:, None]
        return output, ForwardCache(layer_inputs=layer_inputs, hidden=hidden, norms=norms, output=output)

    def backward(self, cache: ForwardCache, grad_output: np.ndarray) -> Dict[str, np.ndarray]:
        """
        Backpropagates a gradient w.r.t. the embeddings through the normalization and every layer

        :param ForwardCache cache: The cache of the matching `forward` call
        :param np.ndarray grad_output: b×D gradient w.r.t. the unit-norm embeddings
        :return Dict[str, np.ndarray]: Gradients keyed like `named_arrays`
        """
        f = cache.output
        # d(z/|z|) = (g - f fᵀg) / |z|
        radial = np.einsum('ij,ij->i', f, grad_output)
        grad = (grad_output - f * radial[:, None]) / cache.norms[:, None]

        grads = {}
        for i in reversed(range(len(self.weights))):
            grads[f'W{i}'] = cache.layer_inputs[i].T @ grad
            grads[f'b{i}'] = grad.sum(axis=0)
            if i > 0:
                grad = (grad @ self.weights[i].T) * (1.0 - cache.hidden[i - 1] ** 2)
        return grads

    def encode(self, x: np.ndarray) -> np.ndarray:
        """
        Embeds a single vector

        :param np.ndarray x: A length D_in input
        :return np.ndarray: A unit-norm length D embedding
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise DimensionMismatch(f'encode takes one vector, got shape {x.shape}')
        return self.forward(x[None, :])[0][0]

    def encode_batch(self, x: np.ndarray, chunk: int = 1024) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] == 0:
            return np.zeros((0, self.output_dim))
        return np.concatenate([self.forward(x[i:i + chunk])[0] for i in range(0, x.shape[0], chunk)])
