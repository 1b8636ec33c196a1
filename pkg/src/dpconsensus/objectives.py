"""Differentiable objectives with per-sample gradients.

Three families are provided: a strongly convex quadratic (whose optimum is
available in closed form), multinomial logistic regression, and a small
tanh MLP with softmax cross-entropy. Parameters are always a flat float64
vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp

from .errors import DimensionMismatchError, SingularError


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise DimensionMismatchError(f"features must be 2-D, got shape {x.shape}")
        if len(x) != len(y):
            raise DimensionMismatchError(f"{len(x)} feature rows but {len(y)} labels")
        k = self.num_classes if self.num_classes is not None else (int(y.max()) + 1 if len(y) else 0)
        if len(y) and (y.min() < 0 or y.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "num_classes", k)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class QuadraticDataset:
    """Samples ``(A_s, b_s)`` of the loss ``0.5 (theta - b_s)^T A_s (theta - b_s)``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.A, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if a.ndim != 3 or b.ndim != 2 or a.shape[0] != b.shape[0] or a.shape[1:] != (b.shape[1],) * 2:
            raise DimensionMismatchError(f"incompatible shapes A{a.shape}, b{b.shape}")
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "b", b)

    def __len__(self) -> int:
        return len(self.b)

    def subset(self, indices) -> QuadraticDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return QuadraticDataset(self.A[idx], self.b[idx])


def random_quadratic_dataset(
    n: int, dim: int, mu: float, rng: np.random.Generator,
    center: np.ndarray | None = None, spread: float = 1.0, curvature: float = 1.0,
) -> QuadraticDataset:
    """Samples with ``A_s = mu I + B_s B_s^T * curvature / dim`` and ``b_s`` around ``center``."""
    center = np.zeros(dim) if center is None else np.asarray(center, dtype=np.float64)
    B = rng.standard_normal((n, dim, dim))
    A = mu * np.eye(dim) + curvature * np.einsum("nij,nkj->nik", B, B) / dim
    b = center + spread * rng.standard_normal((n, dim))
    return QuadraticDataset(A, b)


class Objective:
    """Interface shared by all objectives.

    Subclasses implement ``dim``, ``per_sample_losses`` and
    ``per_sample_gradients``; the rest has generic defaults.
    """

    kind = "base"
    is_classifier = False

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def per_sample_losses(self, theta, data) -> np.ndarray:
        raise NotImplementedError

    def per_sample_gradients(self, theta, data, indices=None) -> np.ndarray:
        raise NotImplementedError

    def _check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise DimensionMismatchError(f"theta has shape {theta.shape}, expected ({self.dim},)")
        return theta

    def loss(self, theta, data) -> float:
        return float(np.mean(self.per_sample_losses(theta, data)))

    def gradient(self, theta, data) -> np.ndarray:
        """Gradient of the mean loss over all of ``data``."""
        return self.per_sample_gradients(theta, data).mean(axis=0)

    def clipped_gradient_sum(self, theta, data, indices, clip_norm: float | None = None):
        """Sum over ``indices`` of per-sample gradients, each clipped to ``clip_norm``.

        Returns ``(sum, norms)`` where ``norms`` are the unclipped per-sample
        norms. With ``clip_norm=None`` no scaling is applied at all.
        """
        from .mechanisms import clip_factors

        grads = self.per_sample_gradients(theta, data, indices)
        norms = np.linalg.norm(grads, axis=1)
        if clip_norm is not None:
            grads = grads * clip_factors(norms, clip_norm)[:, None]
        return grads.sum(axis=0), norms

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.dim)


@dataclass
class QuadraticObjective(Objective):
    dimension: int
    mu: float = 1.0
    kind = "quadratic"

    @property
    def dim(self) -> int:
        return self.dimension

    def _data(self, data) -> QuadraticDataset:
        if not isinstance(data, QuadraticDataset) or data.b.shape[1] != self.dimension:
            raise DimensionMismatchError("quadratic objective needs a QuadraticDataset of matching dimension")
        return data

    def per_sample_losses(self, theta, data) -> np.ndarray:
        theta, data = self._check(theta), self._data(data)
        r = theta - data.b
        return 0.5 * np.einsum("ni,nij,nj->n", r, data.A, r)

    def per_sample_gradients(self, theta, data, indices=None) -> np.ndarray:
        theta, data = self._check(theta), self._data(data)
        A, b = (data.A, data.b) if indices is None else (data.A[indices], data.b[indices])
        return np.einsum("nij,nj->ni", A, theta - b)

    def closed_form_optimum(self, data) -> np.ndarray:
        """Solves ``mean(A_s) theta = mean(A_s b_s)``.

        Raises:
            SingularError: if the mean curvature falls below ``mu``.
        """
        data = self._data(data)
        a_bar = data.A.mean(axis=0)
        rhs = np.einsum("nij,nj->i", data.A, data.b) / len(data)
        if np.linalg.eigvalsh(a_bar)[0] < self.mu * (1 - 1e-12):
            raise SingularError("mean curvature is below the strong-convexity floor")
        theta = np.linalg.solve(a_bar, rhs)
        # one step of iterative refinement
        theta += np.linalg.solve(a_bar, rhs - a_bar @ theta)
        return theta

    def smoothness(self, data) -> float:
        return float(max(np.linalg.eigvalsh(a)[-1] for a in self._data(data).A))


def _check_classifier_data(data, n_features: int, n_classes: int) -> LabeledDataset:
    if not isinstance(data, LabeledDataset) or data.features.shape[1] != n_features:
        raise DimensionMismatchError(f"expected a LabeledDataset with {n_features} features")
    if len(data) and data.labels.max() >= n_classes:
        raise DimensionMismatchError(f"labels exceed {n_classes} classes")
    return data


class _Classifier(Objective):
    is_classifier = True

    def logits(self, theta, x) -> np.ndarray:
        raise NotImplementedError

    def predict(self, theta, data) -> np.ndarray:
        # argmax returns the first maximizer: ties go to the lowest class
        return np.argmax(self.logits(theta, data.features), axis=1)

    def accuracy(self, theta, data) -> float:
        data = _check_classifier_data(data, self.n_features, self.n_classes)
        if len(data) == 0:
            return float("nan")
        return float(np.mean(self.predict(self._check(theta), data) == data.labels))


@dataclass
class LogisticObjective(_Classifier):
    """Multinomial logistic regression with l2 penalty ``0.5 * l2 * ||W||^2``."""

    n_features: int
    n_classes: int = 2
    l2: float = 0.0
    kind = "logistic"

    @property
    def dim(self) -> int:
        return (self.n_features + 1) * self.n_classes

    def _unpack(self, theta):
        f, k = self.n_features, self.n_classes
        return theta[: f * k].reshape(f, k), theta[f * k:]

    def logits(self, theta, x):
        w, b = self._unpack(theta)
        return x @ w + b

    def per_sample_losses(self, theta, data) -> np.ndarray:
        theta = self._check(theta)
        data = _check_classifier_data(data, self.n_features, self.n_classes)
        logp = log_softmax(self.logits(theta, data.features), axis=1)
        w, _ = self._unpack(theta)
        return -logp[np.arange(len(data)), data.labels] + 0.5 * self.l2 * np.sum(w * w)

    def per_sample_gradients(self, theta, data, indices=None) -> np.ndarray:
        theta = self._check(theta)
        data = _check_classifier_data(data, self.n_features, self.n_classes)
        x, y = (data.features, data.labels) if indices is None else (data.features[indices], data.labels[indices])
        p = np.exp(log_softmax(self.logits(theta, x), axis=1))
        p[np.arange(len(y)), y] -= 1.0
        w, _ = self._unpack(theta)
        gw = np.einsum("nf,nk->nfk", x, p).reshape(len(y), -1) + self.l2 * w.ravel()
        return np.concatenate([gw, p], axis=1)


@dataclass
class MLPObjective(_Classifier):
    """Fully connected tanh network with softmax cross-entropy.

    Parameters are laid out layer by layer as ``W (fan_in x fan_out)`` then
    ``b (fan_out)``.
    """

    layer_sizes: Sequence[int] = (784, 64, 10)
    kind = "mlp"
    _shapes: list = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        self.layer_sizes = sizes
        self._shapes = list(zip(sizes[:-1], sizes[1:]))

    @property
    def n_features(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def dim(self) -> int:
        return sum((a + 1) * b for a, b in self._shapes)

    def _unpack(self, theta):
        out, pos = [], 0
        for a, b in self._shapes:
            w = theta[pos: pos + a * b].reshape(a, b)
            pos += a * b
            out.append((w, theta[pos: pos + b]))
            pos += b
        return out

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        parts = []
        for a, b in self._shapes:
            s = 1.0 / np.sqrt(a)
            parts.append(rng.uniform(-s, s, size=a * b))
            parts.append(rng.uniform(-s, s, size=b))
        return np.concatenate(parts)

    def _forward(self, theta, x):
        acts = [x]
        layers = self._unpack(theta)
        h = x
        for li, (w, b) in enumerate(layers):
            z = h @ w + b
            h = z if li == len(layers) - 1 else np.tanh(z)
            acts.append(h)
        return layers, acts

    def logits(self, theta, x):
        return self._forward(theta, x)[1][-1]

    def per_sample_losses(self, theta, data) -> np.ndarray:
        theta = self._check(theta)
        data = _check_classifier_data(data, self.n_features, self.n_classes)
        z = self.logits(theta, data.features)
        return logsumexp(z, axis=1) - z[np.arange(len(data)), data.labels]

    def _backward(self, theta, x, y):
        """Per-layer inputs and output-deltas for every sample."""
        layers, acts = self._forward(theta, x)
        delta = np.exp(log_softmax(acts[-1], axis=1))
        delta[np.arange(len(y)), y] -= 1.0
        out = []
        for li in range(len(layers) - 1, -1, -1):
            out.append((acts[li], delta))
            if li:
                delta = (delta @ layers[li][0].T) * (1.0 - acts[li] ** 2)
        return out[::-1]

    def _select(self, data, indices):
        data = _check_classifier_data(data, self.n_features, self.n_classes)
        if indices is None:
            return data.features, data.labels
        return data.features[indices], data.labels[indices]

    def per_sample_gradients(self, theta, data, indices=None) -> np.ndarray:
        theta = self._check(theta)
        x, y = self._select(data, indices)
        parts = []
        for inp, delta in self._backward(theta, x, y):
            parts.append(np.einsum("na,nb->nab", inp, delta).reshape(len(y), -1))
            parts.append(delta)
        return np.concatenate(parts, axis=1)

    def clipped_gradient_sum(self, theta, data, indices, clip_norm: float | None = None):
        # per-sample norms factor through each layer's outer product, so the
        # clipped sum never materializes per-sample gradients
        from .mechanisms import clip_factors

        theta = self._check(theta)
        x, y = self._select(data, indices)
        terms = self._backward(theta, x, y)
        sq = np.zeros(len(y))
        for inp, delta in terms:
            sq += (np.einsum("na,na->n", inp, inp) + 1.0) * np.einsum("nb,nb->n", delta, delta)
        norms = np.sqrt(sq)
        if clip_norm is not None:
            factors = clip_factors(norms, clip_norm)[:, None]
        parts = []
        for inp, delta in terms:
            if clip_norm is not None:
                delta = delta * factors
            parts.append((inp.T @ delta).ravel())
            parts.append(delta.sum(axis=0))
        return np.concatenate(parts), norms
