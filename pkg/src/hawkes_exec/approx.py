"""Value-field approximators: multilinear grid interpolation and a small MLP."""
from __future__ import annotations

import json
import logging

import numpy as np

log = logging.getLogger(__name__)

FIELD_FORMAT_VERSION = 1

__all__ = ["GridField", "MlpField", "field_from_dict", "FIELD_FORMAT_VERSION"]


def _locate(axis: np.ndarray, q: np.ndarray):
    """Left cell index and fractional offset for queries already clamped to the axis."""
    n = axis.size
    if n == 1:
        return np.zeros(q.shape, dtype=np.intp), np.zeros(q.shape)
    idx = np.clip(np.searchsorted(axis, q, side="right") - 1, 0, n - 2)
    frac = (q - axis[idx]) / (axis[idx + 1] - axis[idx])
    return idx, frac


class GridField:
    """Multilinear interpolant on a tensor grid; out-of-box queries are clamped and counted."""

    kind = "grid"

    def __init__(self, axes, values=None):
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        for a in self.axes:
            if a.ndim != 1 or a.size < 1 or np.any(np.diff(a) <= 0):
                raise ValueError("each axis must be a strictly increasing 1-D array")
        self.shape = tuple(a.size for a in self.axes)
        self.values = np.zeros(self.shape) if values is None else np.asarray(values, dtype=float)
        if self.values.shape != self.shape:
            raise ValueError(f"values shape {self.values.shape} != grid shape {self.shape}")
        self.clamp_count = 0
        self.rmse = 0.0

    @property
    def ndim(self) -> int:
        return len(self.axes)

    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def fit(self, targets) -> float:
        targets = np.asarray(targets, dtype=float).reshape(self.shape)
        if not np.all(np.isfinite(targets)):
            raise ValueError("non-finite targets")
        self.values = targets.copy()
        self.rmse = 0.0
        return self.rmse

    def __call__(self, *coords):
        return self.eval(np.stack(np.broadcast_arrays(*coords), axis=-1))

    def eval(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        lead = pts.shape[:-1]
        pts = pts.reshape(-1, self.ndim)
        n = pts.shape[0]
        # flat index of the lower corner plus the offsets of all 2^ndim corners
        strides = np.cumprod((self.shape[1:] + (1,))[::-1])[::-1]
        base = np.zeros(n, dtype=np.intp)
        offsets = np.zeros(1, dtype=np.intp)
        weights = np.ones((n, 1))
        for k, axis in enumerate(self.axes):
            q = pts[:, k]
            clipped = np.clip(q, axis[0], axis[-1])
            self.clamp_count += int(np.count_nonzero(clipped != q))
            i, f = _locate(axis, clipped)
            base += i * strides[k]
            step = strides[k] if self.shape[k] > 1 else 0
            offsets = (offsets[:, None] + np.array([0, step])[None, :]).ravel()
            wk = np.stack([1.0 - f, f], axis=1)
            weights = (weights[:, :, None] * wk[:, None, :]).reshape(n, -1)
        flat = self.values.ravel()
        out = np.sum(weights * flat[base[:, None] + offsets[None, :]], axis=1).reshape(lead)
        return float(out[0]) if single else out

    def to_dict(self) -> dict:
        return {
            "version": FIELD_FORMAT_VERSION,
            "kind": self.kind,
            "axes": [a.tolist() for a in self.axes],
            "values": self.values.ravel().tolist(),
            "rmse": self.rmse,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GridField":
        _check_version(doc, cls.kind)
        f = cls(doc["axes"])
        f.values = np.asarray(doc["values"], dtype=float).reshape(f.shape)
        f.rmse = float(doc.get("rmse", 0.0))
        return f


class MlpField:
    """Feed-forward ReLU network trained by Adam on mean squared error.

    Inputs are rescaled to [0, 1] per axis and targets by their max-abs value;
    both scalers are stored so predictions map back exactly.
    """

    kind = "mlp"
    hidden = (64, 32, 16)
    window = 50

    def __init__(self, n_inputs: int, seed: int = 0, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, max_epochs: int = 2000,
                 tol: float = 1e-6, batch_size: int = 128):
        self.sizes = [n_inputs, *self.hidden, 1]
        self.seed = seed
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.max_epochs, self.tol, self.batch_size = max_epochs, tol, batch_size
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.lo = np.zeros(n_inputs)
        self.hi = np.ones(n_inputs)
        self.y_scale = 1.0
        self.loss_history: list[float] = []
        self.rmse = float("nan")
        self.clamp_count = 0

    def _forward(self, z):
        acts = [z]
        h = z
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def _scale_inputs(self, x):
        span = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        return (x - self.lo) / span

    def fit(self, points, targets) -> float:
        x = np.asarray(points, dtype=float)
        y = np.asarray(targets, dtype=float).ravel()
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
            raise ValueError("non-finite training data")
        if y.size < self.batch_size:
            raise ValueError(f"need at least batch_size={self.batch_size} samples, got {y.size}")
        self.lo, self.hi = x.min(axis=0), x.max(axis=0)
        self.y_scale = float(np.max(np.abs(y))) or 1.0
        z = self._scale_inputs(x)
        t = (y / self.y_scale)[:, None]
        rng = np.random.default_rng(self.seed + 1)
        params = self.weights + self.biases
        m = [np.zeros_like(p) for p in params]
        v = [np.zeros_like(p) for p in params]
        step = 0
        n = y.size
        nl = len(self.weights)
        self.loss_history = []
        best = (np.inf, None)
        for epoch in range(self.max_epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                batch = order[start:start + self.batch_size]
                acts = self._forward(z[batch])
                grad = 2.0 * (acts[-1] - t[batch]) / batch.size
                gw, gb = [None] * nl, [None] * nl
                for k in range(nl - 1, -1, -1):
                    gw[k] = acts[k].T @ grad
                    gb[k] = grad.sum(axis=0)
                    if k:
                        grad = (grad @ self.weights[k].T) * (acts[k] > 0)
                step += 1
                for j, g in enumerate(gw + gb):
                    m[j] = self.beta1 * m[j] + (1 - self.beta1) * g
                    v[j] = self.beta2 * v[j] + (1 - self.beta2) * g * g
                    mhat = m[j] / (1 - self.beta1**step)
                    vhat = v[j] / (1 - self.beta2**step)
                    params[j] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            loss = float(np.mean((self._forward(z)[-1] - t) ** 2))
            self.loss_history.append(loss)
            if loss < best[0]:
                best = (loss, [p.copy() for p in params])
            # compare 50-epoch window means so that step-to-step Adam noise does not stop training
            w = self.window
            if len(self.loss_history) >= 2 * w and len(self.loss_history) % w == 0:
                hist = self.loss_history
                if np.mean(hist[-2 * w:-w]) - np.mean(hist[-w:]) < self.tol:
                    break
        for p, kept in zip(params, best[1]):
            p[...] = kept
        pred = self.eval(x)
        self.rmse = float(np.sqrt(np.mean((pred - y) ** 2)))
        return self.rmse

    def __call__(self, *coords):
        return self.eval(np.stack(np.broadcast_arrays(*coords), axis=-1))

    def eval(self, points) -> np.ndarray:
        x = np.asarray(points, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        lead = x.shape[:-1]
        x = x.reshape(-1, self.sizes[0])
        outside = (x < self.lo) | (x > self.hi)
        self.clamp_count += int(np.count_nonzero(outside.any(axis=1)))
        x = np.clip(x, self.lo, self.hi)
        out = self._forward(self._scale_inputs(x))[-1][:, 0] * self.y_scale
        out = out.reshape(lead)
        return float(out[0]) if single else out

    def to_dict(self) -> dict:
        return {
            "version": FIELD_FORMAT_VERSION,
            "kind": self.kind,
            "sizes": self.sizes,
            "seed": self.seed,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "y_scale": self.y_scale,
            "rmse": self.rmse,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpField":
        _check_version(doc, cls.kind)
        f = cls(doc["sizes"][0], seed=doc.get("seed", 0))
        f.weights = [np.asarray(w, dtype=float) for w in doc["weights"]]
        f.biases = [np.asarray(b, dtype=float) for b in doc["biases"]]
        f.lo = np.asarray(doc["lo"], dtype=float)
        f.hi = np.asarray(doc["hi"], dtype=float)
        f.y_scale = float(doc["y_scale"])
        f.rmse = float(doc.get("rmse", float("nan")))
        return f


def _check_version(doc: dict, kind: str) -> None:
    if doc.get("version") != FIELD_FORMAT_VERSION:
        raise ValueError(f"unsupported field format version {doc.get('version')!r}")
    if doc.get("kind") != kind:
        raise ValueError(f"expected a {kind} field, got {doc.get('kind')!r}")


def field_from_dict(doc: dict):
    kinds = {GridField.kind: GridField, MlpField.kind: MlpField}
    if doc.get("kind") not in kinds:
        raise ValueError(f"unknown field kind {doc.get('kind')!r}")
    return kinds[doc["kind"]].from_dict(doc)


def dumps(field) -> str:
    return json.dumps(field.to_dict())
