"""Two-layer residual MLP scorer with exact analytic gradients.

    h1 = relu(W1 x + b1)
    h2 = relu(W2 h1 + b2) + P_res x
    z  = w_out . h2 + b_out
    p  = sigmoid(z)

Every function accepts a single input vector or a batch of row vectors.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import expit

FORMAT_VERSION = 1
PARAM_NAMES = ("W1", "b1", "W2", "b2", "w_out", "b_out", "P_res")
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class DimensionMismatch(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


class CorruptFile(ValueError):
    pass


@dataclass
class ModelParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray  # 0-d
    P_res: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.arrays().items()})

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int = 64) -> "ModelParams":
        return cls(**_zero_arrays(input_dim, hidden_dim))


def _zero_arrays(input_dim: int, hidden_dim: int) -> dict[str, np.ndarray]:
    return {
        "W1": np.zeros((hidden_dim, input_dim)),
        "b1": np.zeros(hidden_dim),
        "W2": np.zeros((hidden_dim, hidden_dim)),
        "b2": np.zeros(hidden_dim),
        "w_out": np.zeros(hidden_dim),
        "b_out": np.zeros(()),
        "P_res": np.zeros((hidden_dim, input_dim)),
    }


def init(rng_seed: int, input_dim: int, hidden_dim: int = 64) -> ModelParams:
    """Weights ~ U(-sqrt(3/fan_in), sqrt(3/fan_in)) (std 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(rng_seed)

    def uniform(shape, fan_in):
        bound = np.sqrt(3.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    arrays = _zero_arrays(input_dim, hidden_dim)
    arrays["W1"] = uniform((hidden_dim, input_dim), input_dim)
    arrays["W2"] = uniform((hidden_dim, hidden_dim), hidden_dim)
    arrays["w_out"] = uniform(hidden_dim, hidden_dim)
    arrays["P_res"] = uniform((hidden_dim, input_dim), input_dim)
    return ModelParams(**arrays)


@dataclass
class ForwardTrace:
    x: np.ndarray
    a1: np.ndarray  # pre-activation, layer 1
    h1: np.ndarray
    a2: np.ndarray  # pre-activation, layer 2
    h2: np.ndarray
    z: np.ndarray
    p: np.ndarray
    params: ModelParams = field(repr=False)
    single: bool = False


def forward(params: ModelParams, x: np.ndarray) -> ForwardTrace:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != params.input_dim:
        raise DimensionMismatch(f"input has {X.shape[1]} features, model expects {params.input_dim}")
    a1 = X @ params.W1.T + params.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ params.W2.T + params.b2
    h2 = np.maximum(a2, 0.0) + X @ params.P_res.T
    z = h2 @ params.w_out + params.b_out
    return ForwardTrace(X, a1, h1, a2, h2, z, expit(z), params, single)


def predict(params: ModelParams, X: np.ndarray, chunk: int = 4096) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    out = np.empty(len(X))
    for i in range(0, len(X), chunk):
        out[i : i + chunk] = forward(params, X[i : i + chunk]).p
    return out


def backward(
    trace: ForwardTrace,
    grad_p: np.ndarray | float | None,
    grad_z: np.ndarray | float | None = None,
) -> tuple[ModelParams, np.ndarray]:
    """Gradients of a loss given its derivative w.r.t. p (and/or directly w.r.t. z).

    Per-row contributions are summed over the batch.  Returns the parameter
    gradients packed as a :class:`ModelParams` and the input gradient with
    the same shape as the forward input.
    """
    P = trace.params
    n = trace.z.shape[0]
    dz = np.zeros(n)
    if grad_p is not None:
        dz = dz + np.broadcast_to(grad_p, (n,)) * trace.p * (1.0 - trace.p)
    if grad_z is not None:
        dz = dz + np.broadcast_to(grad_z, (n,))
    d_w_out = trace.h2.T @ dz
    d_b_out = np.asarray(dz.sum())
    d_h2 = np.outer(dz, P.w_out)
    d_P_res = d_h2.T @ trace.x
    d_a2 = d_h2 * (trace.a2 > 0)
    d_W2 = d_a2.T @ trace.h1
    d_b2 = d_a2.sum(axis=0)
    d_a1 = (d_a2 @ P.W2) * (trace.a1 > 0)
    d_W1 = d_a1.T @ trace.x
    d_b1 = d_a1.sum(axis=0)
    d_x = d_a1 @ P.W1 + d_h2 @ P.P_res
    grads = ModelParams(d_W1, d_b1, d_W2, d_b2, d_w_out, d_b_out, d_P_res)
    return grads, (d_x[0] if trace.single else d_x)


# -- persistence ----------------------------------------------------------------
#
# A model file is an uncompressed .npz archive holding one array per
# parameter (names as in PARAM_NAMES, float64, shapes as in ModelParams)
# plus ``__meta__``: a 0-d unicode array containing a JSON object with
# ``format_version``, ``input_dim``, ``hidden_dim``, ``feature_fingerprint``,
# ``seed`` and any caller-supplied fields.


def save(params: ModelParams, path: str | Path, feature_fingerprint: str, seed: int, **extra: Any) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "input_dim": params.input_dim,
        "hidden_dim": params.hidden_dim,
        "feature_fingerprint": feature_fingerprint,
        "seed": seed,
        **extra,
    }
    entries = {"__meta__": np.array(json.dumps(meta, sort_keys=True)), **params.arrays()}
    # fixed entry timestamps keep the file byte-identical across runs
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in entries.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=ZIP_EPOCH), buf.getvalue())


def load(path: str | Path, expected_fingerprint: str | None = None) -> tuple[ModelParams, dict]:
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            arrays = {name: data[name] for name in PARAM_NAMES}
    except (zipfile.BadZipFile, EOFError, KeyError, OSError, ValueError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise CorruptFile(f"cannot read model file {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"model format {meta.get('format_version')} != {FORMAT_VERSION}")
    if expected_fingerprint is not None and meta["feature_fingerprint"] != expected_fingerprint:
        raise VersionMismatch(
            f"featurizer fingerprint {meta['feature_fingerprint']} != expected {expected_fingerprint}"
        )
    params = ModelParams(**arrays)
    if params.input_dim != meta["input_dim"] or params.hidden_dim != meta["hidden_dim"]:
        raise CorruptFile("stored dimensions disagree with weight shapes")
    return params, meta
