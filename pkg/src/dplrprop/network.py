"""Model directories and end-to-end propagation.

A model directory holds ``manifest.json`` plus one raw little-endian
float32 file per weight blob (row-major; linear weights ``(out, in)``,
conv kernels ``(out_c, in_c, kh, kw)``, row factors ``(out, in, s)``).
See the README for the manifest schema.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from dplrprop._linalg import rows_times
from dplrprop.config import PropagationConfig
from dplrprop.conv import conv2d
from dplrprop.dplr import DplrMatrix, GaussianState
from dplrprop.errors import ModelFileNotFound, ModelFormatError, ShapeError
from dplrprop.moments import (
    Activation,
    Conv2dDet,
    Conv2dMeanField,
    Dropout,
    Flatten,
    LinearDet,
    LinearMeanField,
    LinearRowCov,
    activation_fn,
    propagate_layer,
)

MANIFEST = "manifest.json"
FORMAT = "dplrprop-model"
FORMAT_VERSION = 1

__all__ = [
    "Model",
    "PropagationConfig",
    "BatchError",
    "LayerError",
    "load_model",
    "save_model",
    "propagate",
    "propagate_batch",
]


class BatchError(ValueError):
    """One or more batch items failed; ``errors`` maps item index to exception."""

    def __init__(self, errors):
        self.errors = dict(errors)
        first = min(self.errors)
        super().__init__(f"{len(self.errors)} batch item(s) failed; item {first}: {self.errors[first]}")


class LayerError(ValueError):
    """A propagation rule failed; carries the layer index and the original error."""

    def __init__(self, index, tag, cause):
        self.index = index
        self.cause = cause
        super().__init__(f"layer {index} ({tag}): {cause}")


@dataclass(frozen=True, eq=False)
class Model:
    layers: Tuple
    input_shape: Tuple[int, ...]
    name: str = "model"
    metadata: dict = field(default_factory=dict)
    input_noise: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.input_noise is not None:
            noise = np.asarray(self.input_noise, dtype=np.float64)
            if noise.shape != (self.input_dim,) or np.any(noise < 0):
                raise ModelFormatError(f"input_noise must be a nonnegative vector of length {self.input_dim}")
            object.__setattr__(self, "input_noise", noise)
        self.shapes()

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def shapes(self):
        """Per-layer output shapes; raises ModelFormatError on a chain break."""
        shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = tuple(layer.output_shape(shape))
            except (ShapeError, ValueError) as exc:
                raise ModelFormatError(f"layer {i} ({_tag(layer)}): {exc}") from exc
            shapes.append(shape)
        return shapes

    @property
    def output_shape(self):
        shapes = self.shapes()
        return shapes[-1] if shapes else self.input_shape

    def prepare(self, cfg: PropagationConfig):
        """Build (and cache) the per-layer operators ``cfg`` will use."""
        shape = self.input_shape
        for layer in self.layers:
            if isinstance(layer, (LinearDet, LinearMeanField, LinearRowCov)):
                layer.operator(cfg.weight_rank)
            elif isinstance(layer, (Conv2dDet, Conv2dMeanField)):
                layer.operator(shape)
            shape = layer.output_shape(shape)
        return self

    def forward(self, xs, stable=True):
        """Plain point inference on a batch ``(B, ...)``, every weight at its mean.

        ``stable=False`` uses one unblocked product per layer: fastest, but
        the last bits may then depend on the batch size.
        """
        xs = np.asarray(xs, dtype=np.float64)
        h = xs.reshape(xs.shape[0], -1)
        shape = self.input_shape
        for layer in self.layers:
            if isinstance(layer, (LinearDet, LinearMeanField, LinearRowCov)):
                h = (rows_times(h, layer.W_mean.T) if stable else h @ layer.W_mean.T) + layer.b_mean
            elif isinstance(layer, (Conv2dDet, Conv2dMeanField)):
                y = conv2d(h.reshape((-1,) + shape), layer.kernel_mean, layer.stride, layer.padding)
                h = (y + layer.bias_mean[:, None, None]).reshape(h.shape[0], -1)
            elif isinstance(layer, Activation):
                h = activation_fn(layer.kind, h)
            shape = tuple(layer.output_shape(shape))
        return h

    def _initial_state(self, xs, with_noise=True):
        xs = xs.reshape(xs.shape[0], -1)
        cov = DplrMatrix.zeros(xs.shape[1], xs.shape[:1])
        if with_noise and self.input_noise is not None:
            cov = DplrMatrix(np.broadcast_to(self.input_noise, xs.shape), cov.factor)
        shape = self.input_shape if len(self.input_shape) == 3 else None
        return GaussianState(xs, cov, shape)


# ----------------------------------------------------------------------------
# propagation


def propagate_stacked(model: Model, state: GaussianState, cfg: PropagationConfig, inits=None):
    """Fold every layer over a batched state (leading axis = items)."""
    for i, layer in enumerate(model.layers):
        init = None if inits is None else inits.get(i)
        try:
            state = propagate_layer(state, layer, cfg, key=i, init=init)
        except (ShapeError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise LayerError(i, _tag(layer), exc) from exc
    return state


def _stack_inputs(model, inputs):
    rows, errors = [], {}
    for idx, x in enumerate(inputs):
        x = np.asarray(x, dtype=np.float64)
        if x.size != model.input_dim or (x.ndim > 1 and x.shape != model.input_shape):
            errors[idx] = ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")
            continue
        rows.append(x.reshape(-1))
    if errors:
        raise BatchError(errors)
    return np.stack(rows) if rows else np.zeros((0, model.input_dim))


def _run_chunk(model, xs, cfg):
    return propagate_stacked(model, model._initial_state(xs), cfg)


def _run_warm(model, xs, cfg):
    """Sequential items; each decomposition starts from the previous item's factor."""
    inits, means, lams, factors = {}, [], [], []
    for x in xs:
        state = model._initial_state(x[None])
        for i, layer in enumerate(model.layers):
            state = propagate_layer(state, layer, cfg, key=i, init=inits.get(i))
            f = state.cov.factor
            if f.shape[-1] and f[0].any() and isinstance(
                    layer, (LinearDet, LinearMeanField, LinearRowCov, Conv2dDet, Conv2dMeanField)):
                inits[i] = f[0]
        means.append(state.mean[0])
        lams.append(state.cov.lam[0])
        factors.append(state.cov.factor[0])
    width = max(f.shape[-1] for f in factors)
    factors = [np.pad(f, ((0, 0), (0, width - f.shape[-1]))) for f in factors]
    return GaussianState(np.stack(means), DplrMatrix(np.stack(lams), np.stack(factors)), state.shape)


def propagate_batch(model: Model, inputs: Sequence, cfg: PropagationConfig, workers: int = 1):
    """Propagate every input; results do not depend on batch order or ``workers``.

    Raises
    ------
    BatchError
        With the failing item indices.
    """
    xs = _stack_inputs(model, inputs)
    if len(xs) == 0:
        return []
    model.prepare(cfg)
    if cfg.warm_start:
        out = _run_warm(model, xs, cfg)
        chunks = [out]
    else:
        workers = max(1, min(int(workers), len(xs)))
        size = math.ceil(len(xs) / workers)
        parts = [xs[i:i + size] for i in range(0, len(xs), size)]
        try:
            if workers == 1:
                chunks = [_run_chunk(model, parts[0], cfg)]
            else:
                with ThreadPoolExecutor(workers) as pool:
                    chunks = list(pool.map(lambda p: _run_chunk(model, p, cfg), parts))
        except (ShapeError, ValueError, ArithmeticError, np.linalg.LinAlgError):
            errors = {}
            for idx, x in enumerate(xs):
                try:
                    _run_chunk(model, x[None], cfg)
                except Exception as exc:  # noqa: BLE001 - collected per item
                    errors[idx] = exc
            raise BatchError(errors or {0: RuntimeError("batch failed")})
    results = []
    for chunk in chunks:
        for j in range(chunk.mean.shape[0]):
            item = chunk[j]
            results.append(GaussianState(item.mean, item.cov.compact(), item.shape))
    return results


def propagate(model: Model, x, cfg: PropagationConfig) -> GaussianState:
    """Propagate one input through the model, starting from zero covariance."""
    try:
        return propagate_batch(model, [x], cfg)[0]
    except BatchError as exc:
        raise exc.errors[0]


# ----------------------------------------------------------------------------
# on-disk format


_TAGS = {
    Dropout: "dropout",
    LinearDet: "linear",
    LinearMeanField: "linear_meanfield",
    LinearRowCov: "linear_rowcov",
    Activation: "activation",
    Conv2dDet: "conv2d",
    Conv2dMeanField: "conv2d_meanfield",
    Flatten: "flatten",
}


def _tag(layer):
    return _TAGS.get(type(layer), type(layer).__name__)


def _write_blob(directory, name, arr):
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(os.path.join(directory, name), "wb") as fh:
        fh.write(data)
    return name


def save_model(model: Model, directory) -> Path:
    """Write ``model`` as a manifest plus float32 payload files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, layer in enumerate(model.layers):
        tag = _tag(layer)
        entry = {"type": tag}

        def blob(field_name, arr):
            entry[field_name] = _write_blob(directory, f"layer{i:02d}_{field_name}.bin", arr)

        if isinstance(layer, Dropout):
            if layer.p.ndim:
                blob("p", layer.p)
            else:
                entry["p"] = float(layer.p)
        elif isinstance(layer, (LinearDet, LinearMeanField, LinearRowCov)):
            entry["out"], entry["in"] = (int(s) for s in layer.W_mean.shape)
            blob("weight", layer.W_mean)
            blob("bias", layer.b_mean)
            if isinstance(layer, LinearMeanField):
                blob("weight_var", layer.W_var)
                blob("bias_var", layer.b_var)
            if isinstance(layer, LinearRowCov):
                entry["row_rank"] = int(layer.row_factors.shape[2])
                blob("row_factors", layer.row_factors)
        elif isinstance(layer, Activation):
            entry["kind"] = layer.kind
            if layer.cov_mode is not None:
                entry["cov_mode"] = layer.cov_mode
        elif isinstance(layer, (Conv2dDet, Conv2dMeanField)):
            o, c, kh, kw = (int(s) for s in layer.kernel_mean.shape)
            entry.update(out_channels=o, in_channels=c, kernel_size=[kh, kw],
                         stride=int(layer.stride), padding=int(layer.padding))
            blob("weight", layer.kernel_mean)
            blob("bias", layer.bias_mean)
            if isinstance(layer, Conv2dMeanField):
                blob("weight_var", layer.kernel_var)
                blob("bias_var", layer.bias_var)
        entries.append(entry)
    manifest = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "name": model.name,
        "metadata": model.metadata,
        "input_shape": list(model.input_shape),
        "layers": entries,
    }
    if model.input_noise is not None:
        manifest["input_noise"] = _write_blob(directory, "input_noise.bin", model.input_noise)
    with open(directory / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def _read_blob(directory, entry, field_name, shape, where, nonneg=False):
    if field_name not in entry:
        raise ModelFormatError(f"{where} field {field_name!r}: missing from manifest")
    path = directory / entry[field_name]
    if not path.is_file():
        raise ModelFileNotFound(f"{where} field {field_name!r}: payload file {path.name!r} not found")
    expected = 4 * int(np.prod(shape))
    raw = path.read_bytes()
    if len(raw) != expected:
        raise ModelFormatError(
            f"{where} field {field_name!r}: {path.name} has {len(raw)} bytes, expected {expected} for shape {tuple(shape)}")
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ModelFormatError(f"{where} field {field_name!r}: non-finite value")
    if nonneg and np.any(arr < 0):
        offset = int(np.argmax(arr.reshape(-1) < 0))
        raise ModelFormatError(f"{where} field {field_name!r}: negative variance at offset {offset}")
    return arr


def _int(entry, key, where):
    try:
        return int(entry[key])
    except (KeyError, TypeError, ValueError):
        raise ModelFormatError(f"{where} field {key!r}: missing or not an integer") from None


def _parse_layer(directory, i, entry, in_shape):
    where = f"layer {i}"
    tag = entry.get("type")
    if tag == "dropout":
        if isinstance(entry.get("p"), str):
            p = _read_blob(directory, entry, "p", (int(np.prod(in_shape)),), where)
        else:
            p = float(entry.get("p", 0.0))
        if np.any(np.asarray(p) < 0) or np.any(np.asarray(p) >= 1):
            raise ModelFormatError(f"{where} field 'p': dropout probability outside [0, 1)")
        return Dropout(p)
    if tag in ("linear", "linear_meanfield", "linear_rowcov"):
        m, n = _int(entry, "out", where), _int(entry, "in", where)
        w = _read_blob(directory, entry, "weight", (m, n), where)
        b = _read_blob(directory, entry, "bias", (m,), where)
        if tag == "linear":
            return LinearDet(w, b)
        if tag == "linear_meanfield":
            return LinearMeanField(w, b, _read_blob(directory, entry, "weight_var", (m, n), where, True),
                                   _read_blob(directory, entry, "bias_var", (m,), where, True))
        s = _int(entry, "row_rank", where)
        return LinearRowCov(w, b, _read_blob(directory, entry, "row_factors", (m, n, s), where))
    if tag == "activation":
        try:
            return Activation(entry.get("kind"), entry.get("cov_mode"))
        except ValueError as exc:
            raise ModelFormatError(f"{where} field 'kind': {exc}") from None
    if tag in ("conv2d", "conv2d_meanfield"):
        o, c = _int(entry, "out_channels", where), _int(entry, "in_channels", where)
        ks = entry.get("kernel_size")
        if not isinstance(ks, list) or len(ks) != 2:
            raise ModelFormatError(f"{where} field 'kernel_size': expected [kh, kw]")
        shape = (o, c, int(ks[0]), int(ks[1]))
        stride, padding = int(entry.get("stride", 1)), int(entry.get("padding", 0))
        k = _read_blob(directory, entry, "weight", shape, where)
        b = _read_blob(directory, entry, "bias", (o,), where)
        if tag == "conv2d":
            return Conv2dDet(k, b, stride, padding)
        return Conv2dMeanField(k, b, _read_blob(directory, entry, "weight_var", shape, where, True),
                               _read_blob(directory, entry, "bias_var", (o,), where, True), stride, padding)
    if tag == "flatten":
        return Flatten()
    raise ModelFormatError(f"{where} field 'type': unknown layer type {tag!r}")


def load_model(directory, weight_rank: Optional[int] = None) -> Model:
    """Read and validate a model directory.

    With ``weight_rank`` the truncated-SVD weights are computed up front.
    """
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise ModelFileNotFound(f"manifest file {str(path)!r} not found")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{MANIFEST}: invalid JSON ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise ModelFormatError(f"{MANIFEST}: format must be {FORMAT!r}")
    input_shape = tuple(int(s) for s in manifest.get("input_shape", ()))
    if len(input_shape) not in (1, 3):
        raise ModelFormatError(f"{MANIFEST}: input_shape must be [n] or [C, H, W]")
    layers, shape = [], input_shape
    for i, entry in enumerate(manifest.get("layers", [])):
        layer = _parse_layer(directory, i, entry, shape)
        try:
            shape = tuple(layer.output_shape(shape))
        except (ShapeError, ValueError) as exc:
            raise ModelFormatError(f"layer {i} ({entry.get('type')}): {exc}") from None
        layers.append(layer)
    noise = None
    if "input_noise" in manifest:
        noise = _read_blob(directory, manifest, "input_noise", (int(np.prod(input_shape)),), "manifest", True)
    model = Model(layers, input_shape, manifest.get("name", "model"), manifest.get("metadata", {}), noise)
    if weight_rank is not None:
        model.prepare(PropagationConfig(weight_rank=weight_rank))
    return model
