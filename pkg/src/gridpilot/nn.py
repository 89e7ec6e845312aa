"""Dense-network machinery used by the state estimator and the DDPG nets.

Everything is plain numpy in float64. A model is an ordered list of dense
layers; each layer applies, in order: affine transform, optional batch
normalization, activation, optional inverted dropout. Gradients are
hand-derived and verified against central finite differences in the tests,
so any change here must keep backward() in lockstep with forward().

Conventions:
  - batches are (n_samples, n_features), weights are (in_dim, out_dim)
  - train mode samples dropout masks and uses batch statistics for batch
    norm (updating running statistics as a side effect); eval mode is
    deterministic and uses running statistics
  - parameters and gradients travel as flat dicts keyed "L{i}.{W,b,gamma,beta}"
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ModelMismatchError, NumericalError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # running = momentum * running + (1 - momentum) * batch

_ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass
class BatchNormState:
    scale: np.ndarray  # gamma
    shift: np.ndarray  # beta
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "BatchNormState":
        return cls(scale=np.ones(dim), shift=np.zeros(dim),
                   running_mean=np.zeros(dim), running_var=np.ones(dim))


@dataclass
class DenseLayer:
    weights: np.ndarray
    biases: np.ndarray
    activation: str = "identity"
    dropout_rate: float = 0.0
    batch_norm: BatchNormState | None = None

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ModelMismatchError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelMismatchError("dropout_rate must lie in [0, 1)")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class MlpModel:
    layers: list[DenseLayer]
    mode: str = "train"

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ModelMismatchError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self


def build_mlp(dims: list[int], hidden_activation: str = "relu",
              output_activation: str = "identity", dropout_rate: float = 0.0,
              batch_norm: bool = False, rng: np.random.Generator | None = None,
              final_init_scale: float | None = None,
              activations: list[str] | None = None) -> MlpModel:
    """Stack dense layers for the given dimension chain.

    Hidden layers get the dropout/batch-norm treatment; the output layer is
    a plain affine + activation. ``activations`` overrides the per-layer
    activation list entirely (one entry per layer). Weights and biases start
    uniform in +-1/sqrt(fan_in); ``final_init_scale`` overrides the output
    layer bound (the DDPG nets want +-3e-3 there).
    """
    if len(dims) < 2:
        raise ModelMismatchError("need at least input and output dims")
    n_layers = len(dims) - 1
    if activations is not None and len(activations) != n_layers:
        raise ModelMismatchError(f"need {n_layers} activations, got {len(activations)}")
    rng = rng if rng is not None else np.random.default_rng()
    layers = []
    last = n_layers - 1
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        bound = 1.0 / np.sqrt(d_in)
        if i == last and final_init_scale is not None:
            bound = final_init_scale
        if activations is not None:
            act = activations[i]
        else:
            act = output_activation if i == last else hidden_activation
        layers.append(DenseLayer(
            weights=rng.uniform(-bound, bound, size=(d_in, d_out)),
            biases=rng.uniform(-bound, bound, size=d_out),
            activation=act,
            dropout_rate=0.0 if i == last else dropout_rate,
            batch_norm=BatchNormState.identity(d_out) if (batch_norm and i != last) else None,
        ))
    return MlpModel(layers=layers)


def clone_model(model: MlpModel) -> MlpModel:
    """Deep copy with independent parameter arrays (target-network init)."""
    arrays, descriptor = model_to_arrays(model)
    return model_from_arrays({k: v.copy() for k, v in arrays.items()}, descriptor)


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(float)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def forward(model: MlpModel, batch: np.ndarray, rng_seed=None) -> tuple[np.ndarray, list]:
    """Run the network, returning outputs and the per-layer backward cache.

    ``rng_seed`` (int seed or Generator) is required in train mode when any
    layer has dropout; the same seed reproduces the same masks, which the
    finite-difference tests rely on.
    """
    x = np.atleast_2d(np.asarray(batch, dtype=float))
    if x.shape[1] != model.input_dim:
        raise ModelMismatchError(
            f"batch has {x.shape[1]} features, model expects {model.input_dim}")
    train = model.mode == "train"
    rng = None
    if train and any(layer.dropout_rate > 0.0 for layer in model.layers):
        if rng_seed is None:
            raise ModelMismatchError("train-mode forward with dropout needs rng_seed")
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) \
            else np.random.default_rng(rng_seed)

    cache = []
    for layer in model.layers:
        z = x @ layer.weights + layer.biases
        entry = {"x": x, "z": z, "train": train}

        y = z
        bn = layer.batch_norm
        if bn is not None:
            if train:
                mu = z.mean(axis=0)
                var = z.var(axis=0)  # biased, matches the backward pass
                bn.running_mean = BN_MOMENTUM * bn.running_mean + (1 - BN_MOMENTUM) * mu
                bn.running_var = BN_MOMENTUM * bn.running_var + (1 - BN_MOMENTUM) * var
            else:
                mu, var = bn.running_mean, bn.running_var
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            z_hat = (z - mu) * inv_std
            y = bn.scale * z_hat + bn.shift
            entry.update(mu=mu, inv_std=inv_std, z_hat=z_hat)

        a = _activate(layer.activation, y)
        entry["y"] = y
        entry["a"] = a

        if layer.dropout_rate > 0.0 and train:
            keep = 1.0 - layer.dropout_rate
            mask = (rng.random(a.shape) < keep) / keep  # inverted dropout
            a = a * mask
            entry["mask"] = mask

        cache.append(entry)
        x = a

    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite network output")
    return x, cache


def backward(model: MlpModel, cache: list, output_gradient: np.ndarray
             ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backpropagate d(loss)/d(outputs) through a cached forward pass.

    Returns ({"L{i}.W": dW, ...}, d(loss)/d(inputs)). Batch-norm gradients
    flow through the batch statistics in train mode and through the frozen
    running statistics in eval mode.
    """
    if len(cache) != len(model.layers):
        raise ModelMismatchError("cache does not match model (stale or truncated)")
    grads: dict[str, np.ndarray] = {}
    da = np.atleast_2d(np.asarray(output_gradient, dtype=float))

    for i in range(len(model.layers) - 1, -1, -1):
        layer, entry = model.layers[i], cache[i]
        if da.shape != entry["a"].shape:
            raise ModelMismatchError("output gradient shape does not match cached forward")

        if "mask" in entry:
            da = da * entry["mask"]

        dy = da * _activate_grad(layer.activation, entry["y"], entry["a"])

        bn = layer.batch_norm
        if bn is not None:
            z_hat, inv_std = entry["z_hat"], entry["inv_std"]
            grads[f"L{i}.gamma"] = (dy * z_hat).sum(axis=0)
            grads[f"L{i}.beta"] = dy.sum(axis=0)
            dz_hat = dy * bn.scale
            if entry["train"]:
                n = z_hat.shape[0]
                # standard batch-norm backward through batch mean/variance
                dz = (inv_std / n) * (n * dz_hat - dz_hat.sum(axis=0)
                                      - z_hat * (dz_hat * z_hat).sum(axis=0))
            else:
                dz = dz_hat * inv_std
        else:
            dz = dy

        x = entry["x"]
        grads[f"L{i}.W"] = x.T @ dz
        grads[f"L{i}.b"] = dz.sum(axis=0)
        da = dz @ layer.weights.T

    return grads, da


def model_parameters(model: MlpModel) -> dict[str, np.ndarray]:
    """Live references to every trainable array, keyed like backward()'s grads."""
    params = {}
    for i, layer in enumerate(model.layers):
        params[f"L{i}.W"] = layer.weights
        params[f"L{i}.b"] = layer.biases
        if layer.batch_norm is not None:
            params[f"L{i}.gamma"] = layer.batch_norm.scale
            params[f"L{i}.beta"] = layer.batch_norm.shift
    return params


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of squared elementwise differences and its gradient w.r.t. pred."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ModelMismatchError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied in place to params."""
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for key, grad in grads.items():
        if key not in params:
            raise ModelMismatchError(f"gradient for unknown parameter {key!r}")
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient for {key!r} at step {t}")
        if key not in state.m:
            state.m[key] = np.zeros_like(params[key])
            state.v[key] = np.zeros_like(params[key])
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1 - state.beta1) * grad
        v *= state.beta2
        v += (1 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        params[key] -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params


# --- checkpointing ---------------------------------------------------------
#
# Single-file binary container: magic, version, JSON header (metadata plus an
# array manifest with dtype/shape/byte offsets), then the raw little-endian
# array payloads. No timestamps or compression, so identical contents give
# identical bytes.

_MAGIC = b"GPCK"
_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], metadata: dict) -> None:
    manifest = []
    offset = 0
    payload = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"metadata": metadata, "arrays": manifest},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HQ", _VERSION, len(header)))
        fh.write(header)
        for raw in payload:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<HQ", blob[4:14])
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[14:14 + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
    base = 14 + header_len
    arrays = {}
    for item in header["arrays"]:
        shape = tuple(item["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + item["offset"]
        end = start + 8 * count
        if end > len(blob):
            raise CheckpointError(f"truncated checkpoint {path}")
        arrays[item["name"]] = np.frombuffer(
            blob[start:end], dtype="<f8").reshape(shape).copy()
    return arrays, header["metadata"]


def model_to_arrays(model: MlpModel) -> tuple[dict[str, np.ndarray], dict]:
    """Flatten a model into checkpoint arrays plus an architecture descriptor."""
    arrays = dict(model_parameters(model))
    arch = []
    for i, layer in enumerate(model.layers):
        arch.append({"in": layer.in_dim, "out": layer.out_dim,
                     "activation": layer.activation,
                     "dropout_rate": layer.dropout_rate,
                     "batch_norm": layer.batch_norm is not None})
        if layer.batch_norm is not None:
            arrays[f"L{i}.running_mean"] = layer.batch_norm.running_mean
            arrays[f"L{i}.running_var"] = layer.batch_norm.running_var
    return arrays, {"arch": arch, "mode": model.mode}


def model_from_arrays(arrays: dict[str, np.ndarray], descriptor: dict) -> MlpModel:
    layers = []
    try:
        for i, spec in enumerate(descriptor["arch"]):
            bn = None
            if spec["batch_norm"]:
                bn = BatchNormState(scale=arrays[f"L{i}.gamma"],
                                    shift=arrays[f"L{i}.beta"],
                                    running_mean=arrays[f"L{i}.running_mean"],
                                    running_var=arrays[f"L{i}.running_var"])
            layers.append(DenseLayer(weights=arrays[f"L{i}.W"], biases=arrays[f"L{i}.b"],
                                     activation=spec["activation"],
                                     dropout_rate=spec["dropout_rate"], batch_norm=bn))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing array {exc}") from exc
    model = MlpModel(layers=layers, mode=descriptor.get("mode", "eval"))
    for layer, spec in zip(model.layers, descriptor["arch"]):
        if (layer.in_dim, layer.out_dim) != (spec["in"], spec["out"]):
            raise CheckpointError("checkpoint arrays disagree with architecture descriptor")
    return model
