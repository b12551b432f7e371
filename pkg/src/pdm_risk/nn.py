"""Stacked LSTM sequence labeler in plain numpy, with hand-written BPTT.

Layout per layer ``l``: ``lstm{l}.W`` is (4H, in + H) with gate rows ordered
input, forget, cell candidate, output and columns ordered ``[x_t; h_{t-1}]``;
``lstm{l}.b`` is (4H,). Each LSTM layer is followed by batch normalization over
the batch*time axis (``bn{l}.gamma``/``bn{l}.beta``) and inverted dropout. The
head ``head.W`` (H, C) / ``head.b`` maps every timestep to class logits.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .data_model import N_CLASSES, WINDOW_LEN, PredictionSet, Window
from .errors import ConfigError, ContractError, NumericError

GATES = ("input", "forget", "cell", "output")
# desk-scale overrides of the published settings: width 400 is far too slow in numpy on a CPU,
# and at width 32 a 0.5 dropout on every layer leaves the deep stacks underfit after 30 epochs
DESK_MODEL = {"hidden_size": 32, "dropout_rate": 0.2, "epochs": 45, "dtype": "float32"}
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    hidden_size: int = 400
    input_size: int = 304
    n_classes: int = N_CLASSES
    dropout_rate: float = 0.5
    l2_lambda: float = 0.0002
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    clip_norm: float | None = None
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("n_layers", "hidden_size", "input_size", "batch_size", "epochs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_classes != N_CLASSES:
            raise ConfigError(f"n_classes must be {N_CLASSES}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.l2_lambda < 0 or self.learning_rate <= 0:
            raise ConfigError("l2_lambda must be >= 0 and learning_rate > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("Adam betas must lie in [0, 1) and eps > 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive when set")
        if not 0 <= self.bn_momentum < 1 or self.bn_eps <= 0:
            raise ConfigError("bn_momentum must lie in [0, 1) and bn_eps > 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be 'float32' or 'float64'")

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})


class LstmModel:
    """Parameters, batch-norm running statistics and Adam state of one network."""

    def __init__(self, config: ModelConfig, params: dict, running: dict):
        self.config = config
        self.params = params
        self.running = running
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0
        self.training = False

    @property
    def weight_names(self) -> list[str]:
        """Parameters under the L2 penalty: LSTM and head weight matrices."""
        return [k for k in self.params if k.endswith(".W")]

    def gate(self, layer: int, name: str) -> np.ndarray:
        h = self.config.hidden_size
        k = GATES.index(name)
        return self.params[f"lstm{layer}.W"][k * h:(k + 1) * h]

    def gate_bias(self, layer: int, name: str) -> np.ndarray:
        h = self.config.hidden_size
        k = GATES.index(name)
        return self.params[f"lstm{layer}.b"][k * h:(k + 1) * h]

    def copy(self) -> "LstmModel":
        other = LstmModel(self.config, {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.running.items()})
        other.m = {k: v.copy() for k, v in self.m.items()}
        other.v = {k: v.copy() for k, v in self.v.items()}
        other.step = self.step
        return other


def init(config: ModelConfig, rng: np.random.Generator | int | None = None) -> LstmModel:
    rng = np.random.default_rng(config.seed if rng is None else rng)
    h, c = config.hidden_size, config.n_classes
    bound = 1.0 / np.sqrt(h)
    params, running = {}, {}
    n_in = config.input_size
    for l in range(config.n_layers):
        params[f"lstm{l}.W"] = rng.uniform(-bound, bound, size=(4 * h, n_in + h))
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        params[f"lstm{l}.b"] = b
        params[f"bn{l}.gamma"] = np.ones(h)
        params[f"bn{l}.beta"] = np.zeros(h)
        running[f"bn{l}.mean"] = np.zeros(h)
        running[f"bn{l}.var"] = np.ones(h)
        n_in = h
    params["head.W"] = rng.uniform(-bound, bound, size=(h, c))
    params["head.b"] = np.zeros(c)
    dt = np.dtype(config.dtype)
    params = {k: v.astype(dt) for k, v in params.items()}
    running = {k: v.astype(dt) for k, v in running.items()}
    return LstmModel(config, params, running)


def _gate_affine(h: int):
    # sigmoid(z) = 0.5 * (1 + tanh(z / 2)) lets one tanh call cover all four gates
    scale = np.full(4 * h, 0.5)
    scale[2 * h:3 * h] = 1.0
    shift = np.full(4 * h, 0.5)
    shift[2 * h:3 * h] = 0.0
    return scale, shift


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model: LstmModel, x: np.ndarray, training: bool, rng: np.random.Generator | None = None,
            update_running: bool = False):
    """Return ``(logits, cache)`` for a batch ``x`` of shape (B, T, F).

    In training mode batch norm uses batch statistics and dropout draws masks
    from ``rng``; otherwise running statistics are used and dropout is off.
    ``update_running`` folds the batch statistics into the running estimates.
    Activations are kept time-major, (T, B, ...), so per-step slices are contiguous.
    """
    cfg = model.config
    dt = np.dtype(cfg.dtype)
    x = np.asarray(x, dtype=dt)
    if x.ndim != 3 or x.shape[2] != cfg.input_size:
        raise ContractError(f"expected input (B, T, {cfg.input_size}), got {x.shape}")
    b_sz, t_len, _ = x.shape
    h = cfg.hidden_size
    p = cfg.dropout_rate if training else 0.0
    if p > 0 and rng is None:
        raise ContractError("training-mode forward with dropout needs an rng")
    scale, shift = (v.astype(dt) for v in _gate_affine(h))
    layers = []
    inp = np.ascontiguousarray(x.transpose(1, 0, 2))
    for l in range(cfg.n_layers):
        W = model.params[f"lstm{l}.W"]
        n_in = inp.shape[2]
        # gate scaling folded into the weights: z * scale = inp @ (Wx.T * scale) + ...
        zs = inp @ (W[:, :n_in].T * scale) + model.params[f"lstm{l}.b"] * scale
        WhT = np.ascontiguousarray(W[:, n_in:].T * scale)
        acts = np.empty((t_len, b_sz, 4 * h), dt)
        cs = np.empty((t_len, b_sz, h), dt)
        tcs = np.empty((t_len, b_sz, h), dt)
        hs = np.empty((t_len, b_sz, h), dt)
        h_t = np.zeros((b_sz, h), dt)
        c_t = np.zeros((b_sz, h), dt)
        for t in range(t_len):
            z = zs[t]
            z += h_t @ WhT
            a = np.tanh(z, out=acts[t])
            a *= scale
            a += shift
            c_t = np.multiply(a[:, h:2 * h], c_t, out=cs[t])
            c_t += a[:, :h] * a[:, 2 * h:3 * h]
            h_t = np.multiply(a[:, 3 * h:], np.tanh(c_t, out=tcs[t]), out=hs[t])
        if not np.isfinite(hs).all():
            bad_t = int(np.flatnonzero(~np.isfinite(hs).all(axis=(1, 2)))[0])
            raise NumericError(f"non-finite activation in layer {l} at timestep {bad_t}")

        flat = hs.reshape(-1, h)
        gamma, beta = model.params[f"bn{l}.gamma"], model.params[f"bn{l}.beta"]
        batch_stats = training
        if batch_stats:
            mu = flat.mean(axis=0)
            var = flat.var(axis=0)
            if update_running:
                mom = cfg.bn_momentum
                model.running[f"bn{l}.mean"] = mom * model.running[f"bn{l}.mean"] + (1 - mom) * mu
                model.running[f"bn{l}.var"] = mom * model.running[f"bn{l}.var"] + (1 - mom) * var
        else:
            mu, var = model.running[f"bn{l}.mean"], model.running[f"bn{l}.var"]
        inv_std = 1.0 / np.sqrt(var + cfg.bn_eps)
        xhat = (flat - mu) * inv_std
        y = (xhat * gamma + beta).reshape(t_len, b_sz, h)
        mask = None
        if p > 0:
            mask = ((rng.random(y.shape) >= p) / (1.0 - p)).astype(dt)
            y = y * mask
        layers.append({"inp": inp, "acts": acts, "cs": cs, "tcs": tcs, "hs": hs, "xhat": xhat,
                       "inv_std": inv_std, "batch_stats": batch_stats, "mask": mask})
        inp = y
    logits = (inp @ model.params["head.W"] + model.params["head.b"]).transpose(1, 0, 2)
    cache = {"x": x, "layers": layers, "top": inp, "logits": logits}
    return logits, cache


def _check_targets(targets: np.ndarray, n_classes: int) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes or not np.issubdtype(targets.dtype, np.integer)):
        raise ContractError(f"targets must be class indices in 0..{n_classes - 1}")
    return targets.astype(np.int64)


def _position_weights(targets: np.ndarray, weights) -> np.ndarray:
    """Per-position loss weights normalized so they sum to 1 (plain mean when all equal)."""
    b_sz, t_len = targets.shape
    w = np.ones(b_sz) if weights is None else np.asarray(weights, dtype=np.float64)
    return np.repeat((w / (w.sum() * t_len))[:, None], t_len, axis=1)


def l2_penalty(model: LstmModel, l2_lambda: float) -> float:
    return float(l2_lambda * sum(np.sum(model.params[k] ** 2) for k in model.weight_names))


def loss(logits: np.ndarray, targets: np.ndarray, model: LstmModel, l2_lambda: float, weights=None) -> float:
    """Mean sparse categorical cross-entropy plus ``l2_lambda * sum(W**2)`` over weight matrices."""
    targets = _check_targets(targets, logits.shape[-1])
    if targets.shape != logits.shape[:2]:
        raise ContractError(f"targets {targets.shape} do not match logits {logits.shape[:2]}")
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    data = float(np.sum(nll * _position_weights(targets, weights)))
    return data + l2_penalty(model, l2_lambda)


def backward(model: LstmModel, cache: dict, targets: np.ndarray, weights=None) -> dict[str, np.ndarray]:
    """Exact gradient of :func:`loss` (with the model's ``l2_lambda``) for the cached batch."""
    cfg = model.config
    logits = cache["logits"]
    targets = _check_targets(targets, cfg.n_classes)
    if targets.shape != logits.shape[:2]:
        raise ContractError(f"targets {targets.shape} do not match cached batch {logits.shape[:2]}")
    h = cfg.hidden_size
    b_sz, t_len = targets.shape
    grads: dict[str, np.ndarray] = {}

    dlogits = softmax(logits)
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], -1) - 1.0, -1)
    dt = np.dtype(cfg.dtype)
    dlogits *= _position_weights(targets, weights)[..., None].astype(dt)
    dlogits = np.ascontiguousarray(dlogits.transpose(1, 0, 2))  # time-major like the cache
    top = cache["top"].reshape(-1, h)
    d2 = dlogits.reshape(-1, cfg.n_classes)
    grads["head.W"] = top.T @ d2
    grads["head.b"] = d2.sum(axis=0)
    dy = dlogits @ model.params["head.W"].T

    for l in reversed(range(cfg.n_layers)):
        lc = cache["layers"][l]
        if lc["mask"] is not None:
            dy = dy * lc["mask"]
        dflat = dy.reshape(-1, h)
        xhat, inv_std = lc["xhat"], lc["inv_std"]
        gamma = model.params[f"bn{l}.gamma"]
        grads[f"bn{l}.gamma"] = (dflat * xhat).sum(axis=0)
        grads[f"bn{l}.beta"] = dflat.sum(axis=0)
        dxhat = dflat * gamma
        if lc["batch_stats"]:
            n = dflat.shape[0]
            dh_flat = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dh_flat = dxhat * inv_std
        dhs = dh_flat.reshape(t_len, b_sz, h)

        acts, cs, tcs, hs, inp = lc["acts"], lc["cs"], lc["tcs"], lc["hs"], lc["inp"]
        n_in = inp.shape[2]
        W = model.params[f"lstm{l}.W"]
        Wh = np.ascontiguousarray(W[:, n_in:])
        # d(activation)/d(preactivation): sigmoid' = a(1-a), tanh' = 1-a^2
        deriv = acts * (1.0 - acts)
        g = acts[..., 2 * h:3 * h]
        deriv[..., 2 * h:3 * h] = 1.0 - g * g
        # per-step factors that do not depend on the incoming gradient
        c_prev = np.concatenate([np.zeros((1, b_sz, h), dt), cs[:-1]])
        partner = np.concatenate([g, c_prev, acts[..., :h]], axis=-1).reshape(t_len, b_sz, 3, h)
        dc_from_h = acts[..., 3 * h:] * (1.0 - tcs * tcs)
        forget = acts[..., h:2 * h]
        dz = np.empty_like(acts)
        dz4 = dz.reshape(t_len, b_sz, 4, h)
        dh_next = np.zeros((b_sz, h), dt)
        dc = np.zeros((b_sz, h), dt)
        for t in reversed(range(t_len)):
            dh = dhs[t] + dh_next
            dc *= forget[t + 1] if t + 1 < t_len else 0.0
            dc += dh * dc_from_h[t]
            dzt = dz[t]
            np.multiply(partner[t], dc[:, None, :], out=dz4[t, :, :3])
            np.multiply(dh, tcs[t], out=dzt[:, 3 * h:])
            dzt *= deriv[t]
            dh_next = dzt @ Wh
        dz_flat = dz.reshape(-1, 4 * h)
        h_prev = np.concatenate([np.zeros((1, b_sz, h), dt), hs[:-1]]).reshape(-1, h)
        dW = np.empty_like(W)
        dW[:, :n_in] = dz_flat.T @ inp.reshape(-1, n_in)
        dW[:, n_in:] = dz_flat.T @ h_prev
        grads[f"lstm{l}.W"] = dW
        grads[f"lstm{l}.b"] = dz_flat.sum(axis=0)
        dy = dz @ W[:, :n_in]

    lam = cfg.l2_lambda
    if lam:
        for k in model.weight_names:
            grads[k] = grads[k] + 2.0 * lam * model.params[k]
    return {k: grads[k] for k in model.params}


def adam_step(model: LstmModel, grads: dict[str, np.ndarray]) -> LstmModel:
    cfg = model.config
    for k, g in grads.items():
        if g.shape != model.params[k].shape:
            raise ContractError(f"gradient {k} has shape {g.shape}, expected {model.params[k].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {k}")
    if cfg.clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > cfg.clip_norm:
            grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
    model.step += 1
    b1, b2, t = cfg.adam_beta1, cfg.adam_beta2, model.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k, g in grads.items():
        m = model.m[k]
        v = model.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        model.params[k] -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return model


def stack_windows(windows: Sequence[Window], labelled: bool = True):
    x = np.stack([w.features for w in windows])
    if not labelled:
        return x
    if any(w.labels is None for w in windows):
        raise ContractError("training windows must carry labels")
    y = np.stack([w.labels for w in windows])
    wt = np.array([w.weight for w in windows], dtype=np.float64)
    return x, y, wt


def train(model: LstmModel, windows: Sequence[Window], config: ModelConfig | None = None):
    """Mini-batch Adam training; returns ``(model, per-epoch mean batch loss)``."""
    cfg = config or model.config
    if not windows:
        raise ContractError("need at least one training window")
    x, y, wt = stack_windows(windows)
    if x.shape[2] != model.config.input_size:
        raise ContractError(f"windows have {x.shape[2]} features, model expects {model.config.input_size}")
    uniform = bool(np.all(wt == wt[0]))
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    n = x.shape[0]
    model.training = True
    trace = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total, n_batches = 0.0, 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            bw = None if uniform else wt[idx]
            try:
                logits, cache = forward(model, x[idx], True, drop_rng, update_running=True)
                total += loss(logits, y[idx], model, cfg.l2_lambda, bw)
                adam_step(model, backward(model, cache, y[idx], bw))
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {bi}: {exc}") from exc
            n_batches += 1
        trace.append(total / n_batches)
    model.training = False
    return model, trace


def predict(model: LstmModel, windows: Sequence[Window], chunk: int = 512) -> PredictionSet:
    if not windows:
        return PredictionSet((), np.zeros((0, WINDOW_LEN), np.int64), np.zeros((0, WINDOW_LEN, N_CLASSES)))
    x = stack_windows(windows, labelled=False)
    if x.shape[2] != model.config.input_size:
        raise ContractError(f"windows have {x.shape[2]} features, model expects {model.config.input_size}")
    probs = np.concatenate([softmax(forward(model, x[i:i + chunk], False)[0].astype(np.float64)) for i in range(0, len(x), chunk)])
    return PredictionSet(tuple(w.key for w in windows), probs.argmax(axis=-1), probs)


def save_checkpoint(model: LstmModel, path) -> None:
    arrays = {"format_version": np.array(CHECKPOINT_VERSION), "step": np.array(model.step),
              "config": np.array(json.dumps(asdict(model.config), sort_keys=True))}
    # tensors are always stored as float64; float32 values widen exactly
    for k, v in model.params.items():
        arrays[f"param/{k}"] = v.astype(np.float64)
        arrays[f"m/{k}"] = model.m[k].astype(np.float64)
        arrays[f"v/{k}"] = model.v[k].astype(np.float64)
    for k, v in model.running.items():
        arrays[f"running/{k}"] = v.astype(np.float64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, expected: ModelConfig | None = None) -> LstmModel:
    with np.load(path, allow_pickle=False) as z:
        if int(z["format_version"]) != CHECKPOINT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {int(z['format_version'])}")
        raw = json.loads(str(z["config"]))
        known = {f.name for f in fields(ModelConfig)}
        cfg = ModelConfig(**{k: v for k, v in raw.items() if k in known})
        if expected is not None and expected != cfg:
            diff = {k: (getattr(cfg, k), getattr(expected, k)) for k in known if getattr(cfg, k) != getattr(expected, k)}
            raise ContractError(f"{path}: checkpoint config does not match (stored, expected): {diff}")
        model = init(cfg, 0)
        for k in model.params:
            for store, prefix in ((model.params, "param"), (model.m, "m"), (model.v, "v")):
                arr = z[f"{prefix}/{k}"]
                if arr.shape != store[k].shape:
                    raise ContractError(f"{path}: tensor {prefix}/{k} has shape {arr.shape}, expected {store[k].shape}")
                store[k] = arr.astype(cfg.dtype)
        for k in model.running:
            model.running[k] = z[f"running/{k}"].astype(cfg.dtype)
        model.step = int(z["step"])
    return model
