"""Trainable dictionary networks (residual MLP and neural ODE) with hand-written
reverse-mode gradients, plus the Adam optimizer.

All networks use the row convention: a batch ``X`` has shape ``(n, d)`` and an
affine map is ``X @ W + b`` with ``W`` of shape ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .odeint import IntegratorConfig, adjoint_backward, dopri54

_ids = itertools.count()

INIT_SCALES = ("inverse", "literal")


class StaleRecordError(ValueError):
    pass


@dataclass
class ForwardRecord:
    network_id: int
    version: int
    cache: dict


def _uniform(rng, shape, width, init_scale):
    if init_scale == "inverse":
        bound = 1.0 / np.sqrt(width)
    elif init_scale == "literal":
        bound = np.sqrt(width)
    else:
        raise ValueError(f"init_scale must be one of {INIT_SCALES}, got {init_scale!r}")
    return rng.uniform(-bound, bound, size=shape)


def _fan(fan_in, width, init_scale):
    # the inverse scale follows the fan-in of each map; only the input map differs from width
    return fan_in if init_scale == "inverse" else width


def _as_batch(x, d):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"expected input of dimension {d}, got shape {x.shape}")
    return x


class DictionaryNetwork:
    """Common parameter bookkeeping for the trainable part of a dictionary."""

    kind: str = ""

    def __init__(self, d: int, n_outputs: int, params: dict[str, np.ndarray]):
        self.d = d
        self.n_outputs = n_outputs
        self.params = params
        self._id = next(_ids)
        self._version = 0

    # -- parameters ------------------------------------------------------
    @property
    def param_names(self) -> list[str]:
        return list(self.params)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for name, value in params.items():
            if name not in self.params:
                raise KeyError(name)
            value = np.asarray(value, dtype=float)
            if value.shape != self.params[name].shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} != {self.params[name].shape}")
            self.params[name] = value.copy()
        self._version += 1
        self._on_params_changed()

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {flat.size}")
        out, i = {}, 0
        for name, p in self.params.items():
            out[name] = flat[i:i + p.size].reshape(p.shape)
            i += p.size
        self.set_params(out)

    def _on_params_changed(self) -> None:
        pass

    def _record(self, cache) -> ForwardRecord:
        return ForwardRecord(self._id, self._version, cache)

    def slice_record(self, record: ForwardRecord, rows) -> ForwardRecord:
        """Restrict a forward record to a subset of batch rows."""
        self._check_record(record)
        cache = {k: ([a[rows] for a in v] if isinstance(v, list) else v[rows]) for k, v in record.cache.items()}
        return ForwardRecord(record.network_id, record.version, cache)

    def _check_record(self, record: ForwardRecord) -> None:
        if record.network_id != self._id or record.version != self._version:
            raise StaleRecordError("forward record does not match the current network parameters")

    # -- (de)serialization -----------------------------------------------
    def architecture(self) -> dict[str, Any]:
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        return {
            "architecture": self.architecture(),
            "params": {k: v.ravel().tolist() for k, v in self.params.items()},
        }

    @staticmethod
    def from_dict(doc: dict[str, Any]) -> "DictionaryNetwork":
        arch = dict(doc["architecture"])
        kind = arch.pop("kind")
        if kind == "mlp":
            net = init_mlp(arch["d"], arch["width"], arch["hidden_depth"], arch["m_trainable"], seed=0)
        elif kind == "node":
            integ = IntegratorConfig(**arch.get("integrator", {}))
            net = init_node(arch["d"], arch["width"], arch["field_width"], arch["m_trainable"], seed=0,
                            time_span=tuple(arch.get("time_span", (0.0, 1.0))), integrator=integ,
                            per_row=arch.get("per_row", False))
        else:
            raise ValueError(f"unknown network kind {kind!r}")
        net.set_params({k: np.asarray(v, dtype=float).reshape(net.params[k].shape)
                        for k, v in doc["params"].items()})
        return net

    def forward(self, x) -> tuple[np.ndarray, ForwardRecord]:
        raise NotImplementedError

    def backward(self, record: ForwardRecord, grad_outputs) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]


class MLPDictionary(DictionaryNetwork):
    """Residual MLP: input affine, ``h <- h + tanh(h W_t + b_t)`` blocks, output affine."""

    kind = "mlp"

    def __init__(self, d, width, hidden_depth, params):
        super().__init__(d, params["output.W"].shape[1], params)
        self.width = width
        self.hidden_depth = hidden_depth

    @property
    def n_blocks(self) -> int:
        return self.hidden_depth - 1

    def architecture(self):
        return {"kind": "mlp", "d": self.d, "width": self.width, "hidden_depth": self.hidden_depth,
                "m_trainable": self.n_outputs}

    def forward(self, x):
        x = _as_batch(x, self.d)
        p = self.params
        h = x @ p["input.W"] + p["input.b"]
        hs, acts = [h], []
        for t in range(self.n_blocks):
            a = np.tanh(h @ p[f"block{t}.W"] + p[f"block{t}.b"])
            h = h + a
            hs.append(h)
            acts.append(a)
        out = h @ p["output.W"] + p["output.b"]
        return out, self._record({"x": x, "hs": hs, "acts": acts})

    def backward(self, record, grad_outputs):
        self._check_record(record)
        p = self.params
        hs, acts, x = record.cache["hs"], record.cache["acts"], record.cache["x"]
        g = np.asarray(grad_outputs, dtype=float).reshape(x.shape[0], self.n_outputs)
        grads = {"output.W": hs[-1].T @ g, "output.b": g.sum(axis=0)}
        gh = g @ p["output.W"].T
        for t in reversed(range(self.n_blocks)):
            gz = gh * (1.0 - acts[t] ** 2)
            grads[f"block{t}.W"] = hs[t].T @ gz
            grads[f"block{t}.b"] = gz.sum(axis=0)
            gh = gh + gz @ p[f"block{t}.W"].T
        grads["input.W"] = x.T @ gh
        grads["input.b"] = gh.sum(axis=0)
        return {k: grads[k] for k in p}


def init_mlp(d: int, width: int, hidden_depth: int, m_trainable: int, seed: int,
             init_scale: str = "inverse") -> MLPDictionary:
    """``hidden_depth`` hidden states, i.e. ``hidden_depth - 1`` residual blocks."""
    for name, v in (("d", d), ("width", width), ("hidden_depth", hidden_depth), ("m_trainable", m_trainable)):
        if int(v) <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    rng = np.random.default_rng(seed)
    params = {
        "input.W": _uniform(rng, (d, width), _fan(d, width, init_scale), init_scale),
        "input.b": _uniform(rng, (width,), _fan(d, width, init_scale), init_scale),
    }
    for t in range(hidden_depth - 1):
        params[f"block{t}.W"] = _uniform(rng, (width, width), width, init_scale)
        params[f"block{t}.b"] = _uniform(rng, (width,), width, init_scale)
    params["output.W"] = _uniform(rng, (width, m_trainable), width, init_scale)
    params["output.b"] = _uniform(rng, (m_trainable,), width, init_scale)
    return MLPDictionary(d, width, hidden_depth, params)


class NodeField:
    """Autonomous field ``f(h) = tanh(tanh(h W1) W2) W3`` (bias-free)."""

    def __init__(self, w1, w2, w3):
        self.w1, self.w2, self.w3 = w1, w2, w3

    @property
    def n_params(self) -> int:
        return self.w1.size + self.w2.size + self.w3.size

    def __call__(self, t, h):
        return np.tanh(np.tanh(h @ self.w1) @ self.w2) @ self.w3

    def vjp(self, t, h, a):
        a1 = np.tanh(h @ self.w1)
        a2 = np.tanh(a1 @ self.w2)
        gz2 = (a @ self.w3.T) * (1.0 - a2 * a2)
        gz1 = (gz2 @ self.w2.T) * (1.0 - a1 * a1)
        gp = np.concatenate([(h.T @ gz1).ravel(), (a1.T @ gz2).ravel(), (a2.T @ a).ravel()])
        return gz1 @ self.w1.T, gp


class NODEDictionary(DictionaryNetwork):
    """Neural-ODE dictionary: input affine gives ``h(t_s)``, the field is integrated
    to ``t_e`` with Dormand-Prince, output affine reads ``h(t_e)``."""

    kind = "node"

    def __init__(self, d, width, field_width, params, time_span=(0.0, 1.0),
                 integrator: IntegratorConfig | None = None, per_row: bool = False):
        super().__init__(d, params["output.W"].shape[1], params)
        self.width = width
        self.field_width = field_width
        self.time_span = (float(time_span[0]), float(time_span[1]))
        self.integrator = integrator or IntegratorConfig()
        self.per_row = per_row
        self._on_params_changed()

    def _on_params_changed(self):
        self.field = NodeField(self.params["field.W1"], self.params["field.W2"], self.params["field.W3"])

    def architecture(self):
        ic = self.integrator
        return {"kind": "node", "d": self.d, "width": self.width, "field_width": self.field_width,
                "m_trainable": self.n_outputs, "time_span": list(self.time_span), "per_row": self.per_row,
                "integrator": {"abs_tol": ic.abs_tol, "rel_tol": ic.rel_tol, "initial_step": ic.initial_step,
                               "max_steps": ic.max_steps}}

    def forward(self, x):
        x = _as_batch(x, self.d)
        p = self.params
        h0 = x @ p["input.W"] + p["input.b"]
        ts, te = self.time_span
        h_end = dopri54(self.field, h0, ts, te, self.integrator, per_row=self.per_row)
        out = h_end @ p["output.W"] + p["output.b"]
        # only h(t_e) is kept; the adjoint pass reconstructs h(t) backward
        return out, self._record({"x": x, "h_end": h_end})

    def backward(self, record, grad_outputs):
        self._check_record(record)
        p = self.params
        x, h_end = record.cache["x"], record.cache["h_end"]
        g = np.asarray(grad_outputs, dtype=float).reshape(x.shape[0], self.n_outputs)
        grads = {"output.W": h_end.T @ g, "output.b": g.sum(axis=0)}
        ts, te = self.time_span
        g_field, a0 = adjoint_backward(self.field, h_end, g @ p["output.W"].T, ts, te, self.integrator)
        w1, w2 = p["field.W1"].size, p["field.W2"].size
        grads["field.W1"] = g_field[:w1].reshape(p["field.W1"].shape)
        grads["field.W2"] = g_field[w1:w1 + w2].reshape(p["field.W2"].shape)
        grads["field.W3"] = g_field[w1 + w2:].reshape(p["field.W3"].shape)
        grads["input.W"] = x.T @ a0
        grads["input.b"] = a0.sum(axis=0)
        return {k: grads[k] for k in p}


def init_node(d: int, width: int, field_width: int, m_trainable: int, seed: int,
              time_span=(0.0, 1.0), integrator: IntegratorConfig | None = None,
              init_scale: str = "inverse", field_std: float = 0.1, per_row: bool = False) -> NODEDictionary:
    """Field weights are i.i.d. ``N(0, field_std**2)``; affine maps use the MLP uniform init."""
    for name, v in (("d", d), ("width", width), ("field_width", field_width), ("m_trainable", m_trainable)):
        if int(v) <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    rng = np.random.default_rng(seed)
    params = {
        "input.W": _uniform(rng, (d, width), _fan(d, width, init_scale), init_scale),
        "input.b": _uniform(rng, (width,), _fan(d, width, init_scale), init_scale),
        "field.W1": rng.normal(0.0, field_std, size=(width, field_width)),
        "field.W2": rng.normal(0.0, field_std, size=(field_width, field_width)),
        "field.W3": rng.normal(0.0, field_std, size=(field_width, width)),
        "output.W": _uniform(rng, (width, m_trainable), width, init_scale),
        "output.b": _uniform(rng, (m_trainable,), width, init_scale),
    }
    return NODEDictionary(d, width, field_width, params, time_span, integrator, per_row)


def count_parameters(net: DictionaryNetwork) -> int:
    return net.n_params


def mlp_parameter_count(d: int, width: int, hidden_depth: int, m_trainable: int) -> int:
    return (d + 1) * width + (hidden_depth - 1) * (width * width + width) + (width + 1) * m_trainable


def node_parameter_count(d: int, width: int, field_width: int, m_trainable: int) -> int:
    if field_width <= 0:
        raise ValueError("field_width must be positive")
    return (d + 1) * width + 2 * width * field_width + field_width ** 2 + (width + 1) * m_trainable


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              learning_rate: float = 1e-3, beta1: float = BETA1, beta2: float = BETA2,
              eps: float = ADAM_EPS) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    t = state.step_count + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=float)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.first_moment.get(name, np.zeros_like(p))
        v = state.second_moment.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[name] = p - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)
