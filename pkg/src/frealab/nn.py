"""Dense ReLU networks with hand-written backprop, Adam and target blending.

Everything is float64.  The forward pass uses ``einsum`` without BLAS so a
row's output never depends on how many rows share the batch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-5


@dataclass
class MlpParams:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        sizes = list(self.layer_sizes)
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("need one weight matrix and bias per layer transition")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ValueError(f"layer {i}: expected W{(sizes[i], sizes[i + 1])}, got {w.shape} / {b.shape}")

    @classmethod
    def init(cls, layer_sizes, rng: np.random.Generator, output_gain: float = 1.0, hidden_gain: float = np.sqrt(2)):
        """Orthogonal weights (gain sqrt(2) hidden, ``output_gain`` last), zero biases."""
        weights, biases = [], []
        n = len(layer_sizes) - 1
        for i in range(n):
            gain = output_gain if i == n - 1 else hidden_gain
            weights.append(_orthogonal(layer_sizes[i], layer_sizes[i + 1], gain, rng))
            biases.append(np.zeros(layer_sizes[i + 1]))
        return cls(list(layer_sizes), weights, biases)

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.layer_sizes), [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams(list(self.layer_sizes), [np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def map(self, fn, *others: "MlpParams") -> "MlpParams":
        ws = [fn(w, *(o.weights[i] for o in others)) for i, w in enumerate(self.weights)]
        bs = [fn(b, *(o.biases[i] for o in others)) for i, b in enumerate(self.biases)]
        return MlpParams(list(self.layer_sizes), ws, bs)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def _orthogonal(n_in: int, n_out: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def _matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("ij,jk->ik", x, w, optimize=False)


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"invalid input shape {x.shape}; expected (*, {params.layer_sizes[0]})")
    return x, single


def forward_cached(params: MlpParams, x) -> tuple[np.ndarray, list[np.ndarray]]:
    x, _ = _as_batch(params, x)
    acts = [x]
    n = len(params.weights)
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = _matmul(h, w) + b
        if i < n - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def forward(params: MlpParams, x) -> np.ndarray:
    """Affine + ReLU hidden layers, identity output.  Accepts (d,) or (n, d)."""
    x, single = _as_batch(params, x)
    out, _ = forward_cached(params, x)
    return out[0] if single else out


def backward(params: MlpParams, x, upstream, cache=None) -> MlpParams:
    """Reverse-mode gradients of ``sum(upstream * forward(x))`` w.r.t. all parameters."""
    x, single = _as_batch(params, x)
    g = np.asarray(upstream, dtype=float)
    if single and g.ndim == 1:
        g = g[None, :]
    if g.shape != (x.shape[0], params.layer_sizes[-1]):
        raise ValueError(f"upstream gradient shape {g.shape} does not match output ({x.shape[0]}, {params.layer_sizes[-1]})")
    if cache is None:
        _, cache = forward_cached(params, x)
    gw, gb = [], []
    for i in range(len(params.weights) - 1, -1, -1):
        a_in = cache[i]
        gw.append(a_in.T @ g)
        gb.append(g.sum(axis=0))
        if i > 0:
            g = (g @ params.weights[i].T) * (cache[i] > 0.0)
    return MlpParams(list(params.layer_sizes), gw[::-1], gb[::-1])


def input_gradient(params: MlpParams, x, upstream) -> np.ndarray:
    x, single = _as_batch(params, x)
    g = np.atleast_2d(np.asarray(upstream, dtype=float))
    _, cache = forward_cached(params, x)
    for i in range(len(params.weights) - 1, -1, -1):
        g = g @ params.weights[i].T
        if i > 0:
            g = g * (cache[i] > 0.0)
    return g[0] if single else g


@dataclass
class OptimizerState:
    base_lr: float
    total_steps: int
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_params(cls, params, base_lr: float = 3e-4, total_steps: int = 1_000_000, **kw):
        arrays = params.arrays() if isinstance(params, MlpParams) else list(params)
        return cls(base_lr, total_steps, [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def linear_lr(opt: OptimizerState) -> float:
    """Linearly annealed learning rate, reaching 0 at ``total_steps``."""
    return max(0.0, opt.base_lr * (1.0 - opt.step / opt.total_steps))


def adam_update(opt: OptimizerState, arrays: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """Adam on a flat list of arrays; mutates ``opt`` and returns the new arrays."""
    if len(grads) != len(arrays) or any(g.shape != p.shape for g, p in zip(grads, arrays)):
        raise ValueError("gradient shapes do not match parameters")
    if len(opt.m) != len(arrays):
        raise ValueError("optimizer state does not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise FloatingPointError("non-finite gradient; step rejected")
    lr = linear_lr(opt)
    t = opt.step + 1
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    new = []
    for k, (p, g) in enumerate(zip(arrays, grads)):
        opt.m[k] = opt.beta1 * opt.m[k] + (1.0 - opt.beta1) * g
        opt.v[k] = opt.beta2 * opt.v[k] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[k] / c1
        v_hat = opt.v[k] / c2
        new.append(p - lr * m_hat / (np.sqrt(v_hat) + opt.eps))
    opt.step = t
    return new


def adam_step(opt: OptimizerState, params: MlpParams, grads: MlpParams) -> MlpParams:
    """One Adam update; mutates ``opt`` and returns new parameters."""
    new = adam_update(opt, params.arrays(), grads.arrays())
    return MlpParams(list(params.layer_sizes), new[0::2], new[1::2])


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm <= 0 or not np.isfinite(norm) or norm <= max_norm:
        return grads, norm
    f = max_norm / norm
    return [g * f for g in grads], norm


def soft_update(target: MlpParams, online: MlpParams, rho: float) -> MlpParams:
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if target.layer_sizes != online.layer_sizes:
        raise ValueError("target and online networks differ in shape")
    return target.map(lambda t, o: (1.0 - rho) * t + rho * o, online)


# ------------------------------------------------------------ checkpoints

CHECKPOINT_VERSION = 1


def _pack_params(prefix: str, p: MlpParams, arrays: dict) -> dict:
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        arrays[f"{prefix}/W{i}"] = w
        arrays[f"{prefix}/b{i}"] = b
    return {"layer_sizes": list(p.layer_sizes)}


def _unpack_params(prefix: str, meta: dict, arrays) -> MlpParams:
    n = len(meta["layer_sizes"]) - 1
    return MlpParams(
        list(meta["layer_sizes"]),
        [np.array(arrays[f"{prefix}/W{i}"]) for i in range(n)],
        [np.array(arrays[f"{prefix}/b{i}"]) for i in range(n)],
    )


def save_checkpoint(path, nets: dict[str, MlpParams], optimizers: dict[str, OptimizerState] | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    """Write a versioned ``.npz`` holding networks, optimizer moments and JSON metadata."""
    arrays: dict[str, np.ndarray] = {}
    header = {"version": CHECKPOINT_VERSION, "nets": {}, "optimizers": {}, "meta": meta or {}}
    for name, p in nets.items():
        header["nets"][name] = _pack_params(f"net:{name}", p, arrays)
    for name, opt in (optimizers or {}).items():
        header["optimizers"][name] = {
            "base_lr": opt.base_lr, "total_steps": opt.total_steps, "step": opt.step,
            "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "n": len(opt.m),
        }
        for k, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"opt:{name}/m{k}"] = m
            arrays[f"opt:{name}/v{k}"] = v
    for name, a in (extra_arrays or {}).items():
        arrays[f"extra:{name}"] = np.asarray(a)
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        nets = {name: _unpack_params(f"net:{name}", m, data) for name, m in header["nets"].items()}
        opts = {}
        for name, m in header["optimizers"].items():
            opts[name] = OptimizerState(
                m["base_lr"], m["total_steps"],
                [np.array(data[f"opt:{name}/m{k}"]) for k in range(m["n"])],
                [np.array(data[f"opt:{name}/v{k}"]) for k in range(m["n"])],
                m["step"], m["beta1"], m["beta2"], m["eps"],
            )
        extra = {k[len("extra:"):]: np.array(data[k]) for k in data.files if k.startswith("extra:")}
    return {"nets": nets, "optimizers": opts, "extra": extra, "meta": header["meta"]}
