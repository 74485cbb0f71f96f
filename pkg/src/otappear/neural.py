"""Small dense networks with hand-written backprop, a weight-clipped dual
potential for W1 estimation, and the alternating potential/map trainer."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

CKPT_HEADER = "NOTPE-CKPT-1"
ACTIVATIONS = ("relu", "identity")
POTENTIAL_HIDDEN = 64
MAP_HIDDEN = 64


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss or parameters)."""


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).ravel()
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("bias length must equal weight rows")


@dataclass
class SmallDenseNetwork:
    """Fully connected network; parameters live in plain numpy arrays."""

    layers: list[DenseLayer]
    clip_bound: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self):
        for prev, nxt in zip(self.layers[:-1], self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ValueError(
                    f"layer dims do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        if self.clip_bound is not None and self.clip_bound <= 0:
            raise ValueError("clip_bound must be positive")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def clip(self) -> None:
        if self.clip_bound is None:
            return
        for p in self.parameters():
            np.clip(p, -self.clip_bound, self.clip_bound, out=p)

    def max_abs_parameter(self) -> float:
        return max(float(np.abs(p).max()) for p in self.parameters())

    def copy(self) -> "SmallDenseNetwork":
        return SmallDenseNetwork(
            [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            self.clip_bound,
            self.seed,
        )

    def forward(self, x):
        """Batch forward pass. Returns (output, cache) where cache feeds backward()."""
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.input_dim:
            raise ValueError(f"input has {h.shape[-1]} features, network expects {self.input_dim}")
        cache = [h]
        for layer in self.layers:
            z = h @ layer.weight.T + layer.bias
            h = np.maximum(z, 0.0) if layer.activation == "relu" else z
            cache.append(z)
            cache.append(h)
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, grad_out, cache):
        """Reverse-mode pass for a forward() cache.

        Returns (param_grads, grad_input) with param_grads aligned to
        parameters(); gradients are summed over the batch.
        """
        if len(cache) != 2 * len(self.layers) + 1:
            raise ValueError("stale forward cache: layer count differs")
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != cache[-1].shape:
            raise ValueError(f"output gradient shape {g.shape} != output shape {cache[-1].shape}")
        grads: list[np.ndarray] = []
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            h_in, z = cache[2 * k], cache[2 * k + 1]
            if layer.activation == "relu":
                g = g * (z > 0)
            if g.ndim == 1:
                dW = np.outer(g, h_in)
                db = g.copy()
            else:
                dW = g.T @ h_in
                db = g.sum(axis=0)
            grads = [dW, db] + grads
            g = g @ layer.weight
        return grads, g

    def to_dict(self) -> dict:
        return {
            "header": CKPT_HEADER,
            "clip_bound": self.clip_bound,
            "seed": self.seed,
            "layers": [
                {
                    "shape": list(l.weight.shape),
                    "activation": l.activation,
                    "weight": l.weight.ravel().tolist(),
                    "bias": l.bias.tolist(),
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SmallDenseNetwork":
        if d.get("header") != CKPT_HEADER:
            raise ValueError(f"not a {CKPT_HEADER} checkpoint (header={d.get('header')!r})")
        layers = [
            DenseLayer(
                np.asarray(l["weight"], dtype=np.float64).reshape(l["shape"]),
                np.asarray(l["bias"], dtype=np.float64),
                l["activation"],
            )
            for l in d["layers"]
        ]
        return cls(layers, d.get("clip_bound"), d.get("seed"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SmallDenseNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


def network_forward(net: SmallDenseNetwork, x) -> np.ndarray:
    return net.forward(x)[0]


def network_gradients(net: SmallDenseNetwork, loss_gradient_at_output, cache):
    return net.backward(loss_gradient_at_output, cache)


def init_network(
    sizes: list[int],
    rng: np.random.Generator,
    clip_bound: Optional[float] = None,
    last_scale: Optional[float] = None,
    seed: Optional[int] = None,
) -> SmallDenseNetwork:
    """ReLU hidden layers and a linear output layer.

    Clipped networks draw weights uniformly in [-clip, clip] and start with
    zero biases; unclipped ones use He-uniform weights.
    """
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = k == len(sizes) - 2
        bound = clip_bound if clip_bound is not None else np.sqrt(6.0 / fan_in)
        if last and last_scale is not None:
            bound = last_scale
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(DenseLayer(w, np.zeros(fan_out), "identity" if last else "relu"))
    return SmallDenseNetwork(layers, clip_bound, seed)


def lipschitz_clip_bound(hidden: int, input_dim: int) -> float:
    """Clip bound c making a clipped [d -> hidden -> 1] net at most 1-Lipschitz.

    Lip <= sum_k |w2_k| * ||w1_k||_2 <= hidden * c * c * sqrt(d), so
    c = (hidden * sqrt(d)) ** -0.5 gives a bound of exactly 1; in 1-D it is
    attained by a linear ramp.
    """
    return float((hidden * np.sqrt(input_dim)) ** -0.5)


class RMSProp:
    def __init__(self, params: list[np.ndarray], lr: float, decay: float = 0.9, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.sq = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray], ascend: bool = False) -> None:
        sign = 1.0 if ascend else -1.0
        for p, g, s in zip(self.params, grads, self.sq):
            s *= self.decay
            s += (1.0 - self.decay) * g * g
            p += sign * self.lr * g / (np.sqrt(s) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    critic_steps: int = 5
    total_iterations: int = 3000
    batch_size: int = 64
    clip_bound: Optional[float] = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "critic_steps", "total_iterations", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.clip_bound is not None and self.clip_bound <= 0:
            raise ValueError("clip_bound must be positive")

    def resolved_clip(self, input_dim: int) -> float:
        """The configured bound, or the 1-Lipschitz calibration when unset."""
        if self.clip_bound is None:
            return lipschitz_clip_bound(POTENTIAL_HIDDEN, input_dim)
        return self.clip_bound


@dataclass
class Normalizer:
    """Isotropic affine map sending pooled samples into the unit cube around
    their mean; W1 scales linearly so estimates are mapped back exactly."""

    center: np.ndarray
    scale: float

    @classmethod
    def fit(cls, *samples: np.ndarray) -> "Normalizer":
        pooled = np.vstack(samples)
        center = pooled.mean(axis=0)
        scale = float(np.abs(pooled - center).max())
        return cls(center, scale if scale > 0 else 1.0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.center) / self.scale

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return y * self.scale + self.center


@dataclass
class DualPotential:
    """Psi(x) = scale * net((x - center) / scale): same Lipschitz bound as net."""

    net: SmallDenseNetwork
    normalizer: Normalizer

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.net(self.normalizer(x))[:, 0] * self.normalizer.scale

    def dual_value(self, source, target) -> float:
        return float(self(source).mean() - self(target).mean())


def condition_vector(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-dimension mean and std of source then target, length 4d."""
    source, target = _as_samples(source), _as_samples(target)
    return np.concatenate([source.mean(0), source.std(0), target.mean(0), target.std(0)])


@dataclass
class TransportMap:
    """Omega(v | cond) = v + net([v || cond]) evaluated in normalized coordinates."""

    net: SmallDenseNetwork
    condition: np.ndarray
    normalizer: Normalizer
    history: list = field(default_factory=list, repr=False)

    @property
    def dim(self) -> int:
        return self.net.output_dim

    def _inputs(self, xn: np.ndarray) -> np.ndarray:
        cond = np.broadcast_to(self.condition, (xn.shape[0], self.condition.size))
        return np.hstack([xn, cond])

    def forward_normalized(self, xn: np.ndarray):
        out, cache = self.net.forward(self._inputs(xn))
        return xn + out, cache

    def __call__(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        single = v.ndim == 1
        v = np.atleast_2d(v)
        if v.shape[1] != self.dim:
            raise ValueError(f"sample has {v.shape[1]} dims, map expects {self.dim}")
        yn, _ = self.forward_normalized(self.normalizer(v))
        out = self.normalizer.inverse(yn)
        return out[0] if single else out


def transport_sample(omega: TransportMap, v, condition=None) -> np.ndarray:
    if condition is not None:
        condition = np.asarray(condition, dtype=np.float64).ravel()
        if condition.shape != omega.condition.shape:
            raise ValueError(
                f"condition has length {condition.size}, map expects {omega.condition.size}"
            )
        omega = TransportMap(omega.net, condition, omega.normalizer)
    return omega(v)


def _as_samples(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ValueError("empty sample set")
    return x


def _check_finite(value, what: str, iteration: int) -> None:
    if not np.all(np.isfinite(value)):
        raise TrainingError(
            f"non-finite {what} at iteration {iteration}; lower the learning rate"
        )


def _critic_step(psi, opt, xs, xt, clip_log=None):
    """One ascent step on mean psi(xs) - mean psi(xt) (both already normalized)."""
    out_s, cache_s = psi.forward(xs)
    out_t, cache_t = psi.forward(xt)
    gs, _ = psi.backward(np.full_like(out_s, 1.0 / len(xs)), cache_s)
    gt, _ = psi.backward(np.full_like(out_t, -1.0 / len(xt)), cache_t)
    opt.step([a + b for a, b in zip(gs, gt)], ascend=True)
    psi.clip()
    if clip_log is not None:
        clip_log.append(psi.max_abs_parameter())
    return float(out_s.mean() - out_t.mean())


def estimate_w1(source_samples, target_samples, config: TrainConfig = TrainConfig(), clip_log=None):
    """Train a clipped potential by gradient ascent on the dual objective.

    Returns (potential, estimate) with estimate = mean psi(source) - mean
    psi(target) over all samples. The value is not renormalized by the
    network's Lipschitz constant, so it is a lower bound on W1 (up to
    optimization error) whenever the clip bound keeps psi 1-Lipschitz.
    ``clip_log`` collects max|parameter| after every update when given.
    """
    xs, xt = _as_samples(source_samples), _as_samples(target_samples)
    if xs.shape[1] != xt.shape[1]:
        raise ValueError("source and target dimensions differ")
    d = xs.shape[1]
    rng = np.random.default_rng(config.seed)
    norm = Normalizer.fit(xs, xt)
    ns, nt = norm(xs), norm(xt)
    psi = init_network(
        [d, POTENTIAL_HIDDEN, 1], rng, clip_bound=config.resolved_clip(d), last_scale=0.0, seed=config.seed
    )
    opt = RMSProp(psi.parameters(), config.learning_rate)
    b = config.batch_size
    # divergence is detected explicitly and raised as TrainingError
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(config.total_iterations):
            bs = ns[rng.integers(len(ns), size=b)]
            bt = nt[rng.integers(len(nt), size=b)]
            value = _critic_step(psi, opt, bs, bt, clip_log)
            _check_finite(value, "dual objective", it)
    potential = DualPotential(psi, norm)
    estimate = potential.dual_value(xs, xt)
    _check_finite(estimate, "dual estimate", config.total_iterations)
    return potential, estimate


def train_notpe(
    source_samples,
    target_samples,
    condition=None,
    config: TrainConfig = TrainConfig(),
    source_weights=None,
    target_weights=None,
    clip_log=None,
) -> TransportMap:
    """Alternating minimax: ``critic_steps`` ascent steps on the clipped
    potential psi, then one descent step on the map omega.

    psi ascends E[psi(target)] - E[psi(omega(source))]; omega descends the
    same objective, i.e. ascends E[psi(omega(source))]. Optional weights
    turn the samples into weighted histograms for minibatch drawing.
    """
    xs, xt = _as_samples(source_samples), _as_samples(target_samples)
    if xs.shape[1] != xt.shape[1]:
        raise ValueError("source and target dimensions differ")
    d = xs.shape[1]
    if condition is None:
        condition = condition_vector(xs, xt)
    condition = np.asarray(condition, dtype=np.float64).ravel()
    rng = np.random.default_rng(config.seed)
    norm = Normalizer.fit(xs, xt)
    ns, nt = norm(xs), norm(xt)
    ps = _probabilities(source_weights, len(ns))
    pt = _probabilities(target_weights, len(nt))

    psi = init_network([d, POTENTIAL_HIDDEN, 1], rng, clip_bound=config.resolved_clip(d), last_scale=0.0)
    omega_net = init_network(
        [d + condition.size, MAP_HIDDEN, MAP_HIDDEN, d], rng, last_scale=1e-3, seed=config.seed
    )
    omega = TransportMap(omega_net, condition, norm)
    psi_opt = RMSProp(psi.parameters(), config.learning_rate)
    omega_opt = RMSProp(omega_net.parameters(), config.learning_rate)
    b = config.batch_size

    def draw(pool, p):
        return pool[rng.choice(len(pool), size=b, p=p)] if p is not None else pool[rng.integers(len(pool), size=b)]

    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(config.total_iterations):
            for _ in range(config.critic_steps):
                moved, _ = omega.forward_normalized(draw(ns, ps))
                value = _critic_step(psi, psi_opt, draw(nt, pt), moved, clip_log)
            _check_finite(value, "critic objective", it)

            moved, omega_cache = omega.forward_normalized(draw(ns, ps))
            out, psi_cache = psi.forward(moved)
            # omega ascends mean psi(moved): descend its negation
            _, g_moved = psi.backward(np.full_like(out, -1.0 / b), psi_cache)
            grads, _ = omega_net.backward(g_moved, omega_cache)
            for g in grads:
                _check_finite(g, "map gradient", it)
            omega_opt.step(grads)
            if it % 100 == 0:
                omega.history.append((it, value))
    return omega


def _probabilities(weights, n):
    if weights is None:
        return None
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size != n:
        raise ValueError(f"{w.size} weights for {n} samples")
    return w / w.sum()
