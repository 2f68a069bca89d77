"""Small float64 MLP engine with hand-written reverse mode, Adam and LR schedule.

An :class:`Mlp` may be *stacked*: with ``stack=S`` it holds ``S`` independent
networks of identical architecture whose weights have a leading axis, and it
maps inputs of shape ``(S, B, in)`` to ``(S, B, out)``.  The deep BSDE filter
uses one stack for its ``N`` gradient networks so they train in one matmul.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .sim import read_blob, write_blob

ACTIVATIONS = ("linear", "exp")


class Mlp:
    """Fully connected ReLU network with linear or exponential output.

    Parameters live in one flat array ``params``; ``weights`` and ``biases``
    are views into it, so optimizers can update the flat array in place.
    """

    def __init__(
        self,
        input_dim: int,
        hidden: Sequence[int],
        output_dim: int,
        output_activation: str = "linear",
        stack: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
        params: Optional[np.ndarray] = None,
    ):
        if output_activation not in ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {ACTIVATIONS}")
        self.input_dim = int(input_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.output_dim = int(output_dim)
        self.output_activation = output_activation
        self.stack = stack
        self.dims = (self.input_dim, *self.hidden, self.output_dim)
        lead = () if stack is None else (int(stack),)
        self._shapes = []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            self._shapes.append((lead + (fan_in, fan_out), lead + (1, fan_out)))
        size = sum(math.prod(w) + math.prod(b) for w, b in self._shapes)
        if params is None:
            params = np.zeros(size)
            self.params = params
            self._bind()
            self.reinitialize(rng if rng is not None else np.random.default_rng())
        else:
            params = np.array(params, dtype=float)
            if params.shape != (size,):
                raise ValueError(f"expected {size} parameters, got {params.shape}")
            self.params = params
            self._bind()

    @property
    def n_params(self) -> int:
        return self.params.size

    def _bind(self):
        self.weights, self.biases = [], []
        off = 0
        for ws, bs in self._shapes:
            n = math.prod(ws)
            self.weights.append(self.params[off : off + n].reshape(ws))
            off += n
            n = math.prod(bs)
            self.biases.append(self.params[off : off + n].reshape(bs))
            off += n

    def reinitialize(self, rng: np.random.Generator) -> None:
        """He (fan-in) init for hidden layers, LeCun for the output layer, zero biases."""
        last = len(self.weights) - 1
        for i, W in enumerate(self.weights):
            scale = math.sqrt((1.0 if i == last else 2.0) / W.shape[-2])
            W[...] = scale * rng.standard_normal(W.shape)
        for b in self.biases:
            b[...] = 0.0

    def architecture(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_dim": self.output_dim,
            "output_activation": self.output_activation,
            "stack": self.stack,
        }

    def same_architecture(self, other: "Mlp") -> bool:
        return self.architecture() == other.architecture()

    # -- evaluation ---------------------------------------------------------

    def forward(self, x, keep: bool = False):
        """Return ``(raw, out, cache)``; ``raw`` is the output pre-activation."""
        a = np.asarray(x, dtype=float)
        cache = [] if keep else None
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if keep:
                cache.append(a)
            z = a @ W
            z += b
            if i < last:
                np.maximum(z, 0.0, out=z)
            a = z
        raw = a
        out = np.exp(raw) if self.output_activation == "exp" else raw
        return raw, out, cache

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[1]

    def raw(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, d_raw, need_params: bool = True, need_input: bool = False):
        """Back-propagate ``dL/d raw`` through a cached forward pass.

        Returns ``(grads, dx)`` where ``grads`` matches the flat parameter
        layout (or is ``None``) and ``dx`` is ``dL/dx`` (or ``None``).
        """
        grads = np.empty_like(self.params) if need_params else None
        if need_params:
            gw, gb = [], []
            off = 0
            for ws, bs in self._shapes:
                n = math.prod(ws)
                gw.append(grads[off : off + n].reshape(ws))
                off += n
                n = math.prod(bs)
                gb.append(grads[off : off + n].reshape(bs))
                off += n
        dz = np.asarray(d_raw, dtype=float)
        dx = None
        for i in range(len(self.weights) - 1, -1, -1):
            a_in = cache[i]
            if need_params:
                np.matmul(np.swapaxes(a_in, -1, -2), dz, out=gw[i])
                gb[i][...] = dz.sum(axis=-2, keepdims=True)
            if i == 0 and not need_input:
                break
            da = dz @ np.swapaxes(self.weights[i], -1, -2)
            if i == 0:
                dx = da
            else:
                np.multiply(da, a_in > 0, out=da)
                dz = da
        return grads, dx

    def value_and_grad_input(self, x):
        """Scalar-output network value and its gradient with respect to the input."""
        if self.output_dim != 1:
            raise ValueError("grad_input needs a scalar-output network")
        raw, out, cache = self.forward(x, keep=True)
        d_raw = out if self.output_activation == "exp" else np.ones_like(raw)
        _, dx = self.backward(cache, d_raw, need_params=False, need_input=True)
        return out[..., 0], dx

    def grad_input(self, x) -> np.ndarray:
        return self.value_and_grad_input(x)[1]

    def grad_params(self, x, d_out) -> np.ndarray:
        """Gradient of ``sum(d_out * net(x))`` with respect to the flat parameters."""
        raw, out, cache = self.forward(x, keep=True)
        d_raw = np.asarray(d_out) * out if self.output_activation == "exp" else np.asarray(d_out, dtype=float)
        return self.backward(cache, d_raw)[0]

    def copy(self) -> "Mlp":
        net = Mlp.__new__(Mlp)
        net.__dict__.update(self.__dict__)
        net.params = self.params.copy()
        net._bind()
        return net


def forward(net: Mlp, x) -> np.ndarray:
    return net(x)


def warm_start(prev: Mlp, template: Optional[Mlp] = None) -> Mlp:
    """Fresh network carrying a copy of ``prev``'s weights.

    Optimizer state is not part of a network, so the caller starts a new
    :class:`TrainState`.  ``template`` (if given) must share the architecture.
    """
    if template is not None and not template.same_architecture(prev):
        raise ValueError("warm start requires matching architectures")
    return prev.copy()


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * grads
        self.v *= b2
        self.v += (1 - b2) * grads * grads
        mhat = self.m / (1 - b1**self.t)
        vhat = self.v / (1 - b2**self.t)
        params -= lr * mhat / (np.sqrt(vhat) + self.eps)
        return params


def lr_cosine(lr_max: float, lr_min: float, c: float, C: float) -> float:
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * c / C))


class TrainState:
    """Adam moments plus the patience-gated cosine learning-rate schedule.

    The loss is averaged over windows of ``window`` iterations.  A window
    that fails to improve on the best average so far increments the patience
    counter ``p``; an improving window resets it.  Training stops after
    ``patience`` consecutive non-improving windows.  While ``p > patience/2``
    the cosine position ``c`` advances once per iteration, saturating at
    ``cycle``.  With ``schedule="const"`` the rate stays at ``lr_max``.
    """

    def __init__(
        self,
        size,
        lr_max: float = 1e-4,
        lr_min: Optional[float] = None,
        schedule: str = "const",
        patience: int = 50,
        cycle: int = 80,
        window: int = 200,
    ):
        if schedule not in ("const", "cos"):
            raise ValueError("schedule must be 'const' or 'cos'")
        sizes = [size] if np.isscalar(size) else list(size)
        self.adams = [Adam(int(n)) for n in sizes]
        self.lr_max = float(lr_max)
        self.lr_min = float(lr_max if lr_min is None else lr_min)
        self.schedule = schedule
        self.patience = patience
        self.cycle = cycle
        self.window = window
        self.c = 0
        self.p = 0
        self.best = math.inf
        self.window_means: list[float] = []
        self._acc = 0.0
        self._count = 0
        self.stopped = False

    @property
    def lr(self) -> float:
        if self.schedule == "const":
            return self.lr_max
        return lr_cosine(self.lr_max, self.lr_min, self.c, self.cycle)

    @property
    def adam(self) -> Adam:
        return self.adams[0]

    def apply(self, params, grads) -> None:
        """Adam step on one flat array or on a list of parameter groups."""
        if isinstance(params, np.ndarray):
            params, grads = [params], [grads]
        lr = self.lr
        for opt, p, g in zip(self.adams, params, grads):
            opt.step(p, g, lr)

    def record(self, loss: float) -> bool:
        """Feed one iteration's loss; return True when training should stop."""
        self._acc += loss
        self._count += 1
        if self._count == self.window:
            self.record_window(self._acc / self.window)
            self._acc, self._count = 0.0, 0
        if self.schedule == "cos" and self.p > self.patience / 2:
            self.c = min(self.c + 1, self.cycle)
        return self.stopped

    def record_window(self, mean_loss: float) -> bool:
        self.window_means.append(mean_loss)
        if mean_loss < self.best:
            self.best = mean_loss
            self.p = 0
        else:
            self.p += 1
            if self.p >= self.patience:
                self.stopped = True
        return self.stopped


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_mlp(path, net: Mlp, meta: Optional[dict] = None) -> None:
    header = {"architecture": net.architecture(), "meta": meta or {}}
    write_blob(path, header, {"params": net.params})


def load_mlp(path) -> tuple[Mlp, dict]:
    header, arrays = read_blob(path)
    arch = header["architecture"]
    net = Mlp(
        arch["input_dim"],
        arch["hidden"],
        arch["output_dim"],
        arch["output_activation"],
        stack=arch["stack"],
        params=arrays["params"],
    )
    return net, header["meta"]
