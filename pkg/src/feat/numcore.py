"""Dense float64 math for small networks.

Three pieces live here:

* a tape-based reverse-mode differentiation engine over numpy arrays,
  restricted to the handful of primitives a dense network needs
  (affine maps, smooth activations, elementwise square/multiply, sums),
* the ``Mlp`` container with a plain (untraced) forward pass, an exact
  forward-mode directional derivative with respect to the spatial input,
  and text checkpoint IO,
* an Adam optimizer acting on lists of parameter arrays.

Everything is float64; the downstream path functionals accumulate
log-density differences over hundreds of steps and 32-bit drift would
bias them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, ParseError, ShapeError

TIME_EMBED_WIDTH = 8
_TIME_FREQS = np.array([1.0, 2.0, 4.0, 8.0])

CHECKPOINT_MAGIC = "feat-model v1"
DEFAULT_ACTIVATION = "gelu"

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def _gelu_value(z):
    z2 = z * z
    u = _GELU_C * (z + _GELU_K * (z2 * z))
    return 0.5 * z * (1.0 + np.tanh(u))


def _gelu_pair(z):
    """Gaussian-error-linear unit (tanh form) and its derivative.

    Returns (value, derivative); the tanh is computed once and shared.
    """
    z2 = z * z
    u = _GELU_C * (z + _GELU_K * (z2 * z))
    th = np.tanh(u)
    half_one_plus = 0.5 * (1.0 + th)
    value = z * half_one_plus
    du = _GELU_C * (1.0 + 3.0 * _GELU_K * z2)
    deriv = half_one_plus + 0.5 * z * (1.0 - th * th) * du
    return value, deriv


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus_value(z):
    return np.logaddexp(0.0, z)


def _softplus_pair(z):
    return np.logaddexp(0.0, z), _sigmoid(z)


# value-only form for inference, value+derivative pair for training
ACTIVATIONS = {
    "gelu": (_gelu_value, _gelu_pair),
    "softplus": (_softplus_value, _softplus_pair),
}


def time_features(t):
    """Sinusoidal clock features for a time in [0, 1].

    Accepts a scalar or a 1-D array; returns shape (8,) or (n, 8).
    """
    tt = np.asarray(t, dtype=np.float64)
    scalar = tt.ndim == 0
    angles = 2.0 * np.pi * np.atleast_1d(tt)[:, None] * _TIME_FREQS[None, :]
    feats = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    return feats[0] if scalar else feats


# ---------------------------------------------------------------------------
# reverse-mode engine
# ---------------------------------------------------------------------------


class Node:
    """One value in a computation graph.

    ``vjps`` maps each parent to a callable turning the gradient at this
    node into the gradient contribution for that parent.
    """

    __slots__ = ("value", "parents", "vjps")

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjps = vjps

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def leaf(value):
    """Wrap an array as a graph leaf (parameter or constant)."""
    return Node(value)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a: Node, b: Node) -> Node:
    value = a.value + b.value
    return Node(
        value,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(g, b.value.shape),
        ),
    )


def sub(a: Node, b: Node) -> Node:
    value = a.value - b.value
    return Node(
        value,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(-g, b.value.shape),
        ),
    )


def mul(a: Node, b: Node) -> Node:
    value = a.value * b.value
    return Node(
        value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def matmul(a: Node, b: Node) -> Node:
    value = a.value @ b.value
    return Node(
        value,
        (a, b),
        (
            lambda g: g @ b.value.T,
            lambda g: a.value.T @ g,
        ),
    )


def activation(a: Node, kind: str) -> Node:
    try:
        pair = ACTIVATIONS[kind][1]
    except KeyError:
        raise ShapeError(f"unknown activation '{kind}'") from None
    value, deriv = pair(a.value)
    return Node(value, (a,), (lambda g: g * deriv,))


def square(a: Node) -> Node:
    z = a.value
    return Node(z * z, (a,), (lambda g: 2.0 * g * z,))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.value * c, (a,), (lambda g: g * c,))


def sum_all(a: Node) -> Node:
    shape = a.value.shape
    return Node(a.value.sum(), (a,), (lambda g: np.broadcast_to(g, shape).copy(),))


def mean_all(a: Node) -> Node:
    return scale(sum_all(a), 1.0 / a.value.size)


def _topological(root: Node):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))
    return order


def grad_params(loss: Node, params: list[Node]) -> list[np.ndarray]:
    """Reverse-mode gradient of a scalar node with respect to leaf nodes."""
    if loss.value.ndim != 0:
        raise ShapeError("grad_params expects a scalar loss node")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contribution = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contribution
            else:
                grads[key] = contribution
        if node in params:  # keep leaf gradients around
            grads[id(node)] = g
    out = []
    for p in params:
        g = grads.get(id(p))
        out.append(np.zeros_like(p.value) if g is None else np.asarray(g))
    return out


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass
class Mlp:
    """Fully connected network mapping (x, t) -> vector.

    ``widths`` includes the input width (spatial dim + time features) and
    the output width. Weight ``weights[i]`` has shape
    (widths[i], widths[i+1]); inputs are row vectors.
    """

    widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = DEFAULT_ACTIVATION

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation '{self.activation}'")
        expected = list(zip(self.widths[:-1], self.widths[1:]))
        got = [w.shape for w in self.weights]
        if got != expected:
            raise ShapeError(f"weight shapes {got} do not match widths {self.widths}")

    @property
    def dim(self) -> int:
        return self.widths[0] - TIME_EMBED_WIDTH

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = params[2 * i]
            self.biases[i] = params[2 * i + 1]

    def _features(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xs = np.atleast_2d(x)
        if xs.shape[1] != self.dim:
            raise ShapeError(f"expected input dim {self.dim}, got {xs.shape[1]}")
        tf = time_features(t)
        if tf.ndim == 1:
            tf = np.broadcast_to(tf, (xs.shape[0], TIME_EMBED_WIDTH))
        elif tf.shape[0] != xs.shape[0]:
            raise ShapeError("t batch does not match x batch")
        return np.concatenate([xs, tf], axis=1), single

    def forward(self, x, t):
        """Evaluate the network; pure in (parameters, x, t)."""
        feats, single = self._features(x, t)
        act_value = ACTIVATIONS[self.activation][0]
        h = feats
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = act_value(h)
        return h[0] if single else h

    def traced_forward(self, feats: np.ndarray, param_nodes: list[Node]) -> Node:
        """Forward pass recorded on the reverse-mode tape.

        ``feats`` is the precomputed (n, widths[0]) feature matrix and
        ``param_nodes`` the leaf nodes from :meth:`param_leaves`.
        """
        h = leaf(feats)
        last = len(self.weights) - 1
        for i in range(len(self.weights)):
            h = add(matmul(h, param_nodes[2 * i]), param_nodes[2 * i + 1])
            if i < last:
                h = activation(h, self.activation)
        return h

    def param_leaves(self) -> list[Node]:
        return [leaf(p) for p in self.params()]

    def jvp(self, x, t, tangent):
        """Exact directional derivative d/de f(x + e*tangent, t) at e=0."""
        feats, single = self._features(x, t)
        tan = np.atleast_2d(np.asarray(tangent, dtype=np.float64))
        if tan.shape[1] != self.dim:
            raise ShapeError("tangent dim mismatch")
        tan = np.broadcast_to(tan, (feats.shape[0], self.dim))
        u = np.concatenate(
            [tan, np.zeros((feats.shape[0], TIME_EMBED_WIDTH))], axis=1
        )
        pair = ACTIVATIONS[self.activation][1]
        h = feats
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            u = u @ w
            if i < last:
                h, deriv = pair(z)
                u = u * deriv
            else:
                h = z
        return u[0] if single else u


def build_mlp(dim: int, hidden: list[int], seed: int, out_dim: int | None = None,
              activation: str = DEFAULT_ACTIVATION, zero_final: bool = True) -> Mlp:
    """He-initialised network with an optional zero final layer.

    A zero final layer makes a fresh network the zero vector field, so an
    untrained model degenerates to the plain importance-sampling limits.
    """
    widths = [dim + TIME_EMBED_WIDTH] + list(hidden) + [out_dim or dim]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for w_in, w_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.standard_normal((w_in, w_out)) * math.sqrt(2.0 / w_in))
        biases.append(np.zeros(w_out))
    if zero_final:
        weights[-1] = np.zeros_like(weights[-1])
    return Mlp(widths=widths, weights=weights, biases=biases, activation=activation)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators with bias correction."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-3) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(state: AdamState, params: list[np.ndarray],
              grads: list[np.ndarray]) -> list[np.ndarray]:
    """One adaptive-moment update; returns the new parameter arrays."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("adam_step: parameter/gradient count mismatch")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericsError(
                f"adam_step: non-finite gradient at step {state.step + 1}"
            )
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        out.append(p - (state.lr / c1) * m / denom)
    return out


# ---------------------------------------------------------------------------
# checkpoint IO
# ---------------------------------------------------------------------------


def save_model(path, net: Mlp, kind: str) -> None:
    """Write the text checkpoint format.

    The header fixes the roles and shapes; parameter values follow one per
    line with 17 significant digits so float64 round-trips exactly.
    """
    if kind not in ("velocity", "score"):
        raise ShapeError(f"checkpoint kind must be velocity|score, got '{kind}'")
    if net.activation != DEFAULT_ACTIVATION:
        raise ShapeError(
            "checkpoint format only stores networks with the default activation"
        )
    widths = ",".join(str(w) for w in net.widths)
    lines = [f"{CHECKPOINT_MAGIC} kind={kind} dim={net.dim} layers={widths}"]
    for p in net.params():
        lines.extend(f"{v:.17g}" for v in p.ravel())
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> tuple[Mlp, str]:
    with open(path) as fh:
        header = fh.readline().strip()
        fields = header.split()
        if fields[:2] != CHECKPOINT_MAGIC.split():
            raise ParseError(f"bad checkpoint header: '{header}'", line=1)
        meta = dict(f.split("=", 1) for f in fields[2:] if "=" in f)
        try:
            kind = meta["kind"]
            dim = int(meta["dim"])
            widths = [int(w) for w in meta["layers"].split(",")]
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad checkpoint header: {exc}", line=1) from None
        if widths[0] != dim + TIME_EMBED_WIDTH:
            raise ParseError("layers[0] must equal dim + 8", line=1)
        values = []
        for lineno, raw in enumerate(fh, start=2):
            raw = raw.strip()
            if not raw:
                continue
            try:
                v = float(raw)
            except ValueError:
                raise ParseError(f"not a number: '{raw}'", line=lineno) from None
            if not math.isfinite(v):
                raise ParseError("non-finite parameter", line=lineno)
            values.append(v)
    expected = sum(
        a * b + b for a, b in zip(widths[:-1], widths[1:])
    )
    if len(values) != expected:
        raise ParseError(
            f"expected {expected} parameters, found {len(values)}"
        )
    flat = np.array(values)
    weights, biases, pos = [], [], 0
    for w_in, w_out in zip(widths[:-1], widths[1:]):
        weights.append(flat[pos:pos + w_in * w_out].reshape(w_in, w_out).copy())
        pos += w_in * w_out
        biases.append(flat[pos:pos + w_out].copy())
        pos += w_out
    return Mlp(widths=widths, weights=weights, biases=biases), kind
