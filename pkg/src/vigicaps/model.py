"""LSTM followed by capsule attention, ending in a tanh regression unit.

Data flow for a batch ``x`` of shape [B, L, D]::

    (batch-norm -> LeakyReLU -> LSTM layer) x depth        -> [B, L, M]
    batch-norm -> LeakyReLU -> grouped 3x3 conv -> squash   -> u  [B, N, d]
    dynamic routing by agreement                             -> v  [B, K, H]
    tanh(w . flatten(v) + b)                                 -> y  [B]
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import BatchNormState, Tape, Tensor, ops
from .autodiff.tensor import accumulate
from .errors import InvalidConfig, ShapeMismatch

GATES = ("i", "f", "c", "o")


@dataclass(frozen=True)
class ModelConfig:
    """Network hyperparameters; defaults are the published settings."""

    input_dim: int = 886
    recurrent_depth: int = 3
    hidden_units: int = 256
    cells: int = 15
    leaky_slope: float = 0.3
    kernel: int = 3
    stride: int = 1
    capsule_channels: int = 5
    capsule_dim: int = 3
    grid: tuple[int, int] = (16, 16)
    higher_capsules: int = 10
    higher_dim: int = 16
    routing_iters: int = 3
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3
    route_gradients: bool = True

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        ints = ("input_dim", "recurrent_depth", "hidden_units", "cells", "kernel", "stride",
                "capsule_channels", "capsule_dim", "higher_capsules", "higher_dim",
                "routing_iters")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise InvalidConfig(f"{name} must be positive")
        if self.capsule_channels * self.capsule_dim != self.cells:
            raise InvalidConfig("capsule_channels * capsule_dim must equal cells")
        if self.grid[0] * self.grid[1] != self.hidden_units:
            raise InvalidConfig("grid area must equal hidden_units")
        if min(self.grid) < self.kernel:
            raise InvalidConfig("kernel larger than capsule grid")
        if not 0 < self.bn_momentum < 1 or self.bn_eps <= 0 or self.leaky_slope < 0:
            raise InvalidConfig("bad batch-norm or activation constants")

    @property
    def conv_out(self) -> tuple[int, int]:
        return tuple((a - self.kernel) // self.stride + 1 for a in self.grid)

    @property
    def n_lower(self) -> int:
        ho, wo = self.conv_out
        return self.capsule_channels * ho * wo

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RoutingState:
    """Snapshot of one routing pass (numpy copies, batch-first)."""

    logits: list[np.ndarray] = field(default_factory=list)
    couplings: list[np.ndarray] = field(default_factory=list)
    s: np.ndarray | None = None
    v: np.ndarray | None = None


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ModelParams:
    """Named learnable tensors plus batch-norm running statistics.

    LSTM gate weights are stored fused in gate order (i, f, c, o):
    ``Wx`` is [D, 4M] and ``Wh`` is [M, 4M], which together equal the
    per-gate matrices applied to [h_prev, x_t].
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor],
                 bn: dict[str, BatchNormState]):
        self.config = config
        self.tensors = tensors
        self.bn = bn

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        c = config
        M, d, e = c.hidden_units, c.capsule_dim, c.kernel
        t: dict[str, np.ndarray] = {}
        bn: dict[str, BatchNormState] = {}
        d_in = c.input_dim
        for n in range(c.recurrent_depth):
            bn[f"bn{n}"] = BatchNormState(d_in, c.bn_momentum, c.bn_eps)
            t[f"bn{n}.gamma"] = np.ones(d_in)
            t[f"bn{n}.beta"] = np.zeros(d_in)
            fan_in = d_in + M
            t[f"lstm{n}.Wx"] = np.concatenate(
                [_glorot(rng, (d_in, M), fan_in, M) for _ in GATES], axis=1)
            t[f"lstm{n}.Wh"] = np.concatenate(
                [_glorot(rng, (M, M), fan_in, M) for _ in GATES], axis=1)
            b = np.zeros(4 * M)
            b[M:2 * M] = 1.0  # forget gate
            t[f"lstm{n}.b"] = b
            d_in = M
        bn["bncaps"] = BatchNormState(M, c.bn_momentum, c.bn_eps)
        t["bncaps.gamma"] = np.ones(M)
        t["bncaps.beta"] = np.zeros(M)
        fan = d * e * e
        t["caps.kernel"] = _glorot(rng, (c.capsule_channels * d, d, e, e), fan, fan)
        t["caps.bias"] = np.zeros(c.capsule_channels * d)
        t["route.W"] = _glorot(rng, (c.n_lower, c.higher_capsules, d, c.higher_dim),
                               d, c.higher_dim)
        kh = c.higher_capsules * c.higher_dim
        t["head.w"] = _glorot(rng, (kh, 1), kh, 1)
        t["head.b"] = np.zeros(1)
        tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in t.items()}
        return cls(config, tensors, bn)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for p in self.tensors.values():
            p.grad = None

    def constants(self) -> "ModelParams":
        """Same values (shared memory) with gradients switched off; BN state shared."""
        return ModelParams(self.config,
                           {k: Tensor(p.data, name=k) for k, p in self.tensors.items()},
                           self.bn)

    def copy(self) -> "ModelParams":
        tensors = {k: Tensor(p.data.copy(), requires_grad=True, name=k)
                   for k, p in self.tensors.items()}
        bn = {k: BatchNormState(s.num_features, s.momentum, s.eps, s.mean_acc.copy(),
                                s.var_acc.copy(), s.steps) for k, s in self.bn.items()}
        return ModelParams(self.config, tensors, bn)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Everything needed to restore the model, as flat named arrays."""
        out = {k: p.data for k, p in self.tensors.items()}
        for k, s in self.bn.items():
            out[f"{k}.mean_acc"] = s.mean_acc
            out[f"{k}.var_acc"] = s.var_acc
            out[f"{k}.steps"] = np.array([float(s.steps)])
        return out

    @classmethod
    def from_state_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        template = cls.init(config, np.random.default_rng(0))
        for k, p in template.tensors.items():
            if k not in arrays or arrays[k].shape != p.shape:
                raise ShapeMismatch(f"checkpoint entry {k!r} missing or mis-shaped")
            p.data = np.array(arrays[k], dtype=np.float64)
        for k, s in template.bn.items():
            s.mean_acc = np.array(arrays[f"{k}.mean_acc"], dtype=np.float64)
            s.var_acc = np.array(arrays[f"{k}.var_acc"], dtype=np.float64)
            s.steps = int(arrays[f"{k}.steps"][0])
        return template


# ------------------------------------------------------------------- LSTM

def _lstm_gates(z: Tensor, h_prev_c: Tensor | None, M: int) -> tuple[Tensor, Tensor]:
    i = ops.sigmoid(z[:, 0:M])
    f = ops.sigmoid(z[:, M:2 * M])
    g = ops.tanh(z[:, 2 * M:3 * M])
    o = ops.sigmoid(z[:, 3 * M:4 * M])
    c = i * g if h_prev_c is None else f * h_prev_c + i * g
    h = o * ops.tanh(c)
    return h, c


def lstm_cell(x_t, h_prev, c_prev, Wx: Tensor, Wh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step on a batch: x_t [B, D], h_prev/c_prev [B, M]."""
    x_t, h_prev, c_prev = (t if isinstance(t, Tensor) else Tensor(t) for t in (x_t, h_prev, c_prev))
    M = Wh.shape[0]
    if (x_t.shape[-1] != Wx.shape[0] or h_prev.shape[-1] != M or c_prev.shape != h_prev.shape
            or Wx.shape[1] != 4 * M or Wh.shape[1] != 4 * M):
        raise ShapeMismatch("lstm_cell operand shapes disagree")
    z = x_t @ Wx + h_prev @ Wh + b
    return _lstm_gates(z, c_prev, M)


def lstm_layer_reference(x: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor) -> Tensor:
    """`lstm_layer` composed from tape primitives, one `lstm_cell`-style step at a time."""
    B, L, D = x.shape
    M = Wh.shape[0]
    if D != Wx.shape[0]:
        raise ShapeMismatch(f"layer expects {Wx.shape[0]} inputs, got {D}")
    xp = (x.reshape(B * L, D) @ Wx).reshape(B, L, 4 * M) + b
    h = c = None
    outs = []
    for t in range(L):
        z = xp[:, t, :]
        if h is not None:
            z = z + h @ Wh
        h, c = _lstm_gates(z, c, M)
        outs.append(h.reshape(B, 1, M))
    return ops.concat(outs, axis=1)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm_layer(x: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor) -> Tensor:
    """Run one layer over x [B, L, D] from zero state; returns h for all steps.

    Recorded as a single tape entry with hand-written backpropagation through
    time, so the recurrent weight gradient is one matmul over all steps.
    """
    B, L, D = x.shape
    M = Wh.shape[0]
    if D != Wx.shape[0] or Wx.shape[1] != 4 * M or Wh.shape[1] != 4 * M:
        raise ShapeMismatch(f"layer expects {Wx.shape[0]} inputs, got {D}")
    xf = x.data.reshape(B * L, D)
    z = (xf @ Wx.data + b.data).reshape(B, L, 4 * M)
    # gates after activation, in place of the pre-activations: i, f, g, o
    acts = np.empty((B, L, 4 * M))
    cells = np.empty((B, L, M))
    hs = np.empty((B, L, M))
    h_prev = None
    for t in range(L):
        zt = z[:, t] if h_prev is None else z[:, t] + h_prev @ Wh.data
        at = acts[:, t]
        at[:, :2 * M] = _sigmoid(zt[:, :2 * M])
        at[:, 2 * M:3 * M] = np.tanh(zt[:, 2 * M:3 * M])
        at[:, 3 * M:] = _sigmoid(zt[:, 3 * M:])
        ig = at[:, :M] * at[:, 2 * M:3 * M]
        cells[:, t] = ig if t == 0 else at[:, M:2 * M] * cells[:, t - 1] + ig
        hs[:, t] = at[:, 3 * M:] * np.tanh(cells[:, t])
        h_prev = hs[:, t]
    del z

    def backward(gh):
        dz = np.empty((B, L, 4 * M))
        dh_next = None
        dc_next = None
        WhT = Wh.data.T
        for t in range(L - 1, -1, -1):
            at = acts[:, t]
            i, f, g, o = at[:, :M], at[:, M:2 * M], at[:, 2 * M:3 * M], at[:, 3 * M:]
            dh = gh[:, t] if dh_next is None else gh[:, t] + dh_next
            tc = np.tanh(cells[:, t])
            dc = dh * o * (1.0 - tc * tc)
            if dc_next is not None:
                dc += dc_next
            dzt = dz[:, t]
            dzt[:, :M] = dc * g * i * (1.0 - i)
            if t > 0:
                dzt[:, M:2 * M] = dc * cells[:, t - 1] * f * (1.0 - f)
            else:
                dzt[:, M:2 * M] = 0.0
            dzt[:, 2 * M:3 * M] = dc * i * (1.0 - g * g)
            dzt[:, 3 * M:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            if t > 0:
                dh_next = dzt @ WhT
        dzf = dz.reshape(B * L, 4 * M)
        if Wh.requires_grad and L > 1:
            hp = hs[:, :-1].reshape(B * (L - 1), M)
            accumulate(Wh, hp.T @ dz[:, 1:].reshape(B * (L - 1), 4 * M), owned=True)
        if Wx.requires_grad:
            accumulate(Wx, xf.T @ dzf, owned=True)
        if b.requires_grad:
            accumulate(b, dzf.sum(axis=0), owned=True)
        if x.requires_grad:
            accumulate(x, (dzf @ Wx.data.T).reshape(B, L, D), owned=True)

    return ops.custom(hs, (x, Wx, Wh, b), backward)


def _prelude(x: Tensor, params: ModelParams, key: str, training: bool) -> Tensor:
    y = ops.batchnorm(x, params[f"{key}.gamma"], params[f"{key}.beta"], params.bn[key], training)
    return ops.leaky_relu(y, params.config.leaky_slope)


def lstm_stack(x: Tensor, params: ModelParams, training: bool) -> Tensor:
    c = params.config
    if x.ndim != 3 or x.shape[1] != c.cells or x.shape[2] != c.input_dim:
        raise ShapeMismatch(f"expected [B, {c.cells}, {c.input_dim}], got {x.shape}")
    h = x
    for n in range(c.recurrent_depth):
        h = _prelude(h, params, f"bn{n}", training)
        h = lstm_layer(h, params[f"lstm{n}.Wx"], params[f"lstm{n}.Wh"], params[f"lstm{n}.b"])
    return h


# --------------------------------------------------------------- capsules

def lower_capsules(h: Tensor, kernel: Tensor, bias: Tensor, config: ModelConfig) -> Tensor:
    """LSTM outputs [B, L, M] -> squashed lower capsules [B, N, d].

    Each cell's M outputs form an A_l x A_w map; consecutive groups of d cells
    are the input depth of one channel's convolution, which emits d maps.
    A capsule is the d-vector across those maps at one output position.
    """
    c = config
    B = h.shape[0]
    if h.shape[1:] != (c.cells, c.hidden_units):
        raise ShapeMismatch(f"lower capsules expect [B, {c.cells}, {c.hidden_units}]")
    maps = h.reshape(B, c.cells, *c.grid)
    conv = ops.conv2d(maps, kernel, bias, stride=c.stride, groups=c.capsule_channels)
    ho, wo = c.conv_out
    caps = conv.reshape(B, c.capsule_channels, c.capsule_dim, ho, wo).transpose(0, 1, 3, 4, 2)
    return ops.squash(caps.reshape(B, c.n_lower, c.capsule_dim))


def prediction_vectors(u: Tensor, W: Tensor) -> Tensor:
    """u [B, N, d], W [N, K, d, H] -> u_hat laid out [N, B, K, H].

    u_hat[i, b, j] = u[b, i] @ W[i, j]; the capsule-major layout comes straight
    out of one batched matmul and the routing code reads it through views.
    """
    B, N, d = u.shape
    if W.ndim != 4 or W.shape[0] != N or W.shape[2] != d:
        raise ShapeMismatch(f"routing weights {W.shape} do not fit capsules {u.shape}")
    K, H = W.shape[1], W.shape[3]
    uh = u.transpose(1, 0, 2) @ W.transpose(0, 2, 1, 3).reshape(N, d, K * H)
    return uh.reshape(N, B, K, H)


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def dynamic_routing(u: Tensor, W: Tensor, iters: int, route_gradients: bool = True,
                    state: RoutingState | None = None) -> Tensor:
    """Routing by agreement from lower capsules u [B, N, d] to v [B, K, H].

    Recorded as one tape entry whose backward unrolls every iteration. The
    prediction vectors u_hat[j|i] = u_i W_ij are never materialised: with
    d << H both the weighted sums and the agreements are cheaper as
    contractions of (coupling * u) against W. `dynamic_routing_reference`
    computes the same thing from tape primitives.
    """
    if iters < 1:
        raise ShapeMismatch("routing needs at least one iteration")
    B, N, d = u.shape
    if W.ndim != 4 or W.shape[0] != N or W.shape[2] != d:
        raise ShapeMismatch(f"routing weights {W.shape} do not fit capsules {u.shape}")
    K, H = W.shape[1], W.shape[3]
    # internal arrays are higher-capsule major, and capsule coordinates are
    # ordered (component, capsule) so broadcasts run over contiguous rows
    ut = np.ascontiguousarray(u.data.transpose(0, 2, 1))            # [B, d, N]
    Wk = np.ascontiguousarray(W.data.transpose(1, 2, 0, 3)).reshape(K, d * N, H)
    WkT = Wk.transpose(0, 2, 1)
    logits = np.zeros((K, B, N))
    cs, ps, ss, vs, qs = [], [], [], [], []
    for it in range(iters):
        c = _softmax(logits, axis=0)
        p = (c[:, :, None, :] * ut).reshape(K, B, d * N)
        s = np.matmul(p, Wk)
        v = ops.squash_forward(s)
        cs.append(c)
        ps.append(p)
        ss.append(s)
        vs.append(v)
        if state is not None:
            state.logits.append(logits.transpose(1, 0, 2).copy())
            state.couplings.append(c.transpose(1, 0, 2).copy())
        if it < iters - 1:
            q = np.matmul(v, WkT).reshape(K, B, d, N)  # W_ij v_j for every (i, j)
            qs.append(q)
            logits = logits + (q * ut).sum(axis=2)
    if state is not None:
        state.s = ss[-1].transpose(1, 0, 2).copy()
        state.v = vs[-1].transpose(1, 0, 2).copy()

    def backward(gv):
        g_logits = None
        gut = np.zeros((B, d, N))
        lefts, rights = [], []
        first = 0 if route_gradients else iters - 1
        for it in range(iters - 1, first - 1, -1):
            if it == iters - 1:
                g_v = gv.transpose(1, 0, 2)
            else:
                # agreement logits += u_i . (W_ij v_j)
                gl = g_logits[:, :, None, :]
                e = (gl * ut).reshape(K, B, d * N)
                g_v = np.matmul(e, Wk)
                gut += (gl * qs[it]).sum(axis=0)
                lefts.append(e)
                rights.append(vs[it])
            gs = ops.squash_backward(ss[it], g_v)
            r = np.matmul(gs, WkT).reshape(K, B, d, N)
            c = cs[it]
            gut += (c[:, :, None, :] * r).sum(axis=0)
            lefts.append(ps[it])
            rights.append(gs)
            if it > first:
                gc = (r * ut).sum(axis=2)
                gl = c * (gc - (gc * c).sum(axis=0, keepdims=True))
                g_logits = gl if g_logits is None else g_logits + gl
        if u.requires_grad:
            accumulate(u, gut.transpose(0, 2, 1), owned=True)
        if W.requires_grad:
            gWkT = np.zeros((K, H, d * N))
            for lhs, rhs in zip(rights, lefts):
                gWkT += np.matmul(lhs.transpose(0, 2, 1), rhs)
            accumulate(W, gWkT.reshape(K, H, d, N).transpose(3, 0, 2, 1), owned=True)

    return ops.custom(vs[-1].transpose(1, 0, 2), (u, W), backward)


def dynamic_routing_reference(u: Tensor, W: Tensor, iters: int,
                              state: RoutingState | None = None) -> Tensor:
    """`dynamic_routing` built only from tape primitives, materialising u_hat."""
    if iters < 1:
        raise ShapeMismatch("routing needs at least one iteration")
    uh = prediction_vectors(u, W).transpose(1, 2, 0, 3)
    B, K, N, H = uh.shape
    logits = Tensor(np.zeros((B, K, N)), tape=uh.tape)
    v = None
    for it in range(iters):
        coupling = ops.softmax(logits, axis=1)
        v = ops.squash((coupling.reshape(B, K, 1, N) @ uh).reshape(B, K, H))
        if state is not None:
            state.couplings.append(coupling.data.copy())
        if it < iters - 1:
            logits = logits + (uh @ v.reshape(B, K, H, 1)).reshape(B, K, N)
    return v


def regression_head(v: Tensor, w: Tensor, b: Tensor) -> Tensor:
    B = v.shape[0]
    flat = v.reshape(B, -1)
    if flat.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"head expects {w.shape[0]} inputs, got {flat.shape[1]}")
    return ops.tanh(flat @ w + b).reshape(B)


# ---------------------------------------------------------------- forward

def forward(x, params: ModelParams, training: bool, embeddings: dict | None = None,
            routing_state: RoutingState | None = None, tape: Tape | None = None) -> Tensor:
    """Unclipped predictions [B] for inputs x [B, L, D].

    ``training`` selects batch statistics (and updates the running ones);
    pass a dict as ``embeddings`` to receive numpy copies of u and v.
    """
    c = params.config
    tape = tape if tape is not None else Tape()
    xt = tape.tensor(x)
    h = lstm_stack(xt, params, training)
    h = _prelude(h, params, "bncaps", training)
    u = lower_capsules(h, params["caps.kernel"], params["caps.bias"], c)
    v = dynamic_routing(u, params["route.W"], c.routing_iters, c.route_gradients, routing_state)
    if embeddings is not None:
        embeddings["u"] = u.data.copy()
        embeddings["v"] = v.data.copy()
    return regression_head(v, params["head.w"], params["head.b"])


def predict(params: ModelParams, X: np.ndarray, batch_size: int = 64,
            embeddings: dict | None = None) -> np.ndarray:
    """Eval-mode predictions (unclipped) without recording gradients."""
    frozen = params.constants()
    preds, us, vs = [], [], []
    for lo in range(0, len(X), batch_size):
        emb = {} if embeddings is not None else None
        preds.append(forward(X[lo:lo + batch_size], frozen, training=False, embeddings=emb).data)
        if emb is not None:
            us.append(emb["u"])
            vs.append(emb["v"])
    if embeddings is not None:
        embeddings["u"] = np.concatenate(us) if us else np.zeros((0,))
        embeddings["v"] = np.concatenate(vs) if vs else np.zeros((0,))
    return np.concatenate(preds) if preds else np.zeros(0)


def clip_predictions(y: np.ndarray) -> np.ndarray:
    """Metric-time mapping of tanh outputs onto the label range [0, 1]."""
    return np.clip(y, 0.0, 1.0)
