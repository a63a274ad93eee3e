"""Layers, initialisation, Adam, checkpoints and the gradient checker.

Everything here runs the tensor core deterministically: the same Rng
seed yields the same parameters, the same forward values, and the same
checkpoint bytes on every platform.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .tensor import (
    EmptyInputError,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    matmul,
    relu,
    reshape,
    sqrt,
    tmean,
    zero_grads,
)

LBR_NORM_EPS = 1e-5


class CheckpointError(ValueError):
    """Malformed checkpoint bytes."""


class Rng:
    """Deterministic random source (PCG64 under a fixed integer seed).

    ``derive`` produces an independent child stream from a string tag, so
    sub-components can be re-seeded reproducibly without coordinating
    draw order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, tag: str) -> "Rng":
        digest = hashlib.sha256(f"{self.seed}:{tag}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def uniform(self, lo: float, hi: float, shape=None) -> np.ndarray:
        return self._gen.uniform(lo, hi, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, lo: int, hi: int, shape=None) -> np.ndarray:
        return self._gen.integers(lo, hi, size=shape)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def shuffle(self, a: np.ndarray) -> None:
        self._gen.shuffle(a)


def init_weight(rng: Rng, c_in: int, c_out: int) -> Tensor:
    """Uniform in +-sqrt(1/c_in)."""
    bound = float(np.sqrt(1.0 / c_in))
    return Tensor(rng.uniform(-bound, bound, (c_in, c_out)), requires_grad=True)


def init_bias(rng: Rng, c_in: int, c_out: int) -> Tensor:
    bound = float(np.sqrt(1.0 / c_in))
    return Tensor(rng.uniform(-bound, bound, (c_out,)), requires_grad=True)


class LinearLayer:
    """y = x @ weight + bias."""

    def __init__(self, rng: Rng, c_in: int, c_out: int):
        self.c_in = c_in
        self.c_out = c_out
        self.weight = init_weight(rng, c_in, c_out)
        self.bias = init_bias(rng, c_in, c_out)

    def params(self, prefix: str):
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias)]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self)


def linear(x, layer: LinearLayer) -> Tensor:
    """Row-wise affine map; accepts [..., c_in] and keeps leading axes."""
    x = as_tensor(x)
    if x.data.shape[-1] != layer.c_in:
        raise ShapeError(f"linear expects trailing dim {layer.c_in}, got {x.data.shape}")
    lead = x.data.shape[:-1]
    flat = reshape(x, (-1, layer.c_in))
    out = matmul(flat, layer.weight) + layer.bias
    return reshape(out, lead + (layer.c_out,))


class LbrLayer:
    """Linear -> per-feature standardisation over the point rows -> ReLU.

    norm_mode "standardize" centres/scales each output feature over the
    row axis (the batch-norm analogue for a single point set) before the
    learned affine; "identity" skips the statistics and applies the
    learned affine alone, which keeps the layer usable on single rows.
    """

    def __init__(self, rng: Rng, c_in: int, c_out: int, norm_mode: str = "standardize"):
        if norm_mode not in ("standardize", "identity"):
            raise ValueError(f"unknown norm_mode {norm_mode!r}")
        self.c_in = c_in
        self.c_out = c_out
        self.norm_mode = norm_mode
        self.weight = init_weight(rng, c_in, c_out)
        self.bias = init_bias(rng, c_in, c_out)
        self.norm_scale = Tensor(np.ones(c_out), requires_grad=True)
        self.norm_shift = Tensor(np.zeros(c_out), requires_grad=True)

    def params(self, prefix: str):
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias),
                (prefix + ".norm_scale", self.norm_scale), (prefix + ".norm_shift", self.norm_shift)]

    def __call__(self, x: Tensor) -> Tensor:
        return lbr(x, self)


def lbr(x, layer: LbrLayer, eps: float = LBR_NORM_EPS) -> Tensor:
    """Apply an LbrLayer to [N, c_in] (or [..., c_in], flattened to rows)."""
    x = as_tensor(x)
    if x.data.shape[-1] != layer.c_in:
        raise ShapeError(f"lbr expects trailing dim {layer.c_in}, got {x.data.shape}")
    lead = x.data.shape[:-1]
    flat = reshape(x, (-1, layer.c_in))
    if flat.data.shape[0] == 0:
        raise EmptyInputError("lbr over zero rows")
    h = matmul(flat, layer.weight) + layer.bias
    if layer.norm_mode == "standardize":
        mu = tmean(h, axis=0, keepdims=True)
        centred = h - mu
        var = tmean(centred * centred, axis=0, keepdims=True)
        h = centred / sqrt(var + eps)
    h = h * layer.norm_scale + layer.norm_shift
    h = relu(h)
    return reshape(h, lead + (layer.c_out,))


class Mlp:
    """Two linear layers with a ReLU between them (no normalisation)."""

    def __init__(self, rng: Rng, c_in: int, c_hidden: int, c_out: int):
        self.fc1 = LinearLayer(rng.derive("fc1"), c_in, c_hidden)
        self.fc2 = LinearLayer(rng.derive("fc2"), c_hidden, c_out)

    def params(self, prefix: str):
        return self.fc1.params(prefix + ".fc1") + self.fc2.params(prefix + ".fc2")

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


# -- optimiser -----------------------------------------------------------------


def adam_step(param: Tensor, grad: np.ndarray, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """One coupled-L2 Adam update, in place.

    ``state`` holds m, v and the step counter t; an empty dict means a
    fresh zero state.  Weight decay enters the gradient (classic Adam),
    so lr = 0 leaves the parameter untouched.
    """
    if not state:
        state["m"] = np.zeros_like(param.data)
        state["v"] = np.zeros_like(param.data)
        state["t"] = 0
    g = grad + weight_decay * param.data
    state["t"] += 1
    t = state["t"]
    state["m"] = beta1 * state["m"] + (1.0 - beta1) * g
    state["v"] = beta2 * state["v"] + (1.0 - beta2) * g * g
    m_hat = state["m"] / (1.0 - beta1 ** t)
    v_hat = state["v"] / (1.0 - beta2 ** t)
    param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    _assert_finite_update(param.data)


def _assert_finite_update(a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("optimiser produced non-finite parameters")


class Adam:
    """Adam over a name -> Tensor parameter dict."""

    def __init__(self, params: dict, lr: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {name: {} for name in self.params}

    def step(self) -> None:
        for name in sorted(self.params):
            p = self.params[name]
            adam_step(p, p.grad, self.state[name], self.lr, self.beta1,
                      self.beta2, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        zero_grads(self.params.values())


# -- checkpoint I/O --------------------------------------------------------------
#
# Flat binary, little-endian throughout:
#   magic b"TNSR" | u32 version=1 | u32 tensor count
#   per tensor: u32 name length | name utf-8 | u32 ndim | u32 * ndim dims
#               | float64 payload, C order
# Loader validates magic, version and payload lengths.

CHECKPOINT_MAGIC = b"TNSR"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, named) -> None:
    items = [(name, np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64))
             for name, t in sorted(dict(named).items())]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
        for name, arr in items:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    off = 4
    try:
        version, count = struct.unpack_from("<II", blob, off)
        off += 8
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            payload = blob[off:off + 8 * n]
            if len(payload) != 8 * n:
                raise CheckpointError(f"truncated payload for tensor {name!r}")
            off += 8 * n
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        if off != len(blob):
            raise CheckpointError("trailing bytes after final tensor")
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return out


def restore_params(params: dict, loaded: dict) -> None:
    """Copy checkpoint arrays into live parameter tensors, by name."""
    missing = sorted(set(params) - set(loaded))
    extra = sorted(set(loaded) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter names differ (missing {missing[:3]}, extra {extra[:3]})")
    for name, tensor in params.items():
        arr = loaded[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {tensor.data.shape}")
        tensor.data = arr.astype(np.float64).copy()
        if not np.all(np.isfinite(tensor.data)):
            raise CheckpointError(f"non-finite values in checkpoint tensor {name}")


# -- finite-difference gradient checking -------------------------------------------


def gradcheck(fn, tensors, h: float = 1e-5, max_coords: int = 48,
              rng: Rng | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` is a no-argument closure over ``tensors`` returning a scalar
    Tensor; it must be deterministic.  For parameters with more than
    ``max_coords`` entries a seeded coordinate subset is probed.  The
    per-coordinate error is |a - n| / max(|a|, |n|, floor) where the
    floor is a thousandth of the largest gradient magnitude seen for
    that tensor, so near-zero coordinates are judged against the
    tensor's own gradient scale rather than inflating FD noise.
    """
    tensors = list(tensors)
    rng = rng or Rng(0)
    zero_grads(tensors)
    out = fn()
    out.backward()
    analytic = [t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        pairs = []
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = fn().item()
            flat[c] = orig - h
            f_minus = fn().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            pairs.append((float(a.reshape(-1)[c]), numeric))
        scale = max((max(abs(p), abs(q)) for p, q in pairs), default=0.0)
        floor = max(1e-3 * scale, 1e-8)
        for ana, numeric in pairs:
            if abs(ana - numeric) <= 1e-7:
                continue  # both routes agree the coordinate is (near) zero
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), floor)
            worst = max(worst, err)
    zero_grads(tensors)
    return worst
