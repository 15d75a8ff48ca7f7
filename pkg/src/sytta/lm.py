"""Byte-level decoder-only transformer with LoRA adapters on q/v projections.

A :class:`ModelState` pairs frozen base weights (read-only numpy arrays) with
trainable low-rank factors ``A`` (r x d) and ``B`` (d x r) for the query and
value projections of every layer. The adapted projection is

    h @ W + scale * (h @ A.T) @ B.T

so with ``B == 0`` the adapted forward is bitwise identical to the base one.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import EOS, VOCAB_SIZE


class ContextOverflowError(ValueError):
    """Context longer than the model's maximum context."""


class SnapshotError(RuntimeError):
    """Adapter snapshot missing or inconsistent."""


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = VOCAB_SIZE
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    max_context: int = 256
    rank: int = 8
    adapter_scale: float = 2.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.rank < 1:
            raise ValueError("adapter rank must be >= 1")
        if min(self.vocab_size, self.n_layers, self.max_context) < 1:
            raise ValueError("vocab_size, n_layers and max_context must be positive")


def init_base_params(config: LmConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, V = config.d_model, config.vocab_size
    std = 0.02
    proj_std = std / np.sqrt(2 * config.n_layers)
    p = {
        "tok_emb": rng.normal(0, std, (V, d)),
        "pos_emb": rng.normal(0, std, (config.max_context, d)),
    }
    for l in range(config.n_layers):
        p[f"h{l}.ln1.g"] = np.ones(d)
        p[f"h{l}.ln1.b"] = np.zeros(d)
        for w in ("wq", "wk", "wv"):
            p[f"h{l}.{w}"] = rng.normal(0, std, (d, d))
        p[f"h{l}.wo"] = rng.normal(0, proj_std, (d, d))
        p[f"h{l}.ln2.g"] = np.ones(d)
        p[f"h{l}.ln2.b"] = np.zeros(d)
        p[f"h{l}.w1"] = rng.normal(0, std, (d, 4 * d))
        p[f"h{l}.b1"] = np.zeros(4 * d)
        p[f"h{l}.w2"] = rng.normal(0, proj_std, (4 * d, d))
        p[f"h{l}.b2"] = np.zeros(d)
    p["lnf.g"] = np.ones(d)
    p["lnf.b"] = np.zeros(d)
    p["head"] = rng.normal(0, std, (d, V))
    return p


def init_adapters(config: LmConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """A ~ N(0, 0.02^2), B = 0."""
    rng = np.random.default_rng(seed)
    r, d = config.rank, config.d_model
    out = {}
    for l in range(config.n_layers):
        for proj in ("q", "v"):
            out[f"h{l}.{proj}.A"] = rng.normal(0, 0.02, (r, d))
            out[f"h{l}.{proj}.B"] = np.zeros((d, r))
    return out


def weights_checksum(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return h.hexdigest()


class ModelState:
    """Frozen base weights plus trainable adapter factors."""

    def __init__(self, config: LmConfig, base: dict[str, np.ndarray],
                 adapters: dict[str, np.ndarray] | None = None, adapter_seed: int = 0,
                 initial_adapters: dict[str, np.ndarray] | None = None):
        self.config = config
        frozen = {}
        for name, arr in base.items():
            arr = np.array(arr, dtype=np.float64, copy=True)
            arr.flags.writeable = False
            frozen[name] = arr
        self.base = frozen
        self._base_tensors = {k: Tensor(v) for k, v in frozen.items()}
        if adapters is None:
            adapters = init_adapters(config, adapter_seed)
        self.adapters = {k: Tensor(np.array(v, dtype=np.float64, copy=True), requires_grad=True, name=k)
                         for k, v in adapters.items()}
        if initial_adapters is None:
            initial_adapters = adapters
        self._initial = {k: np.array(v, dtype=np.float64, copy=True) for k, v in initial_adapters.items()}
        self.adapter_seed = adapter_seed
        self.snapshot_id = f"{self.checksum()[:16]}-a{adapter_seed}"

    @classmethod
    def create(cls, config: LmConfig | None = None, seed: int = 0, adapter_seed: int | None = None):
        config = config or LmConfig()
        return cls(config, init_base_params(config, seed),
                   adapter_seed=seed if adapter_seed is None else adapter_seed)

    def checksum(self) -> str:
        return weights_checksum(self.base)

    def clone(self) -> "ModelState":
        """Copy adapters and snapshot; base arrays are shared (they are read-only)."""
        new = object.__new__(ModelState)
        new.config = self.config
        new.base = self.base
        new._base_tensors = self._base_tensors
        new.adapters = {k: Tensor(t.data.copy(), requires_grad=True, name=k)
                        for k, t in self.adapters.items()}
        new._initial = None if self._initial is None else {k: v.copy() for k, v in self._initial.items()}
        new.adapter_seed = self.adapter_seed
        new.snapshot_id = self.snapshot_id
        return new

    def with_adapter_seed(self, adapter_seed: int) -> "ModelState":
        return ModelState(self.config, self.base, adapter_seed=adapter_seed)

    def adapter_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.adapters.items()}

    def set_adapters(self, arrays: dict[str, np.ndarray]):
        for k, v in arrays.items():
            self.adapters[k].data = np.array(v, dtype=np.float64, copy=True)

    def adapters_at_init(self) -> bool:
        if self._initial is None:
            return False
        return all(np.array_equal(t.data, self._initial[k]) for k, t in self.adapters.items())

    def zero_grad(self):
        for t in self.adapters.values():
            t.grad = None

    def reset(self) -> "ModelState":
        if self._initial is None:
            raise SnapshotError("no adapter snapshot to reset to")
        if set(self._initial) != set(self.adapters):
            raise SnapshotError("adapter snapshot does not match adapter layout")
        for k, t in self.adapters.items():
            t.data = self._initial[k].copy()
            t.grad = None
        return self


def reset_to_base(state: ModelState) -> ModelState:
    """Restore adapter factors to their initial snapshot (in place)."""
    return state.reset()


# ---------------------------------------------------------------------------
# forward


def _project(h: Tensor, W: Tensor, A: Tensor | None, B: Tensor | None, scale: float) -> Tensor:
    out = h @ W
    if A is not None:
        out = out + ((h @ A.T) @ B.T) * scale
    return out


def project_qkv(state: ModelState, layer: int, h, use_adapters: bool = True):
    """q, k, v projections of layer ``layer`` applied to hidden states ``h``."""
    h = ad._wrap(h)
    P = state._base_tensors
    A = state.adapters if use_adapters else {}
    s = state.config.adapter_scale
    q = _project(h, P[f"h{layer}.wq"], A.get(f"h{layer}.q.A"), A.get(f"h{layer}.q.B"), s)
    k = h @ P[f"h{layer}.wk"]
    v = _project(h, P[f"h{layer}.wv"], A.get(f"h{layer}.v.A"), A.get(f"h{layer}.v.B"), s)
    return q, k, v


_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(T: int) -> np.ndarray:
    m = _MASKS.get(T)
    if m is None:
        m = np.tril(np.ones((T, T), dtype=bool))
        _MASKS[T] = m
    return m


def run_transformer(config: LmConfig, params: dict[str, Tensor], tokens: np.ndarray,
                    adapters: dict[str, Tensor] | None = None, capture: dict | None = None) -> Tensor:
    """Logits of shape (N, T, V) for integer tokens of shape (N, T)."""
    N, T = tokens.shape
    d, H = config.d_model, config.n_heads
    dh = d // H
    adapters = adapters or {}
    s = config.adapter_scale
    x = ad.embedding(params["tok_emb"], tokens) + params["pos_emb"][:T]
    mask = _causal_mask(T)
    for l in range(config.n_layers):
        h = ad.layer_norm(x, params[f"h{l}.ln1.g"], params[f"h{l}.ln1.b"])
        q = _project(h, params[f"h{l}.wq"], adapters.get(f"h{l}.q.A"), adapters.get(f"h{l}.q.B"), s)
        k = h @ params[f"h{l}.wk"]
        v = _project(h, params[f"h{l}.wv"], adapters.get(f"h{l}.v.A"), adapters.get(f"h{l}.v.B"), s)
        if capture is not None:
            capture[f"h{l}.q"] = q.data
            capture[f"h{l}.k"] = k.data
            capture[f"h{l}.v"] = v.data
        q = q.reshape(N, T, H, dh).transpose(0, 2, 1, 3)
        k = k.reshape(N, T, H, dh).transpose(0, 2, 1, 3)
        v = v.reshape(N, T, H, dh).transpose(0, 2, 1, 3)
        att = (q @ ad.swap_last(k)) * (1.0 / np.sqrt(dh))
        att = ad.softmax(ad.where(mask, att, -np.inf), axis=-1)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(N, T, d)
        x = x + y @ params[f"h{l}.wo"]
        h = ad.layer_norm(x, params[f"h{l}.ln2.g"], params[f"h{l}.ln2.b"])
        h = ad.gelu(h @ params[f"h{l}.w1"] + params[f"h{l}.b1"])
        x = x + (h @ params[f"h{l}.w2"] + params[f"h{l}.b2"])
    x = ad.layer_norm(x, params["lnf.g"], params["lnf.b"])
    return x @ params["head"]


def forward_logits(state: ModelState, tokens, use_adapters: bool = True,
                   on_pass=None, capture: dict | None = None) -> Tensor:
    """Next-token logits: row t scores token t+1 given tokens[:t+1].

    ``tokens`` is 1-d (returns T x V) or 2-d (returns N x T x V). ``on_pass`` is
    called once per call, which is how the adaptation engine counts passes.
    """
    arr = np.asarray(tokens, dtype=np.int64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.shape[1] == 0:
        raise ValueError("empty context")
    if arr.shape[1] > state.config.max_context:
        raise ContextOverflowError(
            f"context length {arr.shape[1]} exceeds max_context {state.config.max_context}")
    if arr.min() < 0 or arr.max() >= state.config.vocab_size:
        raise ValueError("token id out of vocabulary range")
    adapters = state.adapters if use_adapters else None
    out = run_transformer(state.config, state._base_tensors, arr, adapters, capture)
    if on_pass is not None:
        on_pass()
    return out[0] if single else out


def decode(state: ModelState, x, max_new: int, stop_token: int | None = EOS,
           use_adapters: bool = True, on_pass=None, keep_first: bool = False):
    """Greedy decoding. Returns (new tokens, per-step logits array).

    Each step runs a full-context forward with graph recording disabled. Ties
    break toward the lowest token id. Decoding also halts when the context is
    full. With ``keep_first`` the full logits of the first step (one row per
    query position) are returned as a third element.
    """
    ctx = list(int(t) for t in x)
    new, rows, first = [], [], None
    with ad.no_grad():
        while len(new) < max_new and len(ctx) <= state.config.max_context:
            full = forward_logits(state, ctx, use_adapters=use_adapters, on_pass=on_pass).data
            if first is None:
                first = full
            logits = full[-1]
            tok = int(np.argmax(logits))
            rows.append(logits)
            new.append(tok)
            if stop_token is not None and tok == stop_token:
                break
            ctx.append(tok)
    V = state.config.vocab_size
    out = (new, np.stack(rows) if rows else np.zeros((0, V)))
    return out + (first,) if keep_first else out


def gen_prefix(state: ModelState, x, k: int, use_adapters: bool = True, on_pass=None,
               return_logits: bool = False):
    """Exactly ``k`` greedy tokens after ``x`` (no stop token)."""
    if k < 1:
        raise ValueError("prefix length k must be >= 1")
    if len(x) + k - 1 > state.config.max_context:
        raise ContextOverflowError("query plus prefix exceeds max_context")
    prefix, rows = decode(state, x, k, stop_token=None, use_adapters=use_adapters, on_pass=on_pass)
    return (prefix, rows) if return_logits else prefix


def prefix_rows(m: int, k: int) -> slice:
    """Rows of a forward over x||prefix[:-1] that score the k prefix tokens."""
    return slice(m - 1, m - 1 + k)


def reference_logits(base: ModelState, x, prefix, on_pass=None) -> Tensor:
    """Frozen-model logits (k x V) for each prefix step given (x, prefix[:t])."""
    x = list(x)
    k = len(prefix)
    if k < 1:
        raise ValueError("empty prefix")
    ctx = x + list(prefix[:-1])
    with ad.no_grad():
        logits = forward_logits(base, ctx, use_adapters=False, on_pass=on_pass)
    return Tensor(logits.data[prefix_rows(len(x), k)])


def greedy_decode(state: ModelState, x, max_new: int, stop_token: int = EOS,
                  use_adapters: bool = True, on_pass=None) -> list[int]:
    """Greedy response tokens; the stop token, when produced, is included."""
    return decode(state, x, max_new, stop_token, use_adapters, on_pass)[0]


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"SYTTAW01"


def save_checkpoint(state: ModelState, path, extra: dict | None = None):
    """Little-endian f64 arrays preceded by a JSON header."""
    sections = [("base", state.base), ("adapter", state.adapter_arrays())]
    if state._initial is not None:
        sections.append(("init", state._initial))
    entries, blobs, offset = [], [], 0
    for section, arrays in sections:
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name], dtype="<f8")
            entries.append({"section": section, "name": name, "shape": list(a.shape), "offset": offset})
            blobs.append(a.tobytes())
            offset += a.nbytes
    header = {
        "format": "sytta-weights-v1",
        "config": asdict(state.config),
        "snapshot_id": state.snapshot_id,
        "adapter_seed": state.adapter_seed,
        "base_checksum": state.checksum(),
        "arrays": entries,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a sytta weights file")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path) -> ModelState:
    raw = Path(path).read_bytes()
    if raw[:len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a sytta weights file")
    (n,) = struct.unpack("<Q", raw[len(_MAGIC):len(_MAGIC) + 8])
    start = len(_MAGIC) + 8
    header = json.loads(raw[start:start + n].decode("utf-8"))
    body = memoryview(raw)[start + n:]
    sections: dict[str, dict[str, np.ndarray]] = {"base": {}, "adapter": {}, "init": {}}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"])
        sections[e["section"]][e["name"]] = arr.astype(np.float64)
    config = LmConfig(**header["config"])
    state = ModelState(config, sections["base"], adapters=sections["adapter"],
                       adapter_seed=header.get("adapter_seed", 0),
                       initial_adapters=sections["init"] or None)
    if state.checksum() != header["base_checksum"]:
        raise ValueError(f"{path}: base weights checksum mismatch")
    return state
