"""Neural architectures: Transformer encoder, ESN reservoir, hybrid extractors,
MLP heads, and checkpoint serialization.

The main object is the feature extractor f(X) mapping a (n_seq, n_kpis)
sequence to an n-dimensional embedding:

  * ``tesn``: linear projection + sinusoidal positions -> L pre-norm
    Transformer layers -> trainable bridge projection -> fixed-weight tanh
    reservoir -> readout over [final state; flattened raw input];
  * ``esn``: the same reservoir/readout but driven directly by the raw
    KPI rows (no transformer, no bridge).

Reservoir matrices are fixed at init (never receive gradients); everything
else is trainable until ``freeze()`` is called.  Trainable tensors live in
per-module registries so they can be swapped for graph nodes during
whole-model gradient checks (``bind_param_vector``).
"""

import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndiff
from .errors import (CheckpointError, DimensionError, NumericError,
                     ParameterError)
from .ndiff import Tensor


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    n_layers: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ParameterError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.d_model % 2 != 0:
            raise ParameterError("d_model must be even (sinusoidal positions pair sin/cos)")


@dataclass(frozen=True)
class ReservoirConfig:
    n_res: int = 64
    spectral_radius: float = 0.9
    input_scaling: float = 0.5

    def __post_init__(self):
        if self.n_res < 1:
            raise ParameterError(f"n_res must be >= 1, got {self.n_res}")
        if self.spectral_radius <= 0:
            raise ParameterError(f"spectral_radius must be > 0, got {self.spectral_radius}")


@dataclass(frozen=True)
class ExtractorConfig:
    arch: str = "tesn"  # "tesn" | "esn"
    n_seq: int = 28
    n_kpis: int = 13
    n_embed: int = 8
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    reservoir: ReservoirConfig = field(default_factory=ReservoirConfig)

    def __post_init__(self):
        if self.arch not in ("tesn", "esn"):
            raise ParameterError(f"unknown extractor arch '{self.arch}'")
        if self.n_embed > self.n_seq * self.n_kpis:
            raise ParameterError(
                f"embedding dim {self.n_embed} exceeds input size {self.n_seq * self.n_kpis}"
            )

    def to_dict(self):
        return {
            "arch": self.arch,
            "n_seq": self.n_seq,
            "n_kpis": self.n_kpis,
            "n_embed": self.n_embed,
            "transformer": vars(self.transformer).copy(),
            "reservoir": vars(self.reservoir).copy(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            arch=d["arch"],
            n_seq=d["n_seq"],
            n_kpis=d["n_kpis"],
            n_embed=d["n_embed"],
            transformer=TransformerConfig(**d["transformer"]),
            reservoir=ReservoirConfig(**d["reservoir"]),
        )


# -- parameter registry --------------------------------------------------------

class ParamModule:
    """Mixin storing trainable tensors in a registry addressable by name.

    Registered tensors remain readable as attributes, so forward code uses
    plain ``self.wq`` style access while gradient checks can substitute any
    parameter by key.
    """

    def _init_params(self):
        self._params = {}

    def _register(self, name, tensor):
        self._params[name] = tensor
        return tensor

    def __getattr__(self, name):
        params = self.__dict__.get("_params")
        if params is not None and name in params:
            return params[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def submodules(self):
        """Override: list of (prefix, ParamModule) children."""
        return []

    def modules(self):
        yield "", self
        for prefix, child in self.submodules():
            for sub, mod in child.modules():
                yield (f"{prefix}.{sub}" if sub else prefix), mod

    def param_bindings(self):
        """Flattened list of (qualified_name, owner_module, key)."""
        out = []
        for prefix, mod in self.modules():
            for key in mod._params:
                out.append((f"{prefix}.{key}" if prefix else key, mod, key))
        return out

    def named_params(self):
        return [(name, mod._params[key]) for name, mod, key in self.param_bindings()]

    def trainable_tensors(self):
        return [t for _, t in self.named_params()]


def flatten_params(module):
    """Concatenate every trainable tensor of ``module`` into one 1-D array."""
    return np.concatenate([t.data.reshape(-1) for t in module.trainable_tensors()] or [np.zeros(0)])


@contextmanager
def bind_param_vector(modules, vec):
    """Temporarily replace the trainable tensors of ``modules`` with slices
    of the 1-D Tensor ``vec`` so that gradients flow into ``vec``.

    The substitution is restored on exit; ``vec.data`` must hold the packed
    values in ``param_bindings`` order across the listed modules.
    """
    bindings = []
    for m in modules:
        bindings.extend(m.param_bindings())
    offset = 0
    originals = []
    try:
        for name, owner, key in bindings:
            orig = owner._params[key]
            size = orig.data.size
            node = ndiff.reshape(ndiff.slice_axis(vec, 0, offset, offset + size), orig.data.shape)
            owner._params[key] = node
            originals.append((owner, key, orig))
            offset += size
        if offset != vec.data.size:
            raise DimensionError(f"parameter vector has {vec.data.size} entries, model expects {offset}")
        yield
    finally:
        for owner, key, orig in originals:
            owner._params[key] = orig


# -- initialization helpers ---------------------------------------------------

def _uniform_fan_in(rng, fan_in, shape):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _param(rng, fan_in, shape):
    return Tensor(_uniform_fan_in(rng, fan_in, shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def sinusoidal_positions(n_seq, d_model):
    """Fixed sinusoidal positional encodings, shape (n_seq, d_model)."""
    pos = np.arange(n_seq, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    div = np.exp(-np.log(10000.0) * i / d_model)
    pe = np.zeros((n_seq, d_model))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)
    return pe


def spectral_radius_estimate(w, max_iter=10000, tol=1e-12):
    """Power-iteration estimate of the spectral radius of a square matrix.

    Each step advances the iterate by one matvec and reads the dominant
    eigenvalue magnitude off a 2-step Arnoldi restriction, which also
    handles complex-conjugate dominant pairs.  Raises after ``max_iter``
    steps without the estimate stabilizing.
    """
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise DimensionError(f"spectral radius needs a square matrix, got {w.shape}")
    n = w.shape[0]
    if n == 1:
        return abs(float(w[0, 0]))
    v = np.ones(n) + 0.01 * np.arange(n)
    v /= np.linalg.norm(v)
    prev = np.inf
    stable = 0
    for _ in range(max_iter):
        w1 = w @ v
        h11 = v @ w1
        r1 = w1 - h11 * v
        h21 = np.linalg.norm(r1)
        if h21 < 1e-14:
            est = abs(h11)
        else:
            q2 = r1 / h21
            w2 = w @ q2
            h = np.array([[h11, v @ w2], [h21, q2 @ w2]])
            est = float(np.max(np.abs(np.linalg.eigvals(h))))
        if abs(est - prev) <= tol * max(est, 1e-30):
            stable += 1
            if stable >= 3:
                return est
        else:
            stable = 0
        prev = est
        nv = np.linalg.norm(w1)
        if nv == 0.0:
            return 0.0
        v = w1 / nv
    raise NumericError(f"power iteration failed to converge in {max_iter} steps")


# -- building blocks ----------------------------------------------------------

class Mlp(ParamModule):
    """Fully connected stack; ReLU on hidden layers, linear final layer."""

    def __init__(self, sizes, rng):
        if len(sizes) < 2:
            raise ParameterError("Mlp needs at least input and output sizes")
        self._init_params()
        self.sizes = tuple(int(s) for s in sizes)
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self._register(f"w{i}", _param(rng, fan_in, (fan_in, fan_out)))
            self._register(f"b{i}", _zeros((fan_out,)))

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def forward(self, x):
        """x: Tensor (batch, sizes[0]) -> Tensor (batch, sizes[-1])."""
        out = x
        for i in range(self.n_layers):
            out = ndiff.add(ndiff.matmul(out, self._params[f"w{i}"]), self._params[f"b{i}"])
            if i != self.n_layers - 1:
                out = ndiff.relu(out)
        return out

    def __call__(self, x):
        return self.forward(x)


class EncoderLayer(ParamModule):
    """Pre-norm Transformer encoder layer: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, cfg: TransformerConfig, rng):
        self._init_params()
        self.cfg = cfg
        d, ff = cfg.d_model, cfg.d_ff
        for name in ("wq", "wk", "wv", "wo"):
            self._register(name, _param(rng, d, (d, d)))
        for name in ("bq", "bk", "bv", "bo"):
            self._register(name, _zeros((d,)))
        self._register("w1", _param(rng, d, (d, ff)))
        self._register("b1", _zeros((ff,)))
        self._register("w2", _param(rng, ff, (ff, d)))
        self._register("b2", _zeros((d,)))
        self._register("ln1_g", Tensor(np.ones(d), requires_grad=True))
        self._register("ln1_b", _zeros((d,)))
        self._register("ln2_g", Tensor(np.ones(d), requires_grad=True))
        self._register("ln2_b", _zeros((d,)))

    def _ln(self, x, g, b):
        return ndiff.add(ndiff.mul(ndiff.layer_norm(x, axis=-1), g), b)

    def _heads(self, x, batch, n_seq):
        d, h = self.cfg.d_model, self.cfg.n_heads
        x = ndiff.reshape(x, (batch, n_seq, h, d // h))
        return ndiff.transpose(x, (0, 2, 1, 3))  # (b, h, T, dh)

    def _attention(self, z, batch, n_seq):
        d, h = self.cfg.d_model, self.cfg.n_heads
        dh = d // h
        q = self._heads(ndiff.add(ndiff.matmul(z, self.wq), self.bq), batch, n_seq)
        k = self._heads(ndiff.add(ndiff.matmul(z, self.wk), self.bk), batch, n_seq)
        v = self._heads(ndiff.add(ndiff.matmul(z, self.wv), self.bv), batch, n_seq)
        scores = ndiff.scale(ndiff.matmul(q, ndiff.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = ndiff.softmax(scores, axis=-1)  # full (non-causal) attention
        ctx = ndiff.matmul(att, v)  # (b, h, T, dh)
        ctx = ndiff.transpose(ctx, (0, 2, 1, 3))
        ctx = ndiff.reshape(ctx, (batch, n_seq, d))
        return ndiff.add(ndiff.matmul(ctx, self.wo), self.bo)

    def forward(self, z):
        batch, n_seq, _ = z.data.shape
        z = ndiff.add(z, self._attention(self._ln(z, self.ln1_g, self.ln1_b), batch, n_seq))
        ffn_in = self._ln(z, self.ln2_g, self.ln2_b)
        hidden = ndiff.relu(ndiff.add(ndiff.matmul(ffn_in, self.w1), self.b1))
        return ndiff.add(z, ndiff.add(ndiff.matmul(hidden, self.w2), self.b2))


class TransformerEncoder(ParamModule):
    """Projection + positional encoding + L pre-norm encoder layers."""

    def __init__(self, cfg: TransformerConfig, n_seq, n_kpis, rng):
        self._init_params()
        self.cfg = cfg
        self.n_seq = n_seq
        self.n_kpis = n_kpis
        self._register("w_proj", _param(rng, n_kpis, (n_kpis, cfg.d_model)))
        self._register("b_proj", _zeros((cfg.d_model,)))
        self.positions = sinusoidal_positions(n_seq, cfg.d_model)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]

    def submodules(self):
        return [(f"layer{i}", layer) for i, layer in enumerate(self.layers)]

    def encode(self, x):
        """x: Tensor (batch, n_seq, n_kpis) -> Tensor (batch, n_seq, d_model)."""
        batch, n_seq, n_kpis = x.data.shape
        if n_seq != self.n_seq or n_kpis != self.n_kpis:
            raise DimensionError(
                f"transformer expects (*, {self.n_seq}, {self.n_kpis}), got {x.shape}"
            )
        flat = ndiff.reshape(x, (batch * n_seq, n_kpis))
        z = ndiff.add(ndiff.matmul(flat, self.w_proj), self.b_proj)
        z = ndiff.add(z, Tensor(np.tile(self.positions, (batch, 1))))
        z = ndiff.reshape(z, (batch, n_seq, self.cfg.d_model))
        for layer in self.layers:
            z = layer.forward(z)
        return z


class Reservoir:
    """Fixed random recurrence s_t = tanh(W_res s_{t-1} + W_in u_t), s_0 = 0."""

    def __init__(self, w_res, w_in):
        self.w_res = Tensor(w_res)  # (n_res, n_res), never trained
        self.w_in = Tensor(w_in)    # (n_res, n_in), never trained
        self.refresh_caches()

    def refresh_caches(self):
        self._w_res_t = Tensor(np.ascontiguousarray(self.w_res.data.T))
        self._w_in_t = Tensor(np.ascontiguousarray(self.w_in.data.T))

    @property
    def n_res(self):
        return self.w_res.data.shape[0]

    @property
    def n_in(self):
        return self.w_in.data.shape[1]

    def run(self, u):
        """u: Tensor (batch, T, n_in) -> final state Tensor (batch, n_res).

        Gradients flow through the recurrence into u; the reservoir
        matrices themselves stay fixed.
        """
        batch, n_steps, n_in = u.data.shape
        if n_in != self.n_in:
            raise DimensionError(f"reservoir expects input dim {self.n_in}, got {n_in}")
        s = Tensor(np.zeros((batch, self.n_res)))
        for t in range(n_steps):
            u_t = ndiff.reshape(ndiff.slice_axis(u, 1, t, t + 1), (batch, n_in))
            s = ndiff.tanh(ndiff.add(ndiff.matmul(s, self._w_res_t),
                                     ndiff.matmul(u_t, self._w_in_t)))
        return s


def esn_init(seed, n_res, rho, gamma, n_in):
    """Seeded reservoir: W_res ~ U(-1,1) rescaled to spectral radius rho,
    W_in ~ U(-gamma, gamma)."""
    if n_res < 1:
        raise ParameterError(f"n_res must be >= 1, got {n_res}")
    if rho <= 0:
        raise ParameterError(f"spectral radius must be > 0, got {rho}")
    rng = np.random.default_rng([int(seed), 0x5E5])
    w = rng.uniform(-1.0, 1.0, size=(n_res, n_res))
    w *= rho / spectral_radius_estimate(w)
    w_in = rng.uniform(-gamma, gamma, size=(n_res, n_in))
    return Reservoir(w, w_in)


# -- extractors ---------------------------------------------------------------

class _ExtractorBase(ParamModule):
    """Shared readout/freeze/embedding machinery for both architectures."""

    def __init__(self, cfg: ExtractorConfig, seed):
        self._init_params()
        self.cfg = cfg
        self.seed = int(seed)
        self.frozen = False

    def _readout(self, x, state):
        batch = x.data.shape[0]
        flat = ndiff.reshape(x, (batch, self.cfg.n_seq * self.cfg.n_kpis))
        stacked = ndiff.concat([state, flat], axis=1)
        return ndiff.matmul(stacked, self.w_out)  # no readout bias

    def embed_batch(self, x):
        """x: Tensor (batch, n_seq, n_kpis) -> Tensor (batch, n_embed)."""
        raise NotImplementedError

    def embed(self, inputs, batch_size=512):
        """inputs: array (M, n_seq, n_kpis) -> array (M, n_embed); no tape."""
        inputs = np.asarray(inputs, dtype=np.float64)
        out = np.empty((inputs.shape[0], self.cfg.n_embed))
        with ndiff.no_grad():
            for lo in range(0, inputs.shape[0], batch_size):
                hi = min(lo + batch_size, inputs.shape[0])
                out[lo:hi] = self.embed_batch(Tensor(inputs[lo:hi])).data
        return out

    def constant_tensors(self):
        return [("reservoir.w_res", self.reservoir.w_res),
                ("reservoir.w_in", self.reservoir.w_in)]

    def freeze(self):
        for t in self.trainable_tensors():
            t.frozen = True
            t.requires_grad = False
        self.frozen = True
        return self

    def params_hash(self):
        h = hashlib.sha256()
        for name, t in list(self.named_params()) + self.constant_tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


class TesnExtractor(_ExtractorBase):
    """Transformer -> bridge projection -> reservoir -> concatenated readout."""

    arch = "tesn"

    def __init__(self, cfg: ExtractorConfig, seed):
        super().__init__(cfg, seed)
        rng = np.random.default_rng([self.seed, 0x7E5])
        d = cfg.transformer.d_model
        self.transformer = TransformerEncoder(cfg.transformer, cfg.n_seq, cfg.n_kpis, rng)
        self._register("bridge", _param(rng, d, (d, d)))
        self.reservoir = esn_init(self.seed, cfg.reservoir.n_res,
                                  cfg.reservoir.spectral_radius,
                                  cfg.reservoir.input_scaling, d)
        readout_in = cfg.reservoir.n_res + cfg.n_seq * cfg.n_kpis
        self._register("w_out", _param(rng, readout_in, (readout_in, cfg.n_embed)))

    def submodules(self):
        return [("transformer", self.transformer)]

    def embed_batch(self, x):
        batch, n_seq, _ = x.data.shape
        u = self.transformer.encode(x)
        d = self.cfg.transformer.d_model
        u = ndiff.reshape(ndiff.matmul(ndiff.reshape(u, (batch * n_seq, d)), self.bridge),
                          (batch, n_seq, d))
        state = self.reservoir.run(u)
        return self._readout(x, state)


class EsnExtractor(_ExtractorBase):
    """Reservoir driven directly by the raw KPI rows, plus the readout."""

    arch = "esn"

    def __init__(self, cfg: ExtractorConfig, seed):
        super().__init__(cfg, seed)
        rng = np.random.default_rng([self.seed, 0xE5])
        self.reservoir = esn_init(self.seed, cfg.reservoir.n_res,
                                  cfg.reservoir.spectral_radius,
                                  cfg.reservoir.input_scaling, cfg.n_kpis)
        readout_in = cfg.reservoir.n_res + cfg.n_seq * cfg.n_kpis
        self._register("w_out", _param(rng, readout_in, (readout_in, cfg.n_embed)))

    def embed_batch(self, x):
        state = self.reservoir.run(x)
        return self._readout(x, state)


def build_extractor(cfg: ExtractorConfig, seed):
    if cfg.arch == "tesn":
        return TesnExtractor(cfg, seed)
    return EsnExtractor(cfg, seed)


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_FORMAT = "kpiembed-checkpoint/1"


def save_checkpoint(extractor, path, normalization=None):
    """Write meta.json (hyperparameters, seed, manifest) + params.bin payload."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = list(extractor.named_params()) + extractor.constant_tensors()
    manifest = []
    blobs = []
    offset = 0
    for name, t in entries:
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(t.data.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": extractor.cfg.to_dict(),
        "seed": extractor.seed,
        "frozen": extractor.frozen,
        "normalization": normalization,
        "params": manifest,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    (path / "params.bin").write_bytes(b"".join(blobs))


def load_checkpoint(path, expect_cfg=None):
    """Rebuild an extractor from disk; returns (extractor, meta).

    Fails loudly when the stored hyperparameters do not match ``expect_cfg``
    or when the payload does not fit the manifest.
    """
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    meta = json.loads(meta_file.read_text())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
    cfg = ExtractorConfig.from_dict(meta["config"])
    if expect_cfg is not None and cfg != expect_cfg:
        raise CheckpointError(
            f"checkpoint hyperparameters {cfg} do not match expected {expect_cfg}"
        )
    extractor = build_extractor(cfg, meta["seed"])
    payload = (path / "params.bin").read_bytes()
    tensors = dict(extractor.named_params() + extractor.constant_tensors())
    seen = set()
    for entry in meta["params"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in tensors:
            raise CheckpointError(f"unknown parameter '{name}' in checkpoint manifest")
        size = int(np.prod(shape)) if shape else 1
        if off + size * 8 > len(payload):
            raise CheckpointError(f"payload truncated for parameter '{name}'")
        data = np.frombuffer(payload, dtype="<f8", count=size, offset=off)
        t = tensors[name]
        if t.data.shape != shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': checkpoint {shape} vs model {t.data.shape}"
            )
        t.data = data.reshape(shape).astype(np.float64)
        seen.add(name)
    missing = set(tensors) - seen
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)}")
    extractor.reservoir.refresh_caches()
    if meta.get("frozen"):
        extractor.freeze()
    return extractor, meta
