"""
Res-Transformer, its ablation variants and the baseline zoo.

Every model maps a (B, 3, L) batch of normalized inflow windows to (B, 3)
next-slot predictions and keeps its parameters in an ordered name -> Tensor
dict. Hidden layers use relu, outputs are linear, weights start Glorot-uniform
and biases at zero.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import (AttentionHeads, ConvQParams, EncoderLayerParams,
                        ModifiedLayerParams, conv_stack, encoder_layer,
                        modified_transformer_layer, multi_head)
from .autodiff import Tensor
from .errors import CheckpointError, ConfigurationError, DimensionError

VARIANTS = ("full", "a", "b", "c", "d", "e")
BASELINES = ("bpnn", "cnn1d", "cnn2d", "lstm", "convlstm", "stresnet", "transformer")
# CLI names; "res-transformer" is the full model, single letters are ablations
ARCHITECTURES = ("res-transformer", "a", "b", "c", "d", "e", *BASELINES)


@dataclass
class ModelConfig:
    L: int = 12
    d: int = 12
    heads: int = 4
    n_layers: int = 4
    conv_filters: int = 8
    fc_pre_hidden: int = 128
    fc_widths_head: tuple = (128, 64, 32, 3)
    variant: str = "full"
    e_layers: int = 8
    ffn_mult: int = 4
    seed: int = 0

    def __post_init__(self):
        self.fc_widths_head = tuple(int(w) for w in self.fc_widths_head)
        self.validate()

    @property
    def fc_widths_pre(self):
        return (self.fc_pre_hidden, self.L)

    def validate(self):
        for name in ("L", "d", "heads", "n_layers", "conv_filters", "fc_pre_hidden", "e_layers", "ffn_mult"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {v!r}")
        if not self.fc_widths_head or self.fc_widths_head[-1] != 3 or min(self.fc_widths_head) < 1:
            raise ConfigurationError(f"head widths must be positive and end in 3, got {self.fc_widths_head}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["fc_widths_head"] = list(self.fc_widths_head)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Model:
    """Named parameter set plus a forward function over (B, 3, L) batches."""

    name = "model"

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.last_trace = None
        self._rng = np.random.default_rng(config.seed)
        self.build()
        del self._rng

    # parameter creation
    def _add(self, name, data):
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name {name}")
        self.params[name] = ad.parameter(data)
        return self.params[name]

    def _weight(self, name, shape, fan_in, fan_out):
        return self._add(name, _glorot(self._rng, shape, fan_in, fan_out))

    def _zeros(self, name, shape):
        return self._add(name, np.zeros(shape))

    def _ones(self, name, shape):
        return self._add(name, np.ones(shape))

    def _dense(self, prefix, n_in, widths):
        for i, w in enumerate(widths):
            self._weight(f"{prefix}.{i}.w", (n_in, w), n_in, w)
            self._zeros(f"{prefix}.{i}.b", (w,))
            n_in = w

    def _conv(self, prefix, c_out, c_in, kh=3, kw=3):
        self._weight(f"{prefix}.w", (c_out, c_in, kh, kw), c_in * kh * kw, c_out * kh * kw)
        self._zeros(f"{prefix}.b", (c_out,))

    def _apply_dense(self, x, prefix, n):
        for i in range(n):
            x = ad.linear(x, self.params[f"{prefix}.{i}.w"], self.params[f"{prefix}.{i}.b"])
            if i < n - 1:
                x = ad.relu(x)
        return x

    def _apply_conv(self, x, prefix, padding=1):
        return ad.conv2d(x, self.params[f"{prefix}.w"], self.params[f"{prefix}.b"], stride=1, padding=padding)

    def _head(self, z, prefix="head"):
        flat = ad.reshape(z, (z.shape[0], -1))
        return self._apply_dense(flat, prefix, len(self.head_widths))

    head_widths = (128, 64, 32, 3)

    def build(self):
        raise NotImplementedError

    def _forward(self, x: Tensor, trace: dict) -> Tensor:
        raise NotImplementedError

    # public API
    @property
    def L(self):
        return self.config.L

    def forward(self, batch) -> Tensor:
        x = ad.as_tensor(batch)
        if x.ndim != 3 or x.shape[1] != 3:
            raise DimensionError(f"{self.name}: expected (B, 3, L) input, got {x.shape}")
        if x.shape[2] != self.L:
            raise DimensionError(f"{self.name}: model window L={self.L}, batch has L={x.shape[2]}")
        trace = {}
        out = self._forward(x, trace)
        self.last_trace = trace
        return out

    __call__ = forward

    def predict(self, batch, batch_size=None) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        step = batch_size or len(batch) or 1
        with ad.no_grad():
            parts = [self.forward(batch[i:i + step]).data for i in range(0, len(batch), step)]
        return np.concatenate(parts) if parts else np.zeros((0, 3))

    def parameters(self):
        return list(self.params.values())

    def n_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            raise ConfigurationError("state dict parameter names do not match the model")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: shape {arr.shape} vs {p.shape}")
            p.data[...] = arr


# Res-Transformer ---------------------------------------------------------------

class ResTransformer(Model):
    """
    Stacked attention layers, row-wise FC (L->128->L) producing the information
    matrix, a two-conv stack, the shortcut sum with the raw input, and a dense
    multitask head. ``config.variant`` selects the ablations:

    a: linear queries instead of conv-Q; b: no convs, no shortcut;
    c: no convs, shortcut kept; d: convs kept, no shortcut;
    e: ``e_layers`` original encoder layers instead of the modified ones.
    """

    @property
    def name(self):
        v = self.config.variant
        return "res-transformer" if v == "full" else v

    @property
    def head_widths(self):
        return self.config.fc_widths_head

    @property
    def uses_convs(self):
        return self.config.variant not in ("b", "c")

    @property
    def uses_shortcut(self):
        return self.config.variant not in ("b", "d")

    def build(self):
        c = self.config
        L, d, m, F = c.L, c.d, c.heads, c.conv_filters
        if c.variant == "e":
            for i in range(c.e_layers):
                _build_encoder_layer(self, f"enc{i}", L, d, m, c.ffn_mult)
        else:
            for i in range(c.n_layers):
                p = f"layer{i}"
                if c.variant == "a":
                    self._weight(f"{p}.wq", (m, L, d), L, d)
                else:
                    self._conv(f"{p}.convq.conv1", F, 1)
                    self._conv(f"{p}.convq.conv2", 1, F)
                    self._weight(f"{p}.convq.proj", (m, L, d), L, d)
                self._weight(f"{p}.wk", (m, L, d), L, d)
                self._weight(f"{p}.wv", (m, L, d), L, d)
                self._weight(f"{p}.out.w", (m * d, L), m * d, L)
                self._zeros(f"{p}.out.b", (L,))
        self._dense("pre", L, c.fc_widths_pre)
        if self.uses_convs:
            self._conv("post.conv1", F, 1)
            self._conv("post.conv2", 1, F)
        self._dense("head", 3 * L, c.fc_widths_head)

    def layer_params(self, i):
        P, c = self.params, self.config
        p = f"layer{i}"
        heads = AttentionHeads(W_K=P[f"{p}.wk"], W_V=P[f"{p}.wv"], W_Q=P.get(f"{p}.wq"))
        if c.variant == "a":
            return heads, (P[f"{p}.out.w"], P[f"{p}.out.b"])
        cq = ConvQParams(P[f"{p}.convq.conv1.w"], P[f"{p}.convq.conv1.b"],
                         P[f"{p}.convq.conv2.w"], P[f"{p}.convq.conv2.b"], P[f"{p}.convq.proj"])
        return ModifiedLayerParams(cq, heads, P[f"{p}.out.w"], P[f"{p}.out.b"])

    def _forward(self, x, trace):
        c = self.config
        h, scores = x, []
        if c.variant == "e":
            for i in range(c.e_layers):
                h, s = encoder_layer(h, _encoder_params(self, f"enc{i}"))
                scores.append(s.data)
        else:
            for i in range(c.n_layers):
                if c.variant == "a":
                    heads, proj = self.layer_params(i)
                    h, s = multi_head(h, heads, proj)
                else:
                    h, s = modified_transformer_layer(h, self.layer_params(i))
                scores.append(s.data)
        info = self._apply_dense(h, "pre", 2)
        z = info
        if self.uses_convs:
            P = self.params
            z = conv_stack(info, P["post.conv1.w"], P["post.conv1.b"], P["post.conv2.w"], P["post.conv2.b"])
        if self.uses_shortcut:
            z = ad.add(z, x)
        trace["scores"] = scores
        trace["information"] = info.data
        trace["head_input"] = z.data
        return self._head(z)


def _build_encoder_layer(model, p, L, d, m, ffn_mult):
    model._weight(f"{p}.wq", (m, L, d), L, d)
    model._weight(f"{p}.wk", (m, L, d), L, d)
    model._weight(f"{p}.wv", (m, L, d), L, d)
    model._weight(f"{p}.out.w", (m * d, L), m * d, L)
    model._zeros(f"{p}.out.b", (L,))
    model._ones(f"{p}.ln1.g", (L,))
    model._zeros(f"{p}.ln1.b", (L,))
    model._weight(f"{p}.ff1.w", (L, ffn_mult * L), L, ffn_mult * L)
    model._zeros(f"{p}.ff1.b", (ffn_mult * L,))
    model._weight(f"{p}.ff2.w", (ffn_mult * L, L), ffn_mult * L, L)
    model._zeros(f"{p}.ff2.b", (L,))
    model._ones(f"{p}.ln2.g", (L,))
    model._zeros(f"{p}.ln2.b", (L,))


def _encoder_params(model, p):
    P = model.params
    heads = AttentionHeads(W_K=P[f"{p}.wk"], W_V=P[f"{p}.wv"], W_Q=P[f"{p}.wq"])
    return EncoderLayerParams(heads, P[f"{p}.out.w"], P[f"{p}.out.b"], P[f"{p}.ln1.g"], P[f"{p}.ln1.b"],
                              P[f"{p}.ff1.w"], P[f"{p}.ff1.b"], P[f"{p}.ff2.w"], P[f"{p}.ff2.b"],
                              P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])


# baselines -------------------------------------------------------------------------

class BPNN(Model):
    name = "bpnn"
    head_widths = (128, 32, 3)

    def build(self):
        self._dense("head", 3 * self.L, self.head_widths)

    def _forward(self, x, trace):
        return self._head(x)


class CNN1D(Model):
    """Modes as 3 channels, one 16-filter conv over time (kernel 3, pad 1)."""
    name = "cnn1d"
    filters = 16
    head_widths = (64, 3)

    def build(self):
        self._conv("conv", self.filters, 3, kh=1, kw=3)
        self._dense("head", self.filters * self.L, self.head_widths)

    def _forward(self, x, trace):
        img = ad.reshape(x, (x.shape[0], 3, 1, self.L))
        return self._head(ad.relu(self._apply_conv(img, "conv", padding=(0, 1))))


class CNN2D(Model):
    name = "cnn2d"
    filters = 8
    head_widths = (64, 32, 3)

    def build(self):
        self._conv("conv", self.filters, 1)
        self._dense("head", self.filters * 3 * self.L, self.head_widths)

    def _forward(self, x, trace):
        img = ad.reshape(x, (x.shape[0], 1, 3, self.L))
        return self._head(ad.relu(self._apply_conv(img, "conv")))


class LSTM(Model):
    """Three stacked LSTM layers of 32 units over the L steps of 3-vectors."""
    name = "lstm"
    hidden = 32
    n_layers = 3

    def build(self):
        n_in = 3
        H = self.hidden
        for i in range(self.n_layers):
            self._weight(f"lstm{i}.w", (n_in + H, 4 * H), n_in + H, 4 * H)
            self._zeros(f"lstm{i}.b", (4 * H,))
            n_in = H
        self._dense("head", H, self.head_widths)

    def _forward(self, x, trace):
        B, H = x.shape[0], self.hidden
        seq = [x[:, :, t] for t in range(self.L)]
        for i in range(self.n_layers):
            w, b = self.params[f"lstm{i}.w"], self.params[f"lstm{i}.b"]
            h = c = ad.Tensor(np.zeros((B, H)))
            outs = []
            for xt in seq:
                gates = ad.linear(ad.concat([xt, h], axis=1), w, b)
                i_g = ad.sigmoid(gates[:, :H])
                f_g = ad.sigmoid(gates[:, H:2 * H])
                o_g = ad.sigmoid(gates[:, 2 * H:3 * H])
                g_g = ad.tanh(gates[:, 3 * H:])
                c = ad.add(ad.mul(f_g, c), ad.mul(i_g, g_g))
                h = ad.mul(o_g, ad.tanh(c))
                outs.append(h)
            seq = outs
        return self._apply_dense(seq[-1], "head", len(self.head_widths))


class ConvLSTM(Model):
    """Three ConvLSTM layers (64 filters, 3x3) over a length-1 sequence of 1x3xL frames."""
    name = "convlstm"
    filters = 64
    n_layers = 3
    head_widths = (64, 32, 3)

    def build(self):
        c_in, F = 1, self.filters
        for i in range(self.n_layers):
            self._conv(f"cell{i}", 4 * F, c_in + F)
            c_in = F
        self._dense("head", F * 3 * self.L, self.head_widths)

    def _forward(self, x, trace):
        B, F = x.shape[0], self.filters
        frames = [ad.reshape(x, (B, 1, 3, self.L))]
        for i in range(self.n_layers):
            h = c = ad.Tensor(np.zeros((B, F, 3, self.L)))
            outs = []
            for frame in frames:
                gates = self._apply_conv(ad.concat([frame, h], axis=1), f"cell{i}")
                i_g = ad.sigmoid(gates[:, :F])
                f_g = ad.sigmoid(gates[:, F:2 * F])
                o_g = ad.sigmoid(gates[:, 2 * F:3 * F])
                g_g = ad.tanh(gates[:, 3 * F:])
                c = ad.add(ad.mul(f_g, c), ad.mul(i_g, g_g))
                h = ad.mul(o_g, ad.tanh(c))
                outs.append(h)
            frames = outs
        return self._head(frames[-1])


class STResNet(Model):
    """One residual unit: conv(1->8) relu conv(8->8), plus the input broadcast over channels."""
    name = "stresnet"
    filters = 8

    def build(self):
        self._conv("res.conv1", self.filters, 1)
        self._conv("res.conv2", self.filters, self.filters)
        self._dense("head", self.filters * 3 * self.L, self.head_widths)

    def _forward(self, x, trace):
        img = ad.reshape(x, (x.shape[0], 1, 3, self.L))
        r = self._apply_conv(ad.relu(self._apply_conv(img, "res.conv1")), "res.conv2")
        return self._head(ad.relu(ad.add(r, img)))


class TransformerBaseline(Model):
    name = "transformer"

    def build(self):
        c = self.config
        for i in range(c.n_layers):
            _build_encoder_layer(self, f"enc{i}", c.L, c.d, c.heads, c.ffn_mult)
        self._dense("head", 3 * c.L, self.head_widths)

    def _forward(self, x, trace):
        h, scores = x, []
        for i in range(self.config.n_layers):
            h, s = encoder_layer(h, _encoder_params(self, f"enc{i}"))
            scores.append(s.data)
        trace["scores"] = scores
        return self._head(h)


_BASELINE_CLASSES = {"bpnn": BPNN, "cnn1d": CNN1D, "cnn2d": CNN2D, "lstm": LSTM,
                     "convlstm": ConvLSTM, "stresnet": STResNet, "transformer": TransformerBaseline}


def build_res_transformer(config: ModelConfig | None = None) -> Model:
    return ResTransformer(config or ModelConfig())


def build_variant(config: ModelConfig) -> Model:
    if config.variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {config.variant!r}")
    return ResTransformer(config)


def build_baseline(kind: str, L: int = 12, seed: int = 0) -> Model:
    if kind not in _BASELINE_CLASSES:
        raise ConfigurationError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    if kind == "transformer":
        cfg = ModelConfig(L=L, d=32, heads=8, n_layers=6, seed=seed)
    else:
        cfg = ModelConfig(L=L, seed=seed)
    return _BASELINE_CLASSES[kind](cfg)


def build_model(arch: str, config: ModelConfig | None = None) -> Model:
    """Build any architecture by its CLI name. Baselines use only ``L`` and ``seed``
    from ``config`` (the Transformer baseline keeps its own 6x8x32 shape)."""
    config = config or ModelConfig()
    if arch in ("res-transformer", "full"):
        return build_res_transformer(dataclasses.replace(config, variant="full"))
    if arch in VARIANTS:
        return build_variant(dataclasses.replace(config, variant=arch))
    if arch in _BASELINE_CLASSES:
        return build_baseline(arch, config.L, config.seed)
    raise ConfigurationError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


# checkpoints -----------------------------------------------------------------------

MAGIC = b"FLOWCKPT"
FORMAT_VERSION = 1
_DIGEST = 32


def checkpoint_bytes(model: Model, meta=None) -> bytes:
    manifest, offset = [], 0
    for name, p in model.params.items():
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.data.size * 8
    header = {"arch": model.name, "config": model.config.to_dict(),
              "params": manifest, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in model.params.values())
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes + payload
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: Model, path, meta=None):
    """Magic, version, JSON header, little-endian float64 payload, SHA-256 trailer."""
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, meta))


def load_checkpoint(path) -> Model:
    """Rebuild the model recorded in ``path``; its ``meta`` dict lands on ``model.meta``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    prefix = len(MAGIC) + 8
    if len(blob) < prefix + _DIGEST:
        raise CheckpointError("checkpoint is truncated")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a flowcast checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[len(MAGIC):prefix])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if len(body) < prefix + hlen:
        raise CheckpointError("checkpoint is truncated")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    try:
        header = json.loads(body[prefix:prefix + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None
    payload = body[prefix + hlen:]
    model = build_model(header["arch"], ModelConfig.from_dict(header["config"]))
    state = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start, stop = entry["offset"], entry["offset"] + 8 * n
        if stop > len(payload):
            raise CheckpointError(f"payload too short for parameter {entry['name']}")
        state[entry["name"]] = np.frombuffer(payload[start:stop], dtype="<f8").reshape(entry["shape"])
    if sum(8 * int(np.prod(e["shape"], dtype=np.int64)) for e in header["params"]) != len(payload):
        raise CheckpointError("payload size does not match the parameter manifest")
    try:
        model.load_state_dict(state)
    except (ConfigurationError, DimensionError) as exc:
        raise CheckpointError(f"checkpoint does not fit its architecture: {exc}") from None
    model.meta = header.get("meta", {})
    return model
