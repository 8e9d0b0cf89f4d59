"""
Scaled dot-product attention across the three traffic modes.

Inputs are (..., 3, L): one row per mode, one column per historical slot.
Attention mixes rows, so every score matrix is 3x3. Per-head weights are
stored stacked as (m, L, d) tensors; ``heads.head(i)`` gives one head's view.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataflow import MODES
from .errors import ConfigurationError, DimensionError, UsageError


@dataclass
class AttentionHeadParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor


@dataclass
class AttentionHeads:
    """Stacked per-head projections. ``W_Q`` is None when Q comes from conv-Q."""
    W_K: Tensor
    W_V: Tensor
    W_Q: Tensor | None = None

    def __post_init__(self):
        shapes = [w.shape for w in (self.W_Q, self.W_K, self.W_V) if w is not None]
        if any(len(s) != 3 for s in shapes):
            raise DimensionError(f"stacked head weights must be (m, L, d), got {shapes}")
        if len({s[:2] for s in shapes}) != 1:
            raise DimensionError(f"heads disagree on (m, L): {shapes}")
        if self.W_Q is not None and self.W_Q.shape[2] != self.W_K.shape[2]:
            raise ConfigurationError(f"d_q {self.W_Q.shape[2]} != d_k {self.W_K.shape[2]}")

    def __len__(self):
        return self.W_K.shape[0]

    @property
    def d_v(self):
        return self.W_V.shape[2]

    def head(self, i) -> AttentionHeadParams:
        wq = None if self.W_Q is None else self.W_Q[i]
        return AttentionHeadParams(wq, self.W_K[i], self.W_V[i])


@dataclass
class ConvQParams:
    conv1_w: Tensor   # (8, 1, 3, 3)
    conv1_b: Tensor   # (8,)
    conv2_w: Tensor   # (1, 8, 3, 3)
    conv2_b: Tensor   # (1,)
    proj: Tensor      # (m, L, d_q)


@dataclass
class ScoreMatrix:
    layer_index: int
    head_index: int
    values: np.ndarray
    labels: tuple = MODES


def _check_modes(X):
    if X.shape[-2] != 3:
        raise DimensionError(f"expected 3 mode rows, got input shape {X.shape}")


def project_qkv(X, head: AttentionHeadParams):
    """Q = X W_Q, K = X W_K, V = X W_V."""
    X = ad.as_tensor(X)
    _check_modes(X)
    for name, w in (("W_Q", head.W_Q), ("W_K", head.W_K), ("W_V", head.W_V)):
        if w.shape[0] != X.shape[-1]:
            raise DimensionError(f"{name} has {w.shape[0]} rows, input has width {X.shape[-1]}")
    return ad.matmul(X, head.W_Q), ad.matmul(X, head.W_K), ad.matmul(X, head.W_V)


def scaled_dot_attention(Q, K, V):
    """Return (softmax(Q K^T / sqrt(d_k)) V, score matrix). Leading axes are batch axes."""
    Q, K, V = ad.as_tensor(Q), ad.as_tensor(K), ad.as_tensor(V)
    if Q.shape[-1] != K.shape[-1]:
        raise ConfigurationError(f"query width {Q.shape[-1]} != key width {K.shape[-1]}")
    logits = ad.mul_scalar(ad.matmul(Q, ad.swap_last(K)), 1.0 / math.sqrt(K.shape[-1]))
    score = ad.softmax(logits, axis=-1)
    return ad.matmul(score, V), score


def conv_stack(X, w1, b1, w2, b2):
    """(B, 3, L) -> conv(1->C) -> relu -> conv(C->1) -> (B, 3, L); 3x3 kernels, stride 1, pad 1."""
    X = ad.as_tensor(X)
    batched = X.ndim == 3
    img = ad.reshape(X, (X.shape[0], 1, *X.shape[1:]) if batched else (1, *X.shape))
    h = ad.relu(ad.conv2d(img, w1, b1, stride=1, padding=1))
    out = ad.conv2d(h, w2, b2, stride=1, padding=1)
    return ad.reshape(out, X.shape)


def conv_q(X, p: ConvQParams, head_index=None):
    """Conv-Q branch. Returns (..., m, 3, d_q) for all heads or (..., 3, d_q) for one head."""
    X = ad.as_tensor(X)
    _check_modes(X)
    feat = conv_stack(X, p.conv1_w, p.conv1_b, p.conv2_w, p.conv2_b)
    if head_index is not None:
        return ad.matmul(feat, p.proj[head_index])
    lead = feat.shape[:-2]
    feat = ad.reshape(feat, (*lead, 1, *feat.shape[-2:]))
    return ad.matmul(feat, p.proj)


def multi_head(X, heads: AttentionHeads, out_proj, Q=None):
    """
    Run every head on ``X``, concatenate outputs along features in head order
    and apply the output projection ``(weight (m*d_v, L_out), bias)``.

    ``Q`` overrides the linear query projection with precomputed (..., m, 3, d_q)
    queries. Returns (output (..., 3, L_out), scores (..., m, 3, 3)).
    """
    X = ad.as_tensor(X)
    _check_modes(X)
    m = len(heads)
    if m < 1:
        raise ConfigurationError("multi-head attention needs at least one head")
    if heads.W_K.shape[1] != X.shape[-1]:
        raise DimensionError(f"head weights expect width {heads.W_K.shape[1]}, input is {X.shape}")
    lead = X.shape[:-2]
    Xh = ad.reshape(X, (*lead, 1, *X.shape[-2:]))
    if Q is None:
        if heads.W_Q is None:
            raise UsageError("no query projection and no precomputed Q")
        Q = ad.matmul(Xh, heads.W_Q)
    K = ad.matmul(Xh, heads.W_K)
    V = ad.matmul(Xh, heads.W_V)
    out, scores = scaled_dot_attention(Q, K, V)          # (..., m, 3, d_v)
    nd = out.ndim
    perm = (*range(nd - 3), nd - 2, nd - 3, nd - 1)       # -> (..., 3, m, d_v)
    merged = ad.reshape(ad.transpose(out, perm), (*lead, 3, m * heads.d_v))
    weight, bias = out_proj
    if weight.shape[0] != m * heads.d_v:
        raise DimensionError(f"output projection expects {weight.shape[0]} features, heads give {m * heads.d_v}")
    return ad.linear(merged, weight, bias), scores


@dataclass
class ModifiedLayerParams:
    conv_q: ConvQParams
    heads: AttentionHeads          # W_Q unused
    out_w: Tensor                  # (m*d_v, L)
    out_b: Tensor                  # (L,)


def modified_transformer_layer(X, p: ModifiedLayerParams):
    """Conv-Q queries, linear K/V, multi-head attention, projection back to (3, L).

    Returns (output, scores (..., m, 3, 3)).
    """
    Q = conv_q(X, p.conv_q)
    return multi_head(X, p.heads, (p.out_w, p.out_b), Q=Q)


@dataclass
class EncoderLayerParams:
    """Original encoder layer: linear Q/K/V attention, then post-norm residual FFN."""
    heads: AttentionHeads
    out_w: Tensor
    out_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor


def encoder_layer(X, p: EncoderLayerParams):
    att, scores = multi_head(X, p.heads, (p.out_w, p.out_b))
    h = ad.layer_norm(ad.add(X, att), p.ln1_g, p.ln1_b)
    ff = ad.linear(ad.relu(ad.linear(h, p.ff1_w, p.ff1_b)), p.ff2_w, p.ff2_b)
    return ad.layer_norm(ad.add(h, ff), p.ln2_g, p.ln2_b), scores


# score export -------------------------------------------------------------------

def extract_scores(model, x=None, sample: int = 0):
    """
    Score matrices of every (layer, head) for one sample.

    With ``x`` given the model is run on it first; otherwise the scores of the
    model's most recent forward pass are used.
    """
    if x is not None:
        x = np.asarray(x, dtype=np.float64)
        with ad.no_grad():
            model.forward(x if x.ndim == 3 else x[None])
    trace = getattr(model, "last_trace", None)
    if trace is None:
        raise UsageError("extract_scores called before any forward pass")
    per_layer = trace.get("scores")
    if not per_layer:
        raise UsageError(f"model {model.name!r} records no attention scores")
    out = []
    for li, s in enumerate(per_layer):
        s = s[sample]
        for hi in range(s.shape[0]):
            out.append(ScoreMatrix(li, hi, s[hi].copy()))
    return out


def scores_to_csv(scores, path):
    """One labelled 3x3 block per matrix, blocks separated by a blank line."""
    lines = []
    for sm in scores:
        lines.append(f"# layer={sm.layer_index} head={sm.head_index}")
        lines.append(",".join(["from\\to", *sm.labels]))
        for label, row in zip(sm.labels, sm.values):
            lines.append(",".join([label, *(repr(float(v)) for v in row)]))
        lines.append("")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines))


def read_scores_csv(path):
    out, header, rows = [], None, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# layer="):
                parts = dict(kv.split("=") for kv in line[2:].split())
                header = (int(parts["layer"]), int(parts["head"]))
                rows = []
            elif line.startswith("from\\to") or not line:
                continue
            else:
                rows.append([float(v) for v in line.split(",")[1:]])
                if len(rows) == 3:
                    out.append(ScoreMatrix(header[0], header[1], np.array(rows)))
    return out


def scores_to_json(scores, path):
    doc = {"modes": list(MODES),
           "matrices": [{"layer": sm.layer_index, "head": sm.head_index,
                         "values": sm.values.tolist()} for sm in scores]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
