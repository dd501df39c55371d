"""Decomposed spatial-temporal attention blocks.

A block sees three streams: the test frame tokens, ``m`` reference frame
token maps and ``n`` object vectors. Attention is asymmetric:

* objects attend to objects only;
* reference ``i`` attends to itself and to the objects, never to another
  reference;
* the test frame attends to itself and to every reference, never to the
  objects.

All keys and values are computed from the block input (after the first
layernorm), so one block is exactly a single masked joint attention over
the stacked rows; :func:`joint_attention_oracle` computes that directly and
is the reference the decomposed path is checked against.

The block is pre-layernorm: ``x + Attn(LN1(x))`` then ``x + FFN(LN2(x))``
with a 4x ReLU feed-forward. Every step goes through the tape primitives,
so losses on block outputs can be differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .embedding import FeatureMap
from .exceptions import ContractError, DimensionError
from .tensor import (
    Tensor,
    add,
    add_row,
    attend_values,
    concat,
    layernorm,
    matmul,
    relu,
    scale,
    slice_axis,
    softmax_rows,
    transpose,
)

MODES = ("full", "no_object", "no_spatial", "joint")


@dataclass(frozen=True)
class ObjectFeatures:
    """One row per target, in target-ID order (ID 1 first)."""

    vectors: Tensor

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise DimensionError(f"object features must be (n, C), got {self.vectors.shape}")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class StmlWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    ff1: Tensor
    ff1_bias: Tensor
    ff2: Tensor
    ff2_bias: Tensor
    heads: int = field(default=4)
    eps: float = field(default=1e-5)

    def __post_init__(self):
        C = self.wq.shape[0]
        if C % self.heads:
            raise ContractError(f"channel dim {C} is not divisible by {self.heads} heads")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (C, C):
                raise DimensionError(f"{name} must be ({C}, {C})")
        if self.ff1.shape[0] != C or self.ff2.shape != (self.ff1.shape[1], C):
            raise DimensionError("feed-forward shapes do not chain")

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @classmethod
    def create(cls, channels=64, heads=4, expansion=4, rng=None) -> "StmlWeights":
        rng = np.random.default_rng(rng)
        C, H = channels, channels * expansion

        def dense(fan_in, fan_out):
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)))

        return cls(
            wq=dense(C, C), wk=dense(C, C), wv=dense(C, C), wo=dense(C, C),
            ln1_gamma=Tensor(np.ones(C)), ln1_beta=Tensor(np.zeros(C)),
            ln2_gamma=Tensor(np.ones(C)), ln2_beta=Tensor(np.zeros(C)),
            ff1=dense(C, H), ff1_bias=Tensor(np.zeros(H)),
            ff2=dense(H, C), ff2_bias=Tensor(np.zeros(C)),
            heads=heads,
        )

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if isinstance(getattr(self, f.name), Tensor)}

    def replace(self, **changes) -> "StmlWeights":
        return replace(self, **changes)


@dataclass(frozen=True)
class StmlState:
    test: FeatureMap
    references: tuple[FeatureMap, ...] = ()
    objects: ObjectFeatures | None = None

    def __post_init__(self):
        object.__setattr__(self, "references", tuple(self.references))
        N, C = self.test.tokens.shape
        for r in self.references:
            if r.tokens.shape != (N, C):
                raise DimensionError(f"reference {r.tokens.shape} does not match test {(N, C)}")
        if self.objects is not None and self.objects.vectors.shape[1] != C:
            raise DimensionError("object features must share the channel dimension")

    @property
    def m(self) -> int:
        return len(self.references)


def _tok(x) -> Tensor:
    if isinstance(x, FeatureMap):
        return x.tokens
    if isinstance(x, ObjectFeatures):
        return x.vectors
    return x


def _multi_head(q: Tensor, k: Tensor, v: Tensor, w: StmlWeights, logit_bias=None, weights_out=None,
                exchangeable=None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v per head, heads concatenated, times W^O.

    Keys in the ``exchangeable`` slice are the object rows. Their sums run
    in sorted order so relabelling the targets permutes outputs exactly.
    """
    d = w.head_dim
    inv = 1.0 / math.sqrt(d)
    heads = []
    for h in range(w.heads):
        lo, hi = h * d, (h + 1) * d
        qh, kh, vh = (slice_axis(t, 1, lo, hi) for t in (q, k, v))
        logits = scale(matmul(qh, transpose(kh)), inv)
        if logit_bias is not None:
            logits = add(logits, logit_bias)
        attn = softmax_rows(logits, exchangeable)
        if weights_out is not None:
            weights_out.append(attn)
        heads.append(attend_values(attn, vh, exchangeable))
    out = heads[0] if len(heads) == 1 else concat(heads, axis=1)
    return matmul(out, w.wo)


def _attend(query, key_sources: Sequence, w: StmlWeights, logit_bias=None, weights_out=None,
            exchangeable=None) -> Tensor:
    q = matmul(_tok(query), w.wq)
    srcs = [_tok(s) for s in key_sources]
    if exchangeable is None:
        start = 0
        for src, t in zip(key_sources, srcs):
            if isinstance(src, ObjectFeatures):
                exchangeable = slice(start, start + t.shape[0])
            start += t.shape[0]
    ks = [matmul(s, w.wk) for s in srcs]
    vs = [matmul(s, w.wv) for s in srcs]
    k = ks[0] if len(ks) == 1 else concat(ks, axis=0)
    v = vs[0] if len(vs) == 1 else concat(vs, axis=0)
    return _multi_head(q, k, v, w, logit_bias, weights_out, exchangeable)


def object_self_attention(objects: ObjectFeatures, w: StmlWeights, weights_out=None) -> ObjectFeatures:
    """Attention among the object vectors only."""
    if objects.n < 1:
        raise ContractError("need at least one object")
    return ObjectFeatures(_attend(objects, [objects], w, weights_out=weights_out))


def reference_object_enhancement(
    ref: FeatureMap,
    objects: ObjectFeatures | None,
    w: StmlWeights,
    object_logit_offset: float | None = None,
    weights_out=None,
) -> FeatureMap:
    """Queries from one reference; keys/values from that reference plus the objects.

    ``object_logit_offset`` adds a constant to the logits of every object
    key (a large negative value hides the objects). ``objects=None`` gives
    plain self-attention of the reference.
    """
    if objects is None:
        return ref.with_tokens(_attend(ref, [ref], w, weights_out=weights_out))
    bias = None
    if object_logit_offset is not None:
        N, n = ref.n_tokens, objects.n
        b = np.zeros((N, N + n))
        b[:, N:] = object_logit_offset
        bias = Tensor(b)
    return ref.with_tokens(_attend(ref, [ref, objects], w, bias, weights_out))


def test_reference_correlation(
    test: FeatureMap, references: Sequence[FeatureMap], w: StmlWeights, weights_out=None
) -> FeatureMap:
    """Queries from the test map; keys/values from the test map and all references.

    An empty reference list is allowed and reduces to self-attention.
    """
    for r in references:
        if r.tokens.shape != test.tokens.shape:
            raise DimensionError(f"reference {r.tokens.shape} does not match test {test.tokens.shape}")
    return test.with_tokens(_attend(test, [test, *references], w, weights_out=weights_out))


# ---------------------------------------------------------------------------
# block


def _ln1(x: Tensor, w: StmlWeights) -> Tensor:
    return layernorm(x, w.ln1_gamma, w.ln1_beta, w.eps)


def _ffn_residual(x: Tensor, w: StmlWeights) -> Tensor:
    h = relu(add_row(matmul(layernorm(x, w.ln2_gamma, w.ln2_beta, w.eps), w.ff1), w.ff1_bias))
    return add(x, add_row(matmul(h, w.ff2), w.ff2_bias))


def stml_block(state: StmlState, w: StmlWeights, mode: str = "full", update_objects: bool = True) -> StmlState:
    """One attention + feed-forward block over the three streams.

    ``mode`` selects the ablation: ``no_object`` drops the objects from the
    reference keys (objects pass through untouched), ``no_spatial`` ignores
    the references, ``joint`` applies unrestricted self-attention over all
    stacked rows. With ``update_objects=False`` the object stream is
    returned unchanged.
    """
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}; expected one of {MODES}")
    objects = state.objects
    if mode != "no_object" and objects is None:
        raise ContractError(f"mode {mode!r} needs object features")
    if mode == "joint":
        return _joint_block(state, w, update_objects)

    T = state.test.tokens
    test_ln = state.test.with_tokens(_ln1(T, w))
    refs = () if mode == "no_spatial" else state.references
    refs_ln = [r.with_tokens(_ln1(r.tokens, w)) for r in refs]

    a_t = test_reference_correlation(test_ln, refs_ln, w)
    new_test = state.test.with_tokens(_ffn_residual(add(T, a_t.tokens), w))

    if mode == "no_object":
        new_refs = []
        for r, r_ln in zip(refs, refs_ln):
            a_r = reference_object_enhancement(r_ln, None, w)
            new_refs.append(r.with_tokens(_ffn_residual(add(r.tokens, a_r.tokens), w)))
        return StmlState(new_test, new_refs, objects)

    obj_ln = ObjectFeatures(_ln1(objects.vectors, w))
    new_refs = []
    for r, r_ln in zip(refs, refs_ln):
        a_r = reference_object_enhancement(r_ln, obj_ln, w)
        new_refs.append(r.with_tokens(_ffn_residual(add(r.tokens, a_r.tokens), w)))
    if mode == "no_spatial":
        new_refs = list(state.references)

    new_objects = objects
    if update_objects:
        a_o = object_self_attention(obj_ln, w)
        new_objects = ObjectFeatures(_ffn_residual(add(objects.vectors, a_o.vectors), w))
    return StmlState(new_test, new_refs, new_objects)


def _split_rows(rows: Tensor, state: StmlState) -> tuple:
    n = state.objects.n if state.objects is not None else 0
    N = state.test.n_tokens
    o = slice_axis(rows, 0, 0, n) if n else None
    refs = [slice_axis(rows, 0, n + i * N, n + (i + 1) * N) for i in range(state.m)]
    t = slice_axis(rows, 0, n + state.m * N, n + (state.m + 1) * N)
    return o, refs, t


def _joint_block(state: StmlState, w: StmlWeights, update_objects: bool) -> StmlState:
    if state.objects is None or state.objects.n == 0 or state.m == 0:
        raise ContractError("joint mode needs at least one object and one reference")
    rows = concat([state.objects.vectors, *(r.tokens for r in state.references), state.test.tokens], axis=0)
    ln = _ln1(rows, w)
    out = _ffn_residual(add(rows, _attend(ln, [ln], w, exchangeable=slice(0, state.objects.n))), w)
    o, refs, t = _split_rows(out, state)
    return StmlState(
        state.test.with_tokens(t),
        [r.with_tokens(x) for r, x in zip(state.references, refs)],
        ObjectFeatures(o) if update_objects else state.objects,
    )


def stml_forward(
    state: StmlState, weights: Sequence[StmlWeights], mode: str = "full", update_objects: bool = True
) -> StmlState:
    if not weights:
        raise ContractError("need at least one block")
    for w in weights:
        state = stml_block(state, w, mode, update_objects)
    return state


# ---------------------------------------------------------------------------
# oracle: one big masked attention


def stacked_layout(n: int, m: int, N: int) -> dict[str, slice]:
    """Row ranges of each stream in the stacked [objects; refs...; test] matrix."""
    layout = {"objects": slice(0, n)}
    for i in range(m):
        layout[f"ref{i}"] = slice(n + i * N, n + (i + 1) * N)
    layout["test"] = slice(n + m * N, n + (m + 1) * N)
    return layout


def asymmetric_visibility(n: int, m: int, N: int, objects_to_refs: bool = True) -> np.ndarray:
    """Visibility of the decomposed block: rows are queries, columns keys.

    With ``objects_to_refs=False`` references no longer see the objects
    (the no-object ablation).
    """
    lay = stacked_layout(n, m, N)
    total = n + (m + 1) * N
    vis = np.zeros((total, total), dtype=bool)
    o, t = lay["objects"], lay["test"]
    vis[o, o] = True
    for i in range(m):
        r = lay[f"ref{i}"]
        vis[r, r] = True
        if objects_to_refs:
            vis[r, o] = True
        vis[t, r] = True
    vis[t, t] = True
    return vis


def block_diagonal_visibility(n: int, m: int, N: int) -> np.ndarray:
    lay = stacked_layout(n, m, N)
    total = n + (m + 1) * N
    vis = np.zeros((total, total), dtype=bool)
    for s in lay.values():
        vis[s, s] = True
    return vis


def _np_layernorm(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def joint_attention_oracle(state: StmlState, w: StmlWeights, visibility) -> StmlState:
    """Reference block: masked attention over all stacked rows at once.

    Row order is objects, then each reference, then the test map. Output
    streams are returned as a new state (object rows always updated).
    """
    n = state.objects.n if state.objects is not None else 0
    N = state.test.n_tokens
    total = n + (state.m + 1) * N
    vis = np.asarray(visibility)
    if vis.dtype != bool or vis.shape != (total, total):
        raise ContractError(f"visibility must be a boolean ({total}, {total}) matrix, got {vis.dtype} {vis.shape}")
    if not vis.any(axis=1).all():
        raise ContractError("every query row must see at least one key")

    parts = ([state.objects.vectors.numpy()] if n else []) + [r.tokens.numpy() for r in state.references]
    X = np.vstack(parts + [state.test.tokens.numpy()])
    P = {k: v.numpy() for k, v in w.tensors().items()}

    ln = _np_layernorm(X, P["ln1_gamma"], P["ln1_beta"], w.eps)
    q, k, v = ln @ P["wq"], ln @ P["wk"], ln @ P["wv"]
    d = w.head_dim
    heads = []
    for h in range(w.heads):
        c = slice(h * d, (h + 1) * d)
        logits = np.where(vis, q[:, c] @ k[:, c].T / math.sqrt(d), -np.inf)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        heads.append((e / e.sum(axis=1, keepdims=True)) @ v[:, c])
    Y = X + np.hstack(heads) @ P["wo"]
    hidden = np.maximum(_np_layernorm(Y, P["ln2_gamma"], P["ln2_beta"], w.eps) @ P["ff1"] + P["ff1_bias"], 0.0)
    Y = Y + hidden @ P["ff2"] + P["ff2_bias"]

    lay = stacked_layout(n, state.m, N)
    return StmlState(
        state.test.with_tokens(Tensor(Y[lay["test"]])),
        [r.with_tokens(Tensor(Y[lay[f"ref{i}"]])) for i, r in enumerate(state.references)],
        ObjectFeatures(Tensor(Y[lay["objects"]])) if n else None,
    )
