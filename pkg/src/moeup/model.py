"""Executable model definitions: gated FFN, sparse MoE layer, and a toy LM.

The FFN uses the gated-linear form

    ffn(x) = (swish(x @ W_gate) * (x @ W_up)) @ W_down,   swish(z) = z * sigmoid(z)

with no bias terms. An MoE layer holds a router matrix (hidden x n_routed),
``n_routed`` expert FFNs, and optionally always-active shared experts. Routing
is dropless token-choice top-k: every token is processed by exactly its k
highest-logit experts, the gate weights being a softmax over the selected
logits (so they sum to 1; non-selected experts get an exact 0). This equals
renormalizing the full softmax over the selected entries.

The toy LM is a decoder-only transformer: token embedding + learned position
embedding, then per layer [pre-norm causal attention, pre-norm FFN-or-MoE]
with residual connections, a final norm, and an untied output head. Norms are
scale-only layer norms. Query-group attention is not implemented by the toy
model (it requires num_query_groups == num_heads); the accounting module
still honors grouped-query configs.

Gradients are reverse-mode via per-layer hand-written backward functions at
64-bit precision; there is no general tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import POSITION_SLOT, Checkpoint, ffn_slot_names
from .config import ModelConfig, ValidationError
from .numerics import NormalParams, RngStream, sample_normal, softmax, top_k, top_k_batch

_LN_EPS = 1e-6


# ---------------------------------------------------------------------------
# Weight containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FfnWeights:
    gate: np.ndarray  # (d_h, width)
    up: np.ndarray    # (d_h, width)
    down: np.ndarray  # (width, d_h)

    def __post_init__(self):
        d_h, width = self.gate.shape
        if self.up.shape != (d_h, width) or self.down.shape != (width, d_h):
            raise ValidationError(
                f"inconsistent FFN shapes: gate {self.gate.shape}, up {self.up.shape}, "
                f"down {self.down.shape}")

    @property
    def width(self) -> int:
        return self.gate.shape[1]


@dataclass(frozen=True)
class MoeLayerWeights:
    router: np.ndarray            # (d_h, n_routed)
    experts: tuple[FfnWeights, ...]
    shared: tuple[FfnWeights, ...] = ()

    def __post_init__(self):
        if self.router.ndim != 2:
            raise ValidationError(f"router must be 2D, got shape {self.router.shape}")
        if self.router.shape[1] != len(self.experts):
            raise ValidationError(
                f"router has {self.router.shape[1]} columns but {len(self.experts)} experts")
        object.__setattr__(self, "experts", tuple(self.experts))
        object.__setattr__(self, "shared", tuple(self.shared))

    @property
    def num_experts(self) -> int:
        return len(self.experts)


# ---------------------------------------------------------------------------
# Elementwise pieces
# ---------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))  # never overflows; both branches rebuilt from it
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _ffn_fwd(w: FfnWeights, x: np.ndarray):
    gate_pre = x @ w.gate
    up_out = x @ w.up
    sig = _sigmoid(gate_pre)
    act = gate_pre * sig
    prod = act * up_out
    y = prod @ w.down
    return y, (x, gate_pre, up_out, sig, act, prod)


def _ffn_bwd(w: FfnWeights, cache, dy: np.ndarray):
    x, gate_pre, up_out, sig, act, prod = cache
    d_prod = dy @ w.down.T
    d_down = prod.T @ dy
    d_up_out = d_prod * act
    d_act = d_prod * up_out
    d_gate_pre = d_act * (sig * (1.0 + gate_pre * (1.0 - sig)))
    d_gate = x.T @ d_gate_pre
    d_up = x.T @ d_up_out
    dx = d_gate_pre @ w.gate.T + d_up_out @ w.up.T
    return dx, d_gate, d_up, d_down


def ffn_forward(w: FfnWeights, x: np.ndarray) -> np.ndarray:
    """Gated FFN applied to a single hidden vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (w.gate.shape[0],):
        raise ValidationError(f"input has shape {x.shape}, expected ({w.gate.shape[0]},)")
    y, _ = _ffn_fwd(w, x[None, :])
    return y[0]


def _partial_ffn(w: FfnWeights, x: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """FFN restricted to a subset of intermediate dimensions (empty -> 0)."""
    if cols.size == 0:
        return np.zeros(w.down.shape[1], dtype=np.float64)
    gate_pre = x @ w.gate[:, cols]
    act = gate_pre * _sigmoid(gate_pre)
    return (act * (x @ w.up[:, cols])) @ w.down[cols, :]


# ---------------------------------------------------------------------------
# MoE layer
# ---------------------------------------------------------------------------

def moe_forward(w: MoeLayerWeights, x: np.ndarray, k: int):
    """Sparse MoE layer on a single hidden vector.

    Returns ``(y, gates, selected)`` where ``gates`` is the full-length gate
    vector (softmax over the k selected logits, exact zeros elsewhere) and
    ``selected`` holds the k chosen expert indices, ascending.
    """
    x = np.asarray(x, dtype=np.float64)
    d_h, n = w.router.shape
    if x.shape != (d_h,):
        raise ValidationError(f"input has shape {x.shape}, expected ({d_h},)")
    if not (1 <= k <= n):
        raise ValidationError(f"k must be in [1, {n}], got {k}")
    logits = x @ w.router
    selected = top_k(logits, k)
    gates = np.zeros(n, dtype=np.float64)
    gates[selected] = softmax(logits[selected])
    y = np.zeros(d_h, dtype=np.float64)
    for e in selected:
        y += gates[e] * ffn_forward(w.experts[e], x)
    for sw in w.shared:
        y += ffn_forward(sw, x)
    return y, gates, selected


def decompose_moe_output(w: MoeLayerWeights, x: np.ndarray, k: int, retained_masks):
    """Evaluate both sides of the retained/diverse output decomposition.

    For experts built from one dense parent by re-initializing a subset of
    intermediate dimensions, the layer output equals

        common(x) + sum_i g_i * [retained_i(x) - common(x) + diverse_i(x)]

    where ``common`` runs over the dimensions retained by *all* selected
    experts (parent weights, identical across them), ``retained_i`` over
    expert i's retained dimensions, and ``diverse_i`` over its re-initialized
    dimensions. The identity holds because the selected gates sum to 1.

    ``retained_masks`` gives one boolean mask (or index array) per expert over
    its intermediate dimensions. Returns ``(lhs, rhs)`` with ``lhs`` the plain
    layer output; shared experts are not supported here.
    """
    if w.shared:
        raise ValidationError("decomposition is defined for layers without shared experts")
    retained_masks = list(retained_masks)
    if len(retained_masks) != w.num_experts:
        raise ValidationError(f"got {len(retained_masks)} masks for {w.num_experts} experts")
    masks = []
    for e, mask in enumerate(retained_masks):
        width = w.experts[e].width
        arr = np.asarray(mask)
        if arr.dtype == bool:
            if arr.shape != (width,):
                raise ValidationError(
                    f"mask for expert {e} has shape {arr.shape}, expected ({width},)")
            masks.append(arr)
        else:
            flat = np.zeros(width, dtype=bool)
            if arr.size and (arr.min() < 0 or arr.max() >= width):
                raise ValidationError(f"mask indices for expert {e} out of range [0, {width})")
            flat[arr.astype(np.int64)] = True
            masks.append(flat)

    x = np.asarray(x, dtype=np.float64)
    lhs, gates, selected = moe_forward(w, x, k)

    common_mask = np.ones(w.experts[0].width, dtype=bool)
    for e in selected:
        common_mask &= masks[e]
    common_cols = np.nonzero(common_mask)[0]
    common_out = _partial_ffn(w.experts[selected[0]], x, common_cols)

    rhs = common_out.copy()
    for e in range(w.num_experts):
        if gates[e] == 0.0:
            continue
        retained_out = _partial_ffn(w.experts[e], x, np.nonzero(masks[e])[0])
        diverse_out = _partial_ffn(w.experts[e], x, np.nonzero(~masks[e])[0])
        rhs += gates[e] * (retained_out - common_out + diverse_out)
    return lhs, rhs


def _moe_fwd(w: MoeLayerWeights, x: np.ndarray, k: int):
    """Batched MoE forward over rows of ``x`` (N, d_h); returns (y, cache)."""
    n = w.num_experts
    logits = x @ w.router                                   # (N, n)
    probs = softmax(logits, axis=-1)
    sel = top_k_batch(logits, k)                            # (N, k)
    gate_logits = np.take_along_axis(logits, sel, axis=-1)
    gates_sel = softmax(gate_logits, axis=-1)               # (N, k)
    selmask = np.zeros_like(logits, dtype=bool)
    np.put_along_axis(selmask, sel, True, axis=-1)
    gates_full = np.zeros_like(logits)
    np.put_along_axis(gates_full, sel, gates_sel, axis=-1)

    y = np.zeros_like(x)
    expert_caches = []
    for e in range(n):
        idx = np.nonzero(selmask[:, e])[0]
        if idx.size:
            fe, cache_e = _ffn_fwd(w.experts[e], x[idx])
            y[idx] += gates_full[idx, e:e + 1] * fe
            expert_caches.append((idx, cache_e, fe))
        else:
            expert_caches.append((idx, None, None))
    shared_caches = []
    for sw in w.shared:
        fs, cache_s = _ffn_fwd(sw, x)
        y += fs
        shared_caches.append(cache_s)
    cache = (x, logits, probs, sel, gates_sel, gates_full, expert_caches, shared_caches)
    return y, cache


def _moe_bwd(w: MoeLayerWeights, cache, dy: np.ndarray, d_probs: np.ndarray | None):
    """Backward for :func:`_moe_fwd`.

    ``d_probs`` optionally injects an upstream gradient on the full router
    softmax (used by the load-balancing loss). Top-k selection itself is
    piecewise constant and carries no gradient.
    """
    x, logits, probs, sel, gates_sel, gates_full, expert_caches, shared_caches = cache
    dx = np.zeros_like(x)
    d_gates_full = np.zeros_like(gates_full)
    expert_grads = []
    for e, (idx, cache_e, fe) in enumerate(expert_caches):
        if idx.size:
            dfe = gates_full[idx, e:e + 1] * dy[idx]
            dxe, d_gate, d_up, d_down = _ffn_bwd(w.experts[e], cache_e, dfe)
            dx[idx] += dxe
            d_gates_full[idx, e] = np.einsum("nd,nd->n", dy[idx], fe)
            expert_grads.append((d_gate, d_up, d_down))
        else:
            ew = w.experts[e]
            expert_grads.append((np.zeros_like(ew.gate), np.zeros_like(ew.up),
                                 np.zeros_like(ew.down)))
    shared_grads = []
    for sw, cache_s in zip(w.shared, shared_caches):
        dxs, d_gate, d_up, d_down = _ffn_bwd(sw, cache_s, dy)
        dx += dxs
        shared_grads.append((d_gate, d_up, d_down))

    d_gates_sel = np.take_along_axis(d_gates_full, sel, axis=-1)
    inner = np.sum(gates_sel * d_gates_sel, axis=-1, keepdims=True)
    d_gate_logits = gates_sel * (d_gates_sel - inner)
    d_logits = np.zeros_like(logits)
    np.put_along_axis(d_logits, sel, d_gate_logits, axis=-1)
    if d_probs is not None:
        inner_p = np.sum(probs * d_probs, axis=-1, keepdims=True)
        d_logits += probs * (d_probs - inner_p)
    d_router = x.T @ d_logits
    dx += d_logits @ w.router.T
    return dx, d_router, expert_grads, shared_grads


# ---------------------------------------------------------------------------
# Norm / attention pieces
# ---------------------------------------------------------------------------

def _layernorm_fwd(x: np.ndarray, g: np.ndarray):
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv_std
    return g * xhat, (xhat, inv_std, g)


def _layernorm_bwd(cache, dy: np.ndarray):
    xhat, inv_std, g = cache
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = np.mean(dxhat, axis=-1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    dx = inv_std * (dxhat - m1 - xhat * m2)
    return dx, dg


def _split_heads(x: np.ndarray, n_heads: int, head_dim: int) -> np.ndarray:
    b, t, _ = x.shape
    return x.reshape(b, t, n_heads, head_dim).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * d)


def _attn_fwd(h: np.ndarray, wq, wk, wv, wo, n_heads: int, head_dim: int):
    b, t, _ = h.shape
    q = _split_heads(h @ wq, n_heads, head_dim)
    k = _split_heads(h @ wk, n_heads, head_dim)
    v = _split_heads(h @ wv, n_heads, head_dim)
    scale = 1.0 / np.sqrt(head_dim)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    causal = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = np.where(causal, -np.inf, scores)
    attn = softmax(scores, axis=-1)
    ctx = attn @ v
    merged = _merge_heads(ctx)
    out = merged @ wo
    return out, (h, q, k, v, attn, merged, scale)


def _attn_bwd(cache, wq, wk, wv, wo, dy: np.ndarray):
    h, q, k, v, attn, merged, scale = cache
    b, t, _ = h.shape
    n_heads, head_dim = q.shape[1], q.shape[3]
    h2 = h.reshape(b * t, -1)

    d_merged = dy @ wo.T
    d_wo = merged.reshape(b * t, -1).T @ dy.reshape(b * t, -1)
    d_ctx = _split_heads(d_merged, n_heads, head_dim)
    d_attn = d_ctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ d_ctx
    inner = np.sum(attn * d_attn, axis=-1, keepdims=True)
    d_scores = attn * (d_attn - inner)
    dq = (d_scores @ k) * scale
    dk = (d_scores.transpose(0, 1, 3, 2) @ q) * scale

    dq2 = _merge_heads(dq).reshape(b * t, -1)
    dk2 = _merge_heads(dk).reshape(b * t, -1)
    dv2 = _merge_heads(dv).reshape(b * t, -1)
    d_wq = h2.T @ dq2
    d_wk = h2.T @ dk2
    d_wv = h2.T @ dv2
    dh = (dq2 @ wq.T + dk2 @ wk.T + dv2 @ wv.T).reshape(b, t, -1)
    return dh, d_wq, d_wk, d_wv, d_wo


# ---------------------------------------------------------------------------
# Toy language model
# ---------------------------------------------------------------------------

@dataclass
class LayerRouting:
    """Routing record for one MoE layer: who went where, and how confidently."""

    selected: np.ndarray  # (B, T, k) int64, ascending per token
    gates: np.ndarray     # (B, T, k) gate weights over the selected experts
    probs: np.ndarray     # (B, T, n) full router softmax (for balance stats)


@dataclass
class RoutingTrace:
    num_experts: int
    top_k: int
    layers: list[LayerRouting] = field(default_factory=list)
    domains: list[str] | None = None  # one label per batch row


@dataclass
class LmOutput:
    logits: np.ndarray  # (B, T, vocab)
    trace: RoutingTrace
    loss: float


@dataclass
class ToyLm:
    """Toy decoder-only LM; ``params`` maps canonical tensor names to float64 arrays."""

    config: ModelConfig
    params: dict[str, np.ndarray]

    @property
    def max_positions(self) -> int:
        return self.params[POSITION_SLOT].shape[0]

    def layer_ffn(self, i: int) -> FfnWeights:
        gate, up, down = ffn_slot_names(f"layers.{i}.ffn")
        return FfnWeights(self.params[gate], self.params[up], self.params[down])

    def layer_moe(self, i: int) -> MoeLayerWeights:
        cfg = self.config
        experts = []
        for e in range(cfg.routed_experts):
            gate, up, down = ffn_slot_names(f"layers.{i}.experts.{e}")
            experts.append(FfnWeights(self.params[gate], self.params[up], self.params[down]))
        shared = []
        for j in range(cfg.shared_experts):
            gate, up, down = ffn_slot_names(f"layers.{i}.shared.{j}")
            shared.append(FfnWeights(self.params[gate], self.params[up], self.params[down]))
        return MoeLayerWeights(self.params[f"layers.{i}.router"], tuple(experts), tuple(shared))


DEFAULT_POSITION_STD = 0.02
_POSITION_PURPOSE = 97  # stream path tag for position-embedding init


def build_model(ckpt: Checkpoint, max_positions: int | None = None,
                stream: RngStream | None = None) -> ToyLm:
    """Instantiate a toy LM from a checkpoint, upcast to float64.

    If the checkpoint lacks a position embedding, one of ``max_positions``
    rows is drawn N(0, 0.02^2) from ``stream`` (both then required).
    """
    cfg = ckpt.config
    if cfg.num_query_groups != cfg.num_heads:
        raise ValidationError("toy model requires num_query_groups == num_heads")
    params = {name: ckpt.tensor_f64(name) for name in ckpt.tensors}
    if POSITION_SLOT not in params:
        if max_positions is None or stream is None:
            raise ValidationError(
                "checkpoint has no position embedding; pass max_positions and stream")
        flat = sample_normal(stream.child(_POSITION_PURPOSE),
                             NormalParams(0.0, DEFAULT_POSITION_STD),
                             max_positions * cfg.hidden_size)
        params[POSITION_SLOT] = flat.reshape(max_positions, cfg.hidden_size)
    return ToyLm(config=cfg, params=params)


def model_to_checkpoint(model: ToyLm, dtype: str = "f32",
                        metadata: dict | None = None) -> Checkpoint:
    np_dtype = {"f32": np.float32, "f64": np.float64}[dtype]
    tensors = {name: np.ascontiguousarray(arr, dtype=np_dtype)
               for name, arr in model.params.items()}
    ckpt = Checkpoint(config=model.config, tensors=tensors, metadata=dict(metadata or {}))
    ckpt.validate()
    return ckpt


def _check_tokens(model: ToyLm, tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise ValidationError(f"tokens must be a 1D or 2D index array, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() >= model.config.vocab_size:
        raise ValidationError(
            f"token id out of range [0, {model.config.vocab_size})")
    if arr.shape[1] > model.max_positions:
        raise ValidationError(
            f"sequence length {arr.shape[1]} exceeds position table ({model.max_positions})")
    return arr


def forward_cache(model: ToyLm, tokens) -> dict:
    cfg = model.config
    p = model.params
    tok = _check_tokens(model, tokens)
    b, t = tok.shape

    x = p["embedding.token"][tok] + p[POSITION_SLOT][None, :t, :]
    layer_caches = []
    for i in range(cfg.num_layers):
        h, ln1 = _layernorm_fwd(x, p[f"layers.{i}.attn_norm"])
        attn_out, attn_cache = _attn_fwd(
            h, p[f"layers.{i}.attn.wq"], p[f"layers.{i}.attn.wk"],
            p[f"layers.{i}.attn.wv"], p[f"layers.{i}.attn.wo"],
            cfg.num_heads, cfg.head_dim)
        x = x + attn_out
        h2, ln2 = _layernorm_fwd(x, p[f"layers.{i}.ffn_norm"])
        if cfg.is_moe:
            weights = model.layer_moe(i)
            flat = h2.reshape(b * t, -1)
            y, moe_cache = _moe_fwd(weights, flat, cfg.top_k)
            x = x + y.reshape(b, t, -1)
            layer_caches.append(("moe", ln1, attn_cache, ln2, moe_cache, weights))
        else:
            weights = model.layer_ffn(i)
            y, ffn_cache = _ffn_fwd(weights, h2.reshape(b * t, -1))
            x = x + y.reshape(b, t, -1)
            layer_caches.append(("ffn", ln1, attn_cache, ln2, ffn_cache, weights))

    h_final, ln_final = _layernorm_fwd(x, p["final_norm"])
    logits = h_final @ p["head.out"]

    # Next-token cross entropy over the first t-1 positions; a single-position
    # sequence has no targets and its loss is defined as 0.
    if t > 1:
        pred = logits[:, :-1, :]
        targets = tok[:, 1:]
        shifted = pred - np.max(pred, axis=-1, keepdims=True)
        logz = np.log(np.sum(np.exp(shifted), axis=-1))
        picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
        loss = float(np.mean(logz - picked))
    else:
        loss = 0.0

    return {
        "tokens": tok, "layer_caches": layer_caches, "ln_final": ln_final,
        "h_final": h_final, "logits": logits, "loss": loss,
    }


def trace_from_cache(model: ToyLm, cache: dict, domains=None) -> RoutingTrace:
    cfg = model.config
    b, t = cache["tokens"].shape
    trace = RoutingTrace(num_experts=cfg.routed_experts, top_k=cfg.top_k,
                         domains=list(domains) if domains is not None else None)
    if trace.domains is not None and len(trace.domains) != b:
        raise ValidationError(f"got {len(trace.domains)} domain labels for batch of {b}")
    for entry in cache["layer_caches"]:
        if entry[0] != "moe":
            continue
        _, _, _, _, moe_cache, _ = entry
        _, _, probs, sel, gates_sel, _, _, _ = moe_cache
        trace.layers.append(LayerRouting(
            selected=sel.reshape(b, t, -1),
            gates=gates_sel.reshape(b, t, -1),
            probs=probs.reshape(b, t, -1),
        ))
    return trace


def lm_forward(model: ToyLm, tokens, domains=None) -> LmOutput:
    """Run the toy LM; returns logits, the routing trace, and the LM loss."""
    cache = forward_cache(model, tokens)
    return LmOutput(logits=cache["logits"],
                    trace=trace_from_cache(model, cache, domains),
                    loss=cache["loss"])


def backward_from_cache(model: ToyLm, cache: dict,
                         router_prob_grads: list[np.ndarray] | None = None) -> dict[str, np.ndarray]:
    cfg = model.config
    p = model.params
    tok = cache["tokens"]
    b, t = tok.shape
    grads = {name: np.zeros_like(arr) for name, arr in p.items()}

    logits = cache["logits"]
    d_logits = np.zeros_like(logits)
    if t > 1:
        pred = logits[:, :-1, :]
        probs = softmax(pred, axis=-1)
        onehot = np.zeros_like(pred)
        np.put_along_axis(onehot, tok[:, 1:, None], 1.0, axis=-1)
        d_logits[:, :-1, :] = (probs - onehot) / (b * (t - 1))

    h_final = cache["h_final"]
    grads["head.out"] += h_final.reshape(b * t, -1).T @ d_logits.reshape(b * t, -1)
    d_h_final = d_logits @ p["head.out"].T
    dx, dg = _layernorm_bwd(cache["ln_final"], d_h_final)
    grads["final_norm"] += dg

    moe_grad_idx = sum(1 for entry in cache["layer_caches"] if entry[0] == "moe") - 1
    for i in reversed(range(cfg.num_layers)):
        kind, ln1, attn_cache, ln2, sub_cache, weights = cache["layer_caches"][i]
        dsub = dx.reshape(b * t, -1)
        if kind == "moe":
            d_probs = None
            if router_prob_grads is not None:
                d_probs = router_prob_grads[moe_grad_idx].reshape(b * t, -1)
            moe_grad_idx -= 1
            dh2_flat, d_router, expert_grads, shared_grads = _moe_bwd(
                weights, sub_cache, dsub, d_probs)
            grads[f"layers.{i}.router"] += d_router
            for e, (d_gate, d_up, d_down) in enumerate(expert_grads):
                gate, up, down = ffn_slot_names(f"layers.{i}.experts.{e}")
                grads[gate] += d_gate
                grads[up] += d_up
                grads[down] += d_down
            for j, (d_gate, d_up, d_down) in enumerate(shared_grads):
                gate, up, down = ffn_slot_names(f"layers.{i}.shared.{j}")
                grads[gate] += d_gate
                grads[up] += d_up
                grads[down] += d_down
        else:
            dh2_flat, d_gate, d_up, d_down = _ffn_bwd(weights, sub_cache, dsub)
            gate, up, down = ffn_slot_names(f"layers.{i}.ffn")
            grads[gate] += d_gate
            grads[up] += d_up
            grads[down] += d_down
        dh2 = dh2_flat.reshape(b, t, -1)
        dx_ffn, dg2 = _layernorm_bwd(ln2, dh2)
        grads[f"layers.{i}.ffn_norm"] += dg2
        dx = dx + dx_ffn

        dh_attn, d_wq, d_wk, d_wv, d_wo = _attn_bwd(
            attn_cache, p[f"layers.{i}.attn.wq"], p[f"layers.{i}.attn.wk"],
            p[f"layers.{i}.attn.wv"], p[f"layers.{i}.attn.wo"], dx)
        grads[f"layers.{i}.attn.wq"] += d_wq
        grads[f"layers.{i}.attn.wk"] += d_wk
        grads[f"layers.{i}.attn.wv"] += d_wv
        grads[f"layers.{i}.attn.wo"] += d_wo
        dx_attn, dg1 = _layernorm_bwd(ln1, dh_attn)
        grads[f"layers.{i}.attn_norm"] += dg1
        dx = dx + dx_attn

    np.add.at(grads["embedding.token"], tok.reshape(-1), dx.reshape(b * t, -1))
    grads[POSITION_SLOT][:t] += dx.sum(axis=0)
    return grads


def lm_backward(model: ToyLm, tokens,
                router_prob_grads: list[np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Gradients of the LM loss for every parameter tensor.

    ``router_prob_grads`` optionally adds, per MoE layer, an upstream gradient
    on the full router softmax (shape (B, T, n)); the trainer uses this to
    inject the load-balancing term.
    """
    cache = forward_cache(model, tokens)
    return backward_from_cache(model, cache, router_prob_grads)
