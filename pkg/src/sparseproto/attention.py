"""Prototype-selection cross-attention and its reference backends.

For every (query, head) pair the prototype backend scores all keys by
cosine similarity of projected vectors, keeps only the top share ``rho`` of
them, turns the surviving scores into weights with a temperature-scaled
softmax and aggregates the matching value rows. The refined query is then
produced by a gated update: the aggregate is fused with the projected query
through a feedforward gate and added back residually.

Two reference backends share the exact same scoring and refinement code:
``dense`` attends over every key, ``masked`` attends over every key but
pins disallowed scores to a large negative fill before the softmax (it
still pays for the full attention matrix). With full selection and no
guidance the prototype path degenerates to the dense one bit for bit,
because the identity gather is elided and both run the same instructions.

Selection is not differentiable; gradients flow only through the selected
score and value entries, with selection indices held fixed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    NEG_FILL,
    Tensor,
    accumulate_grad,
    add,
    custom_op,
    dropout,
    layer_norm,
    linear,
    mul_elementwise,
    l2_normalize_rows,
    softmax_rows,
)

__all__ = [
    "SpotParams",
    "PrototypeSelection",
    "saliency",
    "select_top_rho",
    "aggregate",
    "refine_query",
    "spot_cross_attention",
    "dense_reference",
    "write_selection_trace",
]


class AttentionError(Exception):
    pass


def _xavier(gen: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


@dataclass
class SpotParams:
    """Learnable state and configuration of one cross-attention block."""

    proj_q_w: Tensor
    proj_q_b: Tensor
    proj_k_w: Tensor
    proj_k_b: Tensor
    proj_v_w: Tensor
    proj_v_b: Tensor
    ffn1_w1: Tensor
    ffn1_b1: Tensor
    ffn1_w2: Tensor
    ffn1_b2: Tensor
    ffn2_w1: Tensor
    ffn2_b1: Tensor
    ffn2_w2: Tensor
    ffn2_b2: Tensor
    gate: Tensor  # learnable scalar, init 1
    ln_gain: Tensor
    ln_bias: Tensor
    heads: int = 1
    rho: float = 0.08
    dropout_p: float = 0.0
    temperature: str = "full"  # "full": sqrt(C); "per_head": sqrt(C/H)
    use_value_proj: bool = True

    @property
    def channels(self) -> int:
        return self.proj_q_w.shape[0]

    def validate(self) -> "SpotParams":
        if self.channels % self.heads != 0:
            raise AttentionError(
                f"channels {self.channels} not divisible by heads {self.heads}"
            )
        if not 0.0 < self.rho <= 1.0:
            raise AttentionError(f"rho={self.rho} outside (0, 1]")
        if self.temperature not in ("full", "per_head"):
            raise AttentionError(f"unknown temperature mode {self.temperature!r}")
        return self

    def temperature_value(self) -> float:
        c = self.channels
        return math.sqrt(c if self.temperature == "full" else c // self.heads)

    @classmethod
    def init(
        cls,
        channels: int,
        heads: int,
        rho: float,
        gen: np.random.Generator,
        dtype=np.float64,
        dropout_p: float = 0.0,
        temperature: str = "full",
        use_value_proj: bool = True,
    ) -> "SpotParams":
        c = channels
        hid = 2 * c

        def lin(fi, fo):
            return (
                Tensor(_xavier(gen, fi, fo, dtype), requires_grad=True),
                Tensor(np.zeros(fo, dtype=dtype), requires_grad=True),
            )

        pq = lin(c, c)
        pk = lin(c, c)
        pv = lin(c, c)
        f1a = lin(c, hid)
        f1b = lin(hid, c)
        f2a = lin(c, hid)
        f2b = lin(hid, c)
        return cls(
            proj_q_w=pq[0], proj_q_b=pq[1],
            proj_k_w=pk[0], proj_k_b=pk[1],
            proj_v_w=pv[0], proj_v_b=pv[1],
            ffn1_w1=f1a[0], ffn1_b1=f1a[1], ffn1_w2=f1b[0], ffn1_b2=f1b[1],
            ffn2_w1=f2a[0], ffn2_b1=f2a[1], ffn2_w2=f2b[0], ffn2_b2=f2b[1],
            gate=Tensor(np.asarray(1.0, dtype=dtype), requires_grad=True),
            ln_gain=Tensor(np.ones(c, dtype=dtype), requires_grad=True),
            ln_bias=Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
            heads=heads,
            rho=rho,
            dropout_p=dropout_p,
            temperature=temperature,
            use_value_proj=use_value_proj,
        ).validate()

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name in (
            "proj_q_w", "proj_q_b", "proj_k_w", "proj_k_b", "proj_v_w", "proj_v_b",
            "ffn1_w1", "ffn1_b1", "ffn1_w2", "ffn1_b2",
            "ffn2_w1", "ffn2_b1", "ffn2_w2", "ffn2_b2",
            "gate", "ln_gain", "ln_bias",
        ):
            out[prefix + name] = getattr(self, name)
        return out


class PrototypeSelection:
    """Per (query, head) selected key indices, scores and attention weights.

    Entries are rank-ordered: descending score, ties by lower voxel index.
    """

    def __init__(self, num_queries: int, heads: int, num_keys: int):
        self.num_queries = num_queries
        self.heads = heads
        self.num_keys = num_keys
        self.indices: list[list[np.ndarray]] = [
            [None] * heads for _ in range(num_queries)
        ]
        self.scores: list[list[np.ndarray]] = [
            [None] * heads for _ in range(num_queries)
        ]
        self.weights: list[list[np.ndarray]] = [
            [None] * heads for _ in range(num_queries)
        ]

    def k(self, query: int, head: int) -> int:
        return self.indices[query][head].size

    def put(self, query, head, idx_asc, scores_asc, weights_asc) -> None:
        order = np.argsort(-scores_asc, kind="stable")
        self.indices[query][head] = idx_asc[order]
        self.scores[query][head] = scores_asc[order]
        self.weights[query][head] = weights_asc[order]


def write_selection_trace(selection: PrototypeSelection, path) -> None:
    """Dump a selection as CSV for inspection."""
    with open(path, "w", newline="") as f:
        f.write("query_id,head,rank,voxel_index,score,weight\n")
        for q in range(selection.num_queries):
            for h in range(selection.heads):
                idx = selection.indices[q][h]
                sc = selection.scores[q][h]
                w = selection.weights[q][h]
                for r in range(idx.size):
                    f.write(f"{q},{h},{r},{idx[r]},{sc[r]:.17g},{w[r]:.17g}\n")


# ---------------------------------------------------------------------------
# spec-facing primitives
# ---------------------------------------------------------------------------


def saliency(q_proj: np.ndarray, k_proj: np.ndarray) -> float:
    """Cosine similarity of two projected vectors; 0 if either is zero."""
    q = np.asarray(q_proj, dtype=np.float64)
    k = np.asarray(k_proj, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 1:
        raise AttentionError(f"saliency: shape mismatch {q.shape} vs {k.shape}")
    nq = np.linalg.norm(q)
    nk = np.linalg.norm(k)
    if nq == 0.0 or nk == 0.0:
        return 0.0
    return float(np.dot(q, k) / (nq * nk))


def ceil_ratio(rho: float, n: int) -> int:
    """k = ceil(rho * n), guarded against binary rounding of decimal ratios,
    clamped to [1, n]."""
    k = math.ceil(rho * n - 1e-9)
    return max(1, min(n, k))


def select_top_rho(scores: np.ndarray, rho: float) -> np.ndarray:
    """Indices of the ceil(rho * n) largest scores.

    Returned in rank order (descending score, ties broken by lower index).
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise AttentionError("scores must be a nonempty 1D array")
    if not 0.0 < rho <= 1.0:
        raise AttentionError(f"rho={rho} outside (0, 1]")
    k = ceil_ratio(rho, s.size)
    order = np.argsort(-s, kind="stable")  # stable: equal scores keep low index first
    return order[:k]


def aggregate(
    values: np.ndarray, scores: np.ndarray, channels: int, temperature: str = "full", heads: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted sum of selected value rows.

    Weights are softmax(scores / sqrt(C)); the divisor uses the full channel
    count by default. Returns (aggregate, weights).
    """
    v = np.asarray(values, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    if v.ndim != 2 or s.ndim != 1 or v.shape[0] != s.shape[0]:
        raise AttentionError(f"aggregate: values {v.shape} vs scores {s.shape}")
    if s.size == 0:
        raise AttentionError("aggregate: empty selection")
    temp = math.sqrt(channels if temperature == "full" else channels // heads)
    w = softmax_rows(s / temp)
    return w @ v, w


# ---------------------------------------------------------------------------
# batched top-k selection
# ---------------------------------------------------------------------------


def _topk_rows_ascending(scores: np.ndarray, k: int) -> np.ndarray:
    """Per-row top-k column indices, deterministic ties by lower index,
    returned ascending per row. O(rows * cols) plus O(k log k) bookkeeping."""
    n = scores.shape[1]
    if k >= n:
        return np.broadcast_to(np.arange(n), scores.shape).copy()
    kth = -np.partition(-scores, k - 1, axis=1)[:, k - 1]
    above = scores > kth[:, None]
    ties = scores == kth[:, None]
    need = k - above.sum(axis=1)
    tie_rank = np.cumsum(ties, axis=1)
    chosen = above | (ties & (tie_rank <= need[:, None]))
    rows, cols = np.nonzero(chosen)
    return cols.reshape(scores.shape[0], k)


# ---------------------------------------------------------------------------
# the fused attention core
# ---------------------------------------------------------------------------


class _PhaseTimer:
    def __init__(self, phases: dict | None):
        self.phases = phases
        self._t = time.perf_counter() if phases is not None else 0.0

    def mark(self, name: str) -> None:
        if self.phases is None:
            return
        now = time.perf_counter()
        self.phases[name] = self.phases.get(name, 0.0) + (now - self._t)
        self._t = now


def _normalize_guidance(guidance, num_queries: int, num_keys: int):
    """Per-query candidate masks; None or empty masks mean unrestricted."""
    if guidance is None:
        return None
    if len(guidance) != num_queries:
        raise AttentionError("guidance length must equal query count")
    out = []
    any_mask = False
    for m in guidance:
        if m is None:
            out.append(None)
            continue
        m = np.asarray(m, dtype=bool)
        if m.shape != (num_keys,):
            raise AttentionError("guidance mask shape must be (num_keys,)")
        if not m.any():
            out.append(None)  # empty guidance falls back to unrestricted
        else:
            out.append(m)
            any_mask = True
    return out if any_mask else None


def _attention_core(
    q_proj: Tensor,
    k_proj: Tensor,
    v_src: Tensor,
    *,
    heads: int,
    temp: float,
    mode: str,
    rho: float | None = None,
    guidance=None,
    mask: np.ndarray | None = None,
    collect_selection: bool = False,
    phases: dict | None = None,
) -> tuple[Tensor, PrototypeSelection | None]:
    """Scores, selection and aggregation for all three backends.

    mode "prototype": per-head top-rho selection, optionally restricted per
    query by guidance masks. mode "dense"/"masked": full softmax over all
    keys; "masked" pins scores outside ``mask`` (bool (Nq, Nv)) to NEG_FILL
    first but still computes the full-size attention matrix.
    """
    nq, c = q_proj.shape
    nv = k_proj.shape[0]
    if nv == 0:
        raise AttentionError("key set is empty")
    d = c // heads

    guidance = _normalize_guidance(guidance, nq, nv) if mode == "prototype" else None
    selection = (
        PrototypeSelection(nq, heads, nv)
        if (collect_selection and mode == "prototype")
        else None
    )

    out = np.zeros((nq, c), dtype=q_proj.dtype)
    needs_grad = q_proj.requires_grad or k_proj.requires_grad or v_src.requires_grad
    saved = [] if needs_grad else None

    for h in range(heads):
        tm = _PhaseTimer(phases)
        sl = slice(h * d, (h + 1) * d)
        qh = np.ascontiguousarray(q_proj.data[:, sl])
        kh = np.ascontiguousarray(k_proj.data[:, sl])
        vh = np.ascontiguousarray(v_src.data[:, sl])
        qn, qnorm = l2_normalize_rows(qh)
        kn, knorm = l2_normalize_rows(kh)
        scores = qn @ kn.T  # (Nq, Nv), cosine similarities
        tm.mark("score")

        idx_mat = None  # (Nq, k) ascending, or None for the full key set
        ragged: list[np.ndarray | None] | None = None
        if mode == "prototype":
            if guidance is None:
                k = ceil_ratio(rho, nv)
                if k < nv:
                    idx_mat = _topk_rows_ascending(scores, k)
            else:
                ragged = []
                for q in range(nq):
                    cand = guidance[q]
                    if cand is None:
                        kq = ceil_ratio(rho, nv)
                        if kq >= nv:
                            ragged.append(None)
                            continue
                        ragged.append(_topk_rows_ascending(scores[q : q + 1], kq)[0])
                    else:
                        cand_idx = np.flatnonzero(cand)
                        kq = ceil_ratio(rho, cand_idx.size)
                        sub = _topk_rows_ascending(
                            scores[q : q + 1, cand_idx], kq
                        )[0]
                        ragged.append(cand_idx[sub])
        tm.mark("select")

        if ragged is None:
            if mode == "masked":
                sel_scores = np.where(mask, scores, scores.dtype.type(NEG_FILL))
            elif idx_mat is None:
                sel_scores = scores
            else:
                sel_scores = np.take_along_axis(scores, idx_mat, axis=1)
            weights = softmax_rows(sel_scores / temp)
            for q in range(nq):
                v_rows = vh if idx_mat is None else vh[idx_mat[q]]
                out[q, sl] = np.dot(weights[q], v_rows)
        else:
            weights = []
            for q in range(nq):
                idx = ragged[q]
                s_row = scores[q] if idx is None else scores[q, idx]
                w = softmax_rows(s_row / temp)
                weights.append(w)
                out[q, sl] = np.dot(w, vh if idx is None else vh[idx])
        tm.mark("attend")

        if selection is not None:
            for q in range(nq):
                if ragged is not None:
                    idx = ragged[q] if ragged[q] is not None else np.arange(nv)
                    w_row = weights[q]
                else:
                    idx = np.arange(nv) if idx_mat is None else idx_mat[q]
                    w_row = weights[q]
                selection.put(q, h, idx, scores[q, idx], w_row)

        if saved is not None:
            saved.append((qn, kn, qnorm, knorm, vh, idx_mat, ragged, weights))

    def backward(g: np.ndarray) -> None:
        dq_full = np.zeros_like(q_proj.data) if q_proj.requires_grad else None
        dk_full = np.zeros_like(k_proj.data) if k_proj.requires_grad else None
        dv_full = np.zeros_like(v_src.data) if v_src.requires_grad else None
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            qn, kn, qnorm, knorm, vh, idx_mat, ragged, weights = saved[h]
            gh = g[:, sl]
            dqn = np.zeros_like(qn)
            dkn = np.zeros_like(kn)
            dvh = np.zeros_like(vh)
            if ragged is None and idx_mat is None:
                w = weights  # (Nq, Nv)
                dw = gh @ vh.T
                ds = (dw - np.sum(dw * w, axis=1, keepdims=True)) * w / temp
                dqn += ds @ kn
                dkn += ds.T @ qn
                dvh += w.T @ gh
            else:
                for q in range(nq):
                    if ragged is not None:
                        idx = ragged[q]
                        w = weights[q]
                        if idx is None:
                            dw = vh @ gh[q]
                            ds = (w * (dw - np.dot(w, dw))) / temp
                            dqn[q] += ds @ kn
                            dkn += np.outer(ds, qn[q])
                            dvh += np.outer(w, gh[q])
                            continue
                    else:
                        idx = idx_mat[q]
                        w = weights[q]
                    v_rows = vh[idx]
                    dw = v_rows @ gh[q]
                    ds = (w * (dw - np.dot(w, dw))) / temp
                    dqn[q] += ds @ kn[idx]
                    np.add.at(dkn, idx, np.outer(ds, qn[q]))
                    np.add.at(dvh, idx, np.outer(w, gh[q]))
            # back through row L2 normalization; zero rows get zero gradient
            if dq_full is not None:
                safe = np.where(qnorm > 0.0, qnorm, 1.0)
                inner = np.sum(dqn * qn, axis=1, keepdims=True)
                dq_full[:, sl] = np.where(qnorm > 0.0, (dqn - qn * inner) / safe, 0.0)
            if dk_full is not None:
                safe = np.where(knorm > 0.0, knorm, 1.0)
                inner = np.sum(dkn * kn, axis=1, keepdims=True)
                dk_full[:, sl] = np.where(knorm > 0.0, (dkn - kn * inner) / safe, 0.0)
            if dv_full is not None:
                dv_full[:, sl] = dvh
        if dq_full is not None:
            accumulate_grad(q_proj, dq_full)
        if dk_full is not None:
            accumulate_grad(k_proj, dk_full)
        if dv_full is not None:
            accumulate_grad(v_src, dv_full)

    agg = custom_op("attention_core", out, (q_proj, k_proj, v_src), backward)
    return agg, selection


# ---------------------------------------------------------------------------
# public operator surface
# ---------------------------------------------------------------------------


def _ffn(x: Tensor, w1, b1, w2, b2) -> Tensor:
    from .autodiff import relu

    return linear(relu(linear(x, w1, b1)), w2, b2)


def refine_query(
    q: Tensor,
    v_agg: Tensor,
    params: SpotParams,
    train: bool = False,
    seed: int = 0,
    step: int = 0,
    site: int = 0,
    q_proj: Tensor | None = None,
) -> Tensor:
    """Gated residual update of the queries from the aggregated prototypes."""
    if q_proj is None:
        q_proj = linear(q, params.proj_q_w, params.proj_q_b)
    inter = _ffn(
        mul_elementwise(q_proj, v_agg),
        params.ffn1_w1, params.ffn1_b1, params.ffn1_w2, params.ffn1_b2,
    )
    gated = add(
        mul_elementwise(layer_norm(inter, params.ln_gain, params.ln_bias), params.gate),
        v_agg,
    )
    o = _ffn(gated, params.ffn2_w1, params.ffn2_b1, params.ffn2_w2, params.ffn2_b2)
    return add(q, dropout(o, params.dropout_p, train, seed, step, site))


def _as_key_tensor(source) -> Tensor:
    if isinstance(source, Tensor):
        return source
    if hasattr(source, "features"):
        return Tensor(source.features)
    return Tensor(np.asarray(source))


def _run_backend(
    queries: Tensor,
    source,
    params: SpotParams,
    *,
    mode: str,
    guidance=None,
    mask=None,
    train: bool = False,
    seed: int = 0,
    step: int = 0,
    site: int = 0,
    collect_selection: bool = True,
    phases: dict | None = None,
) -> tuple[Tensor, PrototypeSelection | None]:
    params.validate()
    keys = _as_key_tensor(source)
    if keys.shape[-1] != params.channels:
        raise AttentionError(
            f"key channels {keys.shape[-1]} != params channels {params.channels}"
        )
    q_proj = linear(queries, params.proj_q_w, params.proj_q_b)
    k_proj = linear(keys, params.proj_k_w, params.proj_k_b)
    v_src = (
        linear(keys, params.proj_v_w, params.proj_v_b)
        if params.use_value_proj
        else keys
    )
    v_agg, selection = _attention_core(
        q_proj,
        k_proj,
        v_src,
        heads=params.heads,
        temp=params.temperature_value(),
        mode=mode,
        rho=params.rho,
        guidance=guidance,
        mask=mask,
        collect_selection=collect_selection,
        phases=phases,
    )
    tm = _PhaseTimer(phases)
    refined = refine_query(
        queries, v_agg, params, train=train, seed=seed, step=step, site=site,
        q_proj=q_proj,
    )
    tm.mark("refine")
    return refined, selection


def spot_cross_attention(
    queries: Tensor,
    source,
    params: SpotParams,
    guidance=None,
    train: bool = False,
    seed: int = 0,
    step: int = 0,
    site: int = 0,
    collect_selection: bool = True,
    phases: dict | None = None,
) -> tuple[Tensor, PrototypeSelection | None]:
    """Prototype-selection cross-attention.

    ``guidance``, when given, is a per-query list of boolean voxel masks
    restricting the candidate key set before selection; empty or missing
    masks fall back to unrestricted selection.
    """
    return _run_backend(
        queries, source, params,
        mode="prototype", guidance=guidance,
        train=train, seed=seed, step=step, site=site,
        collect_selection=collect_selection, phases=phases,
    )


def dense_reference(
    queries: Tensor,
    source,
    params: SpotParams,
    mask: np.ndarray | None = None,
    train: bool = False,
    seed: int = 0,
    step: int = 0,
    site: int = 0,
    phases: dict | None = None,
) -> Tensor:
    """Full-attention reference; with ``mask`` it is the masked backend."""
    mode = "dense" if mask is None else "masked"
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        keys = _as_key_tensor(source)
        expected = (queries.shape[0], keys.shape[0])
        if mask.shape != expected:
            raise AttentionError(f"mask shape {mask.shape}, expected {expected}")
    refined, _ = _run_backend(
        queries, source, params,
        mode=mode, mask=mask,
        train=train, seed=seed, step=step, site=site,
        collect_selection=False, phases=phases,
    )
    return refined
