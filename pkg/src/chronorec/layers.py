"""One attention layer over time-augmented neighbor information.

A layer scores each sampled (neighbor, timestamp) pair against the query
node with scaled dot-product attention computed on concatenated
[embedding || time-feature] vectors, takes the attention-weighted sum of
projected neighbor information per head, and fuses the concatenated head
outputs with the query information through a two-layer ReLU network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ATTENTION = "attention"
MEAN = "mean"
LSTM = "lstm"

AGGREGATORS = (ATTENTION, MEAN, LSTM)


@dataclass
class LayerParams:
    """Per-layer trainable weights.

    ``w_q``/``w_k``/``w_v`` have shape (heads, d + d_time, d/heads); the
    feed-forward fuser maps (d + d + d_time) -> ffn_dim -> d. LSTM weights
    are present only when the layer uses the recurrent summarizer.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    lstm_wx: np.ndarray = None
    lstm_wh: np.ndarray = None
    lstm_b: np.ndarray = None

    @property
    def n_heads(self):
        return self.w_q.shape[0]

    @property
    def head_dim(self):
        return self.w_q.shape[2]

    def named_arrays(self):
        out = [("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v),
               ("ffn_w1", self.ffn_w1), ("ffn_b1", self.ffn_b1),
               ("ffn_w2", self.ffn_w2), ("ffn_b2", self.ffn_b2)]
        if self.lstm_wx is not None:
            out += [("lstm_wx", self.lstm_wx), ("lstm_wh", self.lstm_wh),
                    ("lstm_b", self.lstm_b)]
        return out


def construct_query_info(node_embedding, t, enc):
    """[embedding || time-feature] row for the query node at time t."""
    node_embedding = np.asarray(node_embedding, dtype=np.float64)
    if node_embedding.ndim != 1:
        raise ValueError("node embedding must be a vector")
    return np.concatenate([node_embedding, enc.encode(t)])


def construct_neighbor_info(neighbor_embeddings, neighbor_times, enc):
    """Stack [embedding || time-feature] rows for sampled neighbors."""
    neighbor_embeddings = np.asarray(neighbor_embeddings, dtype=np.float64)
    neighbor_times = np.asarray(neighbor_times, dtype=np.float64).reshape(-1)
    if neighbor_embeddings.ndim != 2 or neighbor_embeddings.shape[0] != neighbor_times.size:
        raise ValueError("need one embedding row per neighbor time")
    return np.hstack([neighbor_embeddings, enc.encode_many(neighbor_times)])


def attention_logits(query_info, neighbor_info, w_q, w_k, scale):
    """Pre-softmax scores: scale * (neighbor_info @ w_k) @ (query_info @ w_q).

    With identity projections and scale 1 each logit decomposes exactly
    into embedding-dot plus time-feature-dot of the two rows.
    """
    q = query_info @ w_q
    k = neighbor_info @ w_k
    return (k @ q) * scale


def softmax(logits):
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def attention_weights(query_info, neighbor_info, params, head):
    """Normalized attention of the query over its sampled neighbors."""
    query_info = np.asarray(query_info, dtype=np.float64)
    neighbor_info = np.asarray(neighbor_info, dtype=np.float64)
    if neighbor_info.ndim != 2 or neighbor_info.shape[0] == 0:
        raise ValueError("neighbor set must be a non-empty matrix")
    if neighbor_info.shape[1] != query_info.shape[0]:
        raise ValueError("query and neighbor rows must share a dimension")
    scale = 1.0 / np.sqrt(query_info.shape[0])
    logits = attention_logits(query_info, neighbor_info, params.w_q[head], params.w_k[head], scale)
    return softmax(logits)


def propagate(weights, neighbor_info, params, head):
    """Attention-weighted sum of value-projected neighbor information."""
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    neighbor_info = np.asarray(neighbor_info, dtype=np.float64)
    if neighbor_info.shape[0] != weights.size:
        raise ValueError("one weight per neighbor row required")
    return weights @ (neighbor_info @ params.w_v[head])


def aggregate(neighbor_summary, query_info, params):
    """Fuse the neighbor summary with the query info through the FFN."""
    x = np.concatenate([np.asarray(neighbor_summary, dtype=np.float64),
                        np.asarray(query_info, dtype=np.float64)])
    if x.shape[0] != params.ffn_w1.shape[0]:
        raise ValueError(f"FFN expects input of size {params.ffn_w1.shape[0]}, got {x.shape[0]}")
    hidden = np.maximum(x @ params.ffn_w1 + params.ffn_b1, 0.0)
    return hidden @ params.ffn_w2 + params.ffn_b2


def lstm_forward(neighbor_info, params):
    """Run the recurrent summarizer over time-sorted neighbor rows.

    Returns the final hidden state (the neighbor summary) and the cache
    needed for backpropagation through time.
    """
    wx, wh, b = params.lstm_wx, params.lstm_wh, params.lstm_b
    d = wh.shape[0]
    n = neighbor_info.shape[0]
    h = np.zeros(d)
    c = np.zeros(d)
    steps = []
    for j in range(n):
        x = neighbor_info[j]
        a = x @ wx + h @ wh + b
        i_g = _sigmoid(a[:d])
        f_g = _sigmoid(a[d:2 * d])
        g_g = np.tanh(a[2 * d:3 * d])
        o_g = _sigmoid(a[3 * d:])
        c_new = f_g * c + i_g * g_g
        tanh_c = np.tanh(c_new)
        h_new = o_g * tanh_c
        steps.append((x, h, c, i_g, f_g, g_g, o_g, c_new, tanh_c))
        h, c = h_new, c_new
    return h, steps


def lstm_backward(grad_h_final, steps, params, acc_wx, acc_wh, acc_b):
    """BPTT for the recurrent summarizer; returns d(loss)/d(neighbor rows).

    ``acc_*`` are gradient accumulators matching the LSTM weights, mutated
    in place.
    """
    wx, wh = params.lstm_wx, params.lstm_wh
    d = wh.shape[0]
    gh = grad_h_final.copy()
    gc = np.zeros(d)
    gx_rows = np.zeros((len(steps), wx.shape[0]))
    for j in range(len(steps) - 1, -1, -1):
        x, h_prev, c_prev, i_g, f_g, g_g, o_g, c_new, tanh_c = steps[j]
        go = gh * tanh_c
        gc = gc + gh * o_g * (1.0 - tanh_c ** 2)
        gi = gc * g_g
        gf = gc * c_prev
        gg = gc * i_g
        ga = np.concatenate([
            gi * i_g * (1.0 - i_g),
            gf * f_g * (1.0 - f_g),
            gg * (1.0 - g_g ** 2),
            go * o_g * (1.0 - o_g),
        ])
        acc_wx += np.outer(x, ga)
        acc_wh += np.outer(h_prev, ga)
        acc_b += ga
        gx_rows[j] = wx @ ga
        gh = wh @ ga
        gc = gc * f_g
    return gx_rows


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def layer_forward(graph, node, t, depth, ctx):
    """Temporal embedding of ``node`` at time ``t`` after ``depth`` layers.

    ``ctx`` is the full model parameter bundle; see model.temporal_embedding
    for the caller-facing entry point.
    """
    from .engine import ForwardTrace

    trace = ForwardTrace(ctx, graph)
    rec = trace.embed(node, t, depth)
    return trace.records[rec].out.copy()
