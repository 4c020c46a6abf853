"""Recursive temporal-embedding evaluation with an explicit backward pass.

A ForwardTrace evaluates node embeddings depth by depth over the sampled
history subgraph: a depth-l query at time t attends over neighbors sampled
strictly before t, each embedded at depth l-1 at its own interaction time.
Evaluations are memoized per (node, time, depth) and neighbor draws per
(node, time), so one forward pass touches at most sum(S^l, l=1..L) sampled
neighbors. The trace records every intermediate needed to run the exact
adjoint recursion afterwards; both passes are pure in (graph, params, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .graph import ITEM, USER
from .time_encoding import EMPTY, LEARNED, POSITION


@dataclass
class AttentionRecord:
    """Per-head normalized attention of one query over its sampled neighbors."""

    neighbor_ids: np.ndarray
    neighbor_times: np.ndarray
    weights: np.ndarray  # (heads, n_sampled)


class _Record:
    __slots__ = (
        "node", "t", "depth", "out", "row",
        "self_ref", "nbr_refs", "nbr_ids", "nbr_times",
        "h_q", "H_n", "q_all", "k_all", "v_all", "w_all",
        "lstm_steps", "x", "hidden", "q_time", "nbr_time",
    )

    def __init__(self, node, t, depth, out):
        self.node = node
        self.t = t
        self.depth = depth
        self.out = out
        self.row = -1
        self.self_ref = -1
        self.nbr_refs = None


def node_row(node, num_users):
    """Row of a node in the stacked user/item embedding table."""
    side, index = node
    return index if side == USER else num_users + index


class ForwardTrace:
    """One memoized evaluation episode over a frozen graph and parameter set."""

    def __init__(self, params, graph):
        self.params = params
        self.graph = graph
        self.records = []
        self._memo = {}
        self._samples = {}
        self.sampled_neighbor_count = 0

    # -- forward -----------------------------------------------------------

    def embed(self, node, t, depth):
        """Record index of the depth-``depth`` embedding of ``node`` at ``t``."""
        t = float(t)
        key = (node[0], node[1], t, depth)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        if depth == 0:
            rec = _Record(node, t, 0, None)
            rec.row = node_row(node, self.params.num_users)
            rec.out = self.params.embedding[rec.row]
        else:
            rec = self._embed_layer(node, t, depth)
        self.records.append(rec)
        rid = len(self.records) - 1
        self._memo[key] = rid
        return rid

    def _sample(self, node, t):
        key = (node[0], node[1], t)
        hit = self._samples.get(key)
        if hit is None:
            hit = self.graph.sample_neighbors(node, t, self.params.config.n_neighbors,
                                              self.params.config.seed)
            self._samples[key] = hit
            self.sampled_neighbor_count += len(hit[0])
        return hit

    def _embed_layer(self, node, t, depth):
        params = self.params
        cfg = params.config
        layer = params.layers[depth - 1]
        d = cfg.embed_dim

        self_ref = self.embed(node, t, depth - 1)
        ids, ts = self._sample(node, t)

        rec = _Record(node, t, depth, None)
        rec.self_ref = self_ref
        phi_q, rec.q_time = self._time_query(node, t)
        rec.h_q = np.concatenate([self.records[self_ref].out, phi_q])

        if len(ids) == 0:
            rec.nbr_refs = []
            summary = np.zeros(d)
        else:
            other = ITEM if node[0] == USER else USER
            rec.nbr_refs = [self.embed((other, int(j)), float(tj), depth - 1)
                            for j, tj in zip(ids, ts)]
            rec.nbr_ids = ids
            rec.nbr_times = ts
            emb_n = np.stack([self.records[r].out for r in rec.nbr_refs])
            phi_n, rec.nbr_time = self._time_neighbors(other, ts)
            rec.H_n = np.hstack([emb_n, phi_n])
            summary = self._summarize(rec, layer, cfg)

        rec.x = np.concatenate([summary, rec.h_q])
        rec.hidden = np.maximum(rec.x @ layer.ffn_w1 + layer.ffn_b1, 0.0)
        rec.out = rec.hidden @ layer.ffn_w2 + layer.ffn_b2
        return rec

    def _summarize(self, rec, layer, cfg):
        n_heads = layer.n_heads
        n = rec.H_n.shape[0]
        if cfg.aggregator == layers.LSTM:
            summary, rec.lstm_steps = layers.lstm_forward(rec.H_n, layer)
            return summary
        scale = 1.0 / np.sqrt(rec.h_q.shape[0])
        rec.v_all = np.einsum("si,hio->hso", rec.H_n, layer.w_v)
        if cfg.aggregator == layers.MEAN:
            rec.w_all = np.full((n_heads, n), 1.0 / n)
        else:
            rec.q_all = np.einsum("i,hio->ho", rec.h_q, layer.w_q)
            rec.k_all = np.einsum("si,hio->hso", rec.H_n, layer.w_k)
            logits = np.einsum("hso,ho->hs", rec.k_all, rec.q_all) * scale
            z = np.exp(logits - logits.max(axis=1, keepdims=True))
            rec.w_all = z / z.sum(axis=1, keepdims=True)
        return np.einsum("hs,hso->ho", rec.w_all, rec.v_all).reshape(-1)

    # -- time features -----------------------------------------------------

    def _time_query(self, node, t):
        enc = self.params.encoder
        cfg = self.params.config
        enabled = cfg.user_time if node[0] == USER else cfg.item_time
        if not enabled or enc.mode == EMPTY:
            return np.zeros(enc.d_time), None
        if enc.mode == POSITION:
            row = enc.query_row()
            return enc.table[row], ("pos", np.array([row]))
        return enc.encode(t), ("enc", np.array([t]))

    def _time_neighbors(self, side, ts):
        enc = self.params.encoder
        cfg = self.params.config
        enabled = cfg.user_time if side == USER else cfg.item_time
        if not enabled or enc.mode == EMPTY:
            return np.zeros((len(ts), enc.d_time)), None
        if enc.mode == POSITION:
            ranks = np.arange(len(ts))
            return enc.table[ranks], ("pos", ranks)
        return enc.encode_many(ts), ("enc", np.asarray(ts, dtype=np.float64))

    # -- introspection ------------------------------------------------------

    def attention_record(self, rid):
        """Attention over sampled neighbors at the trace record ``rid``."""
        rec = self.records[rid]
        if rec.depth == 0 or not rec.nbr_refs:
            return None
        weights = rec.w_all if getattr(rec, "w_all", None) is not None else None
        if weights is None:
            return None
        return AttentionRecord(neighbor_ids=rec.nbr_ids.copy(),
                               neighbor_times=rec.nbr_times.copy(),
                               weights=weights.copy())

    def all_sampled_times(self):
        """Timestamps of every neighbor drawn anywhere in this trace."""
        chunks = [ts for (_, ts) in self._samples.values() if len(ts)]
        if not chunks:
            return np.empty(0)
        return np.concatenate(chunks)

    # -- backward ------------------------------------------------------------

    def backward(self, seed_adjoints):
        """Parameter gradients given output adjoints per record index."""
        params = self.params
        cfg = params.config
        d = cfg.embed_dim
        grads = GradientSet(params)
        adj = [None] * len(self.records)
        for rid, g in seed_adjoints.items():
            if adj[rid] is None:
                adj[rid] = np.array(g, dtype=np.float64)
            else:
                adj[rid] = adj[rid] + g
        enc_ts, enc_up = [], []

        for rid in range(len(self.records) - 1, -1, -1):
            g = adj[rid]
            if g is None:
                continue
            rec = self.records[rid]
            if rec.depth == 0:
                grads.d_embedding[rec.row] += g
                grads.touched_rows.add(rec.row)
                continue
            layer = params.layers[rec.depth - 1]
            lg = grads.layers[rec.depth - 1]

            lg["ffn_b2"] += g
            lg["ffn_w2"] += np.outer(rec.hidden, g)
            ga = layer.ffn_w2 @ g
            gz = ga * (rec.hidden > 0)
            lg["ffn_b1"] += gz
            lg["ffn_w1"] += np.outer(rec.x, gz)
            gx = layer.ffn_w1 @ gz
            gsum = gx[:d]
            ghq = gx[d:].copy()

            if rec.nbr_refs:
                if cfg.aggregator == layers.LSTM:
                    g_hn = layers.lstm_backward(gsum, rec.lstm_steps, layer,
                                                lg["lstm_wx"], lg["lstm_wh"], lg["lstm_b"])
                else:
                    g_hn = np.zeros_like(rec.H_n)
                    dh = layer.head_dim
                    scale = 1.0 / np.sqrt(rec.h_q.shape[0])
                    for h in range(layer.n_heads):
                        gs = gsum[h * dh:(h + 1) * dh]
                        w = rec.w_all[h]
                        g_v = np.outer(w, gs)
                        if cfg.aggregator == layers.ATTENTION:
                            v = rec.v_all[h]
                            gw = v @ gs
                            glog = w * (gw - w @ gw)
                            gk = np.outer(glog, rec.q_all[h]) * scale
                            gq = (rec.k_all[h].T @ glog) * scale
                            lg["w_q"][h] += np.outer(rec.h_q, gq)
                            ghq += layer.w_q[h] @ gq
                            lg["w_k"][h] += rec.H_n.T @ gk
                            g_hn += gk @ layer.w_k[h].T
                        lg["w_v"][h] += rec.H_n.T @ g_v
                        g_hn += g_v @ layer.w_v[h].T
                for j, child in enumerate(rec.nbr_refs):
                    if adj[child] is None:
                        adj[child] = g_hn[j, :d].copy()
                    else:
                        adj[child] = adj[child] + g_hn[j, :d]
                self._push_time_grads(rec.nbr_time, g_hn[:, d:], grads, enc_ts, enc_up)

            child = rec.self_ref
            if adj[child] is None:
                adj[child] = ghq[:d].copy()
            else:
                adj[child] = adj[child] + ghq[:d]
            self._push_time_grads(rec.q_time, ghq[d:][None, :], grads, enc_ts, enc_up)

        if enc_ts and grads.d_omega is not None:
            ts = np.concatenate(enc_ts)
            up = np.vstack(enc_up)
            grads.d_omega += params.encoder.grad_omega(ts, up)
        return grads

    def _push_time_grads(self, tag, upstream, grads, enc_ts, enc_up):
        if tag is None:
            return
        kind, val = tag
        if kind == "pos":
            if grads.d_time_table is not None:
                grads.d_time_table[val] += upstream
        elif grads.d_omega is not None:
            enc_ts.append(val)
            enc_up.append(upstream)


LAYER_GRAD_KEYS = ("w_q", "w_k", "w_v", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
                   "lstm_wx", "lstm_wh", "lstm_b")


class GradientSet:
    """Gradients mirroring a parameter bundle.

    The embedding gradient is dense with zeros on untouched rows;
    ``touched_rows`` lists rows reached by the batch so optimizers and
    regularizers can stay sparse.
    """

    def __init__(self, params):
        self.d_embedding = np.zeros_like(params.embedding)
        self.touched_rows = set()
        enc = params.encoder
        self.d_omega = np.zeros_like(enc.omega) if enc.mode == LEARNED else None
        self.d_time_table = np.zeros_like(enc.table) if enc.mode == POSITION else None
        self.layers = []
        for layer in params.layers:
            entry = {}
            for name, arr in layer.named_arrays():
                entry[name] = np.zeros_like(arr)
            self.layers.append(entry)

    def named(self):
        """(name, gradient array) pairs; embedding goes first."""
        out = [("embedding", self.d_embedding)]
        if self.d_omega is not None:
            out.append(("time_omega", self.d_omega))
        if self.d_time_table is not None:
            out.append(("time_table", self.d_time_table))
        for i, entry in enumerate(self.layers):
            for name, arr in entry.items():
                out.append((f"layers.{i}.{name}", arr))
        return out

    def scale(self, factor):
        for _, arr in self.named():
            arr *= factor
        return self

    def add(self, other):
        self.d_embedding += other.d_embedding
        self.touched_rows |= other.touched_rows
        if self.d_omega is not None:
            self.d_omega += other.d_omega
        if self.d_time_table is not None:
            self.d_time_table += other.d_time_table
        for mine, theirs in zip(self.layers, other.layers):
            for name in mine:
                mine[name] += theirs[name]
        return self

    def check_finite(self):
        for name, arr in self.named():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite gradient in parameter group {name!r}")


def named_parameters(params):
    """(name, array) pairs of every trainable array, in checkpoint order."""
    out = [("embedding", params.embedding)]
    enc = params.encoder
    if enc.mode == LEARNED:
        out.append(("time_omega", enc.omega))
    elif enc.mode == POSITION:
        out.append(("time_table", enc.table))
    for i, layer in enumerate(params.layers):
        for name, arr in layer.named_arrays():
            out.append((f"layers.{i}.{name}", arr))
    return out
