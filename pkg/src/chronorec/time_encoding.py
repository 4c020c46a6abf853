"""Continuous-time feature maps and the induced translation-invariant kernel.

The main encoder maps a scalar time t to interleaved cosine/sine features
scaled so that the dot product of two encodings depends only on the time
difference and equals 1 at zero lag. Two degenerate variants used by
ablations (rank-lookup and all-zero encodings) live here as well.
"""

from __future__ import annotations

import numpy as np

LEARNED = "learned"
FIXED = "fixed"
POSITION = "position"
EMPTY = "empty"

TIME_MODES = (LEARNED, FIXED, POSITION, EMPTY)


class TimeEncoder:
    """Trainable frequency bank realizing a cosine/sine time feature map.

    encode(t) = sqrt(2/d_time) * [cos(w_1 t), sin(w_1 t), ..., cos(w_m t), sin(w_m t)]

    with d_time = 2m, so encode(t1) . encode(t2) telescopes to the mean of
    cos(w_k (t1 - t2)) over the bank: a translation-invariant kernel with
    value 1 at equal times.
    """

    mode = LEARNED

    def __init__(self, omega, trainable=True):
        omega = np.asarray(omega, dtype=np.float64).reshape(-1)
        if omega.size == 0:
            raise ValueError("need at least one frequency")
        if not np.all(np.isfinite(omega)):
            raise ValueError("frequencies must be finite")
        self.omega = omega
        self.trainable = bool(trainable)
        self.mode = LEARNED if trainable else FIXED

    @property
    def d_time(self):
        return 2 * self.omega.size

    @classmethod
    def geometric(cls, d_time, span_ratio, trainable=True):
        """Frequency ladder covering scales from the full span down to 1/span_ratio of it.

        For inputs living on [0, 1] the slowest component has angular
        frequency 1 and the fastest ``span_ratio``, i.e. in raw-time units
        the bank runs geometrically from one cycle per unit up to one cycle
        per full span.
        """
        if d_time < 2 or d_time % 2 != 0:
            raise ValueError("d_time must be a positive even number")
        if span_ratio < 1.0:
            raise ValueError("span_ratio must be >= 1")
        m = d_time // 2
        if m == 1:
            omega = np.array([np.sqrt(span_ratio)])
        else:
            omega = np.geomspace(span_ratio, 1.0, m)
        return cls(omega, trainable=trainable)

    def encode(self, t):
        """Feature vector of a single timestamp, shape (d_time,)."""
        return self.encode_many(np.array([t], dtype=np.float64))[0]

    def encode_many(self, ts):
        """Feature matrix of a batch of timestamps, shape (n, d_time)."""
        ts = np.asarray(ts, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(ts)):
            raise ValueError("timestamps must be finite")
        arg = np.outer(ts, self.omega)
        out = np.empty((ts.size, self.d_time))
        scale = np.sqrt(2.0 / self.d_time)
        out[:, 0::2] = np.cos(arg) * scale
        out[:, 1::2] = np.sin(arg) * scale
        return out

    def kernel(self, t1, t2):
        """Temporal correlation of two timestamps: encode(t1) . encode(t2)."""
        return float(np.dot(self.encode(t1), self.encode(t2)))

    def grad_omega(self, ts, upstream):
        """Accumulate d(loss)/d(omega) from upstream feature gradients.

        ``ts`` has shape (n,), ``upstream`` shape (n, d_time); returns (m,).
        """
        ts = np.asarray(ts, dtype=np.float64).reshape(-1)
        arg = np.outer(ts, self.omega)
        scale = np.sqrt(2.0 / self.d_time)
        # d cos(wt)/dw = -t sin(wt); d sin(wt)/dw = t cos(wt)
        contrib = -upstream[:, 0::2] * np.sin(arg) + upstream[:, 1::2] * np.cos(arg)
        return scale * (ts[:, None] * contrib).sum(axis=0)


class PositionalEncoder:
    """Learned lookup over a neighbor's rank in its time-sorted history.

    Row r encodes the r-th oldest sampled neighbor; the final row stands in
    for the query itself. Timestamp values are ignored entirely.
    """

    mode = POSITION

    def __init__(self, table):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2 or table.shape[0] < 2 or table.shape[1] % 2 != 0:
            raise ValueError("table must be (max_rank + 2, even d_time)")
        self.table = table

    @property
    def d_time(self):
        return self.table.shape[1]

    @property
    def max_neighbors(self):
        return self.table.shape[0] - 1

    def query_row(self):
        return self.table.shape[0] - 1


class EmptyEncoder:
    """All-zero time features: the model sees no temporal information."""

    mode = EMPTY

    def __init__(self, d_time):
        if d_time < 2 or d_time % 2 != 0:
            raise ValueError("d_time must be a positive even number")
        self._d_time = int(d_time)

    @property
    def d_time(self):
        return self._d_time


def encode(enc, t):
    return enc.encode(t)


def kernel(enc, t1, t2):
    return enc.kernel(t1, t2)
