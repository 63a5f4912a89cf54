"""Independent reference computations: explicit loops, plain floats, no package code."""
import math
from collections import deque


def dot(a, b):
    return sum(float(x) * float(y) for x, y in zip(a, b))


def logits_loops(q, k, queue, tau):
    """q, k: (T, N, C); queue: (T, L, C) -> nested lists (T, N, 1 + L)."""
    T, N = len(q), len(q[0])
    out = []
    for t in range(T):
        rows = []
        for n in range(N):
            row = [dot(q[t][n], k[t][n]) / tau]
            for neg in queue[t]:
                row.append(dot(q[t][n], neg) / tau)
            rows.append(row)
        out.append(rows)
    return out


def ce(row, target=0):
    m = max(row)
    lse = m + math.log(sum(math.exp(v - m) for v in row))
    return lse - row[target]


def mbc_loops(logits):
    T, N, K = len(logits), len(logits[0]), len(logits[0][0])
    total = 0.0
    for n in range(N):
        mean_row = [sum(logits[t][n][j] for t in range(T)) / T for j in range(K)]
        total += ce(mean_row)
    return total / N


def mac_loops(logits):
    T, N = len(logits), len(logits[0])
    return sum(ce(logits[t][n]) for t in range(T) for n in range(N)) / (T * N)


class FifoOracle:
    """List-based queue of the most recent ``length`` keys in insertion order."""

    def __init__(self, length):
        self.items = deque(maxlen=length)

    def push(self, keys):
        for key in keys:
            self.items.append(key)
