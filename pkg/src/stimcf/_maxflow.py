"""Dinic max-flow on float capacities, small graphs.

Returns the minimal source-side min cut (reachable set in the residual
graph), which for our submodular set problems is the unique inclusion-minimal
minimizer.
"""

import numpy as np


class MaxFlow:
    def __init__(self, n_nodes):
        self.n = n_nodes + 2
        self.source = n_nodes
        self.sink = n_nodes + 1
        self.head = []
        self.cap = []
        self.nxt = []
        self.first = [-1] * self.n

    def add_edge(self, u, v, cap_uv, cap_vu=0.0):
        for (a, b, c) in ((u, v, cap_uv), (v, u, cap_vu)):
            self.head.append(b)
            self.cap.append(float(c))
            self.nxt.append(self.first[a])
            self.first[a] = len(self.head) - 1

    def _bfs(self):
        level = [-1] * self.n
        level[self.source] = 0
        queue = [self.source]
        qi = 0
        while qi < len(queue):
            u = queue[qi]
            qi += 1
            e = self.first[u]
            while e != -1:
                v = self.head[e]
                if self.cap[e] > 1e-15 and level[v] < 0:
                    level[v] = level[u] + 1
                    queue.append(v)
                e = self.nxt[e]
        self.level = level
        return level[self.sink] >= 0

    def _dfs(self, u, pushed):
        if u == self.sink:
            return pushed
        while self.iter[u] != -1:
            e = self.iter[u]
            v = self.head[e]
            if self.cap[e] > 1e-15 and self.level[v] == self.level[u] + 1:
                d = self._dfs(v, min(pushed, self.cap[e]))
                if d > 1e-15:
                    self.cap[e] -= d
                    self.cap[e ^ 1] += d
                    return d
            self.iter[u] = self.nxt[e]
        return 0.0

    def solve(self):
        import sys
        old = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old, self.n + 100))
        flow = 0.0
        while self._bfs():
            self.iter = list(self.first)
            while True:
                pushed = self._dfs(self.source, np.inf)
                if pushed <= 1e-15:
                    break
                flow += pushed
        sys.setrecursionlimit(old)
        return flow

    def source_side(self):
        """Nodes reachable from the source in the residual graph."""
        seen = np.zeros(self.n, bool)
        seen[self.source] = True
        stack = [self.source]
        while stack:
            u = stack.pop()
            e = self.first[u]
            while e != -1:
                v = self.head[e]
                if self.cap[e] > 1e-12 and not seen[v]:
                    seen[v] = True
                    stack.append(v)
                e = self.nxt[e]
        return seen[:-2]
