"""Static timing analysis, cascaded flip-flop insertion, and minimum-period
retiming via iterative-relabeling feasibility checks inside a binary search.

The retiming graph has one vertex per cell plus a host vertex standing in
for primary inputs and outputs. Edge weights count the flip-flops on each
driver-to-consumer connection; constant-driven connections carry no edges.
The host label is pinned, so every retiming preserves input-to-output
latency.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .netlist import KIND_NAMES, Netlist, NetlistError


@dataclass(frozen=True)
class TimingModel:
    """Unit delays by default; flop timing follows the worked example
    convention of clock-to-q 3 and setup 1."""

    delay: dict = field(default_factory=lambda: {name: 1 for name in KIND_NAMES})
    clk_to_q: float = 3
    setup: float = 1

    def __post_init__(self):
        for name in KIND_NAMES:
            if self.delay.get(name, 0) < 0:
                raise ValueError(f"negative delay for {name}")
        if self.clk_to_q < 0 or self.setup < 0:
            raise ValueError("flop timing must be non-negative")

    def cell_delay(self, kind: int):
        return self.delay.get(KIND_NAMES[kind], 1)

    def is_integral(self) -> bool:
        vals = list(self.delay.values()) + [self.clk_to_q, self.setup]
        return all(float(v).is_integer() for v in vals)


@dataclass
class StaResult:
    period: float
    path_delay: float
    critical_path: list[int]  # cell indices, source to sink


def sta_min_period(n: Netlist, t: TimingModel | None = None) -> StaResult:
    """period = clk_to_q + longest combinational path + setup.

    Paths run between any sequential endpoints or ports: launch at primary
    inputs, constants or flop outputs; capture at flop inputs or primary
    outputs.
    """
    t = t or TimingModel()
    arr = [0.0] * n.n_nets
    best_in = [-1] * n.n_nets  # driving cell index used for backtracking
    for idx, c in enumerate(n.cells):
        worst, src = 0.0, -1
        for i in c.ins:
            if arr[i] > worst or src == -1:
                worst, src = arr[i], i
        arr[c.out] = worst + t.cell_delay(c.kind)
        best_in[c.out] = idx
    endpoints = [ff.d for ff in n.flops]
    for nets in n.outputs.values():
        endpoints.extend(nets)
    path_delay, end = 0.0, -1
    for e in endpoints:
        if arr[e] > path_delay:
            path_delay, end = arr[e], e
    path = []
    while end >= 0 and best_in[end] >= 0:
        idx = best_in[end]
        path.append(idx)
        c = n.cells[idx]
        end = max(c.ins, key=lambda i: arr[i])
    path.reverse()
    return StaResult(t.clk_to_q + path_delay + t.setup, path_delay, path)


# ---------------------------------------------------------------------------
# Cascaded flip-flop insertion


def insert_pipeline_stages(n: Netlist, k: int) -> Netlist:
    """Append k extra flop ranks after each pipeline stage's output flops."""
    if k < 0:
        raise ValueError("stage count must be non-negative")
    if k == 0:
        return n.copy()
    tagged = [(i, s) for i, s in enumerate(n.flop_stages) if s >= 0]
    if not tagged:
        raise NetlistError("netlist carries no pipeline stage tags")
    out = n.copy()
    # chain-internal flops: their q already feeds a same-stage flop's D
    internal = {(s, n.flops[i].d) for i, s in tagged}
    rewire: dict[int, int] = {}
    for i, s in tagged:
        q = n.flops[i].q
        if (s, q) in internal:
            continue
        prev = q
        for _ in range(k):
            prev = out.add_flop(prev, stage=s)
        rewire[q] = prev

    def ref(net: int) -> int:
        return rewire.get(net, net)

    out.cells = [c._replace(ins=tuple(ref(i) for i in c.ins)) for c in n.cells]
    n_orig = len(n.flops)
    out.flops = [
        ff if idx >= n_orig or ff.d not in rewire else ff._replace(d=rewire[ff.d])
        for idx, ff in enumerate(out.flops)
    ]
    out.outputs = {name: tuple(ref(x) for x in nets) for name, nets in n.outputs.items()}
    if out.latency is not None:
        out.latency += k * n.stage_count()
    out.validate()
    return out


# ---------------------------------------------------------------------------
# Retiming


@dataclass
class RetimingResult:
    netlist: Netlist
    period: float
    labels: list[int]


class _RetimeGraph:
    HOST = -1

    def __init__(self, n: Netlist, t: TimingModel):
        self.n = n
        self.t = t
        drv: dict[int, tuple[str, int]] = {0: ("const", 0), 1: ("const", 1)}
        for nets in n.inputs.values():
            for x in nets:
                drv[x] = ("input", x)
        for i, ff in enumerate(n.flops):
            drv[ff.q] = ("flop", i)
        for i, c in enumerate(n.cells):
            drv[c.out] = ("cell", i)
        self.drv = drv
        self.origin_cache: dict[int, tuple[int, int, int]] = {}
        C = len(n.cells)
        self.C = C
        self.d = [t.cell_delay(c.kind) for c in n.cells] + [0.0]  # host last
        # Constant-origin connections are unconstrained: a register chain on
        # a constant net is the constant itself after the warm-up window, so
        # they carry no edges and the rebuild places no registers on them.
        edges: dict[tuple[int, int], int] = {}
        self.conn_cells: list[list[tuple[int, int, int, int]]] = []
        for ci, c in enumerate(n.cells):
            conns = []
            for pos, net in enumerate(c.ins):
                u, onet, w = self.trace(net)
                conns.append((pos, u, w, onet))
                if u == C and onet <= 1:
                    continue
                key = (u, ci)
                if key not in edges or w < edges[key]:
                    edges[key] = w
            self.conn_cells.append(conns)
        self.po_conns: dict[str, list[tuple[int, int, int]]] = {}
        for name, nets in n.outputs.items():
            conns = []
            for net in nets:
                u, onet, w = self.trace(net)
                conns.append((u, onet, w))
                if u == C and onet <= 1:
                    continue
                key = (u, C)
                if key not in edges or w < edges[key]:
                    edges[key] = w
            self.po_conns[name] = conns
        self.edges = [(u, v, w) for (u, v), w in edges.items()]
        self.max_reg_depth = self._max_register_depth()
        self.floor = self._label_floor()

    def trace(self, net: int) -> tuple[int, int, int]:
        """Walk back through flop chains: (origin vertex, origin net, #flops)."""
        got = self.origin_cache.get(net)
        if got is not None:
            return got
        w = 0
        cur = net
        while True:
            kind, idx = self.drv.get(cur, ("undriven", cur))
            if kind == "flop":
                cur = self.n.flops[idx].d
                w += 1
            elif kind == "cell":
                res = (idx, cur, w)
                break
            else:  # input, const, undriven
                res = (self.C, cur, w)
                break
        self.origin_cache[net] = res
        return res

    def _max_register_depth(self) -> int:
        """Max registers along any path; bounds the relabeling iterations.

        Relaxation to a fixpoint (host stays 0), so the bound is valid
        even if register edges point backward in cell order.
        """
        depth = [0] * (self.C + 1)
        for _ in range(self.C + 1):
            changed = False
            for u, v, w in self.edges:
                if v == self.C:
                    continue
                base = depth[u] if u != self.C else 0
                if base + w > depth[v]:
                    depth[v] = base + w
                    changed = True
            if not changed:
                break
        best = 0
        for u, v, w in self.edges:
            if v == self.C:
                base = depth[u] if u != self.C else 0
                best = max(best, base + w)
        return max(best, max(depth))

    def _label_floor(self) -> list[int]:
        """Pointwise lower bound on legal labels: -(min registers on any
        host-to-vertex path). Every legal labeling satisfies r >= floor,
        so iterative relabeling started here finds the least fixed point.
        Vertices unreachable from the host keep floor 0."""
        V = self.C + 1
        INF = 1 << 30
        dist = [INF] * V
        dist[self.C] = 0
        for _ in range(V):
            changed = False
            for u, v, w in self.edges:
                if v == self.C or dist[u] >= INF:
                    continue
                if dist[u] + w < dist[v]:
                    dist[v] = dist[u] + w
                    changed = True
            if not changed:
                break
        return [-d if d < INF else 0 for d in dist[: self.C]] + [0]

    def feas(self, budget) -> list[int] | None:
        """Iterative relabeling from the label floor; host stays pinned.

        Starting at the floor (all registers pushed maximally forward)
        makes increment-only relabeling complete for open pipelines:
        registers can effectively move in both directions. Returns labels
        with host = 0, or None when the budget is infeasible.
        """
        C = self.C
        V = C + 1
        r = list(self.floor)
        cap = min(2 * V + 2, 2 * self.max_reg_depth + 4)
        for _ in range(cap):
            delta = self._cp(r)
            if delta is None:
                return None
            viol = [v for v in range(C) if delta[v] > budget]
            if not viol:
                if delta[C] > budget:
                    return None  # an output-side path nobody can cut
                for u, v, w in self.edges:
                    if w + r[v] - r[u] < 0:
                        return None
                return r
            for v in viol:
                r[v] += 1
        return None

    def _cp(self, r) -> list[float] | None:
        """Delta(v): largest zero-slack path delay ending at v, inclusive.

        Paths do not continue through the host: a pipeline's environment
        captures outputs and launches inputs sequentially, so register-free
        output edges and register-free input edges are separate paths.
        """
        C = self.C
        V = C + 1
        preds: list[list[int]] = [[] for _ in range(V)]
        succs: list[list[int]] = [[] for _ in range(V)]
        indeg = [0] * V
        for u, v, w in self.edges:
            if u != C and w + r[v] - r[u] <= 0:
                succs[u].append(v)
                preds[v].append(u)
                indeg[v] += 1
        order = [v for v in range(V) if indeg[v] == 0]
        head = 0
        while head < len(order):
            u = order[head]
            head += 1
            for v in succs[u]:
                indeg[v] -= 1
                if indeg[v] == 0:
                    order.append(v)
        if len(order) < V:
            return None  # combinational cycle
        delta = [0.0] * V
        for v in order:
            worst = 0.0
            for u in preds[v]:
                if delta[u] > worst:
                    worst = delta[u]
            delta[v] = worst + self.d[v]
        return delta

    def max_delta(self, r) -> float:
        delta = self._cp(r)
        assert delta is not None
        return max(delta) if delta else 0.0

    def rebuild(self, r: list[int]) -> Netlist:
        """Reconstruct the netlist with registers placed per the labels."""
        n = self.n
        C = self.C
        out = Netlist(n.name)
        remap: dict[int, int] = {0: 0, 1: 1}
        for name, nets in n.inputs.items():
            out.inputs[name] = tuple(out.new_net() for _ in nets)
            for old, new in zip(nets, out.inputs[name]):
                remap[old] = new
        chains: dict[int, list[int]] = {}

        def stage_of(vertex: int) -> int:
            return n.stages[vertex] if 0 <= vertex < C else -1

        def tap(origin_vertex: int, origin_net: int, depth: int) -> int:
            src = remap[origin_net]
            if depth == 0:
                return src
            chain = chains.setdefault(origin_net, [src])
            while len(chain) <= depth:
                chain.append(out.add_flop(chain[-1], stage=stage_of(origin_vertex)))
            return chain[depth]

        for ci, c in enumerate(n.cells):
            ins = []
            for pos, u, w, onet in self.conn_cells[ci]:
                if u == C and onet <= 1:
                    need = 0  # constant nets never need registers
                else:
                    ru = r[u] if u != C else 0
                    need = w + r[ci] - ru
                assert need >= 0
                ins.append(tap(u, onet, need))
            new_out = out.add_cell(c.kind, tuple(ins), stage=n.stages[ci])
            remap[c.out] = new_out
        for name, conns in self.po_conns.items():
            nets = []
            for u, onet, w in conns:
                if u == C and onet <= 1:
                    need = 0
                else:
                    ru = r[u] if u != C else 0
                    need = w - ru
                assert need >= 0
                nets.append(tap(u, onet, need))
            out.set_output_bus(name, nets)
        out.latency = n.latency
        out.meta = dict(n.meta)
        out.validate()
        return out


def retime(n: Netlist, t: TimingModel | None = None) -> RetimingResult:
    """Minimum-period retiming; binary search over feasible path budgets.

    Sequentially equivalent to the input at identical latency (verify with
    a warm-up window covering the pipeline depth). If no register movement
    is possible the input is returned unchanged with its current period.
    """
    t = t or TimingModel()
    base = t.clk_to_q + t.setup
    sta0 = sta_min_period(n, t)
    if not n.cells:
        return RetimingResult(n.copy(), sta0.period, [])
    g = _RetimeGraph(n, t)
    budget0 = sta0.path_delay
    lo = max((g.d[i] for i in range(g.C)), default=0.0)
    best_r = None
    if t.is_integral():
        lo_i, hi_i = int(lo), int(budget0)
        while lo_i < hi_i:
            mid = (lo_i + hi_i) // 2
            r = g.feas(mid)
            if r is not None:
                best_r, hi_i = r, mid
            else:
                lo_i = mid + 1
        if best_r is None:
            best_r = g.feas(hi_i)
    else:
        lo_f, hi_f = float(lo), float(budget0)
        for _ in range(50):
            mid = (lo_f + hi_f) / 2
            r = g.feas(mid)
            if r is not None:
                best_r, hi_f = r, mid
            else:
                lo_f = mid
    if best_r is None or all(x == 0 for x in best_r):
        return RetimingResult(n.copy(), sta0.period, [0] * g.C)
    achieved = base + g.max_delta(best_r)
    if achieved >= sta0.period:
        return RetimingResult(n.copy(), sta0.period, [0] * g.C)
    rebuilt = g.rebuild(best_r)
    return RetimingResult(rebuilt, achieved, best_r[: g.C])


def register_depth(n: Netlist) -> int:
    """Maximum number of flip-flops along any input-to-output path;
    used as the warm-up window for sequential equivalence checks."""
    if not n.cells and not n.flops:
        return 0
    return _RetimeGraph(n, TimingModel()).max_reg_depth


def explore_stages(n: Netlist, t: TimingModel | None = None, max_k: int = 4):
    """Insert k = 0..max_k extra ranks, retime each, record the tradeoff."""
    t = t or TimingModel()
    rows = []
    for k in range(max_k + 1):
        staged = insert_pipeline_stages(n, k) if k else n.copy()
        res = retime(staged, t)
        rows.append(
            {"k": k, "period": res.period, "flops": len(res.netlist.flops)}
        )
    return rows
