"""Weight-embedded logic generation: constant multipliers from canonical
signed-digit encodings, adder trees, ReLU, requantizers, and the flattening
of a whole quantized MLP into one pipelined netlist.

Every generated bus carries an exact signed value range. Ranges let the
builders size each adder to the true worst case (no speculative padding)
and let saturators disappear when the profiled width already covers the
range. Soundness of the ranges is what the bit-exactness tests certify.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .netlist import (
    AND2,
    CONST0,
    CONST1,
    INV,
    MUX2,
    OR2,
    XNOR2,
    XOR2,
    Netlist,
    pack_vectors,
    simulate_packed,
)
from .qmodel import (
    QuantizedMLP,
    RequantParams,
    bits_needed_signed,
    clamp,
    infer_reference_batch,
    signed_range,
)
from .simplify import simplify


def csd_encode(w: int) -> tuple[tuple[int, int], ...]:
    """Canonical signed-digit form of w: ((bit position, +-1), ...).

    No two adjacent positions are nonzero, so the digit count for an
    n-bit value is at most ceil((n+1)/2).
    """
    digits = []
    pos = 0
    while w != 0:
        if w & 1:
            d = 2 - (w % 4)  # +1 or -1, chosen so w - d is divisible by 4
            digits.append((pos, d))
            w -= d
        w >>= 1
        pos += 1
    return tuple(digits)


@dataclass(frozen=True)
class SBus:
    """A signed two's-complement bus with an exact value range."""

    nets: tuple[int, ...]  # LSB first
    lo: int
    hi: int

    @property
    def width(self) -> int:
        return len(self.nets)

    @property
    def sign(self) -> int:
        return self.nets[-1]


@dataclass(frozen=True)
class Block:
    """A flopless netlist fragment with one input and one output bus."""

    netlist: Netlist
    in_bus: str = "x"
    out_bus: str = "y"

    @property
    def out_width(self) -> int:
        return len(self.netlist.outputs[self.out_bus])


class _Builder:
    """Gate-level construction helpers with build-time constant folding."""

    def __init__(self, nl: Netlist, stage: int = -1):
        self.nl = nl
        self.stage = stage

    def cell(self, kind, ins) -> int:
        return self.nl.add_cell(kind, ins, stage=self.stage)

    def not_(self, a: int) -> int:
        if a == CONST0:
            return CONST1
        if a == CONST1:
            return CONST0
        return self.cell(INV, (a,))

    def and_(self, a: int, b: int) -> int:
        if a == CONST0 or b == CONST0:
            return CONST0
        if a == CONST1 or a == b:
            return b
        if b == CONST1:
            return a
        return self.cell(AND2, (a, b))

    def or_(self, a: int, b: int) -> int:
        if a == CONST1 or b == CONST1:
            return CONST1
        if a == CONST0 or a == b:
            return b
        if b == CONST0:
            return a
        return self.cell(OR2, (a, b))

    def xor_(self, a: int, b: int) -> int:
        if a == b:
            return CONST0
        if a == CONST0:
            return b
        if b == CONST0:
            return a
        if a == CONST1:
            return self.not_(b)
        if b == CONST1:
            return self.not_(a)
        return self.cell(XOR2, (a, b))

    def xnor_(self, a: int, b: int) -> int:
        if a == b:
            return CONST1
        if a == CONST1:
            return b
        if b == CONST1:
            return a
        if a == CONST0:
            return self.not_(b)
        if b == CONST0:
            return self.not_(a)
        return self.cell(XNOR2, (a, b))

    def mux_(self, d0: int, d1: int, sel: int) -> int:
        if sel == CONST0 or d0 == d1:
            return d0
        if sel == CONST1:
            return d1
        if d0 == CONST0:
            return self.and_(d1, sel)
        if d1 == CONST1:
            return self.or_(d0, sel)
        return self.cell(MUX2, (d0, d1, sel))

    def full_adder(self, a: int, b: int, cin: int) -> tuple[int, int]:
        axb = self.xor_(a, b)
        s = self.xor_(axb, cin)
        cout = self.or_(self.and_(a, b), self.and_(axb, cin))
        return s, cout

    # -- buses ----------------------------------------------------------

    def const_bus(self, value: int, width: int | None = None) -> SBus:
        if width is None:
            width = bits_needed_signed(value)
        nets = tuple(
            CONST1 if (value >> i) & 1 else CONST0 for i in range(width)
        )
        return SBus(nets, value, value)

    def resize(self, a: SBus, width: int) -> tuple[int, ...]:
        """Sign-extend or truncate; truncation is sound only when the
        value range fits the target width (callers guarantee it)."""
        if width <= a.width:
            return a.nets[:width]
        return a.nets + (a.sign,) * (width - a.width)

    def add(self, a: SBus, b: SBus, rng: tuple[int, int] | None = None,
            invert_b: bool = False, cin: int = CONST0) -> SBus:
        """Ripple-carry a + b (or a - b with invert_b and cin=1).

        `rng` overrides the interval-sum result range when the caller
        knows the operands are correlated (e.g. multiples of one input).
        """
        if rng is None:
            if invert_b:
                rng = (a.lo - b.hi, a.hi - b.lo)
            else:
                rng = (a.lo + b.lo, a.hi + b.hi)
        lo, hi = rng
        width = max(bits_needed_signed(lo), bits_needed_signed(hi))
        abits = self.resize(a, width)
        bbits = self.resize(b, width)
        if invert_b:
            bbits = tuple(self.not_(x) for x in bbits)
        outs = []
        c = cin
        for x, y in zip(abits, bbits):
            s, c = self.full_adder(x, y, c)
            outs.append(s)
        return SBus(tuple(outs), lo, hi)

    def sub(self, a: SBus, b: SBus, rng: tuple[int, int] | None = None) -> SBus:
        return self.add(a, b, rng=rng, invert_b=True, cin=CONST1)

    def neg(self, a: SBus) -> SBus:
        return self.sub(self.const_bus(0, 1), a, rng=(-a.hi, -a.lo))

    def shl(self, a: SBus, k: int) -> SBus:
        if k == 0:
            return a
        return SBus((CONST0,) * k + a.nets, a.lo << k, a.hi << k)

    def _chain_shifts(self, x: SBus, positions) -> tuple[SBus, int]:
        """Sum the shifted copies x << p in ascending position order.

        Chaining smallest-first keeps each adder's live span tight (the
        next term's low bits are zeros), which beats balanced pairing on
        area; retiming recovers the extra depth.
        """

        def crange(c: int) -> tuple[int, int]:
            v0, v1 = c * x.lo, c * x.hi
            return (v0, v1) if v0 <= v1 else (v1, v0)

        acc, coef = self.shl(x, positions[0]), 1 << positions[0]
        for p in positions[1:]:
            coef += 1 << p
            acc = self.add(acc, self.shl(x, p), rng=crange(coef))
        return acc, coef

    def mul_const(self, x: SBus, w: int) -> SBus:
        """w * x as a signed-digit shift-add/subtract network.

        Chooses between the canonical signed-digit form and the plain
        binary form by adder/subtractor count: CSD wins when it saves
        operations, binary wins ties (no operand inversion). Negative
        digits are summed and removed with one fused subtractor (inverted
        operand, carry-in 1); only all-negative forms pay a negation.
        """
        if w == 0 or x.lo == x.hi == 0:
            return self.const_bus(0, 1)
        csd = csd_encode(w)
        binary = tuple(
            (p, 1 if w > 0 else -1)
            for p in range(abs(w).bit_length())
            if (abs(w) >> p) & 1
        )
        forms = [binary, csd]
        if w < 0:
            # two's-complement form: positive low bits, one subtracted MSB
            k = bits_needed_signed(w) - 1
            forms.append(
                tuple((p, 1) for p in range(k) if ((w + (1 << k)) >> p) & 1)
                + ((k, -1),)
            )

        def op_cost(digits):
            npos = sum(1 for _, s in digits if s > 0)
            nneg = len(digits) - npos
            adds = max(npos - 1, 0) + max(nneg - 1, 0)
            fixup = 1 if nneg else 0  # one subtract, or a final negation
            span = max(p for p, _ in digits) - min(p for p, _ in digits)
            return (adds + fixup, nneg, span)

        digits = min(forms, key=op_cost)
        pos = [p for p, s in digits if s > 0]
        neg = [p for p, s in digits if s < 0]

        def crange(c: int) -> tuple[int, int]:
            v0, v1 = c * x.lo, c * x.hi
            return (v0, v1) if v0 <= v1 else (v1, v0)

        if not neg:
            return self._chain_shifts(x, pos)[0]
        neg_bus, cn = self._chain_shifts(x, neg)
        if not pos:
            return self.sub(self.const_bus(0, 1), neg_bus, rng=crange(-cn))
        pos_bus, cp = self._chain_shifts(x, pos)
        return self.sub(pos_bus, neg_bus, rng=crange(cp - cn))

    def mul_generic(self, x: SBus, wbits, wlo: int, whi: int) -> SBus:
        """Array multiplier: AND partial-product rows, sign row subtracted."""
        corners = [a * c for a in (x.lo, x.hi) for c in (wlo, whi)]
        full = (min(corners), max(corners))

        def row(i: int) -> SBus:
            gated = tuple(self.and_(xb, wbits[i]) for xb in x.nets)
            lo, hi = min(0, x.lo << i), max(0, x.hi << i)
            return SBus((CONST0,) * i + gated, lo, hi)

        acc = None
        for i in range(len(wbits) - 1):
            acc = row(i) if acc is None else self.add(acc, row(i))
        return self.sub(acc, row(len(wbits) - 1), rng=full)

    def relu(self, a: SBus) -> SBus:
        if a.lo >= 0:
            return a
        if a.hi < 0:
            return self.const_bus(0, 1)
        keep = self.not_(a.sign)
        nets = tuple(self.and_(b, keep) for b in a.nets)
        return SBus(nets, 0, a.hi)

    def saturate(self, a: SBus, width: int) -> SBus:
        """Clamp into the signed range of `width` (wiring only if it fits)."""
        lo, hi = signed_range(width)
        rlo, rhi = clamp(a.lo, lo, hi), clamp(a.hi, lo, hi)
        if lo <= a.lo and a.hi <= hi:
            return SBus(self.resize(a, width), a.lo, a.hi)
        sign = a.sign
        eqs = [self.xnor_(a.nets[i], sign) for i in range(width - 1, a.width - 1)]
        while len(eqs) > 1:
            eqs = [self.and_(eqs[i], eqs[i + 1]) for i in range(0, len(eqs) - 1, 2)] + (
                [eqs[-1]] if len(eqs) % 2 else []
            )
        ok = eqs[0] if eqs else CONST1
        nsign = self.not_(sign)
        outs = [self.mux_(nsign, a.nets[i], ok) for i in range(width - 1)]
        outs.append(self.mux_(sign, a.nets[width - 1], ok))
        return SBus(tuple(outs), rlo, rhi)

    def requant(self, a: SBus, p: RequantParams) -> SBus:
        """Bit-exact circuit for qmodel.requantize at this input range."""
        prod = self.mul_const(a, p.m)
        if p.s > 0:
            r = 1 << (p.s - 1)
            prod = self.add(prod, self.const_bus(r), rng=(prod.lo + r, prod.hi + r))
        lo, hi = prod.lo >> p.s, prod.hi >> p.s
        if p.s >= prod.width:
            shifted = SBus((prod.sign,), lo, hi)
        elif p.s > 0:
            shifted = SBus(prod.nets[p.s:], lo, hi)
        else:
            shifted = prod
        return self.saturate(shifted, 8)


# ---------------------------------------------------------------------------
# Block generators (each returns a simplified standalone fragment)


def _block(nl: Netlist, out: SBus) -> Block:
    nl.set_output_bus("y", out.nets)
    return Block(netlist=simplify(nl))


def gen_const_mult(w: int, in_width: int) -> Block:
    """Constant-coefficient multiplier computing w*x for signed x.

    Output width is exactly the worst-case product width; w = 0 yields a
    constant-zero output with no cells.
    """
    if in_width < 2:
        raise ValueError("input width must be at least 2")
    nl = Netlist(f"mul_{'m' if w < 0 else ''}{abs(w)}")
    b = _Builder(nl)
    lo, hi = signed_range(in_width)
    x = SBus(nl.add_input_bus("x", in_width), lo, hi)
    return _block(nl, b.mul_const(x, w))


def gen_generic_mult(in_width: int, w_width: int) -> Block:
    """Two-operand signed array multiplier (the unsimplified baseline).

    The single input bus is the concatenation of x (low bits) and w.
    Partial products are AND rows; the sign row is subtracted.
    """
    if in_width < 2 or w_width < 2:
        raise ValueError("operand widths must be at least 2")
    nl = Netlist(f"mul_generic_{in_width}x{w_width}")
    b = _Builder(nl)
    nets = nl.add_input_bus("x", in_width + w_width)
    xlo, xhi = signed_range(in_width)
    wlo, whi = signed_range(w_width)
    x = SBus(nets[:in_width], xlo, xhi)
    return _block(nl, b.mul_generic(x, nets[in_width:], wlo, whi))


def gen_adder_tree(operand_widths, out_width: int, saturate: bool) -> Block:
    """Balanced tree of ripple-carry adders over the concatenated operands."""
    widths = list(operand_widths)
    if not widths:
        raise ValueError("need at least one operand")
    nl = Netlist("adder_tree")
    b = _Builder(nl)
    total = sum(widths)
    nets = nl.add_input_bus("x", total)
    terms = []
    at = 0
    for w in widths:
        lo, hi = signed_range(w)
        terms.append(SBus(nets[at : at + w], lo, hi))
        at += w
    while len(terms) > 1:
        nxt = [b.add(terms[i], terms[i + 1]) for i in range(0, len(terms) - 1, 2)]
        if len(terms) % 2:
            nxt.append(terms[-1])
        terms = nxt
    acc = terms[0]
    if saturate:
        acc = b.saturate(acc, out_width)
    else:
        need = max(bits_needed_signed(acc.lo), bits_needed_signed(acc.hi))
        if need > out_width:
            raise ValueError(
                f"out_width {out_width} cannot hold worst case ({need} bits)"
            )
        acc = SBus(b.resize(acc, out_width), acc.lo, acc.hi)
    return _block(nl, acc)


def gen_relu(width: int) -> Block:
    """Zero the bus when the sign bit is set, else pass it through."""
    if width < 2:
        raise ValueError("width must be at least 2")
    nl = Netlist("relu")
    b = _Builder(nl)
    lo, hi = signed_range(width)
    x = SBus(nl.add_input_bus("x", width), lo, hi)
    out = b.relu(x)
    return _block(nl, SBus(b.resize(out, width), out.lo, out.hi))


def gen_requant(p: RequantParams, in_width: int) -> Block:
    """Requantizer block: constant multiply, round, shift, clamp to 8 bits."""
    if in_width < 9:
        raise ValueError("requantizer input must be at least 9 bits")
    nl = Netlist("requant")
    b = _Builder(nl)
    lo, hi = signed_range(in_width)
    x = SBus(nl.add_input_bus("x", in_width), lo, hi)
    return _block(nl, b.requant(x, p))


# ---------------------------------------------------------------------------
# Whole-network flattening


def _flatten(model: QuantizedMLP, nl: Netlist, make_terms) -> Netlist:
    """Common per-neuron skeleton: product terms from `make_terms`, one
    reduction saturated into the profiled width, ReLU, requantizer, and a
    flop rank; layer outputs become the next layer's activations."""
    acts = []
    for i in range(model.n_in):
        lo, hi = signed_range(8)
        acts.append(SBus(nl.add_input_bus(f"x{i}", 8), lo, hi))

    for li, layer in enumerate(model.layers):
        b = _Builder(nl, stage=li)
        prepared = make_terms(b, layer, li, acts)
        next_acts = []
        for j in range(layer.n_out):
            terms = prepared(j)
            if layer.bias and layer.bias[j]:
                terms.append(b.const_bus(layer.bias[j]))
            if not terms:
                terms = [b.const_bus(0, 1)]
            while len(terms) > 1:
                terms = [
                    b.add(terms[k], terms[k + 1]) for k in range(0, len(terms) - 1, 2)
                ] + ([terms[-1]] if len(terms) % 2 else [])
            acc = b.saturate(terms[0], layer.acc_widths[j])
            if layer.activation == "relu":
                acc = b.relu(acc)
            out = b.requant(acc, layer.requant_for(j))
            qnets = tuple(nl.add_flop(d, stage=li) for d in out.nets)
            next_acts.append(SBus(qnets, out.lo, out.hi))
        acts = next_acts

    for j, bus in enumerate(acts):
        nl.set_output_bus(f"y{j}", bus.nets)
    nl.latency = len(model.layers)
    nl.validate()
    return nl


def flatten_network(model: QuantizedMLP, run_simplify: bool = True) -> Netlist:
    """Flatten a quantized MLP into one pipelined gate-level netlist.

    Per layer and neuron: constant multipliers for the nonzero weights
    (zero weights emit nothing), one saturating adder reduction into the
    profiled accumulator width, ReLU when present, a requantizer, then a
    rank of flip-flops on the 8-bit neuron output. Pipeline latency
    equals the layer count.
    """
    nl = Netlist(model.name)
    mult_count = 0

    def make_terms(b, layer, li, acts):
        def per_neuron(j):
            nonlocal mult_count
            terms = []
            for i, w in enumerate(layer.weights[j]):
                if w == 0:
                    continue
                terms.append(b.mul_const(acts[i], w))
                mult_count += 1
            return terms

        return per_neuron

    _flatten(model, nl, make_terms)
    nl.meta["multipliers"] = mult_count
    nl.meta["arch"] = list(model.arch)
    return simplify(nl) if run_simplify else nl


def flatten_network_generic(model: QuantizedMLP) -> Netlist:
    """Baseline build: generic multipliers with weights fed as registered
    inputs instead of being embedded in the logic."""
    nl = Netlist(model.name + "_generic")
    wlo, whi = signed_range(8)

    def make_terms(b, layer, li, acts):
        wq = [
            [
                tuple(
                    nl.add_flop(d, stage=li)
                    for d in nl.add_input_bus(f"w{li}_{j}_{i}", 8)
                )
                for i in range(layer.n_in)
            ]
            for j in range(layer.n_out)
        ]

        def per_neuron(j):
            return [
                b.mul_generic(acts[i], wq[j][i], wlo, whi)
                for i in range(layer.n_in)
            ]

        return per_neuron

    return _flatten(model, nl, make_terms)


def weight_input_assignment(model: QuantizedMLP) -> dict[str, int]:
    """Input words that tie a generic baseline's weight buses to the model."""
    assign = {}
    for li, layer in enumerate(model.layers):
        for j, row in enumerate(layer.weights):
            for i, w in enumerate(row):
                assign[f"w{li}_{j}_{i}"] = w & 0xFF
    return assign


# ---------------------------------------------------------------------------
# Circuit-vs-oracle verification


@dataclass
class VerifyResult:
    equivalent: bool
    vectors: int
    mismatch_input: list[int] | None = None
    mismatch_output: int | None = None
    expected: list[int] | None = None
    got: list[int] | None = None

    def __bool__(self) -> bool:
        return self.equivalent


def verify_against_reference(
    net: Netlist,
    model: QuantizedMLP,
    n_vectors: int = 10_000,
    seed: int = 7,
    extra_vectors=None,
    latency: int | None = None,
    fixed_inputs: dict[str, int] | None = None,
) -> VerifyResult:
    """Compare streaming simulation of `net` against the integer oracle.

    Drives one random int8 vector per lane per cycle; the output at cycle
    t + latency in a lane must equal infer_reference of that lane's input
    at cycle t. `fixed_inputs` holds non-model buses (e.g. baseline
    weight inputs) at constant values.
    """
    if latency is None:
        latency = net.latency
    if latency is None:
        raise ValueError("netlist has no recorded latency")
    for i in range(model.n_in):
        if f"x{i}" not in net.inputs:
            raise ValueError(f"netlist lacks input bus x{i}; wrong model?")
    for j in range(model.n_out):
        if f"y{j}" not in net.outputs:
            raise ValueError(f"netlist lacks output bus y{j}; wrong model?")
    rng = random.Random(seed)
    vectors = [
        [rng.randint(-128, 127) for _ in range(model.n_in)] for _ in range(n_vectors)
    ]
    if extra_vectors is not None and len(extra_vectors):
        vectors.extend([list(map(int, v)) for v in extra_vectors])
    lanes = min(len(vectors), 2048)
    per_lane = -(-len(vectors) // lanes)
    while len(vectors) < lanes * per_lane:
        vectors.append(vectors[-1])
    # lane k, cycle t carries vectors[t * lanes + k]
    stream = []
    fixed_words = {}
    if fixed_inputs:
        for name, value in fixed_inputs.items():
            nets = net.inputs[name]
            fixed_words[name] = [
                ((1 << lanes) - 1) if (value >> bit) & 1 else 0
                for bit in range(len(nets))
            ]
    for t in range(per_lane + latency):
        ti = min(t, per_lane - 1)  # pad tail with the last batch
        batch = vectors[ti * lanes : (ti + 1) * lanes]
        assign = {}
        for i in range(model.n_in):
            assign[f"x{i}"] = pack_vectors([v[i] for v in batch], 8)
        assign.update(fixed_words)
        stream.append(assign)
    records = simulate_packed(net, stream, lanes)
    expected = infer_reference_batch(model, vectors)
    for t in range(per_lane):
        rec = records[t + latency]
        for j in range(model.n_out):
            words = rec[f"y{j}"]
            want = pack_vectors(
                [int(v) for v in expected[t * lanes : (t + 1) * lanes, j]], 8
            )
            diff = 0
            for a, b_ in zip(words, want):
                diff |= a ^ b_
            if diff:
                lane = (diff & -diff).bit_length() - 1
                idx = t * lanes + lane
                got_bits = sum(((words[b_] >> lane) & 1) << b_ for b_ in range(8))
                got = got_bits - 256 if got_bits >= 128 else got_bits
                return VerifyResult(
                    False,
                    vectors=idx,
                    mismatch_input=vectors[idx],
                    mismatch_output=j,
                    expected=[int(v) for v in expected[idx]],
                    got=[got],
                )
    return VerifyResult(True, vectors=len(vectors))
