"""Structural Verilog emitter: primitive gates as continuous assignments,
flip-flops as one clocked block with synchronous reset."""

from __future__ import annotations

from .netlist import (
    AND2,
    BUF,
    CONST0,
    CONST1,
    INV,
    MUX2,
    NAND2,
    NOR2,
    OR2,
    XNOR2,
    XOR2,
    Netlist,
)

_IDENT_OK = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_")


def _port_ident(name: str) -> str:
    ident = "".join(c if c in _IDENT_OK else "_" for c in name)
    if not ident or ident[0].isdigit():
        ident = "p_" + ident
    return ident


def emit_verilog(n: Netlist, module_name: str = "top") -> str:
    """Render one synthesizable structural module.

    Port order is clk, rst, inputs, outputs (bus declaration order).
    Output is deterministic for a given netlist, so it is suitable for
    golden-file comparison.
    """
    names = {CONST0: "1'b0", CONST1: "1'b1"}
    for bus, nets in n.inputs.items():
        ident = _port_ident(bus)
        for i, net in enumerate(nets):
            names[net] = f"{ident}[{i}]" if len(nets) > 1 else ident
    for ff in n.flops:
        names[ff.q] = f"q{ff.q}"
    for c in n.cells:
        names[c.out] = f"n{c.out}"

    ports = ["input wire clk", "input wire rst"]
    for bus, nets in n.inputs.items():
        w = f"[{len(nets) - 1}:0] " if len(nets) > 1 else ""
        ports.append(f"input wire {w}{_port_ident(bus)}")
    for bus, nets in n.outputs.items():
        w = f"[{len(nets) - 1}:0] " if len(nets) > 1 else ""
        ports.append(f"output wire {w}{_port_ident(bus)}")

    lines = [f"module {module_name} ("]
    lines.extend(f"  {p}," for p in ports[:-1])
    lines.append(f"  {ports[-1]}")
    lines.append(");")

    for c in n.cells:
        lines.append(f"  wire n{c.out};")
    for ff in n.flops:
        lines.append(f"  reg q{ff.q};")

    for c in n.cells:
        a = names[c.ins[0]]
        if c.kind == INV:
            expr = f"~{a}"
        elif c.kind == BUF:
            expr = a
        elif c.kind == MUX2:
            expr = f"{names[c.ins[2]]} ? {names[c.ins[1]]} : {a}"
        else:
            b = names[c.ins[1]]
            expr = {
                AND2: f"{a} & {b}",
                OR2: f"{a} | {b}",
                NAND2: f"~({a} & {b})",
                NOR2: f"~({a} | {b})",
                XOR2: f"{a} ^ {b}",
                XNOR2: f"~({a} ^ {b})",
            }[c.kind]
        lines.append(f"  assign n{c.out} = {expr};")

    if n.flops:
        lines.append("  always @(posedge clk) begin")
        lines.append("    if (rst) begin")
        for ff in n.flops:
            lines.append(f"      q{ff.q} <= 1'b0;")
        lines.append("    end else begin")
        for ff in n.flops:
            lines.append(f"      q{ff.q} <= {names[ff.d]};")
        lines.append("    end")
        lines.append("  end")

    for bus, nets in n.outputs.items():
        ident = _port_ident(bus)
        for i, net in enumerate(nets):
            lhs = f"{ident}[{i}]" if len(nets) > 1 else ident
            lines.append(f"  assign {lhs} = {names[net]};")

    lines.append("endmodule")
    return "\n".join(lines) + "\n"
