"""Quantized MLP data model and the bit-exact integer inference oracle.

Everything downstream (circuit generation, equivalence checking, training
export) treats this module as the single source of truth for what the
network computes. All arithmetic here is exact integer arithmetic; no
floats appear anywhere on the inference path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

INT8_MIN = -128
INT8_MAX = 127
ACC_WIDTH_FLOOR = 9
REQUANT_M_BITS = 15


class ModelError(ValueError):
    """Malformed model file or violated model invariant."""


def bits_needed_signed(v: int) -> int:
    """Minimum two's-complement width that represents v (always >= 1)."""
    if v >= 0:
        return int(v).bit_length() + 1
    return int(-v - 1).bit_length() + 1


def clamp(v: int, lo: int, hi: int) -> int:
    return lo if v < lo else hi if v > hi else v


def signed_range(width: int) -> tuple[int, int]:
    """Inclusive (min, max) of a signed bus of the given width."""
    return -(1 << (width - 1)), (1 << (width - 1)) - 1


@dataclass(frozen=True)
class RequantParams:
    """Fixed-point rescaling: y = clamp((acc*m + 2**(s-1)) >> s, -128, 127).

    m is an unsigned multiplier below 2**15, s an arithmetic right shift.
    For s = 0 the rounding addend is 0. m/2**s approximates the real
    scaling factor that maps accumulator units to output units.
    """

    m: int
    s: int
    out_width: int = 8

    def __post_init__(self):
        if not 0 <= self.m < (1 << REQUANT_M_BITS):
            raise ModelError(f"requant multiplier out of range: {self.m}")
        if not 0 <= self.s <= 31:
            raise ModelError(f"requant shift out of range: {self.s}")
        if self.out_width != 8:
            raise ModelError("only 8-bit requant output is supported")


def requantize(acc: int, p: RequantParams) -> int:
    """Rescale a wide accumulator value to signed 8 bits.

    Multiply by m, add the half-up rounding constant, arithmetic shift
    right by s, clamp. Python's >> on negative ints is an arithmetic
    shift, which matches the hardware exactly.
    """
    rounding = (1 << (p.s - 1)) if p.s > 0 else 0
    return clamp((acc * p.m + rounding) >> p.s, INT8_MIN, INT8_MAX)


def derive_requant_params(scale: float) -> RequantParams:
    """Encode a real scale from (0, 1) as (m, s) with m/2**s ~= scale.

    m lands in [2**14, 2**15) whenever the shift budget (s <= 31) allows,
    which keeps the relative encoding error below 2**-13.
    """
    if not 0.0 < scale < 1.0:
        raise ModelError(f"requant scale must be in (0, 1), got {scale}")
    # Normalize so that round(scale * 2**s) has exactly 15 bits.
    s = 14 - int(np.floor(np.log2(scale)))
    s = min(s, 31)
    m = int(round(scale * (1 << s)))
    if m >= 1 << REQUANT_M_BITS:  # rounding crossed a power of two
        m >>= 1
        s -= 1
    return RequantParams(m=m, s=s)


def _as_int_tuple(row) -> tuple[int, ...]:
    return tuple(int(v) for v in row)


@dataclass(frozen=True)
class QLayer:
    """One fully-connected layer: int8 weights, profiled accumulator widths,
    a requantizer (shared or per-neuron) and an optional ReLU."""

    weights: tuple[tuple[int, ...], ...]  # [out][in]
    acc_widths: tuple[int, ...]
    requant: RequantParams | tuple[RequantParams, ...]
    activation: str = "relu"
    bias: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.weights or not self.weights[0]:
            raise ModelError("layer must have at least one neuron and input")
        n_in = len(self.weights[0])
        for row in self.weights:
            if len(row) != n_in:
                raise ModelError("ragged weight matrix")
            for w in row:
                if not INT8_MIN <= w <= INT8_MAX:
                    raise ModelError(f"weight {w} outside int8 range")
        if len(self.acc_widths) != len(self.weights):
            raise ModelError("acc_widths length must equal neuron count")
        for aw in self.acc_widths:
            if aw < ACC_WIDTH_FLOOR:
                raise ModelError(f"accumulator width {aw} below floor {ACC_WIDTH_FLOOR}")
        if self.activation not in ("relu", "none"):
            raise ModelError(f"unknown activation {self.activation!r}")
        if isinstance(self.requant, tuple):
            if len(self.requant) != len(self.weights):
                raise ModelError("per-neuron requant length mismatch")
        if self.bias is not None and len(self.bias) != len(self.weights):
            raise ModelError("bias length must equal neuron count")

    @property
    def n_in(self) -> int:
        return len(self.weights[0])

    @property
    def n_out(self) -> int:
        return len(self.weights)

    def requant_for(self, neuron: int) -> RequantParams:
        if isinstance(self.requant, tuple):
            return self.requant[neuron]
        return self.requant

    def worst_case_acc_range(self, neuron: int) -> tuple[int, int]:
        """Exact accumulator range for int8 inputs, before saturation."""
        lo = hi = self.bias[neuron] if self.bias else 0
        for w in self.weights[neuron]:
            if w >= 0:
                lo += w * INT8_MIN
                hi += w * INT8_MAX
            else:
                lo += w * INT8_MAX
                hi += w * INT8_MIN
        return lo, hi


@dataclass(frozen=True)
class QuantizedMLP:
    """Layered integer network; input activations are signed 8-bit."""

    layers: tuple[QLayer, ...]
    name: str = "mlp"
    input_width: int = 8

    def __post_init__(self):
        if not self.layers:
            raise ModelError("model needs at least one layer")
        if self.input_width != 8:
            raise ModelError("input width is fixed at 8 bits")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ModelError(
                    f"layer output count {a.n_out} != next layer input count {b.n_in}"
                )
        if self.layers[-1].activation != "none":
            raise ModelError("final layer must not have an activation")

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def arch(self) -> tuple[int, ...]:
        return (self.n_in,) + tuple(l.n_out for l in self.layers)


def worst_case_acc_width(layer: QLayer, neuron: int) -> int:
    """Accumulator width that can never saturate for int8 inputs."""
    lo, hi = layer.worst_case_acc_range(neuron)
    return max(bits_needed_signed(lo), bits_needed_signed(hi), ACC_WIDTH_FLOOR)


def infer_reference(model: QuantizedMLP, x) -> list[int]:
    """Bit-exact reference inference for one int8 input vector.

    Per layer: exact dot product, saturation into the profiled
    accumulator width, ReLU if present, then requantization to 8 bits.
    This is the behaviour every generated circuit must reproduce.
    """
    act = [int(v) for v in x]
    if len(act) != model.n_in:
        raise ModelError(f"expected {model.n_in} inputs, got {len(act)}")
    for v in act:
        if not INT8_MIN <= v <= INT8_MAX:
            raise ModelError(f"input {v} outside int8 range")
    for layer in model.layers:
        nxt = []
        for j, row in enumerate(layer.weights):
            acc = sum(w * a for w, a in zip(row, act))
            if layer.bias:
                acc += layer.bias[j]
            lo, hi = signed_range(layer.acc_widths[j])
            acc = clamp(acc, lo, hi)
            if layer.activation == "relu" and acc < 0:
                acc = 0
            nxt.append(requantize(acc, layer.requant_for(j)))
        act = nxt
    return act


def infer_reference_batch(model: QuantizedMLP, xs: np.ndarray) -> np.ndarray:
    """Vectorized reference inference over a batch of int8 input rows.

    Matches infer_reference exactly; int64 is wide enough because
    |acc| <= n_in * 128 * 128 and |acc * m| < 2**40 * 2**15 < 2**63.
    """
    act = np.asarray(xs, dtype=np.int64)
    if act.ndim != 2 or act.shape[1] != model.n_in:
        raise ModelError(f"expected shape (n, {model.n_in})")
    for layer in model.layers:
        w = np.array(layer.weights, dtype=np.int64)
        acc = act @ w.T
        if layer.bias:
            acc += np.array(layer.bias, dtype=np.int64)
        lo = np.array([signed_range(a)[0] for a in layer.acc_widths], dtype=np.int64)
        hi = np.array([signed_range(a)[1] for a in layer.acc_widths], dtype=np.int64)
        acc = np.clip(acc, lo, hi)
        if layer.activation == "relu":
            acc = np.maximum(acc, 0)
        if isinstance(layer.requant, tuple):
            m = np.array([p.m for p in layer.requant], dtype=np.int64)
            s = np.array([p.s for p in layer.requant], dtype=np.int64)
        else:
            m = np.int64(layer.requant.m)
            s = np.int64(layer.requant.s)
        rounding = np.where(s > 0, np.int64(1) << np.maximum(s - 1, 0), 0)
        act = np.clip((acc * m + rounding) >> s, INT8_MIN, INT8_MAX)
    return act


# ---------------------------------------------------------------------------
# JSON (de)serialization


def _requant_to_json(rq):
    if isinstance(rq, tuple):
        return [{"m": p.m, "s": p.s} for p in rq]
    return {"m": rq.m, "s": rq.s}


def _requant_from_json(obj):
    try:
        if isinstance(obj, list):
            return tuple(RequantParams(m=int(p["m"]), s=int(p["s"])) for p in obj)
        return RequantParams(m=int(obj["m"]), s=int(obj["s"]))
    except (KeyError, TypeError) as e:
        raise ModelError(f"bad requant record: {e}") from e


def model_to_json(model: QuantizedMLP) -> dict:
    layers = []
    for layer in model.layers:
        rec = {
            "weights": [list(row) for row in layer.weights],
            "acc_widths": list(layer.acc_widths),
            "requant": _requant_to_json(layer.requant),
            "activation": layer.activation,
        }
        if layer.bias is not None:
            rec["bias"] = list(layer.bias)
        layers.append(rec)
    return {"name": model.name, "layers": layers}


def model_from_json(doc: dict) -> QuantizedMLP:
    try:
        layers = tuple(
            QLayer(
                weights=tuple(_as_int_tuple(row) for row in rec["weights"]),
                acc_widths=_as_int_tuple(rec["acc_widths"]),
                requant=_requant_from_json(rec["requant"]),
                activation=rec.get("activation", "relu"),
                bias=_as_int_tuple(rec["bias"]) if rec.get("bias") else None,
            )
            for rec in doc["layers"]
        )
        return QuantizedMLP(layers=layers, name=doc.get("name", "mlp"))
    except (KeyError, TypeError) as e:
        raise ModelError(f"malformed model document: {e}") from e


def save_model(model: QuantizedMLP, path) -> None:
    with open(path, "w") as f:
        json.dump(model_to_json(model), f, indent=1, sort_keys=True)
        f.write("\n")


def load_model(path) -> QuantizedMLP:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ModelError(f"not valid JSON: {e}") from e
    return model_from_json(doc)
