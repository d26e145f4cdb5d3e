"""Quantization-aware training of small MLPs, unstructured pruning,
accumulator-width profiling, and hardware-aware training with
selected-weight projection and straight-through-estimator gradients.

Training is plain numpy: latent float weights, symmetric 8-bit fake
quantization of weights and activations in the forward pass, pass-through
gradients inside the clip range. Nets at this scale are tiny, so exact
reproducibility (seeded, single-threaded) matters more than throughput.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cost import WeightAreaTable, select_top_n
from .datasets import Dataset
from .qmodel import (
    ACC_WIDTH_FLOOR,
    QLayer,
    QuantizedMLP,
    bits_needed_signed,
    derive_requant_params,
    infer_reference_batch,
)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""


@dataclass
class TrainConfig:
    """Optimizer and loop hyperparameters.

    Defaults mirror the reference setup (Adam, lr 0.001 with step decay,
    batch 1024, 300 QAT / 100 HAT epochs); desk-scale runs pass smaller
    epochs/batch explicitly.
    """

    epochs: int = 300
    hat_epochs: int = 100
    batch_size: int = 1024
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    decay_factor: float = 0.1  # applied at 1/3 and 2/3 of the run
    hat_n: int = 40
    hat_step: int = 10
    hat_eps: float = 0.01
    hat_restart: bool = False  # restart from QAT latents at each expansion
    hat_project_forward: bool = True  # project in every forward pass too

    def __post_init__(self):
        if min(self.epochs, self.hat_epochs) < 0 or self.batch_size < 1:
            raise ValueError("bad epoch/batch configuration")
        if self.lr <= 0 or not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("bad optimizer configuration")


@dataclass
class FloatMLP:
    """Latent float weights mirroring a target quantized architecture."""

    weights: list  # np.ndarray [out, in] per layer
    activations: list  # "relu" for hidden layers, "none" last
    a_scales: list  # post-layer activation quant scales (input scale is 1)
    masks: list | None = None  # pruning masks, 1 = keep

    @property
    def arch(self):
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def copy(self) -> "FloatMLP":
        return FloatMLP(
            weights=[w.copy() for w in self.weights],
            activations=list(self.activations),
            a_scales=list(self.a_scales),
            masks=None if self.masks is None else [m.copy() for m in self.masks],
        )


@dataclass
class SelectionState:
    """Progress of the selected-weight expansion loop."""

    selected: frozenset
    iterations: int
    history: list = field(default_factory=list)  # (set size, val metric)
    eps: float = 0.01
    baseline: float = 0.0


def _weight_scale(w: np.ndarray) -> float:
    return max(float(np.abs(w).max()) / 127.0, 1e-8)


def _fake_quant_weight(w: np.ndarray, scale: float):
    q = np.clip(np.rint(w / scale), -128, 127)
    return q, q * scale


def init_float_mlp(n_in: int, hidden, n_out: int, seed: int) -> FloatMLP:
    rng = np.random.default_rng(seed)
    sizes = [n_in] + list(hidden) + [n_out]
    weights = []
    for a, b in zip(sizes, sizes[1:]):
        # int8 inputs span +-128, so weights start two octaves down
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(a), size=(b, a)) / 64.0)
    acts = ["relu"] * len(hidden) + ["none"]
    return FloatMLP(weights=weights, activations=acts, a_scales=[0.0] * len(weights))


def _forward(m: FloatMLP, x: np.ndarray, project=None, update_scales=False):
    """Fake-quantized forward pass; returns per-layer caches for backward."""
    a = x.astype(np.float64)
    caches = []
    for li, w in enumerate(m.weights):
        if m.masks is not None:
            w = w * m.masks[li]
        if project is not None:
            wq_int = project(li, w)
            scale = project.scales[li]
            wq = wq_int * scale
            w_in_range = np.ones_like(w, dtype=bool)
        else:
            scale = _weight_scale(w)
            wq_int, wq = _fake_quant_weight(w, scale)
            w_in_range = np.abs(w / scale) <= 127.5
        z = a @ wq.T
        h = np.maximum(z, 0.0) if m.activations[li] == "relu" else z
        if update_scales:
            peak = max(float(np.abs(h).max()) / 127.0, 1e-8)
            old = m.a_scales[li]
            m.a_scales[li] = peak if old == 0.0 else 0.9 * old + 0.1 * peak
        a_scale = m.a_scales[li] if m.a_scales[li] > 0 else 1.0
        lo = 0.0 if m.activations[li] == "relu" else -128.0
        hq = np.clip(np.rint(h / a_scale), lo, 127.0)
        a_next = hq * a_scale
        caches.append(
            {
                "a_in": a,
                "z": z,
                "h": h,
                "wq": wq,
                "w_in_range": w_in_range,
                "a_scale": a_scale,
                "act_in_range": np.abs(h / a_scale) <= 127.5,
                "lo": lo,
            }
        )
        a = a_next
    return a, caches


def _loss_and_grad(m: FloatMLP, x, targets, task: str):
    out, caches = _forward(m, x, update_scales=True)
    n = len(x)
    if task == "classification":
        z = caches[-1]["z"]  # loss on pre-quant logits
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        loss = float(-np.log(p[np.arange(n), targets] + 1e-12).mean())
        dz = p.copy()
        dz[np.arange(n), targets] -= 1.0
        dz /= n
        # bypass the final activation quantizer: inject at z of last layer
        grads = _backward_from_logits(m, caches, dz)
    else:
        scale = caches[-1]["a_scale"]
        pred = caches[-1]["z"] / scale
        err = pred - targets
        loss = float((err**2).mean())
        dz = (2.0 * err / (n * err.shape[1])) / scale
        grads = _backward_from_logits(m, caches, dz)
    return loss, grads


def _backward_from_logits(m: FloatMLP, caches, dz_last):
    grads = [None] * len(m.weights)
    li = len(m.weights) - 1
    c = caches[li]
    dw = dz_last.T @ c["a_in"]
    grads[li] = dw * c["w_in_range"]
    if m.masks is not None:
        grads[li] = grads[li] * m.masks[li]
    da = dz_last @ c["wq"]
    for li in range(len(m.weights) - 2, -1, -1):
        c = caches[li]
        dh = da * c["act_in_range"]
        dz = dh * (c["z"] > 0) if m.activations[li] == "relu" else dh
        dw = dz.T @ c["a_in"]
        grads[li] = dw * c["w_in_range"]
        if m.masks is not None:
            grads[li] = grads[li] * m.masks[li]
        da = dz @ c["wq"]
    return grads


class _Adam:
    def __init__(self, shapes, cfg: TrainConfig):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0
        self.cfg = cfg

    def step(self, weights, grads, lr):
        cfg = self.cfg
        self.t += 1
        b1t = 1 - cfg.beta1**self.t
        b2t = 1 - cfg.beta2**self.t
        for i, g in enumerate(grads):
            self.m[i] = cfg.beta1 * self.m[i] + (1 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1 - cfg.beta2) * g * g
            weights[i] -= lr * (self.m[i] / b1t) / (np.sqrt(self.v[i] / b2t) + 1e-8)


def _lr_at(cfg: TrainConfig, epoch: int, total: int) -> float:
    third = max(total // 3, 1)
    return cfg.lr * cfg.decay_factor ** min(epoch // third, 2)


def _run_epochs(m, data, cfg, epochs, rng, project=None, log=None, tag=""):
    train = data.subset("train")
    x = train.inputs.astype(np.float64)
    t = train.targets
    n = len(train)
    opt = _Adam([w.shape for w in m.weights], cfg)
    val = data.subset("val")
    metric = metric_for(data)
    for epoch in range(epochs):
        lr = _lr_at(cfg, epoch, epochs)
        order = rng.permutation(n)
        losses = []
        for at in range(0, n, cfg.batch_size):
            idx = order[at : at + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                if project is not None and cfg.hat_project_forward:
                    loss, grads = _loss_and_grad_projected(
                        m, x[idx], t[idx], data.task, project
                    )
                else:
                    loss, grads = _loss_and_grad(m, x[idx], t[idx], data.task)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} ({tag})")
            opt.step(m.weights, grads, lr)
            if m.masks is not None:
                for w, mask in zip(m.weights, m.masks):
                    w *= mask
            losses.append(loss)
        if project is not None:
            project.harden(m)  # hard-replace latents by their projections
        if log is not None:
            scales = project.scales if project is not None else None
            exported = export_quantized(m, w_scales=scales)
            log.append(
                {
                    "epoch": epoch,
                    "tag": tag,
                    "loss": float(np.mean(losses)),
                    "val_metric": evaluate(exported, val, metric) if len(val) else "",
                    "set_size": len(project.set_array) if project is not None else 256,
                }
            )
    return m


def _loss_and_grad_projected(m, x, targets, task, project):
    out, caches = _forward(m, x, project=project, update_scales=True)
    n = len(x)
    if task == "classification":
        z = caches[-1]["z"]
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        loss = float(-np.log(p[np.arange(n), targets] + 1e-12).mean())
        dz = p.copy()
        dz[np.arange(n), targets] -= 1.0
        dz /= n
    else:
        scale = caches[-1]["a_scale"]
        pred = caches[-1]["z"] / scale
        err = pred - targets
        loss = float((err**2).mean())
        dz = (2.0 * err / (n * err.shape[1])) / scale
    return loss, _backward_from_logits(m, caches, dz)


# ---------------------------------------------------------------------------
# Export to the integer model


def export_quantized(
    m: FloatMLP, name: str = "trained", w_scales: list | None = None
) -> QuantizedMLP:
    """Freeze scales, quantize weights, derive requantizers.

    `w_scales` pins the per-layer weight grid (hardware-aware training
    passes its projection scales so exported integers stay inside the
    selected set). Accumulator widths are worst-case here; profiling
    narrows them later.
    """
    layers = []
    prev_scale = 1.0  # inputs are already on the integer grid
    for li, w in enumerate(m.weights):
        if m.masks is not None:
            w = w * m.masks[li]
        scale = w_scales[li] if w_scales is not None else _weight_scale(w)
        wq_int, _ = _fake_quant_weight(w, scale)
        a_scale = m.a_scales[li] if m.a_scales[li] > 0 else 1.0
        r = scale * prev_scale / a_scale
        if r >= 1.0:  # output grid finer than the accumulator grid
            a_scale = scale * prev_scale / 0.5
            r = 0.5
        requant = derive_requant_params(max(r, 2.0**-16))
        rows = tuple(tuple(int(v) for v in row) for row in wq_int)
        widths = tuple(_worst_case_width(row) for row in rows)
        layers.append(
            QLayer(
                weights=rows,
                acc_widths=widths,
                requant=requant,
                activation="relu" if m.activations[li] == "relu" else "none",
            )
        )
        prev_scale = a_scale
    return QuantizedMLP(layers=tuple(layers), name=name)


def _worst_case_width(row) -> int:
    lo = hi = 0
    for w in row:
        if w >= 0:
            lo, hi = lo - 128 * w, hi + 127 * w
        else:
            lo, hi = lo + 127 * w, hi - 128 * w
    return max(bits_needed_signed(lo), bits_needed_signed(hi), ACC_WIDTH_FLOOR)


# ---------------------------------------------------------------------------
# Public training operations


def train_qat(
    data: Dataset,
    arch,
    cfg: TrainConfig,
    init: FloatMLP | None = None,
    epochs: int | None = None,
    log: list | None = None,
) -> tuple[FloatMLP, QuantizedMLP]:
    """Quantization-aware training; returns latent and exported models.

    `arch` lists the hidden layer sizes; input/output widths come from
    the dataset. Passing `init` continues training an existing model
    (fine-tuning after pruning, for example).
    """
    if len(data.subset("train")) == 0:
        raise ValueError("empty training split")
    m = init.copy() if init is not None else init_float_mlp(
        data.n_features, arch, data.n_outputs, cfg.seed
    )
    rng = np.random.default_rng(cfg.seed + 1)
    m = _run_epochs(m, data, cfg, cfg.epochs if epochs is None else epochs, rng,
                    log=log, tag="qat")
    return m, export_quantized(m)


def prune_unstructured(m: FloatMLP, sparsity: float) -> FloatMLP:
    """Zero the globally smallest-magnitude fraction of weights and freeze
    them with a mask; later training keeps masked weights at zero."""
    if not 0 <= sparsity < 1:
        raise ValueError("sparsity must be in [0, 1)")
    out = m.copy()
    if sparsity == 0:
        return out
    flat = np.concatenate([np.abs(w).ravel() for w in out.weights])
    k = int(len(flat) * sparsity)
    if k == 0:
        return out
    threshold = np.partition(flat, k - 1)[k - 1]
    masks = []
    budget = k  # ties at the threshold: zero only as many as requested
    for w in out.weights:
        mask = (np.abs(w) > threshold).astype(np.float64)
        masks.append(mask)
    zeroed = int(sum((mask == 0).sum() for mask in masks))
    if zeroed > k:  # relax ties deterministically, first come first kept
        excess = zeroed - k
        for mask, w in zip(masks, out.weights):
            at_thr = np.argwhere((mask == 0) & (np.abs(w) == threshold))
            for pos in at_thr:
                if excess == 0:
                    break
                mask[tuple(pos)] = 1.0
                excess -= 1
    for w, mask in zip(out.weights, masks):
        w *= mask
    out.masks = masks
    return out


def profiled_width(values, quantile: float) -> int:
    """Accumulator width after outlier-trimming at the given quantile.

    Keeps samples whose magnitude is at or below the empirical quantile
    of |values| and returns the two's-complement width of the kept
    extremes, floored at the 9-bit minimum.
    """
    if not 0.5 < quantile <= 1.0:
        raise ValueError("quantile must be in (0.5, 1]")
    vals = np.asarray(values, dtype=np.int64)
    if vals.size == 0:
        raise ValueError("empty activation sample")
    mags = np.sort(np.abs(vals))
    thr = mags[int(np.floor(quantile * (len(mags) - 1)))]
    kept = vals[np.abs(vals) <= thr]
    width = max(
        bits_needed_signed(int(kept.max())), bits_needed_signed(int(kept.min()))
    )
    return max(width, ACC_WIDTH_FLOOR)


def profile_adder_widths(
    model: QuantizedMLP, data: Dataset, quantile: float = 1.0
) -> QuantizedMLP:
    """Profile adder outputs on the training split and narrow the model's
    accumulator widths to the trimmed extremes (per neuron)."""
    train = data.subset("train")
    if len(train) == 0:
        raise ValueError("empty activation sample")
    accs = _collect_accs(model, train.inputs)
    layers = []
    for layer, acc in zip(model.layers, accs):
        widths = tuple(profiled_width(acc[:, j], quantile) for j in range(layer.n_out))
        layers.append(replace(layer, acc_widths=widths))
    return QuantizedMLP(layers=tuple(layers), name=model.name)


def _collect_accs(model: QuantizedMLP, xs) -> list:
    """Per-layer raw adder outputs with unbounded accumulators."""
    act = np.asarray(xs, dtype=np.int64)
    out = []
    for layer in model.layers:
        w = np.array(layer.weights, dtype=np.int64)
        acc = act @ w.T
        if layer.bias:
            acc += np.array(layer.bias, dtype=np.int64)
        out.append(acc)
        post = np.maximum(acc, 0) if layer.activation == "relu" else acc
        if isinstance(layer.requant, tuple):
            mm = np.array([p.m for p in layer.requant], dtype=np.int64)
            ss = np.array([p.s for p in layer.requant], dtype=np.int64)
        else:
            mm, ss = np.int64(layer.requant.m), np.int64(layer.requant.s)
        rounding = np.where(ss > 0, np.int64(1) << np.maximum(ss - 1, 0), 0)
        act = np.clip((post * mm + rounding) >> ss, -128, 127)
    return out


# ---------------------------------------------------------------------------
# Weight projection and hardware-aware training


def project_to_set(w: float, weight_set, scale: float, areas=None) -> int:
    """Closest member of the selected weight set to w/scale.

    Distance ties break toward the smaller multiplier area (CSD digit
    count stands in when no area table is supplied), then the smaller
    magnitude, then the non-negative candidate.
    """
    if not weight_set:
        raise ValueError("empty weight set")
    target = w / scale

    def cost(s: int):
        area = areas[s] if areas is not None else _digit_count(s)
        return (abs(target - s), area, abs(s), s < 0)

    return min(sorted(weight_set), key=cost)


def _digit_count(w: int) -> int:
    count = 0
    while w:
        if w & 1:
            count += 1
            w -= 2 - (w % 4)
        w >>= 1
    return count


class _Projector:
    """Vectorized nearest-set projection with frozen per-layer scales."""

    def __init__(self, m: FloatMLP, selected, areas):
        self.scales = [
            _weight_scale(w if m.masks is None else w * m.masks[i])
            for i, w in enumerate(m.weights)
        ]
        self.set_array = np.array(sorted(selected), dtype=np.int64)
        order = sorted(
            selected,
            key=lambda s: (areas[s] if areas else _digit_count(s), abs(s), s < 0),
        )
        self.pref = {s: i for i, s in enumerate(order)}  # tie preference

    def __call__(self, li: int, w: np.ndarray) -> np.ndarray:
        target = w / self.scales[li]
        pos = np.searchsorted(self.set_array, target)
        pos = np.clip(pos, 0, len(self.set_array) - 1)
        lo = np.clip(pos - 1, 0, len(self.set_array) - 1)
        c_hi = self.set_array[pos]
        c_lo = self.set_array[lo]
        d_hi = np.abs(target - c_hi)
        d_lo = np.abs(target - c_lo)
        pick_lo = d_lo < d_hi
        tie = d_lo == d_hi
        if tie.any():
            pref_lo = np.vectorize(self.pref.__getitem__)(c_lo)
            pref_hi = np.vectorize(self.pref.__getitem__)(c_hi)
            pick_lo = np.where(tie, pref_lo < pref_hi, pick_lo)
        return np.where(pick_lo, c_lo, c_hi).astype(np.float64)

    def harden(self, m: FloatMLP) -> None:
        for li, w in enumerate(m.weights):
            wq = self(li, w) * self.scales[li]
            np.copyto(w, wq)
            if m.masks is not None:
                w *= m.masks[li]


def evaluate(m: QuantizedMLP, data: Dataset, metric: str, ber_tol: int = 8) -> float:
    """Deterministic metric over a dataset split using reference inference."""
    if len(data) == 0:
        raise ValueError("empty split")
    y = infer_reference_batch(m, data.inputs)
    if metric == "accuracy":
        if data.task != "classification":
            raise ValueError("accuracy needs a classification dataset")
        pred = (y[:, 0] >= 0).astype(np.int64) if y.shape[1] == 1 else np.argmax(y, axis=1)
        return float((pred == data.targets).mean())
    if metric == "mse":
        return float(((y - data.targets) ** 2).mean())
    if metric in ("ber", "ber-proxy"):
        return float((np.abs(y - data.targets) > ber_tol).mean())
    raise ValueError(f"unknown metric {metric!r}")


def metric_for(data: Dataset) -> str:
    return "accuracy" if data.task == "classification" else "ber"


def _metric_ok(metric: str, value: float, baseline: float, eps: float) -> bool:
    if metric == "accuracy":
        return value >= baseline - eps
    return value <= baseline + eps  # error-style metrics: lower is better


def train_hat(
    m: FloatMLP,
    data: Dataset,
    table: WeightAreaTable,
    cfg: TrainConfig,
    eps: float | None = None,
    log: list | None = None,
) -> tuple[QuantizedMLP, SelectionState]:
    """Hardware-aware training with iterative selected-set expansion.

    Starting from the cheapest `hat_n` weights, trains with forward
    projection onto the set (straight-through backward), hard-replacing
    latents at each epoch end; grows the set by `hat_step` until the
    validation metric is within eps of the QAT baseline or the set is
    full. Every exported weight is a member of the final set.
    """
    eps = cfg.hat_eps if eps is None else eps
    metric = metric_for(data)
    val = data.subset("val")
    baseline = evaluate(export_quantized(m), val, metric)
    state = SelectionState(
        selected=frozenset(), iterations=0, eps=eps, baseline=baseline
    )
    qat_latent = m.copy()
    current = m.copy()
    rng = np.random.default_rng(cfg.seed + 2)
    n = cfg.hat_n
    while True:
        n = min(n, 256)
        selected = select_top_n(table, n)
        if cfg.hat_restart:
            current = qat_latent.copy()
        projector = _Projector(current, selected, table.areas)
        current = _run_epochs(
            current, data, cfg, cfg.hat_epochs, rng, project=projector,
            log=log, tag=f"hat{n}",
        )
        projector.harden(current)
        exported = export_quantized(current, name="hat", w_scales=projector.scales)
        value = evaluate(exported, val, metric)
        state.history.append((n, value))
        state.iterations += 1
        state.selected = selected
        if _metric_ok(metric, value, baseline, eps) or n >= 256:
            support = {w for layer in exported.layers for row in layer.weights for w in row}
            missing = support - set(selected)
            assert not missing, f"exported weights outside the set: {missing}"
            return exported, state
        n += cfg.hat_step
