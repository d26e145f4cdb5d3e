"""nnlogic: compile 8-bit quantized MLPs into weight-embedded, pipelined
gate-level circuits, optimize and time them, and co-train networks with
hardware-aware weight selection."""

from .qmodel import (
    QLayer,
    QuantizedMLP,
    RequantParams,
    bits_needed_signed,
    derive_requant_params,
    infer_reference,
    infer_reference_batch,
    load_model,
    requantize,
    save_model,
)
from .netlist import Netlist, simulate
from .simplify import check_equiv, simplify
from .verilog import emit_verilog
from .synth import (
    csd_encode,
    flatten_network,
    gen_adder_tree,
    gen_const_mult,
    gen_generic_mult,
    gen_relu,
    gen_requant,
    verify_against_reference,
)
from .timing import (
    TimingModel,
    explore_stages,
    insert_pipeline_stages,
    retime,
    sta_min_period,
)
from .cost import (
    CostModel,
    estimate_area,
    estimate_power,
    rank_weight_areas,
    select_top_n,
)
from .train import (
    TrainConfig,
    evaluate,
    profile_adder_widths,
    project_to_set,
    prune_unstructured,
    train_hat,
    train_qat,
)

__version__ = "0.1.0"
