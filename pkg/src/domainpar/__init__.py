"""Domain parallelism for dense tensors on a simulated device mesh.

Shards a single sample's spatial dims across ranks (the regime below batch
size one), keeps per-rank shard shapes as first-class metadata so uneven and
zero-extent shards work, and routes ops through a three-level dispatch table
with a gather-based dense fallback. Includes a closed-form training-memory
model and a randomized sharded-vs-dense verification suite.
"""

from . import ops as _ops  # registers default handlers and dense references
from .dense import (
    add,
    conv,
    conv_output_extent,
    elementwise,
    layer_norm,
    linear_backward,
    linear_forward,
    matmul,
    mul,
    scale,
    sdpa_dense,
    softmax,
)
from .dispatch import (
    DEFAULT_TABLE,
    DispatchTable,
    OpKey,
    TraceRecord,
    dispatch_operation,
    fallback_dispatch,
    promote_result,
    register_dense_reference,
    register_handler,
    trace_lines,
)
from .errors import (
    CollectiveError,
    DegenerateInputError,
    DimensionError,
    DomainParError,
    FitError,
    HaloError,
    IntegrityError,
    MeshError,
    MetadataError,
    ShapeError,
    UnsupportedConfigError,
    UnsupportedOperationError,
)
from .memory import (
    ActivationLedger,
    LayerStackSpec,
    MemoryReport,
    activation_bytes,
    memory_report,
    optimizer_bytes,
    param_count,
    per_rank_activation_bytes,
    scaling_fit,
    reference_table_reports,
    weight_bytes,
)
from .mesh import (
    AxisGroup,
    DeviceMesh,
    RankContext,
    all_gather_varlen,
    all_reduce,
    barrier,
    halo_exchange,
    ring_shift,
    spawn_mesh,
)
from .ops import (
    RingSoftmaxState,
    VitConfig,
    ddp_allreduce_grads,
    halo_conv,
    make_vit_weights,
    ring_attention,
    sharded_elementwise,
    sharded_layer_norm,
    sharded_linear,
    sharded_softmax,
    vit_block_pipeline,
    vit_block_pipeline_dense,
)
from .sharding import (
    AxisBalance,
    Placement,
    Replicate,
    Shard,
    ShardTensor,
    check_replication_coherence,
    default_chunk,
    full_tensor,
    rebalance_check,
    redistribute,
    scatter_global,
)

__version__ = "0.1.0"
