"""Desk-scale compositional flow-matching transformer with routed
mixture-of-components global attention."""

from .component_tokens import (
    ID_CODEBOOK_SIZE,
    CrossAttentionPacker,
    IdCodebook,
    LearnableQueries,
    PackedTokens,
    assign_id_embeddings,
    n_compressed_tokens,
    pack_all,
    pack_component,
    split_component,
)
from .dit_model import (
    CompositionalDiT,
    Condition,
    ForwardTrace,
    ModelConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .local_block import LocalBlock, build_local_mask
from .moc_attention import (
    AttentionContext,
    CostModel,
    MoCAttention,
    assemble_context,
    context_length,
)
from .moc_router import (
    ComponentRouter,
    ImportanceMatrix,
    RoutingDecision,
    importance_scores,
    k_from_fraction,
    route_deterministic,
    route_stochastic,
)
from .numerics import (
    DTYPE,
    AttentionSpec,
    ParamStore,
    attention,
    finite_difference_grads,
    grad_check,
    masked_attention,
)
from .rectified_flow import FlowBatch, fm_loss, make_flow_batch, sample
from .synth_compose import (
    SceneRecord,
    SceneSpec,
    ToyPointCodec,
    chamfer,
    fps,
    fscore,
    gen_scene,
    read_scenes,
    self_iou,
    write_scenes,
)

__version__ = "0.1.0"
