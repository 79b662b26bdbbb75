"""Bidirectional sparse attention: query pruning, dynamic KV block selection,
a block-gathered executor and FLOP accounting."""

__version__ = "0.1.0"

from .attn import AttentionOutput, full_attention, read_output, softmax_row, sparse_attention, write_output
from .blocks import BlockSpec, block_token_indices, flatten_index, pool_blocks, unflatten_index, window_token_offsets
from .errors import BSAError, ConfigError, FormatError, InvalidShape, SelectionMismatch
from .kvsparse import (
    Q2KMap,
    build_q2k,
    calibrate_k,
    dynamic_threshold,
    normal_quantile,
    pooled_scores,
    select_all_q2k,
    select_min_index_set,
)
from .latents import LatentBundle, gen_bundle, read_bundle, splitmix_next, write_bundle
from .metrics import FlopReport, combined_sparsity, flop_report, flops_full, flops_sparse, overhead_flops, pair_sparsity
from .qsparse import QuerySelection, center_offset, dissimilarity_scores, restore_outputs, select_queries
from .schedule import AnnealSchedule, knobs_for_sparsity, kv_fraction_at_step, sparsity_at_step
