"""IO-aware serving primitives for linear attention with a paged KV buffer."""

from .buffer_manager import Pool, PoolConfig, RequestSlot, pool_init
from .decode_engine import DecodeEngine, DraftBatch, EngineConfig
from .errors import InvalidInputError, NumericError, OutOfMemoryError
from .gdn_core import (
    GdnBufferedToken,
    GdnChunk,
    GdnToken,
    gdn_build_chunk,
    gdn_chunk_attend,
    gdn_chunk_state_update,
    gdn_chunkwise_scan,
    gdn_parallel,
    gdn_recurrent_scan,
    gdn_recurrent_step,
)
from .io_cost_model import (
    CostProfile,
    CostQuery,
    LatencyModel,
    capacity,
    chunkwise_speedup,
    gdn_speedups,
    kv_only_speedup,
    optimal_buffer_size,
    profile,
    verify_speedup,
)
from .la_core import (
    AttnConfig,
    ChunkWorkspace,
    HeadState,
    TokenQKV,
    chunk_state_update,
    chunkwise_attend,
    chunkwise_scan,
    parallel_attend,
    recurrent_scan,
    recurrent_step,
)

__version__ = "0.1.0"
