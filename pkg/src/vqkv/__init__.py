"""Residual SimVQ compression of transformer KV caches."""

from .attention import (
    AttentionConfig,
    AttentionStats,
    FidelityReport,
    attend,
    attend_raw,
    cosine,
    fidelity,
)
from .cache import (
    CacheState,
    MemoryReport,
    WindowPolicy,
    aggregate_reports,
    append_token,
    memory_report,
    prefill,
    view_block,
)
from .errors import (
    DivergedError,
    FormatError,
    InvalidCodeError,
    InvalidInputError,
    InvalidStateError,
    VQKVError,
)
from .quantizer import (
    CacheKind,
    Codebook,
    CodebookStack,
    CodeMatrix,
    decode,
    encode,
    nearest_entry,
    quantize,
    quantize_batch,
    reconstruct,
    reconstruct_block,
)
from .ratio import RatioConfig, ratio
from .synthetic import SyntheticKind, SyntheticSpec, gen_dataset, generate
from .trainer import TrainConfig, TrainReport, VectorDataset, init_stack, loss, train

__version__ = "0.1.0"
