"""mixroute: training-free multi-LLM routing with adaptive aggregation.

Routes each query across a pool of models by scoring it against an
embedding bank of previously answered queries, then either commits to
one model or aggregates a small set of high-scoring responses.
"""

from .bank import (
    EmbeddingBank,
    ModelProfile,
    QueryRecord,
    build_bank,
    extend_bank,
    load_bank,
    normalize_embedding,
    save_bank,
)
from .scoring import (
    MixedWeights,
    ScoreReport,
    SupportSet,
    coarse_scores,
    cost_similarity,
    filter_support,
    fine_scores,
    kth_largest_threshold,
    mixed_similarity,
    response_similarity,
    select_support,
)
from .orchestrator import (
    OrchestratorConfig,
    RoutingDecision,
    adaptive_switch,
    assemble_aggregation_prompt,
    infer,
    select_aggregator,
    select_candidates,
    truncate_aggregatees,
)
from .gateway import ChatResult, CostLedger, Gateway, ReplayBackend, RecordingGateway, price
from . import errors

__version__ = "0.1.0"
