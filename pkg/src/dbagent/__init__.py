"""Decision-based search agent for knowledge-grounded visual QA.

The package covers the full loop: a tag protocol the model speaks
(:mod:`dbagent.protocol`), dense retrieval over an article corpus
(:mod:`dbagent.kb`, :mod:`dbagent.retrieval`), model backends
(:mod:`dbagent.gateway`), the multi-turn rollout engine
(:mod:`dbagent.runtime`), a three-stage trajectory factory
(:mod:`dbagent.factory`), SFT emission with evidence masking
(:mod:`dbagent.sft`), and the evaluation harness
(:mod:`dbagent.evaluation`).
"""

from .errors import BackendError, DataError
from .factory import (
    BranchOutcome,
    FactoryConfig,
    QaSample,
    judge_answer,
    load_qa_dataset,
    normalize_answer,
    run_factory,
    sample_balanced,
)
from .gateway import (
    ChatMessage,
    GenerationParams,
    HttpChatBackend,
    ScriptedBackend,
    ScriptedRule,
    load_script,
)
from .kb import Corpus, KbArticle, load_corpus, subsample_corpus
from .protocol import (
    ActionKind,
    ProtocolViolation,
    TurnRecord,
    make_turn,
    parse_turn,
    render_evidence,
    serialize_turn,
    validate_in_context,
)
from .retrieval import (
    DeterministicEmbedder,
    RemoteEmbedder,
    build_image_index,
    build_text_index,
    image_search,
    load_index,
    save_index,
    text_search,
)
from .runtime import (
    ImageRetriever,
    RolloutConfig,
    TextRetriever,
    ToolBinding,
    Trajectory,
    batch_rollout,
    read_trajectory_file,
    rollout,
    write_trajectory_file,
)
from .sft import LinearizedSample, emit_dataset, linearize, read_sft_file, scan_sft_file
from .evaluation import (
    EvalRecord,
    Report,
    aggregate,
    build_eval_records,
    run_kb_scale,
    run_topk_grid,
    score_answer,
)

__version__ = "0.1.0"

__all__ = [
    "ActionKind",
    "BackendError",
    "BranchOutcome",
    "ChatMessage",
    "Corpus",
    "DataError",
    "DeterministicEmbedder",
    "EvalRecord",
    "FactoryConfig",
    "GenerationParams",
    "HttpChatBackend",
    "ImageRetriever",
    "KbArticle",
    "LinearizedSample",
    "ProtocolViolation",
    "QaSample",
    "RemoteEmbedder",
    "Report",
    "RolloutConfig",
    "ScriptedBackend",
    "ScriptedRule",
    "TextRetriever",
    "ToolBinding",
    "Trajectory",
    "TurnRecord",
    "aggregate",
    "batch_rollout",
    "build_eval_records",
    "build_image_index",
    "build_text_index",
    "emit_dataset",
    "image_search",
    "judge_answer",
    "linearize",
    "load_corpus",
    "load_index",
    "load_qa_dataset",
    "load_script",
    "make_turn",
    "normalize_answer",
    "parse_turn",
    "read_sft_file",
    "read_trajectory_file",
    "render_evidence",
    "rollout",
    "run_factory",
    "run_kb_scale",
    "run_topk_grid",
    "sample_balanced",
    "save_index",
    "scan_sft_file",
    "score_answer",
    "serialize_turn",
    "subsample_corpus",
    "text_search",
    "validate_in_context",
    "write_trajectory_file",
]
