"""Multi-turn rollout engine: reason, act, observe, update.

A rollout alternates model generations with tool dispatch under a fixed
action budget. Each accepted turn is one of the three actions:

* ``<text_search>`` runs dense section retrieval with the turn's query;
* ``<image_search>`` runs image retrieval with the *original* input image
  ref (the payload is a fixed placeholder, never a path to follow);
* ``<answer>`` terminates the rollout.

Tool output is injected back as a user-role message containing exactly the
rendered evidence block. A turn that violates the protocol is answered with
one corrective reprompt; a second consecutive violation terminates the
rollout as a protocol failure. Violating generations are never stored as
turns; they live in ``Trajectory.protocol_events``.

Rollouts are deterministic: same config, backend, and tools give
byte-identical serialized trajectories, independent of worker count.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError
from .gateway import ChatMessage, EmptyGenerationError, GenerationParams
from .kb import Corpus
from .prompts import load_prompt
from .protocol import (
    ActionKind,
    EvidenceBlock,
    EvidenceItem,
    ProtocolViolation,
    TurnRecord,
    ViolationCode,
    extract_final_answer,
    parse_turn,
    render_evidence,
    render_tool_error,
    validate_in_context,
)
from .retrieval import image_search, text_search

__all__ = [
    "RolloutConfig",
    "AgentState",
    "StepKind",
    "StepOutcome",
    "ToolBinding",
    "TextRetriever",
    "ImageRetriever",
    "Trajectory",
    "TrajectoryError",
    "TERMINATED_ANSWER",
    "TERMINATED_BUDGET",
    "TERMINATED_PROTOCOL",
    "init_state",
    "step",
    "rollout",
    "batch_rollout",
    "write_trajectory_file",
    "read_trajectory_file",
    "trajectory_to_dict",
    "trajectory_from_dict",
]

logger = logging.getLogger(__name__)

TERMINATED_ANSWER = "answer"
TERMINATED_BUDGET = "budget_exhausted"
TERMINATED_PROTOCOL = "protocol_failure"


class TrajectoryError(DataError):
    """Trajectory file failed validation."""


def default_system_prompt() -> str:
    return load_prompt("agent_system")


@dataclass
class RolloutConfig:
    """Knobs for one rollout.

    Args:
        budget: max number of accepted action turns.
        k_text: top-k for text retrieval.
        k_image: top-k (distinct articles) for image retrieval.
        strict_protocol: validate turns in strict mode (contextual caption
            rules, unknown tags fatal); lenient warns on unknown tags.
        system_prompt: instruction text; defaults to the packaged template.
        allow_caption_before_answer: permit a caption on an answer turn in
            strict mode.
        image_evidence_full_article: render the whole matched article as
            image evidence instead of title + lead section.
    """

    budget: int = 4
    k_text: int = 3
    k_image: int = 1
    strict_protocol: bool = True
    system_prompt: str = field(default_factory=default_system_prompt)
    temperature: float = 0.0
    max_new_tokens: int = 1024
    allow_caption_before_answer: bool = False
    image_evidence_full_article: bool = False

    def generation_params(self) -> GenerationParams:
        return GenerationParams(temperature=self.temperature, max_new_tokens=self.max_new_tokens)

    def snapshot(self) -> dict:
        """Scalar config fields plus a digest of the system prompt."""
        return {
            "budget": self.budget,
            "k_text": self.k_text,
            "k_image": self.k_image,
            "strict_protocol": self.strict_protocol,
            "temperature": self.temperature,
            "max_new_tokens": self.max_new_tokens,
            "allow_caption_before_answer": self.allow_caption_before_answer,
            "image_evidence_full_article": self.image_evidence_full_article,
            "system_prompt_sha256": hashlib.sha256(self.system_prompt.encode("utf-8")).hexdigest(),
        }


@dataclass(frozen=True)
class AgentState:
    """Rollout state: the input pair plus everything observed so far."""

    image_ref: str
    question: str
    evidence: tuple[EvidenceBlock, ...] = ()
    transcript: tuple[TurnRecord, ...] = ()


class StepKind(Enum):
    ANSWERED = "answered"
    EVIDENCE_ADDED = "evidence_added"
    # Reserved: a parsed turn always carries an action, so a caption-only
    # outcome is unreachable today; the variant keeps the surface stable.
    CAPTION_NOTED = "caption_noted"
    PROTOCOL_ERROR = "protocol_error"


@dataclass(frozen=True)
class StepOutcome:
    kind: StepKind
    answer: str | None = None
    evidence: EvidenceBlock | None = None
    violations: tuple[ProtocolViolation, ...] = ()


class TextRetriever:
    """Text search bound to an index, a provider, and the corpus for display
    text."""

    def __init__(self, index, provider, corpus: Corpus):
        self.index = index
        self.provider = provider
        self.corpus = corpus

    def search(self, query: str, k: int) -> list[EvidenceItem]:
        hits = text_search(self.index, self.provider, query, k=k)
        items = []
        for hit in hits:
            article = self.corpus.article(hit.article_id)
            section = next(s for s in article.sections if s.section_id == hit.section_id)
            items.append(
                EvidenceItem(
                    article_id=hit.article_id,
                    section_id=hit.section_id,
                    title=article.title,
                    heading=section.heading,
                    text=section.text,
                    score=hit.score,
                )
            )
        return items


class ImageRetriever:
    """Image search returning article text: title + lead section, or the
    full article when configured."""

    def __init__(self, index, provider, corpus: Corpus, full_article: bool = False):
        self.index = index
        self.provider = provider
        self.corpus = corpus
        self.full_article = full_article

    def search(self, image_ref: str, k: int) -> list[EvidenceItem]:
        hits = image_search(self.index, self.provider, image_ref, k=k)
        items = []
        for hit in hits:
            article = self.corpus.article(hit.article_id)
            if self.full_article:
                heading = article.sections[0].heading
                text = " ".join(f"{s.heading}: {s.text}" for s in article.sections)
            else:
                heading = article.lead_section.heading
                text = article.lead_section.text
            items.append(
                EvidenceItem(
                    article_id=hit.article_id,
                    section_id=None,
                    title=article.title,
                    heading=heading,
                    text=text,
                    score=hit.score,
                )
            )
        return items


@dataclass(frozen=True)
class ToolBinding:
    text_retriever: TextRetriever
    image_retriever: ImageRetriever


def init_state(image_ref: str, question: str, config: RolloutConfig) -> AgentState:
    if not question or not question.strip():
        raise ValueError("question must be non-empty")
    return AgentState(image_ref=image_ref, question=question)


def _searched(retriever, query: str, k: int, turn_index: int) -> EvidenceBlock:
    """Run a tool with one retry; failures surface as sentinel evidence so
    the model can react instead of the rollout dying."""
    last_error: Exception | None = None
    for _ in range(2):
        try:
            return render_evidence(retriever.search(query, k), turn_index)
        except Exception as exc:  # tool errors must not kill the rollout
            last_error = exc
    logger.warning("tool failed twice at turn %d: %s", turn_index, last_error)
    return render_tool_error(str(last_error), turn_index)


def step(
    state: AgentState,
    turn: TurnRecord,
    tools: ToolBinding,
    config: RolloutConfig,
) -> tuple[AgentState, StepOutcome]:
    """Apply one parsed, validated turn to the state.

    The transcript always gains the turn (captions ride along with it);
    search actions also append an evidence block. Answer terminates without
    touching anything else.
    """
    next_state = replace(state, transcript=state.transcript + (turn,))
    if turn.action is ActionKind.ANSWER:
        return next_state, StepOutcome(kind=StepKind.ANSWERED, answer=turn.action_payload)

    turn_index = len(state.evidence) + 1
    if turn.action is ActionKind.TEXT_SEARCH:
        block = _searched(tools.text_retriever, turn.action_payload, config.k_text, turn_index)
    else:
        # Always the original input image; the payload is just a placeholder.
        block = _searched(tools.image_retriever, state.image_ref, config.k_image, turn_index)
    next_state = replace(next_state, evidence=next_state.evidence + (block,))
    return next_state, StepOutcome(kind=StepKind.EVIDENCE_ADDED, evidence=block)


@dataclass
class Trajectory:
    task_id: str
    image_ref: str
    question: str
    turns: list[TurnRecord]
    observations: list[EvidenceBlock]
    final_answer: str | None
    terminated_by: str
    config: dict
    protocol_events: list[dict] = field(default_factory=list)

    @property
    def action_kinds(self) -> tuple[ActionKind, ...]:
        return tuple(t.action for t in self.turns)

    @property
    def n_tool_turns(self) -> int:
        return sum(1 for t in self.turns if t.action is not ActionKind.ANSWER)


def _reflection_message(violations: Sequence[ProtocolViolation]) -> str:
    lines = ["Your last turn violated the output format:"]
    lines.extend(f"- {v.code.value}: {v.message}" for v in violations)
    lines.append("Reply again, following the format rules exactly.")
    return "\n".join(lines)


def _effective_violations(
    record: TurnRecord | None,
    parse_violations: list[ProtocolViolation],
    transcript: Sequence[TurnRecord],
    config: RolloutConfig,
) -> list[ProtocolViolation]:
    mode = "strict" if config.strict_protocol else "lenient"
    if record is None:
        if mode == "lenient":
            kept = [v for v in parse_violations if v.code is not ViolationCode.UNKNOWN_TAG]
            return kept
        return parse_violations
    found = validate_in_context(
        record,
        transcript,
        mode=mode,
        allow_caption_before_answer=config.allow_caption_before_answer,
    )
    if mode == "lenient":
        dropped = [v for v in parse_violations if v.code is ViolationCode.UNKNOWN_TAG]
        for v in dropped:
            logger.warning("ignoring unknown tag in lenient mode: %s", v.message)
    return found


def rollout(
    image_ref: str,
    question: str,
    backend,
    tools: ToolBinding,
    config: RolloutConfig,
    task_id: str = "task",
) -> Trajectory:
    """Run the full agent loop for one (image, question) pair."""
    state = init_state(image_ref, question, config)
    params = config.generation_params()
    messages: list[ChatMessage] = [
        ChatMessage(role="system", content=config.system_prompt),
        ChatMessage(role="user", content=question, images=(image_ref,) if image_ref else ()),
    ]
    protocol_events: list[dict] = []
    actions_taken = 0
    generation_index = 0
    violation_streak = 0
    final_answer: str | None = None
    terminated_by: str | None = None

    while actions_taken < config.budget:
        raw: str | None = None
        for _ in range(2):  # one retry on an empty generation
            try:
                raw = backend.complete(messages, params, turn_index=generation_index)
                break
            except EmptyGenerationError as exc:
                logger.warning("empty generation at index %d: %s", generation_index, exc)
        generation_index += 1
        if raw is None:
            terminated_by = TERMINATED_PROTOCOL
            break

        record, parse_violations = parse_turn(raw)
        violations = _effective_violations(record, parse_violations, state.transcript, config)
        if record is None or violations:
            protocol_events.append(
                {
                    "generation_index": generation_index - 1,
                    "raw": raw,
                    "violations": [
                        {"code": v.code.value, "span": list(v.span), "message": v.message}
                        for v in violations
                    ],
                }
            )
            if violation_streak >= 1:
                terminated_by = TERMINATED_PROTOCOL
                break
            violation_streak += 1
            messages.append(ChatMessage(role="assistant", content=raw))
            messages.append(ChatMessage(role="user", content=_reflection_message(violations)))
            continue

        violation_streak = 0
        state, outcome = step(state, record, tools, config)
        messages.append(ChatMessage(role="assistant", content=raw))
        actions_taken += 1
        if outcome.kind is StepKind.ANSWERED:
            final_answer = outcome.answer
            terminated_by = TERMINATED_ANSWER
            break
        if outcome.kind is StepKind.EVIDENCE_ADDED:
            assert outcome.evidence is not None
            messages.append(ChatMessage(role="user", content=outcome.evidence.rendered))

    if terminated_by is None:
        terminated_by = TERMINATED_BUDGET
    if terminated_by != TERMINATED_ANSWER:
        final_answer = extract_final_answer(state.transcript)

    return Trajectory(
        task_id=task_id,
        image_ref=image_ref,
        question=question,
        turns=list(state.transcript),
        observations=list(state.evidence),
        final_answer=final_answer,
        terminated_by=terminated_by,
        config=config.snapshot(),
        protocol_events=protocol_events,
    )


def batch_rollout(
    samples: Sequence,
    backend,
    tools: ToolBinding,
    config: RolloutConfig,
    workers: int = 1,
) -> list[Trajectory]:
    """Roll out many tasks; output order follows input order regardless of
    worker count. ``samples`` need `.sample_id`, `.image_ref`, `.question`."""

    def one(sample) -> Trajectory:
        return rollout(
            sample.image_ref,
            sample.question,
            backend,
            tools,
            config,
            task_id=sample.sample_id,
        )

    if workers <= 1:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, samples))


# --- wire format ---------------------------------------------------------


def _turn_to_dict(turn: TurnRecord) -> dict:
    return {
        "raw": turn.raw,
        "think": turn.think,
        "caption": turn.caption,
        "action": turn.action.value,
        "payload": turn.action_payload,
    }


def _turn_from_dict(obj: dict) -> TurnRecord:
    return TurnRecord(
        think=obj["think"],
        action=ActionKind(obj["action"]),
        action_payload=obj["payload"],
        raw=obj["raw"],
        caption=obj.get("caption"),
    )


def _block_to_dict(block: EvidenceBlock) -> dict:
    return {
        "turn_index": block.turn_index,
        "rendered": block.rendered,
        "items": [
            {
                "article_id": it.article_id,
                "section_id": it.section_id,
                "title": it.title,
                "heading": it.heading,
                "text": it.text,
                "score": it.score,
            }
            for it in block.items
        ],
    }


def _block_from_dict(obj: dict) -> EvidenceBlock:
    return EvidenceBlock(
        items=tuple(
            EvidenceItem(
                article_id=it["article_id"],
                section_id=it.get("section_id"),
                title=it["title"],
                heading=it["heading"],
                text=it["text"],
                score=it["score"],
            )
            for it in obj["items"]
        ),
        turn_index=obj["turn_index"],
        rendered=obj["rendered"],
    )


def trajectory_to_dict(traj: Trajectory) -> dict:
    return {
        "task_id": traj.task_id,
        "image_ref": traj.image_ref,
        "question": traj.question,
        "turns": [_turn_to_dict(t) for t in traj.turns],
        "observations": [_block_to_dict(b) for b in traj.observations],
        "final_answer": traj.final_answer,
        "terminated_by": traj.terminated_by,
        "config": traj.config,
        "protocol_events": traj.protocol_events,
    }


def trajectory_from_dict(obj: dict) -> Trajectory:
    required = ("task_id", "image_ref", "question", "turns", "observations", "terminated_by")
    for key in required:
        if key not in obj:
            raise TrajectoryError(f"trajectory record missing {key!r}")
    return Trajectory(
        task_id=obj["task_id"],
        image_ref=obj["image_ref"],
        question=obj["question"],
        turns=[_turn_from_dict(t) for t in obj["turns"]],
        observations=[_block_from_dict(b) for b in obj["observations"]],
        final_answer=obj.get("final_answer"),
        terminated_by=obj["terminated_by"],
        config=obj.get("config", {}),
        protocol_events=obj.get("protocol_events", []),
    )


def write_trajectory_file(trajectories: Iterable[Trajectory], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(trajectory_to_dict(traj), sort_keys=True, ensure_ascii=False))
            fh.write("\n")


def read_trajectory_file(path: str | Path) -> list[Trajectory]:
    path = Path(path)
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TrajectoryError(f"{path}: line {line_no}: invalid JSON ({exc.msg})") from exc
            try:
                out.append(trajectory_from_dict(obj))
            except (TrajectoryError, KeyError, ValueError) as exc:
                raise TrajectoryError(f"{path}: line {line_no}: {exc}") from exc
    return out
