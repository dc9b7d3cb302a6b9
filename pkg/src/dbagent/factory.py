"""Failure-aware trajectory construction.

Training trajectories are built in three stages that branch on where the
model's first attempt went wrong:

* Stage 1: answer from the model's own knowledge; a judge grades it. A
  correct answer becomes a direct-answer trajectory. A wrong answer routes
  by entity: wrong entity -> image branch (re-identify the image), right
  entity -> text branch (look the fact up).
* Stage 2: answer again with the branch's retrieval in context. Correct
  ends the branch; wrong produces a rewrite (a refined text query, plus a
  caption on the image branch).
* Stage 3: answer with the refined retrieval. Correct yields the two-tool
  trajectory; wrong discards the sample.

The stage outputs are then assembled into one agent-format trajectory
(think/caption/action turns with evidence observations) that must pass
strict protocol validation, with stage judge/choose text folded into the
think spans. Judging is either ``normalized_exact`` (closed-form string
match plus synthesized routing text, so the whole factory runs offline) or
``model_judge`` (a chat backend grades and writes the routing text).

Trajectory types: ``A``, ``I→A``, ``T→A``, ``I→T→A``, ``T→T→A``.
Difficulty comes from interaction depth: 0 tool turns easy, 1 medium,
2 or more hard (rule id ``depth-v1``).
"""

from __future__ import annotations

import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError
from .gateway import ChatMessage, GenerationParams
from .prompts import load_prompt, prompt_id
from .protocol import (
    ActionKind,
    EvidenceBlock,
    IMAGE_PAYLOAD,
    TurnRecord,
    make_turn,
    render_evidence,
    validate_in_context,
)
from .runtime import RolloutConfig, ToolBinding, Trajectory, trajectory_from_dict, trajectory_to_dict

__all__ = [
    "DatasetError",
    "JudgeParseFailure",
    "StageParseError",
    "QaSample",
    "StageRecord",
    "BranchOutcome",
    "FactoryConfig",
    "TYPE_DIRECT",
    "TYPE_IMAGE",
    "TYPE_TEXT",
    "TYPE_IMAGE_TEXT",
    "TYPE_TEXT_TEXT",
    "TYPE_DISCARDED",
    "TYPE_FAILED",
    "DIFFICULTY_RULE_VERSION",
    "normalize_answer",
    "judge_answer",
    "entity_matches",
    "load_qa_dataset",
    "run_stage1",
    "run_stage2",
    "run_stage3",
    "build_outcome",
    "run_factory",
    "assemble_agent_trajectory",
    "trajectory_type_of",
    "assign_difficulty",
    "sample_balanced",
    "write_outcome_file",
    "read_outcome_file",
]

logger = logging.getLogger(__name__)

TYPE_DIRECT = "A"
TYPE_IMAGE = "I→A"
TYPE_TEXT = "T→A"
TYPE_IMAGE_TEXT = "I→T→A"
TYPE_TEXT_TEXT = "T→T→A"
TYPE_DISCARDED = "DISCARDED"
TYPE_FAILED = "FAILED"

SFT_TYPES = (TYPE_DIRECT, TYPE_IMAGE, TYPE_TEXT, TYPE_IMAGE_TEXT, TYPE_TEXT_TEXT)

DIFFICULTY_RULE_VERSION = "depth-v1"
DIFFICULTY_TIERS = ("easy", "medium", "hard")

_CORRECT = "[correct]"
_WRONG = "[wrong]"
_TERMINAL_PUNCT = ".,;:!?"


class DatasetError(DataError):
    """QA dataset file failed validation."""


class StageParseError(Exception):
    """A stage output did not match its required tag shape."""


class JudgeParseFailure(StageParseError):
    """A model judge emitted neither [correct] nor [wrong]."""


# --- answers and judging -------------------------------------------------


def normalize_answer(text: str) -> str:
    """Lowercase, trim, collapse whitespace, strip terminal punctuation."""
    out = " ".join(text.lower().split())
    return out.rstrip(_TERMINAL_PUNCT).rstrip()


def _gold_list(gold_answers: str | Sequence[str]) -> list[str]:
    if isinstance(gold_answers, str):
        return [g for g in gold_answers.split("|") if g.strip()]
    return list(gold_answers)


def judge_answer(
    predicted: str,
    gold_answers: str | Sequence[str],
    mode: str = "normalized_exact",
    backend=None,
    question: str | None = None,
) -> bool:
    """Grade a prediction against the gold answer set.

    ``normalized_exact`` is normalized membership. ``model_judge`` asks a
    chat backend and parses a [correct]/[wrong] marker; an output with
    neither marker raises JudgeParseFailure.
    """
    golds = _gold_list(gold_answers)
    if mode == "normalized_exact":
        if not predicted or not predicted.strip():
            return False
        want = normalize_answer(predicted)
        return any(normalize_answer(g) == want for g in golds)
    if mode == "model_judge":
        if backend is None:
            raise ValueError("model_judge mode needs a backend")
        messages = [
            ChatMessage(role="system", content=load_prompt("stage3_judge")),
            ChatMessage(
                role="user",
                content="\n".join(
                    [
                        f"[question] {question or '(not provided)'}",
                        f"[answer] {predicted}",
                        f"[gold_answer] {'|'.join(golds)}",
                    ]
                ),
            ),
        ]
        output = backend.complete(messages, GenerationParams(), turn_index=0)
        return _parse_verdict(output) == "correct"
    raise ValueError(f"unknown judge mode: {mode!r}")


def entity_matches(predicted_entity: str, gold_entity: str) -> bool:
    """Case-insensitive normalized equality or containment either way."""
    a = normalize_answer(predicted_entity)
    b = normalize_answer(gold_entity)
    if not a or not b:
        return False
    return a == b or a in b or b in a


def _parse_verdict(text: str) -> str:
    pos_ok = text.find(_CORRECT)
    pos_bad = text.find(_WRONG)
    if pos_ok < 0 and pos_bad < 0:
        raise JudgeParseFailure(f"judge output has no verdict marker: {text[:120]!r}")
    if pos_bad < 0 or (0 <= pos_ok < pos_bad):
        return "correct"
    return "wrong"


def _extract_tag(text: str, name: str, required: bool = True) -> str | None:
    found = re.findall(rf"<{name}>(.*?)</{name}>", text, re.DOTALL)
    if len(found) > 1:
        raise StageParseError(f"tag <{name}> appears {len(found)} times, expected once")
    if not found:
        if required:
            raise StageParseError(f"tag <{name}> missing from stage output")
        return None
    return found[0].strip()


# --- dataset -------------------------------------------------------------


@dataclass(frozen=True)
class QaSample:
    sample_id: str
    image_ref: str
    question: str
    answers: tuple[str, ...]
    gold_entity: str | None = None
    gold_article_id: str | None = None
    split: str = "train"


def load_qa_dataset(path: str | Path) -> list[QaSample]:
    """Load JSONL QA samples; ``answers`` is "a|b|c" or a JSON list."""
    path = Path(path)
    samples: list[QaSample] = []
    seen: dict[str, int] = {}
    errors: list[str] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(f"line {line_no}: invalid JSON ({exc.msg})")
                continue
            try:
                samples.append(_parse_sample(obj, line_no))
            except DatasetError as exc:
                errors.append(str(exc))
                continue
            sid = samples[-1].sample_id
            if sid in seen:
                errors.append(
                    f"line {line_no}: duplicate sample_id {sid!r} (first seen on line {seen[sid]})"
                )
                samples.pop()
            else:
                seen[sid] = line_no
    if errors:
        raise DatasetError(f"{path}: {len(errors)} error(s)\n" + "\n".join(errors))
    return samples


def _parse_sample(obj: object, line_no: int) -> QaSample:
    if not isinstance(obj, dict):
        raise DatasetError(f"line {line_no}: sample must be a JSON object")
    for key in ("sample_id", "image_ref", "question"):
        if not isinstance(obj.get(key), str) or not obj[key].strip():
            raise DatasetError(f"line {line_no}: field {key!r} must be a non-empty string")
    raw_answers = obj.get("answers")
    if isinstance(raw_answers, str):
        answers = tuple(a for a in raw_answers.split("|") if a.strip())
    elif isinstance(raw_answers, list) and all(isinstance(a, str) for a in raw_answers):
        answers = tuple(a for a in raw_answers if a.strip())
    else:
        raise DatasetError(f"line {line_no}: 'answers' must be 'a|b|c' or a list of strings")
    if not answers:
        raise DatasetError(f"line {line_no}: 'answers' is empty")
    for key in ("gold_entity", "gold_article_id"):
        if obj.get(key) is not None and not isinstance(obj[key], str):
            raise DatasetError(f"line {line_no}: field {key!r} must be a string")
    split = obj.get("split", "train")
    if split not in ("train", "val", "test"):
        raise DatasetError(f"line {line_no}: split must be train/val/test, got {split!r}")
    return QaSample(
        sample_id=obj["sample_id"],
        image_ref=obj["image_ref"],
        question=obj["question"],
        answers=answers,
        gold_entity=obj.get("gold_entity"),
        gold_article_id=obj.get("gold_article_id"),
        split=split,
    )


# --- stage plumbing ------------------------------------------------------


@dataclass(frozen=True)
class StageRecord:
    stage: str
    prompt_id: str
    model_output: str
    parsed_fields: dict[str, str]
    verdict: str = "n/a"  # correct | wrong | n/a


@dataclass
class FactoryConfig:
    """Factory behavior knobs.

    ``judge_mode`` is "normalized_exact" or "model_judge"; model mode uses
    ``judge_backend`` when given, else the answering backend. ``keep_failed``
    labels stage-3 failures FAILED (kept for analysis) instead of DISCARDED;
    neither ever reaches SFT emission.
    """

    judge_mode: str = "normalized_exact"
    judge_backend: object | None = None
    keep_failed: bool = False
    stage_retries: int = 1
    rollout_config: RolloutConfig = field(default_factory=RolloutConfig)


class _Discard(Exception):
    def __init__(self, reason: str, failed: bool = False):
        super().__init__(reason)
        self.reason = reason
        self.failed = failed


@dataclass
class _Pipeline:
    """Accumulates stage outputs for one sample until assembly."""

    sample: QaSample
    stages: list[StageRecord] = field(default_factory=list)
    s1_think: str = ""
    s1_entity: str = ""
    s1_answer: str = ""
    s1_route: str = ""  # done | image | text
    s1_choose: str = ""
    query1: str = ""  # text-branch first query
    stage2_items: list = field(default_factory=list)
    s2_think: str = ""
    s2_answer: str = ""
    s2_route: str = ""  # done | refine
    caption: str = ""
    rewrite_think: str = ""
    query2: str = ""  # refined query
    stage3_items: list = field(default_factory=list)
    s3_think: str = ""
    s3_answer: str = ""


def _complete_with_retry(backend, messages, extract, cfg: FactoryConfig, stage: str):
    """Call the backend and parse; retry once on a malformed stage output."""
    params = GenerationParams()
    last: Exception | None = None
    for attempt in range(cfg.stage_retries + 1):
        output = backend.complete(messages, params, turn_index=attempt)
        try:
            return output, extract(output)
        except StageParseError as exc:
            last = exc
            logger.warning("%s parse failed (attempt %d): %s", stage, attempt + 1, exc)
    raise _Discard(f"{stage}: {last}")


def _judge_backend(backend, cfg: FactoryConfig):
    return cfg.judge_backend if cfg.judge_backend is not None else backend


def _verdict_for(pipe: _Pipeline, answer: str, backend, cfg: FactoryConfig) -> bool:
    if cfg.judge_mode == "normalized_exact":
        return judge_answer(answer, pipe.sample.answers)
    return judge_answer(
        answer,
        pipe.sample.answers,
        mode="model_judge",
        backend=_judge_backend(backend, cfg),
        question=pipe.sample.question,
    )


# --- stage 1 -------------------------------------------------------------


def run_stage1(sample: QaSample, backend, cfg: FactoryConfig) -> _Pipeline:
    """First-pass answer plus judge routing.

    Routes: "done" (answer correct), "image" (entity mismatch), "text"
    (entity right, fact missing; carries the first text query).
    """
    pipe = _Pipeline(sample=sample)
    messages = [
        ChatMessage(role="system", content=load_prompt("stage1_answer")),
        ChatMessage(
            role="user",
            content=f"[question] {sample.question}",
            images=(sample.image_ref,) if sample.image_ref else (),
        ),
    ]

    def extract(output: str) -> dict[str, str]:
        return {
            "think": _extract_tag(output, "think") or "",
            "entity": _extract_tag(output, "entity") or "",
            "answer": _extract_tag(output, "answer") or "",
        }

    output, fields = _complete_with_retry(backend, messages, extract, cfg, "stage1_answer")
    pipe.s1_think, pipe.s1_entity, pipe.s1_answer = (
        fields["think"],
        fields["entity"],
        fields["answer"],
    )
    pipe.stages.append(
        StageRecord(
            stage="stage1_answer",
            prompt_id=prompt_id("stage1_answer"),
            model_output=output,
            parsed_fields=fields,
        )
    )

    if cfg.judge_mode == "normalized_exact":
        _stage1_judge_exact(pipe)
    else:
        _stage1_judge_model(pipe, backend, cfg)
    return pipe


def _stage1_judge_exact(pipe: _Pipeline) -> None:
    sample = pipe.sample
    correct = judge_answer(pipe.s1_answer, sample.answers)
    if correct:
        pipe.s1_route = "done"
        verdict = "correct"
        fields: dict[str, str] = {}
    else:
        verdict = "wrong"
        # Without a gold entity there is no way to certify a mismatch, so
        # default to the text branch.
        matched = sample.gold_entity is not None and entity_matches(pipe.s1_entity, sample.gold_entity)
        if matched or sample.gold_entity is None:
            pipe.s1_route = "text"
            pipe.query1 = f"{pipe.s1_entity} {sample.question}".strip()
            pipe.s1_choose = (
                "The entity is correct but the needed fact is missing, so it must be looked up."
            )
            fields = {"text_search": pipe.query1, "choose": pipe.s1_choose}
        else:
            pipe.s1_route = "image"
            pipe.s1_choose = (
                "The identified entity does not match the image, so the image itself must be re-identified."
            )
            fields = {"image_search": IMAGE_PAYLOAD, "choose": pipe.s1_choose}
    pipe.stages.append(
        StageRecord(
            stage="stage1_judge",
            prompt_id="judge-normalized-exact-v1",
            model_output="",
            parsed_fields=fields,
            verdict=verdict,
        )
    )


def _stage1_judge_model(pipe: _Pipeline, backend, cfg: FactoryConfig) -> None:
    sample = pipe.sample
    messages = [
        ChatMessage(role="system", content=load_prompt("stage1_judge")),
        ChatMessage(
            role="user",
            content="\n".join(
                [
                    f"[question] {sample.question}",
                    f"[stage1_think] {pipe.s1_think}",
                    f"[stage1_entity] {pipe.s1_entity}",
                    f"[stage1_answer] {pipe.s1_answer}",
                    f"[gold_answer] {'|'.join(sample.answers)}",
                    f"[gold_entity] {sample.gold_entity or '(not provided)'}",
                ]
            ),
        ),
    ]

    def extract(output: str) -> dict[str, str]:
        verdict = _parse_verdict(output)
        if verdict == "correct":
            return {"verdict": verdict}
        image = _extract_tag(output, "image_search", required=False)
        query = _extract_tag(output, "text_search", required=False)
        choose = _extract_tag(output, "choose") or ""
        if (image is None) == (query is None):
            raise StageParseError("judge must emit exactly one of <image_search>/<text_search>")
        if image is not None and image != IMAGE_PAYLOAD:
            raise StageParseError(f"<image_search> payload must be '{IMAGE_PAYLOAD}'")
        out = {"verdict": verdict, "choose": choose}
        if image is not None:
            out["image_search"] = image
        else:
            out["text_search"] = query or ""
        return out

    judge = _judge_backend(backend, cfg)
    output, fields = _complete_with_retry(judge, messages, extract, cfg, "stage1_judge")
    verdict = fields.pop("verdict")
    if verdict == "correct":
        pipe.s1_route = "done"
    elif "image_search" in fields:
        pipe.s1_route = "image"
        pipe.s1_choose = fields["choose"]
    else:
        pipe.s1_route = "text"
        pipe.query1 = fields["text_search"]
        pipe.s1_choose = fields["choose"]
    pipe.stages.append(
        StageRecord(
            stage="stage1_judge",
            prompt_id=prompt_id("stage1_judge"),
            model_output=output,
            parsed_fields=fields,
            verdict=verdict,
        )
    )


# --- stage 2 -------------------------------------------------------------


def _stage1_output_repr(pipe: _Pipeline) -> str:
    action = (
        f"<image_search>{IMAGE_PAYLOAD}</image_search>"
        if pipe.s1_route == "image"
        else f"<text_search>{pipe.query1}</text_search>"
    )
    return f"<choose>{pipe.s1_choose}</choose>\n{action}"


def run_stage2(pipe: _Pipeline, tools: ToolBinding, backend, cfg: FactoryConfig) -> None:
    """Retrieval-grounded second pass on the routed branch."""
    sample = pipe.sample
    rc = cfg.rollout_config
    if pipe.s1_route == "image":
        pipe.stage2_items = tools.image_retriever.search(sample.image_ref, rc.k_image)
        template = "stage2_image_answer"
    else:
        pipe.stage2_items = tools.text_retriever.search(pipe.query1, rc.k_text)
        template = "stage2_text_answer"
    evidence = render_evidence(pipe.stage2_items, 1).rendered
    messages = [
        ChatMessage(role="system", content=load_prompt(template)),
        ChatMessage(
            role="user",
            content="\n".join(
                [
                    f"[question] {sample.question}",
                    f"[stage1_output] {_stage1_output_repr(pipe)}",
                    f"[evidence] {evidence}",
                ]
            ),
        ),
    ]

    def extract(output: str) -> dict[str, str]:
        return {
            "think": _extract_tag(output, "think") or "",
            "answer": _extract_tag(output, "answer") or "",
        }

    output, fields = _complete_with_retry(backend, messages, extract, cfg, template)
    pipe.s2_think, pipe.s2_answer = fields["think"], fields["answer"]
    pipe.stages.append(
        StageRecord(
            stage=template,
            prompt_id=prompt_id(template),
            model_output=output,
            parsed_fields=fields,
        )
    )

    if cfg.judge_mode == "normalized_exact":
        _stage2_judge_exact(pipe)
    else:
        _stage2_judge_model(pipe, backend, cfg, evidence)


def _stage2_judge_exact(pipe: _Pipeline) -> None:
    correct = judge_answer(pipe.s2_answer, pipe.sample.answers)
    stage = "stage2_image_judge" if pipe.s1_route == "image" else "stage2_text_judge"
    if correct:
        pipe.s2_route = "done"
        fields: dict[str, str] = {}
    else:
        pipe.s2_route = "refine"
        if pipe.s1_route == "image":
            anchor = pipe.stage2_items[0].title if pipe.stage2_items else pipe.s1_entity
            pipe.caption = f"The image shows {anchor}."
            pipe.rewrite_think = (
                "The retrieved article identifies the entity but does not state the asked fact, "
                "so a focused text query is needed."
            )
            pipe.query2 = f"{anchor} {pipe.sample.question}".strip()
            fields = {
                "caption": pipe.caption,
                "think": pipe.rewrite_think,
                "text_search": pipe.query2,
            }
        else:
            pipe.rewrite_think = (
                "The evidence does not contain the asked fact; the query needs to target it more directly."
            )
            pipe.query2 = f"{pipe.query1} additional details"
            fields = {"think": pipe.rewrite_think, "text_search": pipe.query2}
    pipe.stages.append(
        StageRecord(
            stage=stage,
            prompt_id="judge-normalized-exact-v1",
            model_output="",
            parsed_fields=fields,
            verdict="correct" if correct else "wrong",
        )
    )


def _stage2_judge_model(pipe: _Pipeline, backend, cfg: FactoryConfig, evidence: str) -> None:
    sample = pipe.sample
    image_branch = pipe.s1_route == "image"
    template = "stage2_image_judge" if image_branch else "stage2_text_judge"
    messages = [
        ChatMessage(role="system", content=load_prompt(template)),
        ChatMessage(
            role="user",
            content="\n".join(
                [
                    f"[question] {sample.question}",
                    f"[stage1_output] {_stage1_output_repr(pipe)}",
                    f"[evidence] {evidence}",
                    f"[stage2_answer] {pipe.s2_answer}",
                    f"[gold_answer] {'|'.join(sample.answers)}",
                ]
            ),
        ),
    ]

    def extract(output: str) -> dict[str, str]:
        verdict = _parse_verdict(output)
        if verdict == "correct":
            return {"verdict": verdict}
        out = {"verdict": verdict}
        if image_branch:
            out["caption"] = _extract_tag(output, "caption") or ""
        out["think"] = _extract_tag(output, "think") or ""
        query = _extract_tag(output, "text_search") or ""
        if not query:
            raise StageParseError("judge rewrite needs a <text_search> query")
        if not image_branch and normalize_answer(query) == normalize_answer(pipe.query1):
            raise StageParseError("rewrite query must differ from the previous query")
        out["text_search"] = query
        return out

    judge = _judge_backend(backend, cfg)
    output, fields = _complete_with_retry(judge, messages, extract, cfg, template)
    verdict = fields.pop("verdict")
    if verdict == "correct":
        pipe.s2_route = "done"
    else:
        pipe.s2_route = "refine"
        pipe.caption = fields.get("caption", "")
        pipe.rewrite_think = fields.get("think", "")
        pipe.query2 = fields["text_search"]
    pipe.stages.append(
        StageRecord(
            stage=template,
            prompt_id=prompt_id(template),
            model_output=output,
            parsed_fields=fields,
            verdict=verdict,
        )
    )


# --- stage 3 -------------------------------------------------------------


def run_stage3(pipe: _Pipeline, tools: ToolBinding, backend, cfg: FactoryConfig) -> bool:
    """Final pass on the refined query; returns the judge verdict."""
    sample = pipe.sample
    rc = cfg.rollout_config
    image_branch = pipe.s1_route == "image"
    pipe.stage3_items = tools.text_retriever.search(pipe.query2, rc.k_text)
    new_evidence = render_evidence(pipe.stage3_items, 2).rendered
    template = "stage3_image_answer" if image_branch else "stage3_text_answer"
    history = [
        f"[question] {sample.question}",
        f"[stage1_output] {_stage1_output_repr(pipe)}",
        f"[stage2_evidence] {render_evidence(pipe.stage2_items, 1).rendered}",
        f"[stage2_answer] {pipe.s2_answer}",
    ]
    if image_branch:
        history.append(f"[stage2_caption] {pipe.caption}")
    history.extend(
        [
            f"[stage2_think] {pipe.rewrite_think}",
            f"[stage3_query] {pipe.query2}",
            f"[stage3_new_evidence] {new_evidence}",
        ]
    )
    messages = [
        ChatMessage(role="system", content=load_prompt(template)),
        ChatMessage(role="user", content="\n".join(history)),
    ]

    def extract(output: str) -> dict[str, str]:
        return {
            "think": _extract_tag(output, "think") or "",
            "answer": _extract_tag(output, "answer") or "",
        }

    output, fields = _complete_with_retry(backend, messages, extract, cfg, template)
    pipe.s3_think, pipe.s3_answer = fields["think"], fields["answer"]
    pipe.stages.append(
        StageRecord(
            stage=template,
            prompt_id=prompt_id(template),
            model_output=output,
            parsed_fields=fields,
        )
    )

    correct = _verdict_for(pipe, pipe.s3_answer, backend, cfg)
    pipe.stages.append(
        StageRecord(
            stage="stage3_judge",
            prompt_id=(
                prompt_id("stage3_judge")
                if cfg.judge_mode == "model_judge"
                else "judge-normalized-exact-v1"
            ),
            model_output="",
            parsed_fields={},
            verdict="correct" if correct else "wrong",
        )
    )
    return correct


# --- assembly ------------------------------------------------------------


def _merge_think(*parts: str) -> str:
    return " ".join(p.strip() for p in parts if p and p.strip())


def _entity_sentence(entity: str) -> str:
    return f"The main entity is {entity}." if entity.strip() else ""


def assemble_agent_trajectory(pipe: _Pipeline, trajectory_type: str, cfg: FactoryConfig) -> Trajectory:
    """Fold stage outputs into one strict-valid agent trajectory.

    Entity and choose text merge into the first think; the image-branch
    caption rides on the follow-up text-search turn. Raises _Discard when
    the result does not validate or leaks a gold answer outside evidence.
    """
    sample = pipe.sample
    rc = cfg.rollout_config
    think1 = _merge_think(pipe.s1_think, _entity_sentence(pipe.s1_entity), pipe.s1_choose)
    turns: list[TurnRecord] = []
    observations: list[EvidenceBlock] = []

    if trajectory_type == TYPE_DIRECT:
        turns = [make_turn(_merge_think(pipe.s1_think, _entity_sentence(pipe.s1_entity)), ActionKind.ANSWER, pipe.s1_answer)]
    elif trajectory_type == TYPE_IMAGE:
        turns = [
            make_turn(think1, ActionKind.IMAGE_SEARCH, IMAGE_PAYLOAD),
            make_turn(pipe.s2_think, ActionKind.ANSWER, pipe.s2_answer),
        ]
        observations = [render_evidence(pipe.stage2_items, 1)]
    elif trajectory_type == TYPE_TEXT:
        turns = [
            make_turn(think1, ActionKind.TEXT_SEARCH, pipe.query1),
            make_turn(pipe.s2_think, ActionKind.ANSWER, pipe.s2_answer),
        ]
        observations = [render_evidence(pipe.stage2_items, 1)]
    elif trajectory_type == TYPE_IMAGE_TEXT:
        turns = [
            make_turn(think1, ActionKind.IMAGE_SEARCH, IMAGE_PAYLOAD),
            make_turn(pipe.rewrite_think, ActionKind.TEXT_SEARCH, pipe.query2, caption=pipe.caption),
            make_turn(pipe.s3_think, ActionKind.ANSWER, pipe.s3_answer),
        ]
        observations = [render_evidence(pipe.stage2_items, 1), render_evidence(pipe.stage3_items, 2)]
    elif trajectory_type == TYPE_TEXT_TEXT:
        turns = [
            make_turn(think1, ActionKind.TEXT_SEARCH, pipe.query1),
            make_turn(pipe.rewrite_think, ActionKind.TEXT_SEARCH, pipe.query2),
            make_turn(pipe.s3_think, ActionKind.ANSWER, pipe.s3_answer),
        ]
        observations = [render_evidence(pipe.stage2_items, 1), render_evidence(pipe.stage3_items, 2)]
    else:
        raise ValueError(f"cannot assemble trajectory type {trajectory_type!r}")

    for i, turn in enumerate(turns):
        problems = validate_in_context(
            turn,
            turns[:i],
            mode="strict",
            allow_caption_before_answer=rc.allow_caption_before_answer,
        )
        if problems:
            raise _Discard(
                f"assembled turn {i + 1} fails strict validation: "
                + "; ".join(v.message for v in problems)
            )

    _reject_gold_leak(turns, observations, sample)

    return Trajectory(
        task_id=sample.sample_id,
        image_ref=sample.image_ref,
        question=sample.question,
        turns=turns,
        observations=observations,
        final_answer=turns[-1].action_payload,
        terminated_by="answer",
        config=rc.snapshot(),
    )


def _reject_gold_leak(
    turns: Sequence[TurnRecord],
    observations: Sequence[EvidenceBlock],
    sample: QaSample,
) -> None:
    """Discard trajectories whose pre-answer think or any caption names a
    gold answer the evidence does not contain.

    Judge-written text (route rationale, rewrite think, caption) only ever
    lands in non-final turns and captions, so those are the leak channels.
    The final turn's think is the answering model's own conclusion and may
    legitimately restate the answer it is about to give.
    """
    evidence_text = normalize_answer(" ".join(b.rendered for b in observations))
    for gold in sample.answers:
        needle = normalize_answer(gold)
        if not needle or needle in evidence_text:
            continue
        for i, turn in enumerate(turns):
            haystacks = []
            if i < len(turns) - 1:
                haystacks.append(normalize_answer(turn.think))
            if turn.caption:
                haystacks.append(normalize_answer(turn.caption))
            if any(needle in h for h in haystacks):
                raise _Discard(
                    f"turn {i + 1} mentions gold answer {gold!r} absent from evidence"
                )


# --- orchestration -------------------------------------------------------


@dataclass
class BranchOutcome:
    sample_id: str
    trajectory_type: str
    stages: list[StageRecord]
    assembled: Trajectory | None = None
    difficulty: str | None = None
    discard_reason: str | None = None


def build_outcome(sample: QaSample, backend, tools: ToolBinding, cfg: FactoryConfig) -> BranchOutcome:
    """Run all stages for one sample and assemble the result."""
    if sample.split != "train":
        raise ValueError(f"factory runs on split=train only, got {sample.split!r}")
    pipe = _Pipeline(sample=sample)
    try:
        pipe = run_stage1(sample, backend, cfg)
        if pipe.s1_route == "done":
            trajectory_type = TYPE_DIRECT
        else:
            run_stage2(pipe, tools, backend, cfg)
            if pipe.s2_route == "done":
                trajectory_type = TYPE_IMAGE if pipe.s1_route == "image" else TYPE_TEXT
            else:
                correct = run_stage3(pipe, tools, backend, cfg)
                if not correct:
                    raise _Discard("stage3 answer judged wrong", failed=True)
                trajectory_type = TYPE_IMAGE_TEXT if pipe.s1_route == "image" else TYPE_TEXT_TEXT
        assembled = assemble_agent_trajectory(pipe, trajectory_type, cfg)
    except _Discard as exc:
        label = TYPE_FAILED if (exc.failed and cfg.keep_failed) else TYPE_DISCARDED
        return BranchOutcome(
            sample_id=sample.sample_id,
            trajectory_type=label,
            stages=pipe.stages,
            discard_reason=exc.reason,
        )
    return BranchOutcome(
        sample_id=sample.sample_id,
        trajectory_type=trajectory_type,
        stages=pipe.stages,
        assembled=assembled,
        difficulty=assign_difficulty(assembled),
    )


def run_factory(
    samples: Iterable[QaSample],
    backend,
    tools: ToolBinding,
    cfg: FactoryConfig,
    workers: int = 1,
) -> list[BranchOutcome]:
    """Build outcomes for every train-split sample; others are skipped.

    Samples are independent; ``workers`` bounds backend parallelism.
    Output order follows input order regardless of worker count.
    """
    train = []
    for sample in samples:
        if sample.split != "train":
            logger.warning("skipping %s: split=%s", sample.sample_id, sample.split)
            continue
        train.append(sample)
    if workers <= 1:
        return [build_outcome(s, backend, tools, cfg) for s in train]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: build_outcome(s, backend, tools, cfg), train))


# --- labeling and sampling ----------------------------------------------


def trajectory_type_of(traj: Trajectory) -> str:
    """Label a trajectory by its action shape."""
    shape = tuple(k.value for k in traj.action_kinds)
    table = {
        ("answer",): TYPE_DIRECT,
        ("image_search", "answer"): TYPE_IMAGE,
        ("text_search", "answer"): TYPE_TEXT,
        ("image_search", "text_search", "answer"): TYPE_IMAGE_TEXT,
        ("text_search", "text_search", "answer"): TYPE_TEXT_TEXT,
    }
    return table.get(shape, "other:" + "/".join(shape))


def assign_difficulty(traj: Trajectory) -> str:
    """Interaction depth: 0 tool turns easy, 1 medium, >=2 hard."""
    depth = traj.n_tool_turns
    if depth == 0:
        return "easy"
    if depth == 1:
        return "medium"
    return "hard"


def sample_balanced(
    outcomes: Sequence[BranchOutcome],
    n_per_tier: int,
    seed: int,
) -> list[BranchOutcome]:
    """Draw exactly n_per_tier outcomes per difficulty tier, seeded,
    without replacement. Raises naming the deficient tier."""
    tiers: dict[str, list[BranchOutcome]] = {t: [] for t in DIFFICULTY_TIERS}
    for outcome in outcomes:
        if outcome.assembled is None or outcome.difficulty not in tiers:
            continue
        tiers[outcome.difficulty].append(outcome)
    rng = random.Random(seed)
    chosen: list[BranchOutcome] = []
    for tier in DIFFICULTY_TIERS:
        pool = sorted(tiers[tier], key=lambda o: o.sample_id)
        if len(pool) < n_per_tier:
            raise ValueError(
                f"difficulty tier {tier!r} has {len(pool)} usable outcomes, need {n_per_tier}"
            )
        chosen.extend(sorted(rng.sample(pool, n_per_tier), key=lambda o: o.sample_id))
    return chosen


# --- wire format ---------------------------------------------------------


def _stage_to_dict(record: StageRecord) -> dict:
    return {
        "stage": record.stage,
        "prompt_id": record.prompt_id,
        "model_output": record.model_output,
        "parsed_fields": record.parsed_fields,
        "verdict": record.verdict,
    }


def outcome_to_dict(outcome: BranchOutcome) -> dict:
    return {
        "sample_id": outcome.sample_id,
        "trajectory_type": outcome.trajectory_type,
        "difficulty": outcome.difficulty,
        "discard_reason": outcome.discard_reason,
        "stages": [_stage_to_dict(s) for s in outcome.stages],
        "assembled": trajectory_to_dict(outcome.assembled) if outcome.assembled else None,
    }


def outcome_from_dict(obj: dict) -> BranchOutcome:
    for key in ("sample_id", "trajectory_type", "stages"):
        if key not in obj:
            raise DatasetError(f"outcome record missing {key!r}")
    return BranchOutcome(
        sample_id=obj["sample_id"],
        trajectory_type=obj["trajectory_type"],
        stages=[
            StageRecord(
                stage=s["stage"],
                prompt_id=s["prompt_id"],
                model_output=s["model_output"],
                parsed_fields=s["parsed_fields"],
                verdict=s.get("verdict", "n/a"),
            )
            for s in obj["stages"]
        ],
        assembled=trajectory_from_dict(obj["assembled"]) if obj.get("assembled") else None,
        difficulty=obj.get("difficulty"),
        discard_reason=obj.get("discard_reason"),
    )


def write_outcome_file(outcomes: Iterable[BranchOutcome], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for outcome in outcomes:
            fh.write(json.dumps(outcome_to_dict(outcome), sort_keys=True, ensure_ascii=False))
            fh.write("\n")


def read_outcome_file(path: str | Path) -> list[BranchOutcome]:
    path = Path(path)
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {line_no}: invalid JSON ({exc.msg})") from exc
            try:
                out.append(outcome_from_dict(obj))
            except (DatasetError, KeyError, ValueError) as exc:
                raise DatasetError(f"{path}: line {line_no}: {exc}") from exc
    return out
