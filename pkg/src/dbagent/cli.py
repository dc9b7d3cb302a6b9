"""Command-line entry points.

Subcommands: ``index build``, ``agent run``, ``agent batch``,
``factory build``, ``dataset emit``, ``eval report``, ``eval topk-grid``,
``eval kb-scale``, ``validate``.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 backend
unavailable.

Settings resolve with precedence flags > environment > config file >
defaults. Environment variables: DBAGENT_CHAT_URL, DBAGENT_EMBED_URL,
DBAGENT_API_KEY. The config file is JSON with the same keys the flags use.
``--print-config`` dumps the effective merged settings (API key masked);
the key itself is never logged or echoed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .errors import BackendError, DataError
from .evaluation import (
    aggregate,
    build_eval_records,
    render_grid_text,
    render_report_csv,
    render_report_text,
    report_to_json,
    run_kb_scale,
    run_topk_grid,
)
from .factory import (
    FactoryConfig,
    load_qa_dataset,
    read_outcome_file,
    run_factory,
    sample_balanced,
    write_outcome_file,
)
from .gateway import HttpChatBackend, load_script
from .kb import load_corpus
from .prompts import load_prompt
from .retrieval import (
    DeterministicEmbedder,
    RemoteEmbedder,
    build_image_index,
    build_text_index,
    load_index,
    save_index,
)
from .runtime import (
    ImageRetriever,
    RolloutConfig,
    TextRetriever,
    ToolBinding,
    batch_rollout,
    read_trajectory_file,
    rollout,
    write_trajectory_file,
)
from .sft import emit_dataset, linearize, read_sft_file, scan_sft_file

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3

ENV_CHAT_URL = "DBAGENT_CHAT_URL"
ENV_EMBED_URL = "DBAGENT_EMBED_URL"
ENV_API_KEY = "DBAGENT_API_KEY"


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is 1."""

    def error(self, message: str):  # noqa: D102 - argparse override
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


@dataclass
class Settings:
    chat_url: str | None = None
    embed_url: str | None = None
    api_key: str | None = None
    script: str | None = None
    dimension: int = 64
    seed: int = 0
    budget: int = 4
    k_text: int = 3
    k_image: int = 1
    strict: bool = True
    workers: int = 1

    def masked(self) -> dict:
        out = self.__dict__.copy()
        if out.get("api_key"):
            out["api_key"] = "***"
        return out


_INT_KEYS = ("dimension", "seed", "budget", "k_text", "k_image", "workers")


def resolve_settings(args: argparse.Namespace) -> Settings:
    """defaults < config file < environment < explicit flags."""
    values = Settings().__dict__.copy()

    config_path = getattr(args, "config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DataError(f"config file {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise DataError(f"config file {config_path}: top level must be an object")
        unknown = set(loaded) - set(values)
        if unknown:
            raise DataError(f"config file {config_path}: unknown keys {sorted(unknown)}")
        values.update(loaded)

    if os.environ.get(ENV_CHAT_URL):
        values["chat_url"] = os.environ[ENV_CHAT_URL]
    if os.environ.get(ENV_EMBED_URL):
        values["embed_url"] = os.environ[ENV_EMBED_URL]
    if os.environ.get(ENV_API_KEY):
        values["api_key"] = os.environ[ENV_API_KEY]

    for key in values:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag

    for key in _INT_KEYS:
        values[key] = int(values[key])
    settings = Settings(**values)
    if getattr(args, "print_config", False):
        print(json.dumps(settings.masked(), sort_keys=True, indent=2))
    return settings


def derive_seed(master: int, stream: str) -> int:
    """Named substream of one master seed (stable across platforms)."""
    digest = hashlib.sha256(f"{master}:{stream}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def _rollout_config(settings: Settings) -> RolloutConfig:
    return RolloutConfig(
        budget=settings.budget,
        k_text=settings.k_text,
        k_image=settings.k_image,
        strict_protocol=settings.strict,
    )


def _embedders(settings: Settings) -> tuple[object, object]:
    if settings.embed_url:
        return (
            RemoteEmbedder(settings.embed_url, "text", settings.dimension, api_key=settings.api_key),
            RemoteEmbedder(settings.embed_url, "image", settings.dimension, api_key=settings.api_key),
        )
    return (
        DeterministicEmbedder(dimension=settings.dimension, seed=settings.seed, modality="text"),
        DeterministicEmbedder(dimension=settings.dimension, seed=settings.seed, modality="image"),
    )


def _backend(settings: Settings, parser: _Parser):
    if settings.script:
        return load_script(settings.script)
    if settings.chat_url:
        return HttpChatBackend(settings.chat_url, api_key=settings.api_key)
    parser.error("no backend: pass --script or --chat-url (or set " + ENV_CHAT_URL + ")")


def _tools(corpus, settings: Settings, index_dir: str | None) -> ToolBinding:
    text_provider, image_provider = _embedders(settings)
    if index_dir:
        text_index = load_index(Path(index_dir) / "text_index.json", expect_modality="text")
        image_index = load_index(Path(index_dir) / "image_index.json", expect_modality="image")
    else:
        text_index = build_text_index(corpus, text_provider)
        image_index = build_image_index(corpus, image_provider)
    return ToolBinding(
        text_retriever=TextRetriever(text_index, text_provider, corpus),
        image_retriever=ImageRetriever(image_index, image_provider, corpus),
    )


# --- subcommands ---------------------------------------------------------


def cmd_index_build(args, parser: _Parser) -> int:
    settings = resolve_settings(args)
    corpus = load_corpus(args.corpus)
    text_provider, image_provider = _embedders(settings)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text_index = build_text_index(corpus, text_provider)
    save_index(text_index, out_dir / "text_index.json")
    image_index = build_image_index(corpus, image_provider)
    save_index(image_index, out_dir / "image_index.json")
    print(
        f"indexed {len(text_index)} sections and {len(image_index)} images "
        f"from {corpus.n_articles} articles into {out_dir}"
    )
    return EXIT_OK


def cmd_agent_run(args, parser: _Parser) -> int:
    settings = resolve_settings(args)
    corpus = load_corpus(args.corpus)
    tools = _tools(corpus, settings, args.index_dir)
    backend = _backend(settings, parser)
    traj = rollout(
        args.image or "",
        args.question,
        backend,
        tools,
        _rollout_config(settings),
        task_id=args.task_id,
    )
    obs = 0
    for turn in traj.turns:
        print(turn.raw)
        if turn.action.value != "answer" and obs < len(traj.observations):
            print(traj.observations[obs].rendered)
            obs += 1
    print(f"terminated_by: {traj.terminated_by}")
    print(f"final_answer: {traj.final_answer if traj.final_answer is not None else '(none)'}")
    return EXIT_OK


def cmd_agent_batch(args, parser: _Parser) -> int:
    settings = resolve_settings(args)
    corpus = load_corpus(args.corpus)
    samples = load_qa_dataset(args.dataset)
    tools = _tools(corpus, settings, args.index_dir)
    backend = _backend(settings, parser)
    trajectories = batch_rollout(
        samples, backend, tools, _rollout_config(settings), workers=settings.workers
    )
    write_trajectory_file(trajectories, args.out)
    print(f"wrote {len(trajectories)} trajectories to {args.out}")
    return EXIT_OK


def cmd_factory_build(args, parser: _Parser) -> int:
    settings = resolve_settings(args)
    corpus = load_corpus(args.corpus)
    samples = load_qa_dataset(args.dataset)
    tools = _tools(corpus, settings, args.index_dir)
    backend = _backend(settings, parser)
    cfg = FactoryConfig(
        judge_mode=args.judge_mode,
        keep_failed=args.keep_failed,
        rollout_config=_rollout_config(settings),
    )
    outcomes = run_factory(samples, backend, tools, cfg, workers=settings.workers)
    write_outcome_file(outcomes, args.out)
    counts: dict[str, int] = {}
    for outcome in outcomes:
        counts[outcome.trajectory_type] = counts.get(outcome.trajectory_type, 0) + 1
    print(f"wrote {len(outcomes)} outcomes to {args.out}")
    for label in sorted(counts):
        print(f"  {label}: {counts[label]}")
    return EXIT_OK


def cmd_dataset_emit(args, parser: _Parser) -> int:
    settings = resolve_settings(args)
    outcomes = read_outcome_file(args.outcomes)
    usable = [o for o in outcomes if o.assembled is not None]
    if args.n_per_tier:
        usable = sample_balanced(usable, args.n_per_tier, derive_seed(settings.seed, "balance"))
    system_prompt = (
        Path(args.system_prompt_file).read_text(encoding="utf-8")
        if args.system_prompt_file
        else load_prompt("agent_system")
    )
    samples = [linearize(o.assembled, system_prompt) for o in usable]
    manifest = emit_dataset(
        samples, args.out, max_chars=args.max_chars, source_files=[args.outcomes]
    )
    print(
        f"emitted {manifest.total} samples to {args.out} "
        f"(dropped over cap: {manifest.dropped_over_cap})"
    )
    return EXIT_OK


def cmd_eval_report(args, parser: _Parser) -> int:
    settings = resolve_settings(args)
    trajectories = read_trajectory_file(args.trajectories)
    samples = load_qa_dataset(args.dataset)
    judge_backend = None
    if args.metric == "judge":
        judge_backend = _backend(settings, parser)
    records, stats = build_eval_records(
        trajectories, samples, metric=args.metric, raw_exact=args.raw_exact,
        judge_backend=judge_backend,
    )
    if not records:
        raise DataError("no scorable records")
    report = aggregate(records, config={"metric": args.metric}, stats=stats)
    text = render_report_text(report)
    print(text, end="")
    if args.out_prefix:
        Path(args.out_prefix + ".txt").write_text(text, encoding="utf-8")
        Path(args.out_prefix + ".csv").write_text(render_report_csv(report), encoding="utf-8")
        Path(args.out_prefix + ".json").write_text(report_to_json(report), encoding="utf-8")
    return EXIT_OK


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise DataError(f"bad {what} list {text!r}: {exc}") from exc


def cmd_eval_topk_grid(args, parser: _Parser) -> int:
    settings = resolve_settings(args)
    corpus = load_corpus(args.corpus)
    samples = load_qa_dataset(args.dataset)
    tools = _tools(corpus, settings, args.index_dir)
    backend = _backend(settings, parser)
    grid = run_topk_grid(
        samples,
        backend,
        tools,
        _rollout_config(settings),
        text_ks=_parse_int_list(args.text_ks, "text_k"),
        image_ks=_parse_int_list(args.image_ks, "image_k"),
        workers=settings.workers,
    )
    text = render_grid_text(grid)
    print(text, end="")
    if args.out_prefix:
        Path(args.out_prefix + ".txt").write_text(text, encoding="utf-8")
        doc = {}
        for (kt, ki), cell in grid.items():
            key = f"text{kt}_image{ki}"
            doc[key] = json.loads(report_to_json(cell)) if not isinstance(cell, dict) else cell
        Path(args.out_prefix + ".json").write_text(
            json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    return EXIT_OK


def cmd_eval_kb_scale(args, parser: _Parser) -> int:
    settings = resolve_settings(args)
    corpus = load_corpus(args.corpus)
    samples = load_qa_dataset(args.dataset)
    text_provider, image_provider = _embedders(settings)
    backend = _backend(settings, parser)
    series = run_kb_scale(
        samples,
        corpus,
        text_provider,
        image_provider,
        backend,
        _rollout_config(settings),
        sizes=_parse_int_list(args.sizes, "sizes"),
        seed=derive_seed(settings.seed, "kb-scale"),
        workers=settings.workers,
    )
    lines = ["size     accuracy%  recall%"]
    doc = []
    for entry in series:
        report = entry["report"]
        recalls = [
            v["retrieval_recall"] for v in report.per_type.values() if v["retrieval_recall"] is not None
        ]
        recall = sum(recalls) / len(recalls) if recalls else None
        lines.append(
            f"{entry['size']:<9}{report.overall_accuracy:>8.1f}"
            + (f"{recall:>9.1f}" if recall is not None else "        -")
        )
        doc.append({"size": entry["size"], "report": json.loads(report_to_json(report))})
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out_prefix:
        Path(args.out_prefix + ".txt").write_text(text, encoding="utf-8")
        Path(args.out_prefix + ".json").write_text(
            json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    return EXIT_OK


# --- validate ------------------------------------------------------------


def _detect_kind(path: Path) -> str:
    head = ""
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                head = line
                break
    if not head:
        raise DataError(f"{path}: empty file")
    try:
        obj = json.loads(head)
    except json.JSONDecodeError:
        # maybe a single pretty-printed JSON document (index/manifest)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not JSON or JSONL ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise DataError(f"{path}: records must be JSON objects")
    if "format_version" in obj and "entries" in obj:
        return "index"
    if "emitter_version" in obj and "dataset_sha256" in obj:
        return "manifest"
    if "article_id" in obj and "sections" in obj:
        return "corpus"
    if "segments" in obj and "meta" in obj:
        return "sft"
    if "match" in obj and "output" in obj:
        return "script"
    if "stages" in obj and "trajectory_type" in obj:
        return "outcomes"
    if "turns" in obj and "terminated_by" in obj:
        return "trajectories"
    if "sample_id" in obj and "question" in obj:
        return "dataset"
    raise DataError(f"{path}: unrecognized record shape")


def _validate_trajectories(path: Path) -> str:
    from .protocol import parse_turn, validate_in_context

    trajectories = read_trajectory_file(path)
    for traj in trajectories:
        mode = "strict" if traj.config.get("strict_protocol", True) else "lenient"
        allow = traj.config.get("allow_caption_before_answer", False)
        for i, turn in enumerate(traj.turns):
            record, _ = parse_turn(turn.raw)
            if record is None:
                raise DataError(f"{path}: {traj.task_id}: turn {i + 1} raw does not parse")
            problems = validate_in_context(
                record, traj.turns[:i], mode=mode, allow_caption_before_answer=allow
            )
            if problems:
                raise DataError(
                    f"{path}: {traj.task_id}: turn {i + 1}: "
                    + "; ".join(v.message for v in problems)
                )
    return f"{len(trajectories)} trajectories"


def cmd_validate(args, parser: _Parser) -> int:
    path = Path(args.path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    kind = args.kind if args.kind != "auto" else _detect_kind(path)
    if kind == "corpus":
        corpus = load_corpus(path)
        detail = f"{corpus.n_articles} articles, {corpus.n_sections} sections, {corpus.n_images} images"
    elif kind == "dataset":
        detail = f"{len(load_qa_dataset(path))} samples"
    elif kind == "trajectories":
        detail = _validate_trajectories(path)
    elif kind == "outcomes":
        detail = f"{len(read_outcome_file(path))} outcomes"
    elif kind == "sft":
        read_sft_file(path)
        report = scan_sft_file(path)
        bad = (
            report["supervised_evidence_chars"]
            + report["unsupervised_decision_tags"]
            + report["structure_errors"]
        )
        if bad:
            raise DataError(f"{path}: mask soundness violated: {report}")
        detail = f"{report['samples']} samples, masks sound"
    elif kind == "script":
        detail = f"{len(load_script(path).rules)} rules"
    elif kind == "index":
        index = load_index(path)
        detail = f"{len(index)} {index.modality} vectors, dimension {index.dimension}"
    elif kind == "manifest":
        doc = json.loads(path.read_text(encoding="utf-8"))
        for key in ("emitter_version", "total", "dataset_sha256"):
            if key not in doc:
                raise DataError(f"{path}: manifest missing {key!r}")
        detail = f"manifest for {doc['total']} samples"
    else:
        parser.error(f"unknown kind {kind!r}")
        return EXIT_USAGE
    print(f"OK ({kind}): {detail}")
    return EXIT_OK


# --- wiring --------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--print-config", action="store_true", help="dump effective settings")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dimension", type=int, default=None, help="embedding dimension")
    p.add_argument("--chat-url", dest="chat_url", default=None)
    p.add_argument("--embed-url", dest="embed_url", default=None)
    p.add_argument("--api-key", dest="api_key", default=None)
    p.add_argument("--script", default=None, help="scripted backend rules (JSONL)")
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--k-text", dest="k_text", type=int, default=None)
    p.add_argument("--k-image", dest="k_image", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="dbagent", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_index = sub.add_parser("index", help="vector index operations")
    index_sub = p_index.add_subparsers(dest="index_command", required=True)
    p_build = index_sub.add_parser("build", help="embed a corpus into text/image indexes")
    p_build.add_argument("--corpus", required=True)
    p_build.add_argument("--out-dir", required=True)
    _add_common(p_build)
    p_build.set_defaults(func=cmd_index_build)

    p_agent = sub.add_parser("agent", help="run the search agent")
    agent_sub = p_agent.add_subparsers(dest="agent_command", required=True)
    p_run = agent_sub.add_parser("run", help="single question")
    p_run.add_argument("--question", required=True)
    p_run.add_argument("--image", default=None, help="image ref for the question")
    p_run.add_argument("--corpus", required=True)
    p_run.add_argument("--index-dir", default=None)
    p_run.add_argument("--task-id", default="task")
    _add_common(p_run)
    p_run.set_defaults(func=cmd_agent_run)
    p_batch = agent_sub.add_parser("batch", help="roll out a QA dataset")
    p_batch.add_argument("--dataset", required=True)
    p_batch.add_argument("--corpus", required=True)
    p_batch.add_argument("--index-dir", default=None)
    p_batch.add_argument("--out", required=True)
    _add_common(p_batch)
    p_batch.set_defaults(func=cmd_agent_batch)

    p_factory = sub.add_parser("factory", help="trajectory construction")
    factory_sub = p_factory.add_subparsers(dest="factory_command", required=True)
    p_fbuild = factory_sub.add_parser("build", help="run the three-stage factory")
    p_fbuild.add_argument("--dataset", required=True)
    p_fbuild.add_argument("--corpus", required=True)
    p_fbuild.add_argument("--index-dir", default=None)
    p_fbuild.add_argument("--out", required=True)
    p_fbuild.add_argument(
        "--judge-mode", choices=("normalized_exact", "model_judge"), default="normalized_exact"
    )
    p_fbuild.add_argument("--keep-failed", action="store_true")
    _add_common(p_fbuild)
    p_fbuild.set_defaults(func=cmd_factory_build)

    p_dataset = sub.add_parser("dataset", help="SFT dataset operations")
    dataset_sub = p_dataset.add_subparsers(dest="dataset_command", required=True)
    p_emit = dataset_sub.add_parser("emit", help="linearize outcomes into an SFT file")
    p_emit.add_argument("--outcomes", required=True)
    p_emit.add_argument("--out", required=True)
    p_emit.add_argument("--max-chars", type=int, default=49152)
    p_emit.add_argument("--n-per-tier", type=int, default=0, help="balance tiers before emitting")
    p_emit.add_argument("--system-prompt-file", default=None)
    _add_common(p_emit)
    p_emit.set_defaults(func=cmd_dataset_emit)

    p_eval = sub.add_parser("eval", help="evaluation and sweeps")
    eval_sub = p_eval.add_subparsers(dest="eval_command", required=True)
    p_report = eval_sub.add_parser("report", help="score a trajectory file")
    p_report.add_argument("--trajectories", required=True)
    p_report.add_argument("--dataset", required=True)
    p_report.add_argument("--metric", choices=("em", "judge"), default="em")
    p_report.add_argument("--raw-exact", action="store_true")
    p_report.add_argument("--out-prefix", default=None)
    _add_common(p_report)
    p_report.set_defaults(func=cmd_eval_report)
    p_grid = eval_sub.add_parser("topk-grid", help="retrieval-depth grid")
    p_grid.add_argument("--dataset", required=True)
    p_grid.add_argument("--corpus", required=True)
    p_grid.add_argument("--index-dir", default=None)
    p_grid.add_argument("--text-ks", default="1,3,5")
    p_grid.add_argument("--image-ks", default="1,2,3")
    p_grid.add_argument("--out-prefix", default=None)
    _add_common(p_grid)
    p_grid.set_defaults(func=cmd_eval_topk_grid)
    p_scale = eval_sub.add_parser("kb-scale", help="corpus-size sweep")
    p_scale.add_argument("--dataset", required=True)
    p_scale.add_argument("--corpus", required=True)
    p_scale.add_argument("--sizes", default="200,1000,5000")
    p_scale.add_argument("--out-prefix", default=None)
    _add_common(p_scale)
    p_scale.set_defaults(func=cmd_eval_kb_scale)

    p_validate = sub.add_parser("validate", help="lint any file the suite emits")
    p_validate.add_argument("path")
    p_validate.add_argument(
        "--kind",
        default="auto",
        choices=(
            "auto", "corpus", "dataset", "trajectories", "outcomes", "sft", "script", "index", "manifest",
        ),
    )
    _add_common(p_validate)
    p_validate.set_defaults(func=cmd_validate)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("DBAGENT_LOG", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
