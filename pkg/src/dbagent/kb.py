"""Article corpus: JSONL loading, validation, seeded subsampling."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import DataError

__all__ = [
    "CorpusError",
    "SectionChunk",
    "ImageAttachment",
    "KbArticle",
    "Corpus",
    "load_corpus",
    "parse_corpus_lines",
    "subsample_corpus",
]


class CorpusError(DataError):
    """Corpus file failed schema validation; message lists line numbers."""


@dataclass(frozen=True)
class SectionChunk:
    section_id: str
    heading: str
    text: str


@dataclass(frozen=True)
class ImageAttachment:
    image_id: str
    uri: str
    caption: str | None = None


@dataclass(frozen=True)
class KbArticle:
    article_id: str
    title: str
    sections: tuple[SectionChunk, ...]
    images: tuple[ImageAttachment, ...] = ()
    url: str | None = None

    @property
    def lead_section(self) -> SectionChunk:
        return self.sections[0]


@dataclass(frozen=True)
class Corpus:
    """Immutable article collection keyed by id.

    Equality is by value and insensitive to article order in the source file
    (dict equality ignores insertion order).
    """

    articles: dict[str, KbArticle]
    image_to_article: dict[str, str] = field(default_factory=dict)

    @property
    def n_articles(self) -> int:
        return len(self.articles)

    @property
    def n_sections(self) -> int:
        return sum(len(a.sections) for a in self.articles.values())

    @property
    def n_images(self) -> int:
        return sum(len(a.images) for a in self.articles.values())

    @property
    def stats(self) -> tuple[int, int, int]:
        return (self.n_articles, self.n_sections, self.n_images)

    def article(self, article_id: str) -> KbArticle:
        try:
            return self.articles[article_id]
        except KeyError:
            raise KeyError(f"article {article_id!r} not in corpus") from None


def _require(obj: dict, key: str, kind: type, line: int, where: str) -> object:
    value = obj.get(key)
    if not isinstance(value, kind) or (kind is str and not value.strip()):
        raise CorpusError(f"line {line}: {where} field {key!r} must be a non-empty {kind.__name__}")
    return value


def _parse_article(obj: object, line: int) -> KbArticle:
    if not isinstance(obj, dict):
        raise CorpusError(f"line {line}: article record must be a JSON object")
    article_id = _require(obj, "article_id", str, line, "article")
    title = _require(obj, "title", str, line, "article")
    url = obj.get("url")
    if url is not None and not isinstance(url, str):
        raise CorpusError(f"line {line}: article field 'url' must be a string")

    raw_sections = obj.get("sections")
    if not isinstance(raw_sections, list) or not raw_sections:
        raise CorpusError(f"line {line}: article {article_id!r} needs a non-empty 'sections' list")
    sections: list[SectionChunk] = []
    seen_sections: set[str] = set()
    for sec in raw_sections:
        if not isinstance(sec, dict):
            raise CorpusError(f"line {line}: section entries must be JSON objects")
        section_id = _require(sec, "section_id", str, line, "section")
        heading = _require(sec, "heading", str, line, "section")
        text = _require(sec, "text", str, line, "section")
        if section_id in seen_sections:
            raise CorpusError(f"line {line}: duplicate section_id {section_id!r} in article {article_id!r}")
        seen_sections.add(section_id)
        sections.append(SectionChunk(section_id=section_id, heading=heading, text=text))

    raw_images = obj.get("images", [])
    if not isinstance(raw_images, list):
        raise CorpusError(f"line {line}: article field 'images' must be a list")
    images: list[ImageAttachment] = []
    for img in raw_images:
        if not isinstance(img, dict):
            raise CorpusError(f"line {line}: image entries must be JSON objects")
        image_id = _require(img, "image_id", str, line, "image")
        uri = _require(img, "uri", str, line, "image")
        caption = img.get("caption")
        if caption is not None and not isinstance(caption, str):
            raise CorpusError(f"line {line}: image field 'caption' must be a string")
        images.append(ImageAttachment(image_id=image_id, uri=uri, caption=caption))

    return KbArticle(
        article_id=article_id,
        title=title,
        sections=tuple(sections),
        images=tuple(images),
        url=url,
    )


def parse_corpus_lines(lines: Iterable[str], source: str = "<corpus>") -> Corpus:
    """Parse JSONL article lines; collect every line error before failing."""
    articles: dict[str, KbArticle] = {}
    article_lines: dict[str, int] = {}
    image_lines: dict[str, int] = {}
    image_to_article: dict[str, str] = {}
    errors: list[str] = []

    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            errors.append(f"line {line_no}: invalid JSON ({exc.msg})")
            continue
        try:
            article = _parse_article(obj, line_no)
        except CorpusError as exc:
            errors.append(str(exc))
            continue
        if article.article_id in articles:
            errors.append(
                f"line {line_no}: duplicate article_id {article.article_id!r} "
                f"(first seen on line {article_lines[article.article_id]})"
            )
            continue
        dup_image = next((img.image_id for img in article.images if img.image_id in image_to_article), None)
        if dup_image is not None:
            errors.append(
                f"line {line_no}: duplicate image_id {dup_image!r} "
                f"(first seen on line {image_lines[dup_image]})"
            )
            continue
        articles[article.article_id] = article
        article_lines[article.article_id] = line_no
        for img in article.images:
            image_to_article[img.image_id] = article.article_id
            image_lines[img.image_id] = line_no

    if errors:
        raise CorpusError(f"{source}: {len(errors)} error(s)\n" + "\n".join(errors))
    return Corpus(articles=articles, image_to_article=image_to_article)


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        return parse_corpus_lines(fh, source=str(path))


def subsample_corpus(
    corpus: Corpus,
    n: int,
    seed: int,
    must_include: Iterable[str] = (),
) -> Corpus:
    """Deterministic n-article subsample that always keeps ``must_include``.

    ``n == corpus.n_articles`` returns the corpus unchanged regardless of
    seed. Selection outside the pinned set is a seeded draw without
    replacement over article ids in sorted order, so equal inputs give equal
    outputs on any platform.
    """
    pinned = set(must_include)
    unknown = pinned - corpus.articles.keys()
    if unknown:
        raise ValueError(f"must_include ids not in corpus: {sorted(unknown)}")
    if n < len(pinned):
        raise ValueError(f"n={n} is smaller than len(must_include)={len(pinned)}")
    if n > corpus.n_articles:
        raise ValueError(f"n={n} exceeds corpus size {corpus.n_articles}")
    if n == corpus.n_articles:
        return corpus

    pool = sorted(corpus.articles.keys() - pinned)
    rng = random.Random(seed)
    chosen = pinned | set(rng.sample(pool, n - len(pinned)))
    articles = {aid: corpus.articles[aid] for aid in sorted(chosen)}
    image_to_article = {
        image_id: aid for image_id, aid in corpus.image_to_article.items() if aid in chosen
    }
    return Corpus(articles=articles, image_to_article=image_to_article)
