"""Evidence retrieval from a local crawl index.

Index layout::

    corpus/manifest.json            {"pages": [{"url", "locale", "file", "fetched_at"}, ...]}
    corpus/<locale>/<slug>.json     page snapshot

A page file holds ``title``, optional ``infobox_title``, and either a
pre-parsed ``infobox`` (list of ``[key, value]`` rows) or raw ``wikitext``
from which infobox rows and body paragraphs are parsed.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import CorruptRecord, DocumentNotFound
from .values import canonical_json, format_time, parse_time

DEFAULT_CHAR_LIMIT = 8000


@dataclass(frozen=True)
class InfoboxRow:
    key: str
    raw_value: str


@dataclass(frozen=True)
class Passage:
    text: str
    start: int
    end: int


@dataclass(frozen=True)
class EvidenceDocument:
    url: str
    locale: str
    title: str
    infobox: tuple[InfoboxRow, ...]
    passages: tuple[Passage, ...]
    fetched_at: dt.datetime
    content_hash: str
    infobox_title: str = ""

    def row(self, key: str) -> InfoboxRow | None:
        for r in self.infobox:
            if r.key == key:
                return r
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "url": self.url,
            "locale": self.locale,
            "title": self.title,
            "infobox_title": self.infobox_title,
            "infobox": [[r.key, r.raw_value] for r in self.infobox],
            "passages": [p.text for p in self.passages],
            "fetched_at": format_time(self.fetched_at),
            "content_hash": self.content_hash,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EvidenceDocument:
        doc = build_document(d["url"], d["locale"], d["title"],
                             [tuple(r) for r in d.get("infobox", [])], d.get("passages", []),
                             parse_time(d["fetched_at"]), d.get("infobox_title", ""))
        if d.get("content_hash") and d["content_hash"] != doc.content_hash:
            raise CorruptRecord(f"{d['url']}: content hash mismatch")
        return doc


def normalize_url(url: str) -> str:
    url = re.sub(r"^https?://", "", url.strip())
    return url.rstrip("/")


def content_hash(url: str, locale: str, title: str, infobox_title: str,
                 rows: list[tuple[str, str]], passages: list[str]) -> str:
    payload = {"url": url, "locale": locale, "title": title, "infobox_title": infobox_title,
               "infobox": [list(r) for r in rows], "passages": list(passages)}
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


def build_document(url: str, locale: str, title: str, rows, passages, fetched_at,
                   infobox_title: str = "") -> EvidenceDocument:
    if not title:
        raise CorruptRecord(f"{url}: empty title")
    rows = [(str(k), str(v)) for k, v in rows]
    passages = [p for p in passages if p.strip()]
    spans = []
    offset = 0
    for text in passages:
        spans.append(Passage(text, offset, offset + len(text)))
        offset += len(text) + 2  # passages are joined by a blank line
    url = normalize_url(url)
    return EvidenceDocument(
        url=url,
        locale=locale,
        title=title,
        infobox=tuple(InfoboxRow(k, v) for k, v in rows),
        passages=tuple(spans),
        fetched_at=parse_time(fetched_at),
        content_hash=content_hash(url, locale, title, infobox_title, rows, passages),
        infobox_title=infobox_title,
    )


# --- minimal wikitext infobox parser ----------------------------------------

_ROW_RE = re.compile(r"^\s*\|\s*([^=|]+?)\s*=\s*(.*)$")


def _find_infobox(text: str) -> tuple[int, int] | None:
    start = text.find("{{Infobox")
    if start < 0:
        start = text.find("{{infobox")
    if start < 0:
        return None
    depth = 0
    i = start
    while i < len(text) - 1:
        pair = text[i:i + 2]
        if pair == "{{":
            depth += 1
            i += 2
            continue
        if pair == "}}":
            depth -= 1
            i += 2
            if depth == 0:
                return start, i
            continue
        i += 1
    raise CorruptRecord("unterminated infobox template")


def parse_wikitext(text: str) -> tuple[list[tuple[str, str]], list[str]]:
    """Split wikitext into infobox ``(key, value)`` rows and body paragraphs.

    Only ``| key = value`` rows are understood; a value continues onto
    following lines until the next row. Nested templates are kept verbatim.
    """
    rows: list[tuple[str, str]] = []
    span = _find_infobox(text)
    body = text
    if span is not None:
        box = text[span[0] + 2:span[1] - 2]
        body = text[:span[0]] + text[span[1]:]
        for line in box.splitlines()[1:]:
            m = _ROW_RE.match(line)
            if m:
                rows.append((m.group(1), m.group(2).strip()))
            elif rows and line.strip():
                key, value = rows[-1]
                rows[-1] = (key, f"{value}\n{line.strip()}".strip())
        rows = [(k, v) for k, v in rows if v]
    paragraphs = [" ".join(p.split()) for p in re.split(r"\n\s*\n", body)]
    return rows, [p for p in paragraphs if p]


# --- crawl index ----------------------------------------------------------------

class CrawlIndex:
    """Read-only view over a corpus directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest = self.root / "manifest.json"
        if not manifest.exists():
            raise FileNotFoundError(f"{manifest} missing")
        try:
            data = json.loads(manifest.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorruptRecord(f"manifest: {exc}") from exc
        self._entries: dict[tuple[str, str], list[dict]] = {}
        for entry in data.get("pages", []):
            key = (normalize_url(entry["url"]), entry["locale"].lower())
            self._entries.setdefault(key, []).append(entry)

    def __len__(self) -> int:
        return len(self._entries)

    def urls(self) -> list[tuple[str, str]]:
        return sorted(self._entries)

    def fetch(self, url: str, locale: str) -> EvidenceDocument:
        key = (normalize_url(url), locale.lower())
        snapshots = self._entries.get(key)
        if not snapshots:
            raise DocumentNotFound(f"{url} [{locale}]")
        entry = max(snapshots, key=lambda e: (parse_time(e["fetched_at"]), e["file"]))
        return self._load(entry)

    def _load(self, entry: dict) -> EvidenceDocument:
        path = self.root / entry["file"]
        try:
            page = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DocumentNotFound(str(path)) from None
        except json.JSONDecodeError as exc:
            raise CorruptRecord(f"{path}: {exc}") from exc
        if "wikitext" in page:
            rows, passages = parse_wikitext(page["wikitext"])
        else:
            rows = [tuple(r) for r in page.get("infobox", [])]
            passages = page.get("passages", [])
        try:
            return build_document(entry["url"], entry["locale"], page.get("title", ""), rows,
                                  passages, entry["fetched_at"], page.get("infobox_title", ""))
        except (TypeError, ValueError) as exc:
            raise CorruptRecord(f"{path}: {exc}") from exc


def fetch(task, index: CrawlIndex) -> EvidenceDocument:
    return index.fetch(task.url, task.locale)


def render_passage(doc: EvidenceDocument, char_limit: int = DEFAULT_CHAR_LIMIT) -> str:
    """Render the evidence block shown to the extractor and the grounder.

    Infobox rows are always rendered in full; body passages are appended
    whole while their total length stays within ``char_limit``.
    """
    if char_limit <= 0:
        raise ValueError("char_limit must be positive")
    lines = [f"Title: {doc.title}"]
    if doc.infobox:
        lines.append(f"Infobox properties: {doc.infobox_title or doc.title}:")
        lines.append("")
        for r in doc.infobox:
            lines.append(json.dumps({r.key: r.raw_value}, ensure_ascii=False))
    used = 0
    body = []
    for p in doc.passages:
        if used + len(p.text) > char_limit:
            break
        body.append(p.text)
        used += len(p.text)
    if body:
        lines.append("")
        lines.append("\n\n".join(body))
    return "\n".join(lines)
