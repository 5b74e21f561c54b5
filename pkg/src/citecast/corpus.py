"""Corpus parsing into an immutable global citation network, plus the
deterministic node-feature initializations derived from it."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

CORPUS_FIELDS = {"id", "title", "abstract", "year", "venue", "authors", "references"}

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")


class CorpusError(Exception):
    """Unrecoverable corpus problem: malformed line, duplicate id, unknown node."""


@dataclass(frozen=True)
class PaperRecord:
    id: str
    title: str
    abstract: str
    year: int
    venue_id: str
    author_ids: tuple[str, ...]
    references: tuple[str, ...]


@dataclass
class ParseConfig:
    """Validity rules applied while reading a corpus file.

    strict_abstract drops papers whose abstract has fewer than
    min_abstract_words whitespace-separated words; keep it off for
    synthetic corpora.
    """

    strict_abstract: bool = True
    min_abstract_words: int = 20
    require_venue: bool = True
    year_range: tuple[int, int] | None = None


@dataclass
class ParseReport:
    records_read: int = 0
    papers_kept: int = 0
    dropped_missing_venue: int = 0
    dropped_short_abstract: int = 0
    dropped_year_out_of_range: int = 0
    self_references_removed: int = 0
    dangling_references_removed: int = 0
    time_violation_edges_dropped: int = 0

    def as_text(self) -> str:
        lines = [f"{k}={v}" for k, v in vars(self).items()]
        return "\n".join(lines) + "\n"


class CitationNetwork:
    """Global citation graph; immutable once built.

    cites maps a paper to the papers it references (validated edges only);
    cited_by is the exact transpose, carrying the citing paper's year.
    """

    def __init__(self, papers: dict[str, PaperRecord],
                 cites: dict[str, tuple[str, ...]],
                 report: ParseReport):
        self.papers = papers
        self.cites = cites
        self.cited_by: dict[str, tuple[tuple[str, int], ...]] = {}
        self.yearly_citations: dict[str, dict[int, int]] = {}
        self.by_author: dict[str, tuple[str, ...]] = {}
        self.by_venue: dict[str, tuple[str, ...]] = {}
        self.by_year: dict[int, tuple[str, ...]] = {}
        self.report = report

        rev: dict[str, list[tuple[str, int]]] = {pid: [] for pid in papers}
        for citing, refs in cites.items():
            year = papers[citing].year
            for ref in refs:
                rev[ref].append((citing, year))
        for pid, entries in rev.items():
            self.cited_by[pid] = tuple(entries)
            tally: dict[int, int] = {}
            for _, y in entries:
                tally[y] = tally.get(y, 0) + 1
            self.yearly_citations[pid] = tally

        authors: dict[str, list[str]] = {}
        venues: dict[str, list[str]] = {}
        years: dict[int, list[str]] = {}
        for pid, rec in papers.items():
            for aid in rec.author_ids:
                authors.setdefault(aid, []).append(pid)
            venues.setdefault(rec.venue_id, []).append(pid)
            years.setdefault(rec.year, []).append(pid)
        self.by_author = {k: tuple(v) for k, v in authors.items()}
        self.by_venue = {k: tuple(v) for k, v in venues.items()}
        self.by_year = {k: tuple(v) for k, v in years.items()}
        self.min_year = min((r.year for r in papers.values()), default=0)
        self.max_year = max((r.year for r in papers.values()), default=0)


def _coerce_record(obj: dict, line_no: int) -> PaperRecord:
    if not isinstance(obj, dict):
        raise CorpusError(f"line {line_no}: record is not an object")
    pid = obj.get("id")
    year = obj.get("year")
    if not isinstance(pid, str) or not pid:
        raise CorpusError(f"line {line_no}: missing or empty 'id'")
    if not isinstance(year, int):
        raise CorpusError(f"line {line_no}: 'year' must be an integer")
    title = obj.get("title", "")
    abstract = obj.get("abstract", "")
    venue = obj.get("venue", "")
    authors = obj.get("authors", [])
    references = obj.get("references", [])
    if not isinstance(title, str) or not isinstance(abstract, str) or not isinstance(venue, str):
        raise CorpusError(f"line {line_no}: 'title', 'abstract', 'venue' must be strings")
    if not isinstance(authors, list) or not all(isinstance(a, str) for a in authors):
        raise CorpusError(f"line {line_no}: 'authors' must be a list of strings")
    if not isinstance(references, list) or not all(isinstance(r, str) for r in references):
        raise CorpusError(f"line {line_no}: 'references' must be a list of strings")
    return PaperRecord(pid, title, abstract, year, venue,
                       tuple(authors), tuple(references))


def parse_corpus(stream: Iterable[str], config: ParseConfig | None = None) -> CitationNetwork:
    """Read line-delimited JSON records into a validated CitationNetwork.

    Records failing validity rules are dropped and counted; reference edges
    are pruned (self references, dangling targets, citations pointing at a
    later year). Duplicate ids and malformed lines are fatal.
    """
    config = config or ParseConfig()
    report = ParseReport()
    kept: dict[str, PaperRecord] = {}

    for line_no, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        report.records_read += 1
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusError(f"line {line_no}: malformed record ({e.msg})") from e
        rec = _coerce_record(obj, line_no)
        if rec.id in kept:
            raise CorpusError(f"line {line_no}: duplicate paper id {rec.id!r}")
        if config.require_venue and not rec.venue_id:
            report.dropped_missing_venue += 1
            continue
        if config.strict_abstract and len(rec.abstract.split()) < config.min_abstract_words:
            report.dropped_short_abstract += 1
            continue
        if config.year_range is not None:
            lo, hi = config.year_range
            if not (lo <= rec.year <= hi):
                report.dropped_year_out_of_range += 1
                continue
        if rec.id in rec.references:
            n = len(rec.references)
            rec = PaperRecord(rec.id, rec.title, rec.abstract, rec.year, rec.venue_id,
                              rec.author_ids, tuple(r for r in rec.references if r != rec.id))
            report.self_references_removed += n - len(rec.references)
        kept[rec.id] = rec

    cites: dict[str, tuple[str, ...]] = {}
    for pid, rec in kept.items():
        valid: list[str] = []
        for ref in rec.references:
            target = kept.get(ref)
            if target is None:
                report.dangling_references_removed += 1
                continue
            if target.year > rec.year:
                report.time_violation_edges_dropped += 1
                continue
            valid.append(ref)
        cites[pid] = tuple(valid)

    report.papers_kept = len(kept)
    return CitationNetwork(kept, cites, report)


# ---------------------------------------------------------------------------
# node feature initialization


@dataclass(frozen=True)
class HashEmbedConfig:
    """Signed feature-hashing bag-of-words embedder settings."""

    dim: int = 32
    seed: int = 13

    def __post_init__(self):
        if self.dim < 8:
            raise ValueError(f"embedding dim must be >= 8, got {self.dim}")


def _tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def text_embed(title: str, abstract: str, config: HashEmbedConfig) -> np.ndarray:
    """Hash each token of title+abstract into a signed bucket, L2-normalize.

    Pure function of (text, config); empty text yields the zero vector.
    """
    key = (config.seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    vec = np.zeros(config.dim)
    for token in _tokenize(title + " " + abstract):
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
        h = int.from_bytes(digest, "little")
        sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
        vec[h % config.dim] += sign
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def citations_up_to(net: CitationNetwork, paper: str, year: int) -> int:
    """Citations received by `paper` from citing papers of year <= `year`."""
    entries = net.cited_by.get(paper)
    if entries is None:
        raise CorpusError(f"unknown paper id {paper!r}")
    return sum(1 for _, y in entries if y <= year)


def metadata_embedding(net: CitationNetwork, node: tuple[str, object], year: int,
                       paper_vec: Callable[[str], np.ndarray], dim: int) -> np.ndarray:
    """Average paper embeddings connected to a metadata node.

    Authors and venues pool their papers published strictly before `year`;
    time nodes pool the papers published exactly in `year`. An empty pool
    yields the zero vector.
    """
    kind, node_id = node
    if kind == "author":
        pool = net.by_author.get(str(node_id))
        if pool is None:
            raise CorpusError(f"unknown author id {node_id!r}")
        sel = [p for p in pool if net.papers[p].year < year]
    elif kind == "venue":
        pool = net.by_venue.get(str(node_id))
        if pool is None:
            raise CorpusError(f"unknown venue id {node_id!r}")
        sel = [p for p in pool if net.papers[p].year < year]
    elif kind == "time":
        sel = list(net.by_year.get(int(year), ()))
    else:
        raise CorpusError(f"metadata node kind must be author/venue/time, got {kind!r}")
    if not sel:
        return np.zeros(dim)
    acc = np.zeros(dim)
    for p in sel:
        acc += paper_vec(p)
    return acc / len(sel)


class Embedder:
    """Caching front end over text_embed / metadata_embedding.

    Author and venue pools are turned into year-sorted prefix sums so a
    (node, year) query is a subtraction, not a rescan.
    """

    def __init__(self, net: CitationNetwork, config: HashEmbedConfig,
                 random_features: bool = False, random_seed: int = 0):
        self.net = net
        self.config = config
        self.dim = config.dim
        self._random = random_features
        self._random_seed = random_seed
        self._papers: dict[str, np.ndarray] = {}
        self._prefix: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = {}
        self._years: dict[int, np.ndarray] = {}

    def paper(self, pid: str) -> np.ndarray:
        vec = self._papers.get(pid)
        if vec is None:
            rec = self.net.papers[pid]
            if self._random:
                # stand-in features: unit random vector seeded per paper id
                digest = hashlib.blake2b(pid.encode(), digest_size=8,
                                         key=self._random_seed.to_bytes(8, "little")).digest()
                rng = np.random.default_rng(int.from_bytes(digest, "little"))
                vec = rng.standard_normal(self.dim)
                vec /= np.linalg.norm(vec)
            else:
                vec = text_embed(rec.title, rec.abstract, self.config)
            self._papers[pid] = vec
        return vec

    def _pool_prefix(self, kind: str, node_id: str) -> tuple[np.ndarray, np.ndarray]:
        key = (kind, node_id)
        cached = self._prefix.get(key)
        if cached is None:
            pool = self.net.by_author[node_id] if kind == "author" else self.net.by_venue[node_id]
            ordered = sorted(pool, key=lambda p: (self.net.papers[p].year, p))
            years = np.array([self.net.papers[p].year for p in ordered], dtype=np.int64)
            mat = np.zeros((len(ordered) + 1, self.dim))
            for i, p in enumerate(ordered):
                mat[i + 1] = mat[i] + self.paper(p)
            cached = (years, mat)
            self._prefix[key] = cached
        return cached

    def metadata(self, kind: str, node_id, year: int) -> np.ndarray:
        if kind == "time":
            vec = self._years.get(int(node_id))
            if vec is None:
                vec = metadata_embedding(self.net, ("time", node_id), int(node_id),
                                         self.paper, self.dim)
                self._years[int(node_id)] = vec
            return vec
        if kind not in ("author", "venue"):
            raise CorpusError(f"metadata node kind must be author/venue/time, got {kind!r}")
        if kind == "author" and node_id not in self.net.by_author:
            raise CorpusError(f"unknown author id {node_id!r}")
        if kind == "venue" and node_id not in self.net.by_venue:
            raise CorpusError(f"unknown venue id {node_id!r}")
        years, prefix = self._pool_prefix(kind, node_id)
        k = int(np.searchsorted(years, year, side="left"))
        if k == 0:
            return np.zeros(self.dim)
        return prefix[k] / k
