"""Navigation metrics (SR, NE, SPL, OSR) and caption metrics (BLEU-4, ROUGE-L, CIDEr)."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from . import navworld as nw
from .textcodec import tokenize

SUCCESS_DISTANCE = 3.0
UNREACHABLE_DISTANCE = 1e6
REPORT_SCHEMA_VERSION = 1
BLEU_EPSILON = 0.1
ROUGE_BETA = 1.2


@dataclass(frozen=True)
class NavOutcome:
    episode_id: str
    generated_path: tuple[str, ...]
    goal_id: str
    graph: nw.NavGraph
    start_id: str | None = None
    truncated: bool = False


@dataclass
class MetricsReport:
    sr: float
    ne: float
    spl: float
    osr: float
    episodes: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "sr": self.sr,
            "ne": self.ne,
            "spl": self.spl,
            "osr": self.osr,
            "count": len(self.episodes),
            "episodes": self.episodes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


REPORT_JSON_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "sr", "ne", "spl", "osr", "count", "episodes"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "sr": {"type": "number", "minimum": 0, "maximum": 1},
        "ne": {"type": "number", "minimum": 0},
        "spl": {"type": "number", "minimum": 0, "maximum": 1},
        "osr": {"type": "number", "minimum": 0, "maximum": 1},
        "count": {"type": "integer", "minimum": 0},
        "episodes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["episode_id", "success", "ne", "spl", "oracle_success", "path_length", "unreachable"],
            },
        },
    },
}


def _geodesic(graph: nw.NavGraph, a: str, b: str) -> float | None:
    return nw.shortest_path_length(graph, a, b)


def nav_metrics(outcomes: Sequence[NavOutcome]) -> MetricsReport:
    """Aggregate navigation metrics over outcomes.

    SPL follows the usual convention ``success * L* / max(L, L*)`` with ``L`` the
    traversed length (revisits count) and ``L*`` the start-goal geodesic.  An
    unreachable goal counts as a failure with NE = ``UNREACHABLE_DISTANCE``.
    """
    rows = []
    for o in outcomes:
        path = list(o.generated_path)
        if not path:
            raise ValueError(f"{o.episode_id}: empty generated path")
        start = o.start_id or path[0]
        final_d = _geodesic(o.graph, path[-1], o.goal_id)
        unreachable = final_d is None
        ne = UNREACHABLE_DISTANCE if unreachable else final_d
        success = (not unreachable) and final_d <= SUCCESS_DISTANCE
        visited = [_geodesic(o.graph, n, o.goal_id) for n in path]
        oracle = any(d is not None and d <= SUCCESS_DISTANCE for d in visited)
        walked = nw.path_length(o.graph, path)
        best = _geodesic(o.graph, start, o.goal_id)
        if success and best is not None:
            denom = max(walked, best)
            spl = 1.0 if denom == 0 else best / denom
        else:
            spl = 0.0
        rows.append({
            "episode_id": o.episode_id,
            "success": bool(success),
            "ne": ne,
            "spl": spl,
            "oracle_success": bool(oracle),
            "path_length": walked,
            "unreachable": unreachable,
            "truncated": bool(o.truncated),
        })
    n = len(rows)
    if n == 0:
        return MetricsReport(0.0, 0.0, 0.0, 0.0, [])
    return MetricsReport(
        sr=sum(r["success"] for r in rows) / n,
        ne=sum(r["ne"] for r in rows) / n,
        spl=sum(r["spl"] for r in rows) / n,
        osr=sum(r["oracle_success"] for r in rows) / n,
        episodes=rows,
    )


# ---------------------------------------------------------------------------
# caption metrics


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(c: int, ref_lens: Sequence[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - c), r))


def corpus_bleu4(candidates: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """Corpus BLEU-4 with uniform weights, brevity penalty and add-epsilon smoothing.

    An n-gram order with zero clipped matches contributes ``epsilon / count``
    (``epsilon = 0.1``).  Orders longer than every candidate are left out and
    the remaining weights renormalised, so a short exact match still scores 100.
    Returns 0-100.
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    matches = [0] * 4
    totals = [0] * 4
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("references must be non-empty")
        c = tokenize(cand)
        rs = [tokenize(r) for r in refs]
        cand_len += len(c)
        ref_len += _closest_ref_length(len(c), [len(r) for r in rs])
        for n in range(1, 5):
            cg = _ngrams(c, n)
            best: Counter = Counter()
            for r in rs:
                best |= _ngrams(r, n)
            matches[n - 1] += sum(min(k, best[g]) for g, k in cg.items())
            totals[n - 1] += max(0, len(c) - n + 1)
    if cand_len == 0:
        return 0.0
    orders = [(m, t) for m, t in zip(matches, totals) if t > 0]
    log_p = 0.0
    for m, t in orders:
        p = m / t if m > 0 else BLEU_EPSILON / t
        log_p += math.log(p) / len(orders)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_p)


def bleu4(candidate: str, references: Sequence[str]) -> float:
    return corpus_bleu4([candidate], [references])


def _lcs(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, references: Sequence[str], beta: float = ROUGE_BETA) -> float:
    """LCS F-measure, best precision and recall over references, 0-100."""
    if not references:
        raise ValueError("references must be non-empty")
    c = tokenize(candidate)
    if not c:
        return 0.0
    precs, recs = [], []
    for r in references:
        rt = tokenize(r)
        lcs = _lcs(c, rt)
        precs.append(lcs / len(c))
        recs.append(lcs / len(rt) if rt else 0.0)
    p, r = max(precs), max(recs)
    if p == 0 or r == 0:
        return 0.0
    return 100.0 * ((1 + beta**2) * p * r) / (r + beta**2 * p)


class CiderScorer:
    """TF-IDF n-gram cosine consensus (n = 1..4) against a reference corpus.

    Document frequencies come from ``corpus``: a list whose items are the
    reference sets (one set per described path).  Scores are the average cosine
    over n and references times 100, i.e. the customary x10 CIDEr value scaled
    by a further 10 onto 0-100.
    """

    def __init__(self, corpus: Sequence[Sequence[str] | str]):
        self.df: Counter = Counter()
        docs = [[d] if isinstance(d, str) else list(d) for d in corpus]
        for refs in docs:
            seen = set()
            for r in refs:
                t = tokenize(r)
                for n in range(1, 5):
                    seen.update(_ngrams(t, n))
            self.df.update(seen)
        self.log_n = math.log(float(max(1, len(docs))))

    def _vec(self, tokens: Sequence[str]):
        vecs, norms = [], []
        for n in range(1, 5):
            v = {g: k * (self.log_n - math.log(max(1.0, self.df[g]))) for g, k in _ngrams(tokens, n).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms

    def score(self, candidate: str, references: Sequence[str]) -> float:
        if not references:
            raise ValueError("references must be non-empty")
        cv, cn = self._vec(tokenize(candidate))
        total = 0.0
        for r in references:
            rv, rn = self._vec(tokenize(r))
            for n in range(4):
                if cn[n] == 0 or rn[n] == 0:
                    continue
                dot = sum(x * rv[n].get(g, 0.0) for g, x in cv[n].items())
                total += dot / (cn[n] * rn[n])
        return 100.0 * total / (4 * len(references))


def cider(candidates: Sequence[str], references_corpus: Sequence[Sequence[str]]) -> float:
    """Corpus CIDEr on 0-100: document frequencies from ``references_corpus``, mean over candidates."""
    if len(candidates) != len(references_corpus):
        raise ValueError("candidates and references differ in length")
    if not candidates:
        return 0.0
    scorer = CiderScorer(references_corpus)
    return sum(scorer.score(c, refs) for c, refs in zip(candidates, references_corpus)) / len(candidates)


def cider_per_item(candidates: Sequence[str], references_corpus: Sequence[Sequence[str]]) -> list[float]:
    scorer = CiderScorer(references_corpus)
    return [scorer.score(c, refs) for c, refs in zip(candidates, references_corpus)]


def caption_table(candidates: Sequence[str], references: Sequence[Sequence[str]]) -> dict:
    """Corpus-level BLEU-4, CIDEr and mean ROUGE-L, all on 0-100."""
    n = len(candidates)
    return {
        "bleu4": corpus_bleu4(candidates, references) if n else 0.0,
        "cider": cider(candidates, references),
        "rouge_l": sum(rouge_l(c, r) for c, r in zip(candidates, references)) / n if n else 0.0,
    }
