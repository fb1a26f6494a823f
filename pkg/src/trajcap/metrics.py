"""Caption tokenization, BLEU-4 / ROUGE-L, and the whole/action/justification protocol."""

from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

PUNCT = (".", ";", ",")
_TOKEN_RE = re.compile(r"[a-z0-9']+|[.;,]")

ROUGE_BETA = 1.2


def tokenize(text: str) -> list[str]:
    """Lowercase words; '.', ';' and ',' become standalone tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    out = ""
    for tok in tokens:
        if not out:
            out = tok
        elif tok in (".", ","):
            out += tok
        else:
            out += " " + tok
    return out


@dataclass(frozen=True)
class CaptionPair:
    action: str
    justification: str
    raw: str
    warning: bool = False


def split_caption(raw: str) -> CaptionPair:
    """Split at the first ';'.  Without one, everything is the action and ``warning`` is set."""
    if ";" not in raw:
        return CaptionPair(raw.strip(), "", raw, warning=True)
    action, just = raw.split(";", 1)
    return CaptionPair(action.strip(), just.strip(), raw)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    """Corpus BLEU-4 against a single reference each, no smoothing."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")
    matches = [0] * 4
    totals = [0] * 4
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, 5):
            cc = _ngrams(cand, n)
            rc = _ngrams(ref, n)
            matches[n - 1] += sum(min(k, rc[g]) for g, k in cc.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str], beta: float = ROUGE_BETA) -> float:
    """Sentence ROUGE-L F-measure; precision is over the candidate, recall over the reference."""
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def corpus_rouge_l(candidates, references, beta: float = ROUGE_BETA) -> float:
    """Mean of sentence-level ROUGE-L over aligned pairs."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")
    return sum(rouge_l(c, r, beta) for c, r in zip(candidates, references)) / len(candidates)


EVAL_KEYS = ("whole_b4", "whole_rl", "action_b4", "action_rl", "just_b4", "just_rl")


@dataclass
class EvalTable:
    whole_b4: float
    whole_rl: float
    action_b4: float
    action_rl: float
    just_b4: float
    just_rl: float

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in EVAL_KEYS}

    def row(self) -> list[float]:
        return [getattr(self, k) for k in EVAL_KEYS]


def score_captions(predictions: Sequence[str], references: Sequence[str]) -> tuple[EvalTable, list[float]]:
    """Score raw caption strings on the three corpora; also return per-sample whole ROUGE-L."""
    if not predictions:
        raise ValueError("nothing to evaluate")
    if len(predictions) != len(references):
        raise ValueError(f"{len(predictions)} predictions vs {len(references)} references")
    pp = [split_caption(p) for p in predictions]
    rr = [split_caption(r) for r in references]
    corpora = {
        "whole": ([tokenize(p) for p in predictions], [tokenize(r) for r in references]),
        "action": ([tokenize(p.action) for p in pp], [tokenize(r.action) for r in rr]),
        "just": ([tokenize(p.justification) for p in pp], [tokenize(r.justification) for r in rr]),
    }
    vals = {}
    for name, (cands, refs) in corpora.items():
        vals[f"{name}_b4"] = bleu4(cands, refs)
        vals[f"{name}_rl"] = corpus_rouge_l(cands, refs)
    per_sample = [rouge_l(c, r) for c, r in zip(*corpora["whole"])]
    return EvalTable(**vals), per_sample


def action_accuracy(predictions: Sequence[str], references: Sequence[str]) -> float:
    """Fraction of samples whose tokenized action segment matches exactly."""
    hits = sum(tokenize(split_caption(p).action) == tokenize(split_caption(r).action)
               for p, r in zip(predictions, references))
    return hits / len(references)


def evaluate(model, samples, out_dir=None) -> EvalTable:
    """Greedy-decode ``samples`` with ``model`` and score them.

    ``model`` is anything with ``predict(samples) -> list[str]``.  When
    ``out_dir`` is given, writes ``eval_table.json`` and ``per_sample.csv``.
    """
    predictions = model.predict(samples)
    references = [s.caption for s in samples]
    table, per_sample = score_captions(predictions, references)
    if out_dir is not None:
        write_eval(out_dir, table, [s.id for s in samples], predictions, references, per_sample)
    return table


class EchoOracle:
    """Predicts the ground-truth caption; pins every metric to 1."""

    def predict(self, samples) -> list[str]:
        return [s.caption for s in samples]


class EmptyPredictor:
    """Predicts empty strings; pins every metric to 0."""

    def predict(self, samples) -> list[str]:
        return ["" for _ in samples]


def write_eval(out_dir, table: EvalTable, ids, predictions, references, per_sample) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_table.json").write_text(json.dumps(table.as_dict(), indent=1, sort_keys=False) + "\n")
    with open(out / "per_sample.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "prediction", "reference", "rouge_l"])
        for row in zip(ids, predictions, references, per_sample):
            w.writerow([row[0], row[1], row[2], repr(row[3])])
