"""Edit distances: character-level Levenshtein with explicit alignments,
and word error rate with a substitution/deletion/insertion breakdown.

All edits have unit cost. Alignment backtraces break ties in the fixed
order match > substitute > delete > insert, so downstream consumers that
map alignment steps to audio positions are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

MATCH = "match"
SUBSTITUTE = "substitute"
DELETE = "delete"
INSERT = "insert"


@dataclass(frozen=True)
class AlignStep:
    """One alignment step transforming the source into the target.

    ``i`` indexes the source (hypothesis) and ``j`` the target; the index
    that does not participate in a delete/insert step is None.
    """

    kind: str
    i: int | None
    j: int | None


@dataclass(frozen=True)
class EditBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    reference_length: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def _dp_table(a: Sequence, b: Sequence) -> list[list[int]]:
    la, lb = len(a), len(b)
    dp = [[0] * (lb + 1) for _ in range(la + 1)]
    for i in range(la + 1):
        dp[i][0] = i
    for j in range(lb + 1):
        dp[0][j] = j
    for i in range(1, la + 1):
        row = dp[i]
        prev = dp[i - 1]
        ai = a[i - 1]
        for j in range(1, lb + 1):
            cost = 0 if ai == b[j - 1] else 1
            row[j] = min(prev[j - 1] + cost, prev[j] + 1, row[j - 1] + 1)
    return dp


def _backtrace(a: Sequence, b: Sequence, dp: list[list[int]]) -> list[AlignStep]:
    steps: list[AlignStep] = []
    i, j = len(a), len(b)
    while i > 0 or j > 0:
        cur = dp[i][j]
        if i > 0 and j > 0 and a[i - 1] == b[j - 1] and dp[i - 1][j - 1] == cur:
            steps.append(AlignStep(MATCH, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dp[i - 1][j - 1] + 1 == cur:
            steps.append(AlignStep(SUBSTITUTE, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and dp[i - 1][j] + 1 == cur:
            steps.append(AlignStep(DELETE, i - 1, None))
            i = i - 1
        else:
            steps.append(AlignStep(INSERT, None, j - 1))
            j = j - 1
    steps.reverse()
    return steps


def levenshtein(a: str, b: str) -> int:
    """Minimum number of single-character insertions, deletions, or
    substitutions turning ``a`` into ``b``."""
    if a == b:
        return 0
    # two-row DP: only distances are needed here
    la, lb = len(a), len(b)
    prev = list(range(lb + 1))
    for i in range(1, la + 1):
        cur = [i] + [0] * lb
        ai = a[i - 1]
        for j in range(1, lb + 1):
            cost = 0 if ai == b[j - 1] else 1
            cur[j] = min(prev[j - 1] + cost, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[lb]


def align_chars(hyp: str, target: str) -> list[AlignStep]:
    """One minimum-cost character alignment from ``hyp`` to ``target``.

    The backtrace prefers match > substitute > delete > insert, making the
    returned alignment unique. The number of non-match steps equals
    ``levenshtein(hyp, target)``.
    """
    return _backtrace(hyp, target, _dp_table(hyp, target))


def wer(reference: str, hypothesis: str) -> tuple[EditBreakdown, float]:
    """Word error rate (S + D + I) / N with its breakdown.

    Words are single-space tokens after trimming; comparison is
    case-insensitive. N is the reference word count and must be >= 1.
    The ratio may exceed 1 when the hypothesis inserts many words.
    """
    ref_words = reference.strip().lower().split(" ") if reference.strip() else []
    hyp_words = hypothesis.strip().lower().split(" ") if hypothesis.strip() else []
    if not ref_words:
        raise ValueError("reference must contain at least one word")

    # aligning reference -> hypothesis makes delete = missing reference word
    # and insert = extra hypothesis word, the ASR convention
    steps = _backtrace(ref_words, hyp_words, _dp_table(ref_words, hyp_words))
    subs = sum(1 for s in steps if s.kind == SUBSTITUTE)
    dels = sum(1 for s in steps if s.kind == DELETE)
    ins = sum(1 for s in steps if s.kind == INSERT)
    breakdown = EditBreakdown(subs, dels, ins, len(ref_words))
    return breakdown, breakdown.distance / len(ref_words)
