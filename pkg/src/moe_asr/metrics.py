"""Token error rates from Levenshtein distance."""

from __future__ import annotations

from collections import defaultdict
from typing import Sequence


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Minimum substitutions + insertions + deletions turning ``hyp`` into ``ref``."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + int(r != h))
        prev = cur
    return prev[-1]


def error_report(refs, hyps, languages) -> dict:
    """Per-language and overall token error rates.

    The overall rate pools errors and reference tokens across languages, which
    equals the per-language rates averaged with reference-token-count weights.
    """
    errors: dict[int, int] = defaultdict(int)
    tokens: dict[int, int] = defaultdict(int)
    for ref, hyp, lang in zip(refs, hyps, languages):
        errors[int(lang)] += edit_distance(list(ref), list(hyp))
        tokens[int(lang)] += len(ref)
    per_language = {
        str(lang): {
            "errors": errors[lang],
            "tokens": tokens[lang],
            "rate": errors[lang] / tokens[lang] if tokens[lang] else 0.0,
        }
        for lang in sorted(tokens)
    }
    total_tokens = sum(tokens.values())
    overall = float(sum(errors.values()) / total_tokens) if total_tokens else 0.0
    return {"per_language": per_language, "overall": overall, "tokens": total_tokens}
