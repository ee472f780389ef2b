"""WER scoring, masked-word recovery, and Table-1 / figure reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"

MODEL_LABELS = {
    "baseline": "Baseline ASR",
    "enc-init": "Encoder Init",
    "enc-dec-init": "Encoder + Decoder Init",
    "early-fusion": "Early Decoder Fusion",
    "hier-attn": "Hierarchical Feature Attention",
}
TABLE_SETS = ("T", "T_C", "T_N")
PROGRESSIVE_K = (2, 4, 6, 8, 10)


@dataclass
class AlignmentPath:
    """Edit operations as ``(op, ref_index, hyp_index)``; missing side is ``None``."""

    ops: list[tuple[str, int | None, int | None]]

    @property
    def cost(self) -> int:
        return sum(op != MATCH for op, _, _ in self.ops)

    def counts(self) -> tuple[int, int, int]:
        s = sum(op == SUB for op, _, _ in self.ops)
        d = sum(op == DEL for op, _, _ in self.ops)
        i = sum(op == INS for op, _, _ in self.ops)
        return s, d, i


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> tuple[int, int, int, AlignmentPath]:
    """Levenshtein alignment at unit cost.

    The backtrace prefers match, then substitution, deletion, insertion.

    Returns:
        ``(substitutions, deletions, insertions, path)``.
    """
    n, m = len(ref), len(hyp)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dp[i][0] = i
    for j in range(1, m + 1):
        dp[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = dp[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            dp[i][j] = min(diag, dp[i - 1][j] + 1, dp[i][j - 1] + 1)

    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and dp[i][j] == dp[i - 1][j - 1]:
            ops.append((MATCH, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dp[i][j] == dp[i - 1][j - 1] + 1:
            ops.append((SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and dp[i][j] == dp[i - 1][j] + 1:
            ops.append((DEL, i - 1, None))
            i -= 1
        else:
            ops.append((INS, None, j - 1))
            j -= 1
    path = AlignmentPath(ops[::-1])
    s, d, ins = path.counts()
    return s, d, ins, path


def wer(ref: Sequence[str], hyp: Sequence[str]) -> float:
    if not ref:
        raise ValueError("reference has no words")
    s, d, i, _ = edit_distance(ref, hyp)
    return 100.0 * (s + d + i) / len(ref)


def corpus_wer(pairs: Sequence[tuple[Sequence[str], Sequence[str]]]) -> float:
    """Pooled WER in percent: total edits over total reference words."""
    if not pairs:
        raise ValueError("no utterances to score")
    errors = words = 0
    for ref, hyp in pairs:
        s, d, i, _ = edit_distance(ref, hyp)
        errors += s + d + i
        words += len(ref)
    if words == 0:
        raise ValueError("references contain zero words")
    return 100.0 * errors / words


def masked_word_recovery(ref: Sequence[str], hyp: Sequence[str], masked: Sequence[int]) -> float | None:
    """Fraction of masked reference words aligned to an identical hypothesis token.

    Returns ``None`` when nothing was masked.
    """
    masked = sorted(set(masked))
    if not masked:
        return None
    bad = [k for k in masked if not 0 <= k < len(ref)]
    if bad:
        raise IndexError(f"masked indices {bad} outside reference of length {len(ref)}")
    _, _, _, path = edit_distance(ref, hyp)
    matched = {r for op, r, _ in path.ops if op == MATCH}
    return sum(k in matched for k in masked) / len(masked)


def corpus_recovery(items: Sequence[tuple[Sequence[str], Sequence[str], Sequence[int]]]) -> float | None:
    """Pooled recovery rate over many utterances (masked-word weighted)."""
    hit = total = 0
    for ref, hyp, masked in items:
        r = masked_word_recovery(ref, hyp, masked)
        if r is None:
            continue
        k = len(set(masked))
        hit += round(r * k)
        total += k
    return None if total == 0 else hit / total


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    baseline: str
    models: list[str]
    test_sets: list[str]
    wer: dict[tuple[str, str], float]
    recovery: dict[tuple[str, str], float | None] = field(default_factory=dict)

    def delta(self, test_set: str, model: str) -> float:
        """Improvement over the baseline (positive = better)."""
        return self.wer[(test_set, self.baseline)] - self.wer[(test_set, model)]

    def best_model(self, test_set: str) -> list[str]:
        scores = {m: round(self.wer[(test_set, m)], 1) for m in self.models if (test_set, m) in self.wer}
        low = min(scores.values())
        return [m for m, s in scores.items() if s == low]


def build_report(
    hypotheses: Mapping[str, Mapping[str, Mapping[str, Sequence[str]]]],
    references: Mapping[str, Sequence[str]],
    baseline: str = "baseline",
    masked: Mapping[str, Mapping[str, Sequence[int]]] | None = None,
) -> EvalReport:
    """Score every (model, test set) and assemble an :class:`EvalReport`.

    Args:
        hypotheses: ``model -> test set -> utt_id -> tokens``.
        references: ``utt_id -> tokens``.
        baseline: model tag deltas are measured against.
        masked: optional ``test set -> utt_id -> masked word indices``.
    """
    if baseline not in hypotheses:
        raise ValueError(f"baseline {baseline!r} has no hypotheses")
    models = [baseline] + sorted(m for m in hypotheses if m != baseline)
    sets = sorted({s for m in hypotheses.values() for s in m}, key=_set_order)
    wer_table, rec_table = {}, {}
    for s in sets:
        expected = None
        for m in models:
            if s not in hypotheses[m]:
                continue
            hyps = hypotheses[m][s]
            ids = set(hyps)
            if expected is None:
                expected = ids
            elif ids != expected:
                diff = sorted(ids ^ expected)
                raise ValueError(f"test set {s}: model {m} scored different utterances; symmetric difference {diff}")
            missing = ids - set(references)
            if missing:
                raise ValueError(f"no reference for utterances {sorted(missing)}")
            keys = sorted(ids)
            wer_table[(s, m)] = corpus_wer([(references[u], hyps[u]) for u in keys])
            if masked and s in masked:
                rec_table[(s, m)] = corpus_recovery(
                    [(references[u], hyps[u], masked[s].get(u, ())) for u in keys]
                )
    return EvalReport(baseline, models, sets, wer_table, rec_table)


def _set_order(name: str):
    fixed = {"T": 0, "T_C": 1, "T_N": 2, "T_inc": 3}
    if name in fixed:
        return (fixed[name], 0, name)
    if name.startswith("P") and name[1:].isdigit():
        return (4, int(name[1:]), name)
    return (5, 0, name)


def render_table(report: EvalReport, sets: Sequence[str] = TABLE_SETS) -> str:
    """Plain-text WER table; ``*`` marks the best model in each column."""
    sets = [s for s in sets if any((s, m) in report.wer for m in report.models)]
    labels = [MODEL_LABELS.get(m, m) for m in report.models]
    width = max(len("Model"), *(len(x) for x in labels))
    head = "Model".ljust(width) + "".join(f" | {s:>8}" for s in sets)
    lines = [head, "-" * len(head)]
    best = {s: set(report.best_model(s)) for s in sets}
    for m, label in zip(report.models, labels):
        cells = []
        for s in sets:
            if (s, m) not in report.wer:
                cells.append(f" | {'-':>8}")
                continue
            mark = "*" if m in best[s] else " "
            cells.append(f" | {report.wer[(s, m)]:7.1f}{mark}")
        lines.append(label.ljust(width) + "".join(cells))
    lines.append("")
    lines.append("Delta vs " + MODEL_LABELS.get(report.baseline, report.baseline) + " (positive = better)")
    for m, label in zip(report.models[1:], labels[1:]):
        cells = "".join(
            f" | {report.delta(s, m):+8.1f}" if (s, m) in report.wer else f" | {'-':>8}" for s in sets
        )
        lines.append(label.ljust(width) + cells)
    return "\n".join(lines) + "\n"


def progressive_curve(report: EvalReport, ks: Sequence[int] = PROGRESSIVE_K) -> str:
    """Tab-separated ``k model wer delta`` rows for progressive masking."""
    rows = ["k\tmodel\twer\tdelta"]
    for k in ks:
        s = f"P{k}"
        for m in report.models:
            if (s, m) in report.wer:
                rows.append(f"{k}\t{m}\t{report.wer[(s, m)]:.4f}\t{report.delta(s, m):.4f}")
    return "\n".join(rows) + "\n"


def incongruent_bars(report: EvalReport, congruent: str = "T", incongruent: str = "T_inc") -> str:
    """Tab-separated ``model congruent_wer incongruent_wer`` rows."""
    rows = ["model\tcongruent\tincongruent"]
    for m in report.models:
        c = report.wer.get((congruent, m))
        i = report.wer.get((incongruent, m))
        if c is None and i is None:
            continue
        fmt = lambda x: "-" if x is None else f"{x:.4f}"  # noqa: E731
        rows.append(f"{m}\t{fmt(c)}\t{fmt(i)}")
    return "\n".join(rows) + "\n"


def write_report(report: EvalReport, out_dir) -> dict[str, Path]:
    """Write ``table.txt``, ``progressive.tsv`` and ``incongruent.tsv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "table": out / "table.txt",
        "progressive": out / "progressive.tsv",
        "incongruent": out / "incongruent.tsv",
    }
    files["table"].write_text(render_table(report))
    files["progressive"].write_text(progressive_curve(report))
    files["incongruent"].write_text(incongruent_bars(report))
    return files


def read_hypotheses(path) -> dict[str, list[str]]:
    """Parse ``utt_id<TAB>tokens`` lines."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            utt, _, text = line.partition("\t")
            if not utt:
                raise ValueError(f"{path}:{lineno}: missing utterance id")
            out[utt] = text.split()
    return out


def write_hypotheses(path, hyps: Mapping[str, Sequence[str]]) -> None:
    Path(path).write_text("".join(f"{u}\t{' '.join(h)}\n" for u, h in hyps.items()))
