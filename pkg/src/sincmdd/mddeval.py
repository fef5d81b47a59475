"""Phone alignment, the hierarchical MDD confusion tally, and PER.

Naming note: the detection metrics treat a *mispronunciation* as the event of
interest, and the tally calls a correctly detected mispronunciation a true
negative (TN). Hence::

    precision = TN / (TN + FN)      recall = TN / (TN + FP)

which is not the textbook TP-based formula. TN is further split into correct
diagnoses (CD, recognized phone equals the perceived one) and diagnosis
errors (DE).
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

DEL = "*del*"

OpKind = Literal["match", "substitute", "delete", "insert"]


@dataclass(frozen=True)
class AlignmentOp:
    kind: OpKind
    ref_pos: int | None
    hyp_pos: int | None


def edit_table(ref: Sequence, hyp: Sequence) -> list[list[int]]:
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(
                d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]),
                d[i - 1][j] + 1,
                d[i][j - 1] + 1,
            )
    return d


def align(ref: Sequence, hyp: Sequence) -> tuple[int, list[AlignmentOp]]:
    """Unit-cost Levenshtein alignment of ``hyp`` against ``ref``.

    The backtrace runs from the end and prefers, among optimal moves, the
    diagonal (match/substitute), then deletion, then insertion.
    """
    d = edit_table(ref, hyp)
    i, j = len(ref), len(hyp)
    ops: list[AlignmentOp] = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            kind = "match" if ref[i - 1] == hyp[j - 1] else "substitute"
            ops.append(AlignmentOp(kind, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            ops.append(AlignmentOp("delete", i - 1, None))
            i -= 1
        else:
            ops.append(AlignmentOp("insert", None, j - 1))
            j -= 1
    ops.reverse()
    return d[-1][-1], ops


def apply_ops(ref: Sequence, hyp: Sequence, ops: Iterable[AlignmentOp]) -> tuple[list, list]:
    """Rebuild both sequences from an op list (used to validate alignments)."""
    r, h = [], []
    for op in ops:
        if op.ref_pos is not None:
            r.append(ref[op.ref_pos])
        if op.hyp_pos is not None:
            h.append(hyp[op.hyp_pos])
    return r, h


def per(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Corpus phone error rate in percent."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("PER is undefined for an empty reference corpus")
    errors = sum(align(r, h)[0] for r, h in zip(refs, hyps))
    return 100.0 * errors / total


@dataclass(frozen=True)
class UttAnnotation:
    utt_id: str
    canonical: tuple[str, ...]
    perceived: tuple[str, ...]  # position-aligned with canonical; DEL marks a deletion

    def __post_init__(self):
        if len(self.canonical) != len(self.perceived):
            raise ValueError(
                f"{self.utt_id}: canonical has {len(self.canonical)} phones, "
                f"perceived has {len(self.perceived)}"
            )
        if DEL in self.canonical:
            raise ValueError(f"{self.utt_id}: deletion marker in canonical sequence")

    @property
    def realized(self) -> list[str]:
        """Perceived phones with deletions removed, i.e. what was actually said."""
        return [p for p in self.perceived if p != DEL]

    @property
    def n_errors(self) -> int:
        return sum(c != p for c, p in zip(self.canonical, self.perceived))


@dataclass
class ConfusionCounts:
    TP: int = 0
    FP: int = 0
    FN: int = 0
    TN: int = 0
    CD: int = 0
    DE: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(**{k: getattr(self, k) + getattr(other, k) for k in asdict(self)})

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.FN + self.TN


def recognized_per_position(annotation: UttAnnotation, hypothesis: Sequence[str]) -> list[str]:
    """Map the hypothesis onto canonical positions.

    The hypothesis is aligned against the realized perceived sequence, whose
    relation to canonical positions the annotation fixes. Canonical positions
    with a perceived phone take the aligned hypothesis phone (or DEL). For a
    deleted position, hypothesis insertions landing in the same gap are
    assigned in order; leftover insertions only count towards PER.
    """
    realized = annotation.realized
    anchor = [i for i, p in enumerate(annotation.perceived) if p != DEL]
    _, ops = align(realized, list(hypothesis))

    at_realized: list[str] = [DEL] * len(realized)
    # insertions keyed by the number of realized phones preceding them
    gaps: dict[int, list[str]] = {}
    consumed = 0
    for op in ops:
        if op.kind == "insert":
            gaps.setdefault(consumed, []).append(hypothesis[op.hyp_pos])
            continue
        if op.hyp_pos is not None:
            at_realized[op.ref_pos] = hypothesis[op.hyp_pos]
        consumed += 1

    out = [DEL] * len(annotation.canonical)
    for k, pos in enumerate(anchor):
        out[pos] = at_realized[k]
    for gap, inserted in gaps.items():
        lo = anchor[gap - 1] + 1 if gap > 0 else 0
        hi = anchor[gap] if gap < len(anchor) else len(out)
        for pos, phone in zip(range(lo, hi), inserted):
            out[pos] = phone
    return out


def mdd_classify(annotation: UttAnnotation, hypothesis: Sequence[str]) -> ConfusionCounts:
    counts = ConfusionCounts()
    recognized = recognized_per_position(annotation, hypothesis)
    for canon, perc, rec in zip(annotation.canonical, annotation.perceived, recognized):
        if perc == canon:
            if rec == canon:
                counts.TP += 1
            else:
                counts.FN += 1
        elif rec == canon:
            counts.FP += 1
        else:
            counts.TN += 1
            if rec == perc:
                counts.CD += 1
            else:
                counts.DE += 1
    return counts


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    dar: float
    per: float | None = None
    counts: ConfusionCounts | None = None
    undefined: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "dar": self.dar,
            "per": self.per,
            "undefined": list(self.undefined),
        }
        if self.counts is not None:
            d.update(asdict(self.counts))
        return d


def _ratio(num: float, den: float, name: str, undefined: list[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return 100.0 * num / den


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def metrics(counts: ConfusionCounts, per_value: float | None = None) -> MetricsReport:
    """Detection/diagnosis percentages. Zero denominators give 0.0 and are listed in ``undefined``."""
    undefined: list[str] = []
    precision = _ratio(counts.TN, counts.TN + counts.FN, "precision", undefined)
    recall = _ratio(counts.TN, counts.TN + counts.FP, "recall", undefined)
    dar = _ratio(counts.CD, counts.CD + counts.DE, "dar", undefined)
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=f1_score(precision, recall),
        dar=dar,
        per=per_value,
        counts=counts,
        undefined=undefined,
    )


def evaluate(
    annotations: Sequence[UttAnnotation], hypotheses: dict[str, Sequence[str]]
) -> MetricsReport:
    """Corpus-level MDD metrics plus PER against the realized perceived phones."""
    total = ConfusionCounts()
    refs, hyps = [], []
    for ann in annotations:
        if ann.utt_id not in hypotheses:
            raise KeyError(f"no hypothesis for utterance {ann.utt_id}")
        hyp = list(hypotheses[ann.utt_id])
        total = total + mdd_classify(ann, hyp)
        refs.append(ann.realized)
        hyps.append(hyp)
    return metrics(total, per(refs, hyps))


# --- file formats -----------------------------------------------------------

def read_annotations(path: str | Path) -> list[UttAnnotation]:
    out = []
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f, delimiter="\t")
        missing = {"utt_id", "canonical", "perceived"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            out.append(
                UttAnnotation(
                    row["utt_id"],
                    tuple(row["canonical"].split()),
                    tuple(row["perceived"].split()),
                )
            )
    return out


def write_annotations(annotations: Iterable[UttAnnotation], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("utt_id\tcanonical\tperceived\n")
        for a in annotations:
            f.write(f"{a.utt_id}\t{' '.join(a.canonical)}\t{' '.join(a.perceived)}\n")


def read_hypotheses(path: str | Path) -> dict[str, list[str]]:
    """``utt_id<TAB>space-separated phones`` per line; an empty hypothesis is allowed."""
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            utt, sep, phones = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected utt_id<TAB>phones")
            out[utt] = phones.split()
    return out


def write_hypotheses(hyps: dict[str, Sequence[str]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt, phones in hyps.items():
            f.write(f"{utt}\t{' '.join(phones)}\n")


def format_table(rows: dict[str, MetricsReport]) -> str:
    header = f"{'system':<12}{'PER':>8}{'Prec':>8}{'Rec':>8}{'F1':>8}{'DAR':>8}"
    lines = [header, "-" * len(header)]
    for name, r in rows.items():
        per_s = f"{r.per:8.2f}" if r.per is not None else f"{'-':>8}"
        lines.append(f"{name:<12}{per_s}{r.precision:8.2f}{r.recall:8.2f}{r.f1:8.2f}{r.dar:8.2f}")
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, path: str | Path) -> None:
    """Machine-readable JSON next to a human-readable ``.txt`` table."""
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    path.with_suffix(".txt").write_text(format_table({"system": report}), encoding="utf-8")
