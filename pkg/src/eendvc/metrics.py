"""Diarization error rate with collar, UEM and optimal speaker mapping.

Times are converted to integer microseconds so segment arithmetic is exact.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from itertools import permutations
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .signal_io import Annotation

US = 1_000_000
EXHAUSTIVE_LIMIT = 8


@dataclass
class ScoringConfig:
    collar: float = 0.0
    score_overlap: bool = True
    uem: Mapping[str, Sequence[tuple[float, float]]] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.collar < 0:
            raise ValueError("collar must be >= 0")


@dataclass
class DerBreakdown:
    der: float
    miss: float
    false_alarm: float
    confusion: float
    scored_speech: float
    # absolute durations in seconds, kept so recordings can be pooled
    miss_s: float = 0.0
    false_alarm_s: float = 0.0
    confusion_s: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _us(t: float) -> int:
    return int(round(t * US))


def _union(spans: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    out: list[list[int]] = []
    for s, e in sorted(spans):
        if e <= s:
            continue
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [(s, e) for s, e in out]


def _subtract(spans: list[tuple[int, int]], holes: list[tuple[int, int]]) -> list[tuple[int, int]]:
    out = []
    holes = _union(holes)
    for s, e in spans:
        cur = s
        for hs, he in holes:
            if he <= cur or hs >= e:
                continue
            if hs > cur:
                out.append((cur, hs))
            cur = max(cur, he)
        if cur < e:
            out.append((cur, e))
    return out


def _speaker_spans(ann: Annotation) -> dict[str, list[tuple[int, int]]]:
    spans: dict[str, list[tuple[int, int]]] = {}
    for t in ann.turns:
        spans.setdefault(t.speaker, []).append((_us(t.start), _us(t.end)))
    return {k: _union(v) for k, v in spans.items()}


def _segments(ref: dict, hyp: dict, scored: list[tuple[int, int]]):
    """Elementary segments of the scored region with per-speaker activity."""
    points = {p for s, e in scored for p in (s, e)}
    for spans in list(ref.values()) + list(hyp.values()):
        points.update(p for s, e in spans for p in (s, e))
    points = sorted(points)
    ref_names, hyp_names = sorted(ref), sorted(hyp)

    def activity(spans_by_spk, names):
        act = np.zeros((len(points) - 1, len(names)), dtype=bool) if len(points) > 1 else np.zeros((0, len(names)), bool)
        idx = {p: i for i, p in enumerate(points)}
        for j, name in enumerate(names):
            for s, e in spans_by_spk[name]:
                act[idx[s]:idx[e], j] = True
        return act

    if len(points) < 2:
        return np.zeros(0, np.int64), np.zeros((0, len(ref_names)), bool), np.zeros((0, len(hyp_names)), bool), ref_names, hyp_names
    starts = np.asarray(points[:-1], dtype=np.int64)
    durs = np.diff(np.asarray(points, dtype=np.int64))
    in_scored = np.zeros(len(durs), dtype=bool)
    for s, e in scored:
        in_scored |= (starts >= s) & (starts < e)
    durs = np.where(in_scored, durs, 0)
    return durs, activity(ref, ref_names), activity(hyp, hyp_names), ref_names, hyp_names


def _best_assignment(overlap: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one (row, col) pairs maximising total overlap; first maximum in lexicographic order."""
    n_ref, n_hyp = overlap.shape
    if n_ref == 0 or n_hyp == 0:
        return []
    if max(n_ref, n_hyp) > EXHAUSTIVE_LIMIT:
        rows, cols = linear_sum_assignment(-overlap)
        return [(int(r), int(c)) for r, c in zip(rows, cols) if overlap[r, c] > 0]
    transposed = n_ref > n_hyp
    mat = overlap.T if transposed else overlap
    best_val, best = -1, ()
    rows = np.arange(mat.shape[0])
    for cols in permutations(range(mat.shape[1]), mat.shape[0]):
        val = int(mat[rows, list(cols)].sum())
        if val > best_val:
            best_val, best = val, cols
    pairs = [(r, c) for r, c in zip(rows.tolist(), best)]
    if transposed:
        pairs = sorted((c, r) for r, c in pairs)
    return [(r, c) for r, c in pairs if overlap[r, c] > 0]


def _scored_region(reference: Annotation, hypothesis: Annotation, config: ScoringConfig):
    ref = _speaker_spans(reference)
    hyp = _speaker_spans(hypothesis)
    if config.uem is not None and reference.recording_id in config.uem:
        scored = _union((_us(s), _us(e)) for s, e in config.uem[reference.recording_id])
    else:
        all_points = [p for spans in list(ref.values()) + list(hyp.values()) for s, e in spans for p in (s, e)]
        scored = [(min(all_points), max(all_points))] if all_points else []
    if config.collar > 0:
        c = _us(config.collar)
        # every boundary of the reference as written, including turns that touch
        holes = [(_us(p) - c, _us(p) + c) for t in reference.turns for p in (t.start, t.end)]
        scored = _subtract(scored, holes)
    if not config.score_overlap:
        points = sorted({p for spans in ref.values() for s, e in spans for p in (s, e)})
        holes = [(a, b) for a, b in zip(points, points[1:])
                 if sum(any(s <= a and b <= e for s, e in spans) for spans in ref.values()) > 1]
        scored = _subtract(scored, holes)
    return ref, hyp, scored


def optimal_mapping(reference: Annotation, hypothesis: Annotation,
                    config: ScoringConfig | None = None) -> dict[str, str]:
    """Reference -> hypothesis speaker map maximising mapped overlap on the scored region."""
    config = config or ScoringConfig()
    ref, hyp, scored = _scored_region(reference, hypothesis, config)
    durs, ref_act, hyp_act, ref_names, hyp_names = _segments(ref, hyp, scored)
    overlap = (ref_act.T.astype(np.int64) * durs) @ hyp_act.astype(np.int64)
    return {ref_names[r]: hyp_names[c] for r, c in _best_assignment(overlap)}


def compute_der(reference: Annotation, hypothesis: Annotation,
                config: ScoringConfig | None = None) -> DerBreakdown:
    config = config or ScoringConfig()
    ref, hyp, scored = _scored_region(reference, hypothesis, config)
    durs, ref_act, hyp_act, ref_names, hyp_names = _segments(ref, hyp, scored)
    n_ref = ref_act.sum(axis=1)
    n_hyp = hyp_act.sum(axis=1)
    total = int((n_ref * durs).sum())
    if total == 0:
        raise ValueError(f"{reference.recording_id}: no scored reference speech, DER undefined")
    overlap = (ref_act.T.astype(np.int64) * durs) @ hyp_act.astype(np.int64)
    pairs = _best_assignment(overlap)
    correct = np.zeros(len(durs), dtype=np.int64)
    for r, c in pairs:
        correct += ref_act[:, r] & hyp_act[:, c]
    miss = int((np.maximum(n_ref - n_hyp, 0) * durs).sum())
    fa = int((np.maximum(n_hyp - n_ref, 0) * durs).sum())
    conf = int(((np.minimum(n_ref, n_hyp) - correct) * durs).sum())
    return DerBreakdown(
        der=(miss + fa + conf) / total,
        miss=miss / total,
        false_alarm=fa / total,
        confusion=conf / total,
        scored_speech=total / US,
        miss_s=miss / US,
        false_alarm_s=fa / US,
        confusion_s=conf / US,
    )


def pool(breakdowns: Sequence[DerBreakdown]) -> DerBreakdown:
    """Duration-weighted total over recordings."""
    total = sum(b.scored_speech for b in breakdowns)
    if total <= 0:
        raise ValueError("no scored speech to pool")
    miss = sum(b.miss_s for b in breakdowns)
    fa = sum(b.false_alarm_s for b in breakdowns)
    conf = sum(b.confusion_s for b in breakdowns)
    return DerBreakdown((miss + fa + conf) / total, miss / total, fa / total, conf / total,
                        total, miss, fa, conf)


def macro_average(per_dataset_ders: Sequence[float]) -> float:
    """Unweighted mean across datasets."""
    if len(per_dataset_ders) == 0:
        raise ValueError("need at least one dataset DER")
    return float(np.mean(per_dataset_ders))
