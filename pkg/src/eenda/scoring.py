"""RTTM handling and Diarization Error Rate scoring.

DER follows the standard overlap-aware decomposition: the timeline is
partitioned at segment (and collar) boundaries, a one-to-one reference to
hypothesis speaker mapping maximising matched speech time is found by
optimal assignment, and missed / false alarm / confusion seconds are
accumulated per elementary interval.  Time arithmetic is done on integer
milliseconds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class RttmSegment:
    file_id: str
    onset_s: float
    duration_s: float
    speaker: str

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError(f"duration must be positive, got {self.duration_s}")
        if self.onset_s < 0:
            raise ValueError(f"onset must be >= 0, got {self.onset_s}")


@dataclass
class DerBreakdown:
    missed_s: float
    falsealarm_s: float
    confusion_s: float
    total_ref_s: float
    der: float


def parse_rttm(text: str) -> list[RttmSegment]:
    """Parse SPEAKER-type RTTM lines; other line types are skipped."""
    segments = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        fields = line.split()
        if fields[0] != "SPEAKER":
            continue
        if len(fields) < 8:
            raise ValueError(f"malformed RTTM line {lineno}: expected >= 8 fields")
        try:
            onset = float(fields[3])
            duration = float(fields[4])
        except ValueError as exc:
            raise ValueError(f"malformed RTTM line {lineno}: non-numeric time") from exc
        segments.append(RttmSegment(fields[1], onset, duration, fields[7]))
    return segments


def write_rttm(segments: Iterable[RttmSegment]) -> str:
    lines = [
        f"SPEAKER {s.file_id} 1 {s.onset_s:.3f} {s.duration_s:.3f} "
        f"<NA> <NA> {s.speaker} <NA> <NA>"
        for s in segments
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def _ms(t: float) -> int:
    return int(round(t * 1000.0))


def _file_intervals(
    ref: Sequence[RttmSegment],
    hyp: Sequence[RttmSegment],
    collar_ms: int,
) -> list[tuple[int, frozenset, frozenset]]:
    """Elementary scored intervals: (duration_ms, ref speakers, hyp speakers)."""
    ref_spans = [(_ms(s.onset_s), _ms(s.onset_s + s.duration_s), s.speaker) for s in ref]
    hyp_spans = [(_ms(s.onset_s), _ms(s.onset_s + s.duration_s), s.speaker) for s in hyp]
    half = collar_ms // 2
    zones = []
    if half > 0:
        for a, b, _ in ref_spans:
            zones.append((a - half, a + half))
            zones.append((b - half, b + half))
    bounds = set()
    for a, b, _ in ref_spans + hyp_spans:
        bounds.update((a, b))
    for a, b in zones:
        bounds.update((a, b))
    order = sorted(bounds)
    out = []
    for t0, t1 in zip(order, order[1:]):
        if t1 <= t0:
            continue
        mid = (t0 + t1) / 2
        if any(a < mid < b for a, b in zones):
            continue
        r = frozenset(spk for a, b, spk in ref_spans if a < mid < b)
        h = frozenset(spk for a, b, spk in hyp_spans if a < mid < b)
        if r or h:
            out.append((t1 - t0, r, h))
    return out


def compute_der(
    ref: Sequence[RttmSegment],
    hyp: Sequence[RttmSegment],
    collar_s: float = 0.0,
) -> DerBreakdown:
    """Pooled DER over all file_ids present in ref or hyp."""
    file_ids = sorted({s.file_id for s in ref} | {s.file_id for s in hyp})
    collar_ms = _ms(collar_s)
    missed = fa = conf = total = 0
    for fid in file_ids:
        fref = [s for s in ref if s.file_id == fid]
        fhyp = [s for s in hyp if s.file_id == fid]
        intervals = _file_intervals(fref, fhyp, collar_ms)
        ref_spk = sorted({s.speaker for s in fref})
        hyp_spk = sorted({s.speaker for s in fhyp})
        overlap = np.zeros((len(ref_spk), len(hyp_spk)))
        for dur, r, h in intervals:
            for i, rs in enumerate(ref_spk):
                if rs in r:
                    for j, hs in enumerate(hyp_spk):
                        if hs in h:
                            overlap[i, j] += dur
        mapping = {}
        if overlap.size:
            rows, cols = linear_sum_assignment(-overlap)
            mapping = {ref_spk[i]: hyp_spk[j] for i, j in zip(rows, cols)}
        for dur, r, h in intervals:
            nr, nh = len(r), len(h)
            matched = sum(1 for rs in r if mapping.get(rs) in h)
            missed += max(0, nr - nh) * dur
            fa += max(0, nh - nr) * dur
            conf += (min(nr, nh) - matched) * dur
            total += nr * dur
    missed_s, fa_s, conf_s, total_s = (x / 1000.0 for x in (missed, fa, conf, total))
    if total_s > 0:
        der = (missed_s + fa_s + conf_s) / total_s
    else:
        der = float("inf") if fa_s > 0 else 0.0
    return DerBreakdown(missed_s, fa_s, conf_s, total_s, der)


@dataclass
class GridResult:
    row_labels: list[str]  # adapter modes; "none" for adapter-free routing
    col_labels: list[str]  # evaluation domains
    der: np.ndarray  # (rows, cols)

    def format_table(self, delimiter: str = "\t") -> str:
        lines = [delimiter.join(["adapter"] + self.col_labels)]
        for label, row in zip(self.row_labels, self.der):
            lines.append(delimiter.join([label] + [f"{v:.4f}" for v in row]))
        return "\n".join(lines) + "\n"


def evaluation_grid(
    model,
    eval_sets: Mapping[str, Sequence[tuple[str, "FrameFeatures", Sequence[RttmSegment]]]],
    infer_cfg=None,
    adapter_modes: Optional[Sequence[Optional[str]]] = None,
) -> GridResult:
    """DER for every (adapter mode) x (evaluation domain) cell.

    eval_sets maps evaluation-domain name to (file_id, features, reference
    segments) samples.  Rows default to every trained domain plus
    adapter-free decoding.
    """
    import dataclasses as _dc

    from .inference import InferenceConfig, diarize, result_to_rttm

    if infer_cfg is None:
        infer_cfg = InferenceConfig()
    if adapter_modes is None:
        adapter_modes = list(model.domains) + [None]
    col_labels = list(eval_sets)
    grid = np.zeros((len(adapter_modes), len(col_labels)))
    for i, mode in enumerate(adapter_modes):
        cfg = _dc.replace(infer_cfg, adapter_mode=mode)
        for j, domain in enumerate(col_labels):
            all_ref: list[RttmSegment] = []
            all_hyp: list[RttmSegment] = []
            for file_id, feats, ref in eval_sets[domain]:
                result = diarize(feats, model, cfg)
                all_hyp.extend(result_to_rttm(result, file_id, feats.hop_s))
                all_ref.extend(ref)
            grid[i, j] = compute_der(all_ref, all_hyp).der
    row_labels = [mode if mode is not None else "none" for mode in adapter_modes]
    return GridResult(row_labels, col_labels, grid)
