"""Chunked SDR and note-level transcription F-measures."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

__all__ = [
    "SDR_CAP",
    "SdrReport",
    "chunk_sdr",
    "sdr",
    "median_of_medians",
    "PRF",
    "TranscriptionReport",
    "match_notes",
    "note_fmeasures",
]

SDR_CAP = 100.0
_TIME_DECIMALS = 7  # distances are rounded before comparing against tolerances


@dataclass
class SdrReport:
    chunk_sdrs: list[float]
    median: float
    silent_chunks: int = 0
    chunk_seconds: float = 1.0

    def to_dict(self):
        return {"median": self.median, "chunks": len(self.chunk_sdrs), "silent_chunks": self.silent_chunks, "chunk_sdrs": self.chunk_sdrs}


def chunk_sdr(est: np.ndarray, ref: np.ndarray) -> float:
    """``10 log10(|ref|^2 / |ref - est|^2)``, capped at ``SDR_CAP`` dB."""
    num = float(np.sum(np.square(ref, dtype=np.float64)))
    den = float(np.sum(np.square(ref - est, dtype=np.float64)))
    if den == 0.0:
        return SDR_CAP
    return float(min(SDR_CAP, 10.0 * np.log10(num / den))) if num > 0 else float("-inf")


def sdr(est, ref, sample_rate: int, chunk_seconds: float = 1.0) -> SdrReport:
    """Per-chunk SDR over non-overlapping chunks; silent-reference chunks are skipped."""
    est = np.atleast_2d(np.asarray(getattr(est, "samples", est), dtype=np.float64))
    ref = np.atleast_2d(np.asarray(getattr(ref, "samples", ref), dtype=np.float64))
    if est.shape != ref.shape:
        raise ValueError(f"estimate shape {est.shape} differs from reference shape {ref.shape}")
    size = int(round(chunk_seconds * sample_rate))
    values, silent = [], 0
    for start in range(0, ref.shape[-1], size):
        r = ref[:, start : start + size]
        e = est[:, start : start + size]
        if not np.any(r):
            silent += 1
            continue
        values.append(chunk_sdr(e, r))
    median = float(np.median(values)) if values else float("nan")
    return SdrReport(values, median, silent, chunk_seconds)


def median_of_medians(reports) -> float:
    meds = [r.median for r in reports if not np.isnan(r.median)]
    return float(np.median(meds)) if meds else float("nan")


@dataclass
class PRF:
    precision: float
    recall: float
    f_measure: float

    @classmethod
    def from_counts(cls, matched: int, n_est: int, n_ref: int) -> "PRF":
        p = matched / n_est if n_est else 0.0
        r = matched / n_ref if n_ref else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f)


@dataclass
class TranscriptionReport:
    con: PRF
    conp: PRF
    conpoff: PRF
    onset_tolerance: float = 0.05
    pitch_tolerance_cents: float = 50.0
    offset_ratio: float = 0.2
    offset_min_tolerance: float = 0.05

    def to_dict(self) -> dict:
        d = {}
        for name in ("con", "conp", "conpoff"):
            prf = getattr(self, name)
            d[name] = {"precision": prf.precision, "recall": prf.recall, "f_measure": prf.f_measure}
        d["tolerances"] = {
            "onset": self.onset_tolerance,
            "pitch_cents": self.pitch_tolerance_cents,
            "offset_ratio": self.offset_ratio,
            "offset_min": self.offset_min_tolerance,
        }
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_row(self) -> dict:
        row = {}
        for name in ("con", "conp", "conpoff"):
            prf = getattr(self, name)
            row.update({f"{name}_p": prf.precision, f"{name}_r": prf.recall, f"{name}_f": prf.f_measure})
        return row


def _arrays(notes):
    on = np.array([n.onset for n in notes], dtype=np.float64)
    off = np.array([n.offset for n in notes], dtype=np.float64)
    pitch = np.array([n.pitch for n in notes], dtype=np.float64)
    return on, off, pitch


def match_notes(ref, est, onset_tol=0.05, pitch_tol_cents=50.0, offset_ratio=None, offset_min_tol=0.05, use_pitch=True):
    """Maximum one-to-one matching of ``ref`` to ``est`` notes.

    Returns ``(ref_index, est_index)`` pairs. Pitches are MIDI numbers; an
    ``offset_ratio`` of None ignores offsets.
    """
    if not ref or not est:
        return []
    r_on, r_off, r_pitch = _arrays(ref)
    e_on, e_off, e_pitch = _arrays(est)
    ok = np.round(np.abs(r_on[:, None] - e_on[None, :]), _TIME_DECIMALS) <= onset_tol
    if use_pitch:
        cents = np.abs(100.0 * (r_pitch[:, None] - e_pitch[None, :]))
        ok &= np.round(cents, _TIME_DECIMALS) <= pitch_tol_cents
    if offset_ratio is not None:
        tol = np.maximum(offset_min_tol, offset_ratio * (r_off - r_on))
        ok &= np.round(np.abs(r_off[:, None] - e_off[None, :]), _TIME_DECIMALS) <= tol[:, None]
    match = maximum_bipartite_matching(csr_matrix(ok.astype(np.int8)), perm_type="column")
    return [(i, int(j)) for i, j in enumerate(match) if j >= 0]


def note_fmeasures(est, ref, onset_tol: float = 0.05, pitch_tol_cents: float = 50.0, offset_ratio: float = 0.2, offset_min_tol: float | None = None) -> TranscriptionReport:
    """COn, COnP and COnPOff scores.

    The offset tolerance is ``max(offset_min_tol, offset_ratio * ref duration)``
    where ``offset_min_tol`` defaults to the onset tolerance.
    """
    if offset_min_tol is None:
        offset_min_tol = onset_tol
    n_est, n_ref = len(est), len(ref)
    con = len(match_notes(ref, est, onset_tol, use_pitch=False))
    conp = len(match_notes(ref, est, onset_tol, pitch_tol_cents))
    conpoff = len(match_notes(ref, est, onset_tol, pitch_tol_cents, offset_ratio, offset_min_tol))
    return TranscriptionReport(
        PRF.from_counts(con, n_est, n_ref),
        PRF.from_counts(conp, n_est, n_ref),
        PRF.from_counts(conpoff, n_est, n_ref),
        onset_tol,
        pitch_tol_cents,
        offset_ratio,
        offset_min_tol,
    )


def reports_to_csv(rows: dict[str, dict]) -> str:
    """One CSV row per song from ``{song: flat_dict}``, columns in first-seen order."""
    cols = []
    for row in rows.values():
        for k in row:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["song"] + cols, lineterminator="\n")
    w.writeheader()
    for song, row in rows.items():
        w.writerow({"song": song, **row})
    return buf.getvalue()
