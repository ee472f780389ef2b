"""Word-level audio masking and incongruent image pairing.

A frame ``f`` (start time ``f * 10 ms``) is masked iff its start falls in
``[start_s, end_s)`` of a selected word. Masked frames are replaced by the
feature row of a zero waveform; every other frame is left untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import ManifestRecord, WordAlignment
from .features import silence_vector
from .seeding import derive_rng

FRAME_SHIFT_MS = 10
PROGRESSIVE_K = (2, 4, 6, 8, 10)


def default_color_lexicon() -> list[str]:
    """The 21 basic colour words shipped in ``colors.txt``."""
    text = resources.files("mmasr").joinpath("colors.txt").read_text()
    return [w.strip() for w in text.splitlines() if w.strip() and not w.startswith("#")]


def read_lexicon(path) -> list[str]:
    return [w.strip().lower() for w in Path(path).read_text().splitlines() if w.strip() and not w.startswith("#")]


@dataclass(frozen=True)
class MaskSpec:
    """Masking recipe.

    ``kind`` is ``"none"``, ``"color"``, ``"noun"`` or ``"progressive"``;
    the matching test sets are T, T_C, T_N and P<k>.
    """

    kind: str = "none"
    lexicon: tuple[str, ...] = ()
    tag: str = "NN"
    probability: float = 0.3
    k: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "color", "noun", "progressive"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.probability}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.kind == "color" and not self.lexicon:
            raise ValueError("colour masking needs a non-empty lexicon")

    @property
    def test_set(self) -> str:
        return {"none": "T", "color": "T_C", "noun": "T_N"}.get(self.kind, f"P{self.k}")

    @classmethod
    def parse(cls, text: str, lexicon: Sequence[str] | None = None, seed: int = 0) -> "MaskSpec":
        """``color``, ``noun``, ``noun:0.5``, ``progressive:4`` or ``none``."""
        kind, _, arg = text.partition(":")
        if kind == "color":
            return cls("color", tuple(lexicon or default_color_lexicon()), seed=seed)
        if kind == "noun":
            return cls("noun", probability=float(arg) if arg else 0.3, seed=seed)
        if kind == "progressive":
            if not arg:
                raise ValueError("progressive masking needs k, e.g. progressive:4")
            return cls("progressive", k=int(arg), seed=seed)
        if kind == "none":
            return cls("none", seed=seed)
        raise ValueError(f"unknown mask spec {text!r}")


@dataclass
class MaskEntry:
    word: str
    index: int
    alignment: WordAlignment
    start_frame: int
    end_frame: int  # exclusive
    reason: str


@dataclass
class MaskLog:
    entries: dict[str, list[MaskEntry]] = field(default_factory=dict)
    frames: dict[str, int] = field(default_factory=dict)

    def add(self, utt_id: str, entries: list[MaskEntry], n_frames: int) -> None:
        self.entries[utt_id] = entries
        self.frames[utt_id] = n_frames

    @property
    def words_masked(self) -> int:
        return sum(len(v) for v in self.entries.values())

    @property
    def frames_masked(self) -> int:
        return sum(self.frames.values())

    def masked_indices(self) -> dict[str, list[int]]:
        return {u: [e.index for e in es] for u, es in self.entries.items()}

    def lines(self) -> list[str]:
        return [
            f"{u} {e.word} {e.start_frame} {e.end_frame} {e.reason}"
            for u, es in self.entries.items()
            for e in es
        ]

    def write(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines()))


def read_mask_log(path) -> dict[str, list[tuple[str, int, int, str]]]:
    out: dict[str, list] = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            u, w, s, e, why = line.split()
            out.setdefault(u, []).append((w, int(s), int(e), why))
    return out


# ---------------------------------------------------------------------------
# selection


def select_color_words(tokens: Sequence[str], lexicon: Iterable[str]) -> set[int]:
    lex = set(lexicon)
    return {i for i, t in enumerate(tokens) if t in lex}


def select_noun_words(tokens: Sequence[str], pos_tags: Sequence[str], probability: float = 0.3,
                      rng: np.random.Generator | None = None, tag: str = "NN") -> set[int]:
    """Each ``tag``-tagged token is picked independently with ``probability``."""
    if len(tokens) != len(pos_tags):
        raise ValueError(f"{len(pos_tags)} POS tags for {len(tokens)} tokens")
    if not 0.0 <= probability <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {probability}")
    rng = rng if rng is not None else np.random.default_rng(0)
    picked = set()
    for i, t in enumerate(pos_tags):
        if t == tag and rng.random() < probability:
            picked.add(i)
    return picked


def select_progressive(tokens: Sequence[str], k: int) -> set[int]:
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(tokens)
    return set(range(max(0, n - k), n))


def select_words(rec: ManifestRecord, spec: MaskSpec) -> set[int]:
    if spec.kind == "color":
        return select_color_words(rec.transcript, spec.lexicon)
    if spec.kind == "noun":
        tags = rec.pos_tags if rec.pos_tags is not None else []
        if rec.pos_tags is None and rec.transcript:
            raise ValueError(f"{rec.utt_id}: noun masking needs POS tags")
        # per-utterance stream: parallel runs draw the same numbers
        rng = derive_rng(spec.seed, "noun", rec.utt_id)
        return select_noun_words(rec.transcript, tags, spec.probability, rng, spec.tag)
    if spec.kind == "progressive":
        return select_progressive(rec.transcript, spec.k)
    return set()


# ---------------------------------------------------------------------------
# application


def frame_range(al: WordAlignment) -> tuple[int, int]:
    """Frames whose start time lies in ``[start_s, end_s)``, as ``[lo, hi)``."""
    start_ms = round(al.start_s * 1000)
    end_ms = round(al.end_s * 1000)
    return math.ceil(start_ms / FRAME_SHIFT_MS), math.ceil(end_ms / FRAME_SHIFT_MS)


def apply_mask(features: np.ndarray, alignments, selected: Iterable[int], silence: np.ndarray | None = None,
               utt_id: str = "?", reason: str = "mask", tokens: Sequence[str] | None = None):
    """Replace the frames of the selected words with ``silence``.

    Args:
        features: (T, F) matrix; not modified.
        alignments: ``index -> WordAlignment`` mapping (or a list indexed by token).
        selected: token indices to mask.

    Returns:
        ``(masked copy, entries, number of distinct frames masked)``.
    """
    feats = np.asarray(features)
    if silence is None:
        silence = silence_vector(pitch=feats.shape[1] != 40)
    if silence.shape != (feats.shape[1],):
        raise ValueError(f"silence vector width {silence.shape} != feature width {feats.shape[1]}")
    if not isinstance(alignments, dict):
        alignments = dict(enumerate(alignments))
    out = feats.copy()
    hit = np.zeros(len(feats), dtype=bool)
    entries = []
    for idx in sorted(set(selected)):
        if idx not in alignments:
            raise ValueError(f"{utt_id}: selected word {idx} has no alignment")
        al = alignments[idx]
        lo, hi = frame_range(al)
        if hi > len(feats):
            raise ValueError(f"{utt_id}: alignment of {al.word!r} ends at frame {hi}, beyond {len(feats)} frames")
        hit[lo:hi] = True
        entries.append(MaskEntry(al.word, idx, al, lo, hi, reason))
    out[hit] = silence
    return out, entries, int(hit.sum())


def mask_record(rec: ManifestRecord, spec: MaskSpec, silence: np.ndarray | None = None):
    """Mask one utterance; transcript, alignments and visual vector are kept as is."""
    selected = select_words(rec, spec)
    if not selected:
        return rec, [], 0
    feats, entries, n = apply_mask(rec.features, rec.token_alignments(), selected, silence,
                                   rec.utt_id, spec.kind)
    return rec.replace(features=feats, features_path=None), entries, n


def mask_dataset(records: Sequence[ManifestRecord], spec: MaskSpec, silence: np.ndarray | None = None):
    """Apply ``spec`` to every record; returns ``(masked records, MaskLog)``."""
    out, mlog = [], MaskLog()
    for rec in records:
        new, entries, n = mask_record(rec, spec, silence)
        out.append(new)
        mlog.add(rec.utt_id, entries, n)
    return out, mlog


def mask_stats(mlog: MaskLog, manifest: Sequence[ManifestRecord]) -> tuple[float, float]:
    """``(percent of words masked, mean masked words per utterance)``."""
    if not manifest:
        return 0.0, 0.0
    ids = {r.utt_id for r in manifest}
    unknown = set(mlog.entries) - ids
    if unknown:
        raise ValueError(f"mask log mentions utterances missing from the manifest: {sorted(unknown)}")
    total = sum(len(r.transcript) for r in manifest)
    masked = mlog.words_masked
    pct = 100.0 * masked / total if total else 0.0
    return pct, masked / len(manifest)


# ---------------------------------------------------------------------------
# incongruent decoding


def incongruent_shuffle(utt_ids: Sequence[str], rng: np.random.Generator | int) -> dict[str, str]:
    """Seeded derangement: utterance -> utterance whose image it borrows.

    Uniform over derangements (rejection sampling of permutations).
    """
    n = len(utt_ids)
    if n < 2:
        raise ValueError("cannot derange fewer than 2 utterances")
    if len(set(utt_ids)) != n:
        raise ValueError("utterance ids must be unique")
    if not isinstance(rng, np.random.Generator):
        rng = derive_rng(int(rng), "incongruent")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            break
    return {utt_ids[i]: utt_ids[int(perm[i])] for i in range(n)}


def swap_visuals(records: Sequence[ManifestRecord], mapping: dict[str, str]) -> list[ManifestRecord]:
    by_id = {r.utt_id: r for r in records}
    return [r.replace(visual=by_id[mapping[r.utt_id]].visual, visual_path=by_id[mapping[r.utt_id]].visual_path)
            for r in records]
