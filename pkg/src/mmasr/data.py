"""Manifests, vocabularies, batching and the synthetic grounding task.

Manifest format: one JSON object per line, keys in this order::

    {"utt_id": str,
     "transcript": "space separated tokens",
     "features": "relative/path.feat" | [[...], ...],
     "alignments": [[word, start_s, end_s], ...],
     "pos_tags": [tag, ...] | null,
     "visual": "relative/path.feat" | [...] | null}

Paths are resolved against the manifest's directory. Times carry three
decimals.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .features import FRAME_SHIFT_S, read_feature_file, write_feature_file
from .seeding import derive_rng

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class WordAlignment:
    word: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if not 0 <= self.start_s < self.end_s:
            raise ValueError(f"bad alignment for {self.word!r}: [{self.start_s}, {self.end_s})")


@dataclass
class ManifestRecord:
    utt_id: str
    transcript: list[str]
    features: np.ndarray | None = None
    alignments: list[WordAlignment] = field(default_factory=list)
    pos_tags: list[str] | None = None
    visual: np.ndarray | None = None
    features_path: str | None = None
    visual_path: str | None = None

    @property
    def num_frames(self) -> int:
        return 0 if self.features is None else int(self.features.shape[0])

    def token_alignments(self) -> dict[int, WordAlignment]:
        """Map transcript index -> alignment (alignments follow token order)."""
        out, j = {}, 0
        for al in self.alignments:
            while j < len(self.transcript) and self.transcript[j] != al.word:
                j += 1
            if j == len(self.transcript):
                raise ManifestError(f"{self.utt_id}: alignment word {al.word!r} not found in transcript order")
            out[j] = al
            j += 1
        return out

    def replace(self, **changes) -> "ManifestRecord":
        d = dict(self.__dict__)
        # a new array no longer matches the file it was read from
        if "features" in changes and "features_path" not in changes:
            d["features_path"] = None
        if "visual" in changes and "visual_path" not in changes:
            d["visual_path"] = None
        d.update(changes)
        return ManifestRecord(**d)


Utterance = ManifestRecord


def _validate(rec: ManifestRecord) -> None:
    rec.token_alignments()
    prev_end = 0.0
    for al in rec.alignments:
        if al.start_s < prev_end - 1e-9:
            raise ManifestError(f"{rec.utt_id}: alignments overlap or are out of order at {al.word!r}")
        prev_end = al.end_s
    if rec.pos_tags is not None and len(rec.pos_tags) != len(rec.transcript):
        raise ManifestError(f"{rec.utt_id}: {len(rec.pos_tags)} POS tags for {len(rec.transcript)} tokens")


def _load_array(value, base: Path):
    if value is None:
        return None, None
    if isinstance(value, str):
        arr = read_feature_file(base / value)
        return arr, value
    return np.asarray(value, dtype=np.float64), None


def load_manifest(path, visual_dim: int | None = None) -> list[ManifestRecord]:
    """Parse a JSON-lines manifest; every error carries its line number."""
    path = Path(path)
    base = path.parent
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                for key in ("utt_id", "transcript", "features"):
                    if key not in obj:
                        raise ManifestError(f"missing field {key!r}")
                feats, fpath = _load_array(obj["features"], base)
                feats = np.atleast_2d(feats)
                vis, vpath = _load_array(obj.get("visual"), base)
                if vis is not None:
                    vis = vis.reshape(-1)
                    if visual_dim is not None and vis.size != visual_dim:
                        raise ManifestError(f"visual vector has {vis.size} dims, expected {visual_dim}")
                rec = ManifestRecord(
                    utt_id=str(obj["utt_id"]),
                    transcript=obj["transcript"].split(),
                    features=feats,
                    alignments=[WordAlignment(w, float(s), float(e)) for w, s, e in obj.get("alignments") or []],
                    pos_tags=obj.get("pos_tags"),
                    visual=vis,
                    features_path=fpath,
                    visual_path=vpath,
                )
                _validate(rec)
            except (ManifestError, ValueError, KeyError, TypeError, OSError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            records.append(rec)
    return records


def record_to_json(rec: ManifestRecord) -> str:
    def arr(value, p):
        if p is not None:
            return p
        if value is None:
            return None
        return np.asarray(value).tolist()

    obj = {
        "utt_id": rec.utt_id,
        "transcript": " ".join(rec.transcript),
        "features": arr(rec.features, rec.features_path),
        "alignments": [[a.word, round(a.start_s, 3), round(a.end_s, 3)] for a in rec.alignments],
        "pos_tags": rec.pos_tags,
        "visual": arr(rec.visual, rec.visual_path),
    }
    return json.dumps(obj, separators=(", ", ": "))


def write_manifest(path, records: Iterable[ManifestRecord], data_dir: str | None = None) -> None:
    """Write records as JSON lines.

    With ``data_dir`` set every array is written as a binary file under that
    directory (relative to the manifest). Without it, arrays that came from
    files keep their original relative paths and the rest are inlined.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        if data_dir is not None:
            d = path.parent / data_dir
            d.mkdir(parents=True, exist_ok=True)
            if rec.features is not None:
                rel = f"{data_dir}/{rec.utt_id}.feat"
                write_feature_file(path.parent / rel, rec.features)
                rec = rec.replace(features_path=rel)
            if rec.visual is not None:
                rel = f"{data_dir}/{rec.utt_id}.vis"
                write_feature_file(path.parent / rel, rec.visual[None, :])
                rec = rec.replace(visual_path=rel)
        lines.append(record_to_json(rec))
    path.write_text("".join(line + "\n" for line in lines))


def read_alignments(path) -> dict[str, list[WordAlignment]]:
    """Read ``utt_id start_s end_s word`` lines, grouped by utterance in file order."""
    out: dict[str, list[WordAlignment]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 4:
                raise ValueError(f"expected 4 fields, got {len(parts)}")
            utt, start, end, word = parts
            out.setdefault(utt, []).append(WordAlignment(word, float(start), float(end)))
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_alignments(path, records: Iterable[ManifestRecord]) -> None:
    Path(path).write_text("".join(
        f"{r.utt_id} {a.start_s:.3f} {a.end_s:.3f} {a.word}\n" for r in records for a in r.alignments
    ))


def attach_alignments(records: Sequence[ManifestRecord], table: dict[str, list[WordAlignment]]) -> list[ManifestRecord]:
    """Replace each record's alignments with the ones in ``table`` (when present)."""
    out = []
    for r in records:
        if r.utt_id in table:
            r = r.replace(alignments=list(table[r.utt_id]))
            try:
                _validate(r)
            except ManifestError as exc:
                raise ManifestError(f"alignments for {r.utt_id}: {exc}") from exc
        out.append(r)
    return out


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Token <-> id map with reserved PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @property
    def words(self) -> list[str]:
        return self.itos[len(SPECIALS):]


def build_vocab(transcripts: Iterable[Sequence[str]], min_freq: int = 1) -> Vocabulary:
    """Frequency-ordered vocabulary (ties broken lexicographically)."""
    counts = Counter(tok for tr in transcripts for tok in tr)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


# ---------------------------------------------------------------------------
# visual features


def pool_spatial(features: np.ndarray) -> np.ndarray:
    """Global average pooling of an (H, W, C) map to (C,)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3 or min(f.shape) < 1:
        raise ValueError(f"expected a non-empty (H, W, C) map, got shape {f.shape}")
    return f.mean(axis=(0, 1))


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    utt_ids: list[str]
    features: np.ndarray  # (B, T, F) zero padded
    lengths: np.ndarray  # (B,)
    visual: np.ndarray | None  # (B, Dv)
    targets: np.ndarray  # (B, L) BOS ... EOS, PAD padded
    target_mask: np.ndarray  # (B, L) True on real tokens
    skipped: int = 0

    def __len__(self):
        return len(self.utt_ids)


def collate(records: Sequence[ManifestRecord], vocab: Vocabulary) -> Batch:
    """Pad a list of records into one batch; empty transcripts are dropped."""
    kept = [r for r in records if r.transcript]
    skipped = len(records) - len(kept)
    if skipped:
        log.warning("skipping %d utterance(s) with empty transcripts", skipped)
    if not kept:
        raise ValueError("batch has no utterance with a non-empty transcript")
    B = len(kept)
    lengths = np.array([r.num_frames for r in kept])
    if lengths.min() < 1:
        raise ValueError("utterance without feature frames in batch")
    F = kept[0].features.shape[1]
    feats = np.zeros((B, lengths.max(), F))
    for i, r in enumerate(kept):
        if r.features.shape[1] != F:
            raise ValueError(f"{r.utt_id}: feature width {r.features.shape[1]} != {F}")
        feats[i, : lengths[i]] = r.features
    seqs = [[BOS] + vocab.encode(r.transcript) + [EOS] for r in kept]
    L = max(len(s) for s in seqs)
    targets = np.full((B, L), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        targets[i, : len(s)] = s
    visual = None
    if all(r.visual is not None for r in kept):
        visual = np.stack([np.asarray(r.visual, dtype=np.float64).reshape(-1) for r in kept])
    return Batch([r.utt_id for r in kept], feats, lengths, visual, targets, targets != PAD, skipped)


def bucket_batches(records: Sequence[ManifestRecord], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle, group by feature length, chunk, then shuffle chunk order."""
    idx = rng.permutation(len(records))
    idx = sorted(idx, key=lambda i: records[i].num_frames)
    chunks = [idx[i : i + batch_size] for i in range(0, len(idx), batch_size)]
    order = rng.permutation(len(chunks))
    return [[int(i) for i in chunks[j]] for j in order]


# ---------------------------------------------------------------------------
# synthetic task


@dataclass
class SyntheticTaskConfig:
    """Word-template audio with optional visually grounded words.

    With ``grounded=True`` every utterance holds exactly one of the
    ``n_grounded`` pseudo-colour words at a uniformly drawn position, and the
    visual vector one-hot encodes which one. All other words come from the
    remaining vocabulary, independently of the grounded one.
    """

    vocab_size: int = 30
    utterances: int = 200
    words_per_utterance: int = 5
    frames_per_word: int = 8
    noise: float = 0.3
    feat_dim: int = 43
    visual_dim: int = 8
    grounded: bool = False
    n_grounded: int = 5
    seed: int = 0
    template_seed: int | None = None
    id_prefix: str = "syn"

    def __post_init__(self):
        for name in ("vocab_size", "utterances", "words_per_utterance", "frames_per_word", "feat_dim", "visual_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.grounded:
            if not 1 <= self.n_grounded < self.vocab_size:
                raise ValueError("n_grounded must lie in [1, vocab_size)")
            if self.visual_dim < self.n_grounded:
                raise ValueError("visual_dim must be at least n_grounded for the one-hot code")

    def words(self) -> list[str]:
        ng = self.n_grounded if self.grounded else 0
        return [f"c{i}" for i in range(ng)] + [f"w{i:02d}" for i in range(self.vocab_size - ng)]

    def grounded_words(self) -> list[str]:
        return self.words()[: self.n_grounded] if self.grounded else []


def _pos_tag(word: str) -> str:
    if word.startswith("c"):
        return "JJ"
    return "NN" if int(word[1:]) % 2 == 0 else "VB"


def word_templates(config: SyntheticTaskConfig) -> dict[str, np.ndarray]:
    seed = config.seed if config.template_seed is None else config.template_seed
    rng = derive_rng(seed, "templates")
    return {w: rng.normal(size=(config.frames_per_word, config.feat_dim)) for w in config.words()}


def generate_synthetic(config: SyntheticTaskConfig) -> list[ManifestRecord]:
    """Generate a seeded dataset whose alignments tile each utterance exactly."""
    templates = word_templates(config)
    words = config.words()
    grounded = config.grounded_words()
    plain = words[len(grounded):]
    rng = derive_rng(config.seed, "synthetic", config.id_prefix)
    fpw, n = config.frames_per_word, config.words_per_utterance
    dur = fpw * FRAME_SHIFT_S
    records = []
    for u in range(config.utterances):
        if grounded:
            toks = [plain[i] for i in rng.integers(len(plain), size=n)]
            g = int(rng.integers(len(grounded)))
            pos = int(rng.integers(n))
            toks[pos] = grounded[g]
            visual = np.zeros(config.visual_dim)
            visual[g] = 1.0
        else:
            toks = [words[i] for i in rng.integers(len(words), size=n)]
            visual = rng.normal(size=config.visual_dim)
        feats = np.concatenate([templates[w] for w in toks], axis=0)
        feats = feats + config.noise * rng.normal(size=feats.shape)
        aligns = [WordAlignment(w, round(k * dur, 3), round((k + 1) * dur, 3)) for k, w in enumerate(toks)]
        records.append(
            ManifestRecord(
                utt_id=f"{config.id_prefix}{u:05d}",
                transcript=toks,
                features=feats,
                alignments=aligns,
                pos_tags=[_pos_tag(w) for w in toks],
                visual=visual,
            )
        )
    return records
