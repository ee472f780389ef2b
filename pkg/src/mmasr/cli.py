"""``mmasr`` command line: features, synth, train, mask, decode, report."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .data import (
    SyntheticTaskConfig,
    attach_alignments,
    build_vocab,
    collate,
    generate_synthetic,
    load_manifest,
    read_alignments,
    write_manifest,
)
from .features import extract_features, normalize_utterance, read_wav, write_feature_file
from .masking import (
    MaskSpec,
    frame_range,
    incongruent_shuffle,
    mask_dataset,
    read_lexicon,
    read_mask_log,
    swap_visuals,
)
from .models import ASRModel, FusionVariant, warm_start
from .seeding import derive_rng
from .training import TrainConfig, train

log = logging.getLogger("mmasr")


class CommandError(Exception):
    pass


@contextlib.contextmanager
def _output_guard(path: Path):
    """Remove ``path`` if the command fails and it did not exist before."""
    existed = path.exists()
    try:
        yield
    except BaseException:
        if not existed and path.exists():
            if path.is_dir():
                shutil.rmtree(path)
            else:
                path.unlink()
        raise


def _pmap(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _load_json(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _apply_overrides(cfg: dict, pairs) -> dict:
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CommandError(f"--set expects key=value, got {item!r}")
        cfg[key] = json.loads(value) if value not in ("",) else value
    return cfg


def _config_from(cls, raw: dict, **extra):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise CommandError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    raw = dict(raw)
    for k, v in extra.items():
        if v is not None:
            raw[k] = v
    return cls(**raw)


# ---------------------------------------------------------------------------
# commands


def _features_one(args):
    wav, out, pitch = args
    feats = extract_features(read_wav(wav), pitch=pitch)
    write_feature_file(out, feats)
    return feats.shape


def cmd_features(a) -> None:
    wavs = sorted(Path(a.wav_dir).glob("*.wav"))
    if not wavs:
        raise CommandError(f"no .wav files in {a.wav_dir}")
    out = Path(a.out)
    if a.print_config:
        print(json.dumps({"wav_dir": a.wav_dir, "out": a.out, "pitch": not a.no_pitch, "jobs": a.jobs}, indent=2))
        return
    with _output_guard(out):
        out.mkdir(parents=True, exist_ok=True)
        jobs = [(w, out / (w.stem + ".feat"), not a.no_pitch) for w in wavs]
        shapes = _pmap(_features_one, jobs, a.jobs)
    print(f"wrote {len(shapes)} feature files to {out}")


def cmd_synth(a) -> None:
    cfg = _config_from(SyntheticTaskConfig, _apply_overrides(_load_json(a.config), a.set), seed=a.seed)
    if a.print_config:
        print(json.dumps(asdict(cfg), indent=2))
        return
    out = Path(a.out)
    with _output_guard(out):
        records = generate_synthetic(cfg)
        write_manifest(out / "manifest.jsonl", records, data_dir="data")
        (out / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=2))
        if cfg.grounded:
            (out / "lexicon.txt").write_text("".join(w + "\n" for w in cfg.grounded_words()))
    print(f"wrote {len(records)} utterances to {out / 'manifest.jsonl'}")


def cmd_train(a) -> None:
    cfg = _config_from(TrainConfig, _apply_overrides(_load_json(a.config), a.set), seed=a.seed)
    variant = FusionVariant(a.variant)
    if a.print_config:
        print(json.dumps({"variant": variant.value, **cfg.to_dict()}, indent=2))
        return
    records = load_manifest(a.manifest)
    if not records:
        raise CommandError(f"{a.manifest} holds no utterances")
    if variant.multimodal:
        missing = [r.utt_id for r in records if r.visual is None]
        if missing:
            raise CommandError(f"variant {variant.value} needs visual vectors; missing for {missing[:5]}")
    val = load_manifest(a.val_manifest) if a.val_manifest else None
    vocab = build_vocab([r.transcript for r in records], min_freq=a.min_freq)
    model = None
    if a.init_from:
        base = ASRModel.load(a.init_from)
        if base.config.feat_dim != records[0].features.shape[1]:
            raise CommandError(f"{a.init_from} expects {base.config.feat_dim}-d features")
        vocab = base.vocab
        vdim = records[0].visual.size if records[0].visual is not None else None
        model = warm_start(base, variant, seed=cfg.seed, visual_dim=vdim)
    out = Path(a.out)
    with _output_guard(out):
        res = train(records, cfg, variant, val_dataset=val, vocab=vocab, out_dir=out, model=model)
        (out / "train_config.json").write_text(json.dumps({"variant": variant.value, **cfg.to_dict()}, indent=2))
    print(f"best epoch {res.best_epoch} ({res.stopped}); checkpoint {out / 'checkpoint.npz'}")


def cmd_mask(a) -> None:
    lexicon = read_lexicon(a.lexicon) if a.lexicon else None
    spec = MaskSpec.parse(a.spec, lexicon, seed=a.seed)
    if a.print_config:
        print(json.dumps({**asdict(spec), "test_set": spec.test_set}, indent=2))
        return
    records = load_manifest(a.manifest)
    if a.alignments:
        records = attach_alignments(records, read_alignments(a.alignments))
    out = Path(a.out)
    with _output_guard(out):
        masked, mlog = mask_dataset(records, spec)
        if a.normalize:
            masked = [r.replace(features=normalize_utterance(r.features)) for r in masked]
        write_manifest(out / "manifest.jsonl", masked, data_dir="data")
        mlog.write(out / "mask.log")
    print(f"masked {mlog.words_masked} words / {mlog.frames_masked} frames -> {out}")


_WORKER_MODEL = {}


def _decode_one(job):
    ckpt, feats, visual, beam, max_len = job
    model = _WORKER_MODEL.get(ckpt)
    if model is None:
        model = _WORKER_MODEL[ckpt] = ASRModel.load(ckpt)
    if beam <= 1:
        ids = model.greedy_decode(feats, visual, max_len)
    else:
        ids = model.beam_decode(feats, visual, beam, max_len)
    return model.vocab.decode(ids)


def cmd_decode(a) -> None:
    if a.beam < 1:
        raise CommandError("--beam must be >= 1")
    if a.print_config:
        print(json.dumps(vars(a) | {"func": None}, indent=2, default=str))
        return
    records = load_manifest(a.manifest)
    model = ASRModel.load(a.checkpoint)
    if a.incongruent:
        if any(r.visual is None for r in records):
            raise CommandError("incongruent decoding needs a visual vector for every utterance")
        mapping = incongruent_shuffle([r.utt_id for r in records], derive_rng(a.seed, "incongruent"))
        records = swap_visuals(records, mapping)
    out = Path(a.out)
    with _output_guard(out):
        out.parent.mkdir(parents=True, exist_ok=True)
        if a.jobs <= 1 and a.beam <= 1:
            hyps = []
            for i in range(0, len(records), 64):
                chunk = records[i : i + 64]
                ids = model.greedy_decode_batch(collate(chunk, model.vocab), a.max_len)
                hyps.extend(model.vocab.decode(x) for x in ids)
        else:
            jobs = [(str(a.checkpoint), r.features, r.visual, a.beam, a.max_len) for r in records]
            hyps = _pmap(_decode_one, jobs, a.jobs)
        ev.write_hypotheses(out, {r.utt_id: h for r, h in zip(records, hyps)})
        if a.incongruent:
            Path(str(out) + ".pairs").write_text("".join(f"{u}\t{v}\n" for u, v in mapping.items()))
    print(f"wrote {len(hyps)} hypotheses to {out}")


def _references(path) -> tuple[dict, dict]:
    path = Path(path)
    if path.suffix == ".jsonl":
        recs = load_manifest(path)
        return {r.utt_id: r.transcript for r in recs}, {r.utt_id: r for r in recs}
    return ev.read_hypotheses(path), {}


def _masked_indices(mask_dir: Path, records: dict) -> dict:
    out = {}
    for p in sorted(mask_dir.glob("*.log")):
        entries = read_mask_log(p)
        per = {}
        for utt, items in entries.items():
            rec = records.get(utt)
            if rec is None:
                raise CommandError(f"{p}: utterance {utt} not in references")
            spans = {frame_range(al): i for i, al in rec.token_alignments().items()}
            per[utt] = [spans[(s, e)] for _, s, e, _ in items if (s, e) in spans]
        out[p.stem] = per
    return out


def cmd_report(a) -> None:
    hyp_dir = Path(a.hyp_dir)
    hyps: dict = {}
    for model_dir in sorted(p for p in hyp_dir.iterdir() if p.is_dir()):
        for f in sorted(model_dir.glob("*.hyp")):
            hyps.setdefault(model_dir.name, {})[f.stem] = ev.read_hypotheses(f)
    if not hyps:
        raise CommandError(f"no <model>/<test_set>.hyp files under {hyp_dir}")
    if a.print_config:
        print(json.dumps({"models": sorted(hyps), "baseline": a.baseline_tag, "refs": a.refs}, indent=2))
        return
    refs, recs = _references(a.refs)
    masked = None
    if a.mask_dir:
        if not recs:
            raise CommandError("--mask-dir needs --refs to be a manifest with alignments")
        masked = _masked_indices(Path(a.mask_dir), recs)
    out = Path(a.out)
    with _output_guard(out):
        report = ev.build_report(hyps, refs, a.baseline_tag, masked)
        files = ev.write_report(report, out)
        if masked:
            rows = ["test_set\tmodel\trecovery"]
            for (s, m), r in sorted(report.recovery.items()):
                rows.append(f"{s}\t{m}\t{'-' if r is None else f'{r:.4f}'}")
            (out / "recovery.tsv").write_text("\n".join(rows) + "\n")
    sys.stdout.write(files["table"].read_text())


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed for every random stream")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-utterance work")
    common.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mmasr", description="Multimodal ASR masking laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("features", parents=[common], help="extract filterbank+pitch features from WAV files")
    s.add_argument("--wav-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-pitch", action="store_true", help="40-d filterbank only")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--config", help="JSON SyntheticTaskConfig")
    s.add_argument("--set", action="append", metavar="KEY=JSON", help="override a config field")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train one model variant")
    s.add_argument("--manifest", required=True)
    s.add_argument("--val-manifest")
    s.add_argument("--variant", required=True, choices=[v.value for v in FusionVariant])
    s.add_argument("--config", help="JSON TrainConfig overrides")
    s.add_argument("--set", action="append", metavar="KEY=JSON", help="override a config field")
    s.add_argument("--min-freq", type=int, default=1)
    s.add_argument("--init-from", help="checkpoint whose core weights seed the new model (warm start)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("mask", parents=[common], help="mask words in a manifest's features")
    s.add_argument("--manifest", required=True)
    s.add_argument("--spec", required=True, help="color | noun[:p] | progressive:k")
    s.add_argument("--lexicon", help="colour lexicon file (one word per line)")
    s.add_argument("--alignments", help="'utt_id start_s end_s word' file overriding manifest alignments")
    s.add_argument("--normalize", action="store_true", help="per-utterance mean/variance normalization after masking")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("decode", parents=[common], help="transcribe a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--incongruent", action="store_true", help="pair every utterance with another one's image")
    s.add_argument("--beam", type=int, default=1)
    s.add_argument("--max-len", type=int, default=100)
    s.add_argument("--out", required=True, help="hypothesis file")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("report", parents=[common], help="WER table and figure data")
    s.add_argument("--hyp-dir", required=True, help="directory of <model>/<test_set>.hyp files")
    s.add_argument("--refs", required=True, help="manifest (.jsonl) or utt_id<TAB>text file")
    s.add_argument("--baseline-tag", default="baseline")
    s.add_argument("--mask-dir", help="directory of <test_set>.log mask logs")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CommandError, ValueError, OSError, FloatingPointError) as exc:
        print(f"mmasr {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
