"""
Training a small recogniser and scoring it
==========================================

Train the audio-only model and one fusion variant on a toy corpus, decode
clean and masked copies of a held-out set, and print the WER table.
Runs in a few minutes on a laptop.
"""

from mmasr.data import SyntheticTaskConfig, build_vocab, collate, generate_synthetic
from mmasr.evaluation import build_report, render_table
from mmasr.masking import MaskSpec, mask_dataset
from mmasr.training import TrainConfig, train

common = dict(vocab_size=12, words_per_utterance=4, frames_per_word=6, grounded=True, n_grounded=3, template_seed=0)
train_set = generate_synthetic(SyntheticTaskConfig(utterances=120, seed=0, id_prefix="tr", **common))
test_set = generate_synthetic(SyntheticTaskConfig(utterances=40, seed=1, id_prefix="te", **common))
masked_test, _ = mask_dataset(test_set, MaskSpec("color", tuple(SyntheticTaskConfig(**common).grounded_words())))
vocab = build_vocab(r.transcript for r in train_set)

# small widths; everything else at the library defaults
cfg = TrainConfig(hidden=32, embed_dim=32, encoder_layers=1, learning_rate=0.005, dropout=0.1, max_epochs=80)

hyps = {}
for variant in ("baseline", "early-fusion"):
    res = train(train_set, cfg, variant, vocab=vocab)
    print(variant, "best epoch", res.best_epoch, "final train loss %.3f" % res.metrics[-1].train_loss)
    hyps[variant] = {}
    for name, data in (("T", test_set), ("T_C", masked_test)):
        ids = res.model.greedy_decode_batch(collate(data, vocab), 10)
        hyps[variant][name] = {r.utt_id: vocab.decode(h) for r, h in zip(data, ids)}

refs = {r.utt_id: r.transcript for r in test_set}
print(render_table(build_report(hyps, refs)))
