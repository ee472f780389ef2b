"""
Masking words out of the audio
==============================

Colour, noun and progressive masking on a synthetic grounded corpus,
followed by the derangement used to pair each utterance with someone
else's image.
"""

import numpy as np

from mmasr.data import SyntheticTaskConfig, generate_synthetic
from mmasr.masking import MaskSpec, incongruent_shuffle, mask_dataset, mask_stats

cfg = SyntheticTaskConfig(utterances=50, grounded=True, seed=0)
recs = generate_synthetic(cfg)
print(recs[0].utt_id, " ".join(recs[0].transcript), recs[0].pos_tags)

# the grounded words play the part of colour words
colour = MaskSpec("color", tuple(cfg.grounded_words()))
masked, mlog = mask_dataset(recs, colour)
pct, per_utt = mask_stats(mlog, recs)
print("colour masking: %.2f%% of words, %.2f per utterance, %d frames" % (pct, per_utt, mlog.frames_masked))

# which frames changed in the first utterance?
changed = np.flatnonzero((masked[0].features != recs[0].features).any(axis=1))
print("changed frames:", changed.min(), "..", changed.max())

# nouns are masked with probability p, per utterance and seed
nouns = mask_dataset(recs, MaskSpec("noun", probability=0.3, seed=1))[1]
print("noun masking:", mask_stats(nouns, recs))

# progressive masking covers the last k words and grows with k
for k in (2, 4, 6, 8, 10):
    print("k=%2d frames masked %d" % (k, mask_dataset(recs, MaskSpec("progressive", k=k))[1].frames_masked))

# incongruent pairing never hands an utterance its own image
pairs = incongruent_shuffle([r.utt_id for r in recs], 0)
print("fixed points:", sum(k == v for k, v in pairs.items()))
