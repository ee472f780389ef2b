"""
From waveform to feature frames
===============================

A one second tone becomes 98 frames of 40 log-mel energies plus three
pitch values. Masking later swaps whole frames for the frame a silent
waveform would produce.
"""

import numpy as np

from mmasr.features import extract_features, frame_signal, log_mel_filterbank, mel_filterbank, pitch_features, silence_vector

sr = 16000
t = np.arange(sr) / sr
tone = 0.5 * np.sin(2 * np.pi * 1000.0 * t)

# 25 ms windows every 10 ms
frames = frame_signal(tone)
print("frames:", frames.shape)

# which mel band lights up for 1 kHz?
fb = log_mel_filterbank(frames)
print("peak band per frame:", set(np.argmax(fb, axis=1).tolist()))
print("filter centres (Hz) around it:", np.round(np.fft.rfftfreq(512, 1 / sr)[mel_filterbank()[12:15].argmax(axis=1)]))

# autocorrelation pitch tracks a 200 Hz voice-like tone
f0 = pitch_features(0.5 * np.sin(2 * np.pi * 200.0 * t))
print("f0 range: %.1f..%.1f Hz, mean voicing %.2f" % (f0[:, 0].min(), f0[:, 0].max(), f0[:, 1].mean()))

# full 43-d feature rows, and the silence row used for masking
feats = extract_features(tone)
print("features:", feats.shape)
print("silence row:", silence_vector()[:3], "...", silence_vector()[-3:])
