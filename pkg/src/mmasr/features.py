"""Acoustic front-end: log-mel filterbank plus a 3-d pitch track.

Frames are 25 ms long with a 10 ms shift (400/160 samples at 16 kHz).
Frame ``t`` covers samples ``[160 t, 160 t + 400)``.

Feature files use a small binary layout::

    b"MMFB" | uint32 rows | uint32 cols | rows*cols float32   (little-endian, row-major)

or whitespace-delimited text, one frame per line.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
FRAME_LEN_S = 0.025
FRAME_SHIFT_S = 0.010
N_FFT = 512
N_MELS = 40
FMIN, FMAX = 20.0, 8000.0
LOG_FLOOR = 1e-10
PITCH_FMIN, PITCH_FMAX = 60.0, 400.0
FEATURE_MAGIC = b"MMFB"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.isfinite(self.samples).all():
            raise ValueError("waveform contains non-finite samples")


def _samples(wave) -> tuple[np.ndarray, int]:
    if isinstance(wave, Waveform):
        return wave.samples, wave.sample_rate
    return np.asarray(wave, dtype=np.float64), SAMPLE_RATE


def frame_count(n_samples: int, sample_rate: int = SAMPLE_RATE) -> int:
    win = int(round(FRAME_LEN_S * sample_rate))
    hop = int(round(FRAME_SHIFT_S * sample_rate))
    if n_samples < win:
        return 0
    return 1 + (n_samples - win) // hop


def frame_signal(wave, window_s: float = FRAME_LEN_S, shift_s: float = FRAME_SHIFT_S, window: bool = True) -> np.ndarray:
    """Cut a waveform into overlapping (optionally Hamming-windowed) frames.

    Returns:
        (T, win) array with ``T = 1 + (N - win) // hop``.
    """
    x, sr = _samples(wave)
    win = int(round(window_s * sr))
    hop = int(round(shift_s * sr))
    if len(x) < win:
        raise ValueError(f"utterance too short: {len(x)} samples < one {win}-sample window")
    n = 1 + (len(x) - win) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n].copy()
    if window:
        frames *= np.hamming(win)
    return frames


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular filters on the mel scale, shape (n_mels, n_fft//2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def log_mel_filterbank(frames: np.ndarray, n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Natural-log mel energies of windowed frames, floored at 1e-10."""
    spec = np.abs(np.fft.rfft(frames, n=N_FFT, axis=-1)) ** 2
    energies = spec @ mel_filterbank(n_mels, N_FFT, sample_rate).T
    return np.log(np.maximum(energies, LOG_FLOOR))


def _frame_pitch(frame: np.ndarray, sample_rate: int) -> tuple[float, float]:
    x = frame - frame.mean()
    if np.dot(x, x) < 1e-12:
        return 0.0, 0.0
    lag_min = int(np.floor(sample_rate / PITCH_FMAX))
    lag_max = min(int(np.ceil(sample_rate / PITCH_FMIN)), len(x) - 2)
    lags = np.arange(lag_min, lag_max + 1)
    r = np.empty(len(lags))
    for j, lag in enumerate(lags):
        a, b = x[:-lag], x[lag:]
        denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
        r[j] = np.dot(a, b) / denom if denom > 0 else 0.0
    peak = r.max()
    if peak <= 0:
        return 0.0, 0.0
    # earliest local maximum close to the global peak, which avoids
    # locking onto sub-harmonics (2x, 3x the true period)
    best = int(np.argmax(r))
    for j in range(1, len(r) - 1):
        if r[j] >= 0.9 * peak and r[j] >= r[j - 1] and r[j] >= r[j + 1]:
            best = j
            break
    lag = float(lags[best])
    if 0 < best < len(r) - 1:
        y0, y1, y2 = r[best - 1], r[best], r[best + 1]
        curv = y0 - 2 * y1 + y2
        if curv < 0:
            lag += 0.5 * (y0 - y2) / curv
    return sample_rate / lag, float(np.clip(r[best], 0.0, 1.0))


def pitch_features(wave, voicing_threshold: float = 0.0) -> np.ndarray:
    """Per-frame (f0 Hz, voicing score, delta f0) by normalised autocorrelation.

    The f0 search covers 60-400 Hz. Frames without energy report f0 = 0 and
    voicing 0; frames whose voicing falls below ``voicing_threshold`` also
    report f0 = 0.
    """
    x, sr = _samples(wave)
    frames = frame_signal(Waveform(x, sr), window=False)
    out = np.zeros((len(frames), 3))
    for t, fr in enumerate(frames):
        f0, voicing = _frame_pitch(fr, sr)
        if voicing < voicing_threshold:
            f0 = 0.0
        out[t, 0], out[t, 1] = f0, voicing
    out[1:, 2] = np.diff(out[:, 0])
    return out


def extract_features(wave, pitch: bool = True) -> np.ndarray:
    """(T, 43) filterbank + pitch features, or (T, 40) with ``pitch=False``."""
    x, sr = _samples(wave)
    fbank = log_mel_filterbank(frame_signal(Waveform(x, sr)), sample_rate=sr)
    if not pitch:
        return fbank
    return np.concatenate([fbank, pitch_features(Waveform(x, sr))], axis=1)


def silence_vector(pitch: bool = True) -> np.ndarray:
    """Feature row of an all-zero waveform: the canonical masking value."""
    row = np.full(N_MELS, np.log(LOG_FLOOR))
    if not pitch:
        return row
    return np.concatenate([row, np.zeros(3)])


def normalize_utterance(feats: np.ndarray) -> np.ndarray:
    """Per-utterance mean/variance normalisation (off by default in pipelines)."""
    mu = feats.mean(axis=0, keepdims=True)
    sd = feats.std(axis=0, keepdims=True)
    return (feats - mu) / np.maximum(sd, 1e-8)


# ---------------------------------------------------------------------------
# file IO


def write_feature_file(path, matrix: np.ndarray) -> None:
    """Binary (float32) by default; a ``.txt`` suffix writes full-precision text."""
    path = Path(path)
    if path.suffix == ".txt":
        np.savetxt(path, np.atleast_2d(np.asarray(matrix, dtype=np.float64)), fmt="%.17g")
        return
    m = np.atleast_2d(np.asarray(matrix, dtype="<f4"))
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", *m.shape))
        fh.write(np.ascontiguousarray(m).tobytes())


def read_feature_file(path) -> np.ndarray:
    """Read a binary or text feature matrix as float64 (rows, cols)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == FEATURE_MAGIC:
            rows, cols = struct.unpack("<II", fh.read(8))
            data = np.frombuffer(fh.read(), dtype="<f4")
            if data.size != rows * cols:
                raise ValueError(f"{path}: expected {rows * cols} values, found {data.size}")
            return data.reshape(rows, cols).astype(np.float64)
    return np.atleast_2d(np.loadtxt(path, dtype=np.float64, ndmin=2))


def read_wav(path) -> Waveform:
    """16-bit PCM (or float) mono WAV via scipy."""
    from scipy.io import wavfile

    sr, data = wavfile.read(path)
    data = np.asarray(data)
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64)
    return Waveform(data, int(sr))
