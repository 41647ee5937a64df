"""Log-mel feature extraction and the text frontend.

Analysis parameters: 22050 Hz audio, 1024-point FFT over a 1024-sample
periodic Hann window, hop 256, and 80 triangular mel filters (HTK mel
scale) spanning 60 Hz to 7.6 kHz.  Frames are centred with reflection
padding, so a signal of L samples yields ``1 + L // 256`` frames.
"""

from __future__ import annotations

import re
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FrontendError, InputError, InvariantError

SAMPLE_RATE = 22050
N_FFT = 1024
WIN_LENGTH = 1024
HOP_LENGTH = 256
N_MELS = 80
F_MIN = 60.0
F_MAX = 7600.0
LOG_FLOOR = 1e-5


@dataclass
class MelSpectrogram:
    """Log-mel magnitudes, frames x 80."""

    values: np.ndarray
    sample_rate: int = SAMPLE_RATE
    hop: int = HOP_LENGTH

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[1] != N_MELS:
            raise InvariantError(f"mel spectrogram must be frames x {N_MELS}, got {self.values.shape}")
        if self.values.shape[0] < 1:
            raise InvariantError("mel spectrogram has no frames")
        if not np.all(np.isfinite(self.values)):
            raise InvariantError("mel spectrogram contains non-finite values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]


def hann_window(length: int = WIN_LENGTH) -> np.ndarray:
    """Periodic Hann window (the FFT-analysis variant)."""
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def frame_count(num_samples: int, hop: int = HOP_LENGTH) -> int:
    return 1 + num_samples // hop


def _check_rate(sample_rate: int) -> None:
    if sample_rate != SAMPLE_RATE:
        raise InputError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz")


def stft(wav, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Complex STFT, shape (frames, N_FFT // 2 + 1)."""
    _check_rate(sample_rate)
    wav = np.asarray(wav, dtype=np.float64)
    if wav.ndim != 1:
        raise InputError(f"expected mono samples, got array of shape {wav.shape}")
    if wav.size == 0:
        raise InputError("cannot analyse an empty signal")
    pad = N_FFT // 2
    # reflection needs more samples than the pad width; very short clips fall back to zeros
    mode = "reflect" if wav.size > pad else "constant"
    padded = np.pad(wav, pad, mode=mode)
    frames = np.lib.stride_tricks.sliding_window_view(padded, N_FFT)[::HOP_LENGTH]
    return np.fft.rfft(frames * hann_window(WIN_LENGTH), n=N_FFT, axis=-1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    """Triangular filters (peak 1) on FFT bins, shape (n_mels, n_fft // 2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (centre - lower)
    falling = (upper - bins[None, :]) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling)).astype(np.float32)


_FILTERBANK = None


def wav_to_mel(wav, sample_rate: int = SAMPLE_RATE) -> MelSpectrogram:
    global _FILTERBANK
    if _FILTERBANK is None:
        _FILTERBANK = mel_filterbank().astype(np.float64)
    magnitude = np.abs(stft(wav, sample_rate))
    mel = np.log(np.maximum(magnitude @ _FILTERBANK.T, LOG_FLOOR))
    return MelSpectrogram(mel.astype(np.float32), sample_rate, HOP_LENGTH)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read 16-bit PCM mono RIFF audio as floats in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise InputError(f"{path}: unreadable WAV ({exc})") from exc
    if channels != 1 or width != 2:
        raise InputError(f"{path}: need 16-bit mono PCM, got {channels} channel(s) of {8 * width}-bit")
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0, rate


def write_wav(path, samples, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


# ------------------------------------------------------------------ frontend

@dataclass
class PhonemeSequence:
    ids: list[int]
    inventory_size: int
    words: list[str] = field(default_factory=list)
    spans: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.ids = [int(i) for i in self.ids]
        if not self.ids:
            raise InvariantError("phoneme sequence is empty")
        bad = [i for i in self.ids if not 0 <= i < self.inventory_size]
        if bad:
            raise InvariantError(f"phoneme ids {bad} outside inventory of size {self.inventory_size}")
        if self.spans and sum(self.spans) != len(self.ids):
            raise InvariantError(f"word spans sum to {sum(self.spans)} but there are {len(self.ids)} phonemes")

    def __len__(self) -> int:
        return len(self.ids)


_RHYTHM_MARK = re.compile(r"#[1-4]")

ENGLISH_SYMBOLS = " abcdefghijklmnopqrstuvwxyz'.,?!-"


def english_lexicon(extra: str = "") -> dict[str, int]:
    return {ch: i for i, ch in enumerate(dict.fromkeys(ENGLISH_SYMBOLS + extra))}


def normalize_text(text: str) -> str:
    """Replace rhythm-boundary marks #1..#4 by spaces and collapse whitespace."""
    return " ".join(_RHYTHM_MARK.sub(" ", text).split())


def text_to_phonemes(text: str, lexicon: dict[str, int] | None = None,
                     inventory_size: int | None = None) -> PhonemeSequence:
    """Map text to phoneme ids.

    With a ``lexicon`` each lowercase character (space included) is looked
    up; every whitespace-delimited chunk is a word and the separating space
    belongs to the word before it.  Without a lexicon the text is a toy
    transcript: words separated by spaces, each word a ``.``-joined list of
    integer ids, e.g. ``"3.1 4.2.5"``.
    """
    norm = normalize_text(text)
    if not norm:
        raise FrontendError("text is empty after normalization")
    words = norm.split(" ")
    if lexicon is None:
        ids, spans = [], []
        for word in words:
            try:
                parts = [int(tok) for tok in word.split(".")]
            except ValueError:
                raise FrontendError(f"toy transcript word {word!r} is not a '.'-joined id list") from None
            ids.extend(parts)
            spans.append(len(parts))
        size = inventory_size if inventory_size is not None else max(ids) + 1
        if any(i < 0 or i >= size for i in ids):
            raise FrontendError(f"toy ids {sorted({i for i in ids if i < 0 or i >= size})} outside inventory {size}")
        return PhonemeSequence(ids, size, words, spans)

    norm = norm.lower()
    unknown = sorted({ch for ch in norm if ch not in lexicon})
    if unknown:
        raise FrontendError(f"symbols not in lexicon: {unknown}")
    ids = [lexicon[ch] for ch in norm]
    spans = [len(w) + 1 for w in words]
    spans[-1] -= 1
    size = inventory_size if inventory_size is not None else max(lexicon.values()) + 1
    return PhonemeSequence(ids, size, words, spans)
