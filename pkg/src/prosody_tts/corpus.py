"""Corpus files: MELB mel containers, sidecars, the manifest, and the
synthetic toy corpus.

MELB layout (little endian)::

    b"MELB0001" | u32 frames | u32 channels (= 80) | float32[frames * channels]

Prosody targets use the same layout with magic ``b"PRSD0001"`` and any
column count.  Duration sidecars are one line of space-separated integers.

The manifest is UTF-8 JSON lines: a ``{"kind": "corpus", ...}`` header,
then one ``{"kind": "utterance", ...}`` record per utterance with paths
relative to the manifest's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvariantError
from .features import N_MELS, PhonemeSequence

MELB_MAGIC = b"MELB0001"
PROSODY_MAGIC = b"PRSD0001"
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<8sII")


def _write_matrix(path, values, magic: bytes) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise FormatError(f"{path}: expected a 2-D matrix, got shape {values.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, values.shape[0], values.shape[1]))
        fh.write(values.tobytes())


def _read_matrix(path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    found, rows, cols = _HEADER.unpack_from(raw)
    if found != magic:
        raise FormatError(f"{path}: bad magic {found!r}, expected {magic!r}")
    payload = raw[_HEADER.size:]
    if len(payload) != rows * cols * 4:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header implies {rows * cols * 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)


def write_melb(path, mel) -> None:
    values = np.asarray(getattr(mel, "values", mel))
    if values.ndim != 2 or values.shape[1] != N_MELS:
        raise FormatError(f"{path}: MELB needs frames x {N_MELS}, got {values.shape}")
    _write_matrix(path, values, MELB_MAGIC)


def read_melb(path) -> np.ndarray:
    values = _read_matrix(path, MELB_MAGIC)
    if values.shape[1] != N_MELS:
        raise FormatError(f"{path}: MELB has {values.shape[1]} channels, expected {N_MELS}")
    return values


def write_prosody(path, rep) -> None:
    _write_matrix(path, np.asarray(getattr(rep, "data", rep)), PROSODY_MAGIC)


def read_prosody(path) -> np.ndarray:
    return _read_matrix(path, PROSODY_MAGIC)


def write_durations(path, durations) -> None:
    d = np.asarray(getattr(durations, "durations", durations), dtype=np.int64)
    Path(path).write_text(" ".join(str(int(x)) for x in d) + "\n", encoding="utf-8")


def read_durations(path) -> np.ndarray:
    try:
        return np.array([int(tok) for tok in Path(path).read_text(encoding="utf-8").split()], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: durations must be integers ({exc})") from None


@dataclass
class Utterance:
    id: str
    phonemes: PhonemeSequence
    mel: np.ndarray
    split: str = "train"
    text: str = ""
    gt_durations: np.ndarray | None = None
    durations: np.ndarray | None = None
    prosody: np.ndarray | None = None

    @property
    def frames(self) -> int:
        return self.mel.shape[0]


@dataclass
class Corpus:
    utterances: list[Utterance]
    inventory_size: int
    mode: str = "toy"
    lexicon: dict[str, int] | None = None
    root: Path | None = None
    records: list[dict] = field(default_factory=list)

    def split(self, name: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == name]

    @property
    def train(self) -> list[Utterance]:
        return self.split("train")

    @property
    def test(self) -> list[Utterance]:
        return self.split("test")


def split_counts(total: int, fraction: float) -> tuple[int, int]:
    """Train/test sizes: round(total * fraction), clamped so training is never empty
    and one test item is left when total >= 2."""
    if not 0.0 < fraction <= 1.0:
        raise InvariantError(f"split fraction must be in (0, 1], got {fraction}")
    n_train = min(max(int(round(total * fraction)), 1), total)
    if total >= 2:
        n_train = min(n_train, total - 1)
    return n_train, total - n_train


def assign_splits(ids: list[str], fraction: float, seed: int) -> dict[str, str]:
    n_train, _ = split_counts(len(ids), fraction)
    order = np.random.default_rng(seed).permutation(len(ids))
    train = {ids[i] for i in order[:n_train]}
    return {i: ("train" if i in train else "test") for i in ids}


# ----------------------------------------------------------------- manifest

def write_manifest(path, corpus: Corpus) -> None:
    """Write the manifest and every sidecar the utterances carry."""
    path = Path(path)
    root = path.parent
    for sub in ("mels", "durations", "prosody"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    header = {"kind": "corpus", "version": MANIFEST_VERSION, "mode": corpus.mode,
              "inventory_size": corpus.inventory_size, "n_mels": N_MELS}
    if corpus.lexicon is not None:
        header["lexicon"] = corpus.lexicon
    lines = [json.dumps(header, sort_keys=True)]
    for utt in corpus.utterances:
        mel_rel = f"mels/{utt.id}.melb"
        write_melb(root / mel_rel, utt.mel)
        record = {"kind": "utterance", "id": utt.id, "split": utt.split, "text": utt.text,
                  "phonemes": utt.phonemes.ids, "words": utt.phonemes.words,
                  "spans": utt.phonemes.spans, "mel": mel_rel,
                  "durations": None, "gt_durations": None, "prosody": None}
        if utt.gt_durations is not None:
            record["gt_durations"] = f"durations/{utt.id}.gt.dur"
            write_durations(root / record["gt_durations"], utt.gt_durations)
        if utt.durations is not None:
            record["durations"] = f"durations/{utt.id}.dur"
            write_durations(root / record["durations"], utt.durations)
        if utt.prosody is not None:
            record["prosody"] = f"prosody/{utt.id}.prsd"
            write_prosody(root / record["prosody"], utt.prosody)
        lines.append(json.dumps(record, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> Corpus:
    """Load and validate a manifest; raises on the first bad file or field."""
    path = Path(path)
    root = path.parent
    try:
        lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    except OSError as exc:
        raise FormatError(f"{path}: cannot read manifest ({exc})") from None
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    try:
        records = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON line ({exc})") from None
    header, body = records[0], records[1:]
    if header.get("kind") != "corpus":
        raise FormatError(f"{path}: first record must be the corpus header")
    if header.get("n_mels", N_MELS) != N_MELS:
        raise FormatError(f"{path}: header n_mels={header.get('n_mels')}, expected {N_MELS}")
    inventory = int(header["inventory_size"])
    utterances = []
    for rec in body:
        uid = rec.get("id", "?")
        where = f"{path} utterance {uid}"
        for key in ("id", "phonemes", "spans", "mel"):
            if key not in rec:
                raise FormatError(f"{where}: missing field {key!r}")
        try:
            phonemes = PhonemeSequence(rec["phonemes"], inventory, list(rec.get("words") or []),
                                       list(rec["spans"]))
        except InvariantError as exc:
            raise InvariantError(f"{where}: {exc}") from None

        def sidecar(key, reader, required=False):
            rel = rec.get(key)
            if rel is None:
                if required:
                    raise FormatError(f"{where}: missing field {key!r}")
                return None
            file = root / rel
            if not file.exists():
                raise FormatError(f"{where}: field {key!r} references missing file {file}")
            return reader(file)

        mel = sidecar("mel", read_melb, required=True)
        utt = Utterance(id=uid, phonemes=phonemes, mel=mel, split=rec.get("split", "train"),
                        text=rec.get("text", ""), gt_durations=sidecar("gt_durations", read_durations),
                        durations=sidecar("durations", read_durations), prosody=sidecar("prosody", read_prosody))
        for key in ("gt_durations", "durations"):
            d = getattr(utt, key)
            if d is not None and (d.size != len(phonemes) or int(d.sum()) != utt.frames or (d < 1).any()):
                raise InvariantError(f"{where}: field {key!r} is not a valid alignment of "
                                     f"{len(phonemes)} phonemes to {utt.frames} frames")
        if utt.prosody is not None and utt.prosody.shape[0] != len(phonemes):
            raise InvariantError(f"{where}: prosody has {utt.prosody.shape[0]} rows for {len(phonemes)} phonemes")
        if len(phonemes) > utt.frames:
            raise InvariantError(f"{where}: {len(phonemes)} phonemes but only {utt.frames} frames")
        utterances.append(utt)
    return Corpus(utterances, inventory, header.get("mode", "toy"), header.get("lexicon"), root, body)


# ------------------------------------------------------------- toy corpus

TOY_INVENTORY = 10
PITCH_DEPTH = 0.2
_CHANNELS = np.arange(N_MELS)


def phoneme_template(pid: int) -> np.ndarray:
    """Fixed two-peak spectral shape for a toy phoneme id.

    Peaks sit on a grid of 8 channels, so ids 0..9 never share a peak.
    """
    rng = np.random.default_rng(10_000 + pid)
    c1 = (4 + 8 * pid) % N_MELS
    c2 = (c1 + 36) % N_MELS
    shape = (0.1 + 0.1 * rng.random()
             + (0.6 + 0.4 * rng.random()) * np.exp(-0.5 * ((_CHANNELS - c1) / 3.0) ** 2)
             + (0.4 + 0.4 * rng.random()) * np.exp(-0.5 * ((_CHANNELS - c2) / 4.0) ** 2))
    return shape.astype(np.float32)


def pitch_pattern() -> np.ndarray:
    """Channel pattern scaled by the per-phoneme pitch value."""
    return np.sin(2.0 * np.pi * _CHANNELS / 20.0).astype(np.float32)


def toy_utterance(uid: str, rng: np.random.Generator, inventory: int = TOY_INVENTORY,
                  min_phonemes: int = 5, max_phonemes: int = 9) -> Utterance:
    m = int(rng.integers(min_phonemes, max_phonemes + 1))
    ids = [int(rng.integers(inventory))]
    while len(ids) < m:
        nxt = int(rng.integers(inventory - 1))
        ids.append(nxt if nxt < ids[-1] else nxt + 1)  # no immediate repeats
    durations = np.array([max(2, 3 + pid % 4 + int(rng.integers(-1, 2))) for pid in ids], dtype=np.int64)
    pitch = np.empty(m)
    pitch[0] = rng.uniform(-1.0, 1.0)
    for i in range(1, m):
        pitch[i] = np.clip(pitch[i - 1] + rng.normal(0.0, 0.5), -1.0, 1.0)
    rows = [phoneme_template(pid) + PITCH_DEPTH * p * pitch_pattern() for pid, p in zip(ids, pitch)]
    mel = np.repeat(np.stack(rows), durations, axis=0).astype(np.float32)
    spans, left = [], m
    while left:
        take = min(left, int(rng.integers(1, 4)))
        spans.append(take)
        left -= take
    words, pos = [], 0
    for s in spans:
        words.append(".".join(str(i) for i in ids[pos:pos + s]))
        pos += s
    phonemes = PhonemeSequence(ids, inventory, words, spans)
    return Utterance(uid, phonemes, mel, text=" ".join(words), gt_durations=durations)


def synthetic_corpus(count: int = 12, seed: int = 7, split: float = 0.98,
                     inventory: int = TOY_INVENTORY) -> Corpus:
    """Deterministic toy corpus; ground-truth durations are kept for oracle checks."""
    rng = np.random.default_rng(seed)
    utts = [toy_utterance(f"toy{i:04d}", rng, inventory) for i in range(count)]
    splits = assign_splits([u.id for u in utts], split, seed)
    for u in utts:
        u.split = splits[u.id]
    return Corpus(utts, inventory, mode="toy")
