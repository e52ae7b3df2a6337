"""Synthetic bilingual multi-speaker corpus with ground-truth alignments.

Mels are rendered parametrically instead of being extracted from audio:

    frame = gain[s] * (energy_t * template[p] + F0_WEIGHT * f0_bump(f0_t)) + bias[s] + noise

so the phoneme identity lives in ``template`` and the speaker identity in the
affine tint ``(gain, bias)``.  Every frame of a phoneme segment shares the same
clean value; only the Gaussian noise varies inside a segment.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import AlignmentError, ConfigurationError, RegistryError

SHARED = "shared"
FRAME_SHIFT_MS = 10.0
FRAME_LENGTH_MS = 42.7
DEFAULT_N_MELS = 80

MEL_MAGIC = b"TMEL"
_MEL_HEADER = struct.Struct("<4sIII")  # magic, T_f, n_mels, reserved -> 16 bytes

F0_WEIGHT = 0.3
F0_HZ_PER_BIN = 20.0
TINT_KNOTS = 3


def frames_for_seconds(seconds: float) -> int:
    """Number of 10 ms frames covering ``seconds`` of audio."""
    return int(round(seconds * 1000.0 / FRAME_SHIFT_MS))


@dataclass(frozen=True)
class PhonemeInventory:
    symbols: tuple[str, ...]
    language_of: dict[str, str]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ConfigurationError("phoneme symbols must be unique")
        missing = [s for s in self.symbols if s not in self.language_of]
        if missing:
            raise ConfigurationError(f"phonemes without a language tag: {missing}")
        if SHARED not in {self.language_of[s] for s in self.symbols}:
            raise ConfigurationError("inventory needs at least one shared phoneme")

    def __len__(self):
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise RegistryError(f"unknown phoneme {symbol!r}") from None

    @property
    def languages(self) -> list[str]:
        tags = {self.language_of[s] for s in self.symbols} - {SHARED}
        return sorted(tags)

    def indices_for(self, language: str) -> list[int]:
        """Phonemes usable in ``language``: its private set plus the shared set."""
        return [i for i, s in enumerate(self.symbols) if self.language_of[s] in (language, SHARED)]

    def language_of_sequence(self, phonemes: Sequence[int]) -> str | None:
        tags = {self.language_of[self.symbols[p]] for p in phonemes} - {SHARED}
        if len(tags) == 1:
            return tags.pop()
        return None

    def digest(self) -> str:
        payload = json.dumps([[s, self.language_of[s]] for s in self.symbols])
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_record(self) -> dict:
        return {"symbols": list(self.symbols), "language_of": [self.language_of[s] for s in self.symbols]}

    @classmethod
    def from_record(cls, rec: dict) -> "PhonemeInventory":
        return cls(tuple(rec["symbols"]), dict(zip(rec["symbols"], rec["language_of"])))


def default_inventory(n_private: int = 12, n_shared: int = 6, languages=("L1", "L2")) -> PhonemeInventory:
    symbols, tags = [], {}
    for lang in languages:
        for i in range(n_private):
            sym = f"{lang.lower()}_{i:02d}"
            symbols.append(sym)
            tags[sym] = lang
    for i in range(n_shared):
        sym = f"x_{i:02d}"
        symbols.append(sym)
        tags[sym] = SHARED
    return PhonemeInventory(tuple(symbols), tags)


@dataclass(frozen=True)
class SpeakerSpec:
    tag: str
    language: str
    anchor: bool = False


def default_speakers() -> list[SpeakerSpec]:
    # two anchors plus a non-anchor L1 speaker with a much lower voice
    return [
        SpeakerSpec("L1-A", "L1", anchor=True),
        SpeakerSpec("L2-A", "L2", anchor=True),
        SpeakerSpec("L1-B", "L1"),
    ]


@dataclass
class MelSpectrogram:
    frames: np.ndarray
    frame_shift_ms: float = FRAME_SHIFT_MS
    frame_length_ms: float = FRAME_LENGTH_MS

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ConfigurationError(f"mel must be a non-empty T_f x n_mels matrix, got {frames.shape}")
        if not np.isfinite(frames).all():
            raise ConfigurationError("mel contains non-finite values")
        self.frames = frames

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    def to_bytes(self) -> bytes:
        header = _MEL_HEADER.pack(MEL_MAGIC, self.n_frames, self.n_mels, 0)
        return header + self.frames.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "MelSpectrogram":
        if len(data) < _MEL_HEADER.size:
            raise ConfigurationError("mel file shorter than its header")
        magic, n_frames, n_mels, _ = _MEL_HEADER.unpack_from(data)
        if magic != MEL_MAGIC:
            raise ConfigurationError(f"bad mel magic {magic!r}")
        body = data[_MEL_HEADER.size:]
        if len(body) != 4 * n_frames * n_mels:
            raise ConfigurationError("mel payload size does not match header")
        frames = np.frombuffer(body, dtype="<f4").reshape(n_frames, n_mels)
        return cls(frames.astype(np.float32))


def write_mel(path: str | Path, mel: MelSpectrogram) -> None:
    Path(path).write_bytes(mel.to_bytes())


def read_mel(path: str | Path) -> MelSpectrogram:
    return MelSpectrogram.from_bytes(Path(path).read_bytes())


@dataclass
class Utterance:
    utt_id: str
    phonemes: list[int]
    language: str
    speaker: str
    mel: MelSpectrogram
    durations: list[int]
    f0: list[float]
    energy: list[float]
    split: str = "train"

    def __post_init__(self):
        n = len(self.phonemes)
        if not (len(self.durations) == len(self.f0) == len(self.energy) == n) or n == 0:
            raise AlignmentError(f"{self.utt_id}: per-phoneme sequences disagree in length")
        if min(self.durations) < 1:
            raise AlignmentError(f"{self.utt_id}: durations must be >= 1")
        if sum(self.durations) != self.mel.n_frames:
            raise AlignmentError(
                f"{self.utt_id}: durations sum to {sum(self.durations)}, mel has {self.mel.n_frames} frames"
            )

    @property
    def n_phonemes(self) -> int:
        return len(self.phonemes)

    def record(self, mel_path: str) -> dict:
        return {
            "utt_id": self.utt_id,
            "phonemes": list(self.phonemes),
            "language": self.language,
            "speaker": self.speaker,
            "durations": list(self.durations),
            "f0": [float(v) for v in self.f0],
            "energy": [float(v) for v in self.energy],
            "split": self.split,
            "mel": mel_path,
        }


@dataclass
class CorpusManifest:
    utterances: list[Utterance]
    speakers: list[tuple[str, str]]
    anchor_speaker_of: dict[str, str]
    inventory: PhonemeInventory
    seed: int
    n_mels: int = DEFAULT_N_MELS
    noise_std: float = 0.05

    def __post_init__(self):
        langs = {lang for _, lang in self.speakers}
        for lang in langs:
            anchor = self.anchor_speaker_of.get(lang)
            if anchor is None:
                raise ConfigurationError(f"language {lang} has no anchor speaker")
            if self.native_language(anchor) != lang:
                raise ConfigurationError(f"anchor {anchor} is not native to {lang}")
        tags = set(self.speaker_tags)
        for u in self.utterances:
            if u.speaker not in tags or u.language not in langs:
                raise RegistryError(f"{u.utt_id}: unregistered speaker or language")

    @property
    def speaker_tags(self) -> list[str]:
        return [tag for tag, _ in self.speakers]

    @property
    def languages(self) -> list[str]:
        return sorted({lang for _, lang in self.speakers})

    def speaker_index(self, tag: str) -> int:
        for i, (t, _) in enumerate(self.speakers):
            if t == tag:
                return i
        raise RegistryError(f"unknown speaker {tag!r}")

    def native_language(self, tag: str) -> str:
        for t, lang in self.speakers:
            if t == tag:
                return lang
        raise RegistryError(f"unknown speaker {tag!r}")

    def split(self, name: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == name]

    def by_id(self) -> dict[str, Utterance]:
        return {u.utt_id: u for u in self.utterances}

    def header_record(self) -> dict:
        return {
            "kind": "header",
            "seed": self.seed,
            "n_mels": self.n_mels,
            "noise_std": self.noise_std,
            "speakers": [list(s) for s in self.speakers],
            "anchor_speaker_of": dict(sorted(self.anchor_speaker_of.items())),
            "inventory": self.inventory.to_record(),
        }


def save_manifest(manifest: CorpusManifest, out_dir: str | Path) -> Path:
    """Write ``corpus.jsonl`` plus one ``.mel`` file per utterance under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "mels").mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(manifest.header_record(), sort_keys=True)]
    for u in manifest.utterances:
        rel = f"mels/{u.utt_id}.mel"
        write_mel(out_dir / rel, u.mel)
        lines.append(json.dumps({"kind": "utterance", **u.record(rel)}, sort_keys=True))
    path = out_dir / "corpus.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def load_manifest(path: str | Path) -> CorpusManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "corpus.jsonl"
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    if not records or records[0].get("kind") != "header":
        raise ConfigurationError(f"{path}: missing header record")
    head = records[0]
    utts = []
    for rec in records[1:]:
        mel = read_mel(path.parent / rec["mel"])
        utts.append(
            Utterance(
                rec["utt_id"], rec["phonemes"], rec["language"], rec["speaker"], mel,
                rec["durations"], rec["f0"], rec["energy"], rec.get("split", "train"),
            )
        )
    return CorpusManifest(
        utterances=utts,
        speakers=[tuple(s) for s in head["speakers"]],
        anchor_speaker_of=head["anchor_speaker_of"],
        inventory=PhonemeInventory.from_record(head["inventory"]),
        seed=head["seed"],
        n_mels=head["n_mels"],
        noise_std=head["noise_std"],
    )


def _smooth_curve(rng: np.random.Generator, n: int, n_knots: int | None = None) -> np.ndarray:
    n_knots = n_knots or TINT_KNOTS
    knots = rng.uniform(-1.0, 1.0, size=n_knots)
    return np.interp(np.linspace(0, n_knots - 1, n), np.arange(n_knots), knots)


def _bump(n_mels: int, center: float, width: float) -> np.ndarray:
    k = np.arange(n_mels, dtype=np.float64)
    return np.exp(-0.5 * ((k - center) / width) ** 2)


class ToyGenerator:
    """Fixed per-phoneme and per-speaker parameters drawn from ``seed``.

    ``templates[p]`` is a two-bump spectral envelope; ``gain[s]`` and ``bias[s]``
    form the speaker tint.  ``render`` turns a phoneme sequence into an
    :class:`Utterance` using an independent per-utterance stream.
    """

    def __init__(self, inventory: PhonemeInventory, speakers: Sequence[SpeakerSpec], seed: int,
                 n_mels: int = DEFAULT_N_MELS, noise_std: float = 0.05):
        self.inventory = inventory
        self.speakers = list(speakers)
        self.seed = seed
        self.n_mels = n_mels
        self.noise_std = noise_std
        rng = np.random.default_rng([seed, 0])
        n_ph = len(inventory)
        self.templates = np.zeros((n_ph, n_mels))
        for p in range(n_ph):
            c1 = rng.uniform(0.08, 0.45) * n_mels
            c2 = rng.uniform(0.5, 0.92) * n_mels
            w1, w2 = rng.uniform(0.03, 0.08, size=2) * n_mels
            a1, a2 = rng.uniform(0.6, 1.3, size=2)
            self.templates[p] = a1 * _bump(n_mels, c1, w1) + a2 * _bump(n_mels, c2, w2)
        self.base_duration = rng.uniform(2.0, 6.0, size=n_ph)
        self.f0_offset = rng.uniform(-0.1, 0.1, size=n_ph)
        self.base_energy = rng.uniform(0.7, 1.3, size=n_ph)

        n_spk = len(self.speakers)
        self.gain = np.zeros((n_spk, n_mels))
        self.bias = np.zeros((n_spk, n_mels))
        self.tempo = np.zeros(n_spk)
        self.loudness = np.zeros(n_spk)
        self.base_f0 = np.zeros(n_spk)
        for s in range(n_spk):
            self.gain[s] = 1.0 + 0.35 * _smooth_curve(rng, n_mels)
            self.bias[s] = 0.2 * _smooth_curve(rng, n_mels)
            self.loudness[s] = rng.uniform(0.85, 1.15)
        # tempo and pitch spread fixed by speaker position so cross-speaker contrasts are guaranteed
        tempos = [1.0, 0.8, 1.3]
        f0s = [220.0, 200.0, 115.0]
        for s in range(n_spk):
            self.tempo[s] = tempos[s % 3]
            self.base_f0[s] = f0s[s % 3] * (1.0 + 0.05 * (s // 3))

    def speaker_position(self, tag: str) -> int:
        for i, spk in enumerate(self.speakers):
            if spk.tag == tag:
                return i
        raise RegistryError(f"unknown speaker {tag!r}")

    def f0_bump(self, f0_hz: float) -> np.ndarray:
        return _bump(self.n_mels, f0_hz / F0_HZ_PER_BIN, 1.5)

    def clean_frame(self, phoneme: int, speaker: int, f0_hz: float, energy: float) -> np.ndarray:
        content = energy * self.templates[phoneme] + F0_WEIGHT * self.f0_bump(f0_hz)
        return self.gain[speaker] * content + self.bias[speaker]

    def prosody(self, phonemes: Sequence[int], speaker: int, rng: np.random.Generator):
        """Durations, f0 and energy per phoneme for ``speaker``."""
        ph = np.asarray(phonemes)
        raw = self.base_duration[ph] * self.tempo[speaker] + rng.normal(0.0, 0.4, size=len(ph))
        durations = np.maximum(1, np.rint(raw)).astype(int)
        f0 = self.base_f0[speaker] * (1.0 + self.f0_offset[ph]) + rng.normal(0.0, 2.0, size=len(ph))
        energy = self.base_energy[ph] * self.loudness[speaker] * (1.0 + rng.normal(0.0, 0.02, size=len(ph)))
        return durations, f0, np.maximum(energy, 0.0)

    def render(self, utt_id: str, phonemes: Sequence[int], speaker_tag: str, language: str,
               rng: np.random.Generator, split: str = "train") -> Utterance:
        s = self.speaker_position(speaker_tag)
        durations, f0, energy = self.prosody(phonemes, s, rng)
        rows = [np.tile(self.clean_frame(p, s, f, e), (d, 1)) for p, d, f, e in zip(phonemes, durations, f0, energy)]
        clean = np.concatenate(rows, axis=0)
        frames = clean + rng.normal(0.0, self.noise_std, size=clean.shape)
        return Utterance(
            utt_id, [int(p) for p in phonemes], language, speaker_tag,
            MelSpectrogram(frames.astype(np.float32)), [int(d) for d in durations],
            [float(v) for v in f0], [float(v) for v in energy], split,
        )


def generate_toy_corpus(n_utts_per_speaker: int, inventory: PhonemeInventory | None = None,
                        speakers: Sequence[SpeakerSpec] | None = None, seed: int = 0,
                        n_mels: int = DEFAULT_N_MELS, noise_std: float = 0.05,
                        test_fraction: float = 0.1, length_range: tuple[int, int] = (5, 20)) -> CorpusManifest:
    """Render ``n_utts_per_speaker`` monolingual utterances for every speaker."""
    if n_utts_per_speaker < 1:
        raise ConfigurationError("n_utts_per_speaker must be >= 1")
    inventory = inventory or default_inventory()
    speakers = list(speakers or default_speakers())
    langs = sorted({s.language for s in speakers})
    if len(langs) < 2:
        raise ConfigurationError("the corpus needs at least two languages")
    if len(speakers) < 3:
        raise ConfigurationError("the corpus needs at least three speakers")
    for lang in inventory.languages:
        if lang not in langs:
            raise ConfigurationError(f"language {lang} has no speakers")
    anchors: dict[str, str] = {}
    for spk in speakers:
        if spk.language not in inventory.languages:
            raise ConfigurationError(f"speaker {spk.tag}: language {spk.language} not in inventory")
        if spk.anchor:
            if spk.language in anchors:
                raise ConfigurationError(f"language {spk.language} has two anchor speakers")
            anchors[spk.language] = spk.tag
    for spk in speakers:
        anchors.setdefault(spk.language, spk.tag)

    gen = ToyGenerator(inventory, speakers, seed, n_mels, noise_std)
    lo, hi = length_range
    n_test = int(round(test_fraction * n_utts_per_speaker)) if n_utts_per_speaker > 1 else 0
    utts = []
    for s, spk in enumerate(speakers):
        pool = inventory.indices_for(spk.language)
        for k in range(n_utts_per_speaker):
            rng = np.random.default_rng([seed, 1, s, k])
            length = int(rng.integers(lo, hi + 1))
            phonemes = rng.choice(pool, size=length)
            split = "test" if k >= n_utts_per_speaker - n_test else "train"
            utts.append(gen.render(f"{spk.tag}_{k:04d}", phonemes, spk.tag, spk.language, rng, split))
    return CorpusManifest(
        utterances=utts,
        speakers=[(s.tag, s.language) for s in speakers],
        anchor_speaker_of=anchors,
        inventory=inventory,
        seed=seed,
        n_mels=n_mels,
        noise_std=noise_std,
    )


def generator_for(manifest: CorpusManifest) -> ToyGenerator:
    """Rebuild the generator that produced ``manifest``."""
    anchors = set(manifest.anchor_speaker_of.values())
    specs = [SpeakerSpec(tag, lang, tag in anchors) for tag, lang in manifest.speakers]
    return ToyGenerator(manifest.inventory, specs, manifest.seed, manifest.n_mels, manifest.noise_std)


def segment_mel(mel, durations: Sequence[int]) -> list:
    """Split ``mel`` (frames first) into consecutive per-phoneme segments."""
    frames = mel.frames if isinstance(mel, MelSpectrogram) else mel
    durations = [int(d) for d in durations]
    if any(d < 1 for d in durations):
        raise AlignmentError("zero or negative duration")
    if sum(durations) != frames.shape[0]:
        raise AlignmentError(f"durations sum to {sum(durations)} but mel has {frames.shape[0]} frames")
    out, start = [], 0
    for d in durations:
        out.append(frames[start:start + d])
        start += d
    return out


@dataclass
class Batch:
    """Padded tensors for a list of utterances; masks mark valid positions."""

    utts: list[Utterance]
    phonemes: torch.Tensor      # (B, T_ph) long
    phoneme_mask: torch.Tensor  # (B, T_ph) bool
    durations: torch.Tensor     # (B, T_ph) long, 0 on padding
    f0: torch.Tensor            # (B, T_ph)
    energy: torch.Tensor        # (B, T_ph)
    mel: torch.Tensor           # (B, T_f, n_mels)
    frame_mask: torch.Tensor    # (B, T_f) bool
    speakers: torch.Tensor      # (B,) long
    speaker_tags: list[str] = field(default_factory=list)
    languages: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.utts)

    @property
    def phoneme_lengths(self) -> torch.Tensor:
        return self.phoneme_mask.sum(1)

    @property
    def frame_lengths(self) -> torch.Tensor:
        return self.frame_mask.sum(1)

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(self.utts, self.phonemes, self.phoneme_mask, self.durations, self.f0.to(dtype),
                     self.energy.to(dtype), self.mel.to(dtype), self.frame_mask, self.speakers,
                     self.speaker_tags, self.languages)


def collate(utts: Sequence[Utterance], manifest: CorpusManifest) -> Batch:
    utts = list(utts)
    B = len(utts)
    max_ph = max(u.n_phonemes for u in utts)
    max_f = max(u.mel.n_frames for u in utts)
    n_mels = utts[0].mel.n_mels
    phonemes = torch.zeros(B, max_ph, dtype=torch.long)
    ph_mask = torch.zeros(B, max_ph, dtype=torch.bool)
    durations = torch.zeros(B, max_ph, dtype=torch.long)
    f0 = torch.zeros(B, max_ph)
    energy = torch.zeros(B, max_ph)
    mel = torch.zeros(B, max_f, n_mels)
    frame_mask = torch.zeros(B, max_f, dtype=torch.bool)
    for i, u in enumerate(utts):
        n, t = u.n_phonemes, u.mel.n_frames
        phonemes[i, :n] = torch.tensor(u.phonemes)
        ph_mask[i, :n] = True
        durations[i, :n] = torch.tensor(u.durations)
        f0[i, :n] = torch.tensor(u.f0, dtype=torch.float32)
        energy[i, :n] = torch.tensor(u.energy, dtype=torch.float32)
        mel[i, :t] = torch.from_numpy(u.mel.frames)
        frame_mask[i, :t] = True
    speakers = torch.tensor([manifest.speaker_index(u.speaker) for u in utts], dtype=torch.long)
    return Batch(utts, phonemes, ph_mask, durations, f0, energy, mel, frame_mask, speakers,
                 [u.speaker for u in utts], [u.language for u in utts])


def load_batch(manifest: CorpusManifest, batch_size: int, rng_seed: int, split: str | None = "train") -> Batch:
    """Draw ``batch_size`` utterances (without replacement when possible) and pad them."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    pool = manifest.utterances if split is None else manifest.split(split)
    if not pool:
        raise ConfigurationError(f"no utterances in split {split!r}")
    rng = np.random.default_rng(rng_seed)
    idx = rng.choice(len(pool), size=batch_size, replace=batch_size > len(pool))
    return collate([pool[i] for i in idx], manifest)
