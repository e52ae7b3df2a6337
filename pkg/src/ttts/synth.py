"""Inference and evaluation front end.

Systems:

* ``base``         -- plain free-running synthesis.
* ``base_fe``      -- same, but requires the f0/energy predictors.
* ``base_fe_dfe``  -- cross-lingual only: duration, f0 and energy predictors
  receive the native anchor speaker's embedding; the transferred f0 is
  mean/variance matched to the target speaker.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import torch

from .acoustic_model import AcousticModel, TransferConditioning
from .corpus import CorpusManifest, MelSpectrogram, PhonemeInventory, collate, write_mel
from .errors import (
    ConfigurationError,
    InputError,
    RegistryError,
    StatsError,
    TransientServiceError,
    UnsupportedOperationError,
)
from .triplet import cosine_distance
from .trainer import TripletTTS, load_checkpoint

logger = logging.getLogger(__name__)

SYSTEMS = ("base", "base_fe", "base_fe_dfe")


@dataclass(frozen=True)
class SpeakerF0Stats:
    speaker: str
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise StatsError(f"{self.speaker}: f0 standard deviation must be positive, got {self.sigma}")


def adapt_f0_linear(f0, src: SpeakerF0Stats, tgt: SpeakerF0Stats, log_domain: bool = False):
    """Map f0 from the source speaker's distribution onto the target's.

    ``f0' = (f0 - src.mu) / src.sigma * tgt.sigma + tgt.mu``.  With
    ``log_domain`` the statistics are taken to describe log-f0 and the mapping
    is applied to ``log(f0)``.
    """
    for s in (src, tgt):
        if not s.sigma > 0:
            raise StatsError(f"{s.speaker}: sigma must be positive")
    is_tensor = torch.is_tensor(f0)
    x = f0 if is_tensor else np.asarray(f0, dtype=np.float64)
    if log_domain:
        x = torch.log(x) if is_tensor else np.log(x)
    y = (x - src.mu) / src.sigma * tgt.sigma + tgt.mu
    if log_domain:
        y = torch.exp(y) if is_tensor else np.exp(y)
    if not is_tensor and np.ndim(f0) == 0:
        return float(y)
    return y


@dataclass
class ProsodyTransferSpec:
    anchor_speaker: str
    transfer_duration: bool = True
    transfer_f0: bool = True
    transfer_energy: bool = True
    f0_adaptation: str = "linear"

    def validate(self, registry: "SpeakerRegistry", text_language: str) -> None:
        if not (self.transfer_duration or self.transfer_f0 or self.transfer_energy):
            raise ConfigurationError("a transfer spec needs at least one transfer flag")
        if self.f0_adaptation not in ("none", "linear"):
            raise ConfigurationError(f"unknown f0 adaptation {self.f0_adaptation!r}")
        if registry.native_language(self.anchor_speaker) != text_language:
            raise ConfigurationError(f"anchor {self.anchor_speaker} is not native to {text_language}")


@dataclass
class SpeakerRegistry:
    inventory: PhonemeInventory
    speakers: list[tuple[str, str]]
    anchor_speaker_of: dict[str, str]
    f0_stats: dict[str, SpeakerF0Stats]

    @classmethod
    def from_manifest(cls, manifest: CorpusManifest, split: str = "train") -> "SpeakerRegistry":
        stats = {}
        for tag in manifest.speaker_tags:
            values = [v for u in manifest.split(split) if u.speaker == tag for v in u.f0]
            if values:
                stats[tag] = SpeakerF0Stats(tag, float(np.mean(values)), float(np.std(values)))
        return cls(manifest.inventory, list(manifest.speakers), dict(manifest.anchor_speaker_of), stats)

    @classmethod
    def from_meta(cls, meta: dict) -> "SpeakerRegistry":
        stats = {tag: SpeakerF0Stats(tag, mu, sigma) for tag, (mu, sigma) in meta.get("f0_stats", {}).items()}
        return cls(PhonemeInventory.from_record(meta["inventory"]), [tuple(s) for s in meta["speakers"]],
                   dict(meta["anchor_speaker_of"]), stats)

    def index(self, tag: str) -> int:
        for i, (t, _) in enumerate(self.speakers):
            if t == tag:
                return i
        raise RegistryError(f"unknown speaker {tag!r}")

    def native_language(self, tag: str) -> str:
        return self.speakers[self.index(tag)][1]


def parse_text(text: str, inventory: PhonemeInventory) -> list[int]:
    """Whitespace-separated phoneme symbols -> indices."""
    symbols = text.split()
    if not symbols:
        raise InputError("empty text")
    return [inventory.index(s) for s in symbols]


@dataclass
class SynthesisResult:
    mel: np.ndarray
    durations: list[int]
    f0: Optional[list[float]]
    energy: Optional[list[float]]
    speaker: str
    language: str
    system: str
    transfer: Optional[dict] = None

    def metadata(self) -> dict:
        return {
            "speaker": self.speaker,
            "language": self.language,
            "system": self.system,
            "frames": int(self.mel.shape[0]),
            "durations": self.durations,
            "f0": self.f0,
            "energy": self.energy,
            "transfer": self.transfer,
        }


class Synthesizer:
    def __init__(self, model: TripletTTS, registry: SpeakerRegistry):
        self.model = model.eval()
        self.registry = registry

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "Synthesizer":
        state = load_checkpoint(path)
        return cls(state.build_model(), SpeakerRegistry.from_meta(state.meta))

    @property
    def fe_enabled(self) -> bool:
        return self.model.acoustic.config.fe_enabled

    def transfer_for(self, speaker: str, language: str, system: str) -> Optional[ProsodyTransferSpec]:
        if system not in SYSTEMS:
            raise ConfigurationError(f"unknown system {system!r}; choose from {SYSTEMS}")
        if system in ("base_fe", "base_fe_dfe") and not self.fe_enabled:
            raise UnsupportedOperationError(f"system {system} needs a checkpoint trained with fe_enabled")
        if system != "base_fe_dfe":
            return None
        anchor = self.registry.anchor_speaker_of.get(language)
        if anchor is None:
            raise RegistryError(f"no anchor speaker for language {language}")
        if anchor == speaker or self.registry.native_language(speaker) == language:
            raise ConfigurationError(
                f"prosody transfer applies only to cross-lingual requests; {speaker} is native to {language}"
            )
        spec = ProsodyTransferSpec(anchor)
        spec.validate(self.registry, language)
        return spec

    def _conditioning(self, spec: ProsodyTransferSpec, speakers: Sequence[str]) -> TransferConditioning:
        anchor_stats = self.registry.f0_stats.get(spec.anchor_speaker)
        f0_map = None
        if spec.transfer_f0 and spec.f0_adaptation == "linear":
            targets = [self.registry.f0_stats[s] for s in speakers]
            mu = torch.tensor([t.mu for t in targets])[:, None]
            sigma = torch.tensor([t.sigma for t in targets])[:, None]

            def linear_map(f0):
                return (f0 - anchor_stats.mu) / anchor_stats.sigma * sigma.to(f0.dtype) + mu.to(f0.dtype)

            f0_map = linear_map

        ids = torch.full((len(speakers),), self.registry.index(spec.anchor_speaker), dtype=torch.long)
        return TransferConditioning(ids, spec.transfer_duration, spec.transfer_f0, spec.transfer_energy, f0_map)

    @torch.no_grad()
    def synthesize_many(self, texts: Sequence[Sequence[int]], speakers: Sequence[str], system: str = "base",
                        language: Optional[str] = None) -> list[SynthesisResult]:
        """Free-running synthesis of several texts; all share ``system`` and text language."""
        inv = self.registry.inventory
        languages = [language or inv.language_of_sequence(t) for t in texts]
        if any(lang is None for lang in languages):
            raise InputError("text language is ambiguous; pass language explicitly")
        specs = [self.transfer_for(s, lang, system) for s, lang in zip(speakers, languages)]
        lengths = torch.tensor([len(t) for t in texts])
        phonemes = torch.zeros(len(texts), int(lengths.max()), dtype=torch.long)
        for i, t in enumerate(texts):
            phonemes[i, : len(t)] = torch.tensor(list(t))
        mask = torch.arange(phonemes.shape[1])[None, :] < lengths[:, None]
        ids = torch.tensor([self.registry.index(s) for s in speakers])
        transfer = None
        if specs[0] is not None:
            if len({s.anchor_speaker for s in specs}) != 1:
                raise InputError("batched transfer needs a single anchor speaker")
            transfer = self._conditioning(specs[0], speakers)
        out = self.model.acoustic.synthesize(phonemes, mask, ids, AcousticModel.FREE_RUNNING, transfer=transfer)
        results = []
        for i in range(len(texts)):
            n = int(lengths[i])
            results.append(SynthesisResult(
                mel=out.item_mel(i).float().numpy().copy(),
                durations=out.item_durations(i).tolist(),
                f0=None if out.f0_used is None else out.f0_used[i, :n].tolist(),
                energy=None if out.energy_used is None else out.energy_used[i, :n].tolist(),
                speaker=speakers[i], language=languages[i], system=system,
                transfer=None if specs[i] is None else asdict(specs[i]),
            ))
        return results

    def synthesize(self, phonemes: Sequence[int], speaker: str, system: str = "base",
                   language: Optional[str] = None) -> SynthesisResult:
        return self.synthesize_many([phonemes], [speaker], system, language)[0]


def synthesize_cli(text: str, speaker: str, system: str, checkpoint: str | Path, out: str | Path,
                   language: Optional[str] = None) -> SynthesisResult:
    """Synthesize ``text`` and write ``<out>.mel`` plus ``<out>.json`` metadata."""
    synth = Synthesizer.from_checkpoint(checkpoint)
    result = synth.synthesize(parse_text(text, synth.registry.inventory), speaker, system, language)
    out = Path(out)
    mel_path = out.with_suffix(".mel")
    write_mel(mel_path, MelSpectrogram(result.mel))
    out.with_suffix(".json").write_text(json.dumps(result.metadata(), indent=2) + "\n")
    return result


# ---------------------------------------------------------------------------
# external ASR contract

class Transcriber(Protocol):
    """A speech recognizer reachable through submit/poll."""

    def submit(self, audio, language: str) -> str: ...

    def poll(self, job_id: str) -> Optional[str]: ...


def normalize_transcript(text: str) -> list[str]:
    cleaned = "".join(ch if ch.isalnum() or ch.isspace() or ch == "_" else " " for ch in text.lower())
    return cleaned.split()


def word_error_rate(reference: str, hypothesis: str) -> float:
    """Word-level Levenshtein distance divided by the reference length."""
    ref = normalize_transcript(reference)
    hyp = normalize_transcript(hypothesis)
    if not ref:
        raise InputError("reference transcript is empty")
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1] / len(ref)


class AsrClient:
    """Retrying wrapper around a :class:`Transcriber`."""

    def __init__(self, transcriber: Transcriber, max_attempts: int = 3, backoff_s: float = 0.5,
                 poll_interval_s: float = 0.1, max_polls: int = 50, sleep: Callable[[float], None] = time.sleep):
        self.transcriber = transcriber
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self.poll_interval_s = poll_interval_s
        self.max_polls = max_polls
        self.sleep = sleep

    def transcribe(self, audio, language: str) -> str:
        delay = self.backoff_s
        for attempt in range(1, self.max_attempts + 1):
            try:
                job = self.transcriber.submit(audio, language)
                for _ in range(self.max_polls):
                    text = self.transcriber.poll(job)
                    if text is not None:
                        return text
                    self.sleep(self.poll_interval_s)
                raise TransientServiceError(f"job {job} did not finish")
            except TransientServiceError:
                if attempt == self.max_attempts:
                    raise
                self.sleep(delay)
                delay *= 2
        raise AssertionError("unreachable")

    def wer(self, audio, reference: str, language: str) -> float:
        return word_error_rate(reference, self.transcribe(audio, language))


def asr_wer(client: Optional[AsrClient], audio, reference: str, language: str) -> Optional[float]:
    """WER, or ``None`` when no client is registered or the service keeps failing."""
    if client is None:
        return None
    try:
        return client.wer(audio, reference, language)
    except TransientServiceError as exc:
        logger.warning("ASR unavailable, WER left empty: %s", exc)
        return None


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalRow:
    utt_id: str
    speaker: str
    language: str
    content_distance: float
    speaker_similarity: float
    mel_l1: Optional[float] = None
    wer: Optional[float] = None


@dataclass
class EvalReport:
    test_set: str
    system: str
    rows: list[EvalRow]
    aggregate: dict = field(default_factory=dict)

    @property
    def wer(self) -> Optional[float]:
        agg = self.aggregate.get("wer")
        return None if agg is None else agg["mean"]

    def to_records(self) -> list[dict]:
        return [asdict(r) for r in self.rows]

    def to_table(self) -> str:
        lines = [f"{self.test_set} / {self.system}: {len(self.rows)} rows"]
        for name, agg in self.aggregate.items():
            if agg is None:
                lines.append(f"  {name:<20} absent")
            else:
                lines.append(f"  {name:<20} {agg['mean']:.4f} +- {agg['std']:.4f}")
        return "\n".join(lines)


def _aggregate(rows: Sequence[EvalRow]) -> dict:
    out = {}
    for name in ("content_distance", "speaker_similarity", "mel_l1", "wer"):
        values = [getattr(r, name) for r in rows if getattr(r, name) is not None]
        out[name] = {"mean": float(np.mean(values)), "std": float(np.std(values)), "n": len(values)} if values else None
    return out


def evaluate(model: TripletTTS, manifest: CorpusManifest, test_set: str = "inter_lan", seed: int = 0,
             system: str = "base", split: str = "test", asr: Optional[AsrClient] = None,
             batch_size: int = 32) -> EvalReport:
    """Score held-out synthesis with the content and speaker encoders.

    ``inter_lan`` renders every anchor-speaker text in each cross-language
    voice; ``intra_lan`` renders it in the anchor's own voice.  Content
    distance compares per-phoneme CP encodings with the anchor ground truth;
    speaker similarity compares SP encodings with a ground-truth utterance of
    the rendering speaker.
    """
    if test_set not in ("inter_lan", "intra_lan"):
        raise ConfigurationError(f"unknown test set {test_set!r}")
    registry = SpeakerRegistry.from_manifest(manifest)
    synth = Synthesizer(model, registry)
    held_out = sorted(manifest.split(split), key=lambda u: u.utt_id)
    anchors = [u for u in held_out if manifest.anchor_speaker_of.get(u.language) == u.speaker]
    if not anchors:
        raise InputError(f"split {split!r} has no anchor-speaker utterances")
    rng = np.random.default_rng(seed)
    jobs = []
    for u in anchors:
        if test_set == "inter_lan":
            voices = [tag for tag, lang in manifest.speakers if lang != u.language]
        else:
            voices = [u.speaker]
        for tag in voices:
            refs = [r for r in held_out if r.speaker == tag and r.utt_id != u.utt_id]
            if not refs:
                refs = [r for r in manifest.split("train") if r.speaker == tag]
            jobs.append((u, tag, refs[int(rng.integers(len(refs)))]))

    model.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(jobs), batch_size):
            chunk = jobs[start:start + batch_size]
            groups: dict[tuple[str, str], list[int]] = {}
            for k, (u, tag, _) in enumerate(chunk):
                sys_k = system if (system != "base_fe_dfe" or test_set == "inter_lan") else "base_fe"
                groups.setdefault((sys_k, u.language), []).append(k)
            results: list = [None] * len(chunk)
            for (sys_k, lang), ks in groups.items():
                outs = synth.synthesize_many([chunk[k][0].phonemes for k in ks], [chunk[k][1] for k in ks],
                                             sys_k, lang)
                for k, res in zip(ks, outs):
                    results[k] = res
            anchor_segs, synth_segs, mels = [], [], []
            for (u, tag, ref), res in zip(chunk, results):
                gt = torch.from_numpy(u.mel.frames)
                out_mel = torch.from_numpy(res.mel)
                anchor_segs.append(list(torch.split(gt, u.durations)))
                synth_segs.append(list(torch.split(out_mel, res.durations)))
                mels.extend([out_mel, torch.from_numpy(ref.mel.frames)])
            z_c = model.f_content(anchor_segs + synth_segs)
            z_s = model.f_speaker(mels)
            n = len(chunk)
            mel_l1 = {}
            if test_set == "intra_lan":
                batch = collate([u for u, _, _ in chunk], manifest)
                tf = model.acoustic(batch)
                for k in range(n):
                    t = int(batch.frame_mask[k].sum())
                    mel_l1[k] = float((tf.mel_pre[k, :t] - batch.mel[k, :t]).abs().mean())
            for k, ((u, tag, ref), res) in enumerate(zip(chunk, results)):
                cd = float(cosine_distance(z_c[k], z_c[n + k]).mean())
                sim = 1.0 - float(cosine_distance(z_s[2 * k], z_s[2 * k + 1]))
                reference = " ".join(registry.inventory.symbols[p] for p in u.phonemes)
                wer = asr_wer(asr, res.mel, reference, u.language)
                rows.append(EvalRow(u.utt_id, tag, u.language, cd, sim, mel_l1.get(k), wer))
    rows.sort(key=lambda r: (r.utt_id, r.speaker))
    return EvalReport(test_set, system, rows, _aggregate(rows))


def evaluate_checkpoint(checkpoint: str | Path, manifest: CorpusManifest, test_set: str = "inter_lan",
                        seed: int = 0, system: str = "base", asr: Optional[AsrClient] = None) -> EvalReport:
    state = load_checkpoint(checkpoint)
    if state.meta.get("inventory_digest") != manifest.inventory.digest():
        raise ConfigurationError("checkpoint and manifest use different phoneme inventories")
    return evaluate(state.build_model(), manifest, test_set, seed, system, asr=asr)

