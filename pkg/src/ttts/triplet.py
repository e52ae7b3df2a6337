"""In-batch Content/Speaker triplet construction and the triplet loss.

For every batch item spoken by the anchor speaker of its language, a
cross-language speaker ``s_pos`` is drawn from the batch, the item's text is
synthesized in that voice, and two triplets are formed:

* content:  (anchor GT segments, synthesized segments, no negative)
* speaker:  (GT mel of s_pos, synthesized mel, GT mel of another speaker)

The synthesized mel stays in the autograd graph; everything else is data.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .acoustic_model import AcousticModel, TransferConditioning
from .corpus import Batch, CorpusManifest
from .errors import ConfigurationError, InputError

logger = logging.getLogger(__name__)

DEFAULT_POSITIVE_CAP = 4


@dataclass(frozen=True)
class TripletWeights:
    alpha: float = 1.0
    beta: float = 0.02

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("triplet weights must be non-negative")


def cosine_distance(a, b, eps: float = 1e-8, counter: Counter | None = None) -> torch.Tensor:
    """``1 - cos(a, b)`` along the last axis; zero-norm inputs use ``eps`` as norm."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if not a.is_floating_point():
        a = a.double()
    if not b.is_floating_point():
        b = b.double()
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if counter is not None:
        counter["zero_norm"] += int((na < eps).sum()) + int((nb < eps).sum())
    cos = (a * b).sum(-1) / (na.clamp_min(eps) * nb.clamp_min(eps))
    return 1.0 - cos


def triplet_objective(content_distances, d_anchor_positive, d_anchor_negative,
                      weights: TripletWeights = TripletWeights()):
    """Loss of one triplet pair from its distances.

    ``content_distances`` are the phoneme-wise distances between anchor and
    positive content encodings.  Returns ``(content_term, speaker_term)``,
    already weighted, so the pair's loss is their sum.
    """
    content_distances = torch.as_tensor(content_distances)
    zero = torch.zeros((), dtype=content_distances.dtype)
    content = weights.alpha * torch.maximum(zero, content_distances.mean())
    gap = torch.as_tensor(d_anchor_positive) - torch.as_tensor(d_anchor_negative)
    speaker = weights.beta * torch.maximum(torch.zeros_like(gap), gap)
    return content, speaker


@dataclass
class ContentTriplet:
    anchor_segments: list
    positive_segments: list
    negative: None = None


@dataclass
class SpeakerTriplet:
    anchor_mel: torch.Tensor
    positive_mel: torch.Tensor
    negative_mel: torch.Tensor


@dataclass(frozen=True)
class TripletMeta:
    anchor_speaker: str
    positive_speaker: str
    negative_speaker: str
    language: str
    utt_id: str
    speaker_anchor_utt_id: str
    negative_utt_id: str
    item: int
    positive_source_item: int
    speaker_anchor_item: int
    negative_item: int


@dataclass
class TripletPair:
    content: ContentTriplet
    speaker: SpeakerTriplet
    meta: TripletMeta

    def check(self, native_language: Callable[[str], str]) -> None:
        """Raise ``InputError`` if any structural invariant is violated."""
        c, s, m = self.content, self.speaker, self.meta
        if len(c.anchor_segments) != len(c.positive_segments):
            raise InputError(f"{m.utt_id}: anchor has {len(c.anchor_segments)} segments, "
                             f"positive has {len(c.positive_segments)}")
        if c.negative is not None:
            raise InputError("content triplets have no negative")
        if native_language(m.positive_speaker) == m.language:
            raise InputError(f"{m.utt_id}: positive speaker is native to the utterance language")
        if m.negative_speaker == m.positive_speaker:
            raise InputError(f"{m.utt_id}: negative speaker equals positive speaker")
        first = c.positive_segments[0]
        if first.data_ptr() != s.positive_mel.data_ptr() or sum(x.shape[0] for x in c.positive_segments) != s.positive_mel.shape[0]:
            raise InputError(f"{m.utt_id}: content positive is not a partition of the speaker positive")


@dataclass(frozen=True)
class TripletPlan:
    """Index-level outcome of the random picks for one anchor item."""

    item: int
    positive_source_item: int
    positive_speaker: str
    speaker_anchor_item: int
    negative_item: int


@dataclass
class PlanStats:
    candidates: int = 0
    emitted: int = 0
    skipped_no_cross: int = 0
    skipped_no_negative: int = 0
    skipped_cap: int = 0


def plan_triplets(speakers: Sequence[str], languages: Sequence[str], anchor_speaker_of: dict[str, str],
                  rng: np.random.Generator, cap: int | None = DEFAULT_POSITIVE_CAP, start: int = 0):
    """Make the random picks of the in-batch construction for one batch.

    Anchor-eligible items are visited in a rotated order beginning at
    ``start`` so that, across steps, the cap does not always drop the same
    positions.
    """
    stats = PlanStats()
    n = len(speakers)
    eligible = [i for i in range(n) if anchor_speaker_of.get(languages[i]) == speakers[i]]
    stats.candidates = len(eligible)
    if eligible:
        k = start % len(eligible)
        eligible = eligible[k:] + eligible[:k]
    plans = []
    for i in eligible:
        if cap is not None and len(plans) >= cap:
            stats.skipped_cap += 1
            continue
        cross = [j for j in range(n) if languages[j] != languages[i]]
        if not cross:
            stats.skipped_no_cross += 1
            continue
        src = int(cross[rng.integers(len(cross))])
        s_pos = speakers[src]
        same = [j for j in range(n) if speakers[j] == s_pos]
        others = [j for j in range(n) if speakers[j] != s_pos]
        if not others or not same:
            stats.skipped_no_negative += 1
            continue
        an = int(same[rng.integers(len(same))])
        neg = int(others[rng.integers(len(others))])
        plans.append(TripletPlan(i, src, s_pos, an, neg))
    stats.emitted = len(plans)
    return plans, stats


@dataclass
class TripletConstruction:
    pairs: list[TripletPair]
    stats: PlanStats
    synthesized: object = None


def construct_triplets(batch: Batch, model: AcousticModel, manifest: CorpusManifest, rng: np.random.Generator,
                       cap: int | None = DEFAULT_POSITIVE_CAP, start: int = 0,
                       duration_source: str = "predicted", prosody_transfer: bool = False,
                       f0_map: Optional[Callable] = None) -> TripletConstruction:
    """Build the triplets of one batch, synthesizing every positive in a single forward pass.

    ``duration_source="ground_truth"`` teacher-forces the anchor item's
    durations instead of predicting them.  ``prosody_transfer`` feeds the
    anchor speaker's embedding to the duration/f0/energy predictors while the
    decoder keeps the positive speaker.
    """
    if duration_source not in ("predicted", "ground_truth"):
        raise ConfigurationError(f"unknown duration source {duration_source!r}")
    plans, stats = plan_triplets(batch.speaker_tags, batch.languages, manifest.anchor_speaker_of, rng, cap, start)
    if not plans:
        return TripletConstruction([], stats)

    items = torch.tensor([p.item for p in plans])
    pos_ids = torch.tensor([manifest.speaker_index(p.positive_speaker) for p in plans])
    phonemes = batch.phonemes[items]
    mask = batch.phoneme_mask[items]
    keep = int(mask.sum(1).max())
    phonemes, mask = phonemes[:, :keep], mask[:, :keep]
    transfer = None
    if prosody_transfer:
        fe = model.config.fe_enabled
        transfer = TransferConditioning(batch.speakers[items], duration=True, f0=fe, energy=fe, f0_map=f0_map)
    if duration_source == "ground_truth":
        out = model.synthesize(phonemes, mask, pos_ids, AcousticModel.TEACHER_FORCED,
                               durations=batch.durations[items][:, :keep], transfer=transfer)
    else:
        out = model.synthesize(phonemes, mask, pos_ids, AcousticModel.FREE_RUNNING, transfer=transfer)

    pairs = []
    frame_lengths = batch.frame_lengths
    for k, plan in enumerate(plans):
        i = plan.item
        n_ph = int(batch.phoneme_mask[i].sum())
        gt_durs = batch.durations[i, :n_ph].tolist()
        anchor_mel = batch.mel[i, : int(frame_lengths[i])]
        positive = out.item_mel(k)
        pos_durs = out.item_durations(k).tolist()
        content = ContentTriplet(
            list(torch.split(anchor_mel, gt_durs, dim=0)),
            list(torch.split(positive, pos_durs, dim=0)),
        )
        speaker = SpeakerTriplet(
            batch.mel[plan.speaker_anchor_item, : int(frame_lengths[plan.speaker_anchor_item])],
            positive,
            batch.mel[plan.negative_item, : int(frame_lengths[plan.negative_item])],
        )
        utts = batch.utts
        meta = TripletMeta(
            anchor_speaker=batch.speaker_tags[i],
            positive_speaker=plan.positive_speaker,
            negative_speaker=batch.speaker_tags[plan.negative_item],
            language=batch.languages[i],
            utt_id=utts[i].utt_id,
            speaker_anchor_utt_id=utts[plan.speaker_anchor_item].utt_id,
            negative_utt_id=utts[plan.negative_item].utt_id,
            item=i,
            positive_source_item=plan.positive_source_item,
            speaker_anchor_item=plan.speaker_anchor_item,
            negative_item=plan.negative_item,
        )
        pairs.append(TripletPair(content, speaker, meta))
    return TripletConstruction(pairs, stats, out)


@dataclass
class TripletLossTerms:
    total: torch.Tensor
    content: torch.Tensor
    speaker: torch.Tensor
    rows: list[dict] = field(default_factory=list)


def triplet_terms(pairs: Sequence[TripletPair], weights: TripletWeights, f_content, f_speaker,
                  counter: Counter | None = None) -> TripletLossTerms:
    """Weighted content and speaker terms averaged over ``pairs``.

    ``f_content`` maps a list of segment lists to a list of (T_ph, dim)
    encodings; ``f_speaker`` maps a list of mels to an (N, dim) matrix.
    """
    if not pairs:
        zero = torch.zeros(())
        return TripletLossTerms(zero, zero, zero, [])
    for p in pairs:
        if len(p.content.anchor_segments) != len(p.content.positive_segments):
            raise InputError(f"{p.meta.utt_id}: anchor/positive phoneme counts differ")
    P = len(pairs)
    z_c = f_content([p.content.anchor_segments for p in pairs] + [p.content.positive_segments for p in pairs])
    mels = ([p.speaker.anchor_mel for p in pairs] + [p.speaker.positive_mel for p in pairs]
            + [p.speaker.negative_mel for p in pairs])
    z_s = f_speaker(mels)
    d_ap = cosine_distance(z_s[:P], z_s[P:2 * P], counter=counter)
    d_an = cosine_distance(z_s[:P], z_s[2 * P:], counter=counter)
    contents, speakers, rows = [], [], []
    for k, p in enumerate(pairs):
        per_phone = cosine_distance(z_c[k], z_c[P + k], counter=counter)
        c_term, s_term = triplet_objective(per_phone, d_ap[k], d_an[k], weights)
        contents.append(c_term)
        speakers.append(s_term)
        rows.append({
            "utt_id": p.meta.utt_id,
            "anchor_speaker": p.meta.anchor_speaker,
            "positive_speaker": p.meta.positive_speaker,
            "negative_speaker": p.meta.negative_speaker,
            "content_distance": float(per_phone.detach().mean()),
            "d_anchor_positive": float(d_ap[k].detach()),
            "d_anchor_negative": float(d_an[k].detach()),
        })
    content = torch.stack(contents).mean()
    speaker = torch.stack(speakers).mean()
    return TripletLossTerms(content + speaker, content, speaker, rows)


def triplet_loss(pairs, weights: TripletWeights, f_content, f_speaker) -> torch.Tensor:
    return triplet_terms(pairs, weights, f_content, f_speaker).total
