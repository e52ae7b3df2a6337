"""Content Predictor (CP) and Speaker Predictor (SP).

Both read mel-spectrograms through a reference encoder (masked convolutions,
then a GRU whose final state summarises the input).  CP works per phoneme
segment, SP on the whole utterance.  Their pre-projection hiddens are the
triplet encoding functions: ``f_C(m_t) = z_C[t]`` and ``f_S(M) = z_S``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .acoustic_model import BiGRU, MaskedConvStack, last_valid, pad_by_lengths, run_rnn
from .errors import ConfigurationError, InputError, RegistryError


@dataclass
class PredictorConfig:
    n_mels: int = 80
    n_speakers: int = 3
    phoneme_emb_dim: int = 64
    speaker_emb_dim: int = 32
    ref_channels: int = 64
    ref_hidden: int = 64
    content_dim: int = 64
    speaker_dim: int = 64
    adversary_hidden: int = 64
    # per-utterance mean/variance normalization of CP input; cancels per-bin affine voice tint
    content_input_norm: bool = True

    def __post_init__(self):
        sizes = [v for k, v in asdict(self).items() if k != "content_input_norm"]
        if min(sizes) <= 0:
            raise ConfigurationError("predictor dimensions must be positive")
        if self.content_dim % 2:
            raise ConfigurationError("content_dim must be even (bidirectional context layer)")

    def to_dict(self) -> dict:
        return asdict(self)


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -grad


def grad_reverse(x: torch.Tensor) -> torch.Tensor:
    return _ReverseGrad.apply(x)


class GradientReversal(nn.Module):
    """Identity on the forward pass, negated sensitivity on the backward pass.

    The adversarial weight is applied to the loss term by the trainer, so the
    reversal gain stays at -1.
    """

    def forward(self, x):
        return grad_reverse(x)


@dataclass
class ContentEncoding:
    z: torch.Tensor       # (T_ph, content_dim) or (B, T_ph, content_dim)
    e_hat: torch.Tensor   # (..., phoneme_emb_dim)
    segment_summary: torch.Tensor
    mask: torch.Tensor | None = None

    def __post_init__(self):
        if self.z.shape[:-1] != self.e_hat.shape[:-1]:
            raise InputError("z and e_hat disagree on the phoneme axis")


@dataclass
class SpeakerEncoding:
    z: torch.Tensor
    e_hat: torch.Tensor


class ReferenceEncoder(nn.Module):
    """(N, T, n_mels) + lengths -> (N, ref_hidden) final GRU state."""

    def __init__(self, n_mels: int, channels: int, hidden: int):
        super().__init__()
        self.convs = MaskedConvStack([n_mels, channels, channels], kernel_size=3)
        self.rnn = nn.GRU(channels, hidden, batch_first=True)

    def forward(self, mel, mask):
        out, _ = self.rnn(self.convs(mel, mask))
        return last_valid(out, mask)


def utterance_cmvn(frames: torch.Tensor, utterance_lengths, eps: float = 1e-2) -> torch.Tensor:
    """Normalize each utterance's frames to zero mean and unit variance per mel bin.

    ``frames`` is (sum T_f, n_mels) with utterances stored back to back.
    ``eps`` floors the variance so near-constant bins are not amplified into noise.
    """
    out = []
    for chunk in torch.split(frames, [int(n) for n in utterance_lengths], dim=0):
        mean = chunk.mean(0, keepdim=True)
        var = ((chunk - mean) ** 2).mean(0, keepdim=True)
        out.append((chunk - mean) / torch.sqrt(var + eps))
    return torch.cat(out, dim=0)


def _pad_with_mask(seqs: Sequence[torch.Tensor]):
    return pad_by_lengths(torch.cat(list(seqs), dim=0), [s.shape[0] for s in seqs])


class ContentPredictor(nn.Module):
    def __init__(self, config: PredictorConfig):
        super().__init__()
        c = config
        self.config = c
        self.reference = ReferenceEncoder(c.n_mels, c.ref_channels, c.ref_hidden)
        self.context = BiGRU(c.ref_hidden, c.content_dim // 2)
        self.proj = nn.Linear(c.content_dim, c.phoneme_emb_dim)
        self.reversal = GradientReversal()
        self.adversary = nn.Sequential(
            nn.Linear(c.ref_hidden, c.adversary_hidden), nn.ReLU(), nn.Linear(c.adversary_hidden, c.n_speakers)
        )

    def _encode_flat(self, frames, segment_lengths, counts) -> ContentEncoding:
        if (torch.as_tensor(segment_lengths) < 1).any():
            raise InputError("every segment needs at least one frame")
        if self.config.content_input_norm:
            seg = torch.as_tensor(segment_lengths)
            utt_lengths = [int(x.sum()) for x in torch.split(seg, [int(c) for c in counts])]
            frames = utterance_cmvn(frames, utt_lengths)
        padded, frame_mask = pad_by_lengths(frames, segment_lengths)
        summary = self.reference(padded, frame_mask)
        seq, ph_mask = pad_by_lengths(summary, counts)
        z = run_rnn(self.context, seq, ph_mask)
        e_hat = self.proj(z)
        return ContentEncoding(z=z, e_hat=e_hat, segment_summary=seq, mask=ph_mask)

    def encode_segments(self, segment_lists: Sequence[Sequence[torch.Tensor]]) -> ContentEncoding:
        """Encode several utterances given as lists of phoneme segments (batched)."""
        if not segment_lists or any(len(s) == 0 for s in segment_lists):
            raise InputError("content encoding needs at least one segment per utterance")
        flat = [seg for segs in segment_lists for seg in segs]
        lengths = [seg.shape[0] for seg in flat]
        if min(lengths) < 1:
            raise InputError("every segment needs at least one frame")
        return self._encode_flat(torch.cat(flat, dim=0), lengths, [len(s) for s in segment_lists])

    def forward(self, mel, durations, phoneme_mask) -> ContentEncoding:
        """Batched form: segment each padded mel by its durations, then encode."""
        lengths = (durations * phoneme_mask.long()).sum(1)
        frame_mask = torch.arange(mel.shape[1])[None, :] < lengths[:, None]
        enc = self._encode_flat(mel[frame_mask], durations[phoneme_mask], phoneme_mask.sum(1))
        total = phoneme_mask.shape[1]
        if enc.z.shape[1] < total:
            pad = total - enc.z.shape[1]
            enc = ContentEncoding(F.pad(enc.z, (0, 0, 0, pad)), F.pad(enc.e_hat, (0, 0, 0, pad)),
                                  F.pad(enc.segment_summary, (0, 0, 0, pad)), phoneme_mask)
        return enc

    def content_encode(self, segments: Sequence[torch.Tensor]) -> ContentEncoding:
        """Single utterance: list of (frames, n_mels) segments -> per-phoneme z and e_hat."""
        enc = self.encode_segments([segments])
        return ContentEncoding(enc.z[0], enc.e_hat[0], enc.segment_summary[0])

    def f_content(self, segment_lists) -> list[torch.Tensor]:
        """Per-utterance (T_ph, content_dim) encodings for the triplet loss."""
        enc = self.encode_segments(segment_lists)
        return [enc.z[i, : len(segs)] for i, segs in enumerate(segment_lists)]

    def speaker_logits(self, segment_summary):
        return self.adversary(self.reversal(segment_summary))


class SpeakerPredictor(nn.Module):
    def __init__(self, config: PredictorConfig):
        super().__init__()
        c = config
        self.config = c
        self.reference = ReferenceEncoder(c.n_mels, c.ref_channels, c.ref_hidden)
        self.hidden = nn.Linear(c.ref_hidden, c.speaker_dim)
        self.proj = nn.Linear(c.speaker_dim, c.speaker_emb_dim)

    def forward(self, mel, frame_mask) -> SpeakerEncoding:
        summary = self.reference(mel, frame_mask)
        z = torch.tanh(self.hidden(summary))
        return SpeakerEncoding(z=z, e_hat=self.proj(z))

    def speaker_encode(self, mel: torch.Tensor) -> SpeakerEncoding:
        if mel.dim() != 2 or mel.shape[0] < 1:
            raise InputError("speaker encoding needs a (frames, n_mels) mel with at least one frame")
        enc = self(mel[None], torch.ones(1, mel.shape[0], dtype=torch.bool))
        return SpeakerEncoding(enc.z[0], enc.e_hat[0])

    def f_speaker(self, mels: Sequence[torch.Tensor]) -> torch.Tensor:
        padded, mask = _pad_with_mask(mels)
        return self(padded, mask).z


def adversarial_speaker_loss(logits: torch.Tensor, speakers: torch.Tensor, phoneme_mask: torch.Tensor | None = None):
    """Speaker cross-entropy per phoneme, averaged over valid phonemes.

    ``logits`` is (B, T_ph, S) and must already come from gradient-reversed
    segment encodings; ``speakers`` holds one index per utterance.
    """
    n_speakers = logits.shape[-1]
    if speakers.numel() and (speakers.min() < 0 or speakers.max() >= n_speakers):
        raise RegistryError("speaker index outside the classifier's registry")
    if phoneme_mask is None:
        phoneme_mask = torch.ones(logits.shape[:2], dtype=torch.bool)
    target = speakers[:, None].expand(-1, logits.shape[1])
    ce = F.cross_entropy(logits.reshape(-1, n_speakers), target.reshape(-1), reduction="none")
    m = phoneme_mask.reshape(-1).to(ce.dtype)
    return (ce * m).sum() / m.sum().clamp(min=1)


def reconstruction_losses(content: ContentEncoding, speaker: SpeakerEncoding, e_content, e_speaker,
                          phoneme_mask=None, normalize: bool = False):
    """(L_recon_ling, L_recon_spk); targets are treated as constants.

    Raw form sums squared errors over phonemes and dimensions and averages over
    the batch.  ``normalize=True`` averages over valid elements instead.
    """
    e_hat_c, e_hat_s = content.e_hat, speaker.e_hat
    e_content, e_speaker = e_content.detach(), e_speaker.detach()
    if e_hat_c.shape != e_content.shape or e_hat_s.shape != e_speaker.shape:
        raise InputError(
            f"shape mismatch: {tuple(e_hat_c.shape)} vs {tuple(e_content.shape)}, "
            f"{tuple(e_hat_s.shape)} vs {tuple(e_speaker.shape)}"
        )
    if e_hat_c.dim() == 2:
        e_hat_c, e_content = e_hat_c[None], e_content[None]
        e_hat_s, e_speaker = e_hat_s[None], e_speaker[None]
        phoneme_mask = None if phoneme_mask is None else phoneme_mask[None]
    if phoneme_mask is None:
        phoneme_mask = torch.ones(e_hat_c.shape[:2], dtype=torch.bool)
    m = phoneme_mask.unsqueeze(-1).to(e_hat_c.dtype)
    sq_c = ((e_hat_c - e_content) ** 2 * m).sum()
    sq_s = ((e_hat_s - e_speaker) ** 2).sum()
    if normalize:
        ling = sq_c / (m.sum() * e_hat_c.shape[-1]).clamp(min=1)
        spk = sq_s / e_hat_s.numel()
    else:
        ling = sq_c / e_hat_c.shape[0]
        spk = sq_s / e_hat_s.shape[0]
    return ling, spk
