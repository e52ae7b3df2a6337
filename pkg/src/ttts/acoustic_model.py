"""Duration-based multi-speaker acoustic model (DurIAN-shaped skeleton).

Text encoder -> duration model -> length regulator -> recurrent decoder ->
residual post-net, with optional phoneme-level f0/energy predictors whose
values are quantized into trainable embeddings (the "FE" variant).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn

from .errors import (
    AlignmentError,
    ConfigurationError,
    NumericError,
    RegistryError,
    UnsupportedOperationError,
    VocabularyError,
)


@dataclass
class AcousticConfig:
    n_phonemes: int
    n_speakers: int
    n_mels: int = 80
    phoneme_emb_dim: int = 64
    speaker_emb_dim: int = 32
    encoder_dim: int = 128
    decoder_dim: int = 128
    decoder_layers: int = 2
    postnet_dim: int = 64
    postnet_layers: int = 3
    postnet_kernel: int = 5
    predictor_hidden: int = 64
    fe_enabled: bool = False
    f0_bins: int = 256
    energy_bins: int = 256
    f0_range_hz: tuple[float, float] = (60.0, 400.0)
    energy_range: tuple[float, float] = (0.0, 2.0)
    log_durations: bool = True

    def __post_init__(self):
        self.f0_range_hz = tuple(float(v) for v in self.f0_range_hz)
        self.energy_range = tuple(float(v) for v in self.energy_range)
        dims = [self.n_phonemes, self.n_speakers, self.n_mels, self.phoneme_emb_dim, self.speaker_emb_dim,
                self.encoder_dim, self.decoder_dim, self.decoder_layers, self.postnet_dim, self.postnet_layers,
                self.predictor_hidden]
        if min(dims) <= 0:
            raise ConfigurationError("all acoustic dimensions must be positive")
        if self.encoder_dim % 2:
            raise ConfigurationError("encoder_dim must be even (bidirectional encoder)")
        if self.f0_range_hz[0] >= self.f0_range_hz[1] or self.energy_range[0] >= self.energy_range[1]:
            raise ConfigurationError("prosody ranges need min < max")
        if self.f0_bins < 2 or self.energy_bins < 2:
            raise ConfigurationError("quantization needs at least 2 bins")

    def to_dict(self) -> dict:
        return asdict(self)


def quantize_prosody(value: torch.Tensor, value_range: tuple[float, float], bins: int) -> torch.Tensor:
    """Map real values onto ``bins`` evenly spaced levels; out-of-range values clamp to the edges."""
    if bins < 2:
        raise ConfigurationError("bins must be >= 2")
    lo, hi = value_range
    value = torch.as_tensor(value)
    scaled = (value.double() - lo) / (hi - lo) * (bins - 1)
    return torch.floor(scaled + 0.5).clamp(0, bins - 1).long()


def normalize_prosody(value: torch.Tensor, value_range: tuple[float, float]) -> torch.Tensor:
    lo, hi = value_range
    return (value - lo) / (hi - lo)


def denormalize_prosody(value: torch.Tensor, value_range: tuple[float, float]) -> torch.Tensor:
    lo, hi = value_range
    return value * (hi - lo) + lo


def durations_from_prediction(pred: torch.Tensor, log_domain: bool = True) -> torch.Tensor:
    """Frames per phoneme at inference: exp (if log), round half up, clamp to >= 1."""
    frames = torch.exp(pred) if log_domain else pred
    return torch.floor(frames.detach() + 0.5).clamp(min=1).long()


def length_regulate(states: torch.Tensor, durations: Sequence[int] | torch.Tensor) -> torch.Tensor:
    """Repeat row ``t`` of ``states`` ``durations[t]`` times."""
    durations = torch.as_tensor(durations, dtype=torch.long)
    if states.shape[0] != durations.shape[0]:
        raise AlignmentError(f"{states.shape[0]} states but {durations.shape[0]} durations")
    if (durations < 1).any():
        raise AlignmentError("durations must be >= 1")
    return torch.repeat_interleave(states, durations, dim=0)


def pad_by_lengths(flat: torch.Tensor, lengths) -> tuple[torch.Tensor, torch.Tensor]:
    """Cut ``flat`` (rows concatenated) into a zero-padded (N, T_max, ...) batch with one gather."""
    lengths = torch.as_tensor(lengths, dtype=torch.long)
    offsets = torch.cumsum(lengths, 0) - lengths
    steps = torch.arange(int(lengths.max()))
    mask = steps[None, :] < lengths[:, None]
    idx = (offsets[:, None] + steps[None, :]).clamp(max=flat.shape[0] - 1)
    padded = flat[idx] * mask.view(*mask.shape, *([1] * (flat.dim() - 1))).to(flat.dtype)
    return padded, mask


def regulate_batch(states: torch.Tensor, durations: torch.Tensor, phoneme_mask: torch.Tensor):
    """Batched length regulation; returns padded frame states and the frame mask."""
    d = durations[phoneme_mask].long()
    if (d < 1).any():
        raise AlignmentError("durations must be >= 1")
    flat = states[phoneme_mask]
    frames = flat[torch.repeat_interleave(torch.arange(flat.shape[0]), d)]
    lengths = (durations.long() * phoneme_mask.long()).sum(1)
    return pad_by_lengths(frames, lengths)


def reverse_within_length(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Reverse the valid prefix of every row; padding stays at the end."""
    lengths = mask.sum(1, keepdim=True)
    steps = torch.arange(x.shape[1])[None, :]
    idx = torch.where(steps < lengths, lengths - 1 - steps, steps)
    return x.gather(1, idx.unsqueeze(-1).expand_as(x))


class BiGRU(nn.Module):
    """Bidirectional GRU on padded input; each direction only sees its row's valid prefix."""

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.fwd = nn.GRU(input_size, hidden_size, batch_first=True)
        self.bwd = nn.GRU(input_size, hidden_size, batch_first=True)

    def forward(self, x, mask):
        m = mask.unsqueeze(-1).to(x.dtype)
        ahead, _ = self.fwd(x)
        behind, _ = self.bwd(reverse_within_length(x, mask))
        return torch.cat([ahead, reverse_within_length(behind, mask)], dim=-1) * m


def run_rnn(rnn: nn.Module, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Run a left-to-right GRU (or :class:`BiGRU`) and zero the padded steps.

    Padding sits after the valid prefix, so it never influences valid outputs.
    """
    if isinstance(rnn, BiGRU):
        return rnn(x, mask)
    out, _ = rnn(x)
    return out * mask.unsqueeze(-1).to(out.dtype)


def last_valid(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Output at the final valid step of each row."""
    idx = (mask.sum(1) - 1).clamp(min=0)
    return x[torch.arange(x.shape[0]), idx]


class MaskedConvStack(nn.Module):
    """1-D convolutions over time; padded steps are zeroed before every layer."""

    def __init__(self, channels: Sequence[int], kernel_size: int, activation=nn.ReLU, last_activation=True):
        super().__init__()
        self.layers = nn.ModuleList(
            nn.Conv1d(c_in, c_out, kernel_size, padding=kernel_size // 2)
            for c_in, c_out in zip(channels[:-1], channels[1:])
        )
        self.activation = activation()
        self.last_activation = last_activation

    def forward(self, x, mask):
        m = mask.unsqueeze(-1).to(x.dtype)
        h = x.transpose(1, 2)
        for i, layer in enumerate(self.layers):
            h = layer(h * m.transpose(1, 2))
            if i < len(self.layers) - 1 or self.last_activation:
                h = self.activation(h)
        return h.transpose(1, 2) * m


class PhonemePredictor(nn.Module):
    """Per-phoneme scalar regressor conditioned on a speaker embedding."""

    def __init__(self, in_dim, speaker_dim, hidden):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim + speaker_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, states, speaker_emb):
        spk = speaker_emb.unsqueeze(1).expand(-1, states.shape[1], -1)
        return self.net(torch.cat([states, spk], dim=-1)).squeeze(-1)


@dataclass
class TransferConditioning:
    """Speaker ids fed to the duration/f0/energy predictors instead of the target speaker."""

    speakers: torch.Tensor
    duration: bool = True
    f0: bool = True
    energy: bool = True
    f0_map: Optional[Callable[[torch.Tensor], torch.Tensor]] = None


@dataclass
class AcousticOutputs:
    mel_pre: torch.Tensor
    residual: torch.Tensor
    mel_post: torch.Tensor
    durations_pred: torch.Tensor
    durations_used: torch.Tensor
    frame_mask: torch.Tensor
    phoneme_mask: torch.Tensor
    f0_pred: Optional[torch.Tensor] = None
    energy_pred: Optional[torch.Tensor] = None
    f0_used: Optional[torch.Tensor] = None
    energy_used: Optional[torch.Tensor] = None
    conditioning: dict = field(default_factory=dict)

    @property
    def frame_lengths(self) -> torch.Tensor:
        return self.frame_mask.sum(1)

    def item_mel(self, i: int, post: bool = True) -> torch.Tensor:
        mel = self.mel_post if post else self.mel_pre
        return mel[i, : int(self.frame_mask[i].sum())]

    def item_durations(self, i: int) -> torch.Tensor:
        return self.durations_used[i, : int(self.phoneme_mask[i].sum())]


class AcousticModel(nn.Module):
    TEACHER_FORCED = "teacher_forced"
    FREE_RUNNING = "free_running"

    def __init__(self, config: AcousticConfig):
        super().__init__()
        self.config = c = config
        self.phoneme_embedding = nn.Embedding(c.n_phonemes, c.phoneme_emb_dim)
        self.speaker_embedding = nn.Embedding(c.n_speakers, c.speaker_emb_dim)
        self.encoder_convs = MaskedConvStack([c.phoneme_emb_dim] * 3, kernel_size=3)
        self.encoder_rnn = BiGRU(c.phoneme_emb_dim, c.encoder_dim // 2)
        self.duration_predictor = PhonemePredictor(c.encoder_dim, c.speaker_emb_dim, c.predictor_hidden)
        if c.fe_enabled:
            self.f0_predictor = PhonemePredictor(c.encoder_dim, c.speaker_emb_dim, c.predictor_hidden)
            self.energy_predictor = PhonemePredictor(c.encoder_dim, c.speaker_emb_dim, c.predictor_hidden)
            self.f0_embedding = nn.Embedding(c.f0_bins, c.encoder_dim)
            self.energy_embedding = nn.Embedding(c.energy_bins, c.encoder_dim)
        self.decoder_rnn = nn.GRU(c.encoder_dim + c.speaker_emb_dim, c.decoder_dim,
                                  num_layers=c.decoder_layers, batch_first=True)
        self.mel_proj = nn.Linear(c.decoder_dim, c.n_mels)
        chans = [c.n_mels] + [c.postnet_dim] * (c.postnet_layers - 1) + [c.n_mels]
        self.postnet = MaskedConvStack(chans, kernel_size=c.postnet_kernel, activation=nn.Tanh,
                                       last_activation=False)

    def _check_phonemes(self, phonemes, mask):
        valid = phonemes[mask]
        if valid.numel() and (valid.min() < 0 or valid.max() >= self.config.n_phonemes):
            raise VocabularyError("phoneme index outside the inventory")

    def _check_speakers(self, speakers):
        if speakers.numel() and (speakers.min() < 0 or speakers.max() >= self.config.n_speakers):
            raise RegistryError("speaker index not registered")

    def encode_text(self, phonemes: torch.Tensor, phoneme_mask: torch.Tensor | None = None):
        """Return (encoder states, linguistic embeddings e^C) for padded phoneme ids."""
        if phonemes.dim() == 1:
            states, emb = self.encode_text(phonemes[None], None if phoneme_mask is None else phoneme_mask[None])
            return states[0], emb[0]
        if phoneme_mask is None:
            phoneme_mask = torch.ones_like(phonemes, dtype=torch.bool)
        self._check_phonemes(phonemes, phoneme_mask)
        emb = self.phoneme_embedding(phonemes.clamp(0, self.config.n_phonemes - 1))
        emb = emb * phoneme_mask.unsqueeze(-1).to(emb.dtype)
        h = self.encoder_convs(emb, phoneme_mask)
        states = run_rnn(self.encoder_rnn, h, phoneme_mask)
        return states, emb

    def predict_durations(self, states, speaker_emb):
        return self.duration_predictor(states, speaker_emb)

    def predict_prosody(self, states, speaker_emb_f0, speaker_emb_energy=None):
        """Normalized (f0, energy) predictions per phoneme."""
        if not self.config.fe_enabled:
            raise UnsupportedOperationError("prosody predictors need fe_enabled=True")
        if speaker_emb_energy is None:
            speaker_emb_energy = speaker_emb_f0
        return self.f0_predictor(states, speaker_emb_f0), self.energy_predictor(states, speaker_emb_energy)

    def prosody_embedding(self, f0_hz, energy):
        if not self.config.fe_enabled:
            raise UnsupportedOperationError("prosody embeddings need fe_enabled=True")
        c = self.config
        f0_idx = quantize_prosody(f0_hz, c.f0_range_hz, c.f0_bins)
        en_idx = quantize_prosody(energy, c.energy_range, c.energy_bins)
        return self.f0_embedding(f0_idx) + self.energy_embedding(en_idx)

    def decode(self, frame_states, frame_mask, speaker_emb) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (mel_pre, residual) for padded frame-level states."""
        if frame_states.shape[1] == 0:
            raise AlignmentError("decoder needs at least one frame")
        spk = speaker_emb.unsqueeze(1).expand(-1, frame_states.shape[1], -1)
        h = run_rnn(self.decoder_rnn, torch.cat([frame_states, spk], dim=-1), frame_mask)
        m = frame_mask.unsqueeze(-1).to(h.dtype)
        mel_pre = self.mel_proj(h) * m
        residual = self.postnet(mel_pre, frame_mask)
        return mel_pre, residual

    def synthesize(self, phonemes, phoneme_mask, speakers, mode: str = TEACHER_FORCED,
                   durations=None, f0=None, energy=None,
                   transfer: TransferConditioning | None = None) -> AcousticOutputs:
        """Full forward pass.

        ``teacher_forced`` consumes the supplied durations (and f0/energy when the
        FE predictors are enabled); ``free_running`` uses the model's own
        predictions.  With ``transfer`` the duration/f0/energy predictors see the
        transfer speakers' embeddings while the decoder keeps ``speakers``.
        """
        if mode not in (self.TEACHER_FORCED, self.FREE_RUNNING):
            raise ConfigurationError(f"unknown synthesis mode {mode!r}")
        c = self.config
        self._check_speakers(speakers)
        if transfer is not None:
            self._check_speakers(transfer.speakers)
            if (transfer.f0 or transfer.energy) and not c.fe_enabled:
                raise UnsupportedOperationError("f0/energy transfer needs fe_enabled=True")
        states, _ = self.encode_text(phonemes, phoneme_mask)
        target_emb = self.speaker_embedding(speakers)
        anchor_emb = self.speaker_embedding(transfer.speakers) if transfer is not None else target_emb
        dur_emb = anchor_emb if transfer is not None and transfer.duration else target_emb
        conditioning = {"decoder": speakers, "duration": transfer.speakers if transfer and transfer.duration else speakers}

        dur_pred = self.predict_durations(states, dur_emb)
        if mode == self.TEACHER_FORCED:
            if durations is None:
                raise ConfigurationError("teacher_forced synthesis needs durations")
            dur_used = durations.long()
        else:
            dur_used = durations_from_prediction(dur_pred, c.log_durations)
        dur_used = dur_used * phoneme_mask.long()

        f0_pred = energy_pred = f0_used = energy_used = None
        if c.fe_enabled:
            f0_emb = anchor_emb if transfer is not None and transfer.f0 else target_emb
            en_emb = anchor_emb if transfer is not None and transfer.energy else target_emb
            conditioning["f0"] = transfer.speakers if transfer and transfer.f0 else speakers
            conditioning["energy"] = transfer.speakers if transfer and transfer.energy else speakers
            f0_norm, en_norm = self.predict_prosody(states, f0_emb, en_emb)
            f0_pred = denormalize_prosody(f0_norm, c.f0_range_hz)
            energy_pred = denormalize_prosody(en_norm, c.energy_range)
            teacher = mode == self.TEACHER_FORCED
            f0_used = f0 if teacher and f0 is not None else f0_pred.detach()
            energy_used = energy if teacher and energy is not None else energy_pred.detach()
            if transfer is not None and transfer.f0_map is not None and not (teacher and f0 is not None):
                f0_used = transfer.f0_map(f0_used)
            states = states + self.prosody_embedding(f0_used, energy_used) * phoneme_mask.unsqueeze(-1)

        frames, frame_mask = regulate_batch(states, dur_used, phoneme_mask)
        mel_pre, residual = self.decode(frames, frame_mask, target_emb)
        out = AcousticOutputs(
            mel_pre=mel_pre, residual=residual, mel_post=mel_pre + residual,
            durations_pred=dur_pred, durations_used=dur_used, frame_mask=frame_mask,
            phoneme_mask=phoneme_mask, f0_pred=f0_pred, energy_pred=energy_pred,
            f0_used=f0_used, energy_used=energy_used, conditioning=conditioning,
        )
        if not (torch.isfinite(out.mel_post).all() and torch.isfinite(dur_pred).all()):
            raise NumericError("non-finite activations in acoustic forward pass")
        return out

    def forward(self, batch, mode: str = TEACHER_FORCED, transfer=None) -> AcousticOutputs:
        return self.synthesize(batch.phonemes, batch.phoneme_mask, batch.speakers, mode,
                               durations=batch.durations, f0=batch.f0, energy=batch.energy, transfer=transfer)


# ---------------------------------------------------------------------------
# acoustic loss terms (masked, normalized by valid element counts unless raw)

def masked_l1(pred, target, frame_mask, normalize: bool = True):
    m = frame_mask.unsqueeze(-1).to(pred.dtype)
    err = ((pred - target).abs() * m).sum()
    if normalize:
        return err / (m.sum() * pred.shape[-1]).clamp(min=1)
    return err / pred.shape[0]


def duration_loss(pred, durations, phoneme_mask, log_domain: bool = True, normalize: bool = True):
    m = phoneme_mask.to(pred.dtype)
    target = torch.log(durations.clamp(min=1).to(pred.dtype)) if log_domain else durations.to(pred.dtype)
    err = ((pred - target) ** 2 * m).sum()
    if normalize:
        return err / m.sum().clamp(min=1)
    return err / pred.shape[0]


def prosody_loss(pred, target, phoneme_mask, value_range, normalize: bool = True):
    """Squared error in normalized prosody units."""
    m = phoneme_mask.to(pred.dtype)
    diff = normalize_prosody(pred, value_range) - normalize_prosody(target.to(pred.dtype), value_range)
    err = (diff ** 2 * m).sum()
    if normalize:
        return err / m.sum().clamp(min=1)
    return err / pred.shape[0]


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
