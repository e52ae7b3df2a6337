"""Two-stage training: from-scratch stage I, then triplet fine-tuning in stage II.

Stage I optimizes

    recon + dur + res + recon_ling + recon_spk + lambda_adv * adv  (+ f0 + energy)

Stage II reloads the stage-I weights, freezes the speaker and phoneme
embedding tables plus CP and SP, and optimizes

    recon + dur + res + triplet  (+ f0 + energy)

until the windowed triplet loss stops improving.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import tomli
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .acoustic_model import (
    AcousticConfig,
    AcousticModel,
    AcousticOutputs,
    duration_loss,
    masked_l1,
    prosody_loss,
)
from .corpus import Batch, CorpusManifest, collate, load_batch
from .errors import CheckpointError, ConfigurationError, NumericError
from .predictors import (
    ContentEncoding,
    ContentPredictor,
    PredictorConfig,
    SpeakerEncoding,
    SpeakerPredictor,
    adversarial_speaker_loss,
    reconstruction_losses,
)
from .triplet import TripletLossTerms, TripletWeights, construct_triplets, triplet_terms

logger = logging.getLogger(__name__)

STAGE2_FREEZE = ["acoustic.speaker_embedding.", "acoustic.phoneme_embedding.", "cp.", "sp."]


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 1e-4
    batch_size: int = 16
    lambda_adv: float = 0.025
    alpha: float = 1.0
    beta: float = 0.02
    fe_enabled: bool = False
    freeze_prefixes: list = field(default_factory=lambda: list(STAGE2_FREEZE))
    max_steps: int = 2000
    convergence_window: int = 100
    convergence_floor: float = 0.01
    seed: int = 0
    # model sizes
    phoneme_emb_dim: int = 64
    speaker_emb_dim: int = 32
    encoder_dim: int = 128
    decoder_dim: int = 128
    decoder_layers: int = 2
    postnet_dim: int = 64
    postnet_layers: int = 3
    predictor_hidden: int = 64
    ref_channels: int = 64
    ref_hidden: int = 64
    content_dim: int = 64
    speaker_dim: int = 64
    content_input_norm: bool = True
    f0_bins: int = 256
    energy_bins: int = 256
    # loss conventions
    normalize_losses: bool = True
    log_durations: bool = True
    literal_fe_triplet: bool = False
    # triplet construction
    triplet_cap: int = 4
    triplet_duration_source: str = "predicted"
    triplet_prosody_transfer: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError("stage must be 1 or 2")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.stage == 2 and not self.freeze_prefixes:
            raise ConfigurationError("stage II needs a non-empty freeze list")
        if self.convergence_window < 1:
            raise ConfigurationError("convergence_window must be >= 1")
        self.freeze_prefixes = list(self.freeze_prefixes)

    @property
    def weights(self) -> TripletWeights:
        return TripletWeights(self.alpha, self.beta)

    def acoustic_config(self, manifest_or_inventory_size, n_speakers=None, n_mels=None) -> AcousticConfig:
        if isinstance(manifest_or_inventory_size, CorpusManifest):
            m = manifest_or_inventory_size
            n_ph, n_speakers, n_mels = len(m.inventory), len(m.speakers), m.n_mels
        else:
            n_ph = manifest_or_inventory_size
        return AcousticConfig(
            n_phonemes=n_ph, n_speakers=n_speakers, n_mels=n_mels,
            phoneme_emb_dim=self.phoneme_emb_dim, speaker_emb_dim=self.speaker_emb_dim,
            encoder_dim=self.encoder_dim, decoder_dim=self.decoder_dim, decoder_layers=self.decoder_layers,
            postnet_dim=self.postnet_dim, postnet_layers=self.postnet_layers,
            predictor_hidden=self.predictor_hidden, fe_enabled=self.fe_enabled,
            f0_bins=self.f0_bins, energy_bins=self.energy_bins, log_durations=self.log_durations,
        )

    def predictor_config(self, acoustic: AcousticConfig) -> PredictorConfig:
        return PredictorConfig(
            n_mels=acoustic.n_mels, n_speakers=acoustic.n_speakers,
            phoneme_emb_dim=acoustic.phoneme_emb_dim, speaker_emb_dim=acoustic.speaker_emb_dim,
            ref_channels=self.ref_channels, ref_hidden=self.ref_hidden,
            content_dim=self.content_dim, speaker_dim=self.speaker_dim, adversary_hidden=self.ref_hidden,
            content_input_norm=self.content_input_norm,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path: str | Path, **overrides) -> TrainConfig:
    """Read a flat TOML file whose keys mirror :class:`TrainConfig`."""
    with open(path, "rb") as fh:
        data = tomli.load(fh)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(data)


def dump_config(config: TrainConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


class TripletTTS(nn.Module):
    """Acoustic model plus the two auxiliary predictors under distinct name prefixes."""

    def __init__(self, acoustic: AcousticConfig, predictor: PredictorConfig):
        super().__init__()
        self.acoustic = AcousticModel(acoustic)
        self.cp = ContentPredictor(predictor)
        self.sp = SpeakerPredictor(predictor)

    def f_content(self, segment_lists):
        return self.cp.f_content(segment_lists)

    def f_speaker(self, mels):
        return self.sp.f_speaker(mels)


@dataclass
class LossReport:
    step: int
    stage: int
    recon: float
    dur: float
    res: float
    recon_ling: Optional[float] = None
    recon_spk: Optional[float] = None
    adv: Optional[float] = None
    f0: Optional[float] = None
    energy: Optional[float] = None
    triplet_content: Optional[float] = None
    triplet_speaker: Optional[float] = None
    total: float = 0.0
    n_triplets: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def triplet(self) -> Optional[float]:
        if self.triplet_content is None:
            return None
        return self.triplet_content + self.triplet_speaker

    def to_record(self) -> dict:
        rec = asdict(self)
        extra = rec.pop("extra")
        rec.update(extra)
        return rec


def expected_total(report: LossReport, config: TrainConfig) -> float:
    """Recombine a report's terms with the configured weights (float64)."""
    total = report.recon + report.dur + report.res
    if report.stage == 1:
        total += report.recon_ling + report.recon_spk + config.lambda_adv * report.adv
    else:
        trip = (report.triplet_content or 0.0) + (report.triplet_speaker or 0.0)
        total += trip
        if config.fe_enabled and config.literal_fe_triplet:
            total += trip
    if config.fe_enabled:
        total += report.f0 + report.energy
    return total


@dataclass
class Stage1Outputs:
    acoustic: AcousticOutputs
    content: ContentEncoding
    speaker: SpeakerEncoding
    adv_logits: torch.Tensor
    e_content: torch.Tensor
    e_speaker: torch.Tensor


def run_stage1(model: TripletTTS, batch: Batch) -> Stage1Outputs:
    out = model.acoustic(batch)
    content = model.cp(batch.mel, batch.durations, batch.phoneme_mask)
    speaker = model.sp(batch.mel, batch.frame_mask)
    logits = model.cp.speaker_logits(content.segment_summary)
    e_content = model.acoustic.phoneme_embedding(batch.phonemes) * batch.phoneme_mask.unsqueeze(-1)
    e_speaker = model.acoustic.speaker_embedding(batch.speakers)
    return Stage1Outputs(out, content, speaker, logits, e_content, e_speaker)


def _acoustic_terms(out: AcousticOutputs, batch: Batch, config: TrainConfig, acoustic_cfg: AcousticConfig):
    norm = config.normalize_losses
    mel = batch.mel.to(out.mel_pre.dtype)
    terms = {
        "recon": masked_l1(out.mel_pre, mel, batch.frame_mask, norm),
        "dur": duration_loss(out.durations_pred, batch.durations, batch.phoneme_mask, acoustic_cfg.log_durations, norm),
        "res": masked_l1(out.mel_post, mel, batch.frame_mask, norm),
    }
    if acoustic_cfg.fe_enabled:
        terms["f0"] = prosody_loss(out.f0_pred, batch.f0, batch.phoneme_mask, acoustic_cfg.f0_range_hz, norm)
        terms["energy"] = prosody_loss(out.energy_pred, batch.energy, batch.phoneme_mask, acoustic_cfg.energy_range, norm)
    return terms


def _check_finite(terms: dict, step: int):
    bad = [k for k, v in terms.items() if not torch.isfinite(v).all()]
    if bad:
        raise NumericError(f"step {step}: non-finite loss terms {bad}")


def stage1_loss(outputs: Stage1Outputs, batch: Batch, config: TrainConfig, acoustic_cfg: AcousticConfig,
                step: int = 0) -> tuple[torch.Tensor, LossReport]:
    terms = _acoustic_terms(outputs.acoustic, batch, config, acoustic_cfg)
    ling, spk = reconstruction_losses(outputs.content, outputs.speaker, outputs.e_content, outputs.e_speaker,
                                      batch.phoneme_mask, normalize=config.normalize_losses)
    terms["recon_ling"], terms["recon_spk"] = ling, spk
    terms["adv"] = adversarial_speaker_loss(outputs.adv_logits, batch.speakers, batch.phoneme_mask)
    _check_finite(terms, step)
    total = (terms["recon"] + terms["dur"] + terms["res"] + terms["recon_ling"] + terms["recon_spk"]
             + config.lambda_adv * terms["adv"])
    if acoustic_cfg.fe_enabled:
        total = total + terms["f0"] + terms["energy"]
    report = LossReport(step=step, stage=1, total=float(total.detach()), **{k: float(v.detach()) for k, v in terms.items()})
    return total, report


def stage2_loss(acoustic_out: AcousticOutputs, batch: Batch, triplet: TripletLossTerms, config: TrainConfig,
                acoustic_cfg: AcousticConfig, step: int = 0) -> tuple[torch.Tensor, LossReport]:
    terms = _acoustic_terms(acoustic_out, batch, config, acoustic_cfg)
    terms["triplet_content"] = triplet.content
    terms["triplet_speaker"] = triplet.speaker
    _check_finite(terms, step)
    trip = triplet.content + triplet.speaker
    total = terms["recon"] + terms["dur"] + terms["res"] + trip
    if acoustic_cfg.fe_enabled:
        total = total + terms["f0"] + terms["energy"]
        if config.literal_fe_triplet:
            total = total + trip
    report = LossReport(step=step, stage=2, total=float(total.detach()), n_triplets=len(triplet.rows),
                        **{k: float(v.detach()) for k, v in terms.items()})
    return total, report


@dataclass
class FreezeRegistry:
    names: list[str]
    prefixes: list[str]

    def __contains__(self, name):
        return name in self.names


def apply_freeze(model: nn.Module, prefixes: Iterable[str]) -> FreezeRegistry:
    """Stop updates for every parameter whose name starts with one of ``prefixes``.

    Frozen tensors still pass sensitivities to their inputs; they simply
    receive no gradient of their own and are left out of the optimizer.
    """
    prefixes = list(prefixes)
    named = dict(model.named_parameters())
    frozen = []
    for prefix in prefixes:
        hits = [n for n in named if n.startswith(prefix)]
        if not hits:
            raise ConfigurationError(f"freeze prefix {prefix!r} matches no parameter")
        frozen.extend(h for h in hits if h not in frozen)
    for name in frozen:
        named[name].requires_grad_(False)
    return FreezeRegistry(sorted(frozen), prefixes)


def speaker_f0_stats(manifest: CorpusManifest, split: str = "train") -> dict[str, tuple[float, float]]:
    stats = {}
    for tag in manifest.speaker_tags:
        values = [v for u in manifest.split(split) if u.speaker == tag for v in u.f0]
        if values:
            stats[tag] = (float(np.mean(values)), float(np.std(values)))
    return stats


def _step_seed(seed: int, stage: int, step: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([seed, stage, step, stream]).generate_state(1)[0])


@dataclass
class TrainResult:
    model: TripletTTS
    reports: list[LossReport]
    stop_reason: str
    checkpoint: Optional[Path] = None
    triplet_start: Optional[float] = None
    frozen: Optional[FreezeRegistry] = None


class Trainer:
    """Owns the model, optimizer, and step counter for one training stage."""

    def __init__(self, config: TrainConfig, manifest: CorpusManifest, init: Optional[str | Path] = None,
                 resume: Optional[str | Path] = None):
        self.config = config
        self.manifest = manifest
        self.acoustic_cfg = config.acoustic_config(manifest)
        self.predictor_cfg = config.predictor_config(self.acoustic_cfg)
        self.step_count = 0
        self.reports: list[LossReport] = []
        self.triplet_history: list[float] = []
        self.degenerate = Counter()
        self.frozen: Optional[FreezeRegistry] = None
        torch.manual_seed(config.seed)
        self.model = TripletTTS(self.acoustic_cfg, self.predictor_cfg)
        if config.stage == 2 and init is None and resume is None:
            raise ConfigurationError("stage II needs a stage-I checkpoint (init)")
        if init is not None:
            state = load_checkpoint(init)
            self._check_compatible(state)
            self.model.load_state_dict(state.model_state)
        if config.stage == 2:
            self.frozen = apply_freeze(self.model, config.freeze_prefixes)
        trainable = [p for p in self.model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.Adam(trainable, lr=config.lr)
        self.f0_stats = speaker_f0_stats(manifest)
        if resume is not None:
            state = load_checkpoint(resume)
            self._check_compatible(state)
            self.model.load_state_dict(state.model_state)
            self.optimizer.load_state_dict(state.optimizer_state)
            self.step_count = state.step
            self.triplet_history = list(state.meta.get("triplet_history", []))
            torch.set_rng_state(state.rng_state)

    def _check_compatible(self, state: "CheckpointState"):
        if state.acoustic_config.to_dict() != self.acoustic_cfg.to_dict():
            raise CheckpointError("checkpoint acoustic config does not match the training config")
        if state.predictor_config.to_dict() != self.predictor_cfg.to_dict():
            raise CheckpointError("checkpoint predictor config does not match the training config")
        if state.meta.get("inventory_digest") != self.manifest.inventory.digest():
            raise CheckpointError("checkpoint was trained on a different phoneme inventory")

    def batch_for(self, step: int) -> Batch:
        seed = _step_seed(self.config.seed, self.config.stage, step)
        return load_batch(self.manifest, self.config.batch_size, seed)

    def _triplet_rng(self, step: int):
        return np.random.default_rng(_step_seed(self.config.seed, self.config.stage, step, 1))

    def _triplets(self, batch: Batch, step: int):
        cfg = self.config
        return construct_triplets(
            batch, self.model.acoustic, self.manifest, self._triplet_rng(step), cap=cfg.triplet_cap, start=step,
            duration_source=cfg.triplet_duration_source, prosody_transfer=cfg.triplet_prosody_transfer,
            f0_map=None,
        )

    def compute(self, batch: Batch, step: int):
        """Forward pass and loss for ``batch`` under the current stage."""
        if self.config.stage == 1:
            outputs = run_stage1(self.model, batch)
            return stage1_loss(outputs, batch, self.config, self.acoustic_cfg, step)
        out = self.model.acoustic(batch)
        construction = self._triplets(batch, step)
        trip = triplet_terms(construction.pairs, self.config.weights, self.model.f_content, self.model.f_speaker,
                             counter=self.degenerate)
        total, report = stage2_loss(out, batch, trip, self.config, self.acoustic_cfg, step)
        s = construction.stats
        report.extra = {
            "triplet_candidates": s.candidates,
            "triplet_skipped": s.skipped_no_cross + s.skipped_no_negative + s.skipped_cap,
            "triplets": trip.rows,
        }
        return total, report

    def step(self) -> LossReport:
        step = self.step_count
        self.model.train()
        batch = self.batch_for(step)
        self.optimizer.zero_grad(set_to_none=True)
        total, report = self.compute(batch, step)
        total.backward()
        self.optimizer.step()
        self.step_count += 1
        self.reports.append(report)
        if self.config.stage == 2:
            self.triplet_history.append(report.triplet or 0.0)
        return report

    def converged(self) -> bool:
        w = self.config.convergence_window
        h = self.triplet_history
        if len(h) < 2 * w:
            return False
        prev = float(np.mean(h[-2 * w:-w]))
        cur = float(np.mean(h[-w:]))
        if prev <= 0.0:
            return True
        return (prev - cur) / prev < self.config.convergence_floor

    @torch.no_grad()
    def triplet_baseline(self, n_steps: Optional[int] = None) -> float:
        """Mean triplet loss of the current weights over the next ``n_steps`` batches, without updating."""
        n_steps = n_steps or self.config.convergence_window
        values = []
        for step in range(self.step_count, self.step_count + n_steps):
            batch = self.batch_for(step)
            construction = self._triplets(batch, step)
            trip = triplet_terms(construction.pairs, self.config.weights, self.model.f_content, self.model.f_speaker)
            values.append(float(trip.total))
        return float(np.mean(values))

    def run(self, max_steps: Optional[int] = None, log_path: Optional[str | Path] = None,
            checkpoint_path: Optional[str | Path] = None, measure_triplet_start: bool = False) -> TrainResult:
        max_steps = self.config.max_steps if max_steps is None else max_steps
        triplet_start = None
        if self.config.stage == 2 and measure_triplet_start and max_steps > 0:
            triplet_start = self.triplet_baseline()
        log = open(log_path, "a") if log_path else None
        reason = "max_steps"
        try:
            while self.step_count < max_steps:
                report = self.step()
                if log:
                    log.write(json.dumps(report.to_record(), sort_keys=True) + "\n")
                if report.step % 100 == 0:
                    logger.info("stage %d step %d total %.4f", self.config.stage, report.step, report.total)
                if self.config.stage == 2 and self.converged():
                    reason = "converged"
                    break
        finally:
            if log:
                log.close()
        path = None
        if checkpoint_path is not None:
            path = Path(checkpoint_path)
            save_checkpoint(self.state(), path)
        return TrainResult(self.model, self.reports, reason, path, triplet_start, self.frozen)

    def state(self) -> "CheckpointState":
        meta = {
            "stage": self.config.stage,
            "inventory": self.manifest.inventory.to_record(),
            "inventory_digest": self.manifest.inventory.digest(),
            "speakers": [list(s) for s in self.manifest.speakers],
            "anchor_speaker_of": self.manifest.anchor_speaker_of,
            "f0_stats": self.f0_stats,
            "triplet_history": self.triplet_history,
            "frozen": self.frozen.names if self.frozen else [],
        }
        return CheckpointState(
            model_state=self.model.state_dict(),
            optimizer_state=self.optimizer.state_dict(),
            rng_state=torch.get_rng_state(),
            train_config=self.config,
            acoustic_config=self.acoustic_cfg,
            predictor_config=self.predictor_cfg,
            step=self.step_count,
            meta=meta,
        )


@dataclass
class CheckpointState:
    model_state: dict
    optimizer_state: dict
    rng_state: torch.Tensor
    train_config: TrainConfig
    acoustic_config: AcousticConfig
    predictor_config: PredictorConfig
    step: int
    meta: dict

    def build_model(self) -> TripletTTS:
        model = TripletTTS(self.acoustic_config, self.predictor_config)
        model.load_state_dict(self.model_state)
        model.eval()
        return model


def save_checkpoint(state: CheckpointState, path: str | Path) -> None:
    optim_meta, optim_tensors = ckpt.flatten_optimizer_state(state.optimizer_state)
    tensors = {f"param/{k}": v for k, v in state.model_state.items()}
    tensors.update(optim_tensors)
    tensors["rng"] = state.rng_state
    header = {
        "train_config": state.train_config.to_dict(),
        "acoustic_config": state.acoustic_config.to_dict(),
        "predictor_config": state.predictor_config.to_dict(),
        "optimizer": optim_meta,
        "step": state.step,
        "meta": state.meta,
    }
    ckpt.write_container(path, header, tensors)


def load_checkpoint(path: str | Path) -> CheckpointState:
    header, tensors = ckpt.read_container(path)
    try:
        model_state = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
        return CheckpointState(
            model_state=model_state,
            optimizer_state=ckpt.unflatten_optimizer_state(header["optimizer"], tensors),
            rng_state=tensors["rng"],
            train_config=TrainConfig.from_dict(header["train_config"]),
            acoustic_config=AcousticConfig(**header["acoustic_config"]),
            predictor_config=PredictorConfig(**header["predictor_config"]),
            step=header["step"],
            meta=header["meta"],
        )
    except (KeyError, TypeError, ConfigurationError) as exc:
        raise CheckpointError(f"{path}: incomplete checkpoint ({exc})") from exc


def train(config: TrainConfig, manifest: CorpusManifest, init: Optional[str | Path] = None,
          checkpoint_path: Optional[str | Path] = None, log_path: Optional[str | Path] = None,
          measure_triplet_start: bool = False) -> TrainResult:
    trainer = Trainer(config, manifest, init=init)
    return trainer.run(log_path=log_path, checkpoint_path=checkpoint_path, measure_triplet_start=measure_triplet_start)


@torch.no_grad()
def teacher_forced_recon(model: TripletTTS, manifest: CorpusManifest, split: str = "test",
                         batch_size: int = 32) -> float:
    """Frame-weighted mean |m - m_hat| over ``split`` with ground-truth durations."""
    utts = manifest.split(split)
    if not utts:
        raise ConfigurationError(f"split {split!r} is empty")
    err, count = 0.0, 0
    for i in range(0, len(utts), batch_size):
        batch = collate(utts[i:i + batch_size], manifest)
        out = model.acoustic(batch)
        m = batch.frame_mask.unsqueeze(-1).to(out.mel_pre.dtype)
        err += float(((out.mel_pre - batch.mel).abs() * m).sum())
        count += int(m.sum()) * batch.mel.shape[-1]
    return err / count


def probe_encodings(model: TripletTTS, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    """f_C and f_S outputs on ground-truth mels of ``batch``."""
    with torch.no_grad():
        z_c = model.cp(batch.mel, batch.durations, batch.phoneme_mask).z
        z_s = model.sp(batch.mel, batch.frame_mask).z
    return z_c, z_s


def noise_floor(manifest: CorpusManifest) -> float:
    """Expected |noise| per mel bin of the toy generator."""
    return manifest.noise_std * math.sqrt(2.0 / math.pi)
