import json
import math

import pytest
import torch

from conftest import tiny_config
from ttts.acoustic_model import AcousticOutputs
from ttts.corpus import collate
from ttts.errors import CheckpointError, ConfigurationError
from ttts.predictors import ContentEncoding, SpeakerEncoding
from ttts.trainer import (
    STAGE2_FREEZE,
    Stage1Outputs,
    TrainConfig,
    Trainer,
    apply_freeze,
    dump_config,
    expected_total,
    load_checkpoint,
    load_config,
    probe_encodings,
    stage1_loss,
    stage2_loss,
    teacher_forced_recon,
)
from ttts.triplet import TripletLossTerms


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.lr, c.batch_size, c.lambda_adv, c.alpha, c.beta) == (1e-4, 16, 0.025, 1.0, 0.02)
    assert c.freeze_prefixes == STAGE2_FREEZE
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(stage=3)
    with pytest.raises(ConfigurationError):
        TrainConfig(stage=2, freeze_prefixes=[])


def test_config_file_round_trip(tmp_path):
    cfg = tiny_config(lr=3e-3)
    path = tmp_path / "cfg.toml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert load_config(path, stage=2).stage == 2
    path.write_text("stage = 1\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigurationError):
        load_config(path)


def _perfect_stage1(batch, acoustic_cfg):
    mel = batch.mel
    out = AcousticOutputs(
        mel_pre=mel, residual=torch.zeros_like(mel), mel_post=mel,
        durations_pred=torch.log(batch.durations.clamp(min=1).float()),
        durations_used=batch.durations, frame_mask=batch.frame_mask, phoneme_mask=batch.phoneme_mask,
    )
    e_c = torch.randn(*batch.phonemes.shape, 8)
    e_s = torch.randn(len(batch), 4)
    content = ContentEncoding(torch.zeros(*batch.phonemes.shape, 4), e_c.clone(), torch.zeros(*batch.phonemes.shape, 4))
    speaker = SpeakerEncoding(torch.zeros(len(batch), 4), e_s.clone())
    logits = torch.zeros(*batch.phonemes.shape, 3)
    return Stage1Outputs(out, content, speaker, logits, e_c, e_s)


def test_stage1_perfect_predictions_leave_only_adversarial_term(small_manifest):
    batch = collate(small_manifest.utterances[:4], small_manifest)
    cfg = tiny_config()
    acfg = cfg.acoustic_config(small_manifest)
    total, report = stage1_loss(_perfect_stage1(batch, acfg), batch, cfg, acfg)
    assert math.isclose(float(total), 0.025 * math.log(3), rel_tol=1e-6)
    assert math.isclose(float(total), 0.025 * 1.0986, rel_tol=1e-4)
    cfg0 = tiny_config(lambda_adv=0.0)
    total0, _ = stage1_loss(_perfect_stage1(batch, acfg), batch, cfg0, acfg)
    assert float(total0) == 0.0
    assert report.total == pytest.approx(report.recon + report.dur + report.res + report.recon_ling
                                         + report.recon_spk + 0.025 * report.adv, rel=1e-6)


def _zero_triplets():
    z = torch.zeros(())
    return TripletLossTerms(z, z, z, [])


def test_stage2_totals(small_manifest):
    batch = collate(small_manifest.utterances[:4], small_manifest)
    cfg = tiny_config(stage=2)
    acfg = cfg.acoustic_config(small_manifest)
    perfect = _perfect_stage1(batch, acfg).acoustic
    noisy = AcousticOutputs(batch.mel + 0.1, torch.zeros_like(batch.mel), batch.mel + 0.2,
                            torch.zeros(batch.phonemes.shape), batch.durations, batch.frame_mask, batch.phoneme_mask)
    total, rep = stage2_loss(noisy, batch, _zero_triplets(), cfg, acfg)
    assert math.isclose(float(total), rep.recon + rep.dur + rep.res, rel_tol=1e-6)
    trip = TripletLossTerms(torch.tensor(0.31), torch.tensor(0.3), torch.tensor(0.01), [{}])
    total, rep = stage2_loss(perfect, batch, trip, cfg, acfg)
    assert math.isclose(float(total), 0.31, rel_tol=1e-6)
    assert rep.recon_ling is None and rep.recon_spk is None and rep.adv is None


def test_literal_fe_formula_counts_triplet_twice(small_manifest):
    batch = collate(small_manifest.utterances[:4], small_manifest)
    trip = TripletLossTerms(torch.tensor(0.5), torch.tensor(0.5), torch.tensor(0.0), [{}])
    results = {}
    for literal in (False, True):
        cfg = tiny_config(stage=2, fe_enabled=True, literal_fe_triplet=literal)
        acfg = cfg.acoustic_config(small_manifest)
        out = _perfect_stage1(batch, acfg).acoustic
        out.f0_pred, out.energy_pred = batch.f0, batch.energy
        total, rep = stage2_loss(out, batch, trip, cfg, acfg)
        assert math.isclose(rep.total, expected_total(rep, cfg), rel_tol=1e-6)
        results[literal] = float(total)
    assert results[False] == pytest.approx(0.5) and results[True] == pytest.approx(1.0)


def _stage1_checkpoint(manifest, tmp_path, steps=3, **kw):
    cfg = tiny_config(max_steps=steps, **kw)
    path = tmp_path / "s1.ckpt"
    result = Trainer(cfg, manifest).run(checkpoint_path=path, log_path=tmp_path / "s1.jsonl")
    return path, result


def test_reports_reconstruct_from_terms(small_manifest, tmp_path):
    path, result = _stage1_checkpoint(small_manifest, tmp_path, steps=5)
    cfg = tiny_config()
    for rep in result.reports:
        assert rep.total == pytest.approx(expected_total(rep, cfg), rel=1e-6)
    cfg2 = tiny_config(stage=2, max_steps=5)
    res2 = Trainer(cfg2, small_manifest, init=path).run()
    for rep in res2.reports:
        assert rep.total == pytest.approx(expected_total(rep, cfg2), rel=1e-6)


def test_stage2_needs_checkpoint(small_manifest):
    with pytest.raises(ConfigurationError):
        Trainer(tiny_config(stage=2), small_manifest)


def test_apply_freeze_rejects_unknown_prefix(small_manifest):
    tr = Trainer(tiny_config(), small_manifest)
    with pytest.raises(ConfigurationError):
        apply_freeze(tr.model, ["decoder_typo."])
    reg = apply_freeze(tr.model, ["sp."])
    assert reg.names and all(n.startswith("sp.") for n in reg.names)


def test_freeze_keeps_parameters_and_optimizer_state(small_manifest, tmp_path):
    path, _ = _stage1_checkpoint(small_manifest, tmp_path)
    tr = Trainer(tiny_config(stage=2), small_manifest, init=path)
    before = {n: p.detach().clone() for n, p in tr.model.named_parameters()}
    tr.run(max_steps=5)
    frozen = set(tr.frozen.names)
    for name, p in tr.model.named_parameters():
        if name in frozen:
            assert torch.equal(p, before[name]), name
    assert any(not torch.equal(p, before[n]) for n, p in tr.model.named_parameters() if n not in frozen)
    tracked = {id(p) for group in tr.optimizer.param_groups for p in group["params"]}
    for name, p in tr.model.named_parameters():
        if name in frozen:
            assert id(p) not in tracked and p not in tr.optimizer.state


def test_frozen_parameters_still_pass_sensitivity(small_manifest, tmp_path):
    path, _ = _stage1_checkpoint(small_manifest, tmp_path)
    tr = Trainer(tiny_config(stage=2), small_manifest, init=path)
    total, _ = tr.compute(tr.batch_for(0), 0)
    total.backward()
    assert tr.model.acoustic.speaker_embedding.weight.grad is None
    assert tr.model.acoustic.decoder_rnn.weight_ih_l0.grad is not None


def test_same_seed_same_log(small_manifest, tmp_path):
    logs = []
    for k in range(2):
        log = tmp_path / f"run{k}.jsonl"
        Trainer(tiny_config(max_steps=4), small_manifest).run(log_path=log)
        logs.append(log.read_text())
    assert logs[0] == logs[1]
    assert len(logs[0].splitlines()) == 4
    json.loads(logs[0].splitlines()[0])


def test_zero_step_stage2_preserves_weights(small_manifest, tmp_path):
    path, _ = _stage1_checkpoint(small_manifest, tmp_path)
    out = tmp_path / "s2.ckpt"
    Trainer(tiny_config(stage=2, max_steps=0), small_manifest, init=path).run(checkpoint_path=out)
    a, b = load_checkpoint(path), load_checkpoint(out)
    assert a.model_state.keys() == b.model_state.keys()
    for k in a.model_state:
        assert torch.equal(a.model_state[k], b.model_state[k])


def test_checkpoint_round_trip_bitwise(small_manifest, tmp_path):
    path, result = _stage1_checkpoint(small_manifest, tmp_path)
    state = load_checkpoint(path)
    for name, value in result.model.state_dict().items():
        assert torch.equal(state.model_state[name], value)
    assert state.train_config == tiny_config(max_steps=3)
    assert state.step == 3


def test_truncated_and_corrupt_checkpoints(small_manifest, tmp_path):
    path, _ = _stage1_checkpoint(small_manifest, tmp_path)
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.ckpt")
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "flip.ckpt")
    (tmp_path / "tiny.ckpt").write_bytes(b"TTTS")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "tiny.ckpt")


def test_checkpoint_config_mismatch(small_manifest, tmp_path):
    path, _ = _stage1_checkpoint(small_manifest, tmp_path)
    with pytest.raises(CheckpointError):
        Trainer(tiny_config(stage=2, decoder_dim=6), small_manifest, init=path)


def test_resume_reproduces_unbroken_log(small_manifest, tmp_path):
    Trainer(tiny_config(max_steps=6), small_manifest).run(log_path=tmp_path / "full.jsonl")
    first = Trainer(tiny_config(max_steps=6), small_manifest)
    first.run(max_steps=3, log_path=tmp_path / "split.jsonl", checkpoint_path=tmp_path / "mid.ckpt")
    Trainer(tiny_config(max_steps=6), small_manifest, resume=tmp_path / "mid.ckpt").run(log_path=tmp_path / "split.jsonl")
    assert (tmp_path / "full.jsonl").read_text() == (tmp_path / "split.jsonl").read_text()


def test_convergence_rule(small_manifest):
    tr = Trainer(tiny_config(convergence_window=3), small_manifest)
    tr.triplet_history = [1.0] * 5
    assert not tr.converged()
    tr.triplet_history = [1.0, 1.0, 1.0, 0.5, 0.5, 0.5]
    assert not tr.converged()
    tr.triplet_history = [1.0, 1.0, 1.0, 0.995, 0.995, 0.995]
    assert tr.converged()


def test_probe_and_teacher_forced_recon(small_manifest):
    tr = Trainer(tiny_config(), small_manifest)
    batch = collate(small_manifest.split("test")[:2], small_manifest)
    z_c, z_s = probe_encodings(tr.model, batch)
    assert z_c.shape[:2] == batch.phonemes.shape and z_s.shape[0] == 2
    assert teacher_forced_recon(tr.model, small_manifest) > 0
