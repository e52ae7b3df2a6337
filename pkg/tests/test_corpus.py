import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ttts.acoustic_model import masked_l1
from ttts.corpus import (
    MelSpectrogram,
    PhonemeInventory,
    SpeakerSpec,
    Utterance,
    collate,
    default_inventory,
    frames_for_seconds,
    generate_toy_corpus,
    generator_for,
    load_batch,
    load_manifest,
    read_mel,
    save_manifest,
    segment_mel,
    write_mel,
)
from ttts.errors import AlignmentError, ConfigurationError


def test_inventory_has_shared_symbols_and_unique_names():
    inv = default_inventory()
    assert len(set(inv.symbols)) == len(inv.symbols) == 30
    assert "shared" in inv.language_of.values()
    assert set(inv.languages) == {"L1", "L2"}


def test_inventory_rejects_duplicates_and_missing_shared():
    with pytest.raises(ConfigurationError):
        PhonemeInventory(("a", "a", "x"), {"a": "L1", "x": "shared"})
    with pytest.raises(ConfigurationError):
        PhonemeInventory(("a", "b"), {"a": "L1", "b": "L2"})


def test_same_seed_gives_byte_identical_manifests(tmp_path):
    a = save_manifest(generate_toy_corpus(3, seed=7, n_mels=16), tmp_path / "a")
    b = save_manifest(generate_toy_corpus(3, seed=7, n_mels=16), tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    for mel_a in sorted((tmp_path / "a" / "mels").iterdir()):
        assert mel_a.read_bytes() == (tmp_path / "b" / "mels" / mel_a.name).read_bytes()


def test_one_utterance_per_speaker_counts():
    m = generate_toy_corpus(1, seed=1, n_mels=16)
    assert len(m.utterances) == 3
    for u in m.utterances:
        assert len(u.durations) == len(u.phonemes) == len(u.f0) == len(u.energy)
        assert sum(u.durations) == u.mel.n_frames
        assert min(u.durations) >= 1
        assert 5 <= len(u.phonemes) <= 20


def test_corpus_needs_two_languages():
    inv = default_inventory()
    speakers = [SpeakerSpec("A", "L1", True), SpeakerSpec("B", "L1"), SpeakerSpec("C", "L1")]
    with pytest.raises(ConfigurationError):
        generate_toy_corpus(1, inventory=inv, speakers=speakers)


def test_manifest_anchor_registry(small_manifest):
    m = small_manifest
    assert m.anchor_speaker_of == {"L1": "L1-A", "L2": "L2-A"}
    for lang, tag in m.anchor_speaker_of.items():
        assert m.native_language(tag) == lang
    for u in m.utterances:
        assert u.language == m.native_language(u.speaker)


def test_manifest_round_trip(tmp_path, small_manifest):
    path = save_manifest(small_manifest, tmp_path)
    loaded = load_manifest(path)
    assert [u.utt_id for u in loaded.utterances] == [u.utt_id for u in small_manifest.utterances]
    for a, b in zip(loaded.utterances, small_manifest.utterances):
        assert np.array_equal(a.mel.frames, b.mel.frames)
        assert a.durations == b.durations and a.f0 == b.f0
    assert loaded.inventory.digest() == small_manifest.inventory.digest()


def test_mel_file_header_and_round_trip(tmp_path):
    frames = np.arange(12, dtype=np.float32).reshape(3, 4)
    write_mel(tmp_path / "x.mel", MelSpectrogram(frames))
    raw = (tmp_path / "x.mel").read_bytes()
    assert raw[:4] == b"TMEL" and len(raw) == 16 + frames.nbytes
    assert np.array_equal(read_mel(tmp_path / "x.mel").frames, frames)


def test_mel_rejects_non_finite():
    with pytest.raises(Exception):
        MelSpectrogram(np.array([[np.nan, 0.0]], dtype=np.float32))


def test_segment_examples():
    mel = np.arange(12, dtype=np.float32).reshape(6, 2)
    segs = segment_mel(mel, [2, 3, 1])
    assert [s.shape[0] for s in segs] == [2, 3, 1]
    assert np.array_equal(np.concatenate(segs), mel)
    assert np.array_equal(segment_mel(mel, [6])[0], mel)
    with pytest.raises(AlignmentError):
        segment_mel(mel, [2, 3, 2])
    with pytest.raises(AlignmentError):
        segment_mel(mel, [3, 0, 3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=10))
def test_segment_partition_is_bit_exact(durations):
    rng = np.random.default_rng(len(durations))
    mel = rng.normal(size=(sum(durations), 3)).astype(np.float32)
    segs = segment_mel(mel, durations)
    assert np.array_equal(np.concatenate(segs), mel)
    assert [s.shape[0] for s in segs] == durations


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 30.0))
def test_frames_for_seconds(seconds):
    assert frames_for_seconds(seconds) == round(100 * seconds)


def test_utterance_invariants_are_enforced():
    mel = MelSpectrogram(np.zeros((5, 2), dtype=np.float32))
    with pytest.raises(AlignmentError):
        Utterance("u", [0, 1], "L1", "A", mel, [2, 2], [1.0, 1.0], [1.0, 1.0])
    with pytest.raises(AlignmentError):
        Utterance("u", [0, 1], "L1", "A", mel, [5, 0], [1.0, 1.0], [1.0, 1.0])
    with pytest.raises(AlignmentError):
        Utterance("u", [0, 1], "L1", "A", mel, [2, 3], [1.0], [1.0, 1.0])


def test_template_correlation_same_phoneme_beats_different_phonemes(small_manifest):
    gen = generator_for(small_manifest)
    n_ph = len(small_manifest.inventory)
    same, diff = [], []
    for p in range(n_ph):
        a = gen.clean_frame(p, 0, 200.0, 1.0)
        b = gen.clean_frame(p, 2, 200.0, 1.0)
        same.append(np.corrcoef(a, b)[0, 1])
        for q in range(n_ph):
            if q != p:
                diff.append(np.corrcoef(a, gen.clean_frame(q, 0, 200.0, 1.0))[0, 1])
    assert np.mean(same) > np.mean(diff)
    assert np.min(same) > np.mean(diff)


def test_same_text_different_speakers_differ(small_manifest):
    gen = generator_for(small_manifest)
    ph = [0, 1, 24]
    a = gen.render("a", ph, "L1-A", "L1", np.random.default_rng(0))
    b = gen.render("b", ph, "L1-B", "L1", np.random.default_rng(0))
    assert a.mel.frames.shape != b.mel.frames.shape or not np.allclose(a.mel.frames, b.mel.frames)


def test_averaged_segments_match_template_plus_tint(small_manifest):
    m = small_manifest
    gen = generator_for(m)
    for u in m.utterances[:20]:
        s = gen.speaker_position(u.speaker)
        for seg, p, f0, e in zip(segment_mel(u.mel, u.durations), u.phonemes, u.f0, u.energy):
            expected = gen.clean_frame(p, s, f0, e)
            bound = 5 * m.noise_std / math.sqrt(seg.shape[0])
            assert np.abs(seg.mean(0) - expected).max() < bound


def test_load_batch_determinism_and_size(small_manifest):
    a = load_batch(small_manifest, 16, 5)
    b = load_batch(small_manifest, 16, 5)
    assert len(a) == 16
    assert [u.utt_id for u in a.utts] == [u.utt_id for u in b.utts]
    with pytest.raises(ConfigurationError):
        load_batch(small_manifest, 0, 5)


def _utt_with_frames(n_frames, speaker="L1-A"):
    mel = MelSpectrogram(np.ones((n_frames, 16), dtype=np.float32))
    return Utterance(f"u{n_frames}", [0], "L1", speaker, mel, [n_frames], [200.0], [1.0])


def test_padding_masks(small_manifest):
    batch = collate([_utt_with_frames(4), _utt_with_frames(9)], small_manifest)
    assert batch.mel.shape[1] == 9
    assert batch.frame_lengths.tolist() == [4, 9]
    assert not batch.frame_mask[0, 4:].any()


def test_padding_never_changes_the_masked_loss(small_manifest):
    utts = small_manifest.split("train")[:3]
    batch = collate(utts, small_manifest)
    pred = batch.mel + 0.1 * torch.randn_like(batch.mel)
    base = masked_l1(pred, batch.mel, batch.frame_mask)
    # an extra row that is entirely padding must not move the normalized loss
    pad = torch.full((1,) + batch.mel.shape[1:], 7.0)
    pred2 = torch.cat([pred, pad])
    target2 = torch.cat([batch.mel, -pad])
    mask2 = torch.cat([batch.frame_mask, torch.zeros(1, batch.mel.shape[1], dtype=torch.bool)])
    assert torch.allclose(base, masked_l1(pred2, target2, mask2), rtol=0, atol=1e-7)
    # and padded positions of real rows are ignored whatever they contain
    garbage = pred.clone()
    garbage[~batch.frame_mask] = 1e3
    assert torch.equal(masked_l1(garbage, batch.mel, batch.frame_mask), base)


def test_toy_corpus_scale():
    m = generate_toy_corpus(200, seed=7, n_mels=8)
    assert len(m.utterances) == 600
    assert len(m.split("test")) == 60
