from collections import Counter, defaultdict

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ttts.corpus import collate, load_batch
from ttts.errors import ConfigurationError, InputError
from oracles import StubSynthesizer, run_equivalence
from ttts.triplet import (
    TripletWeights,
    construct_triplets,
    cosine_distance,
    plan_triplets,
    triplet_loss,
    triplet_objective,
    triplet_terms,
)


def test_cosine_distance_examples_and_symmetry():
    assert float(cosine_distance([1, 0], [1, 0])) == 0.0
    assert float(cosine_distance([1, 0], [0, 1])) == 1.0
    assert float(cosine_distance([1, 0], [-1, 0])) == 2.0
    a, b = torch.randn(10, 5), torch.randn(10, 5)
    assert torch.allclose(cosine_distance(a, b), cosine_distance(b, a))


def test_cosine_distance_zero_norm_guard_counts():
    counter = Counter()
    d = cosine_distance(torch.zeros(3), torch.tensor([1.0, 0.0, 0.0]), counter=counter)
    assert torch.isfinite(d) and float(d) == 1.0
    assert counter["zero_norm"] == 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_cosine_distance_range(a, b):
    d = float(cosine_distance(torch.tensor(a, dtype=torch.float64), torch.tensor(b, dtype=torch.float64)))
    assert -1e-12 <= d <= 2 + 1e-12


def test_weights_validation():
    assert TripletWeights() == TripletWeights(1.0, 0.02)
    with pytest.raises(ConfigurationError):
        TripletWeights(-1.0, 0.02)


def test_loss_worked_examples():
    w = TripletWeights(1.0, 0.02)
    c, s = triplet_objective(torch.tensor([0.2, 0.4, 0.3]), 0.5, 0.8, w)
    assert abs(float(c + s) - (1.0 * 0.3 + 0.02 * max(0.0, 0.5 - 0.8))) < 1e-6
    c, s = triplet_objective(torch.tensor([0.0, 0.0]), 0.9, 0.1, w)
    assert abs(float(c + s) - 0.02 * 0.8) < 1e-6
    c, s = triplet_objective(torch.zeros(4), 0.4, 0.4, w)
    assert float(c + s) == 0.0


def test_empty_pairs_give_zero():
    assert float(triplet_loss([], TripletWeights(), None, None)) == 0.0


def _pairs_from_stub(manifest, seed=0, batch_size=16):
    batch = load_batch(manifest, batch_size, seed)
    stub = StubSynthesizer(manifest.n_mels)
    return batch, construct_triplets(batch, stub, manifest, np.random.default_rng(seed), cap=None)


def test_identical_encodings_give_zero_loss(small_manifest):
    batch, cons = _pairs_from_stub(small_manifest)
    assert cons.pairs

    def f_content(seg_lists):
        return [torch.ones(len(s), 3) for s in seg_lists]

    def f_speaker(mels):
        return torch.ones(len(mels), 3)

    assert float(triplet_loss(cons.pairs, TripletWeights(), f_content, f_speaker)) == 0.0


def test_loss_is_mean_over_pairs_with_clamps(small_manifest):
    """Independent evaluation of the loss with numpy over hand-made encodings."""
    _, cons = _pairs_from_stub(small_manifest)
    pairs = cons.pairs
    g = np.random.default_rng(1)
    table = {}

    def enc(t):
        key = (t.data_ptr(), tuple(t.shape))
        if key not in table:
            table[key] = g.normal(size=4)
        return table[key]

    def f_content(seg_lists):
        return [torch.tensor(np.stack([enc(s) for s in segs])) for segs in seg_lists]

    def f_speaker(mels):
        return torch.tensor(np.stack([enc(m) for m in mels]))

    def cos_d(a, b):
        return 1 - a @ b / (np.linalg.norm(a) * np.linalg.norm(b))

    w = TripletWeights(1.0, 0.02)
    expected = []
    for p in pairs:
        content = np.mean([cos_d(enc(a), enc(b)) for a, b in zip(p.content.anchor_segments, p.content.positive_segments)])
        s_an, s_pos, s_neg = enc(p.speaker.anchor_mel), enc(p.speaker.positive_mel), enc(p.speaker.negative_mel)
        expected.append(w.alpha * max(0, content) + w.beta * max(0, cos_d(s_an, s_pos) - cos_d(s_an, s_neg)))
    got = float(triplet_loss(pairs, w, f_content, f_speaker))
    assert abs(got - np.mean(expected)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 2), min_size=1, max_size=6), st.integers(0, 5), st.floats(0, 1),
       st.floats(0, 2), st.floats(0, 2), st.floats(0, 1))
def test_loss_monotone(dists, idx, bump, d_ap, d_an, dn_bump):
    w = TripletWeights()
    d = torch.tensor(dists, dtype=torch.float64)
    base = sum(triplet_objective(d, d_ap, d_an, w))
    d2 = d.clone()
    d2[idx % len(dists)] += bump
    assert float(sum(triplet_objective(d2, d_ap, d_an, w))) >= float(base) - 1e-12
    assert float(sum(triplet_objective(d, d_ap, d_an + dn_bump, w))) <= float(base) + 1e-12
    assert float(base) >= 0


def _batch_of(manifest, tags):
    pools = defaultdict(list)
    for u in manifest.split("train"):
        pools[u.speaker].append(u)
    counts = Counter()
    utts = []
    for t in tags:
        utts.append(pools[t][counts[t]])
        counts[t] += 1
    return collate(utts, manifest)


def test_candidate_count_example(small_manifest):
    tags = ["L1-A"] * 3 + ["L2-A"] * 3 + ["L1-B"] * 2
    batch = _batch_of(small_manifest, tags)
    plans, stats = plan_triplets(batch.speaker_tags, batch.languages, small_manifest.anchor_speaker_of,
                                 np.random.default_rng(0), cap=None)
    oracle = [i for i, (s, l) in enumerate(zip(batch.speaker_tags, batch.languages))
              if small_manifest.anchor_speaker_of[l] == s]
    assert stats.candidates == len(oracle) == 6
    assert len(plans) == 6


def test_single_language_batch_yields_nothing(small_manifest):
    batch = _batch_of(small_manifest, ["L1-A", "L1-A", "L1-B"])
    cons = construct_triplets(batch, StubSynthesizer(16), small_manifest, np.random.default_rng(0))
    assert cons.pairs == [] and cons.stats.skipped_no_cross == 2


def test_construction_is_deterministic(small_manifest):
    _, a = _pairs_from_stub(small_manifest, seed=4)
    _, b = _pairs_from_stub(small_manifest, seed=4)
    assert [p.meta for p in a.pairs] == [p.meta for p in b.pairs]


def test_cap_limits_synthesis_and_rotates(small_manifest):
    tags = ["L1-A"] * 4 + ["L2-A"] * 4
    batch = _batch_of(small_manifest, tags)
    seen = set()
    for start in range(8):
        plans, stats = plan_triplets(batch.speaker_tags, batch.languages, small_manifest.anchor_speaker_of,
                                     np.random.default_rng(start), cap=4, start=start)
        assert len(plans) == 4 and stats.skipped_cap == 4
        seen.update(p.item for p in plans)
    assert seen == set(range(8))


def test_mismatched_segments_are_rejected(small_manifest):
    _, cons = _pairs_from_stub(small_manifest)
    p = cons.pairs[0]
    p.content.positive_segments = p.content.positive_segments[:-1]
    with pytest.raises(InputError):
        triplet_terms([p], TripletWeights(), lambda s: None, lambda m: None)


def test_enumeration_oracle_small(small_manifest):
    violations, emitted, selected, possible = run_equivalence(small_manifest, n_batches=500)
    assert violations == 0 and emitted > 0
    for key, speakers in possible.items():
        assert selected[key] == speakers


def test_positive_stays_in_graph():
    from ttts.acoustic_model import AcousticConfig, AcousticModel
    from ttts.corpus import generate_toy_corpus

    m = generate_toy_corpus(6, seed=2, n_mels=8)
    model = AcousticModel(AcousticConfig(n_phonemes=30, n_speakers=3, n_mels=8, phoneme_emb_dim=4,
                                         speaker_emb_dim=2, encoder_dim=4, decoder_dim=4, decoder_layers=1,
                                         postnet_dim=2, postnet_layers=2, predictor_hidden=2))
    batch = _batch_of(m, ["L1-A", "L2-A", "L1-B", "L2-A"])
    cons = construct_triplets(batch, model, m, np.random.default_rng(0))
    p = cons.pairs[0]
    assert p.content.positive_segments[0].requires_grad
    assert not p.speaker.anchor_mel.requires_grad and not p.speaker.negative_mel.requires_grad
    p.check(m.native_language)
