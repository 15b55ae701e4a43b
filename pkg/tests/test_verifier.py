import itertools

import numpy as np
import pytest

from sigforge import nn
from sigforge import verifier as vf
from sigforge.corpus import CorpusConfig, generate_corpus, split_dataset

SIZE = 32
SPEC = vf.ExtractorSpec(hidden=32, epochs=30)
HEAD = vf.HeadHyper(hidden=32, lr=0.01, epochs=40)


@pytest.fixture(scope="module")
def data():
    raw = generate_corpus(CorpusConfig(users=3, genuine=6, forged=6, image_size=SIZE, seed=7))
    return vf.preprocess_samples(split_dataset(raw, 2 / 3, 7), SIZE)


@pytest.fixture(scope="module")
def extractor(data):
    return vf.train_extractor([s for s in data if s.split == "train"], SIZE, SPEC, seed=7)


def _user(data, uid, split="train"):
    return [s for s in data if s.user_id == uid and s.split == split]


def _forced(extractor, out_pair):
    """Head whose sigmoid outputs are the given constants for every input."""
    logits = np.log(np.array(out_pair) / (1 - np.array(out_pair)))
    layers = vf._head_layers(extractor.feature_dim, 2)
    params = np.concatenate([np.zeros(extractor.feature_dim * 2 + 2), np.zeros(4), logits])
    return vf.VerifierModel("u", extractor, nn.Network(tuple(layers), params))


def test_raw_extractor_is_identity():
    ext = vf.raw_extractor(64)
    img = np.random.default_rng(0).random((64, 64))
    assert ext.feature_dim == 4096
    np.testing.assert_array_equal(ext.features(img), img.reshape(1, -1))


def test_extractor_needs_two_users(data):
    with pytest.raises(vf.VerifierError, match="2 users"):
        vf.train_extractor(_user(data, "u000"), SIZE, SPEC)


def test_extractor_is_deterministic(data, extractor):
    again = vf.train_extractor([s for s in data if s.split == "train"], SIZE, SPEC, seed=7)
    assert again.network.params.tobytes() == extractor.network.params.tobytes()
    assert extractor.frozen and extractor.feature_dim == SPEC.hidden


def test_trained_features_group_by_writer(data, extractor):
    genuine = [s for s in data if s.label == "genuine"]
    feats = {s.sample_id: extractor.features(s.image)[0] for s in genuine}

    def cos(a, b):
        return a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12)

    same, cross = [], []
    for a, b in itertools.combinations(genuine, 2):
        (same if a.user_id == b.user_id else cross).append(cos(feats[a.sample_id], feats[b.sample_id]))
    assert np.mean(same) > np.mean(cross)


def test_head_lr_zero_leaves_parameters(data, extractor):
    hyper = vf.HeadHyper(hidden=8, lr=0.0, epochs=5)
    model = vf.train_verifier(_user(data, "u001"), extractor, hyper, seed=3)
    init = vf.init_head(extractor, 8, vf.derive_seed(3, "head-init"))
    assert model.head.params.tobytes() == init.params.tobytes()


def test_head_training_reduces_loss_and_separates(data, extractor):
    samples = _user(data, "u000")
    model = vf.train_verifier(samples, extractor, HEAD, seed=1)
    assert model.trace[-1] < model.trace[0]
    untrained = vf.VerifierModel("u000", extractor, vf.init_head(extractor, HEAD.hidden, 1))

    def errors(m):
        ds = vf.verify_batch(m, np.stack([s.image for s in samples]))
        far = np.mean([d.accepted for d, s in zip(ds, samples) if s.label == "forged"])
        frr = np.mean([not d.accepted for d, s in zip(ds, samples) if s.label == "genuine"])
        return far + frr

    assert errors(model) < errors(untrained)


def test_head_training_leaves_extractor_untouched(data, extractor):
    before = extractor.network.params.tobytes()
    vf.train_verifier(_user(data, "u002"), extractor, HEAD, seed=2)
    assert extractor.network.params.tobytes() == before


def test_head_rejects_bad_training_sets(data, extractor):
    genuine_only = [s for s in _user(data, "u000") if s.label == "genuine"]
    with pytest.raises(vf.VerifierError, match="both"):
        vf.train_verifier(genuine_only, extractor, HEAD)
    with pytest.raises(vf.VerifierError, match="one user"):
        vf.train_verifier(_user(data, "u000") + _user(data, "u001"), extractor, HEAD)
    thawed = vf.FeatureExtractor("raw", (SIZE, SIZE), frozen=False)
    with pytest.raises(vf.VerifierError, match="frozen"):
        vf.train_verifier(_user(data, "u000"), thawed, HEAD)


def test_forced_scores_and_tie_rule(extractor):
    img = np.zeros((SIZE, SIZE))
    d = vf.verify(_forced(extractor, (0.9, 0.1)), img)
    assert d.accepted and d.genuine_score == pytest.approx(0.9)
    assert not vf.verify(_forced(extractor, (0.5, 0.5)), img).accepted
    assert vf.decide(0.5, 0.5) == vf.Decision(False, 0.5, 0.5)
    assert vf.decide(0.6, 0.9, "threshold").accepted and not vf.decide(0.6, 0.9).accepted


def test_verify_requires_preprocessed_size(extractor):
    model = _forced(extractor, (0.9, 0.1))
    with pytest.raises(vf.VerifierError, match="preprocess"):
        vf.verify(model, np.zeros((SIZE + 1, SIZE)))


def test_scores_stay_inside_unit_interval(data, extractor):
    model = vf.train_verifier(_user(data, "u000"), extractor, HEAD, seed=1)
    rng = np.random.default_rng(0)
    s = model.scores(rng.random((20, SIZE, SIZE)))
    assert s.shape == (20, 2) and (s > 0).all() and (s < 1).all()


def test_persistence_round_trip(tmp_path, data, extractor):
    model = vf.train_verifier(_user(data, "u001"), extractor, HEAD, seed=4, tag="hardened-vae")
    vf.save_extractor(extractor, tmp_path)
    vf.save_verifier(model, tmp_path, config_hash="feed")
    (back,) = vf.load_verifiers(tmp_path)
    assert back.user_id == "u001" and back.tag == "hardened-vae"
    assert back.head.params.tobytes() == model.head.params.tobytes()
    imgs = np.stack([s.image for s in data[:5]])
    np.testing.assert_array_equal(back.scores(imgs), model.scores(imgs))
    raw_dir = tmp_path / "raw"
    vf.save_extractor(vf.raw_extractor(SIZE), raw_dir)
    assert vf.load_extractor(raw_dir).kind == "raw"
