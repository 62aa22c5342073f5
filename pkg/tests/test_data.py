import struct

import numpy as np
import pytest
from scipy import stats

from adaact.data import (FormatError, SynthConfig, generate_corpus, load_corpus, load_feature_dir,
                         read_action_map, read_features, read_transcripts, save_corpus, write_action_map,
                         write_features, write_transcripts)
from adaact.decode import Transcript


def test_feature_round_trip(tmp_path, rng):
    X = rng.normal(size=(7, 3))
    write_features(tmp_path / "a.feat", X)
    back = read_features(tmp_path / "a.feat")
    assert back.X.tobytes() == X.tobytes()
    assert back.video_id == "a" and back.T == 7


def test_feature_layout(tmp_path):
    write_features(tmp_path / "a.feat", np.array([[1.5, -2.0]]))
    raw = (tmp_path / "a.feat").read_bytes()
    assert raw == b"AAFT0001" + struct.pack("<II", 1, 2) + struct.pack("<2d", 1.5, -2.0)


def test_header_only_file_rejected(tmp_path):
    (tmp_path / "a.feat").write_bytes(b"AAFT0001" + struct.pack("<II", 0, 3))
    with pytest.raises(FormatError):
        read_features(tmp_path / "a.feat")


def test_bad_magic_and_truncation(tmp_path, rng):
    path = tmp_path / "a.feat"
    write_features(path, rng.normal(size=(4, 2)))
    raw = path.read_bytes()
    path.write_bytes(b"XXXX0001" + raw[8:])
    with pytest.raises(FormatError):
        read_features(path)
    path.write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        read_features(path)


def test_loader_orders_by_filename(tmp_path, rng):
    write_features(tmp_path / "b.feat", rng.normal(size=(2, 2)))
    write_features(tmp_path / "a.feat", rng.normal(size=(3, 2)))
    seqs = load_feature_dir(tmp_path)
    assert [s.video_id for s in seqs] == ["a", "b"]


def test_text_formats_round_trip(tmp_path):
    names = ["SIL", "cut", "pour"]
    write_action_map(tmp_path / "actions.txt", names)
    assert read_action_map(tmp_path / "actions.txt") == names
    items = [("v1", Transcript([0, 2, 0])), ("v2", Transcript([1]))]
    write_transcripts(tmp_path / "t.txt", items, names)
    assert read_transcripts(tmp_path / "t.txt", names) == dict(items)
    assert (tmp_path / "t.txt").read_text().splitlines()[0] == "v1\tSIL pour SIL"


def test_unknown_action_in_transcript(tmp_path):
    (tmp_path / "t.txt").write_text("v1\tSIL fly\n")
    with pytest.raises(FormatError, match=":1"):
        read_transcripts(tmp_path / "t.txt", ["SIL"])


def test_generator_is_deterministic():
    a, b = generate_corpus(SynthConfig(seed=3)), generate_corpus(SynthConfig(seed=3))
    assert [v.video_id for v in a.videos] == [v.video_id for v in b.videos]
    for u, v in zip(a.videos, b.videos):
        assert u.X.tobytes() == v.X.tobytes()
        assert [d.to_json() for d in u.detections] == [d.to_json() for d in v.detections]
        assert u.gt.segments == v.gt.segments
    assert generate_corpus(SynthConfig(seed=4)).videos[0].X.tobytes() != a.videos[0].X.tobytes()


def test_default_desk_scale():
    c = generate_corpus(SynthConfig())
    assert len(c.videos) == 40 and len(c.actions) == 6
    assert c.videos[0].X.shape[1] == 16 and c.embedding_dim == 32
    for v in c.videos:
        assert 80 <= v.T <= 200
        assert v.gt.T == v.T and all(l >= 1 for _, l in v.gt.segments)
        assert v.gt.transcript == v.transcript
        assert v.transcript.actions[0] == v.transcript.actions[-1] == c.actions.index("SIL")
        assert 3 <= len(v.detections) <= 8
        assert all(0.5 <= d.score <= 1.0 and 0 <= d.t < v.T for d in v.detections)
    assert len(c.test) == 10 and len(c.train) == 30


def test_corpus_round_trip(tmp_path):
    c = generate_corpus(SynthConfig(videos_per_activity=3))
    save_corpus(c, tmp_path / "corpus")
    for sub in ("features", "detections", "gt"):
        assert (tmp_path / "corpus" / sub).is_dir()
    back = load_corpus(tmp_path / "corpus")
    assert back.actions == c.actions and back.split == c.split and back.embedding_dim == c.embedding_dim
    for u, v in zip(c.videos, back.videos):
        assert u.video_id == v.video_id and u.activity == v.activity
        assert u.X.tobytes() == v.X.tobytes()
        assert u.transcript == v.transcript and u.gt.segments == v.gt.segments
        assert [d.to_json() for d in u.detections] == [d.to_json() for d in v.detections]


def test_noise_free_features_are_separable():
    cfg = SynthConfig(sigma_feat=0.0, ambiguous_pairs=[], seed=1)
    c = generate_corpus(cfg)
    labels = np.concatenate([v.gt.labels for v in c.videos])
    X = np.concatenate([v.X for v in c.videos])
    means = np.stack([X[labels == a].mean(axis=0) for a in range(len(c.actions))])
    pred = np.argmin(((X[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == labels) == 1.0


def pair_pvalues(c, a, b):
    labels = np.concatenate([v.gt.labels for v in c.videos])
    X = np.concatenate([v.X for v in c.videos])
    ia, ib = c.actions.index(a), c.actions.index(b)
    return stats.ttest_ind(X[labels == ia], X[labels == ib], equal_var=False).pvalue


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ambiguous_pair_has_indistinguishable_means(seed):
    c = generate_corpus(SynthConfig(seed=seed))
    p = pair_pvalues(c, "pour_coffee", "pour_juice")
    # Bonferroni over feature dimensions at the 1% level
    assert p.min() > 0.01 / p.size
    # the same test has ample power on a genuinely different pair
    assert pair_pvalues(c, "take_cup", "stir").min() < 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_interaction_clusters_are_far_apart(seed):
    cfg = SynthConfig(seed=seed)
    c = generate_corpus(cfg)
    cents = {}
    for v in c.videos:
        cents.setdefault(v.activity, []).extend(d.embedding for d in v.detections)
    coffee, juice = (np.mean(cents[k], axis=0) for k in ("coffee", "juice"))
    assert np.linalg.norm(coffee - juice) >= 4 * cfg.sigma_hoi


@pytest.mark.parametrize("kw", [dict(ambiguous_pairs=[("stir", "stir")]), dict(T_min=10, T_max=5),
                                dict(F=0), dict(ambiguous_pairs=[("stir", "fly")])])
def test_generator_config_validation(kw):
    with pytest.raises(ValueError):
        generate_corpus(SynthConfig(**kw))
