import hashlib
import math
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cqil.corpus import (MANIFEST_FIELDS, PROTOCOLS, CorpusSpec,
                         ProtocolError, ProtocolSplits, SampleRecord, _cut, build_protocol_splits, calibrate,
                         generate_corpus, laplacian_variance, load_image, read_corpus_meta, read_manifest,
                         read_splits, render_sample, score_quality, write_splits)
from cqil.degrade import IDENTITY

SMALL = CorpusSpec(n_subjects=5, images_per_subject_per_category=1, image_size=(16, 16), rng_seed=3)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return root, generate_corpus(SMALL, root)


def digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_counts_and_manifest(small_corpus):
    root, recs = small_corpus
    assert len(recs) == 5 * 7 * 1 * 3
    assert (root / "manifest.csv").read_text().splitlines()[0] == ",".join(MANIFEST_FIELDS)
    assert b"\r\n" not in (root / "manifest.csv").read_bytes()
    back = read_manifest(root / "manifest.csv")
    assert [r.image_path for r in back] == [r.image_path for r in recs]
    assert all(abs(a.quality_score - b.quality_score) < 1e-6 for a, b in zip(back, recs))
    for r in recs:
        assert (r.liveness == "live") == (r.attack_category == "none")
        assert 0.0 <= r.quality_score <= 1.0
        assert (root / r.image_path).exists()
    assert load_image(root / recs[0].image_path).shape == (16, 16, 3)


def test_generation_is_deterministic(small_corpus, tmp_path):
    root, _ = small_corpus
    generate_corpus(SMALL, tmp_path)
    assert digest(tmp_path) == digest(root)


def test_live_multiplier_and_meta(tmp_path):
    spec = CorpusSpec(n_subjects=4, images_per_subject_per_category=1, image_size=(16, 16),
                      quality_tiers=(IDENTITY,), live_multiplier=3)
    recs = generate_corpus(spec, tmp_path)
    c = Counter(r.attack_category for r in recs)
    assert c["none"] == 12 and c["print"] == 4
    meta = read_corpus_meta(tmp_path)
    assert CorpusSpec.from_dict(meta["spec"]) == spec
    # the calibration puts the median clean image at the target score
    assert np.median([r.quality_score for r in recs]) == pytest.approx(0.7, abs=0.02)


def test_tier_scores_decrease(small_corpus):
    _, recs = small_corpus
    by_tier = {t: np.median([r.quality_score for r in recs if r.tier == t]) for t in range(3)}
    assert by_tier[0] > by_tier[1] > by_tier[2]


def test_spec_validation(tmp_path):
    for bad in (dict(n_subjects=3), dict(images_per_subject_per_category=0), dict(image_size=(24, 24)),
                dict(image_size=(16, 32)), dict(categories=("live", "print", "print")),
                dict(categories=("live", "paper")), dict(live_multiplier=0), dict(quality_tiers=())):
        with pytest.raises(ValueError):
            CorpusSpec(**bad).validate()
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_corpus(SMALL, blocker / "sub")


def test_record_validation():
    SampleRecord("a.png", 0, "live", "none", 0.5)
    for args in ((-1, "live", "none", 0.5), (0, "live", "print", 0.5), (0, "attack", "none", 0.5),
                 (0, "attack", "print", 1.5), (0, "alive", "none", 0.5)):
        with pytest.raises(ValueError):
            SampleRecord("a.png", *args)
    r = SampleRecord("images/s001/print_00_t2.png", 1, "attack", "print", 0.1)
    assert r.group == "images/s001/print_00" and r.tier == 2 and r.label == 0


def test_quality_score_oracles():
    flat = np.full((8, 8, 3), 0.4)
    assert score_quality(flat) == 0.0
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(12, 12, 3))
    g = img @ np.array([0.299, 0.587, 0.114])
    lap = np.zeros((10, 10))
    for i in range(1, 11):
        for j in range(1, 11):
            lap[i - 1, j - 1] = g[i - 1, j] + g[i + 1, j] + g[i, j - 1] + g[i, j + 1] - 4 * g[i, j]
    assert laplacian_variance(img) == pytest.approx(lap.var(), rel=1e-12)
    assert score_quality(img, 0.05) == pytest.approx(1 - math.exp(-lap.var() / 0.05), rel=1e-12)
    assert calibrate([1.0, 2.0, 3.0], 0.7) == pytest.approx(2.0 / math.log(1 / 0.3))
    with pytest.raises(ValueError):
        laplacian_variance(np.zeros((2, 2)))


def test_render_is_pure():
    a = render_sample(1, 2, "replay", 0, 16)
    assert np.array_equal(a, render_sample(1, 2, "replay", 0, 16))
    assert not np.array_equal(a, render_sample(1, 2, "replay", 1, 16))


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 200), st.sampled_from([(0.4, 0.1, 0.5), (0.6, 0.15, 0.25), (0.75, 0.25)]))
def test_cut_partitions_with_nonempty_chunks(n, fractions):
    chunks = _cut(list(range(n)), fractions, "x")
    assert sum(chunks, []) == list(range(n))
    assert all(chunks) and len(chunks) == len(fractions)


def test_cut_rounding_example():
    assert [len(c) for c in _cut(list(range(10)), (0.4, 0.1, 0.5), "x")] == [4, 1, 5]
    assert [len(c) for c in _cut(list(range(5)), (0.4, 0.1, 0.5), "x")] == [2, 1, 2]
    with pytest.raises(ProtocolError):
        _cut([1, 2], (0.4, 0.1, 0.5), "x")


def test_protocol_examples(small_corpus):
    _, recs = small_corpus
    p1 = build_protocol_splits(recs, "P1")
    assert {r.subject_id for r in p1.train} == {0, 1}
    assert {r.subject_id for r in p1.dev} == {2}
    assert {r.subject_id for r in p1.test} == {3, 4}
    p21 = build_protocol_splits(recs, "P2.1")
    test_cats = {r.attack_category for r in p21.test}
    assert test_cats == {"none", "mask_headgear"}
    kept = {r.attack_category for r in p21.train + p21.dev}
    assert "print" not in kept and "replay" not in kept and "mask_headgear" not in kept
    # all quality tiers of a crop stay together
    for s in p21.subsets().values():
        groups = {r.group for r in s}
        assert all(sum(1 for r in recs if r.group == g) == sum(1 for r in s if r.group == g) for g in groups)
    p3 = build_protocol_splits(recs, "P3")
    assert all(0.4 <= r.quality_score <= 1.0 for r in p3.train)
    assert all(0.0 <= r.quality_score < 0.3 for r in p3.test)


def test_p3_band_boundaries():
    mk = lambda q, i: SampleRecord(f"x{i}.png", i, "live" if i % 2 else "attack",  # noqa: E731
                                   "none" if i % 2 else "print", q)
    recs = [mk(q, i) for i, q in enumerate([0.4, 0.3, 0.2999, 1.0, 0.3999, 0.0])]
    sp = build_protocol_splits(recs, "P3")
    assert sorted(r.quality_score for r in sp.train) == [0.4, 1.0]
    assert sorted(r.quality_score for r in sp.dev) == [0.3, 0.3999]
    assert sorted(r.quality_score for r in sp.test) == [0.0, 0.2999]
    with pytest.raises(ProtocolError):
        build_protocol_splits([mk(0.9, 1), mk(0.1, 2)], "P3")


def test_protocol_errors(small_corpus):
    _, recs = small_corpus
    with pytest.raises(ProtocolError):
        build_protocol_splits(recs, "P4")
    with pytest.raises(ProtocolError):
        build_protocol_splits([], "P1")
    no_headgear = [r for r in recs if r.attack_category != "mask_headgear"]
    with pytest.raises(ProtocolError):
        build_protocol_splits(no_headgear, "P2.1")
    bad = ProtocolSplits("P1", recs[:3], recs[:3], recs[3:6])
    assert bad.violations()
    with pytest.raises(ProtocolError):
        bad.validate()


def test_splits_round_trip(small_corpus, tmp_path):
    _, recs = small_corpus
    sp = build_protocol_splits(recs, "P2.3", seed=4)
    write_splits(sp, tmp_path)
    back = read_splits(tmp_path, "P2.3")
    assert [r.image_path for r in back.train] == [r.image_path for r in sp.train]
    assert all(r.split == "test" for r in back.test)
    assert not back.violations()


@pytest.mark.parametrize("seed", [0, 7])
def test_protocol_invariants_hold_for_seeded_shuffles(small_corpus, seed):
    _, recs = small_corpus
    for pid in PROTOCOLS:
        assert build_protocol_splits(recs, pid, seed=seed).violations() == []
