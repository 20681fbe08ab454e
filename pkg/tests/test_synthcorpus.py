import numpy as np
import pytest

from promptdoor.synthcorpus import (
    Corpus, CorpusSpec, DOMAINS, SplitPlan, cross_dataset_variant, export_corpus, generate, import_corpus, sample_few_shot,
    split_seen_unseen, union, with_domain,
)

SMALL = CorpusSpec(seed=3, samples_per_class=4)


@pytest.fixture(scope="module")
def small():
    return generate(SMALL)


def test_deterministic(small):
    again = generate(SMALL)
    assert again.images.tobytes() == small.images.tobytes()
    assert np.array_equal(again.labels, small.labels)


def test_counts_balanced():
    c = generate(CorpusSpec(seed=1, samples_per_class=20))
    assert len(c) == 320
    assert np.all(np.bincount(c.labels) == 20)


def test_pixels_in_unit_range_for_every_domain():
    for d in DOMAINS:
        c = generate(with_domain(SMALL, d))
        assert c.images.min() >= 0.0 and c.images.max() <= 1.0


def test_brightness_shift_moves_mean(small):
    shifted = generate(with_domain(SMALL, "brightness-shift"))
    assert np.array_equal(shifted.labels, small.labels)
    assert abs(small.images.mean() - shifted.images.mean()) > 0.05


def test_seeds_differ():
    a = generate(CorpusSpec(seed=1, samples_per_class=2))
    b = generate(CorpusSpec(seed=2, samples_per_class=2))
    assert not np.array_equal(a.images, b.images)


def test_classes_are_separable_by_nearest_centroid():
    big = generate(CorpusSpec(seed=4, samples_per_class=12))
    x = big.images.reshape(len(big), 3, -1).mean(-1)  # per-image mean colour
    cents = np.stack([x[big.labels == c].mean(0) for c in range(16)])
    pred = np.argmin(((x[:, None] - cents[None]) ** 2).sum(-1), axis=1)
    # mean colour alone is far above the 1/16 chance level
    assert (pred == big.labels).mean() > 0.2


@pytest.mark.parametrize("kw", [dict(contrast=0), dict(contrast=1.5), dict(grain=-1), dict(domain="fog"),
                                dict(class_vocab=(("solid", "red", "circle"), ("solid", "red", "circle")))])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        CorpusSpec(**kw)


def test_spec_dict_round_trip():
    assert CorpusSpec.from_dict(SMALL.to_dict()) == SMALL


def test_split_16():
    plan = split_seen_unseen(16, 0)
    assert len(plan.seen) == 8 and len(plan.unseen) == 8
    assert not set(plan.seen) & set(plan.unseen)
    assert sorted(plan.seen + plan.unseen) == list(range(16))


def test_split_two_and_errors():
    plan = split_seen_unseen(2, 5)
    assert len(plan.seen) == 1 and len(plan.unseen) == 1
    with pytest.raises(ValueError):
        split_seen_unseen(1, 0)
    with pytest.raises(ValueError):
        SplitPlan((0, 1), (1, 2))


def test_few_shot_counts():
    c = generate(CorpusSpec(seed=0, samples_per_class=16))
    plan = split_seen_unseen(16, 0)
    few = sample_few_shot(c, plan.seen, 16, 0)
    assert len(few) == 128
    one = sample_few_shot(c, plan.seen, 1, 0)
    assert np.all(np.bincount(one.labels, minlength=16)[list(plan.seen)] == 1)
    for shots in (1, 2, 4, 8, 16):
        assert len(sample_few_shot(c, plan.seen, shots, 1)) == 8 * shots


def test_few_shot_too_many(small):
    with pytest.raises(ValueError):
        sample_few_shot(small, [0], 5, 0)


def test_variant_vocabulary_disjoint():
    var = cross_dataset_variant(SMALL)
    assert not set(var.class_names) & set(SMALL.class_names)
    assert generate(var).images.tobytes() == generate(var).images.tobytes()


def test_union_rejects_shared_names(small):
    with pytest.raises(ValueError):
        union([small, small])
    u = union([small, generate(cross_dataset_variant(SMALL))])
    assert len(u.class_names) == 32 and u.labels.max() == 31


def test_restrict_keeps_global_labels(small):
    sub = small.restrict([3, 5])
    assert set(sub.labels) == {3, 5}
    assert sub[0].caption.startswith("a photo of a ")


def test_export_import_round_trip(tmp_path, small):
    plan = split_seen_unseen(16, 0)
    export_corpus(small, tmp_path, plan)
    back, plan2 = import_corpus(tmp_path)
    assert np.array_equal(back.images, small.images)
    assert np.array_equal(back.labels, small.labels)
    assert back.class_names == small.class_names and plan2 == plan and back.spec == small.spec


def test_import_detects_corruption(tmp_path, small):
    export_corpus(small, tmp_path)
    raw = bytearray((tmp_path / "images.f32").read_bytes())
    raw[100] ^= 0xFF
    (tmp_path / "images.f32").write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        import_corpus(tmp_path)


def test_corpus_iterates_samples(small):
    samples = list(small)
    assert len(samples) == len(small)
    assert isinstance(small, Corpus) and samples[0].image.shape == (3, 32, 32)
