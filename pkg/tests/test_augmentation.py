import json

import numpy as np
import pytest

from cornercase import augmentation as A
from cornercase.exceptions import UsageError
from cornercase.generator import CornerCase, CorpusError, write_corpus


def case(seed_id, original, labels, iterations=3, value=0.5):
    img = np.full((4, 4, 1), value)
    return CornerCase(
        image=img, seed_id=seed_id, original_label=original, labels=tuple(labels),
        probabilities=[np.full(10, 0.1)] * 3, deviating=(2,), majority=labels[0], j=2,
        iterations=iterations,
    )


def test_paper_relative_improvement():
    assert A.relative_improvement(0.238, 0.855) == pytest.approx(259.2, abs=0.05)


def test_no_change_is_zero_improvement():
    assert A.relative_improvement(0.6, 0.6) == 0.0
    assert A.relative_improvement(0.0, 0.5) is None


def test_empty_corpus_gives_empty_set():
    s = A.build_augmented([], image_shape=(4, 4, 1))
    assert len(s) == 0 and s.images.shape == (0, 4, 4, 1)


def test_labels_come_from_seed_not_majority():
    # models 0 and 1 say 5, model 2 says 3; the seed was a 3, so the deviating model happened to be right
    s = A.build_augmented([case(7, 3, (5, 5, 3)), case(9, 1, (1, 1, 4), iterations=0)])
    assert s.labels.tolist() == [3, 1]
    assert s.provenance == ["corner_case", "seed_already_diverged"]
    assert s.source_ids == [7, 9]


def test_seed_label_vector_is_the_label_source():
    seeds = np.arange(20) % 10
    s = A.build_augmented([case(13, 3, (5, 5, 3))], seeds)
    assert s.labels.tolist() == [3]


def test_build_from_corpus_directory(tmp_path):
    cases = [case(i, i % 10, (1, 1, 2), value=i / 10) for i in range(5)]
    write_corpus(cases, tmp_path)
    s = A.build_augmented(tmp_path)
    assert len(s) == 5
    assert s.labels.tolist() == [0, 1, 2, 3, 4]
    np.testing.assert_allclose(s.images[:, 0, 0, 0], np.round(np.arange(5) / 10 * 255) / 255)


def test_corrupt_corpus_record_is_a_load_error(tmp_path):
    write_corpus([case(1, 3, (1, 1, 2))], tmp_path)
    rec = json.loads((tmp_path / "corpus.jsonl").read_text())
    del rec["labels"]
    (tmp_path / "corpus.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(CorpusError):
        A.build_augmented(tmp_path)


def test_control_size_zero(rng):
    X, y = rng.uniform(size=(10, 4, 4, 1)), np.arange(10)
    for kind in A.CONTROLS:
        assert len(A.build_control(kind, 0, (X, y), rng)) == 0


def test_control_original_copies_are_exact_and_avoid_excluded(rng):
    X, y = rng.uniform(size=(30, 4, 4, 1)), np.arange(30) % 10
    s = A.build_control("random_original", 20, (X, y), rng, exclude=range(10))
    assert min(s.source_ids) >= 10 and len(set(s.source_ids)) == 20
    for img, lab, i in zip(s.images, s.labels, s.source_ids):
        np.testing.assert_array_equal(img, X[i])
        assert lab == y[i]
    assert set(s.provenance) == {"control_random_original"}


def test_control_original_too_large(rng):
    X, y = rng.uniform(size=(5, 4, 4, 1)), np.arange(5)
    with pytest.raises(UsageError):
        A.build_control("random_original", 4, (X, y), rng, exclude=[0, 1])


def test_control_transform_with_zero_ranges_copies(rng):
    X, y = rng.uniform(size=(6, 8, 8, 1)), np.arange(6)
    s = A.build_control("random_transform", 10, (X, y), rng, rotation=0, shift=0, zoom=(1.0, 1.0))
    for img, lab, i in zip(s.images, s.labels, s.source_ids):
        np.testing.assert_array_equal(img, X[i])
        assert lab == y[i]


def test_control_transform_perturbs_and_keeps_labels(rng):
    X, y = rng.uniform(size=(6, 8, 8, 1)), np.arange(6)
    s = A.build_control("random_transform", 12, (X, y), rng)
    assert any(not np.array_equal(img, X[i]) for img, i in zip(s.images, s.source_ids))
    assert s.labels.tolist() == [int(y[i]) for i in s.source_ids]
    assert s.images.min() >= 0 and s.images.max() <= 1


def test_unknown_control(rng):
    with pytest.raises(UsageError):
        A.build_control("mixup", 3, (np.zeros((3, 4, 4, 1)), np.zeros(3)), rng)


def test_zero_epochs_leaves_accuracies_unchanged(digits_ensemble, digits):
    ens, _ = digits_ensemble
    (X, y), (Xt, yt) = digits
    cases = A.AugmentedSet(Xt[:30], yt[:30], ["corner_case"] * 30, list(range(30)))
    _, rep = A.retrain_and_eval(ens, (X[:100], y[:100]), cases, (Xt[30:], yt[30:]), epochs=0)
    for m in rep.models:
        assert m.augmented_before == m.augmented_after
        assert m.test_before == m.test_after
        assert m.improvement == 0.0


def test_retraining_keeps_all_original_data(monkeypatch, digits_ensemble, digits):
    ens, _ = digits_ensemble
    (X, y), (Xt, yt) = digits
    sizes = []
    real = A.sgd_train

    def spy(model, Xa, ya, *args, **kw):
        sizes.append(len(Xa))
        return real(model, Xa[:1], ya[:1], 0, *args[1:], **kw)

    monkeypatch.setattr(A, "sgd_train", spy)
    cases = A.AugmentedSet(Xt[:7], yt[:7], ["corner_case"] * 7, list(range(7)))
    _, rep = A.retrain_and_eval(ens, (X[:50], y[:50]), cases, (Xt, yt), epochs=1)
    assert sizes == [57, 57, 57]
    assert rep.n_train + rep.n_augmented == 57


def test_retrain_rejects_empty_sets(digits_ensemble, digits):
    ens, _ = digits_ensemble
    (X, y), (Xt, yt) = digits
    with pytest.raises(UsageError):
        A.retrain_and_eval(ens, (X, y), A.AugmentedSet.empty(X.shape[1:]), (Xt, yt), 1)


def test_report_serialises_and_tabulates():
    rep = A.RetrainReport("corner_cases", 3, 100, 10, [A.ModelRetrain("lenet1", 0.238, 0.855, 0.9, 0.91)])
    d = json.loads(json.dumps(rep.to_dict()))
    assert d["models"][0]["relative_improvement_pct"] == pytest.approx(259.24, abs=0.01)
    table = A.format_table([rep])
    assert "lenet1" in table and "259.2" in table
