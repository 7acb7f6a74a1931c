import numpy as np
import pytest

from ventriq.errors import DimensionError
from ventriq.forest import forest_predict, train_forest
from ventriq.initializer import detect_anchors
from ventriq.phantom import PhantomSpec, corruption_range, drop_slices, render_subject, subject_params
from ventriq.quality import (
    IQA_APICAL, IQA_BASAL, SQA, FeatureVector, QACorpus, QAReport, assess_image, assess_segmentation,
    corrupt_coverage, image_features, perturb_shape, read_corpus, write_corpus,
)

SPEC = PhantomSpec(seed=41)


@pytest.fixture(scope="module")
def subjects():
    out = []
    for i in range(3):
        params = subject_params(SPEC, i)
        out.append((params, render_subject(SPEC, params)[0]))
    return out


def corrupted(params, sax, kind):
    first, last = corruption_range(SPEC, params, kind)
    return drop_slices(sax, first, last)


def test_full_coverage_passes(small_models, subjects):
    for _, (sax, lax, _) in subjects:
        rep, anchors = assess_image(sax, lax, small_models.iqa_basal, small_models.iqa_apical)
        assert rep.passed and rep.kind == "IQA"
        assert anchors is not None


def test_missing_basal_detected(small_models, subjects):
    for params, (sax, lax, _) in subjects:
        rep, _ = assess_image(corrupted(params, sax, "missing_basal"), lax, small_models.iqa_basal,
                              small_models.iqa_apical)
        assert not rep.passed and "missing_basal" in rep.reasons


def test_missing_apical_detected(small_models, subjects):
    for params, (sax, lax, _) in subjects:
        rep, _ = assess_image(corrupted(params, sax, "missing_apical"), lax, small_models.iqa_basal,
                              small_models.iqa_apical)
        assert not rep.passed and "missing_apical" in rep.reasons


def test_short_stack_fails_iqa(small_models, subjects):
    _, (sax, lax, _) = subjects[0]
    rep, anchors = assess_image(drop_slices(sax, 3, 4), lax, small_models.iqa_basal, small_models.iqa_apical)
    assert not rep.passed and rep.reasons == ("insufficient_slices",) and anchors is None


def test_sqa_ground_truth_passes(small_models, subjects):
    for _, (sax, _, gt) in subjects:
        rep = assess_segmentation(sax, gt, small_models.iam, small_models.sqa)
        assert rep.passed


def test_sqa_translated_shape_fails(small_models, subjects):
    for _, (sax, _, gt) in subjects:
        moved = gt.with_points(gt.points + (30.0, 0, 0))
        rep = assess_segmentation(sax, moved, small_models.iam, small_models.sqa)
        assert not rep.passed and rep.reasons == ("implausible_segmentation",)


def test_sqa_empty_mask(small_models, subjects):
    _, (sax, _, gt) = subjects[0]
    far = gt.with_points(gt.points + 1e4)
    rep = assess_segmentation(sax, far, small_models.iam, small_models.sqa)
    assert not rep.passed and rep.reasons == ("empty_segmentation",) and rep.score == 0.0


def test_qa_report_invariants():
    QAReport("S", "SQA", True, 0.5, (), 0.5)
    with pytest.raises(ValueError):
        QAReport("S", "SQA", True, 0.4, (), 0.5)
    with pytest.raises(ValueError):
        QAReport("S", "SQA", False, 0.2, (), 0.5)


def test_feature_vector_schema():
    FeatureVector(np.zeros(5), IQA_BASAL)
    with pytest.raises(DimensionError):
        FeatureVector(np.zeros(4), IQA_BASAL)
    with pytest.raises(DimensionError):
        FeatureVector(np.zeros(9), "bogus")


def test_perturbations(subjects, rng):
    _, (_, _, gt) = subjects[0]
    mild = perturb_shape(gt, rng, "mild")
    assert np.sqrt(((mild.points - gt.points) ** 2).sum(1).mean()) < 6.0
    assert np.array_equal(mild.triangles, gt.triangles)


def test_corpus_round_trip(tmp_path):
    c = QACorpus()
    c.add("S1", IQA_BASAL, 1, FeatureVector(np.arange(5.0), IQA_BASAL))
    c.add("S1", SQA, 0, FeatureVector(np.linspace(0, 1, 9), SQA))
    write_corpus(c, tmp_path / "c.csv")
    back = read_corpus(tmp_path / "c.csv")
    assert [(r[0], r[1], r[2]) for r in back.rows] == [(r[0], r[1], r[2]) for r in c.rows]
    assert all(np.array_equal(a[3], b[3]) for a, b in zip(back.rows, c.rows))


@pytest.mark.slow
def test_iqa_forest_accuracy_on_200_stacks():
    """100 subjects: every full stack plus 50 basal- and 50 apical-corrupted ones; 2-fold by subject."""
    spec = PhantomSpec(seed=43)
    rows = []
    for i in range(100):
        params = subject_params(spec, i)
        sax, lax, gt = render_subject(spec, params)[0]
        kinds = ["full", "missing_basal" if i % 2 == 0 else "missing_apical"]
        for kind in kinds:
            vol = sax if kind == "full" else corrupt_coverage(sax, gt, kind, np.random.default_rng(i))
            f = image_features(detect_anchors(vol, lax), vol)
            rows.append((i, kind, f))
    assert len(rows) == 200
    for kind, schema in (("missing_basal", IQA_BASAL), ("missing_apical", IQA_APICAL)):
        X = np.stack([r[2][schema].values for r in rows])
        y = np.array([r[1] == kind for r in rows], dtype=int)
        fold = np.array([r[0] < 50 for r in rows])
        correct = 0
        for train in (fold, ~fold):
            rf = train_forest(X[train], y[train], 50, 6, 0)
            correct += int(((forest_predict(rf, X[~train]) >= 0.5) == (y[~train] == 1)).sum())
        assert correct / len(rows) >= 0.95, schema
