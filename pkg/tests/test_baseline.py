import numpy as np
import pytest

from oracles import pearson_direct, resample_direct
from phinet.baseline import (
    TemplateSet,
    align_to_template_grid,
    build_templates,
    classify_by_template,
    foreground_centroid,
    pearson_cc,
)
from phinet.phantom import PhantomSpec, generate_phantom
from phinet.volume import Volume, foreground_mask, preprocess_pipeline


def prepped(name, seed, spec=None):
    vol, _ = generate_phantom(name, spec or PhantomSpec(), seed=seed)
    return preprocess_pipeline(vol)[0, 0]


@pytest.fixture(scope="module")
def noiseless_templates():
    spec = PhantomSpec.noiseless()
    classes = ["T1", "T2", "FLAIR"]
    arrays = [prepped(c, 0, spec) for c in classes]
    return build_templates(arrays, [0, 1, 2], classes)


# ---------------------------------------------------------------- correlation


def test_pcc_examples():
    a = np.random.default_rng(0).random((4, 5, 6))
    assert pearson_cc(a, a) == pytest.approx(1.0, abs=1e-12)
    assert pearson_cc(a, -a + 3.0) == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(ValueError, match="zero variance"):
        pearson_cc(a, np.ones_like(a))
    with pytest.raises(ValueError):
        pearson_cc(a, a[:2])


def test_pcc_matches_two_pass_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.random((6, 6, 6)), rng.random((6, 6, 6))
    assert abs(pearson_cc(a, b) - pearson_direct(a, b)) <= 1e-9


def test_pcc_symmetric_and_affine_invariant():
    rng = np.random.default_rng(2)
    for _ in range(10):
        a, b = rng.standard_normal((5, 5, 5)), rng.standard_normal((5, 5, 5))
        r = pearson_cc(a, b)
        assert abs(pearson_cc(b, a) - r) <= 1e-9
        s, t = rng.uniform(0.1, 10, 2)
        assert abs(pearson_cc(s * a + rng.uniform(-5, 5), t * b + 1.0) - r) <= 1e-9


# ---------------------------------------------------------------- alignment


def test_alignment_on_same_grid_is_identity():
    vol = Volume(np.random.default_rng(3).random((8, 8, 8)), (2.0, 2.0, 2.0))
    for center in ("grid", "mass"):
        out = align_to_template_grid(vol, vol, center=center)
        np.testing.assert_array_equal(out.data, vol.data)


def test_double_spacing_matches_direct_resample():
    data = np.random.default_rng(4).random((8, 8, 8))
    template = Volume(np.zeros((8, 8, 8)), (2.0, 2.0, 2.0))
    coarse = Volume(data, (4.0, 4.0, 4.0))
    out = align_to_template_grid(coarse, template, center="grid")
    # a 4 mm grid of 8 voxels spans 32 mm; the template grid covers its middle 16 mm
    full = resample_direct(data, (4, 4, 4), (2, 2, 2))  # 16^3 on the same physical extent
    np.testing.assert_allclose(out.data, full[4:12, 4:12, 4:12], atol=1e-6)


def test_centroid_alignment_recovers_translation():
    vol, _ = generate_phantom("T1", PhantomSpec(noise=0.0, bias=0.0), seed=5)
    shifted = Volume(np.roll(vol.data, (3, -2, 4), axis=(0, 1, 2)), vol.spacing)
    aligned = align_to_template_grid(shifted, vol, center="mass")
    fg_ref, fg_out = foreground_mask(vol), foreground_mask(aligned)
    overlap = (fg_ref & fg_out).sum() / fg_ref.sum()
    assert overlap >= 0.95
    expected = np.array([3, -2, 4]) * 2.0
    np.testing.assert_allclose(foreground_centroid(shifted) - foreground_centroid(vol), expected, atol=1e-9)


def test_alignment_errors():
    vol = Volume(np.ones((2, 2, 2)), (1, 1, 1))
    with pytest.raises(ValueError):
        align_to_template_grid(vol, vol, center="affine")


# ---------------------------------------------------------------- templates and classification


def test_template_fed_back_classifies_as_itself(noiseless_templates):
    for k, t in enumerate(noiseless_templates.volumes):
        cls, corrs = classify_by_template(t, noiseless_templates)
        assert cls == k
        assert corrs[k] == pytest.approx(1.0, abs=1e-9)


def test_noiseless_test_set_is_classified_perfectly():
    spec = PhantomSpec.noiseless(jitter=0.1)
    classes = ["T1", "T2", "FLAIR"]
    arrays, labels = [], []
    for k, c in enumerate(classes):
        for i in range(5):
            arrays.append(prepped(c, (1, i), spec))
            labels.append(k)
    templates = build_templates(arrays, labels, classes)
    for k, c in enumerate(classes):
        for i in range(5):
            x = Volume(prepped(c, (2, i), spec), (2.0, 2.0, 2.0))
            assert classify_by_template(x, templates)[0] == k


def test_classification_deterministic_and_order_invariant(noiseless_templates):
    x = Volume(prepped("FLAIR", 9), (2.0, 2.0, 2.0))
    cls, corrs = classify_by_template(x, noiseless_templates)
    assert classify_by_template(x, noiseless_templates) == (cls, corrs)
    order = [2, 0, 1]
    shuffled = TemplateSet([noiseless_templates.volumes[i] for i in order], [noiseless_templates.classes[i] for i in order])
    cls2, _ = classify_by_template(x, shuffled)
    assert shuffled.classes[cls2] == noiseless_templates.classes[cls]


def test_template_set_validation_and_round_trip(tmp_path, noiseless_templates):
    noiseless_templates.save(tmp_path)
    back = TemplateSet.load(tmp_path)
    assert back.classes == noiseless_templates.classes
    for a, b in zip(back.volumes, noiseless_templates.volumes):
        assert a.data.tobytes() == b.data.tobytes()
    v = noiseless_templates.volumes[0]
    with pytest.raises(ValueError):
        TemplateSet([v, v], ["A", "A"])
    with pytest.raises(ValueError):
        TemplateSet([v, Volume(np.ones((4, 4, 4)), v.spacing)], ["A", "B"])
    with pytest.raises(ValueError):
        build_templates([v.data], [1], ["A", "B"])
