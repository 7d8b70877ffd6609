import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uda_lab.analysis import (
    IncompatibleDiagnostic,
    a_distance,
    a_distance_from_error,
    adaptability_report,
    choose_anchors,
    circle_through,
    export_embeddings,
    fourier_basis,
    fourier_sensitivity,
    high_frequency_mask,
    ideal_joint_risk,
    input_jacobian,
    jacobian_norms,
    load_embeddings,
    mean_jacobian_norm,
    nonconservative_gap,
    rho_estimate,
    sensitivity_report,
    trajectory_sensitivity,
)
from uda_lab.datasets import DomainPair, glyph_images, one_hot, two_moons
from uda_lab.nn import build_bundle


def moons_bundle(seed=0):
    return build_bundle(2, 2, np.random.default_rng(seed), hidden=(16,), feature_dim=8)


def fd_jacobian(bundle, x, h=1e-6):
    out = np.empty((len(x), bundle.n_classes, x.shape[1]))
    for j in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[j] = h
        out[:, :, j] = (bundle.predict_proba(x + e) - bundle.predict_proba(x - e)) / (2 * h)
    return out


def test_jacobian_matches_finite_differences():
    bundle = moons_bundle()
    x = np.random.default_rng(1).standard_normal((7, 2))
    np.testing.assert_allclose(input_jacobian(bundle, x), fd_jacobian(bundle, x), rtol=1e-6, atol=1e-9)


def test_jacobian_chunking_is_invisible():
    bundle = moons_bundle()
    x = np.random.default_rng(1).standard_normal((9, 2))
    # matmul summation order depends on batch shape, hence not bitwise
    np.testing.assert_allclose(input_jacobian(bundle, x, chunk=2), input_jacobian(bundle, x), rtol=0, atol=1e-15)


def test_jacobian_rows_sum_to_zero():
    # probabilities sum to one, so their input derivatives cancel
    bundle = build_bundle(3, 4, np.random.default_rng(2), hidden=(6,), feature_dim=5)
    j = input_jacobian(bundle, np.random.default_rng(3).standard_normal((5, 3)))
    np.testing.assert_allclose(j.sum(axis=1), 0.0, atol=1e-15)


def test_constant_model_has_zero_sensitivity():
    bundle = moons_bundle()
    for a in (*bundle.phi.weights, *bundle.phi.biases):
        a[...] = 0.0
    assert mean_jacobian_norm(bundle, np.ones((3, 2))) == 0.0
    with pytest.raises(ValueError):
        mean_jacobian_norm(bundle, np.empty((0, 2)))


def test_sensitivity_report_is_frobenius():
    bundle = moons_bundle()
    pair = two_moons(10, seed=0)
    rep = sensitivity_report(bundle, pair.x_s, pair.x_t)
    j = input_jacobian(bundle, pair.x_t)
    assert rep.mean_jacobian_norm_target == pytest.approx(np.mean([np.linalg.norm(m) for m in j]), rel=1e-12)
    np.testing.assert_array_equal(rep.per_sample_source, jacobian_norms(bundle, pair.x_s))


def test_circle_through_known_circle():
    center, r = np.array([1.0, -2.0]), 3.0
    angles = np.array([0.3, 2.0, 4.5])
    pts = center + r * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    c, radius, basis, got = circle_through(pts)
    np.testing.assert_allclose(c, center, atol=1e-12)
    assert radius == pytest.approx(r, rel=1e-12)
    np.testing.assert_allclose(basis @ basis.T, np.eye(2), atol=1e-12)
    for g, p in zip(got, pts):
        np.testing.assert_allclose(c + radius * (np.cos(g) * basis[0] + np.sin(g) * basis[1]), p, atol=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_property_anchors_are_equidistant_from_centre(seed, d):
    pts = np.random.default_rng(seed).standard_normal((3, d))
    c, radius, _, _ = circle_through(pts)
    np.testing.assert_allclose(np.linalg.norm(pts - c, axis=1), radius, rtol=1e-8)


def test_collinear_anchors_rejected():
    with pytest.raises(ValueError):
        circle_through(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))
    with pytest.raises(ValueError):
        circle_through(np.array([[0.0, 0.0], [0.0, 0.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        circle_through(np.zeros((2, 2)))


def test_trajectory_marks_the_anchors():
    bundle = moons_bundle()
    anchors = np.array([[0.0, 0.0], [1.0, 0.5], [0.2, 1.1]])
    curve = trajectory_sensitivity(bundle, anchors, n_points=400)
    assert curve.norms.shape == (400,)
    step = 2 * np.pi / 400
    for a, i in zip(anchors, curve.anchor_indices):
        assert np.linalg.norm(curve.point(curve.t[i])[0] - a) <= curve.radius * step
    np.testing.assert_allclose(curve.norms, jacobian_norms(bundle, curve.point(curve.t)))


def test_choose_anchors_respects_class_mode():
    bundle = moons_bundle()
    pair = two_moons(100, seed=0)
    labels = bundle.predict_proba(pair.x_s).argmax(axis=1)
    rng = np.random.default_rng(0)
    same = choose_anchors(bundle, pair.x_s, pair.y_s, True, rng)
    picked = [int(np.flatnonzero((pair.x_s == a).all(axis=1))[0]) for a in same]
    assert len(set(labels[picked])) == 1
    assert np.all(labels[picked] == pair.y_s[picked].argmax(axis=1))
    cross = choose_anchors(bundle, pair.x_s, pair.y_s, False, rng)
    picked = [int(np.flatnonzero((pair.x_s == a).all(axis=1))[0]) for a in cross]
    assert len(set(labels[picked])) == 2


@pytest.mark.parametrize("err, expected", [(0.5, 0.0), (0.0, 2.0), (0.25, 1.0), (0.7, 0.0)])
def test_a_distance_from_error(err, expected):
    assert a_distance_from_error(err) == expected


def identity(x):
    return x


def test_a_distance_identical_and_disjoint_domains():
    x = np.random.default_rng(0).standard_normal((200, 2))
    assert a_distance(identity, x, x.copy()) == 0.0
    assert a_distance(identity, x, x + 100.0) == 2.0
    with pytest.raises(ValueError):
        a_distance(identity, x, x[:0])


def _pair(x_s, y_s, x_t, y_t):
    return DomainPair(x_s, one_hot(y_s, 2), x_t, one_hot(y_t, 2), "points2d")


def test_lambda_is_small_when_a_joint_rule_exists():
    rng = np.random.default_rng(0)
    x_s, x_t = rng.standard_normal((200, 2)), rng.standard_normal((200, 2)) + [0.0, 5.0]
    pair = _pair(x_s, (x_s[:, 0] > 0).astype(int), x_t, (x_t[:, 0] > 0).astype(int))
    assert ideal_joint_risk(identity, pair) < 0.1


def test_lambda_is_large_when_domains_disagree():
    # same inputs, opposite labels: no joint rule beats one error per domain pair
    x = np.random.default_rng(0).standard_normal((200, 2))
    y = (x[:, 0] > 0).astype(int)
    pair = _pair(x, y, x.copy(), 1 - y)
    assert ideal_joint_risk(identity, pair) > 0.8
    assert nonconservative_gap(identity, pair) > 0.3


@pytest.mark.parametrize("before, after, expected", [(0.4, 0.2, 2.0), (0.3, 0.0, 1.0), (0.5, 0.4, 5.0)])
def test_rho_estimate(before, after, expected):
    assert rho_estimate(before, after) == pytest.approx(expected)


def test_rho_undefined_without_improvement():
    with pytest.raises(ValueError):
        rho_estimate(0.2, 0.2)
    with pytest.raises(ValueError):
        rho_estimate(0.0, 0.0)
    rep = adaptability_report(identity, two_moons(40, seed=0), err_before=0.2, err_after=0.3)
    assert rep.rho is None


def test_fourier_basis_is_unit_and_real():
    for u, v in [(0, 0), (1, 2), (-3, 4), (4, 4)]:
        b = fourier_basis(8, u, v)
        assert b.shape == (8, 8) and b.dtype == np.float64
        assert np.linalg.norm(b) == pytest.approx(1.0, rel=1e-12)
    np.testing.assert_allclose(fourier_basis(8, 0, 0), 1 / 8)


def test_high_frequency_mask():
    m = high_frequency_mask(16)
    assert not m[8, 8] and not m[5, 11] and m[4, 8] and m[0, 0]
    assert m.sum() == 16 * 16 - 7 * 7


def test_fourier_zero_norm_gives_clean_error():
    pair = glyph_images(30, size=8, seed=0)
    bundle = build_bundle(64, 4, np.random.default_rng(0), hidden=(8,), feature_dim=4)
    clean = np.mean(bundle.predict_proba(pair.x_t).argmax(axis=1) != pair.y_t_eval.argmax(axis=1))
    heat = fourier_sensitivity(bundle, pair, perturbation_norm=0.0)
    np.testing.assert_array_equal(heat.errors, clean)
    assert heat.errors.shape == (8, 8) and heat.domain == "target"
    assert fourier_sensitivity(bundle, pair, "source", 0.0).domain == "source"


def test_fourier_rejects_point_data():
    with pytest.raises(IncompatibleDiagnostic):
        fourier_sensitivity(moons_bundle(), two_moons(10))


def test_embeddings_round_trip(tmp_path):
    bundle = moons_bundle()
    pair = two_moons(12, seed=1)
    z, labels, domains = load_embeddings(export_embeddings(bundle, pair, tmp_path / "e.csv"))
    np.testing.assert_array_equal(z, np.concatenate([bundle.encode(pair.x_s), bundle.encode(pair.x_t)]))
    np.testing.assert_array_equal(labels[:12], pair.y_s.argmax(axis=1))
    assert list(domains) == ["source"] * 12 + ["target"] * 12


def _param_hash(bundle):
    h = hashlib.sha256()
    for k, v in sorted(bundle.parameters().items()):
        h.update(k.encode() + v.tobytes())
    return h.hexdigest()


def test_diagnostics_leave_parameters_untouched(tmp_path):
    bundle = moons_bundle()
    pair = two_moons(40, seed=0)
    before = _param_hash(bundle)
    sensitivity_report(bundle, pair.x_s, pair.x_t)
    trajectory_sensitivity(bundle, pair.x_s[[0, 5, 9]], 20)
    adaptability_report(bundle, pair, err_before=0.5, err_after=0.2)
    export_embeddings(bundle, pair, tmp_path / "e.csv")
    assert _param_hash(bundle) == before


def test_linear_model_jacobian_closed_form():
    # with no hidden layers the logits are x @ W_phi @ W_g + const
    bundle = build_bundle(3, 4, np.random.default_rng(5), hidden=(), feature_dim=5)
    w = bundle.phi.weights[0] @ bundle.g.weights[0]
    x = np.random.default_rng(6).standard_normal((6, 3))
    p = bundle.predict_proba(x)
    expected = np.stack([(np.diag(pi) - np.outer(pi, pi)) @ w.T for pi in p])
    np.testing.assert_allclose(input_jacobian(bundle, x), expected, rtol=0, atol=1e-10)


def test_equilateral_circumradius():
    a = 2.0
    pts = np.array([[0.0, 0.0], [a, 0.0], [a / 2, a * np.sqrt(3) / 2]])
    assert circle_through(pts)[1] == pytest.approx(a / np.sqrt(3), rel=1e-12)


def test_curve_at_anchor_parameters_reproduces_anchor_norms():
    bundle = moons_bundle()
    anchors = np.array([[0.3, -0.2], [1.0, 0.5], [-0.4, 1.1]])
    curve = trajectory_sensitivity(bundle, anchors, 50)
    np.testing.assert_allclose(
        jacobian_norms(bundle, curve.point(curve.anchor_angles)), jacobian_norms(bundle, anchors), rtol=1e-9
    )


def test_source_only_model_is_calm_only_near_source_data():
    from uda_lab.trainer import RunConfig, train

    bundle, _ = train(RunConfig(method="source_only"))
    pair = two_moons(seed=0)
    rng = np.random.default_rng(0)

    def anchor_and_curve(x, y):
        out = []
        for same in (True, False):
            for _ in range(5):
                c = trajectory_sensitivity(bundle, choose_anchors(bundle, x, y, same, rng), 100)
                out.append((c.norms[c.anchor_indices].mean(), c.norms.mean()))
        return np.mean(out, axis=0)

    src_anchor, src_curve = anchor_and_curve(pair.x_s, pair.y_s)
    tgt_anchor, _ = anchor_and_curve(pair.x_t, pair.y_t_eval)
    assert src_anchor < 0.5 * src_curve
    assert tgt_anchor > 5 * src_anchor


def test_huge_blob_shift_gives_maximal_a_distance():
    from uda_lab.datasets import shifted_blobs

    pair = shifted_blobs(3, 300, shift_vector=[50.0, 50.0], seed=0)
    assert a_distance(identity, pair.x_s, pair.x_t) == pytest.approx(2.0, abs=0.05)


def test_lambda_on_separable_blobs_and_collapsed_features():
    from uda_lab.datasets import shifted_blobs

    pair = shifted_blobs(2, 300, seed=0)
    assert ideal_joint_risk(identity, pair) == pytest.approx(0.0, abs=0.05)
    collapsed = ideal_joint_risk(lambda x: np.zeros((len(x), 3)), pair)
    assert collapsed == pytest.approx(1.0, abs=0.1)
    assert collapsed >= 0.0


def test_gap_vanishes_for_identical_domains():
    pair = two_moons(150, rotation_deg=0.0, seed=0)
    same = DomainPair(pair.x_s, pair.y_s, pair.x_s.copy(), pair.y_s.copy(), pair.modality)
    assert abs(nonconservative_gap(identity, same)) <= 0.03


def test_gap_is_positive_for_an_unadapted_encoder():
    from uda_lab.trainer import RunConfig, train

    moons = {"name": "two_moons", "n_per_domain": 300, "rotation_deg": 135.0}
    bundle, _ = train(RunConfig(method="source_only", dataset=moons))
    assert nonconservative_gap(bundle, two_moons(rotation_deg=135.0, seed=0)) > 0.05


def test_rho_large_for_small_improvement():
    assert rho_estimate(0.5, 0.45) == pytest.approx(10.0)


def test_embedding_columns_match_feature_dim(tmp_path):
    bundle = build_bundle(2, 2, np.random.default_rng(0), hidden=(4,), feature_dim=7)
    path = export_embeddings(bundle, two_moons(5), tmp_path / "e.csv")
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + 10
    assert lines[0].split(",") == [f"z_{i}" for i in range(7)] + ["label", "domain"]
