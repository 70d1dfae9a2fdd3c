import math

import numpy as np
import pytest

import xray_triage as xt

SUMMED = [[53821, 3552, 763], [3116, 46620, 1380], [0, 356, 2712]]


def test_png_round_trip_and_text_rejection():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(9, 7, 3), dtype=np.uint8)
    back = xt.decode_image(xt.encode_png(img))
    assert back.shape == (9, 7, 3)
    assert np.array_equal(back, img)
    with pytest.raises(xt.NotAnImage):
        xt.decode_image(b"not an image at all\n")


def test_resize_constant_and_rotation():
    flat = np.full((5, 6), 77, dtype=np.uint8)
    assert np.all(xt.resize_bilinear(flat, 13, 4) == 77)
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    # numpy rot90 is counter-clockwise; k=-1 is a clockwise quarter turn
    assert np.array_equal(xt.rotate_quarter(img, 1), np.rot90(img, -1))


def test_summed_matrix_metrics():
    sens, spec = xt.sensitivity_specificity(SUMMED)
    m = np.array(SUMMED, dtype=float)
    for c in range(3):
        assert sens[c] == pytest.approx(m[c, c] / m[c].sum(), abs=1e-12)
    assert spec[2] == pytest.approx(107109 / 109252, abs=1e-12)
    assert abs(100 * spec[2] - 98.0) <= 0.1


def test_undefined_rate_is_none():
    sens, _ = xt.sensitivity_specificity([[3, 1, 0], [0, 2, 0], [0, 0, 0]])
    assert sens[2] is None


def test_confusion_matrix_and_aggregate():
    rows = xt.confusion_matrix([0, 1, 1, 0, 2, 2], [0, 0, 1, 2, 2, 2], 3)
    assert rows == [[1, 1, 0], [0, 1, 0], [1, 0, 2]]
    agg = xt.aggregate_runs([SUMMED] * 5)
    assert agg["summed_confusion_matrix"]["counts"][2][2] == 5 * 2712
    for cls in agg["mean_over_runs"].values():
        assert cls["sensitivity"]["std"] == pytest.approx(0.0)


def test_class_weights():
    counts = [10005, 9194, 394]
    assert xt.class_weights(counts, "as_written") == pytest.approx([1.0, 0.91894, 0.039380], rel=1e-4)
    assert xt.class_weights(counts, "inverse") == pytest.approx([1.0, 1.08821, 25.3934], rel=1e-4)


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_loss_gradient_against_numpy_differences():
    rng = np.random.default_rng(3)
    z = rng.uniform(-3, 3, size=(4, 3))
    y = [0, 2, 1, 2]
    w = [0.5, 1.0, 2.5]
    alpha = 0.1

    def loss(zz):
        t = np.full((4, 3), alpha / 3)
        t[np.arange(4), y] += 1 - alpha
        logp = np.log(_softmax(zz))
        return -np.mean(np.array(w)[y] * (t * logp).sum(axis=1))

    value, grad = xt.weighted_smoothed_ce(_softmax(z), y, alpha, w)
    assert value == pytest.approx(loss(z), rel=1e-10)
    eps = 1e-6
    for i in range(4):
        for j in range(3):
            zp, zm = z.copy(), z.copy()
            zp[i, j] += eps
            zm[i, j] -= eps
            num = (loss(zp) - loss(zm)) / (2 * eps)
            assert abs(num - grad[i, j]) <= 1e-4 * max(abs(num), abs(grad[i, j]), 1e-8)


def test_schedulers():
    for e in range(31):
        assert xt.step_decay_lr(0.001, 0.5, 5, e) == 0.001 * 0.5 ** (e // 5)
    lrs = xt.plateau_lrs(1.0, 0.5, 3, [0.7] * 7)
    assert lrs[-1] == 0.25


def test_pca_matches_numpy_eigh():
    rng = np.random.default_rng(9)
    x = rng.uniform(-1, 1, size=(50, 8)) * (8.0 - np.arange(8))
    r = xt.pca_project(x, 3)
    xc = x - x.mean(axis=0)
    vals, vecs = np.linalg.eigh(xc.T @ xc / 49)
    top = vecs[:, ::-1][:, :3]
    axes = np.array(r["axes"])
    s = np.linalg.svd(top - axes.T @ (axes @ top), compute_uv=False)
    assert math.asin(min(1.0, s[0])) < 1e-4
    assert r["eigenvalues"] == pytest.approx(vals[::-1][:3], rel=1e-9)


def test_models_predict_cam_and_gradcheck(tmp_path):
    f = xt.build_filter_net(32, 1)
    assert f.class_names == ["valid", "nonvalid"]
    img = xt.synth_upright(48, 5)
    out = f.predict(img)
    assert sum(out["scores"].values()) == pytest.approx(1.0, abs=1e-6)

    c = xt.build_covid_net(32, 3, 2)
    pred = c.predict(np.stack([img] * 3, axis=-1))
    feats = pred["features"]
    cam = xt.compute_cam(feats, c.head_weights, 1, 48, 40)
    assert cam.shape == (48, 40)
    assert cam.min() >= 0.0 and cam.max() <= 1.0

    c.save(tmp_path / "covid")
    again = xt.load_model(tmp_path / "covid")
    assert again.predict(img)["scores"] == c.predict(img)["scores"]

    g = xt.gradcheck(f, 4, 1)
    assert g["ok"] and g["max_relative_error"] < 1e-3


def test_synthetic_corpus_split(tmp_path):
    path = xt.write_synthetic_corpus(tmp_path, "classifier", [10, 10, 10], 16, 3, 2)
    info = xt.load_manifest(path)
    assert info["records"] == 30
    assert info["task"] == "classifier"
    a = xt.split_manifest(path, "by_patient", 1)
    assert a == xt.split_manifest(path, "by_patient", 1)
    # two images per patient, consecutive: both land in the same split
    for i in range(0, 30, 2):
        assert a[i] == a[i + 1]


def test_service_in_process(tmp_path):
    svc = xt.TriageService(xt.build_filter_net(32, 1), xt.build_covid_net(32, 3, 2), tmp_path / "store")
    r = svc.analyze(xt.encode_png(xt.synth_upright(40, 1)), "a.png")
    assert "request_id" in r
    assert sum(r["filter_scores"].values()) == pytest.approx(1.0, abs=1e-6)
    assert svc.result(r["request_id"]) == r
    assert svc.result("missing") is None
    bad = svc.analyze(b"hello", "notes.png")
    assert bad["code"] == "not_an_image"
    assert bad["status"] == 415
    assert len(svc.history()) == 1
    assert svc.health()["status"] == "ok"
    with pytest.raises(xt.ServiceStartupError):
        xt.TriageService(tmp_path / "nomodels", tmp_path / "store2")
