import logging

import numpy as np
import pytest

from core import ConfigError, DomainError, FeatureRecord, FeatureStore, FormatError, ImageBuffer
from features import (
    TiledDescriptor,
    apply_pca_to_store,
    build_model,
    describe,
    extract_all,
    fit_pca_on_store,
    load_pca,
    pca_fit,
    pca_project,
    save_pca,
)
from patches import default_query_plan, default_reference_plan


def _smooth_image(side=100):
    y, x = np.mgrid[0:side, 0:side] / side
    arr = np.stack([
        127 + 120 * np.sin(2 * np.pi * x),
        127 + 120 * np.cos(2 * np.pi * y),
        255 * x * y,
    ], axis=-1)
    return ImageBuffer(np.clip(np.rint(arr), 0, 255).astype(np.uint8))


def _plane_samples(rng, n=200, d=10):
    u, v = rng.normal(size=(2, d))
    coeffs = rng.normal(size=(n, 2)) * [3.0, 1.0]
    return coeffs[:, :1] * u + coeffs[:, 1:] * v + rng.normal(size=d)


class TestDescriptor:
    def test_constant_patch_has_no_gradient(self):
        model = TiledDescriptor()
        vec = describe(model, ImageBuffer.filled(50, 50, (100, 150, 200)), 64)
        assert vec.shape == (model.output_dim,)
        assert np.linalg.norm(vec) == pytest.approx(1.0)
        np.testing.assert_array_equal(vec.reshape(64, 11)[:, 3:], 0.0)

    def test_deterministic(self, noise_image):
        img = noise_image(70, 50)
        np.testing.assert_array_equal(describe(TiledDescriptor(), img, 96), describe(TiledDescriptor(), img, 96))

    def test_stable_under_upsampling(self):
        img = _smooth_image()
        big = ImageBuffer.from_pil(img.to_pil().resize((200, 200)))
        model = TiledDescriptor()
        assert float(describe(model, img, 128) @ describe(model, big, 128)) >= 0.95

    def test_registry(self):
        assert build_model("tiled:4").output_dim == 16 * 11
        assert build_model("tiled").model_id == "tiled8"
        with pytest.raises(ConfigError):
            build_model("resnet:50")
        with pytest.raises(ConfigError):
            build_model("tiled:x")


class TestPca:
    def test_plane_is_captured(self, rng):
        model = pca_fit(_plane_samples(rng), d_out=2)
        assert model.explained_variance_ratio >= 0.999

    def test_components_are_orthonormal(self, rng):
        x = rng.normal(size=(300, 12)) * np.linspace(5, 0.5, 12)
        model = pca_fit(x, d_out=6)
        np.testing.assert_allclose(model.components @ model.components.T, np.eye(6), atol=1e-10)

    def test_agrees_with_covariance_eigenvectors(self, rng):
        x = rng.normal(size=(500, 8)) * [10, 7, 5, 3, 2, 1, 0.5, 0.2]
        model = pca_fit(x, d_out=4)
        evals, evecs = np.linalg.eigh(np.cov(x, rowvar=False))
        top = evecs[:, np.argsort(evals)[::-1][:4]].T
        for comp, ref in zip(model.components, top):
            assert abs(float(comp @ ref)) == pytest.approx(1.0, abs=1e-6)

    def test_rank_reduction(self, rng):
        model = pca_fit(_plane_samples(rng), d_out=5)
        assert model.d_out == 2

    def test_identical_samples(self):
        with pytest.raises(DomainError):
            pca_fit(np.ones((10, 4)))

    def test_full_rank_projection_keeps_distances(self, rng):
        basis = np.linalg.qr(rng.normal(size=(9, 3)))[0].T
        x = rng.normal(size=(50, 3)) @ basis
        model = pca_fit(x, d_out=3)
        p = model.projection_matrix()
        for a, b in zip(x[:10], x[10:20]):
            assert np.linalg.norm(p @ (a - b)) == pytest.approx(np.linalg.norm(a - b), rel=1e-9)

    def test_mean_vector_is_degenerate(self, rng):
        model = pca_fit(rng.normal(size=(40, 6)), d_out=3)
        out = pca_project(model, model.mean)
        assert out.degenerate
        assert np.linalg.norm(out.vector) == pytest.approx(1.0)

    def test_projection_is_unit_length(self, rng):
        model = pca_fit(rng.normal(size=(40, 6)), d_out=3, whiten=True)
        out = pca_project(model, rng.normal(size=6))
        assert not out.degenerate
        assert np.linalg.norm(out.vector) == pytest.approx(1.0)

    def test_wrong_dim(self, rng):
        model = pca_fit(rng.normal(size=(40, 6)), d_out=3)
        with pytest.raises(ConfigError):
            pca_project(model, np.ones(5))

    def test_save_and_load(self, tmp_path, rng):
        model = pca_fit(rng.normal(size=(60, 7)) * np.arange(1, 8), d_out=4, whiten=True)
        save_pca(model, tmp_path / "m.pca")
        loaded = load_pca(tmp_path / "m.pca")
        assert (loaded.d_raw, loaded.d_out) == (7, 4)
        np.testing.assert_allclose(loaded.projection_matrix(), model.projection_matrix(), rtol=1e-5, atol=1e-6)
        v = rng.normal(size=7)
        np.testing.assert_allclose(pca_project(loaded, v).vector, pca_project(model, v).vector, atol=1e-5)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.pca"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(FormatError):
            load_pca(path)


class TestExtraction:
    def test_reference_record_count(self, noise_image):
        images = [("R1", noise_image(40, 40)), ("R2", noise_image(50, 30))]
        store = extract_all(images, default_reference_plan(), [build_model("tiled:2")], [32])
        assert len(store) == 38
        assert store.dim == 44
        assert store.images() == ["R1", "R2"]

    def test_query_record_count(self, noise_image):
        plan = default_query_plan(proposals=0, detector=False)
        store = extract_all([("Q1", noise_image(120, 120))], plan, [build_model("tiled:2")], [32, 48, 64],
                            role="query")
        assert len(store) == 18
        assert store.scales() == [32, 48, 64]

    def test_worker_count_does_not_change_output(self, noise_image):
        images = [(f"R{i}", noise_image(36, 36)) for i in range(5)]
        args = (images, default_reference_plan(), [build_model("tiled:2")], [24])
        assert extract_all(*args, jobs=1) == extract_all(*args, jobs=3)

    def test_eight_workers_match_one(self, noise_image):
        images = [(f"Q{i}", noise_image(64, 56)) for i in range(10)]
        args = (images, default_query_plan(proposals=4, detector=False), [build_model("tiled:2")], [24, 32])
        one, eight = extract_all(*args, role="query", jobs=1), extract_all(*args, role="query", jobs=8)
        assert [r.key for r in one] == [r.key for r in eight]
        for a, b in zip(one, eight):
            assert a.vector.tobytes() == b.vector.tobytes()

    def test_unreadable_image_is_skipped(self, tmp_path, noise_image):
        bad = tmp_path / "bad.ppm"
        bad.write_bytes(b"garbage")
        store = extract_all([("R1", noise_image(40, 40)), ("R2", bad)], default_reference_plan(),
                            [build_model("tiled:2")], [32])
        assert store.images() == ["R1"]

    def test_unknown_role(self, noise_image):
        with pytest.raises(ConfigError):
            extract_all([], default_reference_plan(), [build_model("tiled:2")], [32], role="probe")

    def test_pca_on_store(self, noise_image):
        images = [(f"R{i}", noise_image(40, 40)) for i in range(4)]
        store = extract_all(images, default_reference_plan(), [build_model("tiled:2")], [32])
        model = fit_pca_on_store(store, model="tiled2", scale=32, d_out=8)
        projected = apply_pca_to_store(store, {"tiled2": model})
        assert projected.dim == 8
        assert len(projected) == len(store)
        assert [r.key for r in projected] == [r.key for r in store]

    def test_collapsed_projections_are_reported(self, rng, caplog):
        center = np.eye(6)[0]
        spread = rng.normal(size=(20, 6)) * 0.1
        model = pca_fit(np.vstack([center + spread, center - spread]), d_out=3)
        other = rng.normal(size=6)
        store = FeatureStore(6, [
            FeatureRecord("R1", "orig", "tiled2", 32, center),
            FeatureRecord("R2", "orig", "tiled2", 32, other / np.linalg.norm(other)),
        ])
        with caplog.at_level(logging.WARNING, logger="features"):
            projected = apply_pca_to_store(store, {"tiled2": model})
        assert len(projected) == 2
        assert any("1 of 2 projected records collapsed" in m for m in caplog.messages)
