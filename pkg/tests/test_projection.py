"""Alignment, encoder, and latent-optimization behavior."""

import numpy as np
import pytest

from genviews.generator import GeneratorSpec, LinearOracleGenerator, ToyGeneratorConfig, ToyStyleGenerator
from genviews.latent import default_partition
from genviews.metrics import MetricConfig, image_loss
from genviews.projection import (
    Encoder,
    EncoderTrainConfig,
    ProjectionConfig,
    align_and_mask,
    project,
    project_batch,
    shift_image,
    train_encoder,
    write_projection_log,
)


class TestShiftImage:
    def test_known_shift(self):
        img = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        out, mask = shift_image(img, dx=1, dy=0, fill=-1.0)
        np.testing.assert_array_equal(out[0, :, 0], -1.0)
        np.testing.assert_array_equal(out[0, :, 1:], img[0, :, :3])
        np.testing.assert_array_equal(mask[:, 0], 0.0)
        np.testing.assert_array_equal(mask[:, 1:], 1.0)

    def test_round_trip_restores_overlap(self):
        rng = np.random.default_rng(0)
        img = rng.random((3, 8, 8)).astype(np.float32)
        fwd, _ = shift_image(img, dx=2, dy=-1)
        back, mask = shift_image(fwd, dx=-2, dy=1)
        inside = mask == 1.0
        np.testing.assert_array_equal(back[:, inside], img[:, inside])

    def test_shift_past_frame_blanks_everything(self):
        img = np.ones((1, 4, 4), dtype=np.float32)
        out, mask = shift_image(img, dx=4, dy=0, fill=0.5)
        np.testing.assert_array_equal(out, 0.5)
        np.testing.assert_array_equal(mask, 0.0)

    def test_zero_shift_identity(self):
        img = np.random.default_rng(1).random((2, 5, 5)).astype(np.float32)
        out, mask = shift_image(img, 0, 0)
        np.testing.assert_array_equal(out, img)
        np.testing.assert_array_equal(mask, 1.0)


class TestAlignAndMask:
    def test_centered_bbox_is_identity(self):
        img = np.random.default_rng(2).random((3, 8, 8)).astype(np.float32)
        aligned, tf = align_and_mask(img, (2, 2, 4, 4))  # center (4,4) == canvas center
        assert (tf.dx, tf.dy) == (0, 0)
        np.testing.assert_array_equal(aligned, img)
        np.testing.assert_array_equal(tf.mask, 1.0)

    def test_recenters_bbox(self):
        img = np.zeros((1, 16, 16), dtype=np.float32)
        img[0, 2:5, 10:14] = 1.0  # bbox x=10 y=2 w=4 h=3
        aligned, tf = align_and_mask(img, (10, 2, 4, 3))
        ys, xs = np.nonzero(aligned[0] == 1.0)
        cx = (xs.min() + xs.max() + 1) / 2.0
        cy = (ys.min() + ys.max() + 1) / 2.0
        assert abs(cx - 8.0) <= 0.5
        assert abs(cy - 8.0) <= 0.5
        # vacated pixels are masked out, moved region stays valid
        assert tf.mask.min() == 0.0
        assert tf.mask[int(ys[0]), int(xs[0])] == 1.0

    def test_bbox_validation(self):
        img = np.zeros((1, 8, 8), dtype=np.float32)
        with pytest.raises(ValueError):
            align_and_mask(img, (0, 0, 0, 4))
        with pytest.raises(ValueError):
            align_and_mask(img, (6, 0, 4, 4))
        with pytest.raises(ValueError):
            align_and_mask(np.zeros((8, 8)), (0, 0, 4, 4))


def _oracle(seed=0, blocks=3, dim=4, res=4, channels=3):
    spec = GeneratorSpec(
        blocks=blocks,
        latent_dim=dim,
        resolution=res,
        channels=channels,
        partition=default_partition(blocks),
    )
    return LinearOracleGenerator.random(spec, seed=seed)


def _lstsq_optimum(gen, target, mask=None):
    """Minimizer of the squared objective on a linear generator.

    With one pyramid level both loss terms are proportional to the masked
    squared residual, so the optimum is the (masked) least-squares solution.
    """
    weight = gen.weight_matrix()
    bias = gen.bias_vector()
    resid = target.ravel().astype(np.float64) - bias
    if mask is not None:
        rows = np.tile(mask.ravel() > 0, gen.spec.channels)
        weight = weight[rows]
        resid = resid[rows]
    sol, *_ = np.linalg.lstsq(weight, resid, rcond=None)
    return sol.reshape(gen.spec.blocks, gen.spec.latent_dim)


def _objective_value(gen, target, mask, w, config):
    recon = gen.synthesize_batch(np.asarray(w, dtype=np.float32)[None])[0]
    total, _ = image_loss(target, recon, mask, config.metric)
    return total


SQUARED = MetricConfig(mode="squared", pyramid_levels=1)


class TestProjectionOracle:
    def test_matches_least_squares_full_mask(self):
        gen = _oracle(seed=1)
        config = ProjectionConfig(lam=0.0, steps=120, init="zeros", metric=SQUARED)
        rng = np.random.default_rng(3)
        for trial in range(3):
            target = rng.random((3, 4, 4)).astype(np.float32)
            res = project(target, None, gen, config)
            w_opt = _lstsq_optimum(gen, target)
            f_opt = _objective_value(gen, target, None, w_opt, config)
            f_got = res.image_loss
            assert f_got <= f_opt * (1 + 1e-5) + 1e-12
            assert abs(f_got - f_opt) <= 1e-5 * max(f_opt, 1e-12) + 1e-10

    def test_matches_least_squares_partial_mask(self):
        gen = _oracle(seed=2)
        config = ProjectionConfig(lam=0.0, steps=150, init="zeros", metric=SQUARED)
        rng = np.random.default_rng(4)
        target = rng.random((3, 4, 4)).astype(np.float32)
        mask = np.ones((4, 4), dtype=np.float32)
        mask[0, :] = 0.0
        res = project(target, mask, gen, config)
        w_opt = _lstsq_optimum(gen, target, mask)
        f_opt = _objective_value(gen, target, mask, w_opt, config)
        assert abs(res.image_loss - f_opt) <= 1e-5 * max(f_opt, 1e-12) + 1e-10

    def test_zero_steps_returns_init(self):
        gen = _oracle(seed=3)
        config = ProjectionConfig(lam=0.5, steps=0, init="zeros", metric=SQUARED)
        target = np.random.default_rng(5).random((3, 4, 4)).astype(np.float32)
        res = project(target, None, gen, config)
        np.testing.assert_array_equal(res.w_star.values, 0.0)
        assert res.steps_used == 0
        assert res.latent_term == 0.0
        assert res.image_loss == res.init_image_loss


class TestProjectBatch:
    def test_loss_never_exceeds_initialization(self):
        cfg = ToyGeneratorConfig(
            resolution=16, channels=3, latent_dim=8, channel_base=32, channel_min=8, seed=0
        )
        gen = ToyStyleGenerator(cfg)
        config = ProjectionConfig(lam=0.5, steps=6, init="mean_w", mean_w_samples=32)
        rng = np.random.default_rng(6)
        images = rng.random((3, 3, 16, 16)).astype(np.float32)
        results = project_batch(images, None, gen, config)
        for r in results:
            penalized = r.l1_term + r.perceptual_term + config.lam * r.latent_term
            assert penalized <= r.init_image_loss
            assert r.image_loss == r.l1_term + r.perceptual_term
            assert r.total_loss == r.image_loss + r.latent_term

    def test_adam_path_also_bounded(self):
        gen = _oracle(seed=4)
        config = ProjectionConfig(
            lam=0.1, steps=10, optimizer="adam", init="zeros", metric=SQUARED
        )
        images = np.random.default_rng(7).random((2, 3, 4, 4)).astype(np.float32)
        results = project_batch(images, None, gen, config)
        for r in results:
            assert r.l1_term + r.perceptual_term + 0.1 * r.latent_term <= r.init_image_loss

    def test_ids_masks_and_digest_recorded(self):
        gen = _oracle(seed=5)
        config = ProjectionConfig(lam=0.0, steps=2, init="zeros", metric=SQUARED)
        images = np.random.default_rng(8).random((2, 3, 4, 4)).astype(np.float32)
        masks = np.ones((2, 4, 4), dtype=np.float32)
        masks[1, 2:] = 0.0
        results = project_batch(images, masks, gen, config, image_ids=["a", "b"])
        assert [r.image_id for r in results] == ["a", "b"]
        np.testing.assert_array_equal(results[1].mask, masks[1])
        assert results[0].config_digest == config.digest(gen)
        assert len(results[0].config_digest) == 32

    def test_shape_validation(self):
        gen = _oracle(seed=6)
        config = ProjectionConfig(init="zeros", metric=SQUARED)
        with pytest.raises(ValueError):
            project_batch(np.zeros((3, 4, 4), dtype=np.float32), None, gen, config)
        with pytest.raises(ValueError):
            project_batch(
                np.zeros((1, 3, 4, 4), dtype=np.float32),
                np.ones((2, 4, 4), dtype=np.float32),
                gen,
                config,
            )
        with pytest.raises(ValueError):
            project_batch(
                np.zeros((2, 3, 4, 4), dtype=np.float32), None, gen, config, image_ids=["x"]
            )

    def test_encoder_init_requires_encoder(self):
        gen = _oracle(seed=7)
        config = ProjectionConfig(init="encoder", metric=SQUARED)
        with pytest.raises(ValueError):
            project(np.zeros((3, 4, 4), dtype=np.float32), None, gen, config)


class TestProjectionConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            ProjectionConfig(lam=-1.0)
        with pytest.raises(ValueError):
            ProjectionConfig(steps=-1)
        with pytest.raises(ValueError):
            ProjectionConfig(optimizer="newton")
        with pytest.raises(ValueError):
            ProjectionConfig(init="random")

    def test_digest_sensitivity(self):
        gen_a, gen_b = _oracle(seed=8), _oracle(seed=9)
        base = ProjectionConfig(init="zeros")
        assert base.digest(gen_a) == ProjectionConfig(init="zeros").digest(gen_a)
        assert base.digest(gen_a) != base.digest(gen_b)
        assert base.digest(gen_a) != ProjectionConfig(init="zeros", steps=7).digest(gen_a)

    def test_digest_tracks_encoder(self):
        gen = _oracle(seed=10)
        config = ProjectionConfig(init="encoder")
        enc_a = Encoder(gen.spec, width=8, seed=0)
        enc_b = Encoder(gen.spec, width=8, seed=1)
        assert config.digest(gen, enc_a) != config.digest(gen, enc_b)
        with pytest.raises(ValueError):
            config.digest(gen)


class TestEncoder:
    def test_deterministic_and_shaped(self):
        gen = _oracle(seed=11)
        a = Encoder(gen.spec, width=8, seed=3)
        b = Encoder(gen.spec, width=8, seed=3)
        assert a.fingerprint() == b.fingerprint()
        x = np.random.default_rng(9).random((2, 3, 4, 4)).astype(np.float32)
        out = a.encode_batch(x)
        assert out.shape == (2, 3, 4)
        np.testing.assert_array_equal(out, b.encode_batch(x))
        # single-image path wraps a batch of one
        w = a.encode(x[0])
        np.testing.assert_array_equal(w.values, a.encode_batch(x[:1])[0])

    def test_save_load_roundtrip(self, tmp_path):
        gen = _oracle(seed=12)
        enc = Encoder(gen.spec, width=8, seed=4)
        enc.save(tmp_path / "enc.ckpt", extra_meta={"tag": 1})
        loaded = Encoder.load(tmp_path / "enc.ckpt")
        assert loaded.fingerprint() == enc.fingerprint()
        x = np.random.default_rng(10).random((1, 3, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(loaded.encode_batch(x), enc.encode_batch(x))

    def test_rejects_wrong_shape(self):
        enc = Encoder(_oracle(seed=13).spec, width=8)
        with pytest.raises(ValueError):
            enc.encode_batch(np.zeros((1, 3, 8, 8), dtype=np.float32))

    def test_training_improves_inversion(self):
        gen = _oracle(seed=14, blocks=3, dim=4, res=8)
        config = EncoderTrainConfig(
            steps=60, batch_size=16, lr=3e-3, width=8, seed=0, metric=SQUARED
        )
        trained, metrics = train_encoder(gen, config)
        untrained = Encoder(gen.spec, width=8, seed=0)
        assert metrics and metrics[0]["step"] == 0

        z = gen.sample_z(99, 16)
        w_true = np.repeat(gen.map_rows(z)[:, None, :], 3, axis=1)
        x = gen.synthesize_batch(w_true)

        def recon_err(encoder):
            recon = gen.synthesize_batch(encoder.encode_batch(x.astype(np.float32)))
            return float(((recon - x) ** 2).mean())

        assert recon_err(trained) < recon_err(untrained)

    def test_zero_steps_returns_fresh(self):
        gen = _oracle(seed=15)
        config = EncoderTrainConfig(steps=0, width=8, seed=2)
        enc, metrics = train_encoder(gen, config)
        assert metrics == []
        assert enc.fingerprint() == Encoder(gen.spec, width=8, seed=2).fingerprint()


class TestProjectionLog:
    def test_format(self, tmp_path):
        gen = _oracle(seed=16)
        config = ProjectionConfig(lam=0.0, steps=2, init="zeros", metric=SQUARED)
        images = np.random.default_rng(11).random((2, 3, 4, 4)).astype(np.float32)
        results = project_batch(images, None, gen, config, image_ids=["img-0", "img-1"])
        path = tmp_path / "log.csv"
        write_projection_log(path, results)
        lines = path.read_text().splitlines()
        assert lines[0] == "image_id,init_loss,final_l1,final_perceptual,final_latent,steps"
        assert len(lines) == 3
        first = lines[1].split(",")
        assert first[0] == "img-0"
        assert first[1] == f"{results[0].init_image_loss:.8f}"
        assert first[5] == str(results[0].steps_used)

    def test_blank_init_loss(self, tmp_path):
        gen = _oracle(seed=17)
        config = ProjectionConfig(lam=0.0, steps=0, init="zeros", metric=SQUARED)
        res = project(np.zeros((3, 4, 4), dtype=np.float32), None, gen, config)
        res.init_image_loss = None
        write_projection_log(tmp_path / "log.csv", [res])
        row = (tmp_path / "log.csv").read_text().splitlines()[1]
        assert row.split(",")[1] == ""
