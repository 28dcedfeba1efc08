import dataclasses
import json

import numpy as np
import pytest

from cityqa.decoder import Vocab, answer_ids, tokenize, DecoderInput
from cityqa.imf import ModalityBundle, fuse_traced
from cityqa.numerics import NumericError, finite_diff_grad, max_rel_error
from cityqa.seeding import derive_rng
from cityqa.training import (
    CHECKPOINT_VERSION,
    Checkpoint,
    CheckpointError,
    Dataset,
    Example,
    SyntheticTaskSpec,
    TrainConfig,
    build_model,
    featurize_pairs,
    load_checkpoint,
    loss_and_grads,
    make_synthetic_dataset,
    mask_bundle,
    modality_dropout,
    model_from_checkpoint,
    nearest_centroid_accuracy,
    save_checkpoint,
    total_loss,
    train,
)

TINY = dict(image_dim=3, point_dim=3, encoder_hidden=4, encoded_dim=3,
            latent_dim=4, model_dim=6, ff_dim=5, vision_token_count=2)
TINY_SPEC = SyntheticTaskSpec(image_dim=3, point_dim=3, train_size=16, test_size=8)


def tiny_model(seed=0, **overrides):
    cfg = TrainConfig(seed=seed, **{**TINY, **overrides})
    ds = make_synthetic_dataset(TINY_SPEC, seed=seed)
    vocab = Vocab.build([e.question for e in ds.train] + [e.answer for e in ds.train])
    return cfg, ds, build_model(cfg, vocab)


class TestConfig:
    def test_paper_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr == 1e-3
        assert cfg.weight_decay == 5e-4
        assert cfg.batch_size == 4

    def test_unknown_field_named(self):
        with pytest.raises(ValueError, match="lern_rate"):
            TrainConfig.from_dict({"lern_rate": 0.1})

    def test_invalid_dropout(self):
        with pytest.raises(ValueError):
            TrainConfig(modality_dropout_p=1.0)

    def test_degenerate_task_spec(self):
        with pytest.raises(ValueError):
            SyntheticTaskSpec(n_classes=0)
        with pytest.raises(ValueError):
            SyntheticTaskSpec(image_dim=1)  # cannot carry both label bits


class TestTotalLoss:
    def test_zero_kl_weight_is_pure_ce(self):
        cfg, ds, model = tiny_model(kl_weight=0.0)
        batch = ds.train[:3]
        loss, comps = total_loss(batch, model, derive_rng("x", 0))
        assert loss == comps["ce"]

    def test_perfect_decoder_and_prior_posterior_give_zero(self):
        cfg, ds, model = tiny_model()
        # posterior forced to the prior
        for head in (model.imf.head_mu, model.imf.head_log_sigma):
            head.layers[0].weight.value[:] = 0.0
            head.layers[0].bias.value[:] = 0.0
        # decoder forced to emit EOS with near-certainty
        model.decoder.out_w.value[:] = 0.0
        model.decoder.out_b.value[:] = 0.0
        model.decoder.out_b.value[0, model.vocab.eos_id] = 60.0
        batch = [Example(id="e", bundle=ds.train[0].bundle, question="what",
                         answer="")]
        loss, comps = total_loss(batch, model, derive_rng("x", 1))
        assert comps["kl"] == 0.0
        assert loss < 1e-10

    def test_matches_manual_composition(self):
        cfg, ds, model = tiny_model(kl_weight=0.25)
        ex = ds.train[0]
        rng = derive_rng("manual", 3)
        eps = rng.standard_normal(model.imf.latent_dim)
        fused, _ = fuse_traced(ex.bundle, model.imf, eps)
        y, _ = model.projector.forward(fused.z.reshape(1, -1))
        inp = DecoderInput(h_v=y.reshape(2, cfg.model_dim),
                           question_ids=tokenize(ex.question, model.vocab))
        ce, _ = model.decoder.ce_loss(inp, answer_ids(ex.answer, model.vocab))
        expected = ce + 0.25 * fused.kl
        loss, _ = total_loss([ex], model, derive_rng("manual", 3))
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_empty_batch(self):
        cfg, ds, model = tiny_model()
        with pytest.raises(ValueError):
            total_loss([], model, derive_rng("x", 0))

    def test_end_to_end_grads_match_finite_differences(self):
        cfg, ds, model = tiny_model(seed=2)
        batch = ds.train[:2]

        def f():
            return total_loss(batch, model, derive_rng("fd", 0))[0]

        loss_and_grads(batch, model, derive_rng("fd", 0))
        params = model.parameters()
        analytic = [p.grad.copy() for p in params]
        for p in params:
            p.zero_grad()
        numeric = finite_diff_grad(f, params)
        worst = max(max_rel_error(a, n) for a, n in zip(analytic, numeric))
        assert worst < 1e-4


class TestModalityDropout:
    def test_zero_rate_is_identity(self):
        b = ModalityBundle(image_features=[1.0], point_features=[2.0])
        out = modality_dropout(b, 0.0, derive_rng("d", 0))
        assert np.array_equal(out.image_features, b.image_features)
        assert np.array_equal(out.point_features, b.point_features)

    def test_single_modality_bundle_never_emptied(self):
        b = ModalityBundle(point_features=[1.0, 2.0])
        rng = derive_rng("d", 1)
        for _ in range(200):
            out = modality_dropout(b, 0.9, rng)
            assert out.point_present and not out.image_present

    def test_invalid_rate(self):
        b = ModalityBundle(point_features=[1.0])
        with pytest.raises(ValueError):
            modality_dropout(b, 1.0, derive_rng("d", 2))

    def test_empirical_rates(self):
        # Retention restores the last (point) slot whenever both drop, so the
        # observable rates are P(image absent) = p and
        # P(point absent) = p * (1 - p); both pin the raw per-modality draw
        # rate p = 0.3.
        rng = derive_rng("d", 3)
        b = ModalityBundle(image_features=[1.0], point_features=[2.0])
        n = 10_000
        img_dropped = pt_dropped = 0
        for _ in range(n):
            out = modality_dropout(b, 0.3, rng)
            img_dropped += not out.image_present
            pt_dropped += not out.point_present
        assert abs(img_dropped / n - 0.3) < 0.02
        assert abs(pt_dropped / n - 0.3 * 0.7) < 0.02


class TestSyntheticDataset:
    def test_same_seed_identical(self):
        a = make_synthetic_dataset(TINY_SPEC, seed=5)
        b = make_synthetic_dataset(TINY_SPEC, seed=5)
        for ea, eb in zip(a.train + a.test, b.train + b.test):
            assert ea.id == eb.id and ea.answer == eb.answer
            assert np.array_equal(ea.bundle.image_features, eb.bundle.image_features)
            assert np.array_equal(ea.bundle.point_features, eb.bundle.point_features)

    def test_noiseless_task_perfectly_separable(self):
        spec = dataclasses.replace(TINY_SPEC, noise=0.0)
        ds = make_synthetic_dataset(spec, seed=0)
        assert nearest_centroid_accuracy(ds.train, ds.test, "both") == 1.0

    def test_single_modality_strictly_weaker_than_both(self):
        ds = make_synthetic_dataset(SyntheticTaskSpec(), seed=0)
        both = nearest_centroid_accuracy(ds.train, ds.test, "both")
        image = nearest_centroid_accuracy(ds.train, ds.test, "image-only")
        point = nearest_centroid_accuracy(ds.train, ds.test, "point-only")
        assert both > point > image

    def test_mask_bundle(self):
        b = ModalityBundle(image_features=[1.0], point_features=[2.0])
        assert not mask_bundle(b, "image-only").point_present
        assert not mask_bundle(b, "point-only").image_present
        assert mask_bundle(b, "both") is b
        with pytest.raises(ValueError):
            mask_bundle(ModalityBundle(image_features=[1.0]), "point-only")


class TestTrain:
    def test_pure_function_of_config_dataset_seed(self):
        spec = TINY_SPEC
        ds = make_synthetic_dataset(spec, seed=1)
        cfg = TrainConfig(seed=1, epochs=3, **TINY)
        ck1, tr1 = train(cfg, ds)
        ck2, tr2 = train(cfg, ds)
        assert tr1 == tr2
        for name in ck1.params:
            assert np.array_equal(ck1.params[name], ck2.params[name])

    def test_loss_non_increasing_first_epochs(self):
        ds = make_synthetic_dataset(TINY_SPEC, seed=0)
        cfg = TrainConfig(seed=0, epochs=4, **TINY)
        _, trace = train(cfg, ds)
        for a, b in zip(trace[:3], trace[1:4]):
            assert b["loss"] <= a["loss"] * 1.05

    def test_zero_lr_leaves_parameters_at_init(self):
        ds = make_synthetic_dataset(TINY_SPEC, seed=0)
        cfg = TrainConfig(seed=0, epochs=2, lr=0.0, **TINY)
        ckpt, _ = train(cfg, ds)
        vocab = Vocab.build([e.question for e in ds.train]
                            + [e.answer for e in ds.train])
        reference = build_model(cfg, vocab)
        for name, p in reference.named_parameters().items():
            assert np.array_equal(ckpt.params[name], p.value)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_abort_names_batch(self):
        ds = make_synthetic_dataset(TINY_SPEC, seed=0)
        ds.train[2].bundle.image_features[0] = np.inf
        cfg = TrainConfig(seed=0, epochs=1, **TINY)
        with pytest.raises(NumericError, match="epoch 0.*items:"):
            train(cfg, ds)

    def test_empty_split_rejected(self):
        cfg = TrainConfig(seed=0, epochs=1, **TINY)
        with pytest.raises(ValueError):
            train(cfg, Dataset(train=[], test=[]))


class TestCheckpoint:
    def make_ckpt(self):
        ds = make_synthetic_dataset(TINY_SPEC, seed=3)
        cfg = TrainConfig(seed=3, epochs=1, **TINY)
        return train(cfg, ds)[0]

    def test_roundtrip_bit_exact(self, tmp_path):
        ckpt = self.make_ckpt()
        path = tmp_path / "model.json"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.version == CHECKPOINT_VERSION
        assert loaded.vocab_tokens == ckpt.vocab_tokens
        assert loaded.config == ckpt.config
        assert loaded.rng_state == ckpt.rng_state
        assert set(loaded.params) == set(ckpt.params)
        for name in ckpt.params:
            assert np.array_equal(loaded.params[name], ckpt.params[name])
            assert loaded.params[name].dtype == np.float64

    def test_model_rebuild_reproduces_inference(self, tmp_path):
        ckpt = self.make_ckpt()
        path = tmp_path / "model.json"
        save_checkpoint(ckpt, path)
        model = model_from_checkpoint(load_checkpoint(path))
        for name, p in model.named_parameters().items():
            assert np.array_equal(p.value, ckpt.params[name])

    def test_truncated_file(self, tmp_path):
        ckpt = self.make_ckpt()
        path = tmp_path / "model.json"
        save_checkpoint(ckpt, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(path)

    def test_version_mismatch_names_both_versions(self, tmp_path):
        ckpt = self.make_ckpt()
        path = tmp_path / "model.json"
        save_checkpoint(ckpt, path)
        payload = json.loads(path.read_text())
        payload["format_version"] = 99
        path.write_text(json.dumps(payload))
        with pytest.raises(CheckpointError, match=r"99.*1"):
            load_checkpoint(path)

    def test_missing_parameter_named(self, tmp_path):
        ckpt = self.make_ckpt()
        dropped = dict(ckpt.params)
        victim = sorted(dropped)[0]
        del dropped[victim]
        broken = Checkpoint(params=dropped, vocab_tokens=ckpt.vocab_tokens,
                            config=ckpt.config)
        with pytest.raises(CheckpointError, match=victim.replace(".", r"\.")):
            model_from_checkpoint(broken)

    def test_shape_mismatch_rejected(self):
        ckpt = self.make_ckpt()
        name = sorted(ckpt.params)[0]
        ckpt.params[name] = np.zeros((1, 1))
        with pytest.raises(CheckpointError, match="shape"):
            model_from_checkpoint(ckpt)


class FakePair:
    def __init__(self, pid, question, answer, qtype, modality):
        self.id = pid
        self.question = question
        self.answer = answer
        self.qtype = qtype
        self.modality = modality


class TestFeaturizePairs:
    def pairs(self):
        return [
            FakePair("p0", "how many cars", "2", "Measurement", "point"),
            FakePair("p1", "where is the car", "near the building",
                     "Localization", "image"),
            FakePair("p2", "which one", "the blue one", "Logicality",
                     "point-image"),
        ]

    def test_tags_control_presence(self):
        cfg = TrainConfig(**TINY)
        ex = featurize_pairs(self.pairs(), cfg, respect_tags=True)
        assert not ex[0].bundle.image_present and ex[0].bundle.point_present
        assert ex[1].bundle.image_present and not ex[1].bundle.point_present
        assert ex[2].bundle.image_present and ex[2].bundle.point_present

    def test_eval_mode_synthesizes_both(self):
        cfg = TrainConfig(**TINY)
        for ex in featurize_pairs(self.pairs(), cfg, respect_tags=False):
            assert ex.bundle.image_present and ex.bundle.point_present

    def test_deterministic_and_answer_keyed(self):
        cfg = TrainConfig(**TINY)
        a = featurize_pairs(self.pairs(), cfg, respect_tags=False)
        b = featurize_pairs(self.pairs(), cfg, respect_tags=False)
        for ea, eb in zip(a, b):
            assert np.array_equal(ea.bundle.image_features, eb.bundle.image_features)
        # same answer string, different id -> same centroid, different noise
        twin = [FakePair("p9", "q", "2", "Measurement", "point-image")]
        et = featurize_pairs(twin, cfg, respect_tags=False)[0]
        assert not np.array_equal(et.bundle.point_features, a[0].bundle.point_features)
