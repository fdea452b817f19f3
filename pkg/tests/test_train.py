import json
import math

import numpy as np
import pytest

from ssam import train as T
from ssam.audio_frontend import Spectrogram, Waveform
from ssam.container import save_tensors
from ssam.errors import DataError, GeometryError, ParameterError, ShapeError
from ssam.model import ModelConfig, init_weights
from ssam.numerics import Rng
from ssam.synthetic import write_dataset


def micro_model():
    # 0.32 s crops -> 32 frames -> 8 x 5 patches
    return ModelConfig(d_m=16, depth=1, block=dict(d_m=16, E=2, d_state=4, d_conv=3), input_frames=32)


def micro_train(**kw):
    return T.TrainConfig(**{**dict(epochs=3, batch_size=4, warmup_epochs=1, peak_lr=1e-2,
                                   crop_seconds=0.32), **kw})


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("clips")
    write_dataset(d, 10, seed=1, seconds=0.5)
    return d


class TestSchedule:
    def test_endpoints(self):
        assert T.lr_at(0, 100, 10, 1.0) == 0.0
        assert T.lr_at(10, 100, 10, 1.0) == 1.0
        assert T.lr_at(100, 100, 10, 1.0) == pytest.approx(0.0, abs=1e-15)
        assert T.lr_at(55, 100, 10, 1.0) == pytest.approx(0.5)

    def test_warmup_linear(self):
        assert T.lr_at(5, 100, 10, 2.0) == pytest.approx(1.0)

    def test_monotone_decay(self):
        vals = [T.lr_at(s, 50, 5, 1.0) for s in range(5, 51)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_no_warmup(self):
        assert T.lr_at(0, 10, 0, 3.0) == 3.0

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            T.lr_at(11, 10, 0, 1.0)

    def test_default_peak_scales_with_batch(self):
        assert T.TrainConfig(batch_size=1024).lr == pytest.approx(1e-3)
        assert T.TrainConfig(batch_size=32).lr == pytest.approx(1e-3 / 32)


class TestAdamW:
    def test_first_step_by_hand(self):
        p = {"w": np.array([1.0])}
        T.adamw_step(p, {"w": np.array([1.0])}, T.AdamState.zeros_like(p), lr=0.1, weight_decay=0.0)
        assert p["w"][0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)

    def test_zero_gradient_no_decay_is_fixed(self):
        p = {"w": np.array([0.3, -2.0])}
        before = p["w"].copy()
        moments = T.AdamState.zeros_like(p)
        for _ in range(3):
            T.adamw_step(p, {"w": None}, moments, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(p["w"], before)
        assert moments.t == 3

    def test_decoupled_decay_shrinks(self):
        p = {"w": np.array([2.0]), "b.bias": np.array([2.0])}
        T.adamw_step(p, {}, T.AdamState.zeros_like(p), lr=0.1, weight_decay=0.5)
        assert p["w"][0] == pytest.approx(2.0 * (1 - 0.05))
        assert p["b.bias"][0] == 2.0

    def test_shape_mismatch(self):
        p = {"w": np.zeros(3)}
        with pytest.raises(ShapeError):
            T.adamw_step(p, {"w": np.zeros(2)}, T.AdamState.zeros_like(p), 0.1, 0.0)

    @pytest.mark.parametrize("name,expected", [
        ("blocks.0.norm.scale", False), ("final_norm.scale", False), ("patch_embed.bias", False),
        ("blocks.1.conv_bias", False), ("cls_token", False), ("mask_token", False),
        ("patch_embed.weight", True), ("blocks.0.in_proj", True), ("blocks.0.A_log", True),
    ])
    def test_decay_filter(self, name, expected):
        assert T.decays(name) is expected

    def test_filter_covers_model_names(self):
        names = init_weights(micro_model(), as_arrays=True)
        no_decay = sorted(k for k in names if not T.decays(k))
        assert "cls_token" in no_decay and "final_norm.scale" in no_decay
        assert not any(k.endswith("weight") for k in no_decay)


class TestData:
    def test_subset_quarter(self):
        files = [f"f{i:03d}" for i in range(100)]
        sub = T.select_subset(files, 0.25, seed=3)
        assert len(sub) == 25 == len(set(sub))
        assert sub == sorted(sub)
        assert sub == T.select_subset(files, 0.25, seed=3)
        assert sub != T.select_subset(files, 0.25, seed=4)

    def test_subset_full_and_minimum(self):
        files = list("abc")
        assert T.select_subset(files, 1.0, 0) == files
        assert len(T.select_subset(files, 0.01, 0)) == 1

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DataError):
            T.list_dataset(tmp_path)

    def test_skips_unreadable(self, tmp_path):
        write_dataset(tmp_path, 2, seconds=0.5)
        (tmp_path / "broken.wav").write_bytes(b"not a wav")
        items, skipped = T.load_dataset(T.list_dataset(tmp_path))
        assert len(items) == 2 and [p.name for p, _ in skipped] == ["broken.wav"]

    def test_all_unreadable(self, tmp_path):
        (tmp_path / "broken.wav").write_bytes(b"x")
        with pytest.raises(DataError):
            T.load_dataset(T.list_dataset(tmp_path))

    def test_crop_short_clip_pads(self):
        out = T.random_crop(Waveform(0.1 * np.ones(1000)), Rng(0), 3200, 20)
        assert out.shape == (20, 80) and out.dtype == np.float32

    def test_crop_long_clip_deterministic(self, rng):
        w = Waveform(rng.uniform(-0.5, 0.5, 16000))
        a = T.random_crop(w, Rng(1, 5), 3200, 20)
        assert a.tobytes() == T.random_crop(w, Rng(1, 5), 3200, 20).tobytes()

    def test_crop_feature_file(self, rng):
        out = T.random_crop(Spectrogram(rng.standard_normal((50, 80))), Rng(0), 3200, 20, np.float64)
        assert out.shape == (20, 80)
        assert abs(out.mean()) < 1e-9 and out.std() == pytest.approx(1.0, rel=1e-6)

    def test_feature_files_train(self, tmp_path, rng):
        for i in range(3):
            save_tensors(tmp_path / f"c{i}.ssam", {"spectrogram": rng.standard_normal((40, 80))},
                         {"kind": "features"})
        res = T.pretrain(micro_train(epochs=1, warmup_epochs=0), micro_model(), tmp_path, tmp_path / "o")
        assert res.step == 1 and res.n_files == 3


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = micro_model()
        params = init_weights(cfg, as_arrays=True)
        adam = T.AdamState.zeros_like(params)
        T.adamw_step(params, {k: np.ones_like(v) for k, v in params.items()}, adam, 1e-3, 0.05)
        ck = T.Checkpoint(cfg, params, adam, 7, {"seed": 0, "next_step": 7}, micro_train())
        T.save_checkpoint(tmp_path / "c.ssam", ck)
        back = T.load_checkpoint(tmp_path / "c.ssam")
        assert back.model_config == cfg and back.step == 7 and back.adam.t == 1
        assert back.train_config == ck.train_config
        for k in params:
            assert back.params[k].tobytes() == params[k].tobytes()
            assert back.adam.m[k].tobytes() == adam.m[k].tobytes()
            assert back.adam.v[k].tobytes() == adam.v[k].tobytes()

    def test_wrong_kind(self, tmp_path):
        save_tensors(tmp_path / "x.ssam", {"a": np.zeros(1)}, {"kind": "features"})
        with pytest.raises(DataError):
            T.load_checkpoint(tmp_path / "x.ssam")


class TestPretrain:
    def test_writes_outputs(self, dataset, tmp_path):
        res = T.pretrain(micro_train(), micro_model(), dataset, tmp_path)
        assert res.step == 9  # 3 epochs x ceil(10 / 4)
        recs = T.read_metrics(res.metrics_path)
        assert [r["step"] for r in recs] == list(range(9))
        assert set(recs[0]) == {"step", "lr", "loss", "wall_ms"}
        assert recs[0]["lr"] == 0.0
        assert all(math.isfinite(r["loss"]) for r in recs)
        assert T.load_checkpoint(res.checkpoint_path).step == 9

    def test_repeatable(self, dataset, tmp_path):
        a = T.pretrain(micro_train(), micro_model(), dataset, tmp_path / "a")
        b = T.pretrain(micro_train(), micro_model(), dataset, tmp_path / "b")
        assert T.deterministic_view(T.read_metrics(a.metrics_path)) == \
            T.deterministic_view(T.read_metrics(b.metrics_path))

    def test_seed_changes_run(self, dataset, tmp_path):
        a = T.pretrain(micro_train(), micro_model(), dataset, tmp_path / "a")
        b = T.pretrain(micro_train(seed=1), micro_model(), dataset, tmp_path / "b")
        assert a.losses != b.losses

    def test_resume_matches_uninterrupted(self, dataset, tmp_path):
        cfg, tc = micro_model(), micro_train()
        full = T.pretrain(tc, cfg, dataset, tmp_path / "full")
        part = T.pretrain(tc, cfg, dataset, tmp_path / "part", stop_after=4)
        assert part.step == 4
        resumed = T.pretrain(tc, cfg, dataset, tmp_path / "part", resume_from=part.checkpoint_path)
        assert resumed.losses == full.losses
        assert T.deterministic_view(T.read_metrics(resumed.metrics_path)) == \
            T.deterministic_view(T.read_metrics(full.metrics_path))
        a = T.load_checkpoint(full.checkpoint_path).params
        b = T.load_checkpoint(resumed.checkpoint_path).params
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_resume_with_other_model_rejected(self, dataset, tmp_path):
        part = T.pretrain(micro_train(), micro_model(), dataset, tmp_path, stop_after=1)
        other = ModelConfig(d_m=16, depth=2, block=dict(d_m=16, E=2, d_state=4, d_conv=3), input_frames=32)
        with pytest.raises(ParameterError):
            T.pretrain(micro_train(), other, dataset, tmp_path, resume_from=part.checkpoint_path)

    def test_crop_geometry_mismatch(self, dataset, tmp_path):
        with pytest.raises(GeometryError):
            T.pretrain(micro_train(crop_seconds=2.0), micro_model(), dataset, tmp_path)

    def test_data_fraction(self, dataset, tmp_path):
        res = T.pretrain(micro_train(epochs=1, warmup_epochs=0, data_fraction=0.5), micro_model(),
                         dataset, tmp_path)
        assert res.n_files == 5 and res.step == 2

    def test_skipped_files_reported(self, tmp_path):
        write_dataset(tmp_path / "d", 3, seconds=0.5)
        (tmp_path / "d" / "zz.wav").write_bytes(b"garbage")
        res = T.pretrain(micro_train(epochs=1, warmup_epochs=0), micro_model(), tmp_path / "d", tmp_path / "o")
        assert res.n_files == 3 and len(res.skipped) == 1

    def test_checkpoint_every(self, dataset, tmp_path):
        res = T.pretrain(micro_train(checkpoint_every=2), micro_model(), dataset, tmp_path, stop_after=3)
        assert T.load_checkpoint(res.checkpoint_path).step == 3


class TestTrainConfig:
    def test_round_trip(self):
        tc = micro_train(betas=[0.8, 0.9])
        assert T.TrainConfig.from_dict(json.loads(json.dumps(tc.to_dict()))) == tc

    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(warmup_epochs=5, epochs=2),
                                    dict(data_fraction=0.0), dict(crop_seconds=0)])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            T.TrainConfig(**kw)

    def test_unknown_field(self):
        with pytest.raises(ParameterError):
            T.TrainConfig.from_dict({"lr": 1.0})
