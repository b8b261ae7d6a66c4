import numpy as np
import pytest

from tmr import autograd as ag
from tmr.checkpoint import Checkpoint, CheckpointError, write_checkpoint
from tmr.config import ConfigError, TrainConfig, parse_pairs, read_config_file
from tmr.model import ModelParams
from tmr.optim import Adam
from tmr.verify import TOY


class TestAdam:
    def test_warmup_ramp(self):
        opt = Adam({}, lr=1e-3, warmup_steps=100)
        assert opt.lr_at(50) == pytest.approx(5e-4)
        assert opt.lr_at(100) == opt.lr_at(1000) == 1e-3

    def test_first_step_magnitude(self):
        p = ag.parameter(np.array([1.0, -2.0]))
        opt = Adam({"p": p}, lr=0.01, warmup_steps=0)
        g = np.array([3.0, -0.5])
        opt.step({"p": g})
        step = np.array([1.0, -2.0]) - p.data
        assert np.allclose(step, 0.01 * g / (np.abs(g) + 1e-6), rtol=1e-12)

    def test_zero_gradient_leaves_params(self):
        p = ag.parameter(np.array([1.5]))
        opt = Adam({"p": p}, warmup_steps=0)
        for _ in range(3):
            opt.step({"p": np.zeros(1)})
        assert p.data[0] == 1.5

    def test_shape_mismatch(self):
        opt = Adam({"p": ag.parameter(np.zeros(2))})
        with pytest.raises(ValueError):
            opt.step({"p": np.zeros(3)})

    def test_moment_shapes(self):
        params = ModelParams.init(TOY, 0).params
        opt = Adam(params)
        assert all(opt.m[k].shape == t.data.shape for k, t in params.items())


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        arrays = ModelParams.init(TOY, 4).arrays()
        arrays["scalar"] = np.array(3.25)
        path = write_checkpoint(tmp_path / "ck", arrays, step=17, config_hash="abc",
                                meta={"mode": "tmr"})
        ck = Checkpoint(path)
        assert ck.step == 17 and ck.config_hash == "abc" and ck.meta["mode"] == "tmr"
        for k, v in arrays.items():
            got = ck.read(k)
            assert got.shape == v.shape and got.tobytes() == np.asarray(v, "<f8").tobytes()

    def test_lazy_access_recorded(self, tmp_path):
        path = write_checkpoint(tmp_path / "ck", {"a": np.ones(2), "b": np.zeros(3)}, 0, "h")
        ck = Checkpoint(path)
        ck.read("b")
        assert ck.accessed == {"b"}

    def test_prefix_path_accepted(self, tmp_path):
        write_checkpoint(tmp_path / "ck", {"a": np.ones(2)}, 0, "h")
        assert Checkpoint(tmp_path / "ck").names() == ["a"]

    def test_rejects_bad_manifest(self, tmp_path):
        (tmp_path / "x.manifest").write_text("nope\n")
        with pytest.raises(CheckpointError):
            Checkpoint(tmp_path / "x.manifest")

    def test_truncated_blob(self, tmp_path):
        path = write_checkpoint(tmp_path / "ck", {"a": np.ones(4)}, 0, "h")
        blob = tmp_path / "ck.bin"
        blob.write_bytes(blob.read_bytes()[:8])
        with pytest.raises(CheckpointError):
            Checkpoint(path).read("a")


class TestConfig:
    def test_defaults_valid(self):
        cfg = TrainConfig().validate()
        assert cfg.lambda_ == 50.0 and cfg.mask_rate == 0.15 and cfg.buffer_capacity == 1000

    def test_every_problem_reported(self):
        with pytest.raises(ConfigError) as err:
            TrainConfig(batch_size=0, lambda_=-1.0, mode="x").validate()
        assert len(err.value.problems) == 3

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="wibble"):
            parse_pairs([("wibble", "1")])

    def test_lambda_key(self):
        assert parse_pairs([("lambda", "2.5")]).lambda_ == 2.5

    @pytest.mark.parametrize("raw, val", [("true", True), ("0", False), ("off", False)])
    def test_bool_parse(self, raw, val):
        assert parse_pairs([("timing", raw)]).timing is val

    def test_file_round_trip(self, tmp_path):
        cfg = TrainConfig(seed=9, update_strategy="grad_bound", alpha=0.5)
        p = tmp_path / "run.cfg"
        p.write_text("# comment\n" + cfg.dumps())
        assert parse_pairs(read_config_file(p)) == cfg

    def test_digest_changes_with_values(self):
        assert TrainConfig().digest() != TrainConfig(seed=1).digest()

    def test_small_buffer_warns(self):
        assert TrainConfig(buffer_capacity=4, batch_size=8).warnings()
