import csv
import io
import math

import numpy as np
import pytest

from tmr import autograd as ag
from tmr.checkpoint import Checkpoint
from tmr.config import TrainConfig
from tmr.gradcheck import check_gradients
from tmr.probe import (COMPARE_COLUMNS, ProbeTask, classify_loss, checkpoint_vocab,
                       compare_checkpoints, expand_checkpoints, fine_tune, load_body,
                       load_probe_task, probe_loss, read_probe_tsv, write_comparison,
                       write_probe_tsv)
from tmr.model import collate
from tmr.text import CLS
from tmr.trainer import run_pretraining


@pytest.fixture(scope="module")
def step0(tmp_path_factory):
    out = tmp_path_factory.mktemp("run0")
    report = run_pretraining(TrainConfig(steps=0, out_dir=str(out)))
    return Checkpoint(report.checkpoints[-1])


@pytest.fixture(scope="module")
def sentinel_task(step0, tmp_path_factory):
    """Class 1 iff the word 'dog' occurs; linearly separable from token identity."""
    vocab = checkpoint_vocab(step0)
    rng = np.random.default_rng(0)
    words = [w for w in vocab.itos[4:] if w != "dog"]
    rows = []
    for i in range(240):
        ws = list(rng.choice(words, size=6))
        if i % 2:
            ws[rng.integers(6)] = "dog"
        rows.append((i % 2, " ".join(ws)))
    rows = [rows[i] for i in rng.permutation(len(rows))]
    path = tmp_path_factory.mktemp("task") / "sentinel.tsv"
    write_probe_tsv(rows, path)
    return path, load_probe_task(path, vocab, 32)


class TestClassifyLoss:
    @pytest.mark.parametrize("C", [2, 3, 5])
    def test_zero_head_is_ln_c(self, C):
        assert classify_loss(np.ones(4), np.zeros((C, 4)), 1) == pytest.approx(math.log(C), abs=1e-12)

    def test_saturation(self):
        W = np.array([[40.0, 0.0], [-40.0, 0.0]])
        assert classify_loss(np.array([1.0, 0.0]), W, 0) < 1e-6

    def test_hand_case(self):
        W = np.eye(3)
        assert classify_loss(np.array([1.0, 0.0, 0.0]), W, 0) == pytest.approx(
            -math.log(math.e / (math.e + 2)), abs=1e-12)
        assert classify_loss(np.array([1.0, 0.0, 0.0]), W, 0) == pytest.approx(0.5514, abs=1e-4)

    def test_class_out_of_range(self):
        with pytest.raises(ValueError):
            classify_loss(np.ones(2), np.zeros((2, 2)), 2)


class TestTask:
    def test_bundled_task_loads(self, step0):
        from tmr.text import bundled_path
        task = load_probe_task(bundled_path("probe.tsv"), checkpoint_vocab(step0), 32)
        assert task.num_classes == 2 and len(task.train) == 300 and len(task.dev) == 100
        assert all(x[0] == CLS for x, _ in task.train)

    def test_missing_class_rejected(self):
        x = np.array([CLS, 5])
        with pytest.raises(ValueError):
            ProbeTask([(x, 0)], [(x, 1)], 2)

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError):
            ProbeTask([(np.array([CLS, 5]), 0)], [], 1)

    def test_bad_line(self, tmp_path):
        p = tmp_path / "t.tsv"
        p.write_text("1 no tab here\n")
        with pytest.raises(ValueError):
            read_probe_tsv(p)


class TestFineTune:
    def test_separable_task_from_step0(self, step0, sentinel_task):
        _, task = sentinel_task
        r = fine_tune(step0, task, epochs=20, lr=3e-3, seed=0)
        assert r.dev_accuracy >= 0.95
        assert np.mean(r.losses[-10:]) < np.mean(r.losses[:10])

    def test_shuffled_labels_near_chance(self, step0, sentinel_task):
        _, task = sentinel_task
        shuffled = task.shuffled_labels(seed=1)
        acc = fine_tune(step0, shuffled, epochs=5, lr=1e-3, seed=0).dev_accuracy
        n = len(shuffled.dev)
        assert abs(acc - 0.5) <= 3 * math.sqrt(0.25 / n)

    def test_deterministic(self, step0, sentinel_task):
        _, task = sentinel_task
        a = fine_tune(step0, task, epochs=1, seed=7)
        b = fine_tune(step0, task, epochs=1, seed=7)
        assert a.dev_accuracy == b.dev_accuracy and a.losses == b.losses

    def test_never_reads_generator(self, step0, sentinel_task):
        _, task = sentinel_task
        ck = Checkpoint(step0.manifest_path)
        r = fine_tune(ck, task, epochs=1, seed=0)
        assert r.accessed
        assert not any(n.startswith("gen.") for n in r.accessed)
        assert "disc.head_w" not in r.accessed

    def test_probe_loss_gradcheck(self, step0):
        body = load_body(Checkpoint(step0.manifest_path))
        rng = np.random.default_rng(0)
        W = ag.parameter(rng.normal(0, 0.5, (3, body.cfg.disc_hidden)))
        ids, valid = collate([np.array([CLS, 5, 9, 11]), np.array([CLS, 7])])
        labels = np.array([2, 0])
        small = {"W": W, "disc.lnf.g": body["disc.lnf.g"], "disc.l1.w2": body["disc.l1.w2"]}
        rep = check_gradients(lambda: probe_loss(body, W, ids, valid, labels), small)
        assert max(e for e, _ in rep.values()) < 1e-4


class TestCompare:
    def test_identical_rows_and_columns(self, step0, sentinel_task):
        path, _ = sentinel_task
        rows = compare_checkpoints([step0.manifest_path] * 2, path, seeds=(0, 1, 2), epochs=1)
        assert rows[0] == rows[1]
        buf = io.StringIO()
        write_comparison(rows, buf)
        parsed = list(csv.reader(io.StringIO(buf.getvalue())))
        assert tuple(parsed[0]) == COMPARE_COLUMNS and len(parsed) == 3
        assert parsed[1][:2] == ["tmr", "0"] and parsed[1][4] == "3"

    def test_single_checkpoint(self, step0, sentinel_task):
        path, _ = sentinel_task
        rows = compare_checkpoints([step0.manifest_path], path, seeds=(0,), epochs=1)
        assert len(rows) == 1 and 0.0 <= rows[0]["mean_acc"] <= 1.0

    def test_parallel_matches_serial(self, step0, sentinel_task):
        path, _ = sentinel_task
        kw = dict(seeds=(0, 1), epochs=1)
        assert compare_checkpoints([step0.manifest_path], path, jobs=2, **kw) == \
            compare_checkpoints([step0.manifest_path], path, jobs=1, **kw)

    def test_glob_expansion(self, step0):
        pattern = str(step0.manifest_path.parent / "ckpt-*")
        assert expand_checkpoints([pattern]) == [str(step0.manifest_path)]
        with pytest.raises(FileNotFoundError):
            expand_checkpoints([str(step0.manifest_path.parent / "nothing-*")])
