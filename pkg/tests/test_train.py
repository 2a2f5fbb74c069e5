import hashlib

import numpy as np
import pytest

from unicd import checkpoint as ckpt
from unicd import train as train_mod
from unicd.config import ConfigError, ModelConfig
from unicd.data import generate_dataset
from unicd.model import PARTS, ChangeModel
from unicd.train import (TrainConfig, UsageError, batch_indices, load_state, model_from_checkpoint, set_stage,
                         trainable_names, train)


def tiny_model(task="bcd", seed=0):
    return ChangeModel(ModelConfig.tiny(task=task, seed=seed))


def block_hash(model, part):
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if model.part_of(name) == part:
            h.update(name.encode())
            h.update(p.data.tobytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def samples():
    return generate_dataset("bcd", 4, 32, 32, seed=0)


class TestConfig:
    def test_stage_split(self):
        cfg = TrainConfig(max_iters=10, stage_split=0.8)
        assert cfg.stage_iters == 8
        assert TrainConfig(max_iters=10, stage_split=0.8, stage=2).stage_iters == 2
        assert cfg.period == 2

    def test_stage_two_lr(self):
        assert TrainConfig(stage=2).stage_lr == 1e-5
        assert TrainConfig(stage=2, stage2_lr=3e-5).stage_lr == 3e-5
        assert TrainConfig().stage_lr == TrainConfig().lr

    @pytest.mark.parametrize("bad", [dict(lr=0), dict(stage=3), dict(crop=40), dict(task="seg"),
                                     dict(stage_split=0.0), dict(batch_size=0)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_round_trip(self):
        cfg = TrainConfig(task="scd", lr=3e-4, seed=5)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"bogus": 1})

    def test_full_scale_encodable(self):
        cfg = TrainConfig.full_scale("bcd")
        assert (cfg.batch_size, cfg.crop, cfg.max_iters, cfg.lr, cfg.weight_decay) == (22, 256, 320_000, 1e-4, 5e-4)


class TestPartition:
    def test_exhaustive_and_disjoint(self, task):
        model = tiny_model(task)
        groups = model.partition()
        assert set(groups) == set(PARTS)
        names = [n for n, _ in model.named_parameters()]
        assert sum(len(v) for v in groups.values()) == len(names) == len(set(names))
        assert all(groups[p] for p in PARTS)

    def test_stage_sets(self):
        model = tiny_model()
        s1, s2 = set(trainable_names(model, 1)), set(trainable_names(model, 2))
        assert not any(model.part_of(n) == "fcpg" for n in s1)
        assert {model.part_of(n) for n in s2} == {"fcpg", "head"}
        set_stage(model, 2)
        assert all(p.requires_grad == (n in s2) for n, p in model.named_parameters())


class TestBatches:
    def test_epoch_is_permutation(self):
        idx = np.concatenate([batch_indices(10, 5, 3, s) for s in range(2)])
        assert sorted(idx.tolist()) == list(range(10))

    def test_seeded(self):
        assert (batch_indices(10, 4, 1, 7) == batch_indices(10, 4, 1, 7)).all()


class TestStages:
    def test_stage_one_leaves_fcpg(self, samples):
        model = tiny_model()
        before = block_hash(model, "fcpg"), block_hash(model, "backbone")
        train(model, samples, TrainConfig(max_iters=5, stage_split=1.0, batch_size=2))
        assert block_hash(model, "fcpg") == before[0]
        assert block_hash(model, "backbone") != before[1]

    def test_stage_two_freezes_backbone(self, samples, monkeypatch):
        seen = []

        class Recording(train_mod.AdamW):
            def step(self, lr=None):
                seen.append(lr)
                super().step(lr)
        monkeypatch.setattr(train_mod, "AdamW", Recording)
        model = tiny_model()
        _, ck1 = train(model, samples, TrainConfig(max_iters=4, stage_split=1.0, batch_size=2))
        before = {p: block_hash(model, p) for p in PARTS}
        seen.clear()
        cfg = TrainConfig(max_iters=200, stage_split=0.5, stage=2, batch_size=2)
        res, ck2 = train(model, samples, cfg, init=ck1)
        assert res.steps == 100
        assert block_hash(model, "backbone") == before["backbone"]
        assert block_hash(model, "decoder") == before["decoder"]
        assert block_hash(model, "fcpg") != before["fcpg"]
        assert seen[0] == 1e-5 and max(seen) == 1e-5
        assert ck2.stage == 2

    def test_stage_two_needs_checkpoint(self, samples):
        with pytest.raises(UsageError):
            train(tiny_model(), samples, TrainConfig(stage=2, max_iters=2))

    def test_task_mismatch(self, samples):
        with pytest.raises(UsageError):
            train(tiny_model("scd"), samples, TrainConfig(task="bcd", max_iters=1))


class TestCheckpoints:
    def test_round_trip_forward_bitwise(self, samples, tmp_path):
        model = tiny_model("scd")
        data = generate_dataset("scd", 2, seed=1)
        _, ck = train(model, data, TrainConfig(task="scd", max_iters=3, stage_split=1.0, batch_size=2))
        path = ckpt.save(tmp_path / "m.uckp", ck)
        assert ckpt.config_path(path).exists()
        again = model_from_checkpoint(ckpt.load(path))
        pre, post = data[0].pre[None].astype(np.float32), data[0].post[None].astype(np.float32)
        a, b = model.eval()(pre, post), again(pre, post)
        for (name, x), (_, y) in zip(a.items(), b.items()):
            assert x.data.tobytes() == y.data.tobytes(), name

    def test_load_state_checks_task(self):
        ck = train_mod.make_checkpoint(tiny_model("bcd"))
        with pytest.raises(UsageError):
            load_state(tiny_model("bda"), ck)

    def test_determinism(self, samples):
        cfg = TrainConfig(max_iters=50, stage_split=1.0, batch_size=2, seed=3)
        blobs = [ckpt.dumps(train(tiny_model(seed=1), samples, cfg)[1]) for _ in range(2)]
        assert blobs[0] == blobs[1]

    def test_trace_every_step(self, samples):
        res, _ = train(tiny_model(), samples, TrainConfig(max_iters=4, stage_split=1.0, batch_size=2))
        rows = res.trace_text().splitlines()
        assert rows[0].split("\t")[:2] == ["step", "task"]
        assert [int(r.split("\t")[0]) for r in rows[1:]] == [0, 1, 2, 3]
