import json

import numpy as np
import pytest

from autoview.config import with_overrides
from autoview.train import (ABLATIONS, StageSchedule, Trainer, TrainingAborted, randaug_grid_baseline,
                            round_to_patch, stage_size, train)
from support import tiny_config, tiny_vit_config


def test_round_to_patch_ties_up():
    assert round_to_patch(18, 4) == 20
    assert round_to_patch(17.9, 4) == 16
    assert round_to_patch(21.33, 4) == 20


def test_stage_sizes():
    assert StageSchedule(4, 128, 224, 16).sizes() == [128, 160, 192, 224]
    assert StageSchedule(4, 16, 32, 4).sizes() == [16, 20, 28, 32]
    assert StageSchedule(1, 16, 32, 4).sizes() == [32]
    sched = StageSchedule(4, 16, 32, 4)
    seq = [stage_size(s, 100, sched) for s in range(100)]
    assert seq[0] == 16 and seq[24] == 16 and seq[25] == 20 and seq[75] == 32 and seq[99] == 32
    assert all(a <= b for a, b in zip(seq, seq[1:]))


def test_smoke_one_step_batch_two(tmp_path):
    cfg = tiny_config(steps=1, batch_size=2)
    train(cfg, tmp_path)
    rows = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 1
    for key in ("step", "loss", "h_main", "h_reg", "lr", "lr_pi", "lr_p", "weight_decay", "image_size"):
        assert key in rows[0]
    assert (tmp_path / "checkpoint.bin").exists()
    assert (tmp_path / "effective_config.yaml").exists()
    header = (tmp_path / "policy_trajectory.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "step" and len(header) == 29


def test_frozen_policy_lr_keeps_probabilities(tmp_path):
    cfg = tiny_config(steps=5, policy_pi_optim={"lr": 0.0}, policy_p_optim={"lr": 0.0, "decay_milestones": []})
    trainer = train(cfg, tmp_path)
    np.testing.assert_array_equal(trainer.policy_probs(), np.full(28, 1 / 28))
    lines = (tmp_path / "policy_trajectory.csv").read_text().splitlines()[1:]
    assert len(set(line.split(",", 1)[1] for line in lines)) == 1


def test_policy_moves_and_stays_normalized():
    cfg = tiny_config(steps=5, policy_pi_optim={"lr": 0.05})
    trainer = Trainer(cfg)
    for _ in range(5):
        trainer.step()
        assert abs(trainer.policy_probs().sum() - 1.0) < 1e-6
    assert not np.allclose(trainer.policy_probs(), 1 / 28)


def test_determinism(tmp_path):
    cfg = tiny_config(steps=3)
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    for name in ("metrics.jsonl", "policy_trajectory.csv", "checkpoint.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_is_bitwise_identical(tmp_path):
    cfg = tiny_config(steps=6, checkpoint_interval=3)
    full = train(cfg, tmp_path / "full")
    resumed = train(cfg, tmp_path / "resumed", resume=tmp_path / "full" / "checkpoint_step3.bin")
    a, b = full.state_arrays(), resumed.state_arrays()
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k]), k
    tail = (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()[3:]
    assert (tmp_path / "resumed" / "metrics.jsonl").read_text().splitlines() == tail


def test_teacher_never_receives_gradients():
    trainer = Trainer(tiny_config())
    for _ in range(2):
        trainer.step()
        assert all(p.grad is None for p in trainer.teacher.parameters())


def test_non_finite_loss_aborts_with_step():
    trainer = Trainer(tiny_config())
    trainer.step()
    trainer.student.parameters()[0].data[...] = np.nan
    with pytest.raises(TrainingAborted) as exc:
        trainer.step()
    assert exc.value.step == 1


def test_progressive_sizes_in_metrics(tmp_path):
    cfg = tiny_vit_config(steps=4, progressive={"enabled": True, "num_stages": 2, "min_size": 8, "max_size": 16})
    train(cfg, tmp_path)
    sizes = [json.loads(line)["image_size"] for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert sizes == [8, 8, 16, 16]


def test_batch_order_is_a_seeded_permutation_per_epoch():
    trainer = Trainer(tiny_config(batch_size=8))
    n = len(trainer.train_set)
    per_epoch = n // 8
    seen = np.concatenate([trainer.batch_indices(s) for s in range(per_epoch)])
    assert sorted(seen.tolist()) == list(range(n))
    other = Trainer(tiny_config(batch_size=8))
    assert np.array_equal(trainer.batch_indices(5), other.batch_indices(5))


@pytest.mark.parametrize("mode", ["randaug", "none"])
def test_baseline_modes_leave_policy_untouched(mode):
    trainer = Trainer(tiny_config(augment={"mode": mode}))
    trainer.step()
    np.testing.assert_array_equal(trainer.policy_probs(), np.full(28, 1 / 28))


def test_randaug_grid_cardinality(tmp_path):
    cfg = tiny_config(steps=1)
    rows = randaug_grid_baseline(cfg, (1, 2), ("low", "mid", "high"), tmp_path, write=False)
    assert len(rows) == 6
    assert {(r["N"], r["M"]) for r in rows} == {(n, m) for n in (1, 2) for m in ("low", "mid", "high")}


@pytest.mark.parametrize("name", sorted(ABLATIONS))
def test_ablation_switches_step(name):
    cfg = with_overrides(tiny_config(steps=2), ABLATIONS[name])
    trainer = Trainer(cfg)
    trainer.step()
    trainer.step()
    if name == "fixed-exec-prob":
        np.testing.assert_allclose(trainer.policies[0].exec_probs(), 0.5)
    if name == "uniform-weights":
        np.testing.assert_allclose(trainer.policy_probs(), 1 / 28)
    if name == "unshared-g":
        assert len(trainer.policies) == 2
    if name == "k3":
        assert trainer.policies[0].p_logit.shape == (2,)
