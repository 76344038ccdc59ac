import numpy as np
import pytest
import torch

from conftest import random_graph
from currigraph.backbone import grad_check, iter_leaves
from currigraph.coder import CoderConfigError
from currigraph.curriculum import closed_form_weight, schedule_step
from currigraph.graph import generate_sbm_pair
from currigraph.trainer import (CheckpointMismatch, TrainConfig, TrainingAborted, attach_data,
                                evaluation_loss,
                                init_state, init_state_pairs, load_checkpoint, params_hash,
                                pretrain, pretrain_state, run_episode, sample_batches,
                                save_checkpoint, stopping_criterion, student_step, teacher_step,
                                weighted_objective, write_metrics)


def tiny_cfg(**kw):
    base = dict(level_sizes=[4, 2], student_widths=[6, 6], attribute_batch=8, edge_batch=8,
                episodes_max=20, patience=None, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def snapshot(state):
    return {n: t.detach().clone() for n, t in iter_leaves(state.params)}


def fixed_batches(state, pair=0):
    from currigraph.trainer import forward_pair
    return sample_batches(state, forward_pair(state, pair).target.detach())


def test_config_invariants():
    with pytest.raises(ValueError, match="episodes_max"):
        TrainConfig(episodes_max=0)
    with pytest.raises(ValueError, match="strictly decreasing"):
        TrainConfig(level_sizes=[10, 10])
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"nope": 1})
    cfg = tiny_cfg()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert tiny_cfg(episodes_max=5).config_hash() == cfg.config_hash()
    assert tiny_cfg(lambda1=0.3).config_hash() != cfg.config_hash()


def test_init_is_deterministic(tiny_pair):
    a, b = init_state(*tiny_pair, tiny_cfg()), init_state(*tiny_pair, tiny_cfg())
    assert params_hash(a.params) == params_hash(b.params)
    assert params_hash(init_state(*tiny_pair, tiny_cfg(seed=1)).params) != params_hash(a.params)


def test_parameter_manifest_one_and_three_sources(tiny_pair):
    src, tgt = tiny_pair
    one = init_state(src, tgt, tiny_cfg()).param_manifest()
    assert len({n.split(".")[1] for n in one if n.startswith("encoders.")}) == 1
    sources = [src, random_graph(13, 0.3, 5, 7, "s2"), random_graph(10, 0.3, 2, 8, "s3")]
    three = init_state(sources, tgt, tiny_cfg()).param_manifest()
    assert {n.split(".")[1] for n in three if n.startswith("encoders.")} == {"0", "1", "2"}
    assert three["encoders.1.pool.0.weight"] == [5, 4]
    shared = [n for n in three if not n.startswith("encoders.")]
    assert shared == [n for n in one if not n.startswith("encoders.")]


def test_incompatible_level_sizes_rejected(tiny_pair):
    with pytest.raises(CoderConfigError, match="tiny_target"):
        init_state(tiny_pair[0], tiny_pair[1], tiny_cfg(level_sizes=[11, 2]))


def test_teacher_is_pure_and_closed_form(tiny_pair):
    state = init_state(*tiny_pair, tiny_cfg())
    batches = fixed_batches(state)
    before = snapshot(state)
    w1, w2 = teacher_step(state, batches), teacher_step(state, batches)
    assert all(np.array_equal(w1[k], w2[k]) for k in w1)
    assert all(torch.equal(before[n], t) for n, t in iter_leaves(state.params))
    from currigraph.trainer import batch_losses, forward_pair
    with torch.no_grad():
        losses = batch_losses(state, forward_pair(state, 0), batches)
    for key, l in losses.items():
        assert np.array_equal(w1[key], closed_form_weight(l.numpy(), 0.2, 1.0).reshape(-1))


def test_teacher_all_weights_one_when_losses_small(tiny_pair):
    state = init_state(*tiny_pair, tiny_cfg(lambda1=1e6))
    weights = teacher_step(state, fixed_batches(state))
    assert all((w == 1).all() for w in weights.values())


def test_zero_weights_leave_heads_unchanged(tiny_pair):
    state = init_state(*tiny_pair, tiny_cfg())
    batches = fixed_batches(state)
    zero = {k: np.zeros_like(w) for k, w in teacher_step(state, batches).items()}
    before = snapshot(state)
    student_step(state, batches, zero)
    after = snapshot(state)
    for name in before:
        if name.startswith("heads.") or name.startswith("student."):
            assert torch.allclose(before[name], after[name], atol=1e-12), name
    assert any(not torch.equal(before[n], after[n]) for n in before if n.startswith("unpool."))


def test_student_steps_decrease_weighted_loss():
    src = random_graph(10, 0.35, 3, 11, "s10")
    tgt = random_graph(10, 0.35, 3, 12, "t10")
    cfg = tiny_cfg(level_sizes=[4, 2], attribute_batch=10, edge_batch=100, learning_rate=1e-3)
    state = init_state(src, tgt, cfg)
    batches = fixed_batches(state)
    weights = teacher_step(state, batches)
    values = []
    for _ in range(50):
        values.append(float(weighted_objective(state, batches, weights).detach()))
        student_step(state, batches, weights)
    diffs = np.diff(values)
    assert diffs.max() <= 1e-3
    windows = [np.mean(values[i:i + 10]) for i in range(0, 50, 10)]
    assert all(b < a for a, b in zip(windows, windows[1:]))


def test_weighted_objective_gradient(tiny_pair):
    cfg = tiny_cfg(student_widths=[3, 3], student_activation="tanh", translator_activation="tanh",
                   attribute_batch=4, edge_batch=4, detach_recon_targets=False)
    state = init_state(*tiny_pair, cfg)
    batches = fixed_batches(state)
    weights = {k: np.random.default_rng(0).uniform(0, 1, w.shape)
               for k, w in teacher_step(state, batches).items()}

    def objective(params):
        saved, state.params = state.params, params
        try:
            return weighted_objective(state, batches, weights)
        finally:
            state.params = saved

    assert grad_check(objective, state.params) <= 1e-4


def test_one_episode_unrolls_once():
    src = random_graph(10, 0.3, 3, 21, "s")
    tgt = random_graph(10, 0.3, 3, 22, "t")
    cfg = tiny_cfg(episodes_max=1, attribute_batch=64, edge_batch=64)
    state = init_state(src, tgt, cfg)
    before = snapshot(state)
    state, history = pretrain(src, tgt, cfg)
    assert len(history) == 1 and state.episode == 1
    assert state.optimizer.state_dict()["state"][0]["step"].item() == 1
    assert state.lambda_period == 1 and state.curriculum.step == 1
    assert state.curriculum.lambda1 == pytest.approx(0.22)
    assert any(not torch.equal(before[n], t) for n, t in iter_leaves(state.params))


def test_lambda_grows_once_per_epoch_equivalent(tiny_pair):
    state = init_state(*tiny_pair, tiny_cfg(attribute_batch=3, edge_batch=2, episodes_max=12))
    pretrain_state(state)
    assert state.lambda_period > 1
    assert state.curriculum.step == 12 // state.lambda_period


def test_stopping_criterion_cases():
    cfg = TrainConfig(episodes_max=300, patience=100)
    assert stopping_criterion([1.0] * 300, cfg)
    assert not stopping_criterion(list(np.linspace(10, 1, 250)), cfg)
    assert stopping_criterion([5.0] * 10 + [1.0] * 101, cfg)
    assert not stopping_criterion([1.0] * 100, cfg)
    assert not stopping_criterion([1.0] * 150, TrainConfig(episodes_max=300, patience=None))


def test_sbm_signal_loss_decreases():
    # level 0 has fixed ground truth; coarse-level targets move with the learned assignments
    src, tgt = generate_sbm_pair([10, 10, 10], [10, 10, 10], 0.5, 0.05, 0.5, seed=0, feature_dim=6)
    for seed in range(5):
        cfg = TrainConfig(level_sizes=[8, 3], student_widths=[16, 16], episodes_max=200,
                          patience=None, attribute_batch=30, edge_batch=32, seed=seed)
        state = init_state(src, tgt, cfg)
        before = evaluation_loss(state)
        pretrain_state(state)
        after = evaluation_loss(state)
        assert np.mean(list(after.values())) < np.mean(list(before.values())), seed
        assert after["attribute"] < before["attribute"], seed


def test_checkpoint_round_trip_and_resume(tiny_pair, tmp_path):
    cfg = tiny_cfg(episodes_max=20)
    straight, _ = pretrain(*tiny_pair, cfg)

    state = init_state(*tiny_pair, cfg)
    pretrain_state(state, episodes=10)
    save_checkpoint(state, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck", cfg)
    assert params_hash(loaded.params) == params_hash(state.params)
    attach_data(loaded, [tiny_pair[0]], [tiny_pair[1]])
    pretrain_state(loaded)
    assert loaded.episode == 20
    assert abs(loaded.history[-1]["weighted_loss"] - straight.history[-1]["weighted_loss"]) <= 1e-9
    assert params_hash(loaded.params) == params_hash(straight.params)


def test_checkpoint_refuses_altered_config(tiny_pair, tmp_path):
    state = init_state(*tiny_pair, tiny_cfg())
    save_checkpoint(state, tmp_path / "ck")
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "ck", tiny_cfg(lambda2=2.0))
    with pytest.raises(CheckpointMismatch):
        attach_data(load_checkpoint(tmp_path / "ck"), [tiny_pair[1]], [tiny_pair[0]])
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_single_source_equals_one_element_list(tiny_pair):
    cfg = tiny_cfg(episodes_max=5)
    a, _ = pretrain(tiny_pair[0], tiny_pair[1], cfg)
    b, _ = pretrain([tiny_pair[0]], tiny_pair[1], cfg)
    assert params_hash(a.params) == params_hash(b.params)


def test_fused_episode_matches_separate_steps(tiny_pair):
    cfg = tiny_cfg(lambda_period=1)
    fused = init_state(*tiny_pair, cfg)
    split = init_state(*tiny_pair, cfg)
    for _ in range(3):
        run_episode(fused)
        batches = fixed_batches(split)
        weights = teacher_step(split, batches)
        student_step(split, batches, weights)
        split.curriculum = schedule_step(split.curriculum)
        split.episode += 1
    assert fused.curriculum == split.curriculum
    assert params_hash(fused.params) == params_hash(split.params)


def test_multi_source_round_robin(tiny_pair):
    sources = [tiny_pair[0], random_graph(14, 0.3, 2, 9, "s2")]
    state = init_state(sources, tiny_pair[1], tiny_cfg(episodes_max=4))
    before = snapshot(state)
    run_episode(state)
    changed = {n.split(".")[1] for n, t in iter_leaves(state.params)
               if n.startswith("encoders.") and not torch.equal(before[n], t)}
    assert changed == {"0"}
    run_episode(state)
    assert state.history[-1]["episode"] == 1


def test_explosion_aborts_and_writes_checkpoint(tiny_pair, tmp_path):
    state = init_state(*tiny_pair, tiny_cfg(max_loss=1e-12))
    with pytest.raises(TrainingAborted, match="exploded"):
        pretrain_state(state, checkpoint_dir=tmp_path / "ck")
    assert (tmp_path / "ck" / "manifest.json").is_file()


def test_non_finite_gradient_names_parameter(tiny_pair):
    state = init_state(*tiny_pair, tiny_cfg())
    batches = fixed_batches(state)
    weights = teacher_step(state, batches)
    with torch.no_grad():
        state.params["heads"]["attribute@0"]["weight"][0, 0] = float("inf")
    with pytest.raises(Exception) as info:
        student_step(state, batches, weights)
    assert "attribute@0" in str(info.value) or "non-finite" in str(info.value)


def test_metrics_csv(tiny_pair, tmp_path):
    _, history = pretrain(*tiny_pair, tiny_cfg(episodes_max=3))
    write_metrics(history, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].startswith("episode,weighted_loss") and len(lines) == 4


def test_arbitrary_pairs(tiny_pair):
    state = init_state_pairs([tiny_pair[0]], [tiny_pair[1], random_graph(9, 0.4, 3, 3, "t2")],
                             [(0, 0), (0, 1)], tiny_cfg(episodes_max=2))
    pretrain_state(state)
    assert state.episode == 2
