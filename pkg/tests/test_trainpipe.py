import json

import numpy as np
import pytest

from breen import numcore as nc
from breen import synthdata as sd
from breen import trainpipe as tp
from breen.model import BreenConfig
from breen.sequence import Stage

TINY = BreenConfig(d_model=16, n_layers=2, n_heads=2, ffn_hidden=24, teacher_dim=8)


@pytest.fixture(scope="module")
def captions():
    return tp.prepare(sd.gen_samples(11, 6, sd.CAPTION, teacher_dim=8), TINY.strides)


@pytest.fixture(scope="module")
def qa():
    return tp.prepare(sd.gen_samples(12, 6, sd.QA, teacher_dim=8), TINY.strides)


def spec(stage=Stage.PREALIGN, steps=4, **kw):
    kw.setdefault("lr", 1e-3)
    return tp.StageSpec(stage, kw.pop("alpha", 1.0), 1.0, batch_size=kw.pop("batch_size", 2), steps=steps, **kw)


def test_stage_spec_validation_and_schedule():
    with pytest.raises(ValueError):
        spec(alpha=-1)
    with pytest.raises(ValueError):
        spec(batch_size=0)
    with pytest.raises(ValueError):
        spec(schedule="cosine")
    s = spec(stage=Stage.SFT, steps=10, schedule="linear")
    assert s.lr_at(0) == 1e-3 and s.lr_at(5) == pytest.approx(5e-4)
    assert spec().lr_at(3) == 1e-3


def test_adamw_minimises_quadratic():
    target = np.array([[1.5, -2.0], [0.5, 3.0]], dtype=np.float64)
    p = nc.tensor(np.zeros((2, 2)), dtype=np.float64)
    state = tp.TrainState(stage=Stage.SFT, m={"w": np.zeros((2, 2))}, v={"w": np.zeros((2, 2))}, t={"w": 0})
    for _ in range(2000):
        tp.adamw_update({"w": p}, {"w": 2 * (p.data - target)}, state, 0.05)
    # weight decay pulls matrices slightly toward zero
    np.testing.assert_allclose(p.data, target, atol=0.05)
    assert state.t["w"] == 2000


def test_first_adam_step_moves_by_lr():
    p = nc.tensor(np.zeros(3), dtype=np.float64)
    state = tp.TrainState(stage=Stage.SFT, m={"b": np.zeros(3)}, v={"b": np.zeros(3)}, t={"b": 0})
    tp.adamw_update({"b": p}, {"b": np.array([4.0, -0.1, 0.0])}, state, 0.01)
    np.testing.assert_allclose(p.data, [-0.01, 0.01, 0.0], atol=1e-8)


def test_clip_gradients():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    assert tp.clip_gradients(grads, 1.0) == pytest.approx(5.0)
    total = np.sqrt(sum((g**2).sum() for g in grads.values()))
    assert total == pytest.approx(1.0, abs=1e-6)
    small = {"a": np.array([0.1])}
    tp.clip_gradients(small, 1.0)
    assert small["a"][0] == 0.1


def test_freeze_policy_patterns():
    assert tp.freeze_policy(Stage.PREALIGN) == {"queries", "patch_mlp", "layers.*.image_ffn", "query_proj"}
    assert "query_proj" not in tp.freeze_policy(Stage.PREALIGN, train_query_proj=False)
    assert tp.freeze_policy(Stage.SFT) == {"*"}
    m = tp.new_model(TINY)
    names = tp.trainable_names(m, spec())
    assert any(n.startswith("queries.") for n in names) and "lm_head.w" not in names
    assert not any("text_ffn" in n or ".attn." in n for n in names)
    assert set(tp.trainable_names(m, spec(Stage.PRETRAIN))) == set(m.params)


def test_next_batch_walks_epoch_permutations():
    state = tp.TrainState.fresh(tp.new_model(TINY), spec(), seed=0)
    seen = np.concatenate([tp.next_batch(state, 5, 2) for _ in range(5)])
    assert sorted(seen[:5].tolist()) == list(range(5))
    assert sorted(seen[5:10].tolist()) == list(range(5))


def test_same_seed_same_trajectory(captions):
    runs = []
    for _ in range(2):
        m = tp.new_model(TINY)
        _, rec = tp.run_stage(m, spec(steps=5), captions, seed=3)
        runs.append([r["total"] for r in rec])
    assert runs[0] == runs[1]
    _, other = tp.run_stage(tp.new_model(TINY), spec(steps=5), captions, seed=4)
    assert [r["total"] for r in other] != runs[0]


def test_resume_matches_uninterrupted_run(tmp_path, captions):
    full = tp.new_model(TINY)
    _, rec_full = tp.run_stage(full, spec(Stage.PRETRAIN, steps=6, schedule="linear"), captions, seed=1)

    part = tp.new_model(TINY)
    ckpt = tmp_path / "pre.brck"
    tp.run_stage(part, spec(Stage.PRETRAIN, steps=6, schedule="linear"), captions, seed=1, checkpoint_path=ckpt, stop_at=3)
    model, state = tp.load_checkpoint(ckpt, expect_config=TINY)
    assert state.step == 3
    _, rec_rest = tp.run_stage(model, spec(Stage.PRETRAIN, steps=6, schedule="linear"), captions, state=state, seed=1)
    assert [r["total"] for r in rec_full[3:]] == [r["total"] for r in rec_rest]
    for k in full.params:
        np.testing.assert_array_equal(full[k].data, model[k].data)


def test_periodic_checkpoints_and_metrics(tmp_path, captions):
    metrics = tmp_path / "m.jsonl"
    calls = []
    tp.run_stage(
        tp.new_model(TINY), spec(steps=4, checkpoint_every=2), captions, seed=0,
        metrics_path=metrics, checkpoint_path=tmp_path / "c.brck", callback=lambda st, br: calls.append(st.step),
    )
    lines = [json.loads(x) for x in metrics.read_text().splitlines()]
    assert [x["step"] for x in lines] == [1, 2, 3, 4] == calls
    assert set(lines[0]) == {"step", "stage", "align_fine", "align_coarse", "align_total", "lm", "total"}
    header, _ = tp.read_checkpoint_header(tmp_path / "c.brck")
    assert header["state"]["step"] == 4


def test_zero_steps_still_writes_checkpoint(tmp_path, captions):
    m = tp.new_model(TINY)
    state, rec = tp.run_stage(m, spec(steps=0), captions, checkpoint_path=tmp_path / "z.brck")
    assert rec == [] and state.step == 0
    back, _ = tp.load_checkpoint(tmp_path / "z.brck")
    for k in m.params:
        np.testing.assert_array_equal(back[k].data, m[k].data)


def test_checkpoint_corruption_detected(tmp_path, captions):
    path = tmp_path / "c.brck"
    tp.run_stage(tp.new_model(TINY), spec(steps=1), captions, checkpoint_path=path)
    buf = bytearray(path.read_bytes())
    buf[-5] ^= 0xFF
    path.write_bytes(bytes(buf))
    with pytest.raises(tp.CheckpointError, match="checksum"):
        tp.load_checkpoint(path)
    path.write_bytes(b"JUNK" + bytes(buf[4:]))
    with pytest.raises(tp.CheckpointError, match="magic"):
        tp.load_checkpoint(path)


def test_checkpoint_config_mismatch_lists_both_hashes(tmp_path, captions):
    path = tmp_path / "c.brck"
    tp.run_stage(tp.new_model(TINY), spec(steps=0), captions, checkpoint_path=path)
    other = BreenConfig(d_model=16, n_layers=3, n_heads=2, ffn_hidden=24, teacher_dim=8)
    with pytest.raises(tp.ConfigMismatchError) as e:
        tp.load_checkpoint(path, expect_config=other)
    assert TINY.hash() in str(e.value) and other.hash() in str(e.value)


def test_state_stage_mismatch(captions):
    state = tp.TrainState.fresh(tp.new_model(TINY), spec(), seed=0)
    with pytest.raises(tp.ConfigMismatchError):
        tp.run_stage(tp.new_model(TINY), spec(Stage.PRETRAIN), captions, state=state)


def test_moments_carry_across_stages(captions):
    m = tp.new_model(TINY)
    state, _ = tp.run_stage(m, spec(steps=2), captions)
    nxt = state.for_stage(m, spec(Stage.PRETRAIN), seed=0)
    assert nxt.step == 0 and nxt.stage == Stage.PRETRAIN
    np.testing.assert_array_equal(nxt.m["queries.s3"], state.m["queries.s3"])
    assert nxt.t["queries.s3"] == 2
    assert not nxt.m["lm_head.w"].any() and nxt.t["lm_head.w"] == 0


def test_prealign_leaves_backbone_untouched(captions):
    m = tp.new_model(TINY)
    before = {k: v.data.copy() for k, v in m.params.items()}
    tp.run_stage(m, spec(steps=2), captions)
    trained = set(tp.trainable_names(m, spec()))
    for k in m.params:
        if k in trained:
            assert not np.array_equal(before[k], m[k].data), k
        else:
            np.testing.assert_array_equal(before[k], m[k].data)


def test_nan_reports_component(captions):
    m = tp.new_model(TINY)
    m["query_proj.w"].data[:] = np.nan
    with pytest.raises(tp.TrainingDivergedError) as e:
        tp.run_stage(m, spec(steps=1), captions)
    assert "align" in e.value.component and e.value.step == 0


def test_sft_stage_and_evaluation(qa):
    m = tp.new_model(TINY)
    _, rec = tp.run_stage(m, spec(Stage.SFT, steps=2, alpha=0.5), qa)
    assert len(rec) == 2
    acc = tp.evaluate_qa(m, qa)
    assert 0 <= acc <= 1 and acc * len(qa) == int(round(acc * len(qa)))
    losses = tp.evaluate_loss(m, qa, Stage.SFT, 0.5, 1.0)
    assert losses["total"] == pytest.approx(0.5 * losses["align_total"] + losses["lm"], rel=1e-6)


def test_build_batch_targets_follow_strides(captions):
    m = tp.new_model(TINY)
    seqs, targets = tp.build_batch(m, captions[:2], Stage.PRETRAIN)
    assert len(seqs) == 2
    assert targets[3].shape == (2, 64, 8) and targets[4].shape == (2, 36, 8)


def test_desk_model_overfits_32_captions():
    cfg = BreenConfig()
    data = tp.prepare(sd.gen_samples(7, 32, sd.CAPTION), cfg.strides)
    m = tp.new_model(cfg)
    before = tp.evaluate_loss(m, data, Stage.PRETRAIN)["lm"]
    tp.run_stage(m, tp.StageSpec(Stage.PRETRAIN, 1.0, 1.0, 1e-3, 8, 150), data, seed=0)
    after = tp.evaluate_loss(m, data, Stage.PRETRAIN)["lm"]
    assert after < 0.25 * before, (before, after)
