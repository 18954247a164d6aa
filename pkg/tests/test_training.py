"""Trainer tests: schedule math, optimizer, freezing, persistence.

The AdamW oracle is an independently written reference loop compared
bitwise. Freeze semantics are checked by hashing parameter bytes before
and after a stage. Determinism is checked by running identical stages
twice and comparing metric streams, and resume is checked by comparing
load-then-train against train-through at byte level.
"""

import json
import os
from dataclasses import dataclass, replace

import numpy as np
import pytest

from tilefusion.encoders import EncoderConfig
from tilefusion.errors import ConfigError, ContractError, DimensionError
from tilefusion.lm import LMConfig
from tilefusion.model import Pipeline, PipelineConfig
from tilefusion.tensor import Parameter
from tilefusion.tiling import ImageBuffer
from tilefusion.training import (
    AdamW,
    Checkpoint,
    MetricsRecord,
    StagePlan,
    batch_indices,
    config_hash,
    cosine_lr,
    read_metrics,
    restore,
    run_stage,
    snapshot,
    stage1_plan,
    stage2_plan,
)


@dataclass
class Sample:
    images: list
    question: str
    answer: str


def tiny_cfg(ctx=96, fusion="post-interleave"):
    enc_a = EncoderConfig(patch_size=4, embed_dim=8, depth=1, heads=2,
                          grid_side=4, unshuffle_r=2)
    enc_b = EncoderConfig(patch_size=2, embed_dim=8, depth=1, heads=2,
                          grid_side=8, unshuffle_r=2)
    return PipelineConfig(
        encoder_a=enc_a, encoder_b=enc_b,
        lm=LMConfig(d_lm=16, layers=1, heads=2, context_limit=ctx),
        tile_size=16, max_tiles=4, fusion=fusion, projector_hidden=8)


def tiny_pipe(seed=0, **kw):
    return Pipeline(tiny_cfg(**kw), seed=seed)


def make_dataset(n=4, seed=100):
    rng = np.random.default_rng(seed)
    answers = "abcdefgh"
    return [Sample([ImageBuffer(rng.random((16, 16, 3)))], "which?",
                   answers[i % len(answers)]) for i in range(n)]


def param_bytes(model, prefixes):
    return {p.name: p.data.tobytes() for p in model.parameters()
            if p.name.startswith(tuple(prefixes))}


# schedule


class TestCosineLr:
    def test_warmup_endpoint_is_base(self):
        assert cosine_lr(10, 2.0, 100, 10) == 2.0

    def test_final_step_is_zero(self):
        assert cosine_lr(100, 2.0, 100, 10) == 0.0

    def test_decay_midpoint_is_half_base(self):
        assert abs(cosine_lr(55, 2.0, 100, 10) - 1.0) < 1e-12

    def test_warmup_is_linear_from_zero(self):
        assert cosine_lr(0, 2.0, 100, 10) == 0.0
        assert cosine_lr(5, 2.0, 100, 10) == 1.0
        assert cosine_lr(1, 2.0, 100, 10) == 0.2

    def test_no_warmup_starts_at_base(self):
        assert cosine_lr(0, 3.0, 50, 0) == 3.0

    def test_nonincreasing_after_warmup(self):
        vals = [cosine_lr(s, 1.0, 200, 20) for s in range(20, 201)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range_step_rejected(self):
        with pytest.raises(ContractError):
            cosine_lr(-1, 1.0, 10, 2)
        with pytest.raises(ContractError):
            cosine_lr(11, 1.0, 10, 2)
        with pytest.raises(ContractError):
            cosine_lr(5, 1.0, 10, 20)


# optimizer


def ref_adamw(p0, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    p = p0.copy()
    m = np.zeros_like(p0)
    v = np.zeros_like(p0)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p = p - lr * wd * p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p


class TestAdamW:
    def test_zero_grad_zero_decay_leaves_params(self):
        p = Parameter("w", np.arange(6.0).reshape(2, 3))
        before = p.data.tobytes()
        p.grad = np.zeros_like(p.data)
        AdamW([p]).step(0.1)
        assert p.data.tobytes() == before

    def test_frozen_param_untouched_by_nonzero_grad(self):
        p = Parameter("w", np.ones((3,)), frozen=True)
        before = p.data.tobytes()
        p.grad = np.ones(3)
        opt = AdamW([p], weight_decay=0.5)
        for _ in range(4):
            opt.step(0.1)
        assert p.data.tobytes() == before

    def test_first_step_moves_by_about_lr(self):
        p = Parameter("w", np.array([1.0]))
        p.grad = np.array([1.0])
        AdamW([p]).step(0.1)
        assert abs(p.data[0] - 0.9) < 1e-8

    def test_decay_is_decoupled_from_moments(self):
        start = np.array([2.0, -3.0])
        p = Parameter("w", start.copy())
        p.grad = np.zeros(2)
        AdamW([p], weight_decay=0.01).step(0.1)
        want = start - 0.1 * 0.01 * start - 0.0
        assert p.data.tobytes() == want.tobytes()

    def test_matches_reference_trajectory_bitwise(self):
        rng = np.random.default_rng(3)
        p0 = rng.standard_normal((4, 5))
        grads = [rng.standard_normal((4, 5)) for _ in range(10)]
        p = Parameter("w", p0.copy())
        opt = AdamW([p], weight_decay=0.01)
        for g in grads:
            p.grad = g
            opt.step(0.05)
        want = ref_adamw(p0, grads, 0.05, wd=0.01)
        assert np.array_equal(p.data, want)

    def test_grad_shape_mismatch_rejected(self):
        p = Parameter("w", np.ones((2, 2)))
        p.grad = np.ones(4)
        with pytest.raises(DimensionError):
            AdamW([p]).step(0.1)

    def test_missing_grad_is_skipped(self):
        p = Parameter("w", np.ones(3))
        p.grad = None
        before = p.data.tobytes()
        AdamW([p], weight_decay=0.5).step(0.1)
        assert p.data.tobytes() == before

    def test_per_param_step_counter(self):
        # a param frozen for the first updates must get fresh bias
        # correction when it thaws, as if its history started there
        pa = Parameter("a", np.array([1.0]), frozen=True)
        opt = AdamW([pa])
        pa.grad = np.array([1.0])
        opt.step(0.1)
        opt.step(0.1)
        pa.frozen = False
        opt.step(0.1)
        pb = Parameter("b", np.array([1.0]))
        opt2 = AdamW([pb])
        pb.grad = np.array([1.0])
        opt2.step(0.1)
        assert np.array_equal(pa.data, pb.data)


# plans


class TestStagePlans:
    def test_stage1_freezes_encoders_and_lm(self):
        plan = stage1_plan(steps=100)
        assert set(plan.frozen_prefixes) >= {"encoderA.", "encoderB.",
                                             "lm."}
        assert plan.base_lr == 4e-4
        assert plan.weight_decay == 0.01
        assert plan.warmup_steps == 3

    def test_stage2_trains_the_lm(self):
        plan = stage2_plan(steps=200, base_lr=4e-5)
        assert "lm." not in plan.frozen_prefixes
        assert set(plan.frozen_prefixes) >= {"encoderA.", "encoderB."}
        assert plan.warmup_steps == 6

    def test_extra_frozen_prefixes_are_kept(self):
        plan = stage1_plan(steps=10, extra_frozen=("projectorA.",))
        assert "projectorA." in plan.frozen_prefixes

    def test_invalid_plans_rejected(self):
        with pytest.raises(ConfigError):
            StagePlan("stage3", ("encoderA.", "encoderB."), 1e-3, 0.0,
                      10, 0)
        with pytest.raises(ConfigError):
            StagePlan("stage1", ("encoderA.", "encoderB."), 1e-3, 0.0,
                      10, 0)  # missing lm.
        with pytest.raises(ConfigError):
            StagePlan("stage2", ("encoderA.", "encoderB.", "lm."), 1e-3,
                      0.0, 10, 0)
        with pytest.raises(ConfigError):
            stage1_plan(steps=0)
        with pytest.raises(ConfigError):
            stage1_plan(steps=10, warmup_steps=11)
        with pytest.raises(ConfigError):
            stage1_plan(steps=10, base_lr=0.0)
        with pytest.raises(ConfigError):
            stage1_plan(steps=10, weight_decay=-0.1)


# batching


class TestBatchIndices:
    def test_deterministic_per_key(self):
        a = batch_indices(7, 1, 3, 100, 8)
        b = batch_indices(7, 1, 3, 100, 8)
        assert np.array_equal(a, b)
        assert len(a) == 8
        assert len(set(a.tolist())) == 8

    def test_different_steps_give_different_batches(self):
        draws = {tuple(batch_indices(7, 1, s, 100, 8)) for s in range(20)}
        assert len(draws) > 15

    def test_small_dataset_caps_batch(self):
        idx = batch_indices(0, 2, 0, 3, 8)
        assert sorted(idx.tolist()) == [0, 1, 2]


# persistence


class TestCheckpoint:
    def test_restore_copies_exact_values(self):
        m1 = tiny_pipe(seed=1)
        ckpt = snapshot(m1, step=5, stage="stage1")
        m2 = tiny_pipe(seed=2)
        restore(m2, ckpt)
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert p1.data.tobytes() == p2.data.tobytes(), p1.name

    def test_save_load_save_blob_identical(self, tmp_path):
        m1 = tiny_pipe(seed=1)
        ckpt = snapshot(m1, step=5, stage="stage1")
        ckpt.save(tmp_path)
        loaded = Checkpoint.load(tmp_path)
        assert loaded.blob == ckpt.blob
        m3 = tiny_pipe(seed=3)
        restore(m3, loaded)
        again = snapshot(m3, step=5, stage="stage1")
        assert again.blob == ckpt.blob
        assert again.manifest == ckpt.manifest

    def test_manifest_layout(self):
        m = tiny_pipe(seed=0)
        ckpt = snapshot(m, step=7, stage="stage2")
        man = ckpt.manifest
        assert man["step"] == 7
        assert man["stage"] == "stage2"
        assert man["config_hash"] == config_hash(m.cfg)
        offset = 0
        for entry, p in zip(man["params"], m.parameters()):
            assert entry["name"] == p.name
            assert tuple(entry["shape"]) == p.data.shape
            assert entry["offset"] == offset
            offset += 4 * p.data.size
        assert len(ckpt.blob) == offset

    def test_config_hash_guard(self):
        m1 = tiny_pipe(seed=1)
        ckpt = snapshot(m1, step=0, stage="stage1")
        other = Pipeline(replace(tiny_cfg(), max_tiles=2), seed=1)
        with pytest.raises(ContractError):
            restore(other, ckpt)
        restore(other, ckpt, strict=False)
        assert other.parameters()[0].data.tobytes() == \
            m1.parameters()[0].data.tobytes()

    def test_wrong_parameter_set_rejected(self):
        m1 = tiny_pipe(seed=1)
        ckpt = snapshot(m1, step=0, stage="stage1")
        other = Pipeline(replace(tiny_cfg(), encoders="A"), seed=1)
        with pytest.raises(ContractError):
            restore(other, ckpt, strict=False)

    def test_truncated_blob_rejected(self, tmp_path):
        ckpt = snapshot(tiny_pipe(seed=1), step=0, stage="stage1")
        ckpt.save(tmp_path)
        blob_path = os.path.join(tmp_path, "weights.bin")
        with open(blob_path, "rb") as f:
            raw = f.read()
        with open(blob_path, "wb") as f:
            f.write(raw[:-8])
        with pytest.raises(ContractError):
            Checkpoint.load(tmp_path)


# stages


def fake_clock():
    t = [0.0]

    def tick():
        t[0] += 0.001
        return t[0]

    return tick


class TestRunStage:
    def test_empty_dataset_rejected(self):
        with pytest.raises(ContractError):
            run_stage(stage1_plan(steps=1), tiny_pipe(), [], seed=0)

    def test_nan_loss_aborts_with_step(self):
        pipe = tiny_pipe(seed=0)
        pipe.lm.head.data[...] = np.nan
        with pytest.raises(ContractError) as err:
            run_stage(stage1_plan(steps=3), pipe, make_dataset(2), seed=0)
        assert "step 0" in str(err.value)

    def test_metrics_stream_shape(self):
        plan = stage1_plan(steps=6, warmup_steps=2, base_lr=1e-3)
        ckpt, recs = run_stage(plan, tiny_pipe(seed=1), make_dataset(4),
                               seed=5, batch_size=2, clock=fake_clock())
        assert len(recs) == 6
        for k, rec in enumerate(recs):
            assert rec.step == k
            assert rec.stage == "stage1"
            assert rec.lr == cosine_lr(k, 1e-3, 6, 2)
            assert np.isfinite(rec.loss)
            assert abs(rec.wall_ms - 1.0) < 1e-9
        assert ckpt.manifest["step"] == 6

    def test_identical_runs_give_identical_streams(self):
        plan = stage1_plan(steps=5, warmup_steps=1, base_lr=1e-3)
        data = make_dataset(4)
        outs = []
        for _ in range(2):
            _, recs = run_stage(plan, tiny_pipe(seed=2), data, seed=9,
                                batch_size=2, clock=fake_clock())
            outs.append(recs)
        assert outs[0] == outs[1]

    def test_stage1_freezes_encoders_and_lm_exactly(self):
        pipe = tiny_pipe(seed=3)
        data = make_dataset(4)
        frozen_before = param_bytes(pipe, ("encoderA.", "encoderB.", "lm."))
        proj_before = param_bytes(pipe, ("projector",))
        plan = stage1_plan(steps=30, warmup_steps=2, base_lr=2e-3)
        _, recs = run_stage(plan, pipe, data, seed=11, batch_size=4)
        assert param_bytes(pipe, ("encoderA.", "encoderB.", "lm.")) == \
            frozen_before
        proj_after = param_bytes(pipe, ("projector",))
        assert all(proj_after[k] != proj_before[k] for k in proj_before)
        post = [r.loss for r in recs[plan.warmup_steps:]]
        assert all(a > b for a, b in zip(post, post[1:]))
        assert post[-1] < post[0]

    def test_stage2_trains_projectors_and_lm(self):
        pipe = tiny_pipe(seed=4)
        data = make_dataset(4)
        run_stage(stage1_plan(steps=10, warmup_steps=1, base_lr=2e-3),
                  pipe, data, seed=11, batch_size=4)
        enc_before = param_bytes(pipe, ("encoderA.", "encoderB."))
        lm_before = param_bytes(pipe, ("lm.",))
        proj_before = param_bytes(pipe, ("projector",))
        plan = stage2_plan(steps=10, warmup_steps=1, base_lr=5e-4)
        _, recs = run_stage(plan, pipe, data, seed=12, batch_size=4)
        assert param_bytes(pipe, ("encoderA.", "encoderB.")) == enc_before
        lm_after = param_bytes(pipe, ("lm.",))
        assert any(lm_after[k] != lm_before[k] for k in lm_before)
        proj_after = param_bytes(pipe, ("projector",))
        assert any(proj_after[k] != proj_before[k] for k in proj_before)
        assert recs[-1].loss < recs[0].loss

    def test_out_dir_writes_metrics_and_checkpoint(self, tmp_path):
        plan = stage1_plan(steps=4, warmup_steps=1, base_lr=1e-3)
        out = str(tmp_path / "run")
        ckpt, recs = run_stage(plan, tiny_pipe(seed=5), make_dataset(2),
                               seed=6, batch_size=2, out_dir=out,
                               clock=fake_clock())
        from_disk = read_metrics(os.path.join(out, "metrics.jsonl"))
        assert from_disk == recs
        loaded = Checkpoint.load(out)
        assert loaded.blob == ckpt.blob
        assert loaded.manifest == ckpt.manifest

    def test_resume_reproduces_next_step_loss_exactly(self, tmp_path):
        data = make_dataset(4)
        first = stage1_plan(steps=4, warmup_steps=1, base_lr=1e-3)
        m1 = tiny_pipe(seed=7)
        ckpt, _ = run_stage(first, m1, data, seed=21, batch_size=2,
                            out_dir=str(tmp_path))

        m2 = tiny_pipe(seed=8)  # different init, fully overwritten
        restore(m2, Checkpoint.load(str(tmp_path)))

        cont = stage1_plan(steps=1, warmup_steps=0, base_lr=1e-3)
        _, rec1 = run_stage(cont, m1, data, seed=22, batch_size=2)
        _, rec2 = run_stage(cont, m2, data, seed=22, batch_size=2)
        assert rec1[0].loss == rec2[0].loss
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert p1.data.tobytes() == p2.data.tobytes(), p1.name


def test_metrics_record_round_trips_json():
    rec = MetricsRecord(step=3, stage="stage2", lr=0.25, loss=1.5,
                        wall_ms=12.0)
    assert MetricsRecord(**json.loads(rec.to_json_line())) == rec


def test_config_hash_stable_and_sensitive():
    a = config_hash(tiny_cfg())
    assert a == config_hash(tiny_cfg())
    assert a != config_hash(replace(tiny_cfg(), max_tiles=2))
    assert len(a) == 64
