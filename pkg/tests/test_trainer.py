"""Two-phase training loop, optimizer pieces, and the evaluation helpers.
Training runs here are deliberately tiny; the long-budget behavior is covered
by the acceptance suite."""

import json
import numpy as np
import pytest

from edit.tensor import Tensor, NumericError
from edit.flow import SynthConfig
from edit.model import DiTConfig
from edit.elastic import ElasticConfig, RouterOutput, build_model
from edit.infer_cache import InferenceConfig, denoise_full
from edit.metrics import FlopModel
from edit.trainer import (Adam, TrainConfig, batch_flop_ratio,
                          batch_routing_stats, clip_global_norm, evaluate,
                          routing_stats, train, write_snapshots)

DIT = DiTConfig(n_blocks=2, dim=8, width_factor=4, router_hidden=4, n_heads=2, tokens=4)
SYNTH = SynthConfig(tokens=4, dim=8, modes=2, seed=3)


def tiny(**kw) -> TrainConfig:
    base = dict(dit=DIT, synth=SYNTH, steps=8, batch_size=2, warmup_frac=0.5,
                eval_every=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def fake_ro(p, soft, ratio):
    return RouterOutput(gate_logit=T(p), gate_prob=T(p), width_logits=T(soft),
                        width_probs=T(soft), soft_width=T(soft),
                        width_index=0, width_ratio=ratio)


# ---------------------------------------------------------------------------
# config

def test_config_validation_names_offending_keys():
    with pytest.raises(ValueError, match="train_steps"):
        tiny(steps=0)
    with pytest.raises(ValueError, match="batch_size"):
        tiny(batch_size=0)
    with pytest.raises(ValueError, match="warmup_frac"):
        tiny(warmup_frac=1.5)
    with pytest.raises(ValueError, match="learning_rate"):
        tiny(learning_rate=0.0)
    with pytest.raises(ValueError, match="betas"):
        tiny(beta1=1.0)
    with pytest.raises(ValueError, match="adam_eps"):
        tiny(adam_eps=0.0)
    with pytest.raises(ValueError, match="grad_clip"):
        tiny(grad_clip=0.0)
    with pytest.raises(ValueError, match="eval_every"):
        tiny(eval_every=0)
    with pytest.raises(ValueError, match="router_init"):
        tiny(router_init="zeros")


def test_warmup_steps_rounding():
    assert tiny(steps=10, warmup_frac=0.3).warmup_steps == 3
    assert tiny(steps=10, warmup_frac=0.0).warmup_steps == 0
    assert tiny(steps=10, warmup_frac=1.0).warmup_steps == 10


# ---------------------------------------------------------------------------
# optimizer pieces

def test_adam_first_step_is_almost_lr():
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam([p], lr=0.1)
    opt.step([np.ones(3)])
    # bias correction makes the very first update lr / (1 + eps)
    assert np.max(np.abs(p.values - (-0.1 / (1.0 + 1e-8)))) <= 1e-12


def test_adam_updates_in_place_and_tracks_state():
    p = Tensor(np.array([1.0]), requires_grad=True)
    ref = p
    opt = Adam([p], lr=0.01)
    opt.step([np.array([0.5])])
    opt.step([np.array([-0.5])])
    assert ref is p and opt.t == 2
    assert p.values[0] != 1.0


def test_clip_global_norm_scales_down_only():
    g = [np.array([3.0]), np.array([4.0])]   # norm 5
    clipped, norm = clip_global_norm(g, 1.0)
    assert norm == 5.0
    total = np.sqrt(sum(float((x * x).sum()) for x in clipped))
    assert abs(total - 1.0) <= 1e-12
    assert abs(clipped[0][0] / clipped[1][0] - 3.0 / 4.0) <= 1e-12
    same, norm2 = clip_global_norm(g, 10.0)
    assert norm2 == 5.0
    assert same[0] is g[0] and same[1] is g[1]


# ---------------------------------------------------------------------------
# routing statistics over batches

def test_batch_routing_stats_hand_case():
    ros = [fake_ro([[[0.9]], [[0.2]]], [[[0.5]], [[0.75]]], 1.0),
           fake_ro([[[0.7]], [[0.1]]], [[[1.0]], [[0.25]]], 1.0)]
    p_bar, r_bar = batch_routing_stats(ros, tau=0.5)
    assert abs(p_bar - np.mean([0.9, 0.2, 0.7, 0.1])) <= 1e-15
    # sample 0 has both blocks active (mean soft 0.75); sample 1 has none
    assert abs(r_bar - 0.75) <= 1e-15


def test_batch_routing_stats_all_inactive_falls_back_to_full():
    ros = [fake_ro([[[0.1]]], [[[0.5]]], 1.0)]
    _, r_bar = batch_routing_stats(ros, tau=0.5)
    assert r_bar == 1.0


def test_batch_flop_ratio_hand_case():
    fm = FlopModel(tokens=4, dim=8, hidden=32, router_hidden=4)
    ros = [fake_ro([[0.9]], [[1.0]], 1.0), fake_ro([[0.1]], [[1.0]], 1.0)]
    got = batch_flop_ratio(ros, fm, tau=0.5)
    dense = 2 * fm.dense_block()
    actual = 2 * fm.router() + fm.attn() + fm.mlp(1.0)
    assert got == dense / actual
    dense_only = [fake_ro([[0.9]], [[1.0]], 1.0)] * 2
    assert batch_flop_ratio(dense_only, fm, tau=0.5) == 1.0


# ---------------------------------------------------------------------------
# the training loop

def test_training_is_bit_reproducible():
    a = train(tiny())
    b = train(tiny())
    for ta, tb in zip(a.model.parameters(), b.model.parameters()):
        assert ta.values.tobytes() == tb.values.tobytes()
    assert [s.as_dict() for s in a.snapshots] == [s.as_dict() for s in b.snapshots]


def test_seed_changes_the_run():
    a = train(tiny())
    b = train(tiny(seed=1))
    assert any(ta.values.tobytes() != tb.values.tobytes()
               for ta, tb in zip(a.model.parameters(), b.model.parameters()))


def test_warmup_never_touches_the_routers():
    cfg = tiny(steps=6, warmup_frac=1.0)
    fresh = build_model(cfg.dit, cfg.elastic, np.random.default_rng((cfg.seed, 0)),
                        cfg.router_init)
    res = train(cfg)
    for a, b in zip(fresh.router_parameters(), res.model.router_parameters()):
        assert a.values.tobytes() == b.values.tobytes()
    for s in res.snapshots:
        assert s.gating == 0.0 and s.width == 0.0
        assert s.r_bar == 1.0 and s.flop_ratio == 1.0


def test_warmup_phase_is_identical_across_router_inits():
    """With split init/data rng streams the warm-up must not depend on the
    router init at all; only the joint phase may diverge."""
    full = train(tiny(steps=4, warmup_frac=1.0, router_init="full_capacity"))
    rand = train(tiny(steps=4, warmup_frac=1.0, router_init="random"))
    for ta, tb in zip(full.model.params.tensors(), rand.model.params.tensors()):
        assert ta.values.tobytes() == tb.values.tobytes()
    assert [s.perf for s in full.snapshots] == [s.perf for s in rand.snapshots]


def test_joint_phase_moves_the_routers():
    cfg = tiny(steps=8, warmup_frac=0.25)
    fresh = build_model(cfg.dit, cfg.elastic, np.random.default_rng((cfg.seed, 0)),
                        cfg.router_init)
    res = train(cfg)
    assert any(a.values.tobytes() != b.values.tobytes()
               for a, b in zip(fresh.router_parameters(),
                               res.model.router_parameters()))


def test_zero_lambda_leaves_gates_open():
    cfg = tiny(elastic=ElasticConfig(lambda_eff=0.0), steps=40, batch_size=4,
               warmup_frac=0.0, eval_every=10)
    res = train(cfg)
    assert abs(res.snapshots[-1].p_bar - 0.95) <= 0.05


def test_snapshot_invariants():
    res = train(tiny(steps=12, warmup_frac=0.25, eval_every=3))
    assert [s.step for s in res.snapshots] == [3, 6, 9, 12]
    for s in res.snapshots:
        assert s.perf >= 0.0 and s.gating >= 0.0 and s.width >= 0.0
        assert 0.0 < s.p_bar < 1.0
        assert 0.25 <= s.r_bar <= 1.0
        assert s.flop_ratio >= 1.0


def test_numeric_blowup_aborts_with_step_number():
    # the layer norms keep moderate blowups finite, so push hard enough that
    # the gelu cube overflows to inf during the forward pass
    cfg = tiny(steps=30, warmup_frac=0.0, learning_rate=1e80, grad_clip=1e300)
    with pytest.raises(NumericError, match=r"aborting at step \d+"):
        with np.errstate(over="ignore", invalid="ignore"):
            train(cfg)


def test_write_snapshots_ndjson(tmp_path):
    res = train(tiny(steps=4, warmup_frac=0.5, eval_every=2))
    path = tmp_path / "snapshots.ndjson"
    write_snapshots(path, res.snapshots)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == len(res.snapshots)
    for line, snap in zip(lines, res.snapshots):
        assert json.loads(line) == snap.as_dict()


# ---------------------------------------------------------------------------
# evaluation

def borderline_model():
    model = build_model(DIT, ElasticConfig(), np.random.default_rng(5))
    for rw in model.routers:
        for t in (rw.mod, rw.w, rw.w_g, rw.w_w):
            t.values = np.zeros_like(t.values)
        rw.gate_bias.values = np.asarray(float(np.log(0.55 / 0.45)))
        wb = np.zeros_like(rw.width_bias.values)
        wb[..., -1] = 4.0
        rw.width_bias.values = wb
    return model


def test_evaluate_aggregates_the_trace():
    model = build_model(DIT, ElasticConfig(), np.random.default_rng(4))
    icfg = InferenceConfig(steps=4)
    rep = evaluate(model, SYNTH, icfg, n_traj=3, n_data=16, seed=77)
    assert rep.samples.shape == (3, DIT.tokens * DIT.dim)
    assert len(rep.trace) == 3 * icfg.steps * DIT.n_blocks
    assert abs(rep.p_bar - np.mean([r.p for r in rep.trace])) <= 1e-12
    assert rep.energy_distance >= 0.0
    assert rep.flop_ratio >= 1.0
    assert [s.block for s in rep.summaries] == list(range(DIT.n_blocks))


def test_evaluate_is_deterministic():
    model = build_model(DIT, ElasticConfig(), np.random.default_rng(4))
    icfg = InferenceConfig(steps=4)
    a = evaluate(model, SYNTH, icfg, n_traj=2, n_data=8, seed=9)
    b = evaluate(model, SYNTH, icfg, n_traj=2, n_data=8, seed=9)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert a.energy_distance == b.energy_distance
    assert a.trace == b.trace


def test_evaluate_r_bar_averages_computed_widths():
    model = borderline_model()
    icfg = InferenceConfig(steps=4, max_reuse=1)
    rep = evaluate(model, SYNTH, icfg, n_traj=2, n_data=8, seed=15)
    widths = [r.width for r in rep.trace if r.action == "compute"]
    assert widths and rep.r_bar == np.mean(widths) == 1.0


def test_evaluate_r_bar_fallback_without_computes():
    model = borderline_model()
    for rw in model.routers:
        rw.gate_bias.values = np.asarray(-4.0)  # every block skips
    rep = evaluate(model, SYNTH, InferenceConfig(steps=3), n_traj=2, n_data=8, seed=16)
    assert all(r.action == "skip" for r in rep.trace)
    assert rep.r_bar == 1.0


def test_routing_stats_match_trace_probabilities_for_pinned_router():
    # a constant-output router gives identical statistics in both code paths
    from edit.flow import gen_batch
    model = borderline_model()
    samples = gen_batch(SYNTH, 8, np.random.default_rng(21))
    p_bar, _ = routing_stats(model, samples)
    rep = evaluate(model, SYNTH, InferenceConfig(steps=3), n_traj=2, n_data=8, seed=22)
    assert abs(p_bar - rep.p_bar) <= 1e-12
