import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from melctl.corpus import WorldSpec, gen_corpus
from melctl.losses import LossWeights
from melctl.net import LoraConfig, S2AModel, SVTModel, TransformerConfig, count_params, lora_layers, state_hash
from melctl.s2a import (
    ABLATIONS,
    BatchPlan,
    DecodeConfig,
    FinetuneConfig,
    Finetuner,
    TrainingDiverged,
    ablate,
    base_view,
    check_batch,
    decode,
    decode_batch,
    decode_scores,
    frozen_base_intact,
    load_model,
    prepare_finetune,
    pretrain_base,
    prompt_gen,
    prompt_length_range,
    remaining_schedule,
    save_model,
    trainable_ratio,
)

SPEC = WorldSpec(v_sem=8, v_aco=64, n_singers=3, pitch_low=55, pitch_high=62)
TINY = TransformerConfig(layers=1, dim=16, heads=2, ffn=32, max_len=64, v_aco=64, n_codebooks=2, v_sem=8)
PLAN = BatchPlan(K=8, K_g=4)


@pytest.fixture(scope="module")
def pool():
    return gen_corpus(SPEC, [0, 1, 2], 3, 4, 4, 12, seed=0)


@pytest.fixture(scope="module")
def base(pool):
    return pretrain_base(pool, TINY, steps=3, seed=0, batch_size=8)


@pytest.fixture(scope="module")
def svt():
    torch.manual_seed(0)
    m = SVTModel(TINY)
    m.eval()
    return m


def _cfg(**weights):
    return FinetuneConfig(plan=PLAN, weights=LossWeights(**weights) if weights else LossWeights())


def test_batch_plan():
    assert (BatchPlan().K, BatchPlan().K_g, BatchPlan().K_f) == (32, 8, 24)
    with pytest.raises(ValueError):
        BatchPlan(K=8, K_g=1)
    with pytest.raises(ValueError):
        BatchPlan(K=8, K_g=8)


def test_decode_config():
    with pytest.raises(ValueError):
        DecodeConfig(steps=0)
    with pytest.raises(ValueError):
        DecodeConfig(schedule="nope")


@pytest.mark.parametrize("L,lo,hi", [(40, 5, 20), (12, 3, 6), (8, 2, 4)])
def test_prompt_length_examples(L, lo, hi):
    assert prompt_length_range(L) == (lo, hi)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 400))
def test_prompt_length_range_nonempty(L):
    lo, hi = prompt_length_range(L)
    assert 1 <= lo < hi <= max(L // 2, lo + 1)
    assert lo <= L


def test_prompt_length_rejects_tiny():
    with pytest.raises(ValueError):
        prompt_length_range(1)


def test_prompt_gen_other_utterance(pool):
    target = pool[0]
    for seed in range(20):
        p = prompt_gen(target, seed, pool)
        lo, hi = prompt_length_range(target.L)
        assert lo <= p.shape[0] < hi
        sources = [
            u for u in pool
            if u.singer_id == target.singer_id and u.group_id != target.group_id
            and any(np.array_equal(u.acoustic[s : s + len(p)], p) for s in range(u.L - len(p) + 1))
        ]
        assert sources
    assert np.array_equal(prompt_gen(target, 3, pool), prompt_gen(target, 3, pool))


def test_prompt_gen_same_utterance(pool):
    p = prompt_gen(pool[0], 1)
    a = pool[0].acoustic
    assert any(np.array_equal(a[s : s + len(p)], p) for s in range(a.shape[0] - len(p) + 1))


def test_prompt_gen_requires_second_utterance(pool):
    lonely = [u for u in pool if u.group_id == pool[0].group_id]
    with pytest.raises(ValueError):
        prompt_gen(pool[0], 0, lonely)


def test_ablate():
    w = LossWeights()
    assert ablate(w, "full") == w
    assert ablate(w, "no_cl").cl == 0
    assert ablate(w, "no_scl").scl == 0 and ablate(w, "no_scl").fcl == w.fcl
    assert ablate(w, "no_fcl").fcl == 0
    both = ablate(w, "no_cl+no_svt")
    assert both.cl == 0 and both.svt == 0 and both.mask == w.mask
    assert set(ABLATIONS) == {"full", "no_cl", "no_scl", "no_fcl", "no_svt", "no_cl+no_svt"}
    with pytest.raises(ValueError):
        ablate(w, "no_mask")


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.integers(1, 16), st.sampled_from(["cosine", "linear"]))
def test_schedule_strictly_decreasing(L, T, kind):
    rem = remaining_schedule(L, DecodeConfig(steps=T, schedule=kind))
    assert len(rem) == T and rem[-1] == 0
    prev = L
    for r in rem:
        assert 0 <= r and (r < prev or prev == 0)
        prev = r


def test_schedule_single_step():
    assert remaining_schedule(10, DecodeConfig(steps=1)) == [0]


def test_decode_single_step_is_argmax(base, pool):
    s = pool[0]
    prompt = prompt_gen(s, 0, pool)
    out = decode(base, (s.semantic, s.regulated), prompt, DecodeConfig(steps=1))
    masked = torch.full((s.L, SPEC.n_codebooks), base.mask_id)
    _, logits = base(masked, torch.as_tensor(s.semantic), torch.as_tensor(s.regulated), torch.as_tensor(prompt))
    assert np.array_equal(out, logits.argmax(-1).numpy())


def test_decode_lengths_random_scores(base):
    rng = np.random.default_rng(0)
    scores, prompts = [], []
    for _ in range(100):
        n = int(rng.integers(1, 8))
        dur = rng.integers(1, 6, size=n)
        scores.append((rng.integers(0, SPEC.v_sem, n), rng.integers(55, 63, n), dur))
        prompts.append(rng.integers(0, SPEC.v_aco, size=(int(rng.integers(1, 6)), 2)))
    outs = decode_scores(base, scores, prompts, DecodeConfig(steps=4))
    assert [o.shape for o in outs] == [(int(sc[2].sum()), 2) for sc in scores]
    assert all(((o >= 0) & (o < SPEC.v_aco)).all() for o in outs)


def test_decode_monotone_and_padding_isolated(base, pool):
    a, b = pool[0], pool[5]
    short_sem, short_reg = a.semantic[:7], a.regulated[:7]
    prompts = [prompt_gen(a, 0, pool), prompt_gen(b, 0, pool)]
    outs, hist = decode_batch(base, [short_sem, b.semantic], [short_reg, b.regulated], prompts,
                              DecodeConfig(steps=5), return_history=True)
    assert outs[0].shape == (7, 2) and outs[1].shape == (b.L, 2)
    for prev, cur in zip(hist, hist[1:]):
        assert bool((cur | ~prev).all()) and cur.sum() > prev.sum()
    assert bool(hist[-1][0, :7].all()) and not bool(hist[-1][0, 7:].any())
    alone = decode_batch(base, [short_sem], [short_reg], prompts[:1], DecodeConfig(steps=5))[0]
    assert np.array_equal(alone, outs[0])


def test_decode_deterministic_with_sampling(base, pool):
    s = pool[2]
    p = prompt_gen(s, 0, pool)
    cfg = DecodeConfig(steps=4, temperature=1.0, seed=7)
    a = decode(base, (s.semantic, s.regulated), p, cfg)
    assert np.array_equal(a, decode(base, (s.semantic, s.regulated), p, cfg))


def test_decode_empty_batch(base):
    assert decode_batch(base, [], [], []) == []


def test_pretrain_keeps_pitch_input_off(base):
    assert not base.pitch_emb.weight.any()


def test_prepare_strategies(base):
    total = count_params(base)
    lora = prepare_finetune(base, "lora")
    assert len(lora_layers(lora)) == 4 * TINY.layers
    assert trainable_ratio(lora) < 0.5
    pitch_only = prepare_finetune(base, "pitch-only")
    names = {n for n, p in pitch_only.named_parameters() if p.requires_grad}
    assert names == {"pitch_emb.weight", "cond.weight", "cond.bias", "norm.weight", "norm.bias",
                     "heads.0.bias", "heads.1.bias"}
    prefix = prepare_finetune(base, "prefix")
    assert prefix.prefix is not None and prefix.prefix.requires_grad
    full = prepare_finetune(base, "full")
    assert count_params(full, trainable_only=True) == total
    with pytest.raises(ValueError):
        prepare_finetune(base, "llrd")
    assert not base.pitch_emb.weight.any()


def test_lora_ratio_default_toy_model():
    base = S2AModel(TransformerConfig.s2a_toy())
    ratio = trainable_ratio(prepare_finetune(base, "lora", LoraConfig()))
    assert 0 < ratio < 0.10


def test_frozen_base_guarantee(base, pool, svt):
    tuner = Finetuner(base, pool, _cfg(), svt, seed=0)
    before = {k: v.clone() for k, v in base_view(tuner.model).items()}
    tuner.train(3)
    assert frozen_base_intact(tuner.model, base)
    after = base_view(tuner.model)
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert not torch.equal(tuner.model.pitch_emb.weight, prepare_finetune(base).pitch_emb.weight)


def test_breakdown_mask_only(base, pool, svt):
    tuner = Finetuner(base, pool, _cfg(cl=0.0, svt=0.0), svt, seed=0)
    row = tuner.train_step()
    assert row["L_SCL"] == row["L_FCL"] == row["L_SVT"] == 0.0
    assert row["total"] == pytest.approx(row["L_mask"])


def test_identical_seeds_identical_updates(base, pool, svt):
    hashes = []
    for _ in range(2):
        t = Finetuner(base, pool, _cfg(), svt, seed=3)
        t.train(2)
        hashes.append(state_hash(t.model))
    assert hashes[0] == hashes[1]
    t = Finetuner(base, pool, _cfg(), svt, seed=4)
    t.train(2)
    assert state_hash(t.model) != hashes[0]


def test_contrastive_gradient_reaches_adapters(base, pool, svt):
    tuner = Finetuner(base, pool, _cfg(mask=0.0, svt=0.0), svt, seed=0)
    # B starts at zero, so one step is needed before A receives gradient
    tuner.train_step()
    batch = tuner.builder.build(np.random.default_rng(99))
    tuner.model.zero_grad()
    tuner.losses(batch)["total"].backward()
    grads = [layer.A.grad for layer in lora_layers(tuner.model)] + [layer.B.grad for layer in lora_layers(tuner.model)]
    assert any(g is not None and g.abs().sum() > 0 for g in grads)


def test_batch_structure(base, pool, svt):
    tuner = Finetuner(base, pool, _cfg(), svt, seed=0)
    batch = tuner.builder.build(np.random.default_rng(0))
    g = np.flatnonzero(batch.group)
    assert g.size == PLAN.K_g and (~batch.group).sum() == PLAN.K_f
    assert len({tuner.builder.pool[i].group_id for i in range(len(pool))}) > 1
    check_batch(batch)
    batch.prompt_src_b[g[0]] = batch.prompt_src[g[0]]
    with pytest.raises(AssertionError):
        check_batch(batch)


def test_frame_rows_get_perturbed_pitch(base, pool, svt):
    tuner = Finetuner(base, pool, _cfg(), svt, seed=0)
    batch = tuner.builder.build(np.random.default_rng(1))
    f = np.flatnonzero(~batch.group)
    assert (batch.regulated_b[f] != batch.regulated[f]).any()


def test_ablation_arms_share_batches(base, pool, svt):
    full = Finetuner(base, pool, _cfg(), svt, seed=0).builder.build(np.random.default_rng(0))
    bare = Finetuner(base, pool, _cfg(cl=0.0, svt=0.0), None, seed=0).builder.build(np.random.default_rng(0))
    for name in ("semantic", "masked", "prompt", "regulated_b", "prompt_b", "group"):
        assert np.array_equal(getattr(full, name), getattr(bare, name)), name


def test_mask_loss_uses_frame_rows_only(base, pool):
    tuner = Finetuner(base, pool, _cfg(cl=0.0, svt=0.0), None, seed=0)
    batch = tuner.builder.build(np.random.default_rng(0))
    before = tuner.losses(batch)["L_mask"].item()
    g = np.flatnonzero(batch.group)
    batch.targets[g] = (batch.targets[g] + 1) % SPEC.v_aco
    assert tuner.losses(batch)["L_mask"].item() == before


def test_svt_required_when_weighted(base, pool):
    with pytest.raises(ValueError):
        Finetuner(base, pool, _cfg(), None, seed=0)


def test_divergence_aborts(base, pool, svt, monkeypatch):
    tuner = Finetuner(base, pool, _cfg(), svt, seed=0)
    with torch.no_grad():
        tuner.model.heads[0].bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged, match="step 0"):
        tuner.train_step()


def test_resume_matches_uninterrupted(base, pool, svt, tmp_path):
    straight = Finetuner(base, pool, _cfg(), svt, seed=5)
    straight.train(4)
    first = Finetuner(base, pool, _cfg(), svt, seed=5)
    first.train(2)
    first.save(tmp_path / "ck")
    resumed = Finetuner.resume(tmp_path / "ck", base, pool, svt)
    assert resumed.step == 2
    resumed.train(2)
    assert resumed.step == 4
    assert [r["step"] for r in resumed.log] == [0, 1, 2, 3]
    assert state_hash(resumed.model) == state_hash(straight.model)


def test_saved_finetune_reloads(base, pool, svt, tmp_path):
    tuner = Finetuner(base, pool, _cfg(), svt, seed=0)
    tuner.train(1)
    tuner.save(tmp_path / "ck")
    model = load_model(tmp_path / "ck" / "model")
    s = pool[0]
    p = prompt_gen(s, 0, pool)
    cfg = DecodeConfig(steps=3)
    assert np.array_equal(decode(model, (s.semantic, s.regulated), p, cfg),
                          decode(tuner.model, (s.semantic, s.regulated), p, cfg))
    save_model(base, tmp_path / "base")
    assert state_hash(load_model(tmp_path / "base")) == state_hash(base)
