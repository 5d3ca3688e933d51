import numpy as np
import pytest

from elo_forge.data import SOURCE_LANG, TARGET_LANG, Batch, default_tokenizer, gen_bilingual_instructions, gen_corpus, mix_streams
from elo_forge.errors import ConfigError, DivergenceError, MergeError, UnknownNameError
from elo_forge.evalbench import perplexity
from elo_forge.lora import LoraConfig, attach_lora, merge_lora
from elo_forge.model import build_model, count_params, forward_flops, train_step_flops
from elo_forge.optim import AdamWState
from elo_forge.surgery import changed_tensors, detach_elo, replace_layers
from elo_forge.train import TrainPlan, align, run_training, sft, train_elo, train_fft, train_lora, train_step

from conftest import REFERENCE, tiny_config

TOK = default_tokenizer()


def _batch(rows=2, s=8, seed=0, V=64):
    rng = np.random.default_rng(seed)
    t = rng.integers(3, V, size=(rows, s + 1))
    return Batch(t[:, :-1], t[:, 1:], np.ones((rows, s), dtype=bool))


def _mix(n=20, seed=0):
    return mix_streams(gen_corpus(SOURCE_LANG, n, seed), gen_corpus(TARGET_LANG, 9 * n, seed + 1), (1, 9))


def _snapshot(modelish):
    return {n: t.data.copy() for n, t in modelish.parameters().items()}


def test_plan_defaults_and_validation():
    assert TrainPlan(method="SFT").resolved_epochs == 10
    assert TrainPlan(method="FFT").resolved_epochs == 1
    p = TrainPlan()
    assert (p.lr, p.betas, p.eps, p.weight_decay, p.cosine) == (3e-4, (0.9, 0.95), 1e-8, 0.1, False)
    with pytest.raises(ConfigError):
        TrainPlan(method="XYZ")
    with pytest.raises(ConfigError):
        TrainPlan(batch=0)


def test_empty_mask_leaves_model_unchanged():
    m = build_model(tiny_config())
    before = m.fingerprint()
    plan = TrainPlan(trainable_mask=frozenset())
    loss = train_step(m, _batch(), plan, AdamWState())
    assert np.isfinite(loss) and m.fingerprint() == before


def test_mask_enforced_every_step():
    m = build_model(tiny_config())
    mask = frozenset({"layer.1.attn.q", "head.w"})
    snap = _snapshot(m)
    metrics = run_training(m, [_batch(seed=i) for i in range(3)], TrainPlan(trainable_mask=mask, check_mask=True,
                                                                               epochs=2), "t")
    assert metrics.steps == 6 == len(metrics.losses)
    changed = {n for n in snap if not np.array_equal(snap[n], m.params[n].data)}
    assert changed == set(mask)


def test_unknown_mask_name():
    with pytest.raises(UnknownNameError):
        train_step(build_model(tiny_config()), _batch(), TrainPlan(trainable_mask=frozenset({"zz"})), AdamWState())


def test_overfit_one_batch():
    m = build_model(tiny_config(d_model=32, d_ff=64))
    b = _batch(rows=2, s=12, seed=5)
    metrics = run_training(m, [b], TrainPlan(lr=3e-3, weight_decay=0.0, max_steps=200, epochs=200), "overfit")
    assert metrics.steps == 200
    assert metrics.losses[-1] < 0.1


def test_training_is_deterministic():
    def run():
        m = build_model(tiny_config())
        r = train_fft(m, _mix(4), TrainPlan(seq_len=16, batch=4, shuffle=True, epochs=2), TOK)
        return r.metrics.losses, r.model.fingerprint()

    assert run() == run()


def test_divergence_is_reported():
    m = build_model(tiny_config())
    m.params["head.w"].data[:] = np.inf
    with pytest.raises(DivergenceError, match="non-finite loss"), np.errstate(invalid="ignore"):
        train_step(m, _batch(), TrainPlan(), AdamWState())


def test_fft_flops_and_mask():
    m = build_model(tiny_config())
    r = train_fft(m, _mix(3), TrainPlan(seq_len=16, batch=4), TOK)
    cfg = m.config
    assert r.metrics.params_trainable == count_params(m, "all")
    full = r.metrics.records[0]
    assert full.flops == 3 * forward_flops(cfg, cfg.n_layers, 16) * 4
    assert r.metrics.step_flops == train_step_flops(cfg, cfg.n_layers, 16, 4)
    assert r.metrics.total_flops == sum(x.flops for x in r.metrics.records)
    assert m.fingerprint() == build_model(tiny_config()).fingerprint()


def test_fft_on_mix_lowers_target_perplexity():
    m = build_model(tiny_config(d_model=32, d_ff=64))
    tgt = gen_corpus(TARGET_LANG, 4, 99)
    before = perplexity(m, tgt, 32, tokenizer=TOK)
    r = train_fft(m, _mix(6), TrainPlan(seq_len=32, batch=8, lr=3e-3), TOK)
    assert perplexity(r.model, tgt, 32, tokenizer=TOK) < before


def test_separability():
    m = build_model(tiny_config(d_model=32, d_ff=64))
    r = train_fft(m, gen_corpus(SOURCE_LANG, 60, 0), TrainPlan(seq_len=32, batch=8, lr=3e-3, max_steps=300,
                                                                epochs=5), TOK)
    assert r.metrics.steps == 300
    a = perplexity(r.model, gen_corpus(SOURCE_LANG, 4, 7), 32, tokenizer=TOK)
    b = perplexity(r.model, gen_corpus(TARGET_LANG, 4, 7), 32, tokenizer=TOK)
    assert a < b


def test_elo_freezes_embedding_and_head():
    base = build_model(tiny_config(n_layers=4))
    sub = detach_elo(base, [1, 4])
    r = train_elo(sub, _mix(4), TrainPlan(method="ELO", seq_len=16, batch=4, check_mask=True, lr=1e-2), TOK)
    for n in ("emb.tok", "head.w", "head.norm"):
        assert r.model.model.params[n].data.tobytes() == sub.model.params[n].data.tobytes()
    assert set(changed_tensors(r.model.model, sub.model)) == set(r.model.trainable_names())
    assert r.metrics.records[0].flops == 3 * forward_flops(base.config, 2, 16) * 4


def test_elo_optional_emb_head_training():
    base = build_model(tiny_config(n_layers=3))
    sub = detach_elo(base, [1, 3], train_emb_head=True)
    r = train_elo(sub, _mix(3), TrainPlan(method="ELO", seq_len=16, batch=4), TOK)
    assert "head.w" in changed_tensors(r.model.model, sub.model)


def test_reference_elo_counts():
    sub = detach_elo(build_model(REFERENCE), [1, 16])
    trainable = count_params(sub, sub.trainable_names())
    assert trainable == 393_728
    assert round(100 * trainable / 3_166_336, 1) == 12.4
    fft = train_step_flops(REFERENCE, 16, 128, 8)
    elo = train_step_flops(REFERENCE, 2, 128, 8)
    assert abs(fft / elo - 7.877) / 7.877 < 1e-3


def test_pipeline_touch_sets():
    base = build_model(tiny_config(n_layers=4))
    sub = train_elo(detach_elo(base, [1, 4]), _mix(3), TrainPlan(method="ELO", seq_len=16, batch=4), TOK).model
    merged = replace_layers(base, sub)
    lam = {f"layer.{i}.{p}" for i in (1, 4) for p in ("attn.norm", "attn.q", "attn.k", "attn.v", "attn.o",
                                                        "ffn.norm", "ffn.up", "ffn.down")}
    assert set(changed_tensors(merged, base)) == lam
    aligned = align(merged, _mix(2, seed=5), TrainPlan(method="ALIGN", seq_len=16, batch=4), TOK)
    assert set(changed_tensors(aligned.model, base)) == set(base.names())
    assert aligned.metrics.phase == "align"
    assert aligned.metrics.params_trainable == count_params(base) > count_params(sub, sub.trainable_names())


def test_align_zero_budget():
    m = build_model(tiny_config())
    from elo_forge.data import DocStream

    r = align(m, DocStream([], []), TrainPlan(method="ALIGN"), TOK)
    assert r.model.fingerprint() == m.fingerprint() and r.metrics.steps == 0 and not r.metrics.records


def test_wrong_method_rejected():
    with pytest.raises(ConfigError):
        train_fft(build_model(tiny_config()), _mix(1), TrainPlan(method="ELO"), TOK)


def test_sft_masks_prompt_and_runs_ten_epochs():
    m = build_model(tiny_config())
    iset = gen_bilingual_instructions(SOURCE_LANG, TARGET_LANG, 8, 0)
    r = sft(m, iset, TrainPlan(method="SFT", batch=4, seq_len=16), TOK)
    assert r.metrics.steps == 10 * 2
    assert r.metrics.phase == "sft"


# -- LoRA ----------------------------------------------------------------------

def test_lora_reference_counts_and_scaling():
    lm = attach_lora(build_model(REFERENCE), LoraConfig(rank=8, alpha=16))
    assert count_params(lm, lm.trainable_names()) == 16 * 2 * (128 * 8 + 8 * 128) == 65_536
    assert LoraConfig(rank=8, alpha=16).scaling == 2.0


def test_lora_init_forward_equals_base():
    base = build_model(tiny_config())
    lm = attach_lora(base, LoraConfig(rank=4))
    x = np.array([[1, 2, 3, 4, 5]])
    assert np.array_equal(lm.forward(x).data, base.forward(x).data)
    assert merge_lora(attach_lora(base, LoraConfig(rank=4))).fingerprint() == base.fingerprint()


def test_lora_unknown_target():
    with pytest.raises(NameError):
        attach_lora(build_model(tiny_config()), LoraConfig(targets=("attn.zz",)))


def test_lora_training_freezes_base_and_merges():
    base = build_model(tiny_config())
    before = base.fingerprint()
    lm = attach_lora(base, LoraConfig(rank=4))
    r = train_lora(lm, _mix(3), TrainPlan(method="LORA", seq_len=16, batch=4, lr=1e-2, check_mask=True), TOK)
    assert base.fingerprint() == before
    assert any(b.data.any() for _, b in lm.adapters.values())
    x = np.random.default_rng(0).integers(3, 64, size=(2, 12))
    unmerged = lm.forward(x).data.astype(np.float64)
    merged = merge_lora(lm).forward(x).data.astype(np.float64)
    # f32 logits: error relative to the logit scale
    assert np.max(np.abs(merged - unmerged)) / np.max(np.abs(unmerged)) < 1e-5
    with pytest.raises(MergeError):
        merge_lora(lm)
    fft_flops = train_step_flops(base.config, base.config.n_layers, 16, 4)
    assert r.metrics.step_flops == fft_flops + 3 * 4 * lm.extra_flops(16)
    assert r.metrics.step_flops > fft_flops


def test_lora_merge_elementwise_in_f64():
    base = build_model(tiny_config(), dtype="f64")
    lm = attach_lora(base, LoraConfig(rank=4))
    rng = np.random.default_rng(1)
    for _, b in lm.adapters.values():
        b.data[:] = rng.standard_normal(b.shape) * 0.05
    x = rng.integers(3, 64, size=(2, 10))
    u = lm.forward(x).data
    m = merge_lora(lm).forward(x).data
    assert np.max(np.abs(m - u) / np.maximum(np.abs(u), 1e-6)) < 1e-5
