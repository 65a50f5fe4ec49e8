import numpy as np
import pytest

from duvlg import model as mdl
from duvlg import optim as op
from duvlg.codec import PatchFeaturizer, VisualCodebook
from duvlg.data import TextVocab, gen_dataset
from duvlg.model import ModelConfig
from duvlg.objectives import TaskKind
from duvlg.optim import OptimState, StepRecord, TrainSettings, adam_step


CFG = ModelConfig(d_model=16, n_layers_enc=1, n_layers_dec=1, n_heads=2, d_ff=32,
                  text_vocab=17, visual_vocab=16, max_text_len=24, max_patches=16,
                  d_feat=8)
GRID = (4, 4)


def _snapshot(model):
    return {name: p.values.copy() for name, p in model.named_parameters()}


@pytest.fixture(scope="module")
def world():
    cb = VisualCodebook.build(K=16, d_code=8, patch_size=4)
    feat = PatchFeaturizer(4, CFG.d_feat)
    vocab = TextVocab()
    examples = gen_dataset(8, 0, cb, GRID, vocab)
    return cb, feat, vocab, examples


def _model(world, seed=0):
    cb, feat, _, _ = world
    return mdl.init_model(CFG, seed, featurizer=feat, codebook=cb)


def test_adam_zero_grads_no_change(world):
    model = _model(world)
    before = _snapshot(model)
    model.zero_grad()
    adam_step(model, OptimState())
    for name, p in model.named_parameters():
        assert np.array_equal(p.values, before[name])


def test_adam_first_step_sign_property(world):
    model = _model(world)
    before = _snapshot(model)
    state = OptimState(lr=1e-3, clip_norm=0.0)  # 0 disables clipping
    for _, p in model.named_parameters():
        p.grad = np.full_like(p.values, 0.5)
    adam_step(model, state)
    for name, p in model.named_parameters():
        delta = p.values - before[name]
        assert np.allclose(delta, -1e-3, rtol=1e-6)


def test_adam_clip_scales_effective_grads(world):
    model = _model(world)
    state = OptimState(clip_norm=1.0)
    n_total = sum(p.size for _, p in model.named_parameters())
    c = 10.0 / np.sqrt(n_total)  # global norm exactly 10
    for _, p in model.named_parameters():
        p.grad = np.full_like(p.values, c)
    norm = adam_step(model, state)
    assert norm == pytest.approx(10.0, rel=1e-12)
    # first moment saw g * 0.1: m = (1 - beta1) * g * 0.1
    m = state.m["text_embed"]
    assert np.allclose(m, 0.1 * c * 0.1, rtol=1e-12)


def test_adam_post_clip_norm_bounded(world):
    model = _model(world)
    rng = np.random.default_rng(0)
    state = OptimState(clip_norm=1.0)
    for _, p in model.named_parameters():
        p.grad = rng.uniform(-3, 3, p.values.shape)
    pre = np.sqrt(sum(float((p.grad ** 2).sum()) for _, p in model.named_parameters()))
    scale = min(1.0, state.clip_norm / pre)
    post = pre * scale
    assert post <= state.clip_norm + 1e-12
    adam_step(model, state)


def test_adam_rejects_non_finite(world):
    model = _model(world)
    for _, p in model.named_parameters():
        p.grad = np.zeros_like(p.values)
    model.params["patch_proj"].grad[0, 0] = np.nan
    with pytest.raises(op.NonFiniteGradientError, match="patch_proj"):
        adam_step(model, OptimState())


def test_pretrain_zero_steps_no_change(world):
    _, _, _, examples = world
    model = _model(world)
    before = _snapshot(model)
    records = op.pretrain(examples, model, 0, TrainSettings(batch_size=2),
                          np.random.default_rng(0))
    assert records == []
    for name, p in model.named_parameters():
        assert np.array_equal(p.values, before[name])


def test_pretrain_deterministic_bitwise(world):
    _, _, _, examples = world

    def run():
        model = _model(world, seed=3)
        op.pretrain(examples, model, 5, TrainSettings(batch_size=2),
                    np.random.default_rng(11))
        return _snapshot(model)

    a, b = run(), run()
    for name in a:
        assert np.array_equal(a[name], b[name]), name


@pytest.mark.parametrize("kind", list(TaskKind))
def test_single_batch_overfit_decreases(world, kind):
    # training oracle: 50 Adam steps on one fixed batch cut the loss sharply
    from duvlg import autodiff as ad
    from duvlg.objectives import CorruptionConfig, build_task_batch, task_terms, total_loss

    _, _, _, examples = world
    model = _model(world, seed=7)
    batch = build_task_batch(examples[:2], kind, np.random.default_rng(0),
                             model, CorruptionConfig())
    state = OptimState(lr=3e-3)
    losses = []
    for _ in range(50):
        terms = task_terms(batch, model)
        loss, _ = total_loss(terms, alpha=1.0, beta=1.0)
        losses.append(loss.item())
        model.zero_grad()
        ad.backward(loss)
        adam_step(model, state)
    assert losses[-1] < losses[0]
    assert losses[-1] < 0.5 * losses[0]


def test_pretrain_log_format(world):
    _, _, _, examples = world
    model = _model(world)
    lines = []
    op.pretrain(examples, model, 3, TrainSettings(batch_size=2),
                np.random.default_rng(0), log_fn=lines.append)
    assert len(lines) == 3
    for i, line in enumerate(lines):
        parts = line.split("\t")
        assert len(parts) == 7
        assert parts[0] == str(i)
        assert parts[1] in {k.value for k in TaskKind}
        float(parts[2]), float(parts[6])  # parseable


def test_finetune_defaults_and_isolation(world):
    _, _, _, examples = world
    assert op.T2I_FINETUNE_LR == 1e-4
    assert op.CAPTION_FINETUNE_LR == 3e-5
    model = _model(world)
    records = op.finetune(examples, model, TaskKind.MT_CAPTION, 1,
                          TrainSettings(batch_size=4), np.random.default_rng(0))
    for rec in records:
        assert rec.task is TaskKind.MT_CAPTION
        assert rec.breakdown.l_dae_image == rec.breakdown.l_mt_image == rec.breakdown.l_com == 0.0
        assert rec.breakdown.present == {"l_mt_text"}
    with pytest.raises(ValueError):
        op.finetune(examples, model, TaskKind.DAE_TEXT, 1, TrainSettings(),
                    np.random.default_rng(0))


def test_finetune_improves_val_loss(world):
    _, _, _, examples = world
    model = _model(world, seed=5)
    train, val = examples[:6], examples[6:]
    settings = TrainSettings(batch_size=3)
    before = op.evaluate_caption_nll(val, model, settings)
    op.finetune(train, model, TaskKind.MT_CAPTION, 4, settings,
                np.random.default_rng(2), lr=3e-3)
    after = op.evaluate_caption_nll(val, model, settings)
    assert after <= before


def test_t2i_finetune_includes_commitment(world):
    _, _, _, examples = world
    model = _model(world)
    records = op.finetune(examples[:4], model, TaskKind.MT_T2I, 1,
                          TrainSettings(batch_size=4), np.random.default_rng(0))
    assert records[0].breakdown.present == {"l_mt_image", "l_com"}
    assert records[0].breakdown.l_com > 0
