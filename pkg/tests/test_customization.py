import numpy as np
import pytest
import torch
from scipy import stats

from latexblend import checks, customization
from latexblend.backbone import TrainingError
from latexblend.bank import extract
from latexblend.customization import (ConceptSpec, FinetuneConfig, ablation_no_base_flow, build_dual_prompts,
                                      concept_rows, finetune_concept, init_state, prior_loss, train_blend)
from latexblend.data import DEFAULT_CONCEPTS
from latexblend.text import AlignmentError, TemplatePool

CONCEPT = DEFAULT_CONCEPTS[0]  # V1* circle


@pytest.fixture(scope="module")
def bb():
    b = checks.small_backbone(0)
    with torch.no_grad():
        b.denoiser.outc.weight.normal_(0, 0.05, generator=torch.Generator().manual_seed(0))
    return b


@pytest.fixture(scope="module")
def spec():
    rng = np.random.default_rng(0)
    return ConceptSpec(CONCEPT, rng.uniform(-1, 1, (4, 3, 32, 32)).astype(np.float32))


def test_reference_set_size():
    with pytest.raises(ValueError):
        ConceptSpec(CONCEPT, np.zeros((2, 3, 32, 32), np.float32))
    with pytest.raises(ValueError):
        ConceptSpec(CONCEPT, np.zeros((6, 3, 32, 32), np.float32))


def test_fixed_mode_prompts(spec):
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert build_dual_prompts(spec, TemplatePool(), rng, "fixed") == \
            ("A photo of a circle.", "A photo of V1* circle.")


def test_variable_mode_reproducible(spec):
    r1, r2 = np.random.default_rng(8), np.random.default_rng(8)
    assert [build_dual_prompts(spec, TemplatePool(), r1) for _ in range(30)] == \
        [build_dual_prompts(spec, TemplatePool(), r2) for _ in range(30)]


def test_base_and_concept_templates_independent(spec, monkeypatch):
    drawn = []
    real = customization.draw_template

    def spy(*a, **kw):
        drawn.append(real(*a, **kw))
        return drawn[-1]

    monkeypatch.setattr(customization, "draw_template", spy)
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        build_dual_prompts(spec, TemplatePool(), rng)
    pairs = np.array(drawn).reshape(-1, 2)
    table = np.zeros((7, 7))
    np.add.at(table, (pairs[:, 0], pairs[:, 1]), 1)
    assert stats.chi2_contingency(table).pvalue > 1e-3


def test_article_slot_not_doubled(spec):
    rng = np.random.default_rng(0)
    prompts = {build_dual_prompts(spec, TemplatePool(), rng)[0] for _ in range(300)}
    assert all(" a a " not in f" {p} " for p in prompts)
    assert "A photo of a circle." in prompts and "a fancy photo of a circle." in prompts


def test_zero_steps_leave_parameters_at_init(bb, spec):
    cfg = FinetuneConfig(steps=0)
    state = finetune_concept(bb, spec, None, cfg)
    ref = init_state(bb, spec, cfg)
    assert torch.equal(state.embedding, ref.embedding)
    assert torch.equal(state.projections.w_k, bb.projections.w_k)
    assert torch.equal(state.projections.w_v, bb.projections.w_v)
    rec = extract(state, bb)
    assert rec.rows.shape == (4, 2, 2, bb.cfg.d_l)


def test_identifier_initialized_near_noun_row(bb, spec):
    st = init_state(bb, spec, FinetuneConfig())
    noun_row = bb.encoder.token.weight[bb.vocab["circle"]]
    d = (st.embedding - noun_row).detach()
    assert 0 < float(d.std()) < 0.02


def test_degenerate_blend_reproduces_plain_prompt(bb, spec):
    cfg = FinetuneConfig(init="a", init_noise=0.0, template_mode="fixed")
    st = init_state(bb, spec, cfg)
    with torch.no_grad():
        h_b = bb.flow(["A photo of a circle."])
        h_c = bb.flow(["A photo of V1* circle."], st.projections, st.overrides(bb))
        k, v, spans = concept_rows(h_c, "circle")
        out = train_blend(h_b, k, v, "circle")
    assert spans == [(4, 5)]
    assert torch.equal(out.K, h_b.K) and torch.equal(out.V, h_b.V)


def test_train_blend_replaces_only_span_rows(bb):
    g = torch.Generator().manual_seed(3)
    with torch.no_grad():
        h_b = bb.flow(["A circle."])
    k = torch.randn(1, 4, 2, bb.cfg.d_l, generator=g)
    v = torch.randn(1, 4, 2, bb.cfg.d_l, generator=g)
    out = train_blend(h_b, k, v, "circle")
    assert torch.equal(out.K[0, :, 1:3], k[0]) and torch.equal(out.V[0, :, 1:3], v[0])
    keep = [i for i in range(16) if i not in (1, 2)]
    assert torch.equal(out.K[0, :, keep], h_b.K[0, :, keep])
    with pytest.raises(AlignmentError):
        train_blend(bb.flow(["Photo of circle."]), k, v, "circle")


def test_prior_loss_deterministic(bb):
    rng = np.random.default_rng(2)
    imgs = torch.from_numpy(rng.uniform(-1, 1, (4, 3, 32, 32)).astype(np.float32))
    ps = bb.projections.learnable_copy()
    with torch.no_grad():
        a = prior_loss(bb, ps, imgs, "circle", torch.Generator().manual_seed(1)).item()
        b = prior_loss(bb, ps, imgs, "circle", torch.Generator().manual_seed(1)).item()
    assert a == b and np.isfinite(a)
    with pytest.raises(ValueError):
        prior_loss(bb, ps, imgs[:0], "circle")


def test_prior_weight_zero_means_pure_reconstruction(bb, spec):
    rng = np.random.default_rng(1)
    priors = rng.uniform(-1, 1, (8, 3, 32, 32)).astype(np.float32)
    st = finetune_concept(bb, spec, priors, FinetuneConfig(steps=3, prior_weight=0.0, batch=2))
    assert all(h["prior"] == 0.0 for h in st.history)


def test_no_base_flow_variant_shapes(bb, spec):
    cfg = FinetuneConfig(steps=2, batch=2)
    std = finetune_concept(bb, spec, None, cfg)
    for bare in (False, True):
        alt = ablation_no_base_flow(bb, spec, None, cfg, bare=bare)
        assert alt.embedding.shape == std.embedding.shape
        assert alt.projections.w_k.shape == std.projections.w_k.shape
        assert alt.config["base_flow"] is False and alt.config["bare_prompt"] is bare


def test_base_flow_weights_untouched(bb, spec):
    before = {k: v.clone() for k, v in bb.state_tensors().items()}
    finetune_concept(bb, spec, np.asarray(spec.references), FinetuneConfig(steps=5, batch=2, prior_batch=2))
    after = bb.state_tensors()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_divergence_reports_step(bb, spec, monkeypatch):
    calls = {"n": 0}
    real = customization.diffusion_loss

    def flaky(*a, **kw):
        calls["n"] += 1
        out = real(*a, **kw)
        return out * float("nan") if calls["n"] >= 3 else out

    monkeypatch.setattr(customization, "diffusion_loss", flaky)
    with pytest.raises(TrainingError, match="step 3"):
        finetune_concept(bb, spec, None, FinetuneConfig(steps=5, batch=2))


def test_unknown_optimizer(bb, spec):
    with pytest.raises(ValueError):
        finetune_concept(bb, spec, None, FinetuneConfig(steps=1, optimizer="lbfgs"))


def test_routing_suite():
    rep = checks.check_routing()
    assert rep.passed, rep.summary
