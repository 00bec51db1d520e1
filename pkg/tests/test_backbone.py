from dataclasses import replace

import numpy as np
import pytest
import torch

from flexdiff.backbone import (FlexConfig, build, parameter_count, presets,
                               sequence_length)
from flexdiff.conditioning import ConditioningContext, Task
from flexdiff.errors import (ConfigError, ConsistencyError, ContextError,
                             ShapeError)

TINY = presets()["tiny"]
TINY_MT = replace(TINY, tasks=("sr", "fc"))


def sr_ctx(n, seed=0, re_tag=100.0):
    r = np.random.default_rng(seed)
    return ConditioningContext(task=Task.SR,
                               snapshots=(r.standard_normal((n, n)).astype(np.float32),),
                               re_tag=re_tag, upsample_factor=4)


def fc_ctx(n, seed=0):
    r = np.random.default_rng(seed)
    return ConditioningContext(
        task=Task.FC,
        snapshots=(r.standard_normal((n, n)).astype(np.float32),
                   r.standard_normal((n, n)).astype(np.float32)),
        re_tag=100.0, step_index=1)


@pytest.fixture(scope="module")
def tiny_model():
    m = build(TINY_MT, seed=3)
    m.eval()
    return m


# -- configuration -------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        FlexConfig(enc_channels=(8, 16), enc_blocks=(1, 1, 1))
    with pytest.raises(ConfigError):
        FlexConfig(enc_channels=(8, 18), enc_blocks=(1, 1), vit_heads=4)  # 4 | 18 fails
    with pytest.raises(ConfigError):
        FlexConfig(enc_channels=(8, 16), enc_blocks=(1, 1), vit_heads=2, l_weak=5)
    with pytest.raises(ConfigError):
        FlexConfig(enc_channels=(8, 16), enc_blocks=(1, 1), vit_heads=2, tasks=())
    with pytest.raises(ConfigError):
        FlexConfig(enc_channels=(8, 16), enc_blocks=(1, 1), vit_heads=2,
                   skip_fusion="multiply")
    cfg = FlexConfig(enc_channels=(8, 16), enc_blocks=(1, 1), vit_heads=2,
                     base_size=32)
    assert cfg.levels == 1 and cfg.token_dim == 16


def test_sequence_length():
    cfg = replace(presets()["small"], base_size=256)
    assert sequence_length(cfg, 64, 64) == 8 * 8 + 1
    assert sequence_length(TINY, 32, 32) == 16 * 16 + 1
    with pytest.raises(ShapeError):
        sequence_length(cfg, 60, 64)


# -- construction ----------------------------------------------------------------

def test_build_deterministic():
    a = build(TINY, seed=9, verify=False)
    b = build(TINY, seed=9, verify=False)
    for (na, pa), (nb, pb) in zip(sorted(a.named_parameters()),
                                  sorted(b.named_parameters())):
        assert na == nb and torch.equal(pa, pb)
    c = build(TINY, seed=10, verify=False)
    assert any(not torch.equal(pa, pc) for (_, pa), (_, pc)
               in zip(sorted(a.named_parameters()), sorted(c.named_parameters())))


def test_build_finite_params(tiny_model):
    for _, p in tiny_model.named_parameters():
        assert torch.all(torch.isfinite(p))


def test_small_preset_parameter_budget():
    # the reference single-task budget at full scale is 50M
    model = build(presets()["small"], seed=0, verify=False)
    count = parameter_count(model)
    assert abs(count - 50e6) <= 5e6


# -- shapes ------------------------------------------------------------------------

@pytest.mark.parametrize("size", [16, 32, 64])
def test_output_shape_matches_input(tiny_model, size):
    z = np.random.default_rng(1).standard_normal((size, size)).astype(np.float32)
    with torch.no_grad():
        out = tiny_model.forward(0.4, z, sr_ctx(size))
    assert tuple(out.shape) == (size, size)


def test_output_shape_two_level_preset():
    cfg = FlexConfig(enc_channels=(8, 8, 16), enc_blocks=(1, 1, 1), vit_heads=2,
                     vit_depth=1, base_size=32, tasks=("fc",))
    m = build(cfg, seed=0)
    m.eval()
    for size in (16, 32):
        z = np.zeros((size, size), dtype=np.float32)
        with torch.no_grad():
            out = m.forward(0.5, z, fc_ctx(size))
        assert tuple(out.shape) == (size, size)


def test_indivisible_size_rejected(tiny_model):
    cfg = FlexConfig(enc_channels=(8, 8, 16), enc_blocks=(1, 1, 1), vit_heads=2,
                     vit_depth=1, base_size=32)
    m = build(cfg, seed=0, verify=False)
    with pytest.raises(ShapeError):
        m.forward(0.5, np.zeros((10, 10), dtype=np.float32), sr_ctx(10))


def test_token_count_through_hook(tiny_model):
    seen = {}

    def hook(module, args):
        seen["len"] = args[0].shape[1]

    handle = tiny_model.latent.blocks[0].register_forward_pre_hook(hook)
    try:
        with torch.no_grad():
            tiny_model.forward(0.5, np.zeros((32, 32), dtype=np.float32), sr_ctx(32))
    finally:
        handle.remove()
    assert seen["len"] == sequence_length(TINY_MT, 32, 32) == 257


def test_task_not_enabled():
    m = build(TINY, seed=0, verify=False)  # SR only
    with pytest.raises(ConfigError):
        m.forward(0.5, np.zeros((32, 32), dtype=np.float32), fc_ctx(32))


def test_context_size_mismatch(tiny_model):
    with pytest.raises(ContextError):
        tiny_model.forward(0.5, np.zeros((32, 32), dtype=np.float32), sr_ctx(16))


# -- task encoder --------------------------------------------------------------------

def test_encode_task_shapes(tiny_model):
    h, skips = tiny_model.encode_task(sr_ctx(32))
    assert tuple(h.shape) == (16, 16, 16)  # (d, H/2^L, W/2^L)
    assert tuple(skips[0].shape) == (8, 32, 32)
    assert tuple(skips[1].shape) == (16, 16, 16)
    assert all(torch.all(torch.isfinite(s)) for s in skips)


def test_encode_task_zero_input_finite(tiny_model):
    ctx = ConditioningContext(task=Task.SR,
                              snapshots=(np.zeros((32, 32), dtype=np.float32),),
                              upsample_factor=4)
    h, skips = tiny_model.encode_task(ctx)
    assert torch.all(torch.isfinite(h))
    assert float(h.detach().abs().max()) > 0  # bias-driven response


def test_encode_task_depends_on_snapshot(tiny_model):
    h1, _ = tiny_model.encode_task(sr_ctx(32, seed=1))
    h2, _ = tiny_model.encode_task(sr_ctx(32, seed=2))
    assert float((h1 - h2).abs().max()) > 0


# -- multitask batching -----------------------------------------------------------------

def test_multitask_batch_equals_per_item(tiny_model):
    rng = np.random.default_rng(5)
    z = rng.standard_normal((2, 1, 32, 32)).astype(np.float32)
    cs, cf = sr_ctx(32, seed=3), fc_ctx(32, seed=4)
    with torch.no_grad():
        both = tiny_model.forward_batch(torch.tensor([0.3, 0.7]),
                                        torch.as_tensor(z), [cs, cf])
        one = tiny_model.forward(0.3, z[0, 0], cs)
        two = tiny_model.forward(0.7, z[1, 0], cf)
    assert float((both[0, 0] - one).abs().max()) < 1e-5
    assert float((both[1, 0] - two).abs().max()) < 1e-5


def test_all_sr_batch_equals_per_item(tiny_model):
    rng = np.random.default_rng(6)
    z = rng.standard_normal((3, 1, 32, 32)).astype(np.float32)
    ctxs = [sr_ctx(32, seed=i) for i in range(3)]
    with torch.no_grad():
        batch = tiny_model.forward_batch(torch.tensor([0.2, 0.5, 0.8]),
                                         torch.as_tensor(z), ctxs)
        singles = [tiny_model.forward(t, z[i, 0], ctxs[i])
                   for i, t in enumerate((0.2, 0.5, 0.8))]
    for i in range(3):
        assert float((batch[i, 0] - singles[i]).abs().max()) < 1e-5


def test_ungrouped_batch_rejected(tiny_model):
    z = torch.zeros((2, 1, 32, 32))
    with pytest.raises(ConsistencyError):
        tiny_model.forward_batch(torch.tensor([0.5, 0.5]), z,
                                 [fc_ctx(32), sr_ctx(32)])


# -- conditioning pathways ---------------------------------------------------------------

def test_strong_conditioning_sensitivity(tiny_model):
    z = np.random.default_rng(7).standard_normal((32, 32)).astype(np.float32)
    ctx = sr_ctx(32, seed=8)
    with torch.no_grad():
        full = tiny_model.forward(0.4, z, ctx)
        deep_masked = tiny_model.forward(0.4, z, ctx,
                                         mask_task_skip_levels=(TINY_MT.levels,))
    # the deepest task skip feeds only the decoder (weak path stops at
    # l_weak < levels), so zeroing it must change the output
    assert float((full - deep_masked).abs().max()) > 0


def test_conditioning_token_participates(tiny_model):
    z = np.random.default_rng(7).standard_normal((32, 32)).astype(np.float32)
    ctx = sr_ctx(32, seed=8)
    with torch.no_grad():
        full = tiny_model.forward(0.4, z, ctx)
        blanked = tiny_model.forward(0.4, z, ctx, zero_cond_token=True)
    assert float((full - blanked).abs().max()) > 0


def test_weak_conditioning_toggle():
    cfg_on = replace(TINY, l_weak=1)
    cfg_off = replace(TINY, use_weak=False)
    m_on = build(cfg_on, seed=4, verify=False)
    m_off = build(cfg_off, seed=4, verify=False)
    m_on.eval(), m_off.eval()
    z = np.random.default_rng(1).standard_normal((32, 32)).astype(np.float32)
    ctx = sr_ctx(32, seed=2)
    with torch.no_grad():
        a = m_on.forward(0.5, z, ctx)
        b = m_off.forward(0.5, z, ctx)
    assert float((a - b).abs().max()) > 0


def test_sum_fusion_variant_runs():
    cfg = replace(TINY, skip_fusion="sum")
    m = build(cfg, seed=0)
    m.eval()
    z = np.zeros((32, 32), dtype=np.float32)
    with torch.no_grad():
        out = m.forward(0.5, z, sr_ctx(32))
    assert tuple(out.shape) == (32, 32)


# -- transformer properties ---------------------------------------------------------------

def test_positional_embedding_permutation_consistency(tiny_model):
    rng = np.random.default_rng(11)
    d = TINY_MT.token_dim
    n_tokens = 16 * 16
    tokens = torch.as_tensor(rng.standard_normal((1, n_tokens, d)).astype(np.float32))
    tokens = tokens + tiny_model.pos_emb
    cond = torch.as_tensor(rng.standard_normal((1, 1, d)).astype(np.float32))
    perm = torch.as_tensor(rng.permutation(n_tokens))
    with torch.no_grad():
        out = tiny_model.latent(torch.cat([cond, tokens], dim=1))[:, 1:]
        out_perm = tiny_model.latent(torch.cat([cond, tokens[:, perm]], dim=1))[:, 1:]
    assert float((out_perm - out[:, perm]).abs().max()) < 1e-5


def test_global_receptive_field_jvp(tiny_model):
    # perturbing the first spatial token must influence the most distant one
    # after the transformer stack: nonzero directional derivative at maximal
    # token distance (numerical JVP; forward-mode AD is unsupported for the
    # fused CPU attention kernel)
    rng = np.random.default_rng(13)
    n_tokens = 16 * 16
    seq = torch.as_tensor(
        rng.standard_normal((1, n_tokens + 1, TINY_MT.token_dim)).astype(np.float32))
    direction = torch.zeros_like(seq)
    direction[0, 1, :] = 1.0  # first spatial token
    h = 1e-2
    with torch.no_grad():
        up = tiny_model.latent(seq + h * direction)
        down = tiny_model.latent(seq - h * direction)
    distant = (up - down)[0, -1] / (2 * h)  # last spatial token
    assert float(distant.abs().max()) > 1e-6


# -- gradient correctness -------------------------------------------------------------------

def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = build(TINY, seed=21, verify=False).double()
    model.eval()  # dropout off: deterministic loss surface
    rng = np.random.default_rng(0)
    n = 16
    z = rng.standard_normal((1, 1, n, n))
    v = rng.standard_normal((1, 1, n, n))
    ctx = ConditioningContext(task=Task.SR,
                              snapshots=(rng.standard_normal((n, n)),),
                              re_tag=50.0, upsample_factor=4)
    t = torch.tensor([0.37], dtype=torch.float64)

    def loss_value():
        out = model.forward_batch(t, torch.as_tensor(z), [ctx])
        return ((out - torch.as_tensor(v)) ** 2).mean()

    loss = loss_value()
    model.zero_grad()
    loss.backward()

    params = [(name, p) for name, p in model.named_parameters() if p.grad is not None]
    picked = []
    for k in rng.choice(len(params), size=20, replace=False):
        name, p = params[k]
        flat = rng.integers(p.numel())
        picked.append((name, p, flat))

    h = 1e-6
    for name, p, flat in picked:
        with torch.no_grad():
            orig = p.view(-1)[flat].item()
            p.view(-1)[flat] = orig + h
            up = loss_value().item()
            p.view(-1)[flat] = orig - h
            down = loss_value().item()
            p.view(-1)[flat] = orig
        fd = (up - down) / (2 * h)
        analytic = p.grad.view(-1)[flat].item()
        if max(abs(fd), abs(analytic)) < 1e-6:
            continue  # gradient numerically zero; FD cannot resolve it
        denom = max(abs(fd), abs(analytic))
        assert abs(fd - analytic) / denom < 1e-3, f"{name}[{flat}]: {fd} vs {analytic}"
