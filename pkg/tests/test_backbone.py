import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from rasc.backbone import (BackboneConfig, CausalConv1d, CausalConvTranspose1d, CrmBlock, CrmConfig, Decoder,
                           Encoder, RwkvBlock, RwkvState, TimeMix, wkv, wkv_closing_state,
                           wkv_parallel)
from rasc.tensor_core import ShapeError, finite_difference_check


def rand_wkv_inputs(seed, b=2, c=4, t=16, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    k = torch.randn(b, c, t, generator=g, dtype=dtype) * 3
    v = torch.randn(b, c, t, generator=g, dtype=dtype)
    w = torch.rand(c, generator=g, dtype=dtype) * 3 + 0.01
    u = torch.randn(c, generator=g, dtype=dtype)
    return k, v, w, u


@given(seed=st.integers(0, 2**31 - 1), t=st.integers(1, 24))
def test_parallel_form_matches_recurrence(seed, t):
    k, v, w, u = rand_wkv_inputs(seed, t=t)
    rec, _ = wkv(k, v, w, u)
    assert torch.allclose(wkv_parallel(k, v, w, u), rec, atol=1e-10, rtol=0)


@given(seed=st.integers(0, 2**31 - 1), cut=st.integers(0, 16))
def test_wkv_streaming_state(seed, cut):
    k, v, w, u = rand_wkv_inputs(seed)
    full, _ = wkv(k, v, w, u)
    a, st_ = wkv(k[..., :cut], v[..., :cut], w, u)
    b, _ = wkv(k[..., cut:], v[..., cut:], w, u, st_)
    assert torch.allclose(torch.cat([a, b], -1), full, atol=1e-12, rtol=0)


def test_wkv_large_keys_do_not_overflow():
    k, v, w, u = rand_wkv_inputs(0)
    out, _ = wkv(k * 300, v, w, u)
    assert torch.isfinite(out).all()
    assert (out.abs() <= v.abs().amax(-1, keepdim=True) + 1e-9).all()   # convex combination of values


def test_wkv_per_step_decay_matches_static():
    k, v, w, u = rand_wkv_inputs(1)
    per_step = w.view(1, -1, 1).expand(2, -1, 16).contiguous()
    a, _ = wkv(k, v, w, u)
    b, _ = wkv(k, v, per_step, u)
    assert torch.allclose(a, b, atol=1e-12)
    assert torch.allclose(wkv_parallel(k, v, per_step, u), a, atol=1e-10)


def test_wkv_gradients():
    k, v, w, u = rand_wkv_inputs(2, b=1, c=3, t=8)
    for p in (k, v, w, u):
        p.requires_grad_(True)
    err = finite_difference_check(lambda: (wkv(k, v, w, u)[0] ** 2).sum(), [k, v, w, u], samples_per_param=6)
    assert err < 1e-4


@pytest.mark.parametrize("ddd", [False, True])
def test_rwkv_block_streaming_equals_full(ddd):
    torch.manual_seed(3)
    blk = RwkvBlock(6, data_dependent_decay=ddd).double()
    if ddd:
        torch.nn.init.normal_(blk.att.decay_up, std=0.3)
    x = torch.randn(1, 6, 20, dtype=torch.float64)
    full, _ = blk(x)
    state = RwkvState.zeros(1, 6, torch.float64)
    pieces = []
    for i in range(20):
        y, state = blk(x[..., i:i + 1], state)
        pieces.append(y)
    assert torch.allclose(torch.cat(pieces, -1), full, atol=1e-10)


def test_time_mix_parallel_flag_equivalence():
    torch.manual_seed(4)
    tm = TimeMix(8).double()
    x = torch.randn(2, 8, 12, dtype=torch.float64)
    a = tm(x)[0]
    tm.parallel = False
    assert torch.allclose(tm(x)[0], a, atol=1e-10)


def test_causal_modules_do_not_see_the_future():
    torch.manual_seed(5)
    cfg = BackboneConfig(in_channels=10, widths=[8, 12], strides=[2, 2], n_attn_per_stage=[1, 1],
                         latent_channels=4, kernel_size=3)
    enc = Encoder(cfg).double()
    x = torch.randn(1, 10, 32, dtype=torch.float64)
    y = x.clone()
    y[..., 16:] += 1.0
    a, b = enc(x), enc(y)
    # latent frame t covers spectrum frames < 4(t+1)
    assert torch.allclose(a[..., :4], b[..., :4], atol=0, rtol=0)
    assert not torch.allclose(a[..., 4:], b[..., 4:])


@given(t=st.integers(1, 12))
def test_crm_block_preserves_shape(t):
    blk = CrmBlock(CrmConfig(8, attn_downsample=2, n_attn_blocks=2))
    assert blk(torch.randn(1, 8, t)).shape == (1, 8, t)


def test_fresh_crm_attention_branch_is_identity():
    blk = CrmBlock(CrmConfig(8, attn_downsample=4))
    x = torch.randn(1, 4, 16)
    assert torch.equal(blk.attention_path(x), x)


def test_crm_config_validation():
    with pytest.raises(ValueError):
        CrmConfig(7)
    with pytest.raises(ValueError):
        CrmConfig(8, attn_downsample=3)
    with pytest.raises(ValueError):
        CrmConfig(8, causal=False)
    with pytest.raises(ValueError):
        BackboneConfig(n_attn_per_stage=[2, 1, 4])


def test_desk_shapes():
    cfg = BackboneConfig()
    enc, dec = Encoder(cfg), Decoder(cfg)
    with torch.no_grad():
        y = enc(torch.randn(1, 514, 100))
        assert y.shape == (1, 32, 25)
        assert dec(y, 100).shape == (1, 514, 100)
    with pytest.raises(ShapeError):
        enc(torch.randn(1, 514, 101))
    with pytest.raises(ShapeError):
        dec(torch.randn(1, 31, 25))


def test_strided_resamplers_round_trip_length():
    down = CausalConv1d(3, 5, 4, stride=2)
    up = CausalConvTranspose1d(5, 3, 2)
    x = torch.randn(1, 3, 18)
    assert down(x).shape[-1] == 9
    assert up(down(x)).shape[-1] == 18


@given(seed=st.integers(0, 2**31 - 1), t=st.integers(0, 12), ddd=st.booleans())
def test_closing_state_matches_recurrence(seed, t, ddd):
    k, v, w, u = rand_wkv_inputs(seed, t=t)
    if ddd:
        w = w.view(1, -1, 1).expand(2, -1, t) * torch.rand(2, 4, t, dtype=torch.float64)
    _, rec = wkv(k, v, w, u)
    closed = wkv_closing_state(k, v, w)
    # states agree as represented values num * exp(shift), compared on the recurrence's scale
    scale = torch.exp(closed.shift - rec.shift)
    if t:
        assert torch.allclose(closed.num * scale, rec.num, atol=1e-10)
        assert torch.allclose(closed.den * scale, rec.den, atol=1e-10)


@pytest.mark.parametrize("ddd", [False, True])
def test_chunked_streaming_from_parallel_start(ddd):
    torch.manual_seed(9)
    blk = RwkvBlock(4, data_dependent_decay=ddd).double()
    x = torch.randn(2, 4, 16, dtype=torch.float64)
    full, _ = blk(x)
    state, pieces = None, []
    for a, b in ((0, 5), (5, 6), (6, 13), (13, 16)):
        y, state = blk(x[..., a:b], state)
        pieces.append(y)
    assert torch.allclose(torch.cat(pieces, -1), full, atol=1e-10)
