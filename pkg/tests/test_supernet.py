import numpy as np
import pytest

from avenas.supernet import (
    CHANNEL_SCALES, EYE_VIEWS, VIEWS,
    SampledArch, SearchSpace, SupernetSpec,
    channel_masks, derive_arch, discrete_forward, gumbel_weights,
    init_supernet_weights, mixed_block_forward, one_hot_arch_weights,
    paper_spec, random_arch, sample_hard, scaled_channels,
    supernet_forward, toy_spec, validate_arch, weighted_sum,
)
from avenas.tensor_core import Graph, ShapeError, Tensor, backward, conv2d, add, relu, mse


def uniform_arch_weights(spec, value_op=None, value_ch=None):
    rng = np.random.default_rng(0)
    aw = {}
    n_ops = len(spec.search_space.operators)
    n_sc = len(spec.search_space.channel_scales)
    for view, branch, i, *_ in spec.blocks():
        ow = value_op if value_op is not None else np.full(n_ops, 1.0 / n_ops)
        cw = value_ch if value_ch is not None else np.full(n_sc, 1.0 / n_sc)
        aw[(view, branch, i)] = (Tensor(np.array(ow)), Tensor(np.array(cw)))
    return aw


def toy_frames(spec, rng, batch=2, res=None):
    r = res or spec.search_space.resolutions[-1]
    return {v: Tensor(rng.normal(size=(batch, 1, r, r))) for v in VIEWS}


# ---------------------------------------------------------------------------
# gumbel sampling
# ---------------------------------------------------------------------------

def test_gumbel_equal_logits_zero_noise_uniform():
    w = gumbel_weights(Tensor(np.zeros(4)), np.zeros(4), temperature=2.5)
    np.testing.assert_allclose(w.data, 0.25, atol=1e-12)


def test_gumbel_hand_computed():
    w = gumbel_weights(Tensor(np.log([2.0, 1.0])), np.zeros(2), temperature=1.0)
    np.testing.assert_allclose(w.data, [2 / 3, 1 / 3], atol=1e-12)


def test_gumbel_weights_sum_to_one_and_positive():
    rng = np.random.default_rng(5)
    for _ in range(10):
        logits = rng.normal(size=7) * 3
        noise = rng.gumbel(size=7)
        w = gumbel_weights(Tensor(logits), noise, temperature=0.37)
        assert abs(w.data.sum() - 1.0) < 1e-12
        assert (w.data > 0).all()


def test_gumbel_rejects_bad_inputs():
    with pytest.raises(ValueError):
        gumbel_weights(Tensor(np.array([np.inf, 0.0])), np.zeros(2), 1.0)
    with pytest.raises(ValueError):
        gumbel_weights(Tensor(np.zeros(2)), np.zeros(2), 0.0)


def test_hard_sampling_matches_softmax_law():
    # small-sample version of the Gumbel-max property; the full 10k-draw
    # version lives in the acceptance suite
    rng = np.random.default_rng(17)
    logits = np.array([1.0, 0.0, -1.0])
    n = 4000
    counts = np.zeros(3)
    for _ in range(n):
        counts[sample_hard(logits, rng)] += 1
    p = np.exp(logits) / np.exp(logits).sum()
    sigma = np.sqrt(p * (1 - p) / n)
    assert (np.abs(counts / n - p) <= 4 * sigma).all()


# ---------------------------------------------------------------------------
# mixed blocks
# ---------------------------------------------------------------------------

def test_mixed_block_one_hot_skip_is_identity():
    spec = toy_spec()
    weights = init_supernet_weights(spec, seed=1)
    rng = np.random.default_rng(2)
    # latent block 1: 8 -> 8 channels, stride 1, so skip is a true identity
    x = Tensor(rng.normal(size=(2, 8, 6, 6)))
    ow = Tensor(np.array([0.0, 0.0, 1.0]))           # one-hot on skip
    cw = np.zeros(len(CHANNEL_SCALES))
    cw[-1] = 1.0                                      # scale 1.0: mask is all-ones
    out = mixed_block_forward(x, ow, Tensor(cw), spec, weights,
                              "mouth", "latent", 1, 8, 8, 1)
    np.testing.assert_array_equal(out.data, x.data)


def test_mixed_block_one_hot_conv_equals_plain_conv():
    spec = toy_spec()
    weights = init_supernet_weights(spec, seed=1)
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 8, 6, 6)))
    ow = Tensor(np.array([0.0, 1.0, 0.0]))
    cw = np.zeros(len(CHANNEL_SCALES))
    cw[-1] = 1.0
    out = mixed_block_forward(x, ow, Tensor(cw), spec, weights,
                              "mouth", "latent", 1, 8, 8, 1)
    want = relu(add(conv2d(x, weights["mouth/latent/b1/conv/kernel"], stride=1, padding=1),
                    weights["mouth/latent/b1/conv/bias"]))
    np.testing.assert_array_equal(out.data, want.data)


def test_channel_mask_scale_half_zeroes_upper_channels():
    spec = SupernetSpec()
    weights = init_supernet_weights(toy_spec(), seed=1)  # unused; mask check is direct
    masks = channel_masks(CHANNEL_SCALES, 64)
    half = masks[0]
    assert scaled_channels(0.5, 64) == 32
    assert (half[:32] == 1).all() and (half[32:] == 0).all()


def test_mask_monotone_in_scale():
    masks = channel_masks(CHANNEL_SCALES, 64)
    for s_small, s_big in zip(masks[:-1], masks[1:]):
        assert (s_small <= s_big).all()


def test_weighted_sum_matches_numpy():
    rng = np.random.default_rng(4)
    ts = [Tensor(rng.normal(size=(2, 3))) for _ in range(3)]
    w = np.array([0.2, 0.5, 0.3])
    out = weighted_sum(ts, Tensor(w))
    want = sum(wi * t.data for wi, t in zip(w, ts))
    np.testing.assert_allclose(out.data, want, atol=1e-15)


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

def test_forward_shapes_toy():
    spec = toy_spec()
    weights = init_supernet_weights(spec, seed=0)
    rng = np.random.default_rng(0)
    frames = toy_frames(spec, rng, batch=2)
    res = {v: 16 for v in VIEWS}
    out = supernet_forward(spec, weights, frames, uniform_arch_weights(spec), res,
                           with_early=True)
    assert out.z.shape == (2, spec.z_dim)
    assert out.g.shape == (2, 6)
    for eye in EYE_VIEWS:
        assert out.keypoints[eye].shape == (2, 2 * spec.n_keypoints)
    assert out.z_early.shape == (2, spec.z_dim)


def test_forward_shapes_paper_dims():
    spec = paper_spec()
    weights = init_supernet_weights(spec, seed=0)
    rng = np.random.default_rng(1)
    frames = {v: Tensor(rng.normal(size=(1, 1, 32, 32))) for v in VIEWS}
    out = supernet_forward(spec, weights, frames, uniform_arch_weights(spec),
                           {v: 32 for v in VIEWS})
    assert out.z.shape == (1, 256)
    assert out.g.shape == (1, 6)
    for eye in EYE_VIEWS:
        assert out.keypoints[eye].shape == (1, 38)


def test_missing_view_rejected():
    spec = toy_spec()
    weights = init_supernet_weights(spec, seed=0)
    frames = {"mouth": Tensor(np.zeros((1, 1, 16, 16)))}
    with pytest.raises(ShapeError, match="missing views"):
        supernet_forward(spec, weights, frames, uniform_arch_weights(spec),
                         {v: 16 for v in VIEWS})


def test_zero_frames_zero_head_gives_bias():
    spec = toy_spec()
    weights = init_supernet_weights(spec, seed=0)
    weights["head/weight"] = Tensor(np.zeros(weights["head/weight"].shape), requires_grad=True)
    bias = np.arange(spec.z_dim, dtype=float)
    weights["head/bias"] = Tensor(bias.copy(), requires_grad=True)
    frames = {v: Tensor(np.zeros((3, 1, 16, 16))) for v in VIEWS}
    out = supernet_forward(spec, weights, frames, uniform_arch_weights(spec),
                           {v: 16 for v in VIEWS})
    np.testing.assert_array_equal(out.z.data, np.tile(bias, (3, 1)))


def test_view_decoupling_bit_identical():
    spec = toy_spec()
    weights = init_supernet_weights(spec, seed=0)
    rng = np.random.default_rng(9)
    frames = toy_frames(spec, rng)
    res = {v: 16 for v in VIEWS}
    aw = uniform_arch_weights(spec)
    base = supernet_forward(spec, weights, frames, aw, res)
    frames2 = dict(frames)
    frames2["mouth"] = Tensor(frames["mouth"].data + rng.normal(size=frames["mouth"].shape))
    pert = supernet_forward(spec, weights, frames2, aw, res)
    for eye in EYE_VIEWS:
        assert base.view_feats[eye].data.tobytes() == pert.view_feats[eye].data.tobytes()
        assert base.gaze[eye].data.tobytes() == pert.gaze[eye].data.tobytes()
    assert base.view_feats["mouth"].data.tobytes() != pert.view_feats["mouth"].data.tobytes()


def test_gradients_reach_arch_logits():
    spec = toy_spec()
    weights = init_supernet_weights(spec, seed=0)
    rng = np.random.default_rng(10)
    frames = toy_frames(spec, rng)
    res = {v: 16 for v in VIEWS}
    logits = {}
    aw = {}
    with Graph() as g:
        for view, branch, i, *_ in spec.blocks():
            lo = Tensor(rng.normal(size=3), requires_grad=True)
            lc = Tensor(rng.normal(size=len(CHANNEL_SCALES)), requires_grad=True)
            logits[(view, branch, i)] = (lo, lc)
            aw[(view, branch, i)] = (
                gumbel_weights(lo, rng.gumbel(size=3), 5.0),
                gumbel_weights(lc, rng.gumbel(size=len(CHANNEL_SCALES)), 5.0),
            )
        out = supernet_forward(spec, weights, frames, aw, res)
        loss = mse(out.z, Tensor(rng.normal(size=out.z.shape)))
        loss = add(loss, mse(out.g, Tensor(rng.normal(size=out.g.shape))))
        for eye in EYE_VIEWS:
            loss = add(loss, mse(out.keypoints[eye],
                                 Tensor(rng.normal(size=out.keypoints[eye].shape))))
    backward(g, loss)
    for key, (lo, lc) in logits.items():
        assert np.abs(g.grad(lo)).max() > 0, f"dead op logits at {key}"
        assert np.abs(g.grad(lc)).max() > 0, f"dead channel logits at {key}"


# ---------------------------------------------------------------------------
# mixture consistency: one-hot mixed path vs discrete slicing path
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_one_hot_mixture_equals_discrete(seed):
    spec = toy_spec()
    weights = init_supernet_weights(spec, seed=11)
    rng = np.random.default_rng(seed)
    arch = random_arch(spec, rng)
    frames_np = {v: rng.normal(size=(2, 1, 24, 24)) for v in VIEWS}
    frames = {v: Tensor(a) for v, a in frames_np.items()}
    mixed = supernet_forward(spec, weights, frames, one_hot_arch_weights(spec, arch),
                             arch.resolutions, with_early=True)
    ref = discrete_forward(spec, weights, arch, frames_np, with_early=True)
    np.testing.assert_allclose(mixed.z.data, ref["z"], atol=1e-9)
    np.testing.assert_allclose(mixed.g.data, ref["g"], atol=1e-9)
    np.testing.assert_allclose(mixed.z_early.data, ref["z_early"], atol=1e-9)
    for eye in EYE_VIEWS:
        np.testing.assert_allclose(mixed.keypoints[eye].data, ref["keypoints"][eye],
                                   atol=1e-9)


# ---------------------------------------------------------------------------
# derivation and serialization
# ---------------------------------------------------------------------------

def _logit_maps(spec, op_fill, ch_fill, res_fill):
    opl = {k[:3]: np.array(op_fill, dtype=float)
           for k in ((v, b, i) for v, b, i, *_ in spec.blocks())}
    chl = {k: np.array(ch_fill, dtype=float) for k in opl}
    resl = {v: np.array(res_fill, dtype=float) for v in VIEWS}
    return opl, chl, resl


def test_derive_arch_dominant_logit():
    spec = toy_spec()
    n_sc = len(spec.search_space.channel_scales)
    opl, chl, resl = _logit_maps(spec, [5.0, 0.0, 0.0],
                                 [0.0] * (n_sc - 1) + [3.0], [0.0, 1.0, 0.0])
    arch = derive_arch(spec, opl, chl, resl)
    for key, ops in arch.operators.items():
        assert all(o == "fuse-mb" for o in ops)
    for key, scs in arch.channel_scales.items():
        assert all(s == 1.0 for s in scs)
    assert all(r == 16 for r in arch.resolutions.values())


def test_derive_arch_scale_tie_prefers_smaller():
    spec = toy_spec()
    n_sc = len(spec.search_space.channel_scales)
    opl, chl, resl = _logit_maps(spec, [0.0, 4.0, 0.0], [1.0] * n_sc, [1.0, 0.0, 0.0])
    arch = derive_arch(spec, opl, chl, resl)
    for scs in arch.channel_scales.values():
        assert all(s == 0.5 for s in scs)


def test_derive_arch_op_tie_prefers_cheaper():
    spec = toy_spec()
    n_sc = len(spec.search_space.channel_scales)
    opl, chl, resl = _logit_maps(spec, [2.0, 2.0, 2.0], [3.0] + [0.0] * (n_sc - 1),
                                 [1.0, 0.0, 0.0])
    arch = derive_arch(spec, opl, chl, resl)
    # skip is the cheapest candidate everywhere in this space
    for ops in arch.operators.values():
        assert all(o == "skip" for o in ops)


def test_derive_arch_resolution_index_3_is_80_paper_space():
    spec = paper_spec()
    n_sc = len(spec.search_space.channel_scales)
    res_fill = [0.0] * 7
    res_fill[3] = 2.0
    opl, chl, resl = _logit_maps(spec, [1.0, 0.0, 0.0],
                                 [1.0] + [0.0] * (n_sc - 1), res_fill)
    arch = derive_arch(spec, opl, chl, resl)
    assert all(r == 80 for r in arch.resolutions.values())


def test_arch_json_roundtrip(tmp_path):
    spec = toy_spec()
    arch = random_arch(spec, np.random.default_rng(0), name="sample")
    path = tmp_path / "arch.json"
    arch.save(path)
    back = SampledArch.load(path)
    assert back.operators == arch.operators
    assert back.channel_scales == arch.channel_scales
    assert back.resolutions == arch.resolutions
    assert back.name == "sample"


def test_validate_arch_rejects_foreign_choices():
    spec = toy_spec()
    arch = random_arch(spec, np.random.default_rng(0))
    validate_arch(spec, arch)
    bad = random_arch(spec, np.random.default_rng(0))
    bad.operators[("mouth", "latent")][0] = "attention"
    with pytest.raises(ValueError, match="operator"):
        validate_arch(spec, bad)
    bad2 = random_arch(spec, np.random.default_rng(0))
    bad2.resolutions["mouth"] = 999
    with pytest.raises(ValueError, match="resolution"):
        validate_arch(spec, bad2)


def test_search_space_invariants():
    with pytest.raises(ValueError):
        SearchSpace(channel_scales=(1.0, 0.5))
    with pytest.raises(ValueError):
        SearchSpace(channel_scales=(0.25, 1.0))
    with pytest.raises(ValueError):
        SearchSpace(resolutions=(64, 32))
