import numpy as np
import pytest

from ncup.sparsify import SparseGrid, forward_map
from ncup.tensor import DimensionError, Tensor
from ncup.upsampler import (
    InterpNet,
    InterpNetConfig,
    NCUPModel,
    WeightsNet,
    WeightsNetConfig,
    audit_param_counts,
    bilinear_baseline,
    estimate_weights,
    interpolate,
    load_model,
    ncup_upsample,
    save_model,
)

from .oracles import bilinear_1d, cell_argmax_scan, nconv_loops, relative_error


def _randomize(model: NCUPModel, seed: int, spread: float = 1.0):
    rng = np.random.default_rng(seed)
    for p in model.parameters().values():
        p.data = p.data + spread * rng.normal(size=p.shape)
    return model


def _prime(model: NCUPModel, h: int = 6, w: int = 6):
    """Populate batch-norm statistics with one training-mode pass."""
    rng = np.random.default_rng(0)
    model.train()
    ncup_upsample(rng.normal(size=(1, 2, h, w)), rng.uniform(size=(1, 3, h, w)), model)
    return model.eval()


# ---------------------------------------------------------------- weights net
def test_sigmoid_head_codomain(rng):
    net = WeightsNet(WeightsNetConfig(), rng)
    w = estimate_weights(rng.normal(0, 50, size=(2, 2, 5, 5)), rng.uniform(size=(2, 3, 5, 5)), net)
    assert w.shape == (2, 2, 5, 5)
    assert np.all((w.data > 0) & (w.data < 1))


def test_softplus_head_codomain(rng):
    net = WeightsNet(WeightsNetConfig(final_activation="softplus"), rng)
    w = estimate_weights(rng.normal(size=(1, 2, 5, 5)), rng.uniform(size=(1, 3, 5, 5)), net)
    assert np.all(w.data > 0)


def test_weights_net_parameter_count(rng):
    # 5*16*9+16 + 2*16 + 16*8*9+8 + 2*8 + 8*2+2
    assert sum(p.data.size for p in WeightsNet(WeightsNetConfig(), rng).parameters().values()) == 1962
    assert WeightsNetConfig.preset("features").ch1 == 64
    assert WeightsNetConfig(ch1=12, ch2=8).is_default is False


def test_no_batch_norm_needs_no_statistics(rng):
    net = WeightsNet(WeightsNetConfig(batch_norm=False), rng)
    net.training = False
    w = estimate_weights(rng.normal(size=(1, 2, 4, 4)), rng.uniform(size=(1, 3, 4, 4)), net)
    assert np.all(np.isfinite(w.data))


def test_weights_spatial_mismatch(rng):
    net = WeightsNet(WeightsNetConfig(), rng)
    with pytest.raises(DimensionError):
        estimate_weights(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 4, 5)), net)


# --------------------------------------------------------------- interpolation
def _oracle_unet(data, conf, net: InterpNet):
    """Default architecture rebuilt from loop-level pieces."""
    eff = {k: np.logaddexp(0, v.raw.data)[0] for k, v in net.kernels.items()}
    d, c = data, conf
    d, c = nconv_loops(d[None], c[None], eff["enc0.0"])
    d, c = nconv_loops(d[None], c[None], eff["enc0.1"])
    skip = (d, c)
    pd, pc = cell_argmax_scan(d, c, 2)
    pd, pc = nconv_loops(pd[None], pc[None], eff["enc1.0"])
    pd, pc = nconv_loops(pd[None], pc[None], eff["enc1.1"])
    ud, uc = np.repeat(np.repeat(pd, 2, 0), 2, 1), np.repeat(np.repeat(pc, 2, 0), 2, 1)
    d, c = nconv_loops(np.stack([skip[0], ud]), np.stack([skip[1], uc]), eff["fuse0"])
    return nconv_loops(d[None], c[None], eff["head"])


@pytest.mark.parametrize("init", ["uniform", "gaussian"])
def test_interpolation_matches_composed_oracle(rng, init):
    net = InterpNet(InterpNetConfig(), 2, init=init)
    x = rng.normal(size=(1, 1, 4, 4))
    grid = forward_map(Tensor(x), Tensor(rng.uniform(0.2, 1, size=x.shape)), 2)
    d, c = interpolate(grid, net)
    wd, wc = _oracle_unet(grid.data.data[0, 0], grid.conf.data[0, 0], net)
    assert np.max(np.abs(d.data[0, 0] - wd)) < 1e-10
    assert np.max(np.abs(c.data[0, 0] - wc)) < 1e-10


def test_dense_unit_confidence_is_fixed_point(rng):
    net = InterpNet(InterpNetConfig(), 1, init="uniform")
    x = rng.normal(size=(1, 1, 48, 48))
    grid = forward_map(Tensor(x), Tensor(np.ones_like(x)), 1)
    _, c = interpolate(grid, net)
    # away from the zero-confidence padding every layer sees full windows
    np.testing.assert_allclose(c.data[0, 0, 18:-18, 18:-18], 1.0, atol=1e-12)


@pytest.mark.parametrize("init", ["uniform", "gaussian"])
def test_constant_grid_gives_constant(rng, init):
    lr = np.full((1, 1, 6, 6), -3.25)
    grid = forward_map(Tensor(lr), Tensor(rng.uniform(0.01, 1, size=lr.shape)), 4)
    d, _ = interpolate(grid, InterpNet(InterpNetConfig(), 4, init=init))
    assert np.max(np.abs(d.data + 3.25)) < 1e-6


def test_random_grid_dense_and_bounded(rng):
    lr = rng.normal(size=(1, 1, 6, 6))
    grid = forward_map(Tensor(lr), Tensor(np.ones_like(lr)), 4)
    d, c = interpolate(grid, InterpNet(InterpNetConfig(), 4, init="uniform"))
    assert np.all(c.data > 0)
    assert lr.min() - 1e-6 <= d.data.min() and d.data.max() <= lr.max() + 1e-6


def test_empty_grid_warns():
    z = Tensor(np.zeros((1, 1, 8, 8)))
    with pytest.warns(RuntimeWarning):
        d, c = interpolate(SparseGrid(z, z, 0), InterpNet(InterpNetConfig()))
    assert np.all(c.data == 0)


def test_interp_parameter_counts():
    assert InterpNetConfig().param_count() == 159
    assert InterpNetConfig.from_preset("paper-224").param_count() == 225
    assert InterpNetConfig(downsamplings=2).param_count() <= 300
    for cfg in (InterpNetConfig(), InterpNetConfig.from_preset("paper-224"), InterpNetConfig(downsamplings=2)):
        assert sum(p.data.size for p in InterpNet(cfg).parameters().values()) == cfg.param_count()


# ------------------------------------------------------------------- pipeline
def test_zero_flow_in_zero_out(rng):
    model = _prime(_randomize(NCUPModel(4), 1))
    out = ncup_upsample(np.zeros((1, 2, 6, 6)), rng.uniform(size=(1, 3, 6, 6)), model)
    assert out.shape == (1, 2, 24, 24)
    assert np.max(np.abs(out.data)) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_constant_flow_preserved_for_any_parameters(rng, seed):
    model = _prime(_randomize(NCUPModel(4), seed, spread=2.0))
    flow = np.empty((2, 2, 6, 6))
    flow[:, 0], flow[:, 1] = 2.0, -1.0
    out = ncup_upsample(flow, rng.uniform(size=(2, 3, 6, 6)), model).data
    assert np.max(np.abs(out[:, 0] - 2.0)) < 1e-6
    assert np.max(np.abs(out[:, 1] + 1.0)) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_output_within_input_range(seed):
    rng = np.random.default_rng(seed)
    model = _prime(_randomize(NCUPModel(4), seed))
    flow = rng.normal(0, 3, size=(1, 2, 6, 6))
    out = ncup_upsample(flow, rng.uniform(size=(1, 3, 6, 6)), model).data
    for ch in range(2):
        assert flow[:, ch].min() - 1e-6 <= out[:, ch].min()
        assert out[:, ch].max() <= flow[:, ch].max() + 1e-6


@pytest.mark.parametrize("s", [2, 4, 8])
def test_full_densification(rng, s):
    model = _prime(NCUPModel(s))
    _, conf, _ = ncup_upsample(rng.normal(size=(1, 2, 4, 4)), rng.uniform(size=(1, 3, 4, 4)), model, return_conf=True)
    assert np.all(conf.data > 0)


def test_untrained_vs_bilinear_shapes(rng):
    yy, xx = np.mgrid[0:8, 0:8]
    flow = np.stack([np.sin(xx / 3.0), np.cos(yy / 4.0)])[None]
    model = _prime(NCUPModel(4), 8, 8)
    a = ncup_upsample(flow, rng.uniform(size=(1, 3, 8, 8)), model).data
    b = bilinear_baseline(flow, 4).data
    assert a.shape == b.shape == (1, 2, 32, 32)
    assert np.all(np.isfinite(a)) and np.all(np.isfinite(b))


def test_high_resolution_guidance_is_rejected(rng):
    with pytest.raises(DimensionError, match="downsample"):
        ncup_upsample(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 16, 16)), NCUPModel(4))
    with pytest.raises(DimensionError):
        ncup_upsample(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 5, 5)), NCUPModel(4))


def test_gradients_reach_every_parameter(rng):
    model = NCUPModel(4)
    out = ncup_upsample(rng.normal(0, 4, size=(2, 2, 6, 6)), rng.uniform(size=(2, 3, 6, 6)), model)
    target = rng.normal(0, 4, size=out.shape)
    ((out - target) * (out - target)).mean().backward()
    grads = {k: p.grad for k, p in model.parameters().items()}
    assert all(g is not None and np.all(np.isfinite(g)) for g in grads.values())
    assert any(np.max(np.abs(g)) > 0 for k, g in grads.items() if k.startswith("weights."))


@pytest.mark.parametrize("seed", range(5))
def test_pipeline_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = NCUPModel(2, seed=seed)
    _randomize(model, seed, spread=0.3)
    flow = rng.uniform(-1, 1, size=(2, 2, 4, 4))
    guide = rng.uniform(-1, 1, size=(2, 3, 4, 4))
    weight = rng.normal(size=(2, 2, 8, 8))

    def loss():
        return (ncup_upsample(flow, guide, model) * weight).sum()

    for p in model.parameters().values():
        p.grad = None
    loss().backward()
    h = 1e-5
    analytic, numeric = [], []
    for p in model.parameters().values():
        for _ in range(4):
            i = tuple(rng.integers(0, n) for n in p.shape)
            old = p.data[i]
            p.data[i] = old + h
            fp = loss().item()
            p.data[i] = old - h
            fm = loss().item()
            p.data[i] = old
            analytic.append(p.grad[i])
            numeric.append((fp - fm) / (2 * h))
    # relative to the largest gradient: batch norm makes the first conv bias gradient exactly zero
    assert relative_error(np.array(analytic), np.array(numeric)) < 1e-5


def test_total_parameter_accounting():
    counts = NCUPModel(4).param_counts()
    assert counts == {"weights_net": 1962, "interp_net": 159, "total": 2121}


def test_checkpoint_round_trip(tmp_path):
    model = _prime(_randomize(NCUPModel(4, interp_cfg=InterpNetConfig.from_preset("paper-224"), seed=3), 7))
    save_model(model, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt")
    assert back.scale == 4 and back.interp_cfg == model.interp_cfg and back.weights_cfg == model.weights_cfg
    for (k, a), (k2, b) in zip(model.parameters().items(), back.parameters().items()):
        assert k == k2
        np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(back.weights_net.bn1.running_var, model.weights_net.bn1.running_var)
    save_model(back, tmp_path / "again.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_audit_detects_consistent_model():
    audit = audit_param_counts(NCUPModel(4))
    assert audit["weights_net"] == audit["expected_weights_net"] == 1962
    assert audit["interp_net"] == audit["expected_interp_net"] == 159


# ---------------------------------------------------------------- bilinear
def test_bilinear_scale_one_identity(rng):
    f = rng.normal(size=(1, 2, 3, 3))
    np.testing.assert_array_equal(bilinear_baseline(f, 1).data, f)


def test_bilinear_constant_without_rescale():
    f = np.full((1, 2, 3, 4), 1.5)
    np.testing.assert_allclose(bilinear_baseline(f, 4, rescale=False).data, 1.5, atol=1e-15)
    np.testing.assert_allclose(bilinear_baseline(f, 4).data, 6.0, atol=1e-14)


def test_bilinear_ramp_closed_form():
    ramp = np.arange(5.0) * 0.7 - 1
    f = np.stack([np.broadcast_to(ramp, (3, 5)), np.broadcast_to(ramp[:3, None], (3, 5))])[None]
    out = bilinear_baseline(f, 2, rescale=False).data
    want_u = np.array([bilinear_1d(ramp, 2, i) for i in range(10)])
    want_v = np.array([bilinear_1d(ramp[:3], 2, i) for i in range(6)])
    assert np.max(np.abs(out[0, 0] - want_u[None, :])) < 1e-12
    assert np.max(np.abs(out[0, 1] - want_v[:, None])) < 1e-12
