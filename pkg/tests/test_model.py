import numpy as np
import pytest

import oracles
from maxent_seg.data.synthetic import SynthConfig, synth_generate
from maxent_seg.losses import LossSpec, cross_entropy, entropy_map, error_mask
from maxent_seg.metrics import dice
from maxent_seg.model import (
    PARAM_SHAPES,
    DivergenceError,
    ModelParams,
    TrainConfig,
    forward,
    init_params,
    lambda_grid_search,
    load_checkpoint,
    loss_grad_params,
    predict,
    save_checkpoint,
    train,
)
from maxent_seg.volume import BinaryMask, Volume, threshold, zscore_normalize

SMALL = SynthConfig(dims=(32, 32, 1), lesion_count=(2, 3), lesion_radius=(3, 5), seed=1)


@pytest.fixture(scope="module")
def tiny_data():
    train_set = [(zscore_normalize(x), g) for x, g in synth_generate(SMALL, 8)]
    val_set = [(zscore_normalize(x), g) for x, g in synth_generate(SMALL, 4, start=100)]
    return train_set, val_set


def test_init_params():
    assert init_params(3) == init_params(3)
    assert init_params(3) != init_params(4)
    zero = init_params(5, init_scale=0.0)
    assert all(not np.any(zero[k]) for k in PARAM_SHAPES)
    with pytest.raises(ValueError):
        init_params(0, init_scale=-1)


def test_params_validation():
    arrays = init_params(0).arrays
    with pytest.raises(ValueError):
        ModelParams({k: v for k, v in arrays.items() if k != "conv2.b"})
    with pytest.raises(ValueError):
        ModelParams({**arrays, "conv3.b": np.array([np.inf])})


def test_zero_weights_emit_half():
    x = Volume(np.random.default_rng(0).normal(size=(7, 5, 3)))
    y = forward(init_params(0, init_scale=0.0), x)
    assert np.all(y.data == 0.5)
    assert np.all(entropy_map(y).data == 1.0)


@pytest.mark.parametrize("dims", [(5, 4, 3), (9, 7, 1), (1, 1, 1), (6, 1, 2)])
def test_forward_preserves_dims_and_range(dims):
    x = Volume(np.random.default_rng(1).normal(size=dims) * 3)
    y = forward(init_params(2), x)
    assert y.dims == dims and y.spacing == x.spacing
    assert np.all((y.data > 0) & (y.data < 1))


def test_forward_translation_equivariance():
    rng = np.random.default_rng(4)
    base = rng.normal(size=(14, 12, 6))
    p = init_params(7)
    y0 = forward(p, Volume(base)).data
    y1 = forward(p, Volume(np.roll(base, 1, axis=0))).data
    # receptive field is 5 voxels wide; compare away from every border
    np.testing.assert_allclose(y1[4:-3, 3:-3, 3:-3], y0[3:-4, 3:-3, 3:-3], rtol=0, atol=1e-14)


def test_predict_matches_forward():
    rng = np.random.default_rng(2)
    xs = [Volume(rng.normal(size=(6, 5, 1))) for _ in range(3)] + [Volume(rng.normal(size=(4, 4, 2)))]
    p = init_params(1)
    for a, b in zip(predict(p, xs, batch_size=2), xs):
        np.testing.assert_allclose(a.data, forward(p, b).data, atol=1e-15)


@pytest.mark.parametrize("reg", ["none", "meall", "meep", "kl"])
@pytest.mark.parametrize("seg", ["cross_entropy", "soft_dice"])
def test_parameter_gradients_match_finite_differences(seg, reg):
    for i in range(6):
        rng = np.random.default_rng([i, len(seg), len(reg)])
        dims = tuple(int(d) for d in rng.integers(1, 7, 3))
        p = init_params(i)
        x = Volume(rng.normal(size=dims))
        gt = BinaryMask(rng.random(dims) < 0.4)
        spec = LossSpec(seg, reg, lam=float(rng.uniform(0.2, 2.0)), reduction=["sum", "mean"][i % 2])
        wrong = error_mask(forward(p, x), gt)
        _, grads = loss_grad_params(p, x, gt, spec, wrong)
        for name in PARAM_SHAPES:
            flat = p[name].ravel()
            for j in rng.choice(flat.size, min(4, flat.size), replace=False):
                def f(v, name=name, j=j):
                    q = p.copy()
                    q.arrays[name].ravel()[j] = v
                    return loss_grad_params(q, x, gt, spec, wrong)[0]

                fd = oracles.central_difference(f, flat[j], 1e-6)
                assert oracles.relative_error(grads[name].ravel()[j], fd) < 1e-3, (name, j)


def test_meep_without_errors_equals_ce_gradients():
    rng = np.random.default_rng(9)
    x = Volume(rng.normal(size=(5, 5, 1)))
    p = init_params(3)
    gt = threshold(forward(p, x))  # the prediction is its own ground truth: nothing is wrong
    ce = loss_grad_params(p, x, gt, LossSpec())
    meep = loss_grad_params(p, x, gt, LossSpec(reg_kind="meep", lam=3.0))
    assert ce[0] == meep[0]
    assert all(np.array_equal(ce[1][k], meep[1][k]) for k in PARAM_SHAPES)


def test_confident_correct_prediction_has_small_gradients():
    gt = BinaryMask(np.zeros((4, 4, 1), bool))
    p = init_params(0, init_scale=0.0)
    p.arrays["conv3.b"][:] = -20.0
    value, grads = loss_grad_params(p, Volume(np.ones((4, 4, 1))), gt, LossSpec())
    # the probability clamp leaves -log2(1 - 1e-6) per voxel
    assert value < 1e-5
    assert max(float(np.abs(g).max()) for g in grads.values()) < 1e-6


def test_overfit_single_image():
    data = [(zscore_normalize(x), g) for x, g in synth_generate(SMALL, 1)]
    params, history = train(data, data, TrainConfig(learning_rate=0.01, epochs=200))
    assert len(history) == 200
    x, g = data[0]
    assert dice(g, threshold(forward(params, x))) > 0.9


def test_training_is_deterministic(tiny_data):
    train_set, val_set = tiny_data
    cfg = TrainConfig(loss=LossSpec(reg_kind="kl", lam=1.0), learning_rate=0.01, epochs=3, batch_size=3, seed=5)
    a = train(train_set, val_set, cfg)
    b = train(train_set, val_set, cfg)
    assert a[0] == b[0]
    assert a[1].to_csv() == b[1].to_csv()


def test_zero_learning_rate_keeps_init(tiny_data):
    train_set, _ = tiny_data
    cfg = TrainConfig(learning_rate=0.0, epochs=1, batch_size=2, seed=11)
    params, history = train(train_set, [], cfg)
    assert params == init_params(11)
    assert history.records[0].val_dice is None


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    cfg = TrainConfig(loss=LossSpec(reg_kind="meep", lam=0.5), epochs=4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_history(tiny_data):
    train_set, _ = tiny_data
    bad = [(Volume(x.data * 1e300), g) for x, g in train_set[:2]]
    with pytest.raises(DivergenceError) as info:
        train(bad, [], TrainConfig(epochs=2, init_scale=1e10))
    assert info.value.history is not None


def test_grid_search_trivial_cases(tiny_data):
    train_set, val_set = tiny_data
    cfg = TrainConfig(learning_rate=0.01, epochs=2, batch_size=4)
    res = lambda_grid_search(train_set, val_set, cfg, [0.0, 0.0])
    assert res.rows[0] == res.rows[1]
    single = lambda_grid_search(train_set, val_set, TrainConfig(loss=LossSpec(reg_kind="meep"), epochs=1), [0.7])
    assert single.best_lam == 0.7
    with pytest.raises(ValueError):
        lambda_grid_search(train_set, val_set, cfg, [])


@pytest.mark.parametrize("reg", ["meall", "meep", "kl"])
def test_grid_search_entropy_grows_with_lambda(tiny_data, reg):
    train_set, val_set = tiny_data
    cfg = TrainConfig(loss=LossSpec(reg_kind=reg), learning_rate=0.01, epochs=15, batch_size=4)
    res = lambda_grid_search(train_set, val_set, cfg, [0.0, 1.0, 10.0])
    ent = [r["mean_fg_entropy"] for r in res.rows]
    assert ent[0] < ent[1] < ent[2]
    assert set(res.rows[0]) == {"lam", "dice", "ece", "mean_fg_entropy"}


def test_checkpoint_round_trip():
    p = init_params(21)
    p.arrays["conv1.b"][:] = np.linspace(-1, 1, 8) / 3.0
    cfg = TrainConfig(loss=LossSpec(reg_kind="kl", lam=0.3), epochs=5, seed=21)
    blob = save_checkpoint(p, cfg, {"note": "x"})
    q, cfg2 = load_checkpoint(blob)
    assert q == p and cfg2 == cfg
    assert all(np.array_equal(q[k], p[k]) and q[k].tobytes() == p[k].tobytes() for k in PARAM_SHAPES)
    assert save_checkpoint(q, cfg2, {"note": "x"}) == blob
    with pytest.raises(ValueError):
        load_checkpoint(blob.replace(b"maxent-seg-checkpoint", b"other"))


def test_mean_reduction_matches_loss_module():
    rng = np.random.default_rng(0)
    x = Volume(rng.normal(size=(4, 4, 2)))
    gt = BinaryMask(rng.random((4, 4, 2)) < 0.5)
    p = init_params(0)
    value, _ = loss_grad_params(p, x, gt, LossSpec())
    assert value == cross_entropy(forward(p, x), gt, LossSpec()).value
