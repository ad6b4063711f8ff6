"""Latent model tests: basis algebra, autoencoding, fitting behavior,
serialization, and parameter-gradient checks.

The shared small corpus and short training run come from conftest;
closed-form constructions (exact low-rank sets, duplicated sets) provide
the independent oracles for the linear algebra, and central finite
differences provide the oracle for the trainer's gradients.
"""

import dataclasses
import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from conftest import SMALL_EXPR, SMALL_RES, SMALL_SUBJECTS

from facedetail.corpus import key_expression
from facedetail.errors import (
    DimensionMismatchError,
    InvalidInputError,
    ModelFormatError,
    TrainingError,
)
from facedetail.losses import LossWeights, distance_field_loss
from facedetail.model import (
    AGE_MAX,
    AGE_MIN,
    FitConfig,
    MODEL_MAGIC,
    TrainItem,
    TrainingSet,
    TransformModule,
    decode,
    decode_planes,
    encode,
    evaluate_model,
    expression_pairs,
    fit,
    load,
    load_training_set,
    make_training_batch,
    model_info,
    predict_age,
    predict_expression,
    save,
    training_step_losses,
    transform_age,
    transform_expression,
    transform_parameter_grads,
)
from facedetail.raster import (
    DisplacementMap,
    DistanceField,
    JointSample,
    truncation_for_width,
)

RES = SMALL_RES
N_SUBJECTS = SMALL_SUBJECTS
N_EXPR = SMALL_EXPR


@pytest.fixture(scope="module")
def corpus_dir(small_corpus_dir):
    return small_corpus_dir


@pytest.fixture(scope="module")
def train_set(small_train):
    return small_train


@pytest.fixture(scope="module")
def test_set(small_test):
    return small_test


@pytest.fixture(scope="module")
def model(small_model):
    return small_model


@pytest.fixture(scope="module")
def batch(model, train_set):
    rng = np.random.default_rng(7)
    return make_training_batch(train_set, expression_pairs(train_set), rng, 3)


def _synthetic_set(rng, n_subjects=12, res=64, rank=5):
    """Training set whose centered sample matrix has exactly `rank`
    independent directions: every plane is a linear mix of fixed patterns."""
    trunc = truncation_for_width(res)
    pd = rng.standard_normal((rank, res, res))
    pf = rng.standard_normal((rank, res, res))
    pd /= np.abs(pd).max(axis=(1, 2), keepdims=True)
    pf /= np.abs(pf).max(axis=(1, 2), keepdims=True)
    items = []
    for sid in range(n_subjects):
        age = 20.0 + 2.5 * sid
        for k in range(2):
            c = rng.uniform(-1.0, 1.0, rank)
            disp = np.tensordot(c, 0.05 * pd, axes=1)
            df = 0.5 * trunc + np.tensordot(c, 0.08 * trunc * pf, axes=1)
            sample = JointSample(
                DisplacementMap(disp), DistanceField(df, truncation=trunc)
            )
            expr = (1.0, 0.0) if k == 0 else (0.0, 1.0)
            items.append(TrainItem(subject_id=sid, expression=expr,
                                   expression_class=k, age=age, sample=sample))
    return TrainingSet(tuple(items), res, 2)


# -- basis and codes -----------------------------------------------------------


def test_basis_orthonormal(model):
    basis = np.asarray(model.basis, dtype=np.float64)
    gram = basis.T @ basis
    assert np.abs(gram - np.eye(model.d)).max() < 1e-6


def test_autoencode_random_codes(model):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        z = rng.standard_normal(model.d)
        planes = decode_planes(model, z, clamp=False)
        back = encode(model, planes)
        worst = max(worst, np.abs(back - z).max())
    assert worst < 1e-5


def test_autoencode_large_codes(model):
    rng = np.random.default_rng(1)
    for _ in range(20):
        z = rng.normal(0.0, 3.0, model.d) * np.asarray(model.latent_scale)
        back = encode(model, decode_planes(model, z, clamp=False))
        assert np.abs(back - z).max() < 1e-5 * max(1.0, np.abs(z).max())


def test_encode_is_projection_fixed_point(model, train_set):
    for it in train_set.items[:10]:
        z1 = encode(model, it.sample)
        z2 = encode(model, decode_planes(model, z1, clamp=False))
        assert np.abs(z2 - z1).max() < 1e-5


def test_encode_mean_is_zero(model):
    r = model.resolution
    mean = np.asarray(model.mean, dtype=np.float64)
    disp = mean[: r * r].reshape(r, r) * model.disp_std
    df = mean[r * r:].reshape(r, r) * model.df_std
    z = encode(model, (disp, df))
    assert np.abs(z).max() < 1e-6


def test_encode_is_linear(model, train_set):
    a = train_set.items[0].sample
    b = train_set.items[1].sample
    za, zb = encode(model, a), encode(model, b)
    mix_disp = 0.3 * a.disp.values.astype(np.float64) + 0.7 * b.disp.values
    mix_df = 0.3 * a.df.values.astype(np.float64) + 0.7 * b.df.values
    z_mix = encode(model, (mix_disp, mix_df))
    assert np.abs(z_mix - (0.3 * za + 0.7 * zb)).max() < 1e-6


def test_decode_zero_is_mean(model):
    r = model.resolution
    disp, df = decode_planes(model, np.zeros(model.d), clamp=False)
    mean = np.asarray(model.mean, dtype=np.float64)
    assert np.abs(disp - mean[: r * r].reshape(r, r) * model.disp_std).max() < 1e-9
    assert np.abs(df - mean[r * r:].reshape(r, r) * model.df_std).max() < 1e-9


def test_decode_clamps_distance_channel(model):
    rng = np.random.default_rng(2)
    for _ in range(100):
        z = rng.normal(0.0, 3.0, model.d) * np.asarray(model.latent_scale)
        sample = decode(model, z)
        assert sample.df.values.min() >= 0.0
        assert sample.df.values.max() <= model.truncation + 1e-6
        assert sample.width == model.resolution


def test_train_reconstruction_error_recorded(model, train_set):
    recorded = model.metadata["train_df_error"]
    errs = []
    for it in train_set.items:
        z = encode(model, it.sample)
        df = decode_planes(model, z)[1]
        errs.append(distance_field_loss(df, it.sample.df.values.astype(np.float64),
                                        model.truncation))
    assert np.mean(errs) <= recorded + 1e-12


def test_structure_channel_steers_mix_encoding(model, train_set):
    """Encoding a donor displacement with another subject's structure
    channel must move the decoded field toward that structure, compared
    with encoding the donor's own pair."""
    donor = train_set.items[0].sample
    keeper = train_set.items[N_EXPR * 3].sample
    target = keeper.df.values.astype(np.float64)
    z_mix = encode(model, (donor.disp, keeper.df))
    z_own = encode(model, donor)
    err_mix = distance_field_loss(decode_planes(model, z_mix)[1], target,
                                  model.truncation)
    err_own = distance_field_loss(decode_planes(model, z_own)[1], target,
                                  model.truncation)
    assert err_mix < err_own


# -- exact low-rank corpora ----------------------------------------------------


def test_rank_limited_corpus_reconstructed_exactly():
    data = _synthetic_set(np.random.default_rng(5))
    m = fit(data, FitConfig(d=8, steps=0))
    worst = 0.0
    for it in data.items:
        disp, df = decode_planes(m, encode(m, it.sample), clamp=False)
        worst = max(worst, np.abs(disp - it.sample.disp.values).max())
        worst = max(worst, np.abs(df - it.sample.df.values).max())
    assert worst < 1e-6


def test_duplicated_corpus_same_model():
    data = _synthetic_set(np.random.default_rng(6))
    doubled = TrainingSet(data.items + data.items, data.resolution, data.n_e)
    m1 = fit(data, FitConfig(d=5, steps=0))
    m2 = fit(doubled, FitConfig(d=5, steps=0))
    assert np.allclose(m1.mean, m2.mean, atol=1e-7)
    assert np.allclose(m1.basis, m2.basis, atol=5e-6)
    z = np.random.default_rng(7).standard_normal(5)
    p1 = decode_planes(m1, z, clamp=False)
    p2 = decode_planes(m2, z, clamp=False)
    assert np.abs(p1[0] - p2[0]).max() < 1e-6
    assert np.abs(p1[1] - p2[1]).max() < 1e-6


def test_rank_deficient_corpus_reduces_dimension():
    rng = np.random.default_rng(8)
    base = _synthetic_set(rng, n_subjects=2, rank=3)
    distinct = base.items
    items = distinct * 4
    data = TrainingSet(items, base.resolution, base.n_e)
    with pytest.warns(UserWarning, match="rank-deficient"):
        m = fit(data, FitConfig(d=8, steps=0))
    assert m.d == 3
    assert m.metadata["d_requested"] == 8


def test_fit_rejects_tiny_corpus():
    base = _synthetic_set(np.random.default_rng(9), n_subjects=2)
    solo = TrainingSet(base.items[:1], base.resolution, base.n_e)
    with pytest.raises(TrainingError):
        fit(solo, FitConfig(d=2, steps=0))


def test_fit_warns_when_samples_are_scarce():
    data = _synthetic_set(np.random.default_rng(10), n_subjects=4)
    with pytest.warns(UserWarning, match="expected at least"):
        fit(data, FitConfig(d=6, steps=0))


def test_fit_without_pairs_warns_and_still_builds():
    base = _synthetic_set(np.random.default_rng(12), n_subjects=8)
    items = tuple(it for it in base.items if it.expression_class == 0)
    data = TrainingSet(items, base.resolution, base.n_e)
    with pytest.warns(UserWarning, match="no same-subject expression pairs"):
        m = fit(data, FitConfig(d=3, steps=10, checkpoint_every=5))
    z = encode(m, items[0].sample)
    assert np.all(np.isfinite(z))


def test_fit_is_deterministic(tmp_path):
    data = _synthetic_set(np.random.default_rng(13))
    cfg = FitConfig(d=5, steps=10, checkpoint_every=5, seed=21)
    m1 = fit(data, cfg)
    m2 = fit(data, cfg)
    save(m1, tmp_path / "a.bin")
    save(m2, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_fit_divergence_raises():
    data = _synthetic_set(np.random.default_rng(14))
    cfg = FitConfig(d=5, steps=40, step_size=1e5, checkpoint_every=5)
    with np.errstate(all="ignore"), pytest.raises(TrainingError):
        fit(data, cfg)


# -- training losses -----------------------------------------------------------


def test_loss_total_is_component_sum(model, batch):
    out = training_step_losses(model, batch)
    cw = model.metadata["loss_weights"]["cycle_weight"]
    manual = out["L_rec"] + out["L_struct"] + cw * out["L_cyc"]
    assert abs(out["total"] - manual) < 1e-9
    assert all(np.isfinite(v) for v in out.values())


def test_zero_cycle_weight_removes_cycle_term():
    data = _synthetic_set(np.random.default_rng(15))
    m = fit(data, FitConfig(d=5, steps=0, weights=LossWeights(cycle_weight=0.0)))
    rng = np.random.default_rng(16)
    b = make_training_batch(data, expression_pairs(data), rng, 3)
    out = training_step_losses(m, b)
    assert out["total"] == pytest.approx(out["L_rec"] + out["L_struct"], abs=1e-12)


def test_degenerate_batch_structure_term(model, train_set):
    it = train_set.items[0]
    item = dataclasses.replace(
        make_training_batch(train_set, [(0, 0)], np.random.default_rng(0), 1)[0],
        partner=it.sample, partner_expression=it.expression,
        partner_class=it.expression_class, style_donor=it.sample,
        target_age=it.age,
    )
    out = training_step_losses(model, [item])
    z = encode(model, it.sample)
    df = decode_planes(model, z)[1]
    weights = LossWeights(**model.metadata["loss_weights"])
    expected = weights.df_weight * distance_field_loss(
        df, it.sample.df.values.astype(np.float64), model.truncation
    )
    assert out["L_struct"] == pytest.approx(expected, rel=1e-12)


def test_training_losses_validate_batch(model):
    with pytest.raises(InvalidInputError):
        training_step_losses(model, [])
    with pytest.raises(InvalidInputError):
        training_step_losses(model, [object()])


def test_training_curve_trends_down(model):
    curve = model.metadata["training_curve"]
    assert curve[0]["step"] == 0
    steps = model.metadata["steps"]
    settled = [c for c in curve if c["step"] >= 0.1 * steps]
    assert len(settled) >= 2
    for prev, nxt in zip(settled, settled[1:]):
        assert nxt["total"] <= 1.05 * prev["total"]


def test_parameter_gradients_match_finite_differences(model, train_set):
    """Analytic trainer gradients against central differences on the
    training objective, probed at random parameter coordinates.

    The objective is smooth in the parameters except where a raster-loss
    kink or clamp boundary falls inside the probe window; those draws are
    detected by their second difference and skipped, exactly as in the
    raster-loss gradient checks.
    """
    rng = np.random.default_rng(17)
    b = make_training_batch(train_set, expression_pairs(train_set), rng, 2)
    cw = model.metadata["loss_weights"]["cycle_weight"]

    def lift(module):
        return tuple(np.asarray(p, dtype=np.float64) for p in module.params)

    base = dataclasses.replace(
        model,
        t_exp=TransformModule(lift(model.t_exp), model.t_exp.conditioning_dim),
        t_age=TransformModule(lift(model.t_age), model.t_age.conditioning_dim),
    )

    def objective(m):
        losses, _ = transform_parameter_grads(m, b)
        return losses["L_rec"] + cw * losses["L_cyc"] + losses["L_head"]

    losses0, grads = transform_parameter_grads(base, b)
    f0 = losses0["L_rec"] + cw * losses0["L_cyc"] + losses0["L_head"]

    h = 1e-5
    checked = 0
    worst = 0.0
    for name in ("t_exp", "t_age"):
        module = getattr(base, name)
        pool = []
        for layer, g in enumerate(grads[name]):
            for idx in np.flatnonzero(np.abs(g) > 1e-7):
                pool.append((layer, int(idx)))
        order = rng.permutation(len(pool))
        done = 0
        for k in order:
            layer, idx = pool[k]
            params_hi = [p.copy() for p in module.params]
            params_lo = [p.copy() for p in module.params]
            params_hi[layer].flat[idx] += h
            params_lo[layer].flat[idx] -= h
            m_hi = dataclasses.replace(
                base, **{name: TransformModule(tuple(params_hi),
                                               module.conditioning_dim)})
            m_lo = dataclasses.replace(
                base, **{name: TransformModule(tuple(params_lo),
                                               module.conditioning_dim)})
            f_hi, f_lo = objective(m_hi), objective(m_lo)
            if abs(f_hi + f_lo - 2.0 * f0) > 1e-8 * max(1.0, abs(f0)):
                continue
            num = (f_hi - f_lo) / (2.0 * h)
            ana = grads[name][layer].flat[idx]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana)))
            done += 1
            if done == 28:
                break
        checked += done
    assert checked >= 50
    assert worst < 1e-3


# -- serialization -------------------------------------------------------------


def test_save_load_round_trip(model, tmp_path):
    path = tmp_path / "m.bin"
    save(model, path)
    loaded = load(path)
    rng = np.random.default_rng(18)
    for _ in range(5):
        z = rng.standard_normal(model.d) * np.asarray(model.latent_scale)
        a = decode_planes(model, z, clamp=False)
        c = decode_planes(loaded, z, clamp=False)
        assert np.array_equal(a[0], c[0]) and np.array_equal(a[1], c[1])
    resaved = tmp_path / "m2.bin"
    save(loaded, resaved)
    assert path.read_bytes() == resaved.read_bytes()


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a model" * 20)
    with pytest.raises(ModelFormatError):
        load(path)


def test_load_rejects_truncated_file(model, tmp_path):
    path = tmp_path / "m.bin"
    save(model, path)
    raw = path.read_bytes()
    clipped = tmp_path / "clipped.bin"
    clipped.write_bytes(raw[: len(raw) - 40])
    with pytest.raises(ModelFormatError):
        load(clipped)


def test_load_rejects_corrupted_byte(model, tmp_path):
    path = tmp_path / "m.bin"
    save(model, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ModelFormatError, match="checksum"):
        load(path)


def test_load_rejects_trailing_bytes(model, tmp_path):
    path = tmp_path / "m.bin"
    save(model, path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(ModelFormatError):
        load(path)


def test_load_rejects_wrong_version(model, tmp_path):
    path = tmp_path / "m.bin"
    save(model, path)
    raw = bytearray(path.read_bytes())
    body = raw[:-32]
    struct.pack_into("<I", body, len(MODEL_MAGIC), 999)
    path.write_bytes(bytes(body) + hashlib.sha256(bytes(body)).digest())
    with pytest.raises(ModelFormatError, match="version"):
        load(path)


def test_load_checks_expected_dimension(model, tmp_path):
    path = tmp_path / "m.bin"
    save(model, path)
    with pytest.raises(DimensionMismatchError):
        load(path, expected_d=model.d + 1)
    loaded = load(path, expected_d=model.d)
    assert loaded.d == model.d


# -- transformations and heads -------------------------------------------------


def test_transform_outputs_are_codes(model, test_set):
    z = encode(model, test_set.items[0].sample)
    e = key_expression(2, model.n_e)
    z_exp = transform_expression(model, z, e)
    z_age = transform_age(model, z, 55.0)
    assert z_exp.shape == (model.d,) and np.all(np.isfinite(z_exp))
    assert z_age.shape == (model.d,) and np.all(np.isfinite(z_age))
    assert np.array_equal(z_exp, transform_expression(model, z, e))
    assert np.array_equal(z_age, transform_age(model, z, 55.0))


def test_expression_edit_moves_head_probability(model, test_set):
    hits = 0
    trials = 0
    for it in test_set.items[::N_EXPR]:
        z = encode(model, it.sample)
        # only the first N_EXPR blendshapes appear in the corpus; heads for
        # classes never seen in training carry no signal to move
        for k in range(N_EXPR):
            if k == it.expression_class:
                continue
            target = key_expression(k, model.n_e)
            before = predict_expression(model, z)[k]
            after = predict_expression(model, transform_expression(model, z, target))[k]
            hits += after > before
            trials += 1
    assert trials >= 20
    assert hits / trials >= 0.8


def test_age_edit_tracks_age_head(model, test_set):
    hits = 0
    trials = 0
    for it in test_set.items[::N_EXPR]:
        z = encode(model, it.sample)
        for target in (20.0, 35.0, 50.0, 65.0):
            read = predict_age(model, transform_age(model, z, target))
            hits += abs(read - target) < 5.0
            trials += 1
    assert hits / trials >= 0.8


def test_self_expression_edit_is_small(model, test_set):
    ev = evaluate_model(model, test_set)
    assert ev["mean_self_expression"] < ev["median_cross_expression"]
    assert ev["mean_self_age"] < ev["median_aging"]


def test_evaluate_model_reports_cycle_and_efficacy(model, test_set):
    ev = evaluate_model(model, test_set)
    assert ev["n_items"] == len(test_set.items)
    for key in ("expression_efficacy", "cycle_ratio", "age_mean_abs_error",
                "null_edit_p10", "median_cross_expression"):
        assert np.isfinite(ev[key])
    assert 0.0 <= ev["expression_efficacy"] <= 1.0
    assert ev["cycle_ratio"] >= 0.0


# -- validation and concurrency ------------------------------------------------


def test_code_validation(model):
    with pytest.raises(InvalidInputError):
        decode(model, np.zeros(model.d + 1))
    bad = np.zeros(model.d)
    bad[0] = np.nan
    with pytest.raises(InvalidInputError):
        decode(model, bad)
    z = np.zeros(model.d)
    with pytest.raises(InvalidInputError):
        transform_expression(model, z, np.zeros(model.n_e + 1))
    with pytest.raises(InvalidInputError):
        transform_expression(model, z, np.full(model.n_e, 1.5))
    with pytest.raises(InvalidInputError):
        transform_age(model, z, AGE_MAX + 1.0)
    with pytest.raises(InvalidInputError):
        transform_age(model, z, AGE_MIN - 1.0)
    with pytest.raises(InvalidInputError):
        encode(model, (np.zeros((8, 8)), np.zeros((8, 8))))


def test_fit_config_validation():
    with pytest.raises(InvalidInputError):
        FitConfig(d=0)
    with pytest.raises(InvalidInputError):
        FitConfig(step_size=0.0)
    with pytest.raises(InvalidInputError):
        FitConfig(momentum=1.0)
    with pytest.raises(InvalidInputError):
        FitConfig(batch_size=0)
    with pytest.raises(InvalidInputError):
        FitConfig(steps=-1)
    with pytest.raises(InvalidInputError):
        FitConfig(checkpoint_every=0)


def test_model_arrays_are_immutable(model):
    with pytest.raises(ValueError):
        model.basis[0, 0] = 1.0
    with pytest.raises(ValueError):
        model.t_exp.params[0][0, 0] = 1.0


def test_concurrent_inference_matches_serial(model):
    rng = np.random.default_rng(19)
    codes = [rng.standard_normal(model.d) for _ in range(16)]
    serial = [decode(model, z).disp.values for z in codes]
    with ThreadPoolExecutor(max_workers=8) as pool:
        parallel = list(pool.map(lambda z: decode(model, z).disp.values, codes))
    for a, b in zip(serial, parallel):
        assert np.array_equal(a, b)


def test_model_info_reports_shape(model):
    info = model_info(model)
    assert info["d"] == model.d
    assert info["resolution"] == RES
    assert info["truncation"] == pytest.approx(0.05 * RES)
    assert info["metadata"]["n_train"] == (N_SUBJECTS - 4) * N_EXPR
