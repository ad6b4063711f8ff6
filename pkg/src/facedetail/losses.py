"""Losses and metrics for the joint detail model.

Raster losses (feature matching, truncated distance-field, composed
reconstruction) and the multi-scale perceptual metric all come with analytic
gradients with respect to the predicted rasters; the gradients are verified
against central finite differences in the test suite. Everything here runs
in float64 and is pure (no hidden state), so losses can be evaluated from
multiple threads and critics are treated as immutable snapshots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .filters import (
    BINOMIAL5,
    blur2,
    blur2_adjoint,
    downsample2,
    downsample2_adjoint,
    grad_x,
    grad_x_adjoint,
    grad_y,
    grad_y_adjoint,
)
from .raster import DisplacementMap, DistanceField, JointSample

PROB_EPS = 1e-7
DEFAULT_DF_WEIGHT = 2.5
DEFAULT_GAN_WEIGHT = 0.05
DEFAULT_CYCLE_WEIGHT = 1.0
PERCEPTUAL_LEVELS = 5


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights combining the individual loss terms."""

    df_weight: float = DEFAULT_DF_WEIGHT
    gan_weight: float = DEFAULT_GAN_WEIGHT
    cycle_weight: float = DEFAULT_CYCLE_WEIGHT

    def __post_init__(self):
        for name in ("df_weight", "gan_weight", "cycle_weight"):
            if not np.isfinite(getattr(self, name)) or getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be finite and >= 0")


@dataclass(frozen=True)
class FeatureExtractor:
    """Multi-scale feature stack used by feature matching and the critic.

    Per scale and per raster channel the grids are: binomial-blurred
    intensity plus the absolute x / y gradients of that blurred intensity.
    Scales are built by binomial blur + factor-2 decimation, so output
    shapes depend only on the input resolution, and every grid is produced
    by bounded kernels (the whole map is Lipschitz).
    """

    scales: int = 4

    def __post_init__(self):
        if self.scales < 1:
            raise InvalidInputError("scales must be >= 1")

    @property
    def grid_types(self) -> int:
        return 3

    @property
    def grids_per_channel(self) -> int:
        return self.grid_types * self.scales


def _channel_forward(x: np.ndarray, scales: int) -> list[tuple]:
    """Per-level cache (level, blurred, gx, gy) for one raster channel."""
    levels = [x]
    for _ in range(scales - 1):
        levels.append(downsample2(blur2(levels[-1], BINOMIAL5)))
    cache = []
    for lv in levels:
        b = blur2(lv, BINOMIAL5)
        cache.append((lv, b, grad_x(b), grad_y(b)))
    return cache


def _channel_grids(cache: list[tuple]) -> list[tuple[np.ndarray, ...]]:
    return [(b, np.abs(gx), np.abs(gy)) for (_, b, gx, gy) in cache]


def _channel_vjp(cache: list[tuple], cots: list[tuple]) -> np.ndarray:
    """Pull per-level (blur, |gx|, |gy|) cotangents back to the input."""
    scales = len(cache)
    d_levels: list[np.ndarray] = []
    for (lv, b, gx, gy), (gb, gax, gay) in zip(cache, cots):
        db = gb + grad_x_adjoint(np.sign(gx) * gax) + grad_y_adjoint(np.sign(gy) * gay)
        d_levels.append(blur2_adjoint(db, BINOMIAL5))
    for i in range(scales - 1, 0, -1):
        up = downsample2_adjoint(d_levels[i], cache[i - 1][0].shape)
        d_levels[i - 1] = d_levels[i - 1] + blur2_adjoint(up, BINOMIAL5)
    return d_levels[0]


def _as_plane(values, what: str) -> np.ndarray:
    if isinstance(values, DisplacementMap):
        values = values.values
    elif isinstance(values, DistanceField):
        values = values.values
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{what} must be a 2d raster")
    return arr


def _pair_planes(pair, what: str) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pair, JointSample):
        return (
            np.asarray(pair.disp.values, dtype=np.float64),
            np.asarray(pair.df.values, dtype=np.float64),
        )
    try:
        disp, df = pair
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"{what} must be a JointSample or a (disp, df) pair") from exc
    disp = _as_plane(disp, f"{what} displacement")
    df = _as_plane(df, f"{what} distance field")
    if disp.shape != df.shape:
        raise InvalidInputError(f"{what} channels disagree in shape")
    return disp, df


# -- feature matching ---------------------------------------------------------


def _fm_core(pred, target, extractor: FeatureExtractor | None, want_grad: bool):
    fx = extractor if extractor is not None else FeatureExtractor()
    pred_planes = _pair_planes(pred, "pred")
    target_planes = _pair_planes(target, "target")
    if pred_planes[0].shape != target_planes[0].shape:
        raise InvalidInputError("pred and target resolutions differ")
    # Per-grid weight 1/(2 scales): averaging over scales and over the two
    # grid groups so a constant offset c on both channels scores exactly c.
    w = 1.0 / (2.0 * fx.scales)
    loss = 0.0
    grads = []
    for pc, tc in zip(pred_planes, target_planes):
        p_cache = _channel_forward(pc, fx.scales)
        t_cache = _channel_forward(tc, fx.scales)
        cots = []
        for p_grids, t_grids in zip(_channel_grids(p_cache), _channel_grids(t_cache)):
            level_cots = []
            for pg, tg in zip(p_grids, t_grids):
                diff = pg - tg
                loss += w * float(np.mean(np.abs(diff)))
                if want_grad:
                    level_cots.append(np.sign(diff) * (w / diff.size))
            if want_grad:
                cots.append(tuple(level_cots))
        if want_grad:
            grads.append(_channel_vjp(p_cache, cots))
    if want_grad:
        return loss, tuple(grads)
    return loss, None


def feature_matching_loss(pred, target, extractor: FeatureExtractor | None = None) -> float:
    """Multi-scale mean-abs feature difference between two raster pairs."""
    return _fm_core(pred, target, extractor, want_grad=False)[0]


def feature_matching_grad(pred, target, extractor: FeatureExtractor | None = None):
    """Loss plus analytic gradients (d_disp, d_df) wrt the predicted pair."""
    return _fm_core(pred, target, extractor, want_grad=True)


# -- truncated distance-field loss --------------------------------------------


def _df_inputs(pred, target, truncation):
    if truncation is None:
        for cand in (pred, target):
            if isinstance(cand, DistanceField):
                truncation = cand.truncation
                break
        else:
            raise InvalidInputError("truncation must be given for raw arrays")
    if not np.isfinite(truncation) or truncation <= 0:
        raise InvalidInputError("truncation must be finite and > 0")
    p = _as_plane(pred, "pred")
    t = _as_plane(target, "target")
    if p.shape != t.shape:
        raise InvalidInputError("pred and target resolutions differ")
    return p, t, float(truncation)


def distance_field_loss(pred, target, truncation: float | None = None) -> float:
    """Mean-abs difference of the fields clamped from above at ``truncation``."""
    p, t, trunc = _df_inputs(pred, target, truncation)
    return float(np.mean(np.abs(np.minimum(p, trunc) - np.minimum(t, trunc))))


def distance_field_grad(pred, target, truncation: float | None = None):
    """Loss plus the analytic gradient wrt the predicted field.

    The clamp kink takes the flat-side subgradient (zero at values >= the
    truncation), which keeps all gradient signal near the detail lines.
    """
    p, t, trunc = _df_inputs(pred, target, truncation)
    diff = np.minimum(p, trunc) - np.minimum(t, trunc)
    grad = np.sign(diff) * (p < trunc) / diff.size
    return float(np.mean(np.abs(diff))), grad


# -- composed reconstruction loss ---------------------------------------------


def _pair_truncation(pair, truncation):
    if truncation is not None:
        return float(truncation)
    if isinstance(pair, JointSample):
        return pair.df.truncation
    df = pair[1]
    if isinstance(df, DistanceField):
        return df.truncation
    raise InvalidInputError("truncation must be given for raw arrays")


def reconstruction_loss(
    pred,
    target,
    extractor: FeatureExtractor | None = None,
    weights: LossWeights | None = None,
    truncation: float | None = None,
) -> float:
    """Feature matching plus weighted truncated distance-field loss."""
    lw = weights if weights is not None else LossWeights()
    trunc = _pair_truncation(target, truncation)
    fm = feature_matching_loss(pred, target, extractor)
    df = distance_field_loss(_pair_planes(pred, "pred")[1], _pair_planes(target, "target")[1], trunc)
    return fm + lw.df_weight * df


def reconstruction_grad(
    pred,
    target,
    extractor: FeatureExtractor | None = None,
    weights: LossWeights | None = None,
    truncation: float | None = None,
):
    """Loss plus analytic gradients (d_disp, d_df) wrt the predicted pair."""
    lw = weights if weights is not None else LossWeights()
    trunc = _pair_truncation(target, truncation)
    fm, (g_disp, g_df) = feature_matching_grad(pred, target, extractor)
    df, g_trunc = distance_field_grad(
        _pair_planes(pred, "pred")[1], _pair_planes(target, "target")[1], trunc
    )
    return fm + lw.df_weight * df, (g_disp, g_df + lw.df_weight * g_trunc)


# -- perceptual metric --------------------------------------------------------


def _perceptual_core(a, b, want_grad: bool):
    xa = _as_plane(a, "a")
    xb = _as_plane(b, "b")
    if xa.shape != xb.shape:
        raise InvalidInputError("inputs must share a resolution")
    min_side = 4 * 2 ** (PERCEPTUAL_LEVELS - 1)
    if min(xa.shape) < min_side:
        raise InvalidInputError(f"perceptual metric needs at least {min_side} px per side")
    a_cache = _channel_forward(xa, PERCEPTUAL_LEVELS)
    b_cache = _channel_forward(xb, PERCEPTUAL_LEVELS)
    dist = 0.0
    cots = []
    n_types = 3
    for a_grids, b_grids in zip(_channel_grids(a_cache), _channel_grids(b_cache)):
        level_cots = []
        for ag, bg in zip(a_grids, b_grids):
            diff = ag - bg
            dist += float(np.mean(np.abs(diff))) / (n_types * PERCEPTUAL_LEVELS)
            if want_grad:
                level_cots.append(np.sign(diff) / (diff.size * n_types * PERCEPTUAL_LEVELS))
        if want_grad:
            cots.append(tuple(level_cots))
    if want_grad:
        return dist, _channel_vjp(a_cache, cots)
    return dist, None


def perceptual_detail_distance(a, b) -> float:
    """Multi-scale structural distance between two displacement maps.

    Five pyramid levels; per level the blurred intensity and the absolute
    x / y gradients are compared by mean-abs difference. Symmetric, zero
    only for identical inputs, and far more tolerant of small wrinkle
    misalignment than a per-pixel norm.
    """
    return _perceptual_core(a, b, want_grad=False)[0]


def perceptual_detail_grad(a, b):
    """Distance plus the analytic gradient wrt the first argument."""
    return _perceptual_core(a, b, want_grad=True)


# -- multi-task critic and adversarial losses ---------------------------------


def _stat_layout(extractor: FeatureExtractor) -> int:
    # per channel, per scale, per grid type: mean and mean-abs
    return 2 * extractor.grids_per_channel * 2


@dataclass
class MultiTaskCritic:
    """Logistic heads over pooled feature statistics of a raster pair.

    One head per expression class plus one per age bin; every head outputs
    a probability in the open interval (0, 1). With zero weights every head
    sits exactly at 0.5, which makes untrained behavior easy to reason
    about. Deliberately tiny: it exercises the adversarial objective
    without deep-network machinery.
    """

    n_exp: int
    n_age: int
    extractor: FeatureExtractor = field(default_factory=FeatureExtractor)
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.n_exp < 1 or self.n_age < 1:
            raise InvalidInputError("critic needs at least one head per task")
        n_heads = self.n_exp + self.n_age
        n_stats = _stat_layout(self.extractor)
        if self.weights is None:
            self.weights = np.zeros((n_heads, n_stats))
        if self.bias is None:
            self.bias = np.zeros(n_heads)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.shape != (n_heads, n_stats) or self.bias.shape != (n_heads,):
            raise InvalidInputError("critic parameter shapes do not match the head layout")

    @property
    def n_heads(self) -> int:
        return self.n_exp + self.n_age

    def _pair_caches(self, sample):
        planes = _pair_planes(sample, "sample")
        return [_channel_forward(p, self.extractor.scales) for p in planes]

    @staticmethod
    def _cache_stats(cache) -> list[float]:
        out = []
        for grids in _channel_grids(cache):
            for g in grids:
                out.append(float(np.mean(g)))
                out.append(float(np.mean(np.abs(g))))
        return out

    def stat_vector(self, sample) -> np.ndarray:
        stats: list[float] = []
        for cache in self._pair_caches(sample):
            stats.extend(self._cache_stats(cache))
        return np.array(stats)

    def logits(self, sample) -> np.ndarray:
        return self.weights @ self.stat_vector(sample) + self.bias

    def predict(self, sample) -> np.ndarray:
        """Per-head probabilities, always strictly inside (0, 1)."""
        return 1.0 / (1.0 + np.exp(-self.logits(sample)))

    def input_gradient(self, sample, logit_cotangents: np.ndarray):
        """Pull d(loss)/d(logits) back to (d_disp, d_df) of the sample."""
        cot = np.asarray(logit_cotangents, dtype=np.float64)
        if cot.shape != (self.n_heads,):
            raise InvalidInputError("cotangent length must match the head count")
        stat_cot = self.weights.T @ cot
        grads = []
        idx = 0
        for cache in self._pair_caches(sample):
            cots = []
            for grids in _channel_grids(cache):
                level_cots = []
                for g in grids:
                    c_mean = stat_cot[idx]
                    c_abs = stat_cot[idx + 1]
                    idx += 2
                    level_cots.append((c_mean + c_abs * np.sign(g)) / g.size)
                cots.append(tuple(level_cots))
            grads.append(_channel_vjp(cache, cots))
        return tuple(grads)


def _clamped_log(p: float) -> float:
    return float(np.log(np.clip(p, PROB_EPS, 1.0 - PROB_EPS)))


def _head_probs(sample, e_index: int, a_index: int, critic):
    if not 0 <= e_index < critic.n_exp:
        raise InvalidInputError(f"expression index {e_index} out of range")
    if not 0 <= a_index < critic.n_age:
        raise InvalidInputError(f"age index {a_index} out of range")
    probs = critic.predict(sample)
    return float(probs[e_index]), float(probs[critic.n_exp + a_index])


def gan_loss_fake(sample, e_index: int, a_index: int, critic) -> float:
    """log(1 - D_e) + log(1 - D_a) for the labeled heads, clamped."""
    pe, pa = _head_probs(sample, e_index, a_index, critic)
    return _clamped_log(1.0 - pe) + _clamped_log(1.0 - pa)


def gan_loss_real(sample, e_index: int, a_index: int, critic) -> float:
    """log(D_e) + log(D_a) for the labeled heads, clamped."""
    pe, pa = _head_probs(sample, e_index, a_index, critic)
    return _clamped_log(pe) + _clamped_log(pa)


def adversarial_objective(
    real,
    reconstructed,
    expression_swapped,
    aged,
    mixed,
    e_index: int,
    a_index: int,
    swap_e_index: int,
    new_a_index: int,
    critic,
) -> float:
    """Total critic objective over one real sample and its four fakes.

    The real sample and the plain reconstruction and structure mix keep the
    original labels; the expression-swapped fake is judged under the swapped
    expression, the aged fake under the new age bin.
    """
    total = gan_loss_real(real, e_index, a_index, critic)
    total += gan_loss_fake(reconstructed, e_index, a_index, critic)
    total += gan_loss_fake(expression_swapped, swap_e_index, a_index, critic)
    total += gan_loss_fake(aged, e_index, new_a_index, critic)
    total += gan_loss_fake(mixed, e_index, a_index, critic)
    return total


def generator_adversarial_loss(
    sample, e_index: int, a_index: int, critic, non_saturating: bool = True
) -> float:
    """Generator-side loss to minimize for one generated sample.

    Non-saturating form -log(D) by default; the saturating variant
    log(1 - D) is kept for reference comparisons.
    """
    pe, pa = _head_probs(sample, e_index, a_index, critic)
    if non_saturating:
        return -(_clamped_log(pe) + _clamped_log(pa))
    return _clamped_log(1.0 - pe) + _clamped_log(1.0 - pa)
