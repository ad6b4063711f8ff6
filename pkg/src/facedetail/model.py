"""Joint latent model over displacement / distance-field pairs.

The generator is linear: mean plus an orthonormal basis over the stacked
(displacement, distance-field) raster, fit as truncated principal
components. Editing runs through small feed-forward transformation
modules that predict latent offsets for a target expression or age, plus
an affine age head and per-expression logistic heads used for evaluation.
Training is plain seeded gradient descent with momentum, so every fit is
reproducible bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import AGE_MAX, AGE_MIN, N_AGE_BINS, age_bin, load_sample, read_corpus_config, read_manifest
from .errors import (
    DimensionMismatchError,
    InvalidInputError,
    ModelFormatError,
    TrainingError,
)
from .losses import (
    LossWeights,
    MultiTaskCritic,
    PROB_EPS,
    distance_field_loss,
    generator_adversarial_loss,
    perceptual_detail_distance,
    reconstruction_grad,
    reconstruction_loss,
)
from .raster import DisplacementMap, DistanceField, JointSample, truncation_for_width

MODEL_MAGIC = b"DETAILM1"
MODEL_VERSION = 1
AGE_SPAN = AGE_MAX - AGE_MIN
DEFAULT_LATENT_DIM = 64
FULL_LATENT_DIM = 576

# Hidden layers form a fixed bank of saturating random features: weight gain
# well above 1/sqrt(fan_in) plus random thresholds puts many units in the
# bent region of tanh, so the bank offers genuinely nonlinear directions
# rather than rescaled copies of the input.
HIDDEN_GAIN = 3.0
HIDDEN_BIAS_RANGE = 2.0

# Fixed output gain per module, part of the parametrization. Descent moves a
# module's function by (gain * latent_scale)^2 per unit of loss gradient, so
# the gain sets how coarse a fixed-step optimizer is in function space. The
# expression module starts from a closed-form fit and only needs fine
# refinement; the age module trains from scratch and needs the full stride.
EXP_OUTPUT_GAIN = 0.125
AGE_OUTPUT_GAIN = 0.0625


# -- small feed-forward blocks -------------------------------------------------


def _init_mlp(rng: np.random.Generator, dims: list[int]) -> list[np.ndarray]:
    """Layer parameters [W1, b1, W2, b2, ...].

    When there is at least one hidden layer, the output layer also sees the
    raw input through a concatenated shortcut, so its weight is shaped
    (out, hidden + in). The output layer starts at zero, which makes a
    fresh transformation module exactly the identity edit; the shortcut
    lets the linear part of an edit train at first order instead of
    waiting for the hidden path to open up.
    """
    params: list[np.ndarray] = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        if i == len(dims) - 2:
            width = fan_in + dims[0] if len(dims) > 2 else fan_in
            w = np.zeros((fan_out, width))
            b = np.zeros(fan_out)
        else:
            w = rng.normal(0.0, HIDDEN_GAIN / np.sqrt(fan_in), (fan_out, fan_in))
            b = rng.uniform(-HIDDEN_BIAS_RANGE, HIDDEN_BIAS_RANGE, fan_out)
        params.append(w)
        params.append(b)
    return params


def _mlp_forward(params, x: np.ndarray):
    """Returns (output, activation cache). tanh between layers, linear
    output over the last hidden activation concatenated with the input."""
    a = np.asarray(x, dtype=np.float64)
    cache = [a]
    n_layers = len(params) // 2
    for i in range(n_layers):
        w = np.asarray(params[2 * i], dtype=np.float64)
        b = np.asarray(params[2 * i + 1], dtype=np.float64)
        if i == n_layers - 1 and n_layers > 1:
            a = np.concatenate([a, cache[0]])
        pre = w @ a + b
        a = pre if i == n_layers - 1 else np.tanh(pre)
        cache.append(a)
    return a, cache


def _mlp_backward(params, cache, dout: np.ndarray):
    """Returns (parameter gradients in the params layout, gradient wrt input)."""
    n_layers = len(params) // 2
    grads: list = [None] * len(params)
    da = np.asarray(dout, dtype=np.float64)
    du_direct = 0.0
    for i in range(n_layers - 1, -1, -1):
        w = np.asarray(params[2 * i], dtype=np.float64)
        a_in = cache[i]
        a_out = cache[i + 1]
        dpre = da if i == n_layers - 1 else da * (1.0 - a_out * a_out)
        if i == n_layers - 1 and n_layers > 1:
            a_in = np.concatenate([a_in, cache[0]])
        grads[2 * i] = np.outer(dpre, a_in)
        grads[2 * i + 1] = dpre.copy()
        da = w.T @ dpre
        if i == n_layers - 1 and n_layers > 1:
            n_hidden = cache[i].shape[0]
            du_direct = da[n_hidden:]
            da = da[:n_hidden]
    return grads, da + du_direct


@dataclass(frozen=True, eq=False)
class TransformModule:
    """Feed-forward latent edit working in normalized code units.

    Input is (z / latent_scale, conditioning); the output offset is in the
    same normalized units and callers multiply it back by latent_scale."""

    params: tuple[np.ndarray, ...]
    conditioning_dim: int

    def __post_init__(self):
        if len(self.params) < 2 or len(self.params) % 2 != 0:
            raise InvalidInputError("transform parameters must come as (W, b) pairs")
        if self.conditioning_dim < 1:
            raise InvalidInputError("conditioning dimension must be >= 1")
        frozen = []
        for p in self.params:
            arr = np.asarray(p).copy()
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "params", tuple(frozen))

    @property
    def latent_dim(self) -> int:
        return int(self.params[-1].shape[0])

    def __call__(self, scaled_z: np.ndarray, conditioning: np.ndarray) -> np.ndarray:
        u = np.concatenate(
            [np.asarray(scaled_z, dtype=np.float64), np.asarray(conditioning, dtype=np.float64)]
        )
        out, _ = _mlp_forward(list(self.params), u)
        return out


# -- the model -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DetailModel:
    """Linear joint generator plus edit modules and attribute heads.

    mean and basis live in channel-normalized space: a raw pair is scaled
    by 1/disp_std and 1/df_std per channel and flattened displacement
    first. basis columns are orthonormal. latent_scale holds per-dimension
    training-code deviations used to condition the transformation modules.
    """

    resolution: int
    d: int
    n_e: int
    n_age_bins: int
    mean: np.ndarray
    basis: np.ndarray
    disp_std: float
    df_std: float
    latent_scale: np.ndarray
    t_exp: TransformModule
    t_age: TransformModule
    age_head: np.ndarray
    exp_heads: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = 2 * self.resolution * self.resolution
        if np.asarray(self.mean).shape != (n,):
            raise InvalidInputError(f"mean must have {n} entries")
        if np.asarray(self.basis).shape != (n, self.d):
            raise InvalidInputError(f"basis must have shape {(n, self.d)}")
        if not (self.disp_std > 0 and self.df_std > 0):
            raise InvalidInputError("channel stds must be positive")
        scale = np.asarray(self.latent_scale)
        if scale.shape != (self.d,) or np.any(scale <= 0):
            raise InvalidInputError("latent_scale must be d positive entries")
        if np.asarray(self.age_head).shape != (self.d + 1,):
            raise InvalidInputError("age head must have d+1 coefficients")
        if np.asarray(self.exp_heads).shape != (self.n_e, self.d + 1):
            raise InvalidInputError("expression heads must have shape (n_e, d+1)")
        if self.t_exp.latent_dim != self.d or self.t_age.latent_dim != self.d:
            raise DimensionMismatchError("transformation modules do not match latent dimension")
        for name in ("mean", "basis", "latent_scale", "age_head", "exp_heads"):
            arr = np.asarray(getattr(self, name)).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def truncation(self) -> float:
        return truncation_for_width(self.resolution)


def _check_code(model: DetailModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.d,):
        raise InvalidInputError(f"latent code must have length {model.d}, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("latent code contains non-finite values")
    return z


def _sample_planes(model: DetailModel, sample) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(sample, JointSample):
        disp, df = sample.disp.values, sample.df.values
    else:
        disp, df = sample
        disp = disp.values if isinstance(disp, DisplacementMap) else disp
        df = df.values if isinstance(df, DistanceField) else df
    disp = np.asarray(disp, dtype=np.float64)
    df = np.asarray(df, dtype=np.float64)
    r = model.resolution
    if disp.shape != (r, r) or df.shape != (r, r):
        raise InvalidInputError(
            f"sample resolution {disp.shape} does not match model resolution {r}"
        )
    return disp, df


def encode(model: DetailModel, sample) -> np.ndarray:
    """Project a (displacement, distance field) pair onto the latent basis.

    Accepts a JointSample or a (disp, df) pair of rasters; the two planes
    may come from different samples, which is exactly the structure-mix
    encoding path.
    """
    disp, df = _sample_planes(model, sample)
    v = np.concatenate([disp.ravel() / model.disp_std, df.ravel() / model.df_std])
    basis = np.asarray(model.basis, dtype=np.float64)
    mean = np.asarray(model.mean, dtype=np.float64)
    return basis.T @ (v - mean)


def decode_planes(model: DetailModel, z, clamp: bool = True):
    """Raw float64 (disp, df) planes for a code.

    clamp=False exposes the plain linear generator whose composition with
    encode is the identity; the public decode clamps the distance channel
    into [0, truncation] as the field type requires.
    """
    z = _check_code(model, z)
    basis = np.asarray(model.basis, dtype=np.float64)
    mean = np.asarray(model.mean, dtype=np.float64)
    v = mean + basis @ z
    r = model.resolution
    disp = v[: r * r].reshape(r, r) * model.disp_std
    df = v[r * r :].reshape(r, r) * model.df_std
    if clamp:
        df = np.clip(df, 0.0, model.truncation)
    return disp, df


def decode(model: DetailModel, z) -> JointSample:
    """Generate the sample for a latent code; distance channel clamped."""
    disp, df = decode_planes(model, z, clamp=True)
    return JointSample(DisplacementMap(disp), DistanceField(df, truncation=model.truncation))


def transform_expression(model: DetailModel, z, target_e) -> np.ndarray:
    """Latent edit toward a target blendshape activation vector.

    The module works in units of the per-dimension code deviation: it sees
    z / latent_scale and its output is scaled back up, so a unit output
    moves a dimension by one standard deviation.
    """
    z = _check_code(model, z)
    e = np.asarray(target_e, dtype=np.float64)
    if e.shape != (model.n_e,):
        raise InvalidInputError(f"target expression must have length {model.n_e}")
    if e.size and (e.min() < 0.0 or e.max() > 1.0):
        raise InvalidInputError("target expression weights must lie in [0, 1]")
    scale = np.asarray(model.latent_scale, dtype=np.float64)
    return z + scale * EXP_OUTPUT_GAIN * model.t_exp(z / scale, e)


def transform_age(model: DetailModel, z, target_age: float) -> np.ndarray:
    """Latent edit toward a target age in years; same unit convention as
    the expression edit."""
    z = _check_code(model, z)
    target_age = float(target_age)
    if not (np.isfinite(target_age) and AGE_MIN <= target_age <= AGE_MAX):
        raise InvalidInputError(f"target age {target_age} outside [{AGE_MIN}, {AGE_MAX}]")
    scale = np.asarray(model.latent_scale, dtype=np.float64)
    cond = np.array([(target_age - AGE_MIN) / AGE_SPAN])
    return z + scale * AGE_OUTPUT_GAIN * model.t_age(z / scale, cond)


def predict_age(model: DetailModel, z) -> float:
    """Affine age readout of a latent code, in years."""
    z = _check_code(model, z)
    head = np.asarray(model.age_head, dtype=np.float64)
    return float(head[:-1] @ z + head[-1])


def predict_expression(model: DetailModel, z) -> np.ndarray:
    """Per-key-expression probabilities from the logistic heads."""
    z = _check_code(model, z)
    heads = np.asarray(model.exp_heads, dtype=np.float64)
    logits = heads[:, :-1] @ z + heads[:, -1]
    return 1.0 / (1.0 + np.exp(-logits))


def model_info(model: DetailModel) -> dict:
    return {
        "version": MODEL_VERSION,
        "d": model.d,
        "resolution": model.resolution,
        "n_e": model.n_e,
        "n_age_bins": model.n_age_bins,
        "truncation": model.truncation,
        "metadata": dict(model.metadata),
    }


# -- training data -------------------------------------------------------------


@dataclass(frozen=True)
class TrainItem:
    subject_id: int
    expression: tuple[float, ...]
    expression_class: int
    age: float
    sample: JointSample
    kind: str = "key"


@dataclass(frozen=True)
class TrainingSet:
    items: tuple[TrainItem, ...]
    resolution: int
    n_e: int

    def __post_init__(self):
        if not self.items:
            raise TrainingError("training set is empty")
        for it in self.items:
            if it.sample.width != self.resolution:
                raise InvalidInputError("inconsistent sample resolution in training set")
            if len(it.expression) != self.n_e:
                raise InvalidInputError("inconsistent expression length in training set")


def load_training_set(corpus_dir, split: str = "train") -> TrainingSet:
    """Collect one split of an on-disk corpus into memory."""
    records = [r for r in read_manifest(corpus_dir) if r.split == split]
    if not records:
        raise TrainingError(f"corpus has no samples in split {split!r}")
    cfg = read_corpus_config(corpus_dir)
    items = [
        TrainItem(
            subject_id=rec.subject_id,
            expression=rec.expression,
            expression_class=rec.expression_class,
            age=rec.age,
            sample=load_sample(corpus_dir, rec),
            kind=rec.kind,
        )
        for rec in records
    ]
    return TrainingSet(tuple(items), items[0].sample.width, int(cfg["n_e"]))


def expression_pairs(data: TrainingSet) -> list[tuple[int, int]]:
    """All ordered same-subject index pairs with distinct expressions."""
    by_subject: dict[int, list[int]] = {}
    for i, it in enumerate(data.items):
        by_subject.setdefault(it.subject_id, []).append(i)
    pairs = []
    for idxs in by_subject.values():
        for i in idxs:
            for j in idxs:
                if i != j and data.items[i].expression != data.items[j].expression:
                    pairs.append((i, j))
    return pairs


@dataclass(frozen=True)
class BatchItem:
    """One training example: a same-subject expression pair, a sampled
    target age for the cycle path and a style donor for the mix path."""

    sample: JointSample
    expression: tuple[float, ...]
    expression_class: int
    age: float
    partner: JointSample
    partner_expression: tuple[float, ...]
    partner_class: int
    target_age: float
    style_donor: JointSample


def _mix_donor_index(data: TrainingSet, i: int, rng: np.random.Generator) -> int:
    """Style donor for the mix path: same expression class and the nearest
    age group, from a different subject whenever one exists."""
    it = data.items[i]
    bin_i = age_bin(it.age)
    best: list[int] = []
    best_gap = None
    for j, other in enumerate(data.items):
        if j == i or other.expression_class != it.expression_class:
            continue
        if other.subject_id == it.subject_id:
            continue
        gap = abs(age_bin(other.age) - bin_i)
        if best_gap is None or gap < best_gap:
            best, best_gap = [j], gap
        elif gap == best_gap:
            best.append(j)
    if not best:
        others = [j for j in range(len(data.items)) if j != i]
        if not others:
            return i
        return others[int(rng.integers(len(others)))]
    return best[int(rng.integers(len(best)))]


NULL_PAIR_RATE = 0.2


def make_training_batch(
    data: TrainingSet,
    pairs: list[tuple[int, int]],
    rng: np.random.Generator,
    size: int,
) -> list[BatchItem]:
    """Draw a batch of expression pairs with cycle ages and mix donors.

    A fixed fraction of draws degenerates the pair to (x, x): the pair
    reconstruction term then supervises the null edit, keeping "transform
    toward the expression the sample already has" close to the identity
    through descent rather than only at the warm start.
    """
    if not pairs:
        raise TrainingError("no same-subject expression pairs available")
    batch = []
    for _ in range(size):
        i, j = pairs[int(rng.integers(len(pairs)))]
        if rng.random() < NULL_PAIR_RATE:
            j = i
        x, xp = data.items[i], data.items[j]
        donor = data.items[_mix_donor_index(data, i, rng)]
        batch.append(
            BatchItem(
                sample=x.sample,
                expression=x.expression,
                expression_class=x.expression_class,
                age=x.age,
                partner=xp.sample,
                partner_expression=xp.expression,
                partner_class=xp.expression_class,
                target_age=float(rng.uniform(AGE_MIN, AGE_MAX)),
                style_donor=donor.sample,
            )
        )
    return batch


# -- fit configuration ---------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    d: int = DEFAULT_LATENT_DIM
    steps: int = 2000
    step_size: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    hidden: int = 128
    depth: int = 2
    head_weight: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    adversarial: bool = False
    adversarial_steps: int = 200
    critic_step_size: float = 1e-2
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.d < 1:
            raise InvalidInputError("latent dimension must be >= 1")
        if self.steps < 0 or self.adversarial_steps < 0:
            raise InvalidInputError("step counts must be >= 0")
        if self.step_size <= 0 or self.critic_step_size <= 0:
            raise InvalidInputError("step sizes must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise InvalidInputError("batch size must be >= 1")
        if self.hidden < 1 or self.depth < 1:
            raise InvalidInputError("hidden width and depth must be >= 1")
        if self.checkpoint_every < 1:
            raise InvalidInputError("checkpoint interval must be >= 1")


# -- linear basis and heads ----------------------------------------------------


def _channel_stds(data: TrainingSet) -> tuple[float, float]:
    disp = np.stack([it.sample.disp.values for it in data.items]).astype(np.float64)
    df = np.stack([it.sample.df.values for it in data.items]).astype(np.float64)
    ds, fs = float(disp.std()), float(df.std())
    if ds < 1e-12:
        warnings.warn("displacement channel has no variance; using unit scale")
        ds = 1.0
    if fs < 1e-12:
        warnings.warn("distance channel has no variance; using unit scale")
        fs = 1.0
    return ds, fs


def _stack_normalized(data: TrainingSet, disp_std: float, df_std: float) -> np.ndarray:
    rows = [
        np.concatenate(
            [
                it.sample.disp.values.astype(np.float64).ravel() / disp_std,
                it.sample.df.values.astype(np.float64).ravel() / df_std,
            ]
        )
        for it in data.items
    ]
    return np.stack(rows)


def _fit_basis(X: np.ndarray, d: int):
    """Truncated principal components via the sample Gram matrix.

    Returns (mean, basis with orthonormal columns, kept eigenvalues). Rank
    deficiency reduces the usable dimension; the caller reports it.
    """
    mu = X.mean(axis=0)
    Xc = X - mu
    gram = Xc @ Xc.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    tol = max(float(evals[0]), 0.0) * 1e-10
    rank = int(np.sum(evals > tol))
    keep = min(d, rank)
    if keep == 0:
        raise TrainingError("training rasters have no variance; cannot fit a basis")
    basis = Xc.T @ evecs[:, :keep] / np.sqrt(evals[:keep])
    # deterministic orientation: the largest-magnitude component points up
    for k in range(keep):
        col = basis[:, k]
        if col[int(np.argmax(np.abs(col)))] < 0:
            basis[:, k] = -col
    return mu, basis, evals[:keep]


def _ridge_solve(A: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    n = A.shape[1]
    return np.linalg.solve(A.T @ A + ridge * np.eye(n), A.T @ y)


def _fit_age_head(Z: np.ndarray, ages: np.ndarray) -> np.ndarray:
    """Linear age readout, ridge scaled to the per-sample feature energy."""
    A = np.hstack([Z, np.ones((len(Z), 1))])
    ridge = 1e-4 * float(np.mean(A * A))
    return _ridge_solve(A, ages, ridge * len(A))


def _fit_exp_heads(Z: np.ndarray, classes: np.ndarray, n_e: int) -> np.ndarray:
    """One-vs-rest logistic heads by ridge-damped Newton iterations."""
    A = np.hstack([Z, np.ones((len(Z), 1))])
    heads = np.zeros((n_e, A.shape[1]))
    for k in range(n_e):
        y = (classes == k).astype(np.float64)
        w = np.zeros(A.shape[1])
        for _ in range(30):
            p = 1.0 / (1.0 + np.exp(-(A @ w)))
            g = A.T @ (p - y) + 1e-4 * w
            s = np.maximum(p * (1.0 - p), 1e-6)
            H = (A * s[:, None]).T @ A + 1e-4 * np.eye(A.shape[1])
            step = np.linalg.solve(H, g)
            w = w - step
            if float(np.abs(step).max()) < 1e-10:
                break
        heads[k] = w
    return heads


# -- the training workspace ----------------------------------------------------


class _Workspace:
    """Float64 views of everything the transformation trainer touches."""

    def __init__(
        self,
        mean,
        basis,
        disp_std: float,
        df_std: float,
        latent_scale,
        age_head,
        resolution: int,
        weights: LossWeights,
        head_weight: float,
    ):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.basis = np.asarray(basis, dtype=np.float64)
        self.disp_std = float(disp_std)
        self.df_std = float(df_std)
        self.latent_scale = np.asarray(latent_scale, dtype=np.float64)
        self.age_head = np.asarray(age_head, dtype=np.float64)
        self.resolution = int(resolution)
        self.trunc = truncation_for_width(self.resolution)
        self.weights = weights
        self.head_weight = float(head_weight)
        self._codes: dict[int, np.ndarray] = {}

    @classmethod
    def from_model(cls, model: DetailModel, weights: LossWeights, head_weight: float = 1.0):
        return cls(
            model.mean,
            model.basis,
            model.disp_std,
            model.df_std,
            model.latent_scale,
            model.age_head,
            model.resolution,
            weights,
            head_weight,
        )

    def encode_planes(self, disp: np.ndarray, df: np.ndarray) -> np.ndarray:
        v = np.concatenate([disp.ravel() / self.disp_std, df.ravel() / self.df_std])
        return self.basis.T @ (v - self.mean)

    def encode_sample(self, sample: JointSample) -> np.ndarray:
        key = id(sample)
        if key not in self._codes:
            self._codes[key] = self.encode_planes(
                sample.disp.values.astype(np.float64), sample.df.values.astype(np.float64)
            )
        return self._codes[key]

    def decode(self, z):
        """Clamped planes plus the distance-channel pass-through mask."""
        v = self.mean + self.basis @ z
        r = self.resolution
        disp = v[: r * r].reshape(r, r) * self.disp_std
        df_pre = v[r * r :].reshape(r, r) * self.df_std
        inside = (df_pre > 0.0) & (df_pre < self.trunc)
        return disp, np.clip(df_pre, 0.0, self.trunc), inside

    def planes_to_code_grad(self, d_disp, d_df, mask):
        """Adjoint of the clamped decode: plane cotangents -> code cotangent."""
        dv = np.concatenate(
            [(d_disp * self.disp_std).ravel(), (d_df * mask * self.df_std).ravel()]
        )
        return self.basis.T @ dv

    def code_from_planes_grad(self, dz):
        """Adjoint of encode: code cotangent -> plane cotangents."""
        dv = self.basis @ dz
        r = self.resolution
        return (
            dv[: r * r].reshape(r, r) / self.disp_std,
            dv[r * r :].reshape(r, r) / self.df_std,
        )


def _item_losses_and_grads(
    ws: _Workspace,
    t_exp_params,
    t_age_params,
    item: BatchItem,
    mode: str = "both",
):
    """Losses for one batch item plus gradients wrt transformation params.

    Reconstruction covers the identity term and the expression pair; the
    mix term guards the structure channel; the cycle term ages the code,
    comes back and has to land on the original sample. A small age-head
    pull keeps aged codes honest about their target. Gradients come back
    already weighted: the expression module sees the pair term at weight
    one, the age module sees cycle_weight times the cycle term plus
    head_weight times the head pull.

    mode selects the work done: "losses" skips gradients, "grads" skips
    the loss terms that are constant in the module parameters (the hot
    training loop needs only the gradients), "both" computes everything.
    """
    want_losses = mode in ("losses", "both")
    want_grads = mode in ("grads", "both")
    weights = ws.weights
    scale = ws.latent_scale
    trunc = ws.trunc
    x_disp = item.sample.disp.values.astype(np.float64)
    x_df = item.sample.df.values.astype(np.float64)
    z = ws.encode_sample(item.sample)

    l_rec_1 = l_struct = 0.0
    if want_losses:
        # identity reconstruction; no transformation parameters involved
        rec_disp, rec_df, _ = ws.decode(z)
        l_rec_1 = reconstruction_loss(
            (rec_disp, rec_df), (x_disp, x_df), weights=weights, truncation=trunc
        )
        # structure mix: donor displacement encoded with this sample's field
        donor_disp = item.style_donor.disp.values.astype(np.float64)
        _, m_df, _ = ws.decode(ws.encode_planes(donor_disp, x_df))
        l_struct = weights.df_weight * distance_field_loss(m_df, x_df, trunc)

    # expression pair: transform toward the partner's blendshape weights
    e_target = np.asarray(item.partner_expression, dtype=np.float64)
    u_exp = np.concatenate([z / scale, e_target])
    out_exp, cache_exp = _mlp_forward(t_exp_params, u_exp)
    p_disp, p_df, p_mask = ws.decode(z + scale * EXP_OUTPUT_GAIN * out_exp)
    xp_disp = item.partner.disp.values.astype(np.float64)
    xp_df = item.partner.df.values.astype(np.float64)
    if want_grads:
        l_rec_2, (g_disp, g_df) = reconstruction_grad(
            (p_disp, p_df), (xp_disp, xp_df), weights=weights, truncation=trunc
        )
        dz2 = ws.planes_to_code_grad(g_disp, g_df, p_mask)
        exp_grads, _ = _mlp_backward(t_exp_params, cache_exp, dz2 * scale * EXP_OUTPUT_GAIN)
    else:
        l_rec_2 = reconstruction_loss(
            (p_disp, p_df), (xp_disp, xp_df), weights=weights, truncation=trunc
        )
        exp_grads = None

    # age cycle: to the sampled target age and back to the original
    a_norm = (item.age - AGE_MIN) / AGE_SPAN
    t_norm = (item.target_age - AGE_MIN) / AGE_SPAN
    u_age1 = np.concatenate([z / scale, [t_norm]])
    out_a1, cache_a1 = _mlp_forward(t_age_params, u_age1)
    z_aged = z + scale * AGE_OUTPUT_GAIN * out_a1
    a_disp, a_df, a_mask = ws.decode(z_aged)
    z_back_in = ws.encode_planes(a_disp, a_df)
    u_age2 = np.concatenate([z_back_in / scale, [a_norm]])
    out_a2, cache_a2 = _mlp_forward(t_age_params, u_age2)
    z_back = z_back_in + scale * AGE_OUTPUT_GAIN * out_a2
    b_disp, b_df, b_mask = ws.decode(z_back)

    head = ws.age_head
    age_est = float(head[:-1] @ z_aged + head[-1])
    l_head = ((age_est - item.target_age) / AGE_SPAN) ** 2

    if want_grads:
        l_cyc, (g_disp, g_df) = reconstruction_grad(
            (b_disp, b_df), (x_disp, x_df), weights=weights, truncation=trunc
        )
        dz_back = weights.cycle_weight * ws.planes_to_code_grad(g_disp, g_df, b_mask)
        age_grads, d_u2 = _mlp_backward(t_age_params, cache_a2, dz_back * scale * AGE_OUTPUT_GAIN)
        # the re-encoded code feeds both the skip path and the module input
        dz_back_in = dz_back + d_u2[: len(z)] / scale
        gd, gf = ws.code_from_planes_grad(dz_back_in)
        dz_aged = ws.planes_to_code_grad(gd, gf, a_mask)
        dz_aged = dz_aged + (
            ws.head_weight * 2.0 * (age_est - item.target_age) / (AGE_SPAN**2)
        ) * head[:-1]
        g_first, _ = _mlp_backward(t_age_params, cache_a1, dz_aged * scale * AGE_OUTPUT_GAIN)
        age_grads = [a + b for a, b in zip(age_grads, g_first)]
    else:
        l_cyc = reconstruction_loss(
            (b_disp, b_df), (x_disp, x_df), weights=weights, truncation=trunc
        )
        age_grads = None

    losses = {
        "L_rec": l_rec_1 + l_rec_2,
        "L_struct": l_struct,
        "L_cyc": l_cyc,
        "L_head": l_head,
    }
    return losses, exp_grads, age_grads


def _mean_losses(ws, t_exp, t_age, batch) -> dict:
    sums = {"L_rec": 0.0, "L_struct": 0.0, "L_cyc": 0.0, "L_head": 0.0}
    for item in batch:
        losses, _, _ = _item_losses_and_grads(ws, t_exp, t_age, item, "losses")
        for k in sums:
            sums[k] += losses[k]
    n = len(batch)
    out = {k: v / n for k, v in sums.items()}
    out["total"] = out["L_rec"] + out["L_struct"] + ws.weights.cycle_weight * out["L_cyc"]
    return out


def _model_weights(model: DetailModel) -> LossWeights:
    stored = model.metadata.get("loss_weights")
    if isinstance(stored, dict):
        return LossWeights(**stored)
    return LossWeights()


def training_step_losses(
    model: DetailModel,
    batch: list[BatchItem],
    critic: MultiTaskCritic | None = None,
) -> dict:
    """Mean loss breakdown over a batch; pure evaluation, no updates.

    total = L_rec + L_struct + cycle_weight * L_cyc, plus gan_weight *
    L_GAN when a critic is supplied.
    """
    if not batch:
        raise InvalidInputError("batch is empty")
    for item in batch:
        if not isinstance(item, BatchItem):
            raise InvalidInputError("batch entries must be BatchItem records")
    weights = _model_weights(model)
    ws = _Workspace.from_model(model, weights)
    t_exp = [np.asarray(p, dtype=np.float64) for p in model.t_exp.params]
    t_age = [np.asarray(p, dtype=np.float64) for p in model.t_age.params]
    out = _mean_losses(ws, t_exp, t_age, batch)
    del out["L_head"]
    if critic is not None:
        gan = sum(_generator_gan_loss(ws, t_exp, t_age, item, critic) for item in batch)
        out["L_GAN"] = gan / len(batch)
        out["total"] = out["total"] + weights.gan_weight * out["L_GAN"]
    return out


def _fake_sample(disp, df, trunc) -> JointSample:
    return JointSample(DisplacementMap(disp), DistanceField(df, truncation=trunc))


def _generator_gan_loss(ws: _Workspace, t_exp, t_age, item: BatchItem, critic) -> float:
    """Generator-side adversarial loss over the four generated routes."""
    trunc = ws.trunc
    scale = ws.latent_scale
    z = ws.encode_sample(item.sample)
    e_target = np.asarray(item.partner_expression, dtype=np.float64)
    out_exp, _ = _mlp_forward(t_exp, np.concatenate([z / scale, e_target]))
    t_norm = (item.target_age - AGE_MIN) / AGE_SPAN
    out_age, _ = _mlp_forward(t_age, np.concatenate([z / scale, [t_norm]]))
    x_df = item.sample.df.values.astype(np.float64)
    donor_disp = item.style_donor.disp.values.astype(np.float64)
    rec = ws.decode(z)
    swapped = ws.decode(z + scale * EXP_OUTPUT_GAIN * out_exp)
    aged = ws.decode(z + scale * AGE_OUTPUT_GAIN * out_age)
    mixed = ws.decode(ws.encode_planes(donor_disp, x_df))
    e_idx, a_idx = item.expression_class, age_bin(item.age)
    total = generator_adversarial_loss(_fake_sample(rec[0], rec[1], trunc), e_idx, a_idx, critic)
    total += generator_adversarial_loss(
        _fake_sample(swapped[0], swapped[1], trunc), item.partner_class, a_idx, critic
    )
    total += generator_adversarial_loss(
        _fake_sample(aged[0], aged[1], trunc), e_idx, age_bin(item.target_age), critic
    )
    total += generator_adversarial_loss(_fake_sample(mixed[0], mixed[1], trunc), e_idx, a_idx, critic)
    return total


def transform_parameter_grads(model: DetailModel, batch: list[BatchItem], head_weight: float = 1.0):
    """Mean losses and analytic parameter gradients for both transformation
    modules over a batch, exactly as the trainer applies them.

    The gradients differentiate L_rec + cycle_weight * L_cyc +
    head_weight * L_head with respect to the module parameters; the
    expression module only influences the pair half of L_rec.
    """
    if not batch:
        raise InvalidInputError("batch is empty")
    weights = _model_weights(model)
    ws = _Workspace.from_model(model, weights, head_weight=head_weight)
    t_exp = [np.asarray(p, dtype=np.float64) for p in model.t_exp.params]
    t_age = [np.asarray(p, dtype=np.float64) for p in model.t_age.params]
    n = len(batch)
    sums = {"L_rec": 0.0, "L_struct": 0.0, "L_cyc": 0.0, "L_head": 0.0}
    exp_acc = [np.zeros_like(p) for p in t_exp]
    age_acc = [np.zeros_like(p) for p in t_age]
    for item in batch:
        losses, g_exp, g_age = _item_losses_and_grads(ws, t_exp, t_age, item, "both")
        for k in sums:
            sums[k] += losses[k]
        for a, g in zip(exp_acc, g_exp):
            a += g
        for a, g in zip(age_acc, g_age):
            a += g
    losses = {k: v / n for k, v in sums.items()}
    grads = {"t_exp": [g / n for g in exp_acc], "t_age": [g / n for g in age_acc]}
    return losses, grads


# -- transformation training ---------------------------------------------------


def _check_progress(curve: list[dict]) -> None:
    first = curve[0]["total"]
    latest = curve[-1]["total"]
    if not np.isfinite(latest):
        raise TrainingError("training objective became non-finite")
    if latest > 50.0 * (first + 1e-9):
        raise TrainingError("training diverged: objective grew far past its start")


def _warm_start_expression(
    t_exp,
    Z,
    latent_scale,
    data,
    pairs,
    ridge_hidden: float = 1.0,
    ridge_linear: float = 1e-4,
    output_gain: float = 1.0,
    null_weight: float = 4.0,
):
    """Closed-form fit of the output layer of the expression module.

    Regresses scaled latent deltas of same-subject expression pairs onto the
    module's own last-layer features (hidden activations plus the shortcut
    input), so descent starts from the best map this layer can express over
    the frozen earlier layers instead of from the identity. The hidden
    random-feature block gets a heavier ridge than the shortcut block: the
    linear part of the map generalizes from few pairs, the feature bank
    needs more data to earn its weights.

    Every item also contributes a null row (its own expression, zero
    delta) at `null_weight` times the weight of a pair row. The weighted
    fit lands near the map B(target - expression read from z), which
    anchors "edit toward the expression the code already has" at the
    identity instead of letting the regression extrapolate there.
    """
    phi_rows = []
    targets = []
    weights = []
    n_layers = len(t_exp) // 2
    rows = list(pairs) + [(i, i) for i in range(len(Z))]
    for i, j in rows:
        u = np.concatenate([Z[i] / latent_scale, data.items[j].expression])
        a = u
        for k in range(n_layers - 1):
            a = np.tanh(t_exp[2 * k] @ a + t_exp[2 * k + 1])
        phi = np.concatenate([a, u]) if n_layers > 1 else a
        phi_rows.append(np.concatenate([phi, [1.0]]))
        targets.append((Z[j] - Z[i]) / (latent_scale * output_gain))
        weights.append(1.0 if i != j else null_weight)
    sw = np.sqrt(np.asarray(weights))[:, None]
    phi_m = np.stack(phi_rows) * sw
    t_m = np.stack(targets) * sw
    n = float(np.sum(weights))
    n_in = Z.shape[1] + data.n_e
    if n_layers > 1:
        n_hidden = phi_m.shape[1] - 1 - n_in
        penalty = np.concatenate(
            [np.full(n_hidden, ridge_hidden), np.full(n_in, ridge_linear), [1e-8]]
        )
    else:
        penalty = np.concatenate([np.full(n_in, ridge_linear), [1e-8]])
    gram = phi_m.T @ phi_m / n + np.diag(penalty)
    theta = np.linalg.solve(gram, phi_m.T @ t_m / n)
    t_exp[-2][:, :] = theta[:-1].T
    t_exp[-1][:] = theta[-1]


def _warm_start_age(t_age, Z, latent_scale, ages, age_head, output_gain: float = 1.0):
    """Closed-form aging map along the population age trajectory.

    The corpus has no same-subject age pairs to regress on, so aging is
    defined population-wise: beta = Cov(z, a)/Var(a) gives the code
    direction that follows age across subjects. The map moves a code by
    beta * (target - age read by the affine head), which keeps the
    identity residual fixed, makes the head read back the target, and
    round-trips to within head error. Beta is rescaled so the head reads
    exactly one year per year along it; forward and return trips then
    cancel up to the head residual. Written into the shortcut block of
    the output layer; descent then polishes the cycle and the parts age
    does not explain linearly.
    """
    ages = np.asarray(ages, dtype=np.float64)
    var = ages.var()
    if var <= 0.0:
        return
    beta = (Z - Z.mean(axis=0)).T @ (ages - ages.mean()) / (len(ages) * var)
    d = Z.shape[1]
    head_w = np.asarray(age_head[:-1], dtype=np.float64)
    gain = float(head_w @ beta)
    if abs(gain) > 0.1:
        beta = beta / gain
    col = beta / (latent_scale * output_gain)
    w_last = t_age[-2]
    n_hidden = w_last.shape[1] - (d + 1) if len(t_age) > 2 else 0
    w_last[:, n_hidden : n_hidden + d] = -np.outer(col, head_w * latent_scale)
    w_last[:, n_hidden + d] = col * AGE_SPAN
    t_age[-1][:] = col * (AGE_MIN - float(age_head[-1]))


def _train_transforms(ws, t_exp, t_age, data, pairs, config, probe) -> list[dict]:
    """Seeded momentum descent on both transformation modules.

    The parameters returned are the running average of the last half of
    the trajectory, which removes the oscillation a fixed step size leaves
    around a median-type objective; checkpoints past that point report the
    averaged parameters, i.e. the model one would extract at that step.
    """
    rng = np.random.default_rng([config.seed, 0xB0])
    v_exp = [np.zeros_like(p) for p in t_exp]
    v_age = [np.zeros_like(p) for p in t_age]
    curve = [{"step": 0, **_mean_losses(ws, t_exp, t_age, probe)}]
    avg_start = config.steps - config.steps // 2
    avg_exp = [np.zeros_like(p) for p in t_exp]
    avg_age = [np.zeros_like(p) for p in t_age]
    n_avg = 0
    for step in range(1, config.steps + 1):
        batch = make_training_batch(data, pairs, rng, config.batch_size)
        g_exp = [np.zeros_like(p) for p in t_exp]
        g_age = [np.zeros_like(p) for p in t_age]
        for item in batch:
            _, ge, ga = _item_losses_and_grads(ws, t_exp, t_age, item, "grads")
            for a, g in zip(g_exp, ge):
                a += g
            for a, g in zip(g_age, ga):
                a += g
        inv = 1.0 / len(batch)
        for p, v, g in zip(t_exp, v_exp, g_exp):
            v *= config.momentum
            v -= config.step_size * inv * g
            p += v
        for p, v, g in zip(t_age, v_age, g_age):
            v *= config.momentum
            v -= config.step_size * inv * g
            p += v
        if step > avg_start:
            for a, p in zip(avg_exp, t_exp):
                a += p
            for a, p in zip(avg_age, t_age):
                a += p
            n_avg += 1
        if step % config.checkpoint_every == 0 or step == config.steps:
            if n_avg:
                pe = [a / n_avg for a in avg_exp]
                pa = [a / n_avg for a in avg_age]
            else:
                pe, pa = t_exp, t_age
            curve.append({"step": step, **_mean_losses(ws, pe, pa, probe)})
            _check_progress(curve)
    if n_avg:
        for p, a in zip(t_exp, avg_exp):
            p[:] = a / n_avg
        for p, a in zip(t_age, avg_age):
            p[:] = a / n_avg
    return curve


def _critic_pair_grad(critic, sample, e_idx: int, a_idx: int, real: bool):
    """Gradient of the labeled log terms wrt critic weights and biases."""
    s = critic.stat_vector(sample)
    logits = critic.weights @ s + critic.bias
    p = 1.0 / (1.0 + np.exp(-logits))
    dW = np.zeros_like(critic.weights)
    db = np.zeros_like(critic.bias)
    for h in (e_idx, critic.n_exp + a_idx):
        if not PROB_EPS < p[h] < 1.0 - PROB_EPS:
            continue
        g = (1.0 - p[h]) if real else -p[h]
        dW[h] += g * s
        db[h] += g
    return dW, db


def _gan_cotangents(critic, sample, e_idx: int, a_idx: int) -> np.ndarray:
    """d(-log D_e - log D_a)/d(logits) for the generator update."""
    probs = critic.predict(sample)
    cot = np.zeros(critic.n_heads)
    for h in (e_idx, critic.n_exp + a_idx):
        if PROB_EPS < probs[h] < 1.0 - PROB_EPS:
            cot[h] = -(1.0 - probs[h])
    return cot


def _train_adversarial(ws, t_exp, t_age, data, pairs, config, probe):
    """Alternating critic ascent and generator descent on the full objective.

    The critic judges (sample, expression, age-group) pairings; the
    generator keeps its reconstruction gradients and adds the pulled-back
    non-saturating adversarial term for the expression-swapped and aged
    outputs, the only routes the transformation modules influence.
    """
    critic = MultiTaskCritic(n_exp=data.n_e, n_age=N_AGE_BINS)
    rng = np.random.default_rng([config.seed, 0xAD])
    v_exp = [np.zeros_like(p) for p in t_exp]
    v_age = [np.zeros_like(p) for p in t_age]
    gw = ws.weights.gan_weight
    curve: list[dict] = []

    def checkpoint(step):
        losses = _mean_losses(ws, t_exp, t_age, probe)
        gan = sum(_generator_gan_loss(ws, t_exp, t_age, it, critic) for it in probe) / len(probe)
        losses["L_GAN"] = gan
        losses["total"] = losses["total"] + gw * gan
        curve.append({"step": step, **losses})

    checkpoint(0)
    for step in range(1, config.adversarial_steps + 1):
        batch = make_training_batch(data, pairs, rng, config.batch_size)

        # critic ascent over the real sample and all four generated routes
        dW = np.zeros_like(critic.weights)
        db = np.zeros_like(critic.bias)
        staged = []
        for item in batch:
            z = ws.encode_sample(item.sample)
            scale = ws.latent_scale
            e_target = np.asarray(item.partner_expression, dtype=np.float64)
            out_exp, cache_exp = _mlp_forward(t_exp, np.concatenate([z / scale, e_target]))
            t_norm = (item.target_age - AGE_MIN) / AGE_SPAN
            out_age, cache_age = _mlp_forward(t_age, np.concatenate([z / scale, [t_norm]]))
            swapped = ws.decode(z + scale * EXP_OUTPUT_GAIN * out_exp)
            aged = ws.decode(z + scale * AGE_OUTPUT_GAIN * out_age)
            rec = ws.decode(z)
            mixed = ws.decode(
                ws.encode_planes(
                    item.style_donor.disp.values.astype(np.float64),
                    item.sample.df.values.astype(np.float64),
                )
            )
            e_idx, a_idx = item.expression_class, age_bin(item.age)
            new_a = age_bin(item.target_age)
            trunc = ws.trunc
            swap_s = _fake_sample(swapped[0], swapped[1], trunc)
            aged_s = _fake_sample(aged[0], aged[1], trunc)
            for smp, ei, ai, real in (
                (item.sample, e_idx, a_idx, True),
                (_fake_sample(rec[0], rec[1], trunc), e_idx, a_idx, False),
                (swap_s, item.partner_class, a_idx, False),
                (aged_s, e_idx, new_a, False),
                (_fake_sample(mixed[0], mixed[1], trunc), e_idx, a_idx, False),
            ):
                w, b = _critic_pair_grad(critic, smp, ei, ai, real)
                dW += w
                db += b
            staged.append(
                (item, swap_s, aged_s, cache_exp, cache_age, swapped[2], aged[2],
                 item.partner_class, a_idx, e_idx, new_a)
            )
        critic.weights = critic.weights + config.critic_step_size * dW / len(batch)
        critic.bias = critic.bias + config.critic_step_size * db / len(batch)

        # generator descent: reconstruction gradients plus the pulled-back
        # adversarial term
        g_exp = [np.zeros_like(p) for p in t_exp]
        g_age = [np.zeros_like(p) for p in t_age]
        for (item, swap_s, aged_s, cache_exp, cache_age, swap_mask, aged_mask,
             swap_e, a_idx, e_idx, new_a) in staged:
            _, ge, ga = _item_losses_and_grads(ws, t_exp, t_age, item, "grads")
            for a, g in zip(g_exp, ge):
                a += g
            for a, g in zip(g_age, ga):
                a += g
            cot = _gan_cotangents(critic, swap_s, swap_e, a_idx)
            d_disp, d_df = critic.input_gradient(swap_s, cot)
            dz = gw * ws.planes_to_code_grad(d_disp, d_df, swap_mask)
            adv, _ = _mlp_backward(t_exp, cache_exp, dz * ws.latent_scale * EXP_OUTPUT_GAIN)
            for a, g in zip(g_exp, adv):
                a += g
            cot = _gan_cotangents(critic, aged_s, e_idx, new_a)
            d_disp, d_df = critic.input_gradient(aged_s, cot)
            dz = gw * ws.planes_to_code_grad(d_disp, d_df, aged_mask)
            adv, _ = _mlp_backward(t_age, cache_age, dz * ws.latent_scale * AGE_OUTPUT_GAIN)
            for a, g in zip(g_age, adv):
                a += g
        inv = 1.0 / len(batch)
        for p, v, g in zip(t_exp, v_exp, g_exp):
            v *= config.momentum
            v -= config.step_size * inv * g
            p += v
        for p, v, g in zip(t_age, v_age, g_age):
            v *= config.momentum
            v -= config.step_size * inv * g
            p += v
        if step % config.checkpoint_every == 0 or step == config.adversarial_steps:
            checkpoint(step)
            _check_progress(curve)
    return curve, critic


# -- fitting entry point -------------------------------------------------------


def _resolve_training_data(data, validation):
    if isinstance(data, TrainingSet):
        return data, validation
    corpus_dir = Path(data)
    train = load_training_set(corpus_dir, "train")
    if validation is None:
        try:
            validation = load_training_set(corpus_dir, "val")
        except TrainingError:
            validation = None
    return train, validation


def fit(data, config: FitConfig | None = None, validation: TrainingSet | None = None) -> DetailModel:
    """Fit the full model on a corpus directory or an in-memory TrainingSet.

    Basis and heads come from closed-form fits; the transformation modules
    train by seeded momentum descent with progress recorded on a fixed
    probe batch, drawn from the validation split when one exists. The
    returned model carries float32 parameters so save/load round trips
    are bit-exact.
    """
    config = config or FitConfig()
    train, val = _resolve_training_data(data, validation)
    n = len(train.items)
    if n < 2:
        raise TrainingError("need at least two training samples")
    if n < 2 * config.d:
        warnings.warn(
            f"only {n} samples for latent dimension {config.d}; expected at least {2 * config.d}"
        )
    disp_std, df_std = _channel_stds(train)
    X = _stack_normalized(train, disp_std, df_std)
    mu, basis, evals = _fit_basis(X, config.d)
    d_eff = basis.shape[1]
    if d_eff < config.d:
        warnings.warn(f"rank-deficient corpus: latent dimension reduced {config.d} -> {d_eff}")

    Z = (X - mu) @ basis
    latent_scale = np.maximum(Z.std(axis=0), 1e-8)
    ages = np.array([it.age for it in train.items], dtype=np.float64)
    classes = np.array([it.expression_class for it in train.items])
    age_head = _fit_age_head(Z, ages)
    exp_heads = _fit_exp_heads(Z, classes, train.n_e)

    init_rng = np.random.default_rng([config.seed, 0x11])
    dims_exp = [d_eff + train.n_e] + [config.hidden] * (config.depth - 1) + [d_eff]
    dims_age = [d_eff + 1] + [config.hidden] * (config.depth - 1) + [d_eff]
    t_exp = _init_mlp(init_rng, dims_exp)
    t_age = _init_mlp(init_rng, dims_age)

    ws = _Workspace(
        mu, basis, disp_std, df_std, latent_scale, age_head,
        train.resolution, config.weights, config.head_weight,
    )
    pairs = expression_pairs(train)
    curve: list[dict] = []
    adv_curve: list[dict] = []
    if not pairs:
        warnings.warn("no same-subject expression pairs; transformation modules stay at identity")
    else:
        probe_source = train
        if val is not None and expression_pairs(val):
            probe_source = val
        probe_pairs = expression_pairs(probe_source)
        probe_rng = np.random.default_rng([config.seed, 0xFA])
        probe = make_training_batch(
            probe_source, probe_pairs, probe_rng, max(1, min(16, len(probe_pairs)))
        )
        if config.steps > 0:
            _warm_start_expression(
                t_exp, Z, latent_scale, train, pairs, output_gain=EXP_OUTPUT_GAIN
            )
            _warm_start_age(
                t_age, Z, latent_scale, ages, age_head, output_gain=AGE_OUTPUT_GAIN
            )
            curve = _train_transforms(ws, t_exp, t_age, train, pairs, config, probe)
        if config.adversarial and config.adversarial_steps > 0:
            adv_curve, _ = _train_adversarial(ws, t_exp, t_age, train, pairs, config, probe)

    def f32(a):
        return np.asarray(a, dtype=np.float32)

    model = DetailModel(
        resolution=train.resolution,
        d=d_eff,
        n_e=train.n_e,
        n_age_bins=N_AGE_BINS,
        mean=f32(mu),
        basis=f32(basis),
        disp_std=float(disp_std),
        df_std=float(df_std),
        latent_scale=f32(latent_scale),
        t_exp=TransformModule(tuple(f32(p) for p in t_exp), conditioning_dim=train.n_e),
        t_age=TransformModule(tuple(f32(p) for p in t_age), conditioning_dim=1),
        age_head=f32(age_head),
        exp_heads=f32(exp_heads),
        metadata={
            "loss_weights": {
                "df_weight": config.weights.df_weight,
                "gan_weight": config.weights.gan_weight,
                "cycle_weight": config.weights.cycle_weight,
            },
            "seed": config.seed,
            "steps": config.steps,
            "n_train": n,
            "d_requested": config.d,
            "eigenvalues": [float(v) for v in evals],
            "training_curve": curve,
            "adversarial_curve": adv_curve,
        },
    )
    df_errs = [
        distance_field_loss(
            decode_planes(model, encode(model, it.sample))[1],
            it.sample.df.values,
            model.truncation,
        )
        for it in train.items
    ]
    model.metadata["train_df_error"] = float(np.mean(df_errs))
    return model


# -- serialization -------------------------------------------------------------


def _named_blocks(model: DetailModel) -> list[tuple[str, np.ndarray]]:
    blocks = [
        ("mean", model.mean),
        ("basis", model.basis),
        ("latent_scale", model.latent_scale),
        ("age_head", model.age_head),
        ("exp_heads", model.exp_heads),
    ]
    for i, p in enumerate(model.t_exp.params):
        blocks.append((f"t_exp.{i}", p))
    for i, p in enumerate(model.t_age.params):
        blocks.append((f"t_age.{i}", p))
    return blocks


def save(model: DetailModel, path) -> None:
    """Write the model as magic, fixed header, named float32 blocks, JSON
    metadata and a trailing content checksum."""
    out = bytearray()
    out += MODEL_MAGIC
    out += struct.pack("<5I", MODEL_VERSION, model.resolution, model.d, model.n_e, model.n_age_bins)
    out += struct.pack("<2d", model.disp_std, model.df_std)
    blocks = _named_blocks(model)
    out += struct.pack("<I", len(blocks))
    for name, arr in blocks:
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
        out += struct.pack("<H", len(raw))
        out += raw
        out += struct.pack("<B", a.ndim)
        out += struct.pack(f"<{a.ndim}I", *a.shape)
        out += a.astype("<f4", copy=False).tobytes()
    meta = json.dumps(
        {
            "metadata": model.metadata,
            "conditioning": [model.t_exp.conditioning_dim, model.t_age.conditioning_dim],
        },
        sort_keys=True,
    ).encode("utf-8")
    out += struct.pack("<I", len(meta))
    out += meta
    out += hashlib.sha256(bytes(out)).digest()
    Path(path).write_bytes(bytes(out))


def load(path, expected_d: int | None = None) -> DetailModel:
    """Read a model back; content is verified against the stored checksum."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MODEL_MAGIC) or raw[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError("not a detail model file")
    if len(raw) < len(MODEL_MAGIC) + 32:
        raise ModelFormatError("model file is truncated")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError("model file is corrupt: checksum mismatch")
    try:
        off = len(MODEL_MAGIC)
        version, resolution, d, n_e, n_age_bins = struct.unpack_from("<5I", body, off)
        off += 20
        if version != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {version}")
        disp_std, df_std = struct.unpack_from("<2d", body, off)
        off += 16
        (n_blocks,) = struct.unpack_from("<I", body, off)
        off += 4
        blocks: dict[str, np.ndarray] = {}
        for _ in range(n_blocks):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            blocks[name] = arr.astype(np.float32)
        (meta_len,) = struct.unpack_from("<I", body, off)
        off += 4
        meta = json.loads(body[off : off + meta_len].decode("utf-8"))
        off += meta_len
        if off != len(body):
            raise ModelFormatError("model file has trailing or missing bytes")
    except ModelFormatError:
        raise
    except (struct.error, IndexError, UnicodeDecodeError, ValueError) as exc:
        raise ModelFormatError(f"model file is malformed: {exc}") from exc
    if expected_d is not None and expected_d != d:
        raise DimensionMismatchError(f"model has latent dimension {d}, expected {expected_d}")

    def take(name):
        if name not in blocks:
            raise ModelFormatError(f"model file is missing block {name!r}")
        return blocks[name]

    def module(prefix, cond_dim):
        params = []
        i = 0
        while f"{prefix}.{i}" in blocks:
            params.append(blocks[f"{prefix}.{i}"])
            i += 1
        if not params:
            raise ModelFormatError(f"model file is missing block {prefix!r}")
        return TransformModule(tuple(params), conditioning_dim=cond_dim)

    cond = meta.get("conditioning", [n_e, 1])
    return DetailModel(
        resolution=int(resolution),
        d=int(d),
        n_e=int(n_e),
        n_age_bins=int(n_age_bins),
        mean=take("mean"),
        basis=take("basis"),
        disp_std=float(disp_std),
        df_std=float(df_std),
        latent_scale=take("latent_scale"),
        t_exp=module("t_exp", int(cond[0])),
        t_age=module("t_age", int(cond[1])),
        age_head=take("age_head"),
        exp_heads=take("exp_heads"),
        metadata=meta.get("metadata", {}),
    )


# -- evaluation ----------------------------------------------------------------


def _sample_distance(a, b) -> float:
    """Perceptual distance between two samples, taken on the displacement maps."""
    return perceptual_detail_distance(a.disp, b.disp)


def evaluate_model(model: DetailModel, data: TrainingSet, seed: int = 0) -> dict:
    """Edit-quality statistics on a held-out split.

    Covers expression transfer against same-subject ground truth, identity
    preservation under self edits, age tracking through the affine head
    and the age round trip. All sampling is seeded.
    """
    rng = np.random.default_rng([seed, 0xE7])
    items = data.items
    codes = [encode(model, it.sample) for it in items]
    recons = [decode(model, z) for z in codes]

    pairs = expression_pairs(data)
    exp_hits = 0
    cross = []
    for i, j in pairs:
        z_t = transform_expression(model, codes[i], items[j].expression)
        edited = decode(model, z_t)
        d_edit = _sample_distance(edited, items[j].sample)
        d_base = _sample_distance(recons[i], items[j].sample)
        if d_edit < d_base:
            exp_hits += 1
        cross.append(_sample_distance(recons[i], recons[j]))
    median_cross = float(np.median(cross)) if cross else float("nan")

    self_exp = []
    for i, it in enumerate(items):
        z_s = transform_expression(model, codes[i], it.expression)
        self_exp.append(_sample_distance(decode(model, z_s), recons[i]))

    inter = []
    if len({it.subject_id for it in items}) > 1:
        for _ in range(min(200, 4 * len(items))):
            i, j = int(rng.integers(len(items))), int(rng.integers(len(items)))
            if items[i].subject_id != items[j].subject_id:
                inter.append(_sample_distance(recons[i], recons[j]))
    inter_p10 = float(np.percentile(inter, 10)) if inter else float("nan")

    age_abs_err = []
    cyc_num = []
    cyc_den = []
    self_age = []
    for i, it in enumerate(items):
        target = float(rng.uniform(AGE_MIN, AGE_MAX))
        z_aged = transform_age(model, codes[i], target)
        aged = decode(model, z_aged)
        age_abs_err.append(abs(predict_age(model, z_aged) - target))
        z_back = transform_age(model, z_aged, it.age)
        cyc_num.append(_sample_distance(decode(model, z_back), recons[i]))
        cyc_den.append(_sample_distance(aged, recons[i]))
        z_self = transform_age(model, codes[i], it.age)
        self_age.append(_sample_distance(decode(model, z_self), recons[i]))

    mean_den = float(np.mean(cyc_den))
    return {
        "n_items": len(items),
        "n_expression_pairs": len(pairs),
        "expression_efficacy": exp_hits / len(pairs) if pairs else float("nan"),
        "median_cross_expression": median_cross,
        "mean_self_expression": float(np.mean(self_exp)),
        "null_edit_p10": inter_p10,
        "null_edit_mean": float(np.mean(self_exp)),
        "age_mean_abs_error": float(np.mean(age_abs_err)),
        "age_within_5y": float(np.mean([e < 5.0 for e in age_abs_err])),
        "cycle_mean": float(np.mean(cyc_num)),
        "aging_mean": mean_den,
        "cycle_ratio": float(np.mean(cyc_num)) / mean_den if mean_den > 0 else float("nan"),
        "median_aging": float(np.median(cyc_den)),
        "mean_self_age": float(np.mean(self_age)),
    }
