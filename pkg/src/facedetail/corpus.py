"""Procedural face-detail corpus.

Generates labeled (displacement, distance-field) pairs for synthetic
subjects. Wrinkles live in canonical facial slots (forehead bands, glabella,
eye corners, nasolabial arcs, cheeks, mouth, chin) shared across the
population, with per-subject jitter in placement, width, and strength, so
identity, expression, and age all remain learnable from the data. Dynamic
wrinkles carry a faint positive base, which keeps them visible enough at
neutral for identity inference, and each region couples to a small set of
blendshape indices.

Everything is a deterministic function of seeds; rebuilding a corpus from
the same seed is bit-identical on disk.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateCorpusError, InvalidInputError
from .lines import LineMap, bresenham, distance_transform
from .pngio import read_meta, save_displacement, save_distance, load_displacement, load_distance, write_meta
from .raster import DisplacementMap, JointSample, high_pass

AGE_MIN = 16.0
AGE_MAX = 70.0
N_AGE_BINS = 7
MIN_WRINKLES = 10
MAX_WRINKLES = 40
VISIBILITY_THRESHOLD = 2e-3
DEFAULT_N_E = 8

_REGION_BLENDSHAPES = {
    "forehead": (0, 1),
    "glabella": (2,),
    "eye": (3, 4),
    "temple": (3, 4),
    "nasolabial": (5,),
    "cheek": (6,),
    "mouth": (6,),
    "chin": (7,),
}
def age_bin(age: float) -> int:
    """Equal-width age group over [16, 70], clamped into 0..6."""
    if not AGE_MIN <= age <= AGE_MAX:
        raise InvalidInputError(f"age {age} outside [{AGE_MIN}, {AGE_MAX}]")
    b = int((age - AGE_MIN) / (AGE_MAX - AGE_MIN) * N_AGE_BINS)
    return min(b, N_AGE_BINS - 1)


def age_bin_center(b: int) -> float:
    if not 0 <= b < N_AGE_BINS:
        raise InvalidInputError(f"age bin {b} out of range")
    return AGE_MIN + (b + 0.5) * (AGE_MAX - AGE_MIN) / N_AGE_BINS


def key_expression(k: int, n_e: int) -> np.ndarray:
    """One-hot blendshape vector for key expression class k."""
    if not 0 <= k < n_e:
        raise InvalidInputError(f"key expression {k} out of range for n_e={n_e}")
    e = np.zeros(n_e)
    e[k] = 1.0
    return e


def _arc(p0, p1, bulge: float, n: int = 5) -> np.ndarray:
    """Polyline from p0 to p1 bowed sideways by `bulge` UV units."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    ts = np.linspace(0.0, 1.0, n)
    pts = p0[None] * (1 - ts)[:, None] + p1[None] * ts[:, None]
    d = p1 - p0
    perp = np.array([-d[1], d[0]])
    norm = np.linalg.norm(perp)
    if norm > 0:
        pts += (bulge * np.sin(np.pi * ts))[:, None] * (perp / norm)[None]
    return pts


def _mirror(points: np.ndarray) -> np.ndarray:
    out = np.array(points)
    out[:, 0] = 1.0 - out[:, 0]
    return out


def _slot_table() -> list[tuple[str, float, np.ndarray, bool, float | None]]:
    """Canonical wrinkle slots: (region, presence prob, polyline, dynamic, onset).

    Whether a slot responds to expression is a property of the slot, not of
    the subject: muscle-tied wrinkles sit at anatomically fixed places, so
    the same slots are expressive on every face that has them. Expressive
    slots are near-universal; identity slots vary a lot more in presence.
    Subjects still differ in amplitude, width, activation strength, and
    polyline jitter.

    Age works the same way: wrinkles arrive in a roughly universal order, so
    late slots carry a canonical onset age (None = present from the start).
    The onset ladder is what makes age readable from a single sample; depth
    and width at a given age stay individual.

    Layout note: neighbouring lines keep at least ~0.06 UV separation
    (4 px at the coarsest working resolution) even after per-subject
    jitter, so every line resolves as its own ridge instead of fusing
    with, or losing its crest to, a deeper neighbour. This matters most
    between lines whose depths evolve independently: a crease that
    deepens right next to a constant one steals its crest once they
    overlap, and a length count over a sweep then dips.
    """
    slots: list[tuple[str, float, np.ndarray, bool, float | None]] = []
    # always-on identity anchors
    slots.append(("forehead", 0.95, _arc((0.30, 0.015), (0.70, 0.015), -0.01), False, None))
    temple = _arc((0.04, 0.20), (0.14, 0.20), 0.006, n=3)
    slots.append(("temple", 0.95, temple, False, None))
    slots.append(("temple", 0.95, _mirror(temple), False, None))
    slots.append(("chin", 0.9, _arc((0.44, 0.86), (0.56, 0.86), 0.006, n=4), False, None))
    # expressive forehead rows
    for v0 in (0.115, 0.20, 0.285):
        slots.append(("forehead", 0.95, _arc((0.28, v0), (0.72, v0), -0.018), True, None))
    # frown pair between the brows
    slots.append(("glabella", 0.95, _arc((0.44, 0.42), (0.435, 0.52), 0.004, n=3), True, None))
    slots.append(("glabella", 0.95, _arc((0.56, 0.42), (0.565, 0.52), -0.004, n=3), True, None))
    # crow's feet: an expressive squint line between two later-onset creases,
    # laid out as near-parallel strokes so each keeps its own crest
    f1 = _arc((0.05, 0.46), (0.12, 0.44), 0.004, n=3)
    f2 = _arc((0.05, 0.52), (0.13, 0.52), 0.004, n=3)
    f3 = _arc((0.05, 0.58), (0.12, 0.60), 0.004, n=3)
    slots.append(("eye", 0.95, f1, False, 33.0))
    slots.append(("eye", 0.95, _mirror(f1), False, 33.0))
    slots.append(("eye", 0.95, f2, True, None))
    slots.append(("eye", 0.95, _mirror(f2), True, None))
    slots.append(("eye", 0.95, f3, False, 41.0))
    slots.append(("eye", 0.95, _mirror(f3), False, 41.0))
    # nasolabial arcs deepen from early adulthood
    naso = _arc((0.38, 0.56), (0.35, 0.78), 0.035)
    slots.append(("nasolabial", 0.95, naso, True, None))
    slots.append(("nasolabial", 0.95, _mirror(naso), True, None))
    # first age rung arrives in the early twenties, above the upper lip
    slots.append(("mouth", 0.95, _arc((0.46, 0.72), (0.54, 0.72), -0.006, n=3), False, 22.0))
    # mid-age ladder: forehead rung, cheek arcs, marionette folds
    slots.append(("forehead", 0.95, _arc((0.30, 0.365), (0.70, 0.365), -0.012), False, 28.0))
    cheek = _arc((0.22, 0.62), (0.28, 0.74), 0.008, n=4)
    slots.append(("cheek", 0.95, cheek, False, 46.0))
    slots.append(("cheek", 0.95, _mirror(cheek), False, 46.0))
    mario = _arc((0.29, 0.83), (0.25, 0.93), 0.006, n=3)
    slots.append(("mouth", 0.95, mario, False, 50.0))
    slots.append(("mouth", 0.95, _mirror(mario), False, 50.0))
    # expressive mouth corners
    mouth = _arc((0.42, 0.80), (0.40, 0.86), 0.006, n=3)
    slots.append(("mouth", 0.9, mouth, True, None))
    slots.append(("mouth", 0.9, _mirror(mouth), True, None))
    # late ladder: lower temple verticals and the second chin crease
    lt = _arc((0.14, 0.68), (0.15, 0.78), 0.004, n=3)
    slots.append(("cheek", 0.95, lt, False, 57.0))
    slots.append(("cheek", 0.95, _mirror(lt), False, 57.0))
    slots.append(("chin", 0.9, _arc((0.44, 0.94), (0.56, 0.94), -0.006, n=4), False, 62.0))
    return slots


_SLOTS = _slot_table()


@dataclass(frozen=True, eq=False)
class WrinkleTemplate:
    """One wrinkle: a UV polyline with width, strength, and dynamics."""

    polyline: np.ndarray
    width_sigma: float
    base_amplitude: float
    activation: np.ndarray
    age_onset: float
    age_slope: float
    region: str

    def __post_init__(self):
        pts = np.asarray(self.polyline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise InvalidInputError("polyline must be (k >= 2, 2)")
        if pts.min() < 0.0 or pts.max() > 1.0:
            raise InvalidInputError("polyline points must lie in [0, 1]^2")
        if not 1.0 <= self.width_sigma <= 3.0:
            raise InvalidInputError("width_sigma must lie in [1, 3] px")
        if self.base_amplitude < 0 or self.age_slope < 0:
            raise InvalidInputError("amplitudes and slopes must be >= 0")
        if not AGE_MIN <= self.age_onset <= AGE_MAX:
            raise InvalidInputError("age_onset must lie in [16, 70]")
        act = np.asarray(self.activation, dtype=np.float64)
        if act.ndim != 1 or act.min() < 0.0 or act.max() > 1.0:
            raise InvalidInputError("activation must be a vector in [0, 1]^n_e")
        pts.setflags(write=False)
        act.setflags(write=False)
        object.__setattr__(self, "polyline", pts)
        object.__setattr__(self, "activation", act)


@dataclass(frozen=True, eq=False)
class SyntheticSubject:
    subject_id: int
    seed: int
    n_e: int
    wrinkles: tuple[WrinkleTemplate, ...]

    def __post_init__(self):
        if not MIN_WRINKLES <= len(self.wrinkles) <= MAX_WRINKLES:
            raise DegenerateCorpusError(
                f"subject has {len(self.wrinkles)} wrinkles, expected {MIN_WRINKLES}..{MAX_WRINKLES}"
            )


def _draw_template(
    rng: np.random.Generator,
    region: str,
    polyline: np.ndarray,
    n_e: int,
    dynamic: bool,
    onset: float | None,
) -> WrinkleTemplate:
    pts = np.clip(polyline + rng.normal(0.0, 0.012, polyline.shape), 0.02, 0.98)
    activation = np.zeros(n_e)
    if dynamic:
        width_sigma = rng.uniform(1.0, 1.5)
        base_amplitude = rng.uniform(0.0, 0.08)
        bs = _REGION_BLENDSHAPES[region]
        primary = bs[rng.integers(len(bs))] % n_e
        activation[primary] = rng.uniform(0.7, 0.95)
        if rng.random() < 0.15:
            secondary = bs[rng.integers(len(bs))] if len(bs) > 1 else primary + 1
            activation[secondary % n_e] = max(activation[secondary % n_e], rng.uniform(0.2, 0.4))
    else:
        width_sigma = rng.uniform(1.0, 1.5)
        base_amplitude = rng.uniform(0.4, 0.6)
    if onset is not None:
        age_onset = float(np.clip(rng.normal(onset, 2.0), AGE_MIN, AGE_MAX - 2.0))
        age_slope = rng.uniform(0.008, 0.014)
    else:
        # always-on lines still deepen: a strictly positive slope keeps every
        # line's faint end pixels growing through a sweep instead of flickering
        age_onset = AGE_MIN
        age_slope = rng.uniform(0.005, 0.011)
    return WrinkleTemplate(pts, width_sigma, base_amplitude, activation, age_onset, age_slope, region)


def generate_subject(seed: int, n_e: int = DEFAULT_N_E) -> SyntheticSubject:
    """Deterministic subject: canonical slots with per-subject variation."""
    if n_e < 1:
        raise InvalidInputError("n_e must be >= 1")
    rng = np.random.default_rng([0x5EED, int(seed)])
    wrinkles: list[WrinkleTemplate] = []
    absent: list[tuple[str, np.ndarray, bool, float | None]] = []
    for region, prob, polyline, dynamic, onset in _SLOTS:
        if rng.random() < prob:
            wrinkles.append(_draw_template(rng, region, polyline, n_e, dynamic, onset))
        else:
            absent.append((region, polyline, dynamic, onset))
    for region, polyline, dynamic, onset in absent:
        if len(wrinkles) >= MIN_WRINKLES:
            break
        wrinkles.append(_draw_template(rng, region, polyline, n_e, dynamic, onset))
    return SyntheticSubject(subject_id=int(seed), seed=int(seed), n_e=n_e, wrinkles=tuple(wrinkles))


# -- rendering ----------------------------------------------------------------


def wrinkle_amplitude(tpl: WrinkleTemplate, e: np.ndarray, age: float) -> float:
    """(base + activation . e) * (1 + slope * years past onset); 0 if not yet active."""
    if age < tpl.age_onset:
        return 0.0
    strength = tpl.base_amplitude + float(tpl.activation @ e)
    return strength * (1.0 + tpl.age_slope * max(0.0, age - tpl.age_onset))


def active_wrinkles(subject: SyntheticSubject, age: float) -> tuple[int, ...]:
    return tuple(i for i, t in enumerate(subject.wrinkles) if age >= t.age_onset)


def _check_render_args(subject: SyntheticSubject, e: np.ndarray, age: float) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (subject.n_e,):
        raise InvalidInputError(f"expression vector must have length {subject.n_e}")
    if e.min() < 0.0 or e.max() > 1.0:
        raise InvalidInputError("expression weights must lie in [0, 1]")
    if not AGE_MIN <= age <= AGE_MAX:
        raise InvalidInputError(f"age {age} outside [{AGE_MIN}, {AGE_MAX}]")
    return e


def _segment_distance_grid(p0, p1, shape, pad):
    """Exact point-to-segment distances on a window around the segment."""
    h, w = shape
    x0 = max(int(np.floor(min(p0[0], p1[0]) - pad)), 0)
    x1 = min(int(np.ceil(max(p0[0], p1[0]) + pad)), w - 1)
    y0 = max(int(np.floor(min(p0[1], p1[1]) - pad)), 0)
    y1 = min(int(np.ceil(max(p0[1], p1[1]) + pad)), h - 1)
    if x1 < x0 or y1 < y0:
        return None
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    seg2 = dx * dx + dy * dy
    if seg2 == 0.0:
        t = np.zeros_like(gx)
    else:
        t = np.clip(((gx - p0[0]) * dx + (gy - p0[1]) * dy) / seg2, 0.0, 1.0)
    cx = p0[0] + t * dx
    cy = p0[1] + t * dy
    dist = np.hypot(gx - cx, gy - cy)
    return (slice(y0, y1 + 1), slice(x0, x1 + 1)), dist


def _polyline_px(tpl: WrinkleTemplate, resolution: int) -> np.ndarray:
    return tpl.polyline * (resolution - 1)


def render_raw_displacement(subject: SyntheticSubject, e, age: float, resolution: int = 256) -> np.ndarray:
    """Pre-high-pass displacement: negative Gaussian-profile creases."""
    e = _check_render_args(subject, e, age)
    out = np.zeros((resolution, resolution))
    for tpl in subject.wrinkles:
        amp = wrinkle_amplitude(tpl, e, age)
        if amp <= 0.0:
            continue
        pts = _polyline_px(tpl, resolution)
        pad = 5.0 * tpl.width_sigma
        acc = np.full((resolution, resolution), np.inf)
        for a, b in zip(pts[:-1], pts[1:]):
            win = _segment_distance_grid(a, b, out.shape, pad)
            if win is None:
                continue
            sl, dist = win
            acc[sl] = np.minimum(acc[sl], dist)
        mask = np.isfinite(acc)
        out[mask] -= amp * np.exp(-(acc[mask] ** 2) / (2.0 * tpl.width_sigma**2))
    return out


def render_line_map(subject: SyntheticSubject, e, age: float, resolution: int = 256) -> LineMap:
    """Ground-truth structure: rasterized polylines of visible wrinkles.

    A wrinkle contributes iff it is age-active and its current amplitude
    clears the visibility threshold, so structure labels match what the
    displacement actually shows.
    """
    e = _check_render_args(subject, e, age)
    mask = np.zeros((resolution, resolution), dtype=np.uint8)
    for tpl in subject.wrinkles:
        if wrinkle_amplitude(tpl, e, age) < VISIBILITY_THRESHOLD:
            continue
        pts = np.rint(_polyline_px(tpl, resolution)).astype(int)
        for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
            for y, x in bresenham(y0, x0, y1, x1):
                if 0 <= y < resolution and 0 <= x < resolution:
                    mask[y, x] = 1
    return LineMap(mask)


def render_details(subject: SyntheticSubject, e, age: float, resolution: int = 256) -> JointSample:
    """Labeled training pair: high-passed displacement + exact structure field."""
    raw = render_raw_displacement(subject, e, age, resolution)
    disp = high_pass(DisplacementMap(raw.astype(np.float32)))
    df = distance_transform(render_line_map(subject, e, age, resolution))
    return JointSample(disp, df)


# -- corpus on disk -----------------------------------------------------------


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    subject_id: int
    split: str
    kind: str
    age: float
    age_bin: int
    expression_class: int
    expression: tuple[float, ...]
    disp_path: str
    df_path: str


def _subject_seed(corpus_seed: int, sid: int) -> int:
    return corpus_seed * 1000003 + sid


def _format_floats(vals) -> str:
    return ",".join(repr(float(v)) for v in vals)


def _write_sample(out_dir: Path, rec_dir: Path, stem: str, sample: JointSample, meta: dict) -> tuple[str, str]:
    disp_rel = f"{rec_dir.name}/{stem}_disp.png"
    df_rel = f"{rec_dir.name}/{stem}_df.png"
    save_displacement(out_dir / disp_rel, sample.disp)
    save_distance(out_dir / df_rel, sample.df)
    write_meta(out_dir / rec_dir.name / f"{stem}_info.txt", meta)
    return disp_rel, df_rel


def build_corpus(
    out_dir,
    n_subjects: int,
    expressions_per_subject: int,
    resolution: int = 256,
    seed: int = 0,
    n_e: int = DEFAULT_N_E,
) -> dict:
    """Write a labeled corpus: per-subject PNG pairs, metadata, manifest.

    Subjects are split 90/10 into train/test by id. Every subject renders
    its key expressions first (one-hot blendshapes), then random mixtures,
    all at the subject's own age. Each subject also gets one same-subject
    pair at a different age, marked split=agepair and excluded from the
    train/test listing: age progression ground truth exists on disk but is
    withheld from training.
    """
    if n_subjects < 2:
        raise InvalidInputError("need at least 2 subjects")
    if expressions_per_subject < 1:
        raise InvalidInputError("expressions_per_subject must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_test = max(1, round(0.1 * n_subjects))
    n_key = min(expressions_per_subject, n_e)
    records: list[SampleRecord] = []
    for sid in range(n_subjects):
        subject = generate_subject(_subject_seed(seed, sid), n_e)
        srng = np.random.default_rng([seed, sid, 0xA6E])
        age = float(srng.uniform(AGE_MIN, AGE_MAX))
        split = "test" if sid >= n_subjects - n_test else "train"
        sdir = out / f"s{sid:04d}"
        sdir.mkdir(exist_ok=True)
        exprs: list[tuple[str, str, np.ndarray, int]] = []
        for k in range(n_key):
            exprs.append((f"e{k:02d}", "key", key_expression(k, n_e), k))
        for m in range(expressions_per_subject - n_key):
            vec = srng.uniform(0.0, 1.0, n_e)
            exprs.append((f"m{m:02d}", "mix", vec, int(np.argmax(vec))))
        for stem, kind, vec, cls in exprs:
            sample = render_details(subject, vec, age, resolution)
            meta = {
                "subject_id": str(sid),
                "split": split,
                "kind": kind,
                "age": repr(age),
                "age_bin": str(age_bin(age)),
                "expression_class": str(cls),
                "expression": _format_floats(vec),
            }
            disp_rel, df_rel = _write_sample(out, sdir, stem, sample, meta)
            records.append(
                SampleRecord(
                    sample_id=f"s{sid:04d}_{stem}",
                    subject_id=sid,
                    split=split,
                    kind=kind,
                    age=age,
                    age_bin=age_bin(age),
                    expression_class=cls,
                    expression=tuple(float(v) for v in vec),
                    disp_path=disp_rel,
                    df_path=df_rel,
                )
            )
        # withheld same-subject age pair at key expression 0
        target_bin = (age_bin(age) + 3) % N_AGE_BINS
        age2 = age_bin_center(target_bin)
        pair_vec = key_expression(0, n_e)
        for stem, pair_age in (("ap0", age), ("ap1", age2)):
            sample = render_details(subject, pair_vec, pair_age, resolution)
            meta = {
                "subject_id": str(sid),
                "split": "agepair",
                "kind": "agepair",
                "age": repr(float(pair_age)),
                "age_bin": str(age_bin(pair_age)),
                "expression_class": "0",
                "expression": _format_floats(pair_vec),
            }
            disp_rel, df_rel = _write_sample(out, sdir, stem, sample, meta)
            records.append(
                SampleRecord(
                    sample_id=f"s{sid:04d}_{stem}",
                    subject_id=sid,
                    split="agepair",
                    kind="agepair",
                    age=float(pair_age),
                    age_bin=age_bin(pair_age),
                    expression_class=0,
                    expression=tuple(float(v) for v in pair_vec),
                    disp_path=disp_rel,
                    df_path=df_rel,
                )
            )
    records.sort(key=lambda r: r.sample_id)
    lines = ["sample_id\tsubject_id\tsplit\tkind\tage\tage_bin\texpression_class\texpression\tdisp\tdf"]
    for r in records:
        lines.append(
            f"{r.sample_id}\t{r.subject_id}\t{r.split}\t{r.kind}\t{r.age!r}\t{r.age_bin}\t"
            f"{r.expression_class}\t{_format_floats(r.expression)}\t{r.disp_path}\t{r.df_path}"
        )
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_meta(
        out / "config.txt",
        {
            "n_subjects": str(n_subjects),
            "expressions_per_subject": str(expressions_per_subject),
            "resolution": str(resolution),
            "seed": str(seed),
            "n_e": str(n_e),
        },
    )
    n_train_test = sum(1 for r in records if r.split in ("train", "test"))
    return {
        "out_dir": str(out),
        "n_samples": n_train_test,
        "n_records": len(records),
        "train_subjects": n_subjects - n_test,
        "test_subjects": n_test,
        "manifest": str(out / "manifest.txt"),
    }


def read_manifest(corpus_dir) -> list[SampleRecord]:
    path = Path(corpus_dir) / "manifest.txt"
    if not path.exists():
        raise InvalidInputError(f"no manifest at {path}")
    lines = path.read_text(encoding="utf-8").strip().split("\n")
    records = []
    for line in lines[1:]:
        f = line.split("\t")
        if len(f) != 10:
            raise InvalidInputError("malformed manifest line")
        records.append(
            SampleRecord(
                sample_id=f[0],
                subject_id=int(f[1]),
                split=f[2],
                kind=f[3],
                age=float(f[4]),
                age_bin=int(f[5]),
                expression_class=int(f[6]),
                expression=tuple(float(v) for v in f[7].split(",")),
                disp_path=f[8],
                df_path=f[9],
            )
        )
    return records


def read_corpus_config(corpus_dir) -> dict:
    return read_meta(Path(corpus_dir) / "config.txt")


def load_sample(corpus_dir, record: SampleRecord) -> JointSample:
    base = Path(corpus_dir)
    disp = load_displacement(base / record.disp_path)
    df = load_distance(base / record.df_path)
    return JointSample(disp, df)


def corpus_digest(corpus_dir) -> str:
    """SHA-256 over every corpus file, for bit-identity checks."""
    base = Path(corpus_dir)
    h = hashlib.sha256()
    for path in sorted(p for p in base.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(base)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()
