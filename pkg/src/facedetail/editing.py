"""High-level editing sessions over a trained detail model.

An EditSession wraps one sample and one model and exposes wrinkle-line
editing (strokes refined into the latent space), expression editing, age
progression, and blendshape animation. Every mutation appends a plain
structured record to the session history; replaying the history from the
original sample reproduces the current latent code bit-exactly, which is
what undo and session import rely on.

Sessions are single-owner: callers must not mutate one session from two
threads. Any number of sessions may share one model concurrently, since
models are immutable after fitting.
"""

from __future__ import annotations

import base64
import json
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidEditError, InvalidInputError
from .lines import LineEdit, LineMap, apply_line_edit, distance_transform, extract_lines
from .losses import LossWeights, distance_field_loss, distance_field_grad
from .model import (
    AGE_MAX,
    AGE_MIN,
    DetailModel,
    decode,
    decode_planes,
    encode,
    predict_age,
    transform_age,
    transform_expression,
)
from .pngio import (
    _meta_path,
    load_displacement,
    load_distance,
    save_displacement,
    save_distance,
    write_meta,
)
from .raster import DisplacementMap, DistanceField, JointSample

SESSION_DOC_KIND = "facedetail-session"
SESSION_DOC_VERSION = 1
DEFAULT_REFINE_STEPS = 50
DEFAULT_REFINE_STEP_SIZE = 0.1
DEFAULT_PRIOR_WEIGHT = 0.1


@dataclass
class EditSession:
    """One editable sample: original pair, current code, replayable history.

    `age` starts at the opening annotation (or the age head's reading) and
    follows age edits, so later operations can pass consistent labels.
    `lines` is the current wrinkle-line map. Every line edit starts from
    `base_lines`, the lines extracted from the original displacement, and
    applies its own strokes; a later edit replaces rather than extends an
    earlier one, so a cumulative edit carries all of its strokes itself.
    """

    model: DetailModel
    original: JointSample
    base_lines: LineMap
    base_code: np.ndarray
    code: np.ndarray
    age: float
    base_age: float
    lines: LineMap
    history: list = field(default_factory=list)

    @property
    def resolution(self) -> int:
        return self.original.width


def open_session(model: DetailModel, sample, age: float | None = None) -> EditSession:
    """Start an edit session from a JointSample or a bare displacement map.

    The session's structure channel is always derived from the
    displacement itself: extracted lines converted to a distance field.
    A JointSample's provided field channel is validated but replaced by
    the derived one, so the base code and every line edit agree on the
    same canonical pair. Without an age annotation the model's age head
    supplies one.
    """
    if isinstance(sample, JointSample):
        disp = sample.disp
    elif isinstance(sample, DisplacementMap):
        disp = sample
    else:
        raise InvalidInputError("session needs a JointSample or DisplacementMap")
    if disp.width != model.resolution:
        raise InvalidInputError(
            f"sample resolution {disp.width} does not match model resolution "
            f"{model.resolution}"
        )
    lines = extract_lines(disp)
    canonical = JointSample(disp, distance_transform(lines))
    z = encode(model, canonical)
    if age is None:
        age = float(np.clip(predict_age(model, z), AGE_MIN, AGE_MAX))
    else:
        age = float(age)
        if not (np.isfinite(age) and AGE_MIN <= age <= AGE_MAX):
            raise InvalidInputError(f"age {age} outside [{AGE_MIN}, {AGE_MAX}]")
    return EditSession(
        model=model,
        original=canonical,
        base_lines=lines,
        base_code=z.copy(),
        code=z,
        age=age,
        base_age=age,
        lines=lines,
    )


def _model_df_weight(model: DetailModel) -> float:
    stored = model.metadata.get("loss_weights")
    if isinstance(stored, dict):
        return LossWeights(**stored).df_weight
    return LossWeights().df_weight


def refine_code(
    model: DetailModel,
    z0: np.ndarray,
    target_df: DistanceField,
    steps: int = DEFAULT_REFINE_STEPS,
    step_size: float = DEFAULT_REFINE_STEP_SIZE,
    prior_weight: float = DEFAULT_PRIOR_WEIGHT,
) -> np.ndarray:
    """Descend on the edited-field objective, keeping the best iterate.

    The objective is df_weight * field distance between the decoded
    (clamped) structure channel and the target field, plus
    prior_weight * ||z - z0||^2 so the result stays near the projection
    seed. The field term is piecewise linear, so a fixed step can
    oscillate around its floor; returning the best visited iterate keeps
    the run deterministic and never worse than the seed.
    """
    if steps < 0:
        raise InvalidInputError("refinement steps must be >= 0")
    df_weight = _model_df_weight(model)
    trunc = model.truncation
    target = target_df.values.astype(np.float64)
    basis = np.asarray(model.basis, dtype=np.float64)
    r = model.resolution
    basis_df = basis[r * r :, :]

    def objective_and_grad(z):
        _, df_pre = decode_planes(model, z, clamp=False)
        clamped = np.clip(df_pre, 0.0, trunc)
        l_df, g = distance_field_grad(clamped, target, trunc)
        g = g * (df_pre > 0.0)
        grad = df_weight * model.df_std * (basis_df.T @ g.ravel())
        grad = grad + 2.0 * prior_weight * (z - z0)
        f = df_weight * l_df + prior_weight * float((z - z0) @ (z - z0))
        return f, grad

    z = np.asarray(z0, dtype=np.float64).copy()
    best_f, grad = objective_and_grad(z)
    best_z = z.copy()
    for _ in range(steps):
        z = z - step_size * grad
        f, grad = objective_and_grad(z)
        if f < best_f:
            best_f, best_z = f, z.copy()
    return best_z


def _apply_lines_record(session: EditSession, record: dict) -> np.ndarray:
    edit = LineEdit.from_obj(record["edit"])
    lines = apply_line_edit(session.lines, edit)
    target = distance_transform(lines)
    z0 = encode(session.model, (session.original.disp, target))
    z = refine_code(
        session.model,
        z0,
        target,
        steps=int(record["refine_steps"]),
        step_size=float(record["step_size"]),
        prior_weight=float(record["prior_weight"]),
    )
    session.lines = lines
    return z


def _apply_record(session: EditSession, record: dict) -> np.ndarray:
    op = record.get("op")
    if op == "lines":
        return _apply_lines_record(session, record)
    if op == "expression":
        return transform_expression(
            session.model, session.code, np.asarray(record["weights"], dtype=np.float64)
        )
    if op == "age":
        target = float(record["age"])
        z = transform_age(session.model, session.code, target)
        session.age = target
        return z
    raise InvalidEditError(f"unknown edit record {op!r}")


def edit_lines(
    session: EditSession,
    edit: LineEdit,
    refine_steps: int = DEFAULT_REFINE_STEPS,
    step_size: float = DEFAULT_REFINE_STEP_SIZE,
    prior_weight: float = DEFAULT_PRIOR_WEIGHT,
) -> tuple[JointSample, np.ndarray]:
    """Apply strokes to the current line map and refine a code for them.

    The edited lines become a distance field; the original displacement is
    re-encoded with that field as the projection seed, and the refinement
    descends toward field consistency while the prior holds identity.
    """
    record = {
        "op": "lines",
        "edit": edit.to_obj(),
        "refine_steps": int(refine_steps),
        "step_size": float(step_size),
        "prior_weight": float(prior_weight),
    }
    z = _apply_lines_record(session, record)
    session.code = z
    session.history.append(record)
    return decode(session.model, z), z


def edit_expression(session: EditSession, target_e) -> tuple[JointSample, np.ndarray]:
    """Move the current code toward the given blendshape activations."""
    e = np.asarray(target_e, dtype=np.float64)
    z = transform_expression(session.model, session.code, e)
    session.code = z
    session.history.append({"op": "expression", "weights": [float(v) for v in e]})
    return decode(session.model, z), z


def edit_age(session: EditSession, target_age: float) -> tuple[JointSample, np.ndarray]:
    """Move the current code to the target age and update the annotation."""
    z = transform_age(session.model, session.code, float(target_age))
    session.code = z
    session.age = float(target_age)
    session.history.append({"op": "age", "age": float(target_age)})
    return decode(session.model, z), z


def replay(
    model: DetailModel,
    original: JointSample,
    base_age: float,
    history: list,
) -> EditSession:
    """Rebuild a session state by applying a history from the original."""
    session = open_session(model, original, age=base_age)
    for record in history:
        z = _apply_record(session, record)
        session.code = z
        session.history.append(record)
    return session


def undo(session: EditSession) -> tuple[JointSample, np.ndarray]:
    """Drop the latest edit by replaying the shortened history."""
    if not session.history:
        raise InvalidEditError("nothing to undo")
    rebuilt = replay(
        session.model, session.original, session.base_age, session.history[:-1]
    )
    session.code = rebuilt.code
    session.age = rebuilt.age
    session.lines = rebuilt.lines
    session.history = rebuilt.history
    return decode(session.model, session.code), session.code


def animate(session: EditSession, keyframes, fps: float) -> list[DisplacementMap]:
    """Render a blendshape animation from the session's current code.

    Keyframes are (time, weights) with strictly increasing times. Weights
    are interpolated linearly per output frame and every frame transforms
    the session's current code directly — frames never chain, so no
    approximation error accumulates across the sequence. The session
    itself is left unchanged.
    """
    frames_spec = [(float(t), np.asarray(w, dtype=np.float64)) for t, w in keyframes]
    if not frames_spec:
        raise InvalidEditError("animation needs at least one keyframe")
    if not (np.isfinite(fps) and fps > 0):
        raise InvalidInputError(f"fps must be positive, got {fps}")
    times = [t for t, _ in frames_spec]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise InvalidEditError("keyframe times must be strictly increasing")
    n_e = session.model.n_e
    for _, w in frames_spec:
        if w.shape != (n_e,):
            raise InvalidEditError(f"keyframe weights must have length {n_e}")
        if w.size and (w.min() < 0.0 or w.max() > 1.0):
            raise InvalidEditError("keyframe weights must lie in [0, 1]")

    n_frames = int(round((times[-1] - times[0]) * fps)) + 1
    weight_rows = np.stack([w for _, w in frames_spec])
    out = []
    for k in range(n_frames):
        t = min(times[0] + k / fps, times[-1])
        w = np.array(
            [np.interp(t, times, weight_rows[:, j]) for j in range(n_e)]
        )
        z = transform_expression(session.model, session.code, w)
        out.append(decode(session.model, z).disp)
    return out


def export_animation(frames, out_dir, fps: float) -> Path:
    """Write numbered PNG frames plus a manifest; returns the manifest path."""
    if not frames:
        raise InvalidInputError("no frames to export")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for k, frame in enumerate(frames):
        name = f"frame_{k:04d}.png"
        save_displacement(out / name, frame)
        names.append(name)
    manifest = out / "manifest.txt"
    write_meta(
        manifest,
        {
            "kind": "facedetail-animation",
            "fps": repr(float(fps)),
            "n_frames": str(len(names)),
            "resolution": str(frames[0].width),
            "files": ",".join(names),
        },
    )
    return manifest


def _png_b64(save_fn, raster) -> dict:
    """Encode a raster as base64 PNG plus its sidecar text, via scratch files."""
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "raster.png"
        save_fn(path, raster)
        payload = {"png": base64.b64encode(path.read_bytes()).decode("ascii")}
        meta = Path(_meta_path(path))
        if meta.exists():
            payload["meta"] = meta.read_text()
    return payload


def _png_from_b64(load_fn, payload: dict):
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "raster.png"
        path.write_bytes(base64.b64decode(payload["png"]))
        if "meta" in payload:
            Path(_meta_path(path)).write_text(payload["meta"])
        return load_fn(path)


def export_session(session: EditSession, path) -> None:
    """Write the session as a structured text document.

    The document carries the original pair as embedded PNG rasters plus
    the ordered edit history; importing replays the history against the
    stored rasters, so the imported state is exactly the state those
    rasters replay to.
    """
    doc = {
        "kind": SESSION_DOC_KIND,
        "version": SESSION_DOC_VERSION,
        "resolution": session.resolution,
        "base_age": session.base_age,
        "original_disp": _png_b64(save_displacement, session.original.disp),
        "original_df": _png_b64(save_distance, session.original.df),
        "history": session.history,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def import_session(model: DetailModel, path) -> EditSession:
    """Rebuild an exported session by replaying its history."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"unreadable session document: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("kind") != SESSION_DOC_KIND:
        raise InvalidInputError("not a session document")
    if doc.get("version") != SESSION_DOC_VERSION:
        raise InvalidInputError(f"unsupported session version {doc.get('version')!r}")
    try:
        disp = _png_from_b64(load_displacement, doc["original_disp"])
        df = _png_from_b64(load_distance, doc["original_df"])
        base_age = float(doc["base_age"])
        history = doc["history"]
    except (KeyError, ValueError) as exc:
        raise InvalidInputError(f"malformed session document: {exc}") from exc
    sample = JointSample(disp, df)
    return replay(model, sample, base_age, history)
