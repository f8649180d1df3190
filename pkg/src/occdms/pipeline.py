"""
Per-frame driver-monitoring state machine.

The pipeline normally runs on the RGB stream and keeps the IR frame of each
pair on hold. It falls back to IR when the RGB face is occluded, switches to
IR as primary after a run of unexplained RGB detection failures, and goes
back to RGB after a run of RGB detections. A run of frames where both
modalities are occluded raises a driver alert, during which no gaze or
identity output is produced.

Trace format (tab separated, one record per frame after a header line)::

    frame  mode  face  gaze  occlusion  alert  identification  error

``face`` is ``<source>:x,y,w,h`` with source ``rgb``, ``ir``, ``est-rgb`` or
``est-ir``; ``gaze`` is ``<region>:<score>``; ``occlusion`` lists each
classifier call in order as ``rgb=0|1`` / ``ir=0|1``; ``identification`` is
``<modality>:match:<id>:<sim>`` or ``<modality>:unmatched:<sim|->`` with an
optional ``:registered=<id>`` suffix. Empty fields are ``-``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple

from . import identity as ident
from .acquisition import AcquisitionConfig, AcquisitionState, LastDetection, enhance_ir, estimate
from .backends import (
    BackendError,
    Backends,
    GazePrediction,
    classify_gaze,
    classify_occlusion,
    detect_faces,
    extract_embedding,
    select_face,
)
from .imaging import BoundingBox, DimensionError, Image, crop, read_pnm

TRACE_HEADER = "#frame\tmode\tface\tgaze\tocclusion\talert\tidentification\terror"


class Mode(str, Enum):
    RGB_PRIMARY = "RGB_PRIMARY"
    IR_PRIMARY = "IR_PRIMARY"
    ALERT = "ALERT"


ALLOWED_TRANSITIONS = frozenset({
    (Mode.RGB_PRIMARY, Mode.IR_PRIMARY),
    (Mode.RGB_PRIMARY, Mode.ALERT),
    (Mode.IR_PRIMARY, Mode.ALERT),
    (Mode.IR_PRIMARY, Mode.RGB_PRIMARY),
    (Mode.ALERT, Mode.RGB_PRIMARY),
})


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    occlusion_alert_frames: int = 10
    rgb_fail_switch_frames: int = 30
    rgb_recover_frames: int = 15
    id_period_frames: int = 300
    conf_threshold: float = 0.97
    estimated_bb_enabled: bool = True
    max_estimated_frames: int = 5
    bb_expand: float = 0.20
    clahe_tiles_x: int = 8
    clahe_tiles_y: int = 8
    clahe_clip: float = 2.0
    occlusion_threshold: float = 0.5
    rgb_match_threshold: float = 0.65
    ir_match_threshold: float = 0.575
    auto_register: bool = False
    reinforce: bool = False

    def __post_init__(self):
        for name in ("occlusion_alert_frames", "rgb_fail_switch_frames", "rgb_recover_frames", "id_period_frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        object.__setattr__(self, "_acq", AcquisitionConfig(
            self.conf_threshold,
            self.estimated_bb_enabled,
            self.max_estimated_frames,
            self.bb_expand,
            self.clahe_tiles_x,
            self.clahe_tiles_y,
            self.clahe_clip,
        ))

    @property
    def acquisition(self) -> AcquisitionConfig:
        return self._acq

    def match_threshold(self, modality: str) -> float:
        return self.rgb_match_threshold if modality == "rgb" else self.ir_match_threshold


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def config_from_items(items: Iterable[tuple[str, str]], base: PipelineConfig | None = None) -> PipelineConfig:
    values = {} if base is None else {k: getattr(base, k) for k in _FIELD_TYPES}
    for key, raw in items:
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown configuration key {key!r}")
        kind = _FIELD_TYPES[key]
        try:
            values[key] = _parse_bool(raw) if kind == "bool" else (int(raw) if kind == "int" else float(raw))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return PipelineConfig(**values)


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    items = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value")
        items.append((key, value))
    return config_from_items(items, base)


def format_config(config: PipelineConfig) -> str:
    lines = []
    for name in _FIELD_TYPES:
        v = getattr(config, name)
        lines.append(f"{name}={str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class FrameBundle:
    index: int
    rgb: Image
    ir: Image


class OcclusionReading(NamedTuple):
    modality: str
    occluded: bool
    score: float


@dataclass(frozen=True)
class Identification:
    result: ident.MatchResult
    registered: int | None = None


@dataclass(slots=True)
class FrameOutput:
    frame: int
    mode: Mode
    face_source: str | None = None
    face_box: BoundingBox | None = None
    gaze: GazePrediction | None = None
    occlusion: tuple[OcclusionReading, ...] = ()
    alert: str | None = None
    identification: Identification | None = None
    error: str | None = None

    @property
    def degraded(self) -> bool:
        return self.error is not None


class PipelineState:
    """Mutable-by-copy pipeline memory; :func:`step` never modifies its input."""

    __slots__ = (
        "mode",
        "acquisition",
        "consecutive_rgb_failures",
        "consecutive_rgb_successes",
        "consecutive_dual_occlusions",
        "frames_since_id",
        "current_driver",
    )

    def __init__(self, mode=Mode.RGB_PRIMARY, acquisition=None, consecutive_rgb_failures=0,
                 consecutive_rgb_successes=0, consecutive_dual_occlusions=0, frames_since_id=0,
                 current_driver=None):
        self.mode = mode
        self.acquisition = acquisition if acquisition is not None else AcquisitionState()
        self.consecutive_rgb_failures = consecutive_rgb_failures
        self.consecutive_rgb_successes = consecutive_rgb_successes
        self.consecutive_dual_occlusions = consecutive_dual_occlusions
        self.frames_since_id = frames_since_id
        self.current_driver = current_driver

    def copy(self) -> "PipelineState":
        new = object.__new__(PipelineState)
        new.mode = self.mode
        new.acquisition = self.acquisition
        new.consecutive_rgb_failures = self.consecutive_rgb_failures
        new.consecutive_rgb_successes = self.consecutive_rgb_successes
        new.consecutive_dual_occlusions = self.consecutive_dual_occlusions
        new.frames_since_id = self.frames_since_id
        new.current_driver = self.current_driver
        return new

    def _key(self):
        return tuple(getattr(self, s) for s in self.__slots__)

    def __eq__(self, other):
        if not isinstance(other, PipelineState):
            return NotImplemented
        return self._key() == other._key()

    def __repr__(self):
        inner = ", ".join(f"{s}={getattr(self, s)!r}" for s in self.__slots__)
        return f"PipelineState({inner})"


def _reset_counters(st: PipelineState) -> None:
    st.consecutive_rgb_failures = 0
    st.consecutive_rgb_successes = 0
    st.consecutive_dual_occlusions = 0


class _Frame:
    """Scratch space for one tick."""

    __slots__ = ("bundle", "enhanced", "occlusion", "occluded", "face", "rgb_box")

    def __init__(self, bundle):
        self.bundle = bundle
        self.enhanced = None
        self.occlusion = ()
        self.occluded = ()  # modalities judged occluded this frame
        self.face = None  # (source, modality, box)
        self.rgb_box = None  # any RGB detection this frame, preferred for identification


def _is_occluded(fr: _Frame, modality: str, backends: Backends, config: PipelineConfig) -> bool:
    img = fr.bundle.rgb if modality == "rgb" else fr.bundle.ir
    pred = classify_occlusion(backends.occlusion, img, fr.bundle.index)
    occluded = pred.score >= config.occlusion_threshold
    fr.occlusion += (OcclusionReading(modality, occluded, pred.score),)
    if occluded:
        fr.occluded += (modality,)
    return occluded


def _enhanced_ir(fr: _Frame, config: PipelineConfig) -> Image:
    if fr.enhanced is None:
        fr.enhanced = enhance_ir(fr.bundle.ir, config.clahe_tiles_x, config.clahe_tiles_y, config.clahe_clip)
    return fr.enhanced


def _detect(fr: _Frame, modality: str, backends: Backends, config: PipelineConfig):
    img = fr.bundle.rgb if modality == "rgb" else _enhanced_ir(fr, config)
    det = select_face(detect_faces(backends.detector, img, fr.bundle.index), config.conf_threshold)
    if det is not None and modality == "rgb":
        fr.rgb_box = det.box
    return det


def _take_detection(st: PipelineState, fr: _Frame, det, modality: str) -> None:
    st.acquisition = AcquisitionState(LastDetection(det.box, modality, fr.bundle.index), 0)
    fr.face = (modality, modality, det.box)


def _try_estimate(st: PipelineState, fr: _Frame, config: PipelineConfig) -> None:
    last = st.acquisition.last_detection
    # never crop an estimated box out of an image judged occluded this frame
    if last is None or last.modality in fr.occluded:
        return
    src = fr.bundle.rgb if last.modality == "rgb" else fr.bundle.ir
    result, st.acquisition = estimate(st.acquisition, config.acquisition, (src.width, src.height), fr.bundle.index)
    if result is not None:
        fr.face = ("est-" + last.modality, last.modality, result.box)


def _enter_alert(st: PipelineState) -> str:
    st.mode = Mode.ALERT
    _reset_counters(st)
    return "raised"


def _tick_rgb(st: PipelineState, fr: _Frame, backends: Backends, config: PipelineConfig):
    det = _detect(fr, "rgb", backends, config)
    if det is not None:
        _take_detection(st, fr, det, "rgb")
        st.consecutive_rgb_failures = 0
        st.consecutive_dual_occlusions = 0
        return None

    if not _is_occluded(fr, "rgb", backends, config):
        st.consecutive_dual_occlusions = 0
        _try_estimate(st, fr, config)
        st.consecutive_rgb_failures += 1
        if st.consecutive_rgb_failures >= config.rgb_fail_switch_frames:
            st.mode = Mode.IR_PRIMARY
            _reset_counters(st)
        return None

    # RGB occluded: fall back to the held IR frame
    if _is_occluded(fr, "ir", backends, config):
        st.consecutive_dual_occlusions += 1
        if st.consecutive_dual_occlusions >= config.occlusion_alert_frames:
            return _enter_alert(st)
        return None
    st.consecutive_dual_occlusions = 0
    det = _detect(fr, "ir", backends, config)
    if det is not None:
        _take_detection(st, fr, det, "ir")
    else:
        _try_estimate(st, fr, config)
    return None


def _tick_ir(st: PipelineState, fr: _Frame, backends: Backends, config: PipelineConfig):
    det_ir = _detect(fr, "ir", backends, config)
    probe = _detect(fr, "rgb", backends, config)
    st.consecutive_rgb_successes = st.consecutive_rgb_successes + 1 if probe is not None else 0

    if det_ir is not None:
        _take_detection(st, fr, det_ir, "ir")
        st.consecutive_dual_occlusions = 0
    elif probe is not None:
        _take_detection(st, fr, probe, "rgb")
        st.consecutive_dual_occlusions = 0
    elif _is_occluded(fr, "ir", backends, config) and _is_occluded(fr, "rgb", backends, config):
        st.consecutive_dual_occlusions += 1
    else:
        st.consecutive_dual_occlusions = 0
        _try_estimate(st, fr, config)

    if st.consecutive_dual_occlusions >= config.occlusion_alert_frames:
        return _enter_alert(st)
    if st.consecutive_rgb_successes >= config.rgb_recover_frames:
        st.mode = Mode.RGB_PRIMARY
        _reset_counters(st)
    return None


def _tick_alert(st: PipelineState, fr: _Frame, backends: Backends, config: PipelineConfig):
    occ_rgb = _is_occluded(fr, "rgb", backends, config)
    occ_ir = _is_occluded(fr, "ir", backends, config)
    if occ_rgb or occ_ir:
        return None
    if _detect(fr, "rgb", backends, config) is None and _detect(fr, "ir", backends, config) is None:
        return None
    st.mode = Mode.RGB_PRIMARY
    _reset_counters(st)
    st.acquisition = AcquisitionState()
    return "cleared"


_TICKS = {Mode.RGB_PRIMARY: _tick_rgb, Mode.IR_PRIMARY: _tick_ir, Mode.ALERT: _tick_alert}


def _identify(st, fr, crop_img, modality, backends, config, db) -> Identification:
    emb = extract_embedding(backends.embedder, crop_img, modality, fr.bundle.index)
    result = ident.identify(db, emb, config.match_threshold(modality))
    registered = None
    if result.matched:
        st.current_driver = result.id
        if config.reinforce:
            ident.reinforce(db, result.id, emb)
    elif config.auto_register:
        registered = ident.auto_register(db, emb).id
        st.current_driver = registered
    return Identification(result, registered)


def _step(st: PipelineState, bundle: FrameBundle, backends: Backends, config: PipelineConfig, db):
    fr = _Frame(bundle)
    was_alert = st.mode is Mode.ALERT
    alert = _TICKS[st.mode](st, fr, backends, config)

    gaze = ident_out = None
    box = source = None
    if not was_alert and st.mode is not Mode.ALERT:
        st.frames_since_id += 1
        if fr.face is not None:
            source, modality, box = fr.face
            face_img = crop(bundle.rgb if modality == "rgb" else bundle.ir, box)
            gaze = classify_gaze(backends.gaze, face_img, bundle.index)
            if st.frames_since_id >= config.id_period_frames and db is not None:
                if modality != "rgb" and fr.rgb_box is not None:
                    face_img, modality = crop(bundle.rgb, fr.rgb_box), "rgb"
                ident_out = _identify(st, fr, face_img, modality, backends, config, db)
                st.frames_since_id = 0
        if db is None:
            st.frames_since_id = min(st.frames_since_id, config.id_period_frames)
    return FrameOutput(bundle.index, st.mode, source, box, gaze, fr.occlusion, alert, ident_out), st


def step(state: PipelineState, bundle: FrameBundle, backends: Backends,
         config: PipelineConfig = PipelineConfig(), db: "ident.IdentityDB | None" = None):
    """Advance the state machine by one frame pair.

    Args:
        state: state after the previous frame; left untouched.
        bundle: synchronized RGB and IR frames.
        backends: model backends.
        config: thresholds and hysteresis lengths.
        db: identity database; identification is skipped when None.

    Returns:
        ``(FrameOutput, PipelineState)``. A backend failure yields an output
        with ``error`` set and the incoming state unchanged.
    """
    try:
        return _step(state.copy(), bundle, backends, config, db)
    except (BackendError, DimensionError) as exc:
        return FrameOutput(bundle.index, state.mode, error=str(exc)), state


def run_stream(frames: Iterable[FrameBundle], backends: Backends, config: PipelineConfig = PipelineConfig(),
               db=None, state: PipelineState | None = None):
    """Fold :func:`step` over ``frames``; returns ``(outputs, final_state)``."""
    st = state if state is not None else PipelineState()
    outputs = []
    last = None
    for bundle in frames:
        if last is not None and bundle.index <= last:
            raise ValueError(f"frame indices must increase strictly ({last} -> {bundle.index})")
        last = bundle.index
        out, st = step(st, bundle, backends, config, db)
        outputs.append(out)
    return outputs, st


class Pipeline:
    """Convenience holder for one camera stream."""

    def __init__(self, backends: Backends, config: PipelineConfig = PipelineConfig(), db=None):
        self.backends = backends
        self.config = config
        self.db = db
        self.state = PipelineState()

    def process(self, bundle: FrameBundle) -> FrameOutput:
        out, self.state = step(self.state, bundle, self.backends, self.config, self.db)
        return out


# --------------------------------------------------------------------------
# trace records


def _clean(text: str) -> str:
    return text.replace("\t", " ").replace("\n", " ")


def format_output(out: FrameOutput) -> str:
    face = "-"
    if out.face_box is not None:
        b = out.face_box
        face = f"{out.face_source}:{b.x},{b.y},{b.w},{b.h}"
    gaze = "-" if out.gaze is None else f"{out.gaze.region}:{out.gaze.score:.6f}"
    occ = ",".join(f"{r.modality}={int(r.occluded)}" for r in out.occlusion) or "-"
    idf = "-"
    if out.identification is not None:
        r = out.identification.result
        if r.matched:
            idf = f"{r.modality}:match:{r.id}:{r.similarity:.6f}"
        else:
            sim = "-" if r.similarity is None else f"{r.similarity:.6f}"
            idf = f"{r.modality}:unmatched:{sim}"
        if out.identification.registered is not None:
            idf += f":registered={out.identification.registered}"
    err = "-" if out.error is None else _clean(out.error)
    return "\t".join((str(out.frame), out.mode.value, face, gaze, occ, out.alert or "-", idf, err))


def format_trace(outputs: Iterable[FrameOutput]) -> str:
    return "\n".join([TRACE_HEADER] + [format_output(o) for o in outputs]) + "\n"


_FRAME_RE = re.compile(r"^frame_(\d+)\.(rgb|ir)\.pnm$")


def load_frame_dir(path) -> list[FrameBundle]:
    """Pairs ``frame_<n>.rgb.pnm`` with ``frame_<n>.ir.pnm``, ordered by ``n``."""
    found: dict[int, dict[str, Path]] = {}
    for p in Path(path).iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            found.setdefault(int(m.group(1)), {})[m.group(2)] = p
    bundles = []
    for index in sorted(found):
        pair = found[index]
        if set(pair) != {"rgb", "ir"}:
            raise FileNotFoundError(f"frame {index} is missing its {({'rgb', 'ir'} - set(pair)).pop()} image")
        bundles.append(FrameBundle(index, read_pnm(pair["rgb"]), read_pnm(pair["ir"])))
    return bundles
