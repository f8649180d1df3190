"""Face acquisition fallback chain: RGB, then CLAHE-enhanced IR, then an estimated box."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

from .backends import FaceDetection, FaceDetector, detect_faces, select_face
from .imaging import BoundingBox, Image, clahe, expand_box

DETECTED = "detected"
ESTIMATED = "estimated"
NONE = "none"


@dataclass(frozen=True)
class AcquisitionConfig:
    conf_threshold: float = 0.97
    estimated_bb_enabled: bool = True
    max_estimated_frames: int = 5
    bb_expand: float = 0.20
    clahe_tiles_x: int = 8
    clahe_tiles_y: int = 8
    clahe_clip: float = 2.0

    def __post_init__(self):
        if self.max_estimated_frames < 0:
            raise ValueError("max_estimated_frames must be >= 0")

    def enhance(self, ir: Image) -> Image:
        return enhance_ir(ir, self.clahe_tiles_x, self.clahe_tiles_y, self.clahe_clip)


_last_enhanced: tuple = (None, None, None)


def enhance_ir(ir: Image, tiles_x: int = 8, tiles_y: int = 8, clip: float = 2.0) -> Image:
    """CLAHE for the IR retry, reusing the previous result for the same read-only frame."""
    global _last_enhanced
    params = (tiles_x, tiles_y, clip)
    src, cached_params, out = _last_enhanced
    if src is ir and cached_params == params:
        return out
    out = clahe(ir, tiles_x, tiles_y, clip)
    if not ir.data.flags.writeable:
        _last_enhanced = (ir, params, out)
    return out


# Per-frame records are named tuples: they are built on every pipeline tick.


class LastDetection(NamedTuple):
    box: BoundingBox
    modality: str
    frame: int


class AcquisitionState(NamedTuple):
    last_detection: LastDetection | None = None
    consecutive_estimated: int = 0


class AcquisitionResult(NamedTuple):
    outcome: str
    frame: int
    box: BoundingBox | None = None
    modality: str | None = None
    confidence: float | None = None


def reset(state: AcquisitionState | None = None) -> AcquisitionState:
    return AcquisitionState()


def detect_best(detector: FaceDetector, img: Image, threshold: float, frame: int | None = None) -> FaceDetection | None:
    return select_face(detect_faces(detector, img, frame), threshold)


def record_detection(det: FaceDetection, modality: str, frame: int) -> AcquisitionState:
    return AcquisitionState(LastDetection(det.box, modality, frame), 0)


def estimate(state: AcquisitionState, config: AcquisitionConfig, bounds: tuple[int, int], frame: int):
    """Estimated box from the last real detection, if the budget allows.

    The box is always grown from the original detection, never from a
    previous estimate. Returns ``(result_or_None, new_state)``.
    """
    last = state.last_detection
    if (
        not config.estimated_bb_enabled
        or last is None
        or state.consecutive_estimated >= config.max_estimated_frames
    ):
        return None, state
    box = expand_box(last.box, config.bb_expand, *bounds)
    result = AcquisitionResult(ESTIMATED, frame, box, last.modality)
    return result, AcquisitionState(last, state.consecutive_estimated + 1)


def acquire(
    state: AcquisitionState,
    rgb: Image,
    ir: Image,
    detector: FaceDetector,
    config: AcquisitionConfig = AcquisitionConfig(),
    frame: int = 0,
    enhance: Callable[[Image], Image] | None = None,
):
    """Run the full chain for one frame pair.

    Args:
        state: acquisition memory from the previous frame.
        rgb, ir: the synchronized images of this frame.
        detector: face detector backend.
        config: thresholds, estimated-box budget and CLAHE settings.
        frame: frame index, forwarded to the detector.
        enhance: IR enhancement override; defaults to ``config.enhance``.

    Returns:
        ``(AcquisitionResult, AcquisitionState)``. Detector failures raise
        :class:`~occdms.backends.BackendError` rather than yielding ``none``.
    """
    det = detect_best(detector, rgb, config.conf_threshold, frame)
    if det is not None:
        return AcquisitionResult(DETECTED, frame, det.box, "rgb", det.confidence), record_detection(det, "rgb", frame)

    enhanced = (enhance or config.enhance)(ir)
    det = detect_best(detector, enhanced, config.conf_threshold, frame)
    if det is not None:
        return AcquisitionResult(DETECTED, frame, det.box, "ir", det.confidence), record_detection(det, "ir", frame)

    if state.last_detection is not None:
        source = rgb if state.last_detection.modality == "rgb" else ir
        result, new_state = estimate(state, config, (source.width, source.height), frame)
        if result is not None:
            return result, new_state
    return AcquisitionResult(NONE, frame), state
