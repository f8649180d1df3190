"""
Inference backend interfaces and scripted stand-ins.

The four neural models (face detector, gaze classifier, occlusion
classifier, embedding extractor) are abstract classes. Real adapters wrap a
model; the ``Scripted*`` classes replay a :class:`ScenarioScript` so the
pipeline can be exercised deterministically without any network weights.

Scenario file format, one frame per line, whitespace separated::

    #occdms-scenario v1 dim=128 noise=0.05 width=640 height=480
    <frame> <rgb_det> <ir_det> <gaze_region> <occ_rgb> <occ_ir> <identity_seed>

A detection field is ``x,y,w,h,conf``; several detections are joined with
``;`` and ``-`` means none. Occlusion flags are ``0`` or ``1``. ``width`` and
``height`` size the synthetic frames produced for scenario runs.
"""

from __future__ import annotations

import functools
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .imaging import BoundingBox, Image

N_GAZE_REGIONS = 9
DEFAULT_DIM = 128
DEFAULT_NOISE = 0.05
SCENARIO_MAGIC = "#occdms-scenario v1"

GAZE_REGION_NAMES = {
    1: "left_mirror",
    2: "left",
    3: "front",
    4: "center_mirror",
    5: "front_right",
    6: "right_mirror",
    7: "right",
    8: "infotainment",
    9: "steering_wheel",
}


class BackendError(RuntimeError):
    """A model backend failed or returned output violating its contract."""


class ScenarioError(ValueError):
    pass


def modality_of(img: Image) -> str:
    return "rgb" if img.channels == 3 else "ir"


# --------------------------------------------------------------------------
# prediction types


@dataclass(frozen=True)
class FaceDetection:
    box: BoundingBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class GazePrediction:
    """Nine-way gaze-region scores; ``region`` is the 1-based argmax."""

    region: int
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.scores) != N_GAZE_REGIONS:
            raise ValueError(f"expected {N_GAZE_REGIONS} scores, got {len(self.scores)}")
        if abs(math.fsum(self.scores) - 1.0) > 1e-6:
            raise ValueError("gaze scores must sum to 1")
        if self.region != argmax_region(self.scores):
            raise ValueError(f"region {self.region} is not the argmax of {self.scores}")

    @classmethod
    def from_scores(cls, scores: Sequence[float]) -> "GazePrediction":
        scores = tuple(float(s) for s in scores)
        return cls(argmax_region(scores), scores)

    @property
    def score(self) -> float:
        return self.scores[self.region - 1]


def argmax_region(scores: Sequence[float]) -> int:
    best = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[best]:
            best = i
    return best + 1


@dataclass(frozen=True)
class OcclusionPrediction:
    occluded: bool
    score: float

    @classmethod
    def from_score(cls, score: float, threshold: float = 0.5) -> "OcclusionPrediction":
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"occlusion score must lie in [0, 1], got {score}")
        return cls(score >= threshold, float(score))


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    modality: str = "rgb"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("embedding must be a non-empty vector")
        if not np.all(np.isfinite(values)):
            raise ValueError("embedding has non-finite entries")
        if not np.any(values):
            raise ValueError("embedding has zero norm")
        if self.modality not in ("rgb", "ir"):
            raise ValueError(f"unknown modality {self.modality!r}")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, Embedding):
            return NotImplemented
        return self.modality == other.modality and np.array_equal(self.values, other.values)


# --------------------------------------------------------------------------
# interfaces


class FaceDetector(ABC):
    @abstractmethod
    def detect(self, image: Image, frame_index: int | None = None) -> list[FaceDetection]:
        """All candidate faces; filtering by confidence is the caller's job."""


class GazeClassifier(ABC):
    @abstractmethod
    def classify(self, face: Image, frame_index: int | None = None) -> GazePrediction:
        ...


class OcclusionClassifier(ABC):
    @abstractmethod
    def classify(self, image: Image, frame_index: int | None = None) -> OcclusionPrediction:
        ...


class EmbeddingExtractor(ABC):
    @abstractmethod
    def extract(self, face: Image, modality: str, frame_index: int | None = None) -> Embedding:
        ...


@dataclass(frozen=True)
class Backends:
    detector: FaceDetector
    gaze: GazeClassifier
    occlusion: OcclusionClassifier
    embedder: EmbeddingExtractor


# ``frame_index`` is a replay key for scripted backends; model adapters ignore it.


def detect_faces(backend: FaceDetector, img: Image, frame_index: int | None = None) -> list[FaceDetection]:
    try:
        out = backend.detect(img, frame_index)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"face detector failed: {exc}") from exc
    if not out:
        return []
    h, w = img.data.shape[:2]
    for d in out:
        if not isinstance(d, FaceDetection):
            raise BackendError("face detector returned a non-FaceDetection")
        b = d.box
        if not (b.x < w and b.y < h and b.x + b.w > 0 and b.y + b.h > 0):
            raise BackendError(f"detection {d.box} lies outside the {w}x{h} image")
    return list(out)


def classify_gaze(backend: GazeClassifier, face: Image, frame_index: int | None = None) -> GazePrediction:
    try:
        pred = backend.classify(face, frame_index)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"gaze classifier failed: {exc}") from exc
    # GazePrediction validates region/argmax consistency on construction
    if not isinstance(pred, GazePrediction):
        raise BackendError("gaze classifier returned a non-GazePrediction")
    return pred


def classify_occlusion(backend: OcclusionClassifier, img: Image, frame_index: int | None = None) -> OcclusionPrediction:
    try:
        pred = backend.classify(img, frame_index)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"occlusion classifier failed: {exc}") from exc
    if not isinstance(pred, OcclusionPrediction):
        raise BackendError("occlusion classifier returned a non-OcclusionPrediction")
    return pred


def extract_embedding(backend: EmbeddingExtractor, face: Image, modality: str, frame_index: int | None = None) -> Embedding:
    try:
        emb = backend.extract(face, modality, frame_index)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"embedding extractor failed: {exc}") from exc
    if not isinstance(emb, Embedding):
        raise BackendError("embedding extractor returned a non-Embedding")
    return emb


def select_face(detections: Iterable[FaceDetection], threshold: float = 0.97) -> FaceDetection | None:
    """Largest-area detection at or above ``threshold``; earliest wins ties."""
    best = None
    for det in detections:
        if det.confidence >= threshold and (best is None or det.box.area > best.box.area):
            best = det
    return best


# --------------------------------------------------------------------------
# mock embeddings


@functools.lru_cache(maxsize=1024)
def identity_vector(seed: int, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Unit vector standing in for one person's true face embedding (read-only)."""
    v = np.random.default_rng([0x1D, seed]).standard_normal(dim)
    v /= np.linalg.norm(v)
    v.flags.writeable = False
    return v


def mock_embedding(seed: int, dim: int = DEFAULT_DIM, noise: float = DEFAULT_NOISE,
                   sample: int = 0, modality: str = "rgb") -> Embedding:
    """Identity vector plus a noise vector of norm ``noise``, renormalized.

    ``sample`` selects the noise draw, so (seed, sample, modality) fully
    determines the output.
    """
    base = identity_vector(seed, dim)
    if noise > 0:
        rng = np.random.default_rng([0x2E, seed, sample, 0 if modality == "rgb" else 1])
        n = rng.standard_normal(dim)
        base = base + noise * n / np.linalg.norm(n)
        base = base / np.linalg.norm(base)
    return Embedding(base, modality)


# --------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class ScenarioFrame:
    index: int
    rgb_detections: tuple[FaceDetection, ...] = ()
    ir_detections: tuple[FaceDetection, ...] = ()
    gaze_region: int = 3
    occluded_rgb: bool = False
    occluded_ir: bool = False
    identity_seed: int = 0

    def __post_init__(self):
        if not 1 <= self.gaze_region <= N_GAZE_REGIONS:
            raise ScenarioError(f"frame {self.index}: gaze region {self.gaze_region} out of range")
        if self.identity_seed < 0:
            raise ScenarioError(f"frame {self.index}: identity seed must be non-negative")


@dataclass
class ScenarioScript:
    frames: list[ScenarioFrame]
    dim: int = DEFAULT_DIM
    noise: float = DEFAULT_NOISE
    width: int = 640
    height: int = 480

    def __post_init__(self):
        for prev, cur in zip(self.frames, self.frames[1:]):
            if cur.index <= prev.index:
                raise ScenarioError(f"frame indices must increase strictly ({prev.index} -> {cur.index})")
        self._by_index = {f.index: f for f in self.frames}

    def frame(self, index: int | None) -> ScenarioFrame:
        try:
            return self._by_index[index]
        except KeyError:
            raise BackendError(f"scenario has no frame {index}") from None

    def bundles(self):
        """Synthetic frame pairs; the scripted backends ignore pixel content."""
        from .pipeline import FrameBundle

        rgb = Image.filled(self.width, self.height, (96, 96, 96), channels=3)
        ir = Image.filled(self.width, self.height, 96)
        rgb.data.flags.writeable = False
        ir.data.flags.writeable = False
        for f in self.frames:
            yield FrameBundle(f.index, rgb, ir)


def _format_float(x: float) -> str:
    return repr(float(x))


def _format_detections(dets: Sequence[FaceDetection]) -> str:
    if not dets:
        return "-"
    return ";".join(
        f"{d.box.x},{d.box.y},{d.box.w},{d.box.h},{_format_float(d.confidence)}" for d in dets
    )


def _parse_detections(field: str, lineno: int) -> tuple[FaceDetection, ...]:
    if field == "-":
        return ()
    out = []
    for part in field.split(";"):
        bits = part.split(",")
        if len(bits) != 5:
            raise ScenarioError(f"line {lineno}: detection {part!r} needs x,y,w,h,conf")
        try:
            x, y, w, h = (int(b) for b in bits[:4])
            out.append(FaceDetection(BoundingBox(x, y, w, h), float(bits[4])))
        except ValueError as exc:
            raise ScenarioError(f"line {lineno}: bad detection {part!r}: {exc}") from None
    return tuple(out)


def _parse_flag(field: str, lineno: int) -> bool:
    if field not in ("0", "1"):
        raise ScenarioError(f"line {lineno}: occlusion flag must be 0 or 1, got {field!r}")
    return field == "1"


def format_scenario(script: ScenarioScript) -> str:
    lines = [
        f"{SCENARIO_MAGIC} dim={script.dim} noise={_format_float(script.noise)} "
        f"width={script.width} height={script.height}"
    ]
    for f in script.frames:
        lines.append(" ".join((
            str(f.index),
            _format_detections(f.rgb_detections),
            _format_detections(f.ir_detections),
            str(f.gaze_region),
            "1" if f.occluded_rgb else "0",
            "1" if f.occluded_ir else "0",
            str(f.identity_seed),
        )))
    return "\n".join(lines) + "\n"


def parse_scenario(text: str) -> ScenarioScript:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(SCENARIO_MAGIC):
        raise ScenarioError("line 1: missing scenario header")
    header = {}
    for tok in lines[0][len(SCENARIO_MAGIC):].split():
        key, sep, value = tok.partition("=")
        if not sep:
            raise ScenarioError(f"line 1: malformed header token {tok!r}")
        header[key] = value
    unknown = set(header) - {"dim", "noise", "width", "height"}
    if unknown:
        raise ScenarioError(f"line 1: unknown header keys {sorted(unknown)}")
    try:
        opts = dict(
            dim=int(header.get("dim", DEFAULT_DIM)),
            noise=float(header.get("noise", DEFAULT_NOISE)),
            width=int(header.get("width", 640)),
            height=int(header.get("height", 480)),
        )
    except ValueError as exc:
        raise ScenarioError(f"line 1: {exc}") from None

    frames = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ScenarioError(f"line {lineno}: expected 7 fields, got {len(parts)}")
        try:
            index, region, seed = int(parts[0]), int(parts[3]), int(parts[6])
        except ValueError as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None
        frames.append(ScenarioFrame(
            index,
            _parse_detections(parts[1], lineno),
            _parse_detections(parts[2], lineno),
            region,
            _parse_flag(parts[4], lineno),
            _parse_flag(parts[5], lineno),
            seed,
        ))
    return ScenarioScript(frames, **opts)


def read_scenario(path) -> ScenarioScript:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


# --------------------------------------------------------------------------
# scripted backends


def smoothed_one_hot(region: int, smoothing: float = 0.1) -> GazePrediction:
    off = smoothing / (N_GAZE_REGIONS - 1)
    scores = [off] * N_GAZE_REGIONS
    scores[region - 1] = 1.0 - smoothing
    return GazePrediction(region, tuple(scores))


class _Scripted:
    def __init__(self, script: ScenarioScript):
        self.script = script
        self._frames = script._by_index

    def _missing(self, frame_index):
        return BackendError(f"scenario has no frame {frame_index}")


class ScriptedFaceDetector(_Scripted, FaceDetector):
    def detect(self, image, frame_index=None):
        try:
            frame = self._frames[frame_index]
        except KeyError:
            raise self._missing(frame_index) from None
        return frame.rgb_detections if image.data.ndim == 3 else frame.ir_detections


class ScriptedGazeClassifier(_Scripted, GazeClassifier):
    def __init__(self, script: ScenarioScript, smoothing: float = 0.1):
        super().__init__(script)
        self._preds = {r: smoothed_one_hot(r, smoothing) for r in range(1, N_GAZE_REGIONS + 1)}

    def classify(self, face, frame_index=None):
        try:
            return self._preds[self._frames[frame_index].gaze_region]
        except KeyError:
            raise self._missing(frame_index) from None


class ScriptedOcclusionClassifier(_Scripted, OcclusionClassifier):
    _OCCLUDED = OcclusionPrediction(True, 1.0)
    _CLEAR = OcclusionPrediction(False, 0.0)

    def classify(self, image, frame_index=None):
        try:
            frame = self._frames[frame_index]
        except KeyError:
            raise self._missing(frame_index) from None
        occluded = frame.occluded_rgb if image.data.ndim == 3 else frame.occluded_ir
        return self._OCCLUDED if occluded else self._CLEAR


class ScriptedEmbeddingExtractor(_Scripted, EmbeddingExtractor):
    def extract(self, face, modality, frame_index=None):
        seed = self.script.frame(frame_index).identity_seed
        return mock_embedding(seed, self.script.dim, self.script.noise, frame_index, modality)


def scripted_backends(script: ScenarioScript) -> Backends:
    return Backends(
        ScriptedFaceDetector(script),
        ScriptedGazeClassifier(script),
        ScriptedOcclusionClassifier(script),
        ScriptedEmbeddingExtractor(script),
    )
