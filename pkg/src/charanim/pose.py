"""2-D body poses: file I/O, similarity alignment, transition frames, drawing."""
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .kernels import DISC, SEGMENT, draw_primitives

log = logging.getLogger(__name__)

NUM_JOINTS = 18
JOINT_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)
# neck, shoulders, hips
ANCHOR_JOINTS = (1, 2, 5, 8, 11)

LIMBS = (
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7), (1, 8), (8, 9), (9, 10),
    (1, 11), (11, 12), (12, 13), (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
)
COLORS = np.array([
    [255, 0, 0], [255, 85, 0], [255, 170, 0], [255, 255, 0], [170, 255, 0],
    [85, 255, 0], [0, 255, 0], [0, 255, 85], [0, 255, 170], [0, 255, 255],
    [0, 170, 255], [0, 85, 255], [0, 0, 255], [85, 0, 255], [170, 0, 255],
    [255, 0, 255], [255, 0, 170], [255, 0, 85],
], dtype=np.uint8)


class PoseError(ValueError):
    pass


class PoseFileError(PoseError):
    """Malformed pose JSON or a frame that violates the schema."""


class AlignmentError(PoseError):
    def __init__(self, message, frame_index=None):
        super().__init__(message if frame_index is None else f"frame {frame_index}: {message}")
        self.frame_index = frame_index


class OutOfCanvasWarning(UserWarning):
    def __init__(self, count):
        super().__init__(f"{count} keypoint(s) clamped to the canvas")
        self.count = count


class Keypoint(NamedTuple):
    x: float
    y: float
    confidence: float


@dataclass(frozen=True, eq=False)
class Pose:
    """18 COCO-order keypoints as an (18, 3) array of ``x, y, confidence``."""

    keypoints: np.ndarray
    canvas_width: int
    canvas_height: int

    def __post_init__(self):
        kp = np.array(self.keypoints, dtype=np.float64)
        if kp.shape != (NUM_JOINTS, 3):
            raise PoseError(f"expected ({NUM_JOINTS}, 3) keypoints, got {kp.shape}")
        if np.any((kp[:, 2] < 0) | (kp[:, 2] > 1)) or not np.all(np.isfinite(kp)):
            raise PoseError("confidences must lie in [0, 1] and coordinates must be finite")
        if self.canvas_width <= 0 or self.canvas_height <= 0:
            raise PoseError("canvas dimensions must be positive")
        vis = kp[:, 2] > 0
        xs, ys = kp[vis, 0], kp[vis, 1]
        if np.any((xs < 0) | (xs >= self.canvas_width) | (ys < 0) | (ys >= self.canvas_height)):
            raise PoseError("confident keypoint outside the canvas")
        kp.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)

    @property
    def visible(self):
        return self.keypoints[:, 2] > 0

    @property
    def xy(self):
        return self.keypoints[:, :2]

    def keypoint(self, index):
        return Keypoint(*(float(v) for v in self.keypoints[index]))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (self.canvas_width == other.canvas_width
                and self.canvas_height == other.canvas_height
                and np.array_equal(self.keypoints, other.keypoints))

    def __hash__(self):
        return hash((self.canvas_width, self.canvas_height, self.keypoints.tobytes()))


@dataclass
class PoseSequence:
    """Ordered poses; ``source`` optionally carries the source-image pose."""

    poses: list
    source_index_offset: int = 0
    source: Pose | None = None

    def __post_init__(self):
        dims = {(p.canvas_width, p.canvas_height) for p in self.poses}
        if len(dims) > 1:
            raise PoseError(f"poses span several canvases: {sorted(dims)}")

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def __iter__(self):
        return iter(self.poses)


@dataclass(frozen=True)
class SimilarityTransform:
    """``p -> scale * R(rotation) @ p + translation``."""

    scale: float = 1.0
    rotation: float = 0.0
    translation: tuple = field(default=(0.0, 0.0))

    def __post_init__(self):
        if not self.scale > 0:
            raise PoseError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))

    @property
    def matrix(self):
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        if self.rotation == 0.0:
            return xy * self.scale + np.asarray(self.translation)
        return xy @ self.matrix.T + np.asarray(self.translation)

    def inverse(self):
        inv = SimilarityTransform(1.0 / self.scale, -self.rotation)
        tx, ty = inv.apply(np.asarray(self.translation))
        return SimilarityTransform(inv.scale, inv.rotation, (-tx, -ty))

    def compose(self, first):
        """The transform equivalent to applying ``first`` and then ``self``."""
        t = self.apply(np.asarray(first.translation))
        return SimilarityTransform(self.scale * first.scale, self.rotation + first.rotation, tuple(t))

    @classmethod
    def identity(cls):
        return cls()


# --- file I/O ---------------------------------------------------------------

def parse_pose_file(path):
    """Read the pose JSON format into a ``PoseSequence``.

    Missing joints are written with confidence 0.  An optional top-level
    ``"source"`` entry (54 numbers) holds the source-image pose; it is
    returned as ``sequence.source`` when present, otherwise ``None``.
    """
    raw = Path(path).read_bytes()
    text = raw.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[:e.pos].encode("utf-8"))
        raise PoseFileError(f"{path}: malformed JSON at byte offset {offset}: {e.msg}") from None
    return poses_from_dict(doc, origin=str(path))


def poses_from_dict(doc, origin="<pose data>"):
    if not isinstance(doc, dict):
        raise PoseFileError(f"{origin}: top level must be an object")
    for key in ("canvas_width", "canvas_height", "frames"):
        if key not in doc:
            raise PoseFileError(f"{origin}: missing key {key!r}")
    w, h = doc["canvas_width"], doc["canvas_height"]
    if not (isinstance(w, int) and isinstance(h, int)) or w <= 0 or h <= 0:
        raise PoseFileError(f"{origin}: canvas dimensions must be positive integers")
    frames = doc["frames"]
    if not isinstance(frames, list):
        raise PoseFileError(f"{origin}: 'frames' must be a list")

    def build(values, label):
        if not isinstance(values, list) or len(values) != NUM_JOINTS * 3:
            n = len(values) if isinstance(values, list) else "non-list"
            raise PoseFileError(f"{origin}: {label} has {n} numbers, expected {NUM_JOINTS * 3}")
        try:
            kp = np.array(values, dtype=np.float64).reshape(NUM_JOINTS, 3)
        except (TypeError, ValueError):
            raise PoseFileError(f"{origin}: {label} holds non-numeric values") from None
        kp[kp[:, 2] == 0, :2] = 0.0
        try:
            return Pose(kp, w, h)
        except PoseError as e:
            raise PoseFileError(f"{origin}: {label}: {e}") from None

    poses = [build(f, f"frame {i}") for i, f in enumerate(frames)]
    source = build(doc["source"], "source") if "source" in doc else None
    return PoseSequence(poses, source=source)


def pose_to_list(pose):
    return [float(v) for v in pose.keypoints.reshape(-1)]


def write_pose_file(path, poses, source=None):
    poses = list(poses)
    if not poses:
        raise PoseError("nothing to write")
    doc = {
        "canvas_width": poses[0].canvas_width,
        "canvas_height": poses[0].canvas_height,
        "frames": [pose_to_list(p) for p in poses],
    }
    if source is not None:
        doc["source"] = pose_to_list(source)
    Path(path).write_text(json.dumps(doc))


# --- alignment --------------------------------------------------------------

def estimate_alignment(source, target, allow_rotation=False, anchors=ANCHOR_JOINTS):
    """Least-squares similarity mapping ``target`` anchor joints onto ``source``.

    Raises ``AlignmentError`` with fewer than two anchors confident in both.
    """
    idx = [j for j in anchors if source.keypoints[j, 2] > 0 and target.keypoints[j, 2] > 0]
    if len(idx) < 2:
        raise AlignmentError(f"only {len(idx)} shared anchor joint(s); need 2")
    src = source.xy[idx]
    tgt = target.xy[idx]
    src_mean = src.mean(axis=0)
    tgt_mean = tgt.mean(axis=0)
    a = tgt - tgt_mean
    b = src - src_mean
    denom = np.sum(a * a)
    if denom == 0.0:
        raise AlignmentError("anchor joints coincide; scale is undefined")
    if allow_rotation:
        # 2-D Umeyama via complex numbers: b ~ z * a
        za = a[:, 0] + 1j * a[:, 1]
        zb = b[:, 0] + 1j * b[:, 1]
        z = np.sum(np.conj(za) * zb) / denom
        scale, rotation = float(np.abs(z)), float(np.angle(z))
    else:
        scale, rotation = float(np.sum(a * b) / denom), 0.0
    if not scale > 0:
        raise AlignmentError("least-squares scale is not positive (mirrored anchors?)")
    t = SimilarityTransform(scale, rotation)
    translation = src_mean - t.apply(tgt_mean)
    return SimilarityTransform(scale, rotation, tuple(translation))


def apply_alignment(pose, transform):
    """Map confident keypoints through ``transform``; clamp to the canvas.

    Clamping is reported with an ``OutOfCanvasWarning`` carrying the count.
    """
    kp = pose.keypoints.copy()
    vis = kp[:, 2] > 0
    xy = transform.apply(kp[vis, :2])
    hi = np.array([pose.canvas_width - 1, pose.canvas_height - 1], dtype=np.float64)
    clamped = np.clip(xy, 0.0, hi)
    n_out = int(np.any(clamped != xy, axis=1).sum())
    if n_out:
        warnings.warn(OutOfCanvasWarning(n_out), stacklevel=2)
    kp[vis, :2] = clamped
    return Pose(kp, pose.canvas_width, pose.canvas_height)


# --- transitions ------------------------------------------------------------

def _ease(s, easing):
    if easing == "linear":
        return s
    if easing == "smoothstep":
        return s * s * (3.0 - 2.0 * s)
    raise PoseError(f"unknown easing {easing!r}")


def blend_poses(a, b, s):
    """Pose at fraction ``s`` from ``a`` to ``b``; joints missing in either are missing."""
    both = (a.keypoints[:, 2] > 0) & (b.keypoints[:, 2] > 0)
    kp = np.zeros((NUM_JOINTS, 3))
    kp[both, :2] = a.xy[both] * (1.0 - s) + b.xy[both] * s
    kp[both, 2] = a.keypoints[both, 2] * (1.0 - s) + b.keypoints[both, 2] * s
    return Pose(kp, a.canvas_width, a.canvas_height)


def interpolate_transition(source, first_target, t, easing="linear"):
    """``t`` intermediate poses strictly between ``source`` and ``first_target``."""
    if t < 0:
        raise PoseError("transition frame count must be non-negative")
    if (source.canvas_width, source.canvas_height) != (first_target.canvas_width, first_target.canvas_height):
        raise PoseError("transition endpoints live on different canvases")
    return [blend_poses(source, first_target, _ease(k / (t + 1), easing)) for k in range(1, t + 1)]


def build_target_sequence(source_pose, desired, t, easing="linear", allow_rotation=False,
                          per_frame=False):
    """``[source, t transition poses, aligned desired poses]``, length M + t + 1.

    By default one transform, estimated from the first desired pose, aligns
    the whole clip so its own motion survives; ``per_frame=True`` aligns each
    desired pose independently.
    """
    desired = list(desired)
    if not desired:
        raise PoseError("desired pose sequence is empty")
    aligned = []
    transform = None
    for i, p in enumerate(desired):
        if per_frame or transform is None:
            try:
                transform = estimate_alignment(source_pose, p, allow_rotation=allow_rotation)
            except AlignmentError as e:
                raise AlignmentError(str(e), frame_index=i) from None
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", OutOfCanvasWarning)
            aligned.append(apply_alignment(p, transform))
        for w in caught:
            log.warning("desired frame %d: %s", i, w.message)
    transition = interpolate_transition(source_pose, aligned[0], t, easing=easing)
    return PoseSequence([source_pose, *transition, *aligned], source_index_offset=t)


# --- drawing ----------------------------------------------------------------

def skeleton_primitives(pose, width, height, joint_radius=4.0, limb_width=4.0):
    """Primitive table (see ``kernels.draw_primitives``) for the standard skeleton."""
    sx = width / pose.canvas_width
    sy = height / pose.canvas_height
    xy = pose.xy * np.array([sx, sy])
    vis = pose.visible
    prims, colors = [], []
    for k, (a, b) in enumerate(LIMBS):
        if vis[a] and vis[b]:
            prims.append((SEGMENT, xy[a, 0], xy[a, 1], xy[b, 0], xy[b, 1], limb_width / 2.0))
            colors.append(COLORS[k])
    for j in range(NUM_JOINTS):
        if vis[j]:
            prims.append((DISC, xy[j, 0], xy[j, 1], xy[j, 0], xy[j, 1], joint_radius))
            colors.append(COLORS[j])
    return np.array(prims, dtype=np.float64).reshape(-1, 6), np.array(colors, dtype=np.uint8).reshape(-1, 3)


def rasterize_pose(pose, width, height, joint_radius=4.0, limb_width=4.0, use_numba=None):
    """Draw the skeleton as coloured limbs and joints on black, (H, W, 3) uint8."""
    if width <= 0 or height <= 0:
        raise PoseError("raster size must be positive")
    img = np.zeros((height, width, 3), dtype=np.uint8)
    prims, colors = skeleton_primitives(pose, width, height, joint_radius, limb_width)
    return draw_primitives(img, prims, colors, use_numba=use_numba)
