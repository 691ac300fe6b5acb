"""Detection-driven spatial cropping.

A person detector supplies per-frame axis-aligned boxes.  When any frame
contains more than one person, the clip is cropped to the union of every box
across every frame (the smallest rectangle containing all detections) so the
downstream network spends its fixed input resolution on the region where an
interaction can occur.  With at most one person per frame the full frame is
kept: a single box would discard scene context without isolating an
interaction.

Box coordinates are continuous, x rightward and y downward, with
``x_min <= x_max`` and ``y_min <= y_max``.  Pixel extraction rounds the union
box outward (floor the minima, ceil the maxima) and clamps to the frame, so
the crop never loses detected content to rounding.
"""

import json
import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import BoundsError, FormatError
from .tensor import check_tensor


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, continuous coordinates, min corner inclusive."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (math.isfinite(self.x_min) and math.isfinite(self.y_min)
                and math.isfinite(self.x_max) and math.isfinite(self.y_max)):
            raise ValueError(f"non-finite box corner: {self}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box: {self}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"negative box corner: {self}")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    def contains(self, other):
        """Whether ``other`` lies entirely inside this box."""
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and self.x_max >= other.x_max and self.y_max >= other.y_max)

    def translated(self, dx, dy):
        return BBox(self.x_min + dx, self.y_min + dy,
                    self.x_max + dx, self.y_max + dy)


def clamp_box(x_min, y_min, x_max, y_max, height, width):
    """Clamp raw detector output to the frame rectangle.

    Raw corners may poke outside the frame; ordering must already hold.
    """
    if x_min > x_max or y_min > y_max:
        raise ValueError(f"inverted raw box ({x_min}, {y_min}, {x_max}, "
                         f"{y_max})")
    return BBox(min(max(x_min, 0.0), float(width)),
                min(max(y_min, 0.0), float(height)),
                min(max(x_max, 0.0), float(width)),
                min(max(y_max, 0.0), float(height)))


@dataclass
class DetectionSequence:
    """Per-frame detection boxes for one clip, already frame-clamped."""

    frames: list
    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"non-positive frame dims "
                             f"({self.height}, {self.width})")

    @property
    def frame_count(self):
        return len(self.frames)

    @property
    def max_people(self):
        """Largest per-frame box count across the clip."""
        return max((len(boxes) for boxes in self.frames), default=0)


@dataclass(frozen=True)
class CropDecision:
    """Outcome of the crop policy for one clip."""

    applied: bool
    box: BBox
    max_people: int


class DetectorAdapter(Protocol):
    """Anything that can produce boxes for a single frame."""

    def detect(self, frame, index) -> list:
        ...


class ReplayDetector:
    """Adapter that replays a previously recorded detection sequence."""

    def __init__(self, sequence):
        self.sequence = sequence

    def detect(self, frame, index):
        return list(self.sequence.frames[index])


def run_detector(video, adapter):
    """Run an adapter over every frame of a (T,H,W,C) clip."""
    check_tensor(video, rank=4, name="video")
    t, height, width, _ = video.shape
    frames = []
    for i in range(t):
        boxes = []
        for box in adapter.detect(video[i], i):
            boxes.append(clamp_box(box.x_min, box.y_min, box.x_max, box.y_max,
                                   height, width))
        frames.append(boxes)
    return DetectionSequence(frames=frames, height=height, width=width)


def parse_detections(source, height, width):
    """Parse a JSON-lines detection stream into a :class:`DetectionSequence`.

    Each line is an object ``{"frame": i, "boxes": [[x_min, y_min, x_max,
    y_max], ...]}``.  Frames may appear in any order but the indices must
    form exactly 0..T-1 with no duplicates.  Box corners are clamped to the
    frame after validating ordering; a line with ``min > max`` is rejected
    with its line number.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")
    by_index = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON: {exc.msg}", line=lineno) from None
        if not isinstance(record, dict) or "frame" not in record \
                or "boxes" not in record:
            raise FormatError("expected object with 'frame' and 'boxes'",
                              line=lineno)
        index = record["frame"]
        if not isinstance(index, int) or index < 0:
            raise FormatError(f"bad frame index {index!r}", line=lineno)
        if index in by_index:
            raise FormatError(f"duplicate frame index {index}", line=lineno)
        boxes = []
        if not isinstance(record["boxes"], list):
            raise FormatError("'boxes' must be a list", line=lineno)
        for entry in record["boxes"]:
            if not isinstance(entry, list) or len(entry) != 4:
                raise FormatError(f"box must be [x_min, y_min, x_max, y_max], "
                                  f"got {entry!r}", line=lineno)
            try:
                corners = [float(v) for v in entry]
            except (TypeError, ValueError):
                raise FormatError(f"non-numeric box corner in {entry!r}",
                                  line=lineno) from None
            try:
                boxes.append(clamp_box(*corners, height=height, width=width))
            except ValueError as exc:
                raise FormatError(str(exc), line=lineno) from None
        by_index[index] = boxes
    if not by_index:
        raise FormatError("empty detection stream")
    count = len(by_index)
    missing = sorted(set(range(count)) - set(by_index))
    extra = sorted(i for i in by_index if i >= count)
    if missing or extra:
        raise FormatError(f"frame indices must cover 0..{count - 1} exactly; "
                          f"missing {missing}, out of range {extra}")
    return DetectionSequence(frames=[by_index[i] for i in range(count)],
                             height=height, width=width)


def compute_crop_box(detections):
    """Apply the crop policy to a detection sequence.

    Returns a :class:`CropDecision`.  The union box covers every detection in
    every frame; cropping is applied exactly when some frame holds more than
    one box.  When not applied the box is the full frame.
    """
    if detections.frame_count < 1:
        raise FormatError("detection sequence has no frames")
    height, width = detections.height, detections.width
    full = BBox(0.0, 0.0, float(width), float(height))
    max_people = detections.max_people
    if max_people <= 1:
        return CropDecision(applied=False, box=full, max_people=max_people)
    x_min = y_min = math.inf
    x_max = y_max = -math.inf
    for boxes in detections.frames:
        for box in boxes:
            x_min = min(x_min, box.x_min)
            y_min = min(y_min, box.y_min)
            x_max = max(x_max, box.x_max)
            y_max = max(y_max, box.y_max)
    return CropDecision(applied=True,
                        box=BBox(x_min, y_min, x_max, y_max),
                        max_people=max_people)


def pixel_bounds(box, height, width):
    """Outward-rounded integer bounds (y0, y1, x0, x1) of a box.

    Half-open on the max side; guaranteed non-empty and inside the frame.
    """
    y0 = max(0, math.floor(box.y_min))
    x0 = max(0, math.floor(box.x_min))
    y1 = min(height, math.ceil(box.y_max))
    x1 = min(width, math.ceil(box.x_max))
    # degenerate zero-area boxes still yield one pixel
    if y1 <= y0:
        y1 = min(height, y0 + 1)
        y0 = y1 - 1
    if x1 <= x0:
        x1 = min(width, x0 + 1)
        x0 = x1 - 1
    return y0, y1, x0, x1


def apply_crop(video, decision):
    """Extract the decided region from a (T,H,W,C) clip.

    A decision that was not applied returns the input unchanged.  The box
    must lie within the clip's spatial extents.
    """
    check_tensor(video, rank=4, name="video")
    if not decision.applied:
        return video
    _, height, width, _ = video.shape
    box = decision.box
    if box.x_max > width or box.y_max > height:
        raise BoundsError(f"crop box {box} exceeds frame extents "
                          f"({height}, {width})")
    y0, y1, x0, x1 = pixel_bounds(box, height, width)
    return np.ascontiguousarray(video[:, y0:y1, x0:x1, :])
