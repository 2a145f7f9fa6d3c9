"""Domain types for chart annotations and the annotation file format.

An annotation file is JSON:

    {"chart_id": "...", "image_size": [w, h],
     "objects": [{"id": 0, "class": "bar",
                  "bbox": [x_min, y_min, x_max, y_max],
                  "confidence": 0.9, "ocr_text": "..."}, ...]}

Coordinates are normalized to [0, 1] with origin top-left. Class names are
the snake_case strings of :class:`ObjectClass`. Structural problems raise
errors; semantic oddities only produce warnings (detector output is noisy).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

from .errors import MalformedInput, SchemaViolation

ANNOTATION_FORMAT_VERSION = "1"


class ObjectClass(Enum):
    """Detected chart element categories."""

    CHART_TITLE = "chart_title"
    X_AXIS_TITLE = "x_axis_title"
    Y_AXIS_TITLE = "y_axis_title"
    X_AXIS_LABEL = "x_axis_label"
    Y_AXIS_LABEL = "y_axis_label"
    LEGEND_LABEL = "legend_label"
    LEGEND_MARKER = "legend_marker"
    BAR = "bar"
    LINE = "line"
    DOT_LINE = "dot_line"
    PIE = "pie"
    PIE_SLICE = "pie_slice"
    PIE_LABEL = "pie_label"

    @property
    def is_shape(self) -> bool:
        return self in _SHAPE_CLASSES


_SHAPE_CLASSES = frozenset(
    {
        ObjectClass.BAR,
        ObjectClass.LINE,
        ObjectClass.DOT_LINE,
        ObjectClass.PIE,
        ObjectClass.PIE_SLICE,
        ObjectClass.LEGEND_MARKER,
    }
)

_CLASS_BY_NAME = {c.value: c for c in ObjectClass}


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized image coordinates, origin top-left."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        for name in ("x_min", "y_min", "x_max", "y_max"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                raise SchemaViolation(f"bbox: {name} must be a finite number, got {v!r}")
            if not 0.0 <= v <= 1.0:
                raise SchemaViolation(f"bbox: {name} ({v}) outside [0, 1]")
        if self.x_min > self.x_max:
            raise SchemaViolation(f"bbox: x_min ({self.x_min}) > x_max ({self.x_max})")
        if self.y_min > self.y_max:
            raise SchemaViolation(f"bbox: y_min ({self.y_min}) > y_max ({self.y_max})")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class ChartObject:
    """One detected chart element."""

    id: int
    cls: ObjectClass
    bbox: BBox
    confidence: float
    ocr_text: str | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.id, int) or isinstance(self.id, bool) or self.id < 0:
            raise SchemaViolation(f"object id must be a non-negative integer, got {self.id!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise SchemaViolation(
                f"object {self.id}: confidence ({self.confidence}) outside [0, 1]"
            )


@dataclass(frozen=True)
class ChartAnnotation:
    """Full detector output for one chart image."""

    chart_id: str
    objects: tuple[ChartObject, ...]
    image_size: tuple[int, int]  # (width px, height px), informational only

    def object_by_id(self, object_id: int) -> ChartObject:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(object_id)


@dataclass(frozen=True)
class SemanticWarning:
    """Non-fatal oddity found by :func:`validate_semantics`."""

    code: str
    message: str
    object_id: int | None = None


def parse_annotation(data: bytes | str) -> ChartAnnotation:
    """Parse and fully validate an annotation file.

    Raises MalformedInput for syntax errors and SchemaViolation (naming the
    offending field) for structural problems.
    """
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedInput(f"annotation is not valid UTF-8: {exc}") from exc
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"annotation is not valid JSON: {exc}") from exc

    if not isinstance(raw, dict):
        raise SchemaViolation("top level: expected a JSON object")
    chart_id = raw.get("chart_id")
    if not isinstance(chart_id, str) or not chart_id:
        raise SchemaViolation("chart_id: expected a non-empty string")
    image_size = raw.get("image_size")
    if (
        not isinstance(image_size, list)
        or len(image_size) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in image_size)
    ):
        raise SchemaViolation("image_size: expected [width, height] positive integers")
    objects_raw = raw.get("objects")
    if not isinstance(objects_raw, list) or not objects_raw:
        raise SchemaViolation("objects: expected a non-empty list")

    objects = []
    seen_ids: set[int] = set()
    for pos, entry in enumerate(objects_raw):
        where = f"objects[{pos}]"
        if not isinstance(entry, dict):
            raise SchemaViolation(f"{where}: expected an object")
        obj = _parse_object(entry, where)
        if obj.id in seen_ids:
            raise SchemaViolation(f"{where}.id: duplicate id {obj.id} (ids must be unique)")
        seen_ids.add(obj.id)
        objects.append(obj)

    return ChartAnnotation(
        chart_id=chart_id, objects=tuple(objects), image_size=(image_size[0], image_size[1])
    )


def _parse_object(entry: dict, where: str) -> ChartObject:
    obj_id = entry.get("id")
    if not isinstance(obj_id, int) or isinstance(obj_id, bool) or obj_id < 0:
        raise SchemaViolation(f"{where}.id: expected a non-negative integer, got {obj_id!r}")
    cls_name = entry.get("class")
    if cls_name not in _CLASS_BY_NAME:
        raise SchemaViolation(
            f"{where}.class: unknown class {cls_name!r} (expected one of "
            f"{sorted(_CLASS_BY_NAME)})"
        )
    bbox_raw = entry.get("bbox")
    if (
        not isinstance(bbox_raw, list)
        or len(bbox_raw) != 4
        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox_raw)
    ):
        raise SchemaViolation(f"{where}.bbox: expected [x_min, y_min, x_max, y_max] numbers")
    try:
        bbox = BBox(*(float(v) for v in bbox_raw))
    except SchemaViolation as exc:
        raise SchemaViolation(f"{where}.bbox: {exc}") from exc
    confidence = entry.get("confidence")
    if not isinstance(confidence, (int, float)) or isinstance(confidence, bool):
        raise SchemaViolation(f"{where}.confidence: expected a number")
    if not 0.0 <= confidence <= 1.0:
        raise SchemaViolation(f"{where}.confidence: {confidence} outside [0, 1]")
    ocr_text = entry.get("ocr_text")
    if ocr_text is not None and not isinstance(ocr_text, str):
        raise SchemaViolation(f"{where}.ocr_text: expected a string or null")
    return ChartObject(
        id=obj_id,
        cls=_CLASS_BY_NAME[cls_name],
        bbox=bbox,
        confidence=float(confidence),
        ocr_text=ocr_text,
    )


def serialize_annotation(annotation: ChartAnnotation) -> str:
    """Render an annotation back to its file format; inverse of parse_annotation."""
    objects = []
    for obj in annotation.objects:
        entry: dict = {
            "id": obj.id,
            "class": obj.cls.value,
            "bbox": obj.bbox.as_list(),
            "confidence": obj.confidence,
        }
        if obj.ocr_text is not None:
            entry["ocr_text"] = obj.ocr_text
        objects.append(entry)
    doc = {
        "chart_id": annotation.chart_id,
        "image_size": list(annotation.image_size),
        "objects": objects,
    }
    return json.dumps(doc, indent=2)


def validate_semantics(annotation: ChartAnnotation) -> list[SemanticWarning]:
    """Non-fatal semantic checks over a parsed annotation."""
    warnings: list[SemanticWarning] = []
    classes = [obj.cls for obj in annotation.objects]
    for obj in annotation.objects:
        if obj.ocr_text is not None and obj.cls.is_shape:
            warnings.append(
                SemanticWarning(
                    code="shape_with_ocr",
                    message=f"shape object {obj.id} ({obj.cls.value}) carries ocr_text",
                    object_id=obj.id,
                )
            )
    if ObjectClass.LEGEND_LABEL in classes and ObjectClass.LEGEND_MARKER not in classes:
        warnings.append(
            SemanticWarning(
                code="legend_label_no_marker",
                message="legend label present but no legend marker detected",
            )
        )
    if ObjectClass.PIE_SLICE in classes and ObjectClass.PIE not in classes:
        warnings.append(
            SemanticWarning(
                code="pie_slice_no_pie",
                message="pie slice present but no pie detected",
            )
        )
    return warnings
