"""PASCAL VOC annotation subset: filename, size and boxed objects."""

import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Dict, Union

from pydantic import ValidationError

from app.core.errors import AnnotationError
from app.core.models import Annotation, AnnotationSet, Box

COORDS = ("xmin", "ymin", "xmax", "ymax")


def _text(element: ET.Element, tag: str, default: str | None = None) -> str | None:
    child = element.find(tag)
    if child is None or child.text is None:
        return default
    return child.text.strip()


def _number(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def parse_voc(xml_text: str) -> AnnotationSet:
    """Parse a VOC annotation document.

    Elements outside the supported subset (pose, truncated, difficult, ...)
    are ignored.

    Raises:
        AnnotationError: For malformed XML, missing coordinates, inverted
            boxes or boxes outside the declared image size
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as e:
        raise AnnotationError(f"Malformed VOC XML: {e}") from e
    if root.tag != "annotation":
        raise AnnotationError(f"Expected <annotation> root, got <{root.tag}>")

    result = AnnotationSet(filename=_text(root, "filename", "") or "")
    size = root.find("size")
    if size is not None:
        try:
            result.width = int(_text(size, "width", "0"))
            result.height = int(_text(size, "height", "0"))
            result.depth = int(_text(size, "depth", "3"))
        except ValueError as e:
            raise AnnotationError(f"Invalid <size> element: {e}") from e

    for index, obj in enumerate(root.findall("object")):
        name = _text(obj, "name")
        if not name:
            raise AnnotationError(f"object {index}: missing <name>")
        bndbox = obj.find("bndbox")
        if bndbox is None:
            raise AnnotationError(f"object {index} ({name}): missing <bndbox>")
        values: Dict[str, float] = {}
        for coord in COORDS:
            raw = _text(bndbox, coord)
            if raw is None:
                raise AnnotationError(f"object {index} ({name}): missing <{coord}>")
            try:
                values[coord] = float(raw)
            except ValueError as e:
                raise AnnotationError(f"object {index} ({name}): bad <{coord}> {raw!r}") from e
        try:
            box = Box(**values)
        except ValidationError as e:
            raise AnnotationError(f"object {index} ({name}): inverted box {values}") from e
        if result.width and result.height and (
            box.xmin < 1 or box.ymin < 1 or box.xmax > result.width or box.ymax > result.height
        ):
            raise AnnotationError(
                f"object {index} ({name}): box {box.as_tuple()} outside "
                f"{result.width}x{result.height} image"
            )
        result.objects.append(Annotation(name=name, box=box))
    return result


def emit_voc(annotations: AnnotationSet) -> str:
    """Serialize an AnnotationSet to indented VOC XML."""
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = annotations.filename
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(annotations.width)
    ET.SubElement(size, "height").text = str(annotations.height)
    ET.SubElement(size, "depth").text = str(annotations.depth)
    for ann in annotations.objects:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = ann.name
        bndbox = ET.SubElement(obj, "bndbox")
        for coord, value in zip(COORDS, ann.box.as_tuple()):
            ET.SubElement(bndbox, coord).text = _number(value)
    ET.indent(root, space="  ")
    return ET.tostring(root, encoding="unicode") + "\n"


def read_voc(path: Union[str, Path]) -> AnnotationSet:
    path = Path(path)
    annotations = parse_voc(path.read_text(encoding="utf-8"))
    if not annotations.filename:
        annotations.filename = path.stem
    return annotations


def write_voc(annotations: AnnotationSet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(emit_voc(annotations), encoding="utf-8")
    return path


def read_voc_dir(directory: Union[str, Path]) -> Dict[str, AnnotationSet]:
    """Load every ``*.xml`` in a directory keyed by image id."""
    result = {}
    for path in sorted(Path(directory).glob("*.xml")):
        annotations = read_voc(path)
        result[annotations.image_id or path.stem] = annotations
    return result
