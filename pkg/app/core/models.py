from typing import List

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Box(BaseModel):
    """Axis-aligned box in pixel coordinates."""

    model_config = ConfigDict(frozen=True)

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    @model_validator(mode="after")
    def _check_order(self) -> "Box":
        if self.xmin >= self.xmax or self.ymin >= self.ymax:
            raise ValueError(
                f"inverted box ({self.xmin}, {self.ymin}, {self.xmax}, {self.ymax})"
            )
        return self

    def as_tuple(self):
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


class Annotation(BaseModel):
    """One labelled object."""

    name: str
    box: Box


class AnnotationSet(BaseModel):
    """Ground-truth objects of one image."""

    filename: str = ""
    width: int = 0
    height: int = 0
    depth: int = 3
    objects: List[Annotation] = Field(default_factory=list)

    @property
    def image_id(self) -> str:
        return self.filename.rsplit(".", 1)[0]


class Detection(BaseModel):
    """Detector output for one object."""

    model_config = ConfigDict(frozen=True)

    image_id: str
    box: Box
    confidence: float = Field(ge=0.0, le=1.0)
    class_name: str

    @property
    def sort_key(self):
        """Descending confidence, then image id, then box."""
        return (-self.confidence, self.image_id, self.box.as_tuple())

