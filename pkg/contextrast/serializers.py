"""
Report Serializers
Schemas for the JSON artefacts written by training, evaluation and reporting
"""
from typing import Optional

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from .exceptions import FormatError


class LossReportSchema(BaseModel):
    """Loss report of one training iteration"""
    model_config = ConfigDict(extra='forbid')

    l_ce: float
    l_pa: float
    l_pa_per_layer: list[float]
    total: float
    grad_norm_embeddings: float
    grad_norm_anchors: float

    @field_validator('l_ce', 'l_pa')
    @classmethod
    def validate_non_negative(cls, value):
        if value < 0:
            raise ValueError("loss terms must not be negative")
        return value


class TrainLogRecord(BaseModel):
    """One line of train_log.jsonl"""
    model_config = ConfigDict(extra='forbid')

    iter: int
    lr: float
    l_ce: float
    l_pa: float
    total: float
    err_px_per_class: list[int]
    report: LossReportSchema


class MetricsSchema(BaseModel):
    """metrics.json as written by `train` and `eval`"""
    model_config = ConfigDict(extra='allow')

    miou: float
    per_class_iou: list[Optional[float]]
    iiou: Optional[float] = None
    b_miou: dict[str, Optional[float]]
    A: Optional[float] = None
    U: Optional[float] = None
    U_l: dict[str, Optional[float]] = {}
    pixel_accuracy: Optional[float] = None
    cos_profile: dict[str, dict[str, Optional[float]]] = {}


class TensorEntry(BaseModel):
    name: str
    shape: list[int]
    record: int


class CheckpointManifest(BaseModel):
    """manifest.json next to checkpoint.ctxf"""
    model_config = ConfigDict(extra='allow')

    format: str
    version: int
    tensors: list[TensorEntry]
    config: dict

    @field_validator('format')
    @classmethod
    def validate_format(cls, value):
        if value != 'ctxf-checkpoint':
            raise ValueError(f"unknown checkpoint format {value!r}")
        return value


def validate_document(schema, data):
    """Validate a decoded JSON document, mapping schema failures to FormatError"""
    try:
        return schema.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = '.'.join(str(part) for part in first['loc'])
        raise FormatError(f"{schema.__name__}: {where}: {first['msg']}", 0) from e
