"""Python access to the chest X-ray triage core."""

import json as _json

from . import _core
from ._core import (
    Model,
    NotAnImage,
    ServiceStartupError,
    ManifestError,
    build_covid_net,
    build_filter_net,
    class_weights,
    compute_cam,
    confusion_matrix,
    decode_image,
    encode_png,
    gradcheck,
    load_model,
    pca_project,
    plateau_lrs,
    resize_bilinear,
    rotate_quarter,
    sensitivity_specificity,
    split_manifest,
    step_decay_lr,
    synth_upright,
    weighted_smoothed_ce,
    write_synthetic_corpus,
)

__all__ = [
    "Model",
    "NotAnImage",
    "ServiceStartupError",
    "ManifestError",
    "TriageService",
    "aggregate_runs",
    "build_covid_net",
    "build_filter_net",
    "class_weights",
    "compute_cam",
    "confusion_matrix",
    "decode_image",
    "encode_png",
    "gradcheck",
    "load_manifest",
    "load_model",
    "pca_project",
    "plateau_lrs",
    "resize_bilinear",
    "rotate_quarter",
    "sensitivity_specificity",
    "split_manifest",
    "step_decay_lr",
    "synth_upright",
    "weighted_smoothed_ce",
    "write_synthetic_corpus",
]


def aggregate_runs(matrices, sample_std=False):
    """Summed matrix, pooled metrics and per-class mean/std over runs."""
    return _json.loads(_core.aggregate_runs_json(matrices, sample_std))


def load_manifest(path):
    """Task, record count and class counts of a manifest CSV."""
    return _json.loads(_core.load_manifest_json(str(path)))


class TriageService:
    """In-process analysis pipeline; results are plain dicts."""

    def __init__(self, *args, **kwargs):
        self._svc = _core.TriageService(*args, **kwargs)

    def analyze(self, data, filename):
        return _json.loads(self._svc.analyze_json(data, filename))

    def result(self, request_id):
        text = self._svc.result_json(request_id)
        return None if text is None else _json.loads(text)

    def history(self, limit=20):
        return _json.loads(self._svc.history_json(limit))

    def health(self):
        return _json.loads(self._svc.health_json())
