"""CPU inference engine for RECIST-marked CT lesion segmentation.

Submodules are imported lazily so the CLI can pin BLAS thread counts via
environment variables before numpy loads.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "Volume": "nifti",
    "LabelVolume": "nifti",
    "read_nifti": "nifti",
    "read_labels": "nifti",
    "write_nifti": "nifti",
    "RecistAnnotation": "prompts",
    "RecistSphere": "prompts",
    "PromptTokens": "prompts",
    "extract_endpoints": "prompts",
    "recist_sphere": "prompts",
    "embed_prompts": "prompts",
    "ModelConfig": "model",
    "load_weights": "model",
    "forward": "model",
    "manifest": "model",
    "param_count": "model",
    "flop_count": "model",
    "LogitVolume": "postprocess",
    "OffsetSchedule": "postprocess",
    "guarantee_presence": "postprocess",
    "combine_labels": "postprocess",
    "class_presence": "postprocess",
    "assemble_mask": "postprocess",
    "dsc": "metrics",
    "nsd": "metrics",
    "MemoryTrace": "memtrace",
    "EfficiencyReport": "memtrace",
    "trace_memory": "memtrace",
    "CropScaleRecord": "pipeline",
    "InferOptions": "pipeline",
    "preprocess": "pipeline",
    "restore": "pipeline",
    "run_case": "pipeline",
    "infer": "pipeline",
    "evaluate": "pipeline",
    "bench": "pipeline",
}

__all__ = ["__version__", *sorted(_EXPORTS)]


def __getattr__(name):
    module = _EXPORTS.get(name)
    if module is None:
        raise AttributeError(f"module 'recistseg' has no attribute {name!r}")
    import importlib

    return getattr(importlib.import_module(f".{module}", __name__), name)
