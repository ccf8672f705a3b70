"""Version control for DAG-structured model checkpoints."""

from types import ModuleType as _ModuleType

from .errors import *  # noqa: F401,F403
from .model import (LayerNode, ModelGraph, ParamRef, Tensor, build_model, deserialize_model,
                    read_model_dir, serialize_model, topological_order, write_model_dir)
from .store import ObjectStore, content_key
from .diff import CONTEXTUAL, STRUCTURAL, DiffResult, DivergenceScore, divergence, module_diff
from .deltacodec import (CodecConfig, DeltaRecord, delta_compression, dequantize_delta, lcs_mapping,
                         lossless_compress, lossless_decompress, quantize_delta, resolve_param)
from .hooks import HookSpec, TestOutcome
from .lineage import LineageGraph, LineageNode, Repository

__version__ = "0.1.0"

__all__ = sorted(name for name, obj in list(globals().items())
                 if not name.startswith("_") and not isinstance(obj, _ModuleType))
