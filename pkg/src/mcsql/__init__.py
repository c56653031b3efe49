"""Content-enhanced, meta-learned text-to-SQL parsing for single tables."""

from .content_matcher import ContentLink, literal_similarity, select_cells
from .data_model import Agg, Condition, Example, Op, SQLQuery, TableData, TableSchema
from .submodules import MCSQL, ModelConfig
from .encoder import EncoderConfig

__all__ = [
    "Agg", "Condition", "ContentLink", "EncoderConfig", "Example", "MCSQL", "ModelConfig",
    "Op", "SQLQuery", "TableData", "TableSchema", "literal_similarity", "select_cells",
]
__version__ = "0.1.0"
