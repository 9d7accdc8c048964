from typing import Any, Dict, List, Optional, TypedDict

from src.datasets import Corpus
from src.netlab import ProbeableNetwork, WeightSnapshot
from src.trainbench import RunRecord


class CellState(TypedDict, total=False):
    """State schema for one matrix cell flowing through the cell graph."""
    cell: Dict[str, Any]  # family, capacity, truncate, scheme config, dataset id, seed
    cell_id: str  # content hash; also the run id and the run directory name
    run_dir: str
    corpus: Corpus
    pretrained: Optional[WeightSnapshot]  # None for RI cells
    network: ProbeableNetwork
    record: RunRecord
    score: float  # test score of the best checkpoint
    probe_rows: List[dict]
    cka: Dict[str, Any]
    status: str  # "done" or "failed"
    error_type: str
    error: str
