"""Joint local and global contrastive pre-training for 12-lead ECG, in numpy."""
from .errors import CheckpointError, ContractError, DataError, NumericError

__version__ = "0.1.0"

__all__ = ["CheckpointError", "ContractError", "DataError", "NumericError", "__version__"]
