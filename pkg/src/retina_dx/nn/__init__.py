from .checkpoint import (
    BadMagicError,
    CheckpointError,
    CheckpointShapeError,
    TruncatedCheckpointError,
    VersionMismatchError,
    checkpoint_bytes,
    checkpoint_from_bytes,
    load_checkpoint,
    load_tensor,
    save_checkpoint,
    save_tensor,
)
from .layers import LayerStateError, softmax, softmax_xent
from .network import ConfigError, LayerSpec, Network, NetworkConfig, build_network, preset

__all__ = [
    "BadMagicError",
    "CheckpointError",
    "CheckpointShapeError",
    "ConfigError",
    "LayerSpec",
    "LayerStateError",
    "Network",
    "NetworkConfig",
    "TruncatedCheckpointError",
    "VersionMismatchError",
    "build_network",
    "checkpoint_bytes",
    "checkpoint_from_bytes",
    "load_checkpoint",
    "load_tensor",
    "preset",
    "save_checkpoint",
    "save_tensor",
    "softmax",
    "softmax_xent",
]
