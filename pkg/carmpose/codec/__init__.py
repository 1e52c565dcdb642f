from carmpose.codec.grid import (
    CodecConfig,
    compute_loss,
    confidence,
    decode_center,
    encode_targets,
    make_grid_layout,
    select_best,
)

__all__ = [
    "CodecConfig",
    "compute_loss",
    "confidence",
    "decode_center",
    "encode_targets",
    "make_grid_layout",
    "select_best",
]
