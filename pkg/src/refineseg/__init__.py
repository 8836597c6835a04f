"""Sparse high-resolution refinement of low-resolution semantic segmentation.

A frozen baseline predicts at half resolution; pixels whose upsampled
prediction has high entropy are re-predicted at full resolution by a sparse
U-Net, and a learned gate fuses the two predictions.
"""

from .checkpoint import CheckpointError
from .ensembler import (GatedEnsembler, ensemble_direct, ensemble_entropy, ensemble_oracle,
                        scatter_refinements)
from .refiner import DESK_CHANNELS, RefinerConfig, SparseUNet, build_refiner, parameter_count
from .selector import (SelectionMask, entropy_map, select_entropy, select_magnitude,
                       select_random, selector_metrics)

__version__ = "0.1.0"
