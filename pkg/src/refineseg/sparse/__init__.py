"""Submanifold / strided / inverse sparse 2-D convolution engine."""

from .coords import CoordIndex, CoordinateError, CoordinateManager, CoordSet, pack, unpack
from .conv import (apply_kernel_map, dense_conv2d, inverse_conv, kernel_map_backward,
                   strided_conv, submanifold_conv)
from .kmap import KernelMap, UnsupportedConfig, build_kernel_map
from .macs import conv_macs, count_macs, dense_conv_macs, linear_macs
from .ops import batch_norm, concat_channels, fold_batch_norm, linear, relu, residual_add
from .tensor import (AlignmentError, SparseTensor, batch_dense_to_sparse, dense_to_sparse,
                     downsample_coords, from_coords, mask_coords, sparse_to_dense)
