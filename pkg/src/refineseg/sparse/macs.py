"""Multiply-accumulate accounting."""

from __future__ import annotations

from .kmap import KernelMap


def conv_macs(kmap: KernelMap, cin: int, cout: int) -> int:
    return kmap.total_pairs * cin * cout


def dense_conv_macs(kernel_size: int, cin: int, cout: int, height: int, width: int) -> int:
    """Padded dense convolution: every output position touches all K*K taps."""
    return kernel_size * kernel_size * cin * cout * height * width


def linear_macs(rows: int, cin: int, cout: int) -> int:
    return rows * cin * cout


def count_macs(layer, kmap: KernelMap | None = None, rows: int | None = None) -> int:
    """MACs of one layer execution.

    ``layer`` needs ``in_channels``/``out_channels``; convs take their kernel
    map, linear layers take the row count.
    """
    if kmap is not None:
        return conv_macs(kmap, layer.in_channels, layer.out_channels)
    if rows is None:
        raise ValueError("need a kernel map or a row count")
    return linear_macs(rows, layer.in_channels, layer.out_channels)
