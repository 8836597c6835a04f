"""Layer-wise backprop, losses, AdamW and finite-difference checks."""

from .gradcheck import GradCheckReport, grad_check
from .layers import (BasicBlock, BatchNorm, ConvBN, InverseConv, Layer, Linear, Parameter,
                     Identity, ReLU, Sequential, StateError, StridedConv, SubmConv,
                     fold_batch_norms)
from .loss import cross_entropy, log_softmax_rows
from .optim import AdamW, TrainConfig, cosine_lr
