from .ops import (RunningStats, add, batchnorm_masked, conv2d, conv_flops,
                  count_flops, maxpool2x2, mean_all, mul, relu, reshape,
                  sum_all, tanh_act, transposed_conv2d, where)
from .optim import LambState, LrSchedule, lamb_step, lr_at
from .tensor import (ContractError, DimensionError, NumericError, Param,
                     Tensor, as_tensor, backward, make_node)

__all__ = [
    "ContractError", "DimensionError", "LambState", "LrSchedule", "NumericError",
    "Param", "RunningStats", "Tensor", "add", "as_tensor", "backward",
    "batchnorm_masked", "conv2d", "conv_flops", "count_flops", "lamb_step",
    "lr_at", "make_node", "maxpool2x2", "mean_all", "mul", "relu", "reshape",
    "sum_all", "tanh_act", "transposed_conv2d", "where",
]
