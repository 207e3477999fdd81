from .conv import conv3d, conv_transpose3d, instance_norm, norm_layer, trilinear_upsample
from .gradcheck import gradcheck, gradcheck_tensors, relative_error
from .tensor import (
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    current_tape,
    div,
    elementwise,
    exp,
    flip,
    get_dtype,
    getitem,
    leaky_relu,
    log,
    log_softmax,
    make_result,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    precision,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    tanh,
    transpose,
    tsum,
    use_tape,
)
