"""Numba signatures for kernels that take vector fields as arguments.

Declaring function arguments with a ``FunctionType`` keeps the compiled
kernels independent of the particular field object, so they are compiled
once and then loaded from the on-disk cache.
"""
from numba import types

f8 = types.float64
i8 = types.int64
a1 = types.float64[::1]
a2 = types.float64[:, ::1]
a3 = types.float64[:, :, ::1]

FIELD_T = types.FunctionType(a1(a1, a1))
JAC_T = types.FunctionType(types.UniTuple(a2, 2)(a1, a1))

# e0, x_des, n_sub, dt, Q, R, P, eps_omega, pos_dims, sep_pos, sep_thr, nb_pos,
# nb_thr, obs_c, obs_thr, ws_c, ws_thr, delta, weight, stride, backoff
PROBLEM_T = (a1, a1, i8, f8, a2, a2, a2, f8, i8, a3, a1, a3, a1, a2, a1, a1, f8, a1, a1, i8, f8)
PROBLEM_TUPLE = types.Tuple(PROBLEM_T)

EVALUATE_SIG = types.Tuple((f8, f8, f8, f8, a2))(FIELD_T, a2, *PROBLEM_T)
VALUE_GRAD_SIG = types.Tuple((f8, a2))(FIELD_T, JAC_T, a2, *PROBLEM_T, f8)
FD_GRAD_SIG = a2(FIELD_T, a2, *PROBLEM_T, f8, f8)
SPG_SIG = types.Tuple((a2, i8))(FIELD_T, JAC_T, a2, PROBLEM_TUPLE, f8, f8, i8, i8, f8, f8,
                                i8, f8, f8)
ROLLOUT_SIG = a2(FIELD_T, a1, a1, a2, i8, f8)
