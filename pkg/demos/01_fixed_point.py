"""Power-of-two quantisation, requantisation and the fixed-point LeakyReLU."""
import numpy as np

from retide.int8engine import leaky_relu_i8, requantize
from retide.model import LEAKY_SLOPE
from retide.quant import dequantize, pick_scale, quantize_tensor
from retide.tensor import TensorF32

spacer = "_" * 60

# A scale exponent p means real value = code * 2**p. pick_scale returns the
# smallest p whose int8 range still covers the observed maximum.
for maxabs in (127.0, 1.0, 0.992, 0.0, 3.3):
    print(f"pick_scale({maxabs}) = {pick_scale(maxabs)}")

print(spacer)
x = TensorF32(np.array([0.5, -0.3, 0.0078125, 10.0], np.float32).reshape(1, 1, 1, 4))
q = quantize_tensor(x, -6)
print("values        ", x.data.ravel())
print("codes at p=-6 ", q.data.ravel(), "(10.0 saturates at 127)")
print("dequantised   ", dequantize(q).data.ravel())

print(spacer)
# Accumulators come back to int8 with a rounded right shift; ties go to even.
for acc, shift in [(1000, 3), (1000, 4), (20, 3), (12, 3), (100000, 0)]:
    print(f"requantize({acc}, {shift}) = {requantize(acc, shift)}")

print(spacer)
print("LeakyReLU slope:", LEAKY_SLOPE, "= 26/256")
codes = np.array([-128, -100, -20, -5, -4, 0, 50], np.int8)
print("q               ", codes)
print("leaky_relu_i8(q)", leaky_relu_i8(codes))
