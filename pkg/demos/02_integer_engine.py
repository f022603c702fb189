"""Calibrate a small U-Net and compare the FP32, fake-quant and INT8 paths."""
import numpy as np

from retide.int8engine import forward_i8
from retide.metrics import psnr
from retide.model import WeightStore, build_unet_graph, count_ops, forward_f32
from retide.quant import calibrate, forward_fakequant
from retide.tensor import TensorF32

rng = np.random.default_rng(0)
graph = build_unet_graph(3, 3, (16, 32, 32))
print(f"{len(graph.layers)} layers, input side must be a multiple of {graph.granularity}")
for kind, cin, cout in graph.layer_shapes():
    print(f"  {kind:12s} {cin:4d} -> {cout:4d}")

weights = WeightStore.random(graph, rng)
calib = [TensorF32(rng.random((1, 3, 64, 64), dtype=np.float32)) for _ in range(4)]
qm = calibrate(graph, weights, calib)
print("input exponent", qm.input_exp)
print("requant shifts", [qm.shifts[i] for i in graph.weighted])

x = TensorF32(rng.random((1, 3, 64, 64), dtype=np.float32))
ref = forward_f32(graph, weights, x)
fq = forward_fakequant(qm, x)
i8 = forward_i8(qm, x)

# The integer engine and the fake-quant oracle agree bit for bit; both
# differ from FP32 by the quantisation error.
print("int8 == fake-quant:", i8 == fq)
print(f"PSNR(int8, fp32) = {psnr(i8, ref):.2f} dB")
print(f"{count_ops(graph, 64, 64):,} ops per 64x64 frame")
