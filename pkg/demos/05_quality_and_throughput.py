"""AWGN, PSNR/SSIM on a few photographs, and GOPS accounting."""
import skimage.data

from retide.metrics import add_awgn, psnr, run_bench, run_eval, ssim
from retide.model import WeightStore, build_unet_graph
from retide.quant import calibrate
from retide.tensor import TensorF32, from_hwc

clean = from_hwc(skimage.data.astronaut())
noisy = add_awgn(clean, 25, seed=1234)
print(f"astronaut at sigma 25: PSNR {psnr(noisy, clean):.2f} dB, SSIM {ssim(noisy, clean):.4f}")

# Returning the noisy input is the baseline any denoiser must beat;
# its PSNR sits near the closed-form 20*log10(255/sigma).
photos = [(n, from_hwc(getattr(skimage.data, n)())) for n in ("astronaut", "coffee", "chelsea")]
report = run_eval(lambda x: x, photos, [15, 25, 50], seed=1234)
for sigma, (p, s, n) in report.aggregate().items():
    print(f"identity, sigma={sigma:g}: PSNR {p:.2f} dB  SSIM {s:.4f}  over {n} images")

graph = build_unet_graph(3, 3, (8, 16, 16))
qm = calibrate(graph, WeightStore.random(graph, 0), [TensorF32.zeros(1, 3, 64, 64)])
bench = run_bench(qm, 256, 256, iters=3, watts=18.4)
print(f"{bench.ops:,} ops in {bench.elapsed:.3f} s -> {bench.gops:.3f} GOPS, "
      f"{bench.gops_per_watt:.4f} GOPS/W at 18.4 W")
