"""Run the denoise server in-process, offload an image and compare with the local path."""
import numpy as np

from retide.model import WeightStore, build_unet_graph
from retide.quant import calibrate
from retide.service import Client, DenoiseServer, ServerConfig, denoise_pixels
from retide.tensor import TensorF32

rng = np.random.default_rng(2)
graph = build_unet_graph(3, 3, (8, 16, 16))
weights = WeightStore.random(graph, rng)
qm = calibrate(graph, weights, [TensorF32(rng.random((1, 3, 64, 64), dtype=np.float32))])

image = rng.integers(0, 256, (150, 230, 3), dtype=np.uint8)
config = ServerConfig(host="127.0.0.1", port=0, workers=2, tile=64, overlap=8)

with DenoiseServer(qm, config) as server:
    host, port = server.address
    print(f"server on {host}:{port}")
    with Client(host, port) as client:
        client.ping()
        info = client.model_info()
        print(f"model: {info.cin} -> {info.cout} channels, depth {info.depth}, "
              f"default tile {info.tile}/{info.overlap}, {info.ops_per_tile:,} ops per tile")
        remote = client.submit_job(image, tile=64, overlap=8)

local = denoise_pixels(qm, image, tile=64, overlap=8)
print("response shape", remote.shape, remote.dtype)
print("remote == local:", np.array_equal(remote, local))
