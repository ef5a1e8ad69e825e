"""
Point clouds where coordinates and values coincide
==================================================

Each sphere is 256 surface points. The model treats every noisy point as its
own query coordinate (``values_as_coords``), so generation moves points
rather than colouring fixed positions. We score samples against held-out
spheres and against plain Gaussian noise with the same metric code.
"""

import numpy as np

from inrflow.fields import DatasetSpec, generate_dataset
from inrflow.io import write_ply
from inrflow.metrics import evaluate_sets, mmd
from inrflow.model import ModelConfig
from inrflow.sampling import SamplerConfig, sample_ode
from inrflow.training import TrainConfig, create_train_state, train

spec = DatasetSpec("parametric_shapes_3d", 256, 512 + 16, seed=0, shape_weights={"sphere": 1.0})
data = generate_dataset(spec)
train_set, held_out = data[:512], data[512:]

model_cfg = ModelConfig(d_in=3, d_out=3, num_latents=16, latent_dim=128, trunk_layers=4, heads=4,
                        pseudo_coord_mode="vanilla", values_as_coords=True)
train_cfg = TrainConfig(batch_size=16, learning_rate=3e-4)
state = create_train_state(model_cfg, train_cfg)
train(state, train_set, train_cfg, steps=1500,
      callback=lambda s: s.step % 250 == 0 and print(f"step {s.step}  ema loss {s.ema_loss:.4f}"))

traj = sample_ode(state.ema_model(), np.zeros((256, 3)), cfg=SamplerConfig(steps=50), num_samples=16)
generated = list(traj.final)
reference = [s.values for s in held_out]
noise = [np.random.default_rng(k).standard_normal((256, 3)) for k in range(16)]

print("MMD-CD generated:", mmd(generated, reference))
print("MMD-CD noise:    ", mmd(noise, reference))
radii = np.linalg.norm(traj.final, axis=-1)
print(f"sample radius {radii.mean():.3f} +- {radii.std():.3f} (training spheres have radius ~1)")

print(evaluate_sets(generated, reference).format_table())
write_ply("sphere_sample.ply", traj.export_values()[0])
