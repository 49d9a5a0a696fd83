"""Denser patch grids at inference time.

Lowering the patchifier stride below the patch size yields overlapping
patches and a finer score map.  The positional table learned on the
training grid is bilinearly resampled to the new grid.
"""
import torch

from pacl.encoders import VisionEncoder, VisionEncoderConfig, interpolate_positions, patch_grid_dims, vision_forward

cfg = VisionEncoderConfig()
print(f"image {cfg.image_size}px, patch {cfg.patch_size}px, training grid {cfg.train_grid}")
for stride in (8, 6, 4, 2, 1):
    h, w = patch_grid_dims(cfg.image_size, cfg.image_size, cfg.patch_size, stride)
    print(f"  stride {stride}: {h}x{w} = {h * w} tokens")

# A 2x2 positional grid holding 0..3, resampled to 3x3 with aligned corners.
pos = torch.tensor([[-1.0], [0.0], [1.0], [2.0], [3.0]])
print("\nresampled grid\n", interpolate_positions(pos, (2, 2), (3, 3))[1:].view(3, 3))

torch.manual_seed(0)
enc = VisionEncoder(cfg).eval()
image = torch.rand(3, 32, 32)
with torch.no_grad():
    for stride in (8, 4):
        cls, patches, grid = vision_forward(enc, image, stride)
        print(f"stride {stride}: cls {tuple(cls.shape)}, patches {tuple(patches.shape)}, grid {grid}")
