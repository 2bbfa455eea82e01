# # Conditioning a generator on the image context
#
# The image context stacks the segmentation, the person with the clothing
# region blanked out, the catalog garment and the warped garment. Every
# residual block of the generator normalizes its activation and then scales
# and shifts it per pixel with maps predicted from the context.

import copy

import torch

from cvton_lab import data as D
from cvton_lab.generator import EMA, ContextGenerator, ContextNorm, PlainNorm, build_image_context

spec = D.ToySpec(n_train=4, n_test=0, seed=2)
batch = next(D.iterate_batches(D.toy_split(spec, "train"), 4))

torch.manual_seed(0)
gen = ContextGenerator((64, 48), context_channels=34, n_blocks=6, n_up=3, widths=(64, 64, 64, 64, 32, 16), hidden=32)
ic = build_image_context(batch["seg"], batch["person"], batch["m_c"], batch["own_garment"], batch["own_garment"],
                         gen.n_levels)

# ## Context pyramid

print("context channels:", ic.channels)
print("levels:", [tuple(t.shape[-2:]) for t in ic.pyramid])
print("block resolutions:", gen.block_resolutions())

# ## A fresh context norm is plain batch norm
#
# The scale and bias heads start at zero, which means gamma = 1 and beta = 0.
# Loading the same weights into a generator built with ordinary batch norm
# gives the same output.

plain = ContextGenerator((64, 48), 34, 6, 3, (64, 64, 64, 64, 32, 16), hidden=32, use_can=False)
missing, unexpected = plain.load_state_dict(gen.state_dict(), strict=False)
print(f"{len(unexpected)} context-head tensors dropped, {len(missing)} affine tensors left at defaults")
with torch.no_grad():
    print("max |CAN - plain|:", float((gen(ic) - plain(ic)).abs().max()))
print("norm layers:", sum(isinstance(m, ContextNorm) for m in gen.modules()), "context /",
      sum(isinstance(m, PlainNorm) for m in plain.modules()), "plain")

# ## Once the heads are non-zero, the garment matters

for m in gen.modules():
    if isinstance(m, ContextNorm):
        torch.nn.init.normal_(m.gamma.weight, std=0.05)
        torch.nn.init.normal_(m.beta.weight, std=0.05)
with torch.no_grad():
    a = gen(ic)
    swapped = build_image_context(batch["seg"], batch["person"], batch["m_c"], batch["own_garment"].roll(1, 0),
                                  batch["own_garment"].roll(1, 0), gen.n_levels)
    b = gen(swapped)
print("output change when garments are swapped:", float((a - b).abs().mean()))

# ## Shadow weights
#
# The EMA copy moves a fraction (1 - decay) of the way to the live weights
# at every update.

ema = EMA(gen, decay=0.9)
live = copy.deepcopy(gen)
with torch.no_grad():
    for p in live.parameters():
        p.add_(1.0)
for _ in range(10):
    ema.update(live)
name, p = next(iter(ema.module.named_parameters()))
gap = float((dict(live.named_parameters())[name] - p).detach().abs().mean())
print(f"after 10 updates the shadow is {gap:.4f} away from the live weights (0.9**10 = {0.9 ** 10:.4f})")
