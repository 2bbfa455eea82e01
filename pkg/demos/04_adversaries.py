# # Three discriminators
#
# One segments the image into body parts (plus a "fake" class), one scores
# whether the image matches the garment, and one judges small patches cut
# around the arms and torso.

import torch

from cvton_lab import data as D
from cvton_lab.discriminators import (MatchingDiscriminator, PatchDiscriminator, SegmentationDiscriminator,
                                      class_balance, dmth_loss, dptc_loss, dseg_loss, extract_patches, gen_seg_loss,
                                      patch_size_for)

batch = next(D.iterate_batches(D.toy_split(D.ToySpec(n_train=4, n_test=0, seed=4), "train"), 4))
real, seg = batch["person"], batch["seg"]
fake = torch.rand_like(real) * 2 - 1

# ## Class balance
#
# Rare body parts get large weights: each present part's weight times its
# pixel count equals the image area.

alpha = class_balance(seg.double())
counts = seg.double().sum(dim=(2, 3))
present = counts[0] > 0
print("parts present in image 0:", present.nonzero().flatten().tolist())
print("alpha * count:", (alpha[0] * counts[0])[present].tolist())

# ## Losses of untrained discriminators

torch.manual_seed(0)
d_seg = SegmentationDiscriminator(25, (16, 32, 32, 32, 32, 32), n_down=3)
d_mth = MatchingDiscriminator((16, 32, 32, 32, 32, 32), 3)
d_ptc = PatchDiscriminator((16, 32, 32, 32), 2)

size = patch_size_for((64, 48))
real_p = extract_patches(real, seg, D.PATCH_PARTS, size)
fake_p = extract_patches(fake, seg, D.PATCH_PARTS, size, real_p)
print(f"{len(real_p)} patches of {size}x{size}, labels {real_p.labels[:6]}...")

with torch.no_grad():
    print("segmentation D loss:", float(dseg_loss(d_seg(real), seg, d_seg(fake))))
    print("generator segmentation loss:", float(gen_seg_loss(d_seg(fake), seg)))
    print("matching D loss:", float(dmth_loss(d_mth(real, batch["own_garment"]), d_mth(fake, batch["own_garment"]))))
    print("patch D loss:", float(dptc_loss(d_ptc(real_p.patches), d_ptc(fake_p.patches))))

# ## The perfect-segmenter limit
#
# A discriminator that labels every real pixel with its true part and every
# fake pixel as fake has zero loss.

perfect_real = torch.cat([seg, torch.zeros_like(seg[:, :1])], 1)
perfect_fake = torch.cat([torch.zeros_like(seg), torch.ones_like(seg[:, :1])], 1)
print("perfect segmenter loss:", abs(float(dseg_loss(perfect_real, seg, perfect_fake))))
