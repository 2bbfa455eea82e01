# # Learning to fit a garment onto a body
#
# The matcher encodes the catalog garment and the body segmentation,
# correlates the two feature volumes and regresses TPS offsets. We train it
# for a few epochs on a small toy set and compare the shape loss against the
# unwarped garment.

import torch

from _common import out_dir, save_row
from cvton_lab import data as D
from cvton_lab.matcher import correlate, loss_shape
from cvton_lab.training import BpgmTrainer, toy_config

out = out_dir("02_matcher")
spec = D.ToySpec(n_train=64, n_test=8, seed=1)
train, test = D.toy_split(spec, "train"), D.toy_split(spec, "test")

# ## The correlation volume
#
# Every entry is a cosine similarity between one garment site and one body
# site, so it lies in [-1, 1].

cfg = toy_config(seed=0)
trainer = BpgmTrainer(cfg)
batch = next(D.iterate_batches(test, 8))
with torch.no_grad():
    trainer.matcher.eval()
    corr = correlate(trainer.matcher.encode_clothing(batch["own_garment"]),
                     trainer.matcher.encode_segmentation(batch["seg"]))
print("correlation", tuple(corr.shape), "range", float(corr.min()), float(corr.max()))

# ## Training
#
# A fresh matcher predicts the identity warp (zero-initialized head).


def shape_losses(matcher):
    with torch.no_grad():
        matcher.eval()
        _, c_w, m_w = matcher(batch["own_garment"], batch["seg"], batch["own_garment_mask"])
    per_pair = (m_w - batch["m_c"]).abs().mean(dim=(1, 2, 3))
    return per_pair, c_w


before, _ = shape_losses(trainer.matcher)
trainer.run(train, 6, callback=lambda r: r["step"] % 16 == 0 and print(
    f"step {r['step']:3d}  shp {r['shp']:.4f}  app {r['app']:.4f}  vgg {r['vgg']:.4f}"))
after, c_w = shape_losses(trainer.matcher)
identity = (batch["own_garment_mask"] - batch["m_c"]).abs().mean(dim=(1, 2, 3))
print("identity-warp shape loss:", identity.numpy().round(3))
print("trained shape loss:      ", after.numpy().round(3))
print("pairs improved:", int((after < identity).sum()), "of", len(after))
print("batch L_shp:", float(loss_shape(batch["own_garment_mask"], batch["m_c"])), "->",
      float(after.mean()))

for k in range(3):
    save_row([batch["person"][k], batch["own_garment"][k], c_w[k]], out / f"pair_{k}.png")
print("wrote", out)
