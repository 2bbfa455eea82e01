# # End to end on the toy set
#
# Render a dataset, train the matcher, train the generator against the three
# discriminators, then dress test people in other people's garments and score
# the result. The sizes below finish in about a minute on one CPU core;
# the acceptance suite runs the full 200-pair version.

import time

import torch

from _common import out_dir, save_row
from cvton_lab import data as D
from cvton_lab import metrics
from cvton_lab.training import Checkpoint, TryOnPipeline, infer, toy_config, train_bpgm, train_generator

out = out_dir("06_end_to_end")
start = time.perf_counter()
spec = D.ToySpec(n_train=64, n_test=16, seed=0)
root = D.generate_toy_dataset(spec, out / "data")
train = D.load_dataset(root, "train")
print(f"dataset in {root}: {len(train)} train pairs")

# ## Stage one: the matcher

cfg = toy_config(seed=0)
bpgm = train_bpgm(cfg, train, out / "bpgm", epochs=6)
print("matcher checkpoint:", sorted(p.name for p in (out / "bpgm").iterdir()))

# ## Stage two: the generator

gan = train_generator(cfg, train, bpgm, out / "cag", epochs=10)
last = [line for line in (out / "cag" / "losses.log").read_text().splitlines()][-1]
print("last generator log line:", last)

# ## Try-on
#
# Checkpoints are self-describing, so inference needs nothing but the file.

ckpt = Checkpoint.load(out / "cag" / "ckpt_010.pt")
test = D.load_dataset(root, "test")
person, other = test.samples[0], test.samples[1]
result = infer(ckpt, person, other)
save_row([person.person, other.garment, result], out / "tryon.png")

# ## Scores

fx = metrics.default_extractor(cfg.extractor_seed)
pipe = TryOnPipeline.from_checkpoint(ckpt)
for protocol, pairing in (("paired", "paired"), ("unpaired", "shuffled")):
    ds = D.load_dataset(root, "test", pairing, seed=0)
    report = metrics.evaluate_testset(pipe, D.iterate_batches(ds, 8), protocol, fx)
    print(f"{protocol:>9}: {report.summary()}")
print(f"done in {time.perf_counter() - start:.0f} s; images in {out}")
