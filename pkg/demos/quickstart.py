"""
Text removal from detection boxes only
======================================

A short tour: synthesize a corpus, look at the masks, run a few weakly
supervised pretraining steps, then score the text-erasing output.
Runs in a few seconds.
"""

import numpy as np

from tmim.data import Dataset, SynthConfig, synth_corpus
from tmim.masks import rasterize
from tmim.metrics import region_restricted_eval
from tmim.model import PromptedModel, Task
from tmim.trainer import TrainConfig, Trainer, pretrain_losses, predict

# a tiny corpus: 32x32 images, each with one or two text boxes and its clean twin
cfg = SynthConfig.for_size(32)
samples = synth_corpus(24, seed=0, cfg=cfg)
s = samples[0]
print(s.name, s.image.shape, len(s.polygons), "polygon(s)")

# the text mask is the union of the annotated polygons
m = rasterize(s.polygons, s.height, s.width)
print("text covers %.1f%% of the image" % (100 * m.mean()))

#
# One pretraining batch, taken apart
# ----------------------------------
# The background stream sees the image with its own text and a borrowed
# text-shaped hole removed. The erasing stream learns from a pseudo label
# that keeps the real background and fills text with the background guess.
data = Dataset(samples)
batch = next(data.batches(4, seed=0, epoch=0, with_clean=False))
model = PromptedModel.init(0)
l_bm, l_te, parts = pretrain_losses(model, batch)
print("L_BM %.3f  L_TE %.3f" % (l_bm.item(), l_te.item()))

outside = 1 - batch.text_masks
print("pseudo label equals the input off-text:",
      np.array_equal(parts["I_pseudo"] * outside, batch.images * outside))

#
# Train a little
# --------------
tc = TrainConfig(stage="pretrain", seed=0, epochs=3, batch_size=4, image_size=32, lr=1e-3, dtype="float32")
trainer = Trainer(tc, model, data)
hist = trainer.run()
print("total loss: first %.3f, last %.3f" % (hist[0].L_total, hist[-1].L_total))

# score text regions only, against the doing-nothing baseline
test = synth_corpus(8, seed=99, cfg=cfg)
images = np.stack([t.image for t in test])
out = predict(trainer.model, images, Task.TE)
for name, pred in (("identity", images), ("pretrained", out)):
    reps = [region_restricted_eval(o, t.clean, rasterize(t.polygons, t.height, t.width)) for o, t in zip(pred, test)]
    print("%-10s region PSNR %.2f dB" % (name, np.mean([r.psnr for r in reps])))
