"""
Pretraining at desk scale
=========================

One seed of the full comparison on the 512/64 synthetic corpus:

* pretrain 5 epochs from boxes only, finetune 20 epochs, against 20 epochs from scratch
* the pretrained-only model against leaving the image untouched
* text-aware pretraining against plain all-region reconstruction

Takes roughly a quarter of an hour on one core. Usage::

    python demos/desk_experiment.py [seed]
"""

import sys

from tmim.experiments import run_seed

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
r = run_seed(seed)

# supervised finetuning starts from the weakly supervised weights
print("whole-image PSNR  scratch %.2f  pretrained+finetuned %.2f  (%+.2f dB)"
      % (r.scratch_psnr, r.finetuned_psnr, r.gain))

# no clean image was seen here, yet text regions get closer to the truth
print("text-region PSNR  identity %.2f  pretrained only %.2f"
      % (r.identity_region.psnr, r.pretrained_region.psnr))

# lower is better; all-region reconstruction is also asked to redraw text
print("text-region AGE   text-aware %.3f  all-region %.3f"
      % (r.pretrained_region.age, r.mim_region.age))

print("seconds:", {k: round(v) for k, v in r.seconds.items()})
