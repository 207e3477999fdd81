"""A miniature run of the full method: MAE pretraining, fine-tuning, TTA inference, scoring.

The budgets are tiny so the script finishes in a few minutes on one core;
raise ``PRETRAIN`` and ``FINETUNE`` for meaningful numbers.
"""
import sys
import tempfile
from pathlib import Path

from bxlstm_petct.data import load_samples
from bxlstm_petct.inference import binarize, tta_predict
from bxlstm_petct.mae import MaeConfig, pretrain
from bxlstm_petct.metrics import aggregate, score_case
from bxlstm_petct.network import NetworkConfig
from bxlstm_petct.phantom import PhantomSpec, generate_corpus
from bxlstm_petct.training import TrainConfig, finetune, make_splits

PRETRAIN, FINETUNE = 100, 60
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
corpus = out / "corpus"
manifest = generate_corpus(PhantomSpec(seed=1), 10, corpus)
splits = make_splits(manifest["labeled"], k=5, seed=0)
print("fold 0 validation cases:", splits[0]["val"])

net = NetworkConfig(patch_dims=(16, 24, 24), xlstm_placement="bot")

# Stage 1: reconstruct the 60% of 4-voxel cubes that were blanked out of the input.
log = pretrain(corpus, net, MaeConfig(), PRETRAIN, out / "mae.ckpt", progress=None)
print(f"MAE loss {log[0]['loss']:.3f} -> {log[-1]['loss']:.3f}")

# Stage 2: copy the encoder, train the whole network on labelled patches.
result = finetune(splits, 0, corpus, net, TrainConfig(steps=FINETUNE, val_every=20), init=out / "mae.ckpt")
print("transferred", len(result["transfer"]["copied"]), "encoder tensors;", len(result["transfer"]["fresh"]), "fresh")
for row in result["validation"]:
    print(f"  step {row['step'] + 1}: val Dice {row['dice']:.3f}")

# Inference averages the eight axis flips, each a Gaussian-blended sliding window.
scores = []
for s in load_samples(corpus, splits[0]["val"]):
    prob = tta_predict(result["model"], s.image, net.patch_dims)
    scores.append(score_case(s.name, binarize(prob), s.mask, s.spacing))
print(aggregate(scores))
