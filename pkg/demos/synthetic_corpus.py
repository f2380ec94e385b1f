"""Build a small synthetic shadow corpus and look at what it contains.

Each shadow image comes with its hidden shadow-free ground truth and a binary
mask of the affected pixels. The shadow-free set is drawn from separate scenes,
so the training pairs are unpaired.

    python demos/synthetic_corpus.py out_dir
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from tcgan.data import SynthSpec, synthesize_corpus

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_corpus")
corpus = synthesize_corpus(SynthSpec(n_shadow=12, n_nonshadow=12, seed=0))
corpus.write(out)

# shadow, ground truth and mask side by side, one row per image
rows = []
for t in corpus.triplets[:6]:
    mask = np.repeat((t.mask * 255).astype(np.uint8)[..., None], 3, axis=-1)
    rows.append(np.concatenate([t.shadow, t.gt, mask], axis=1))
Image.fromarray(np.concatenate(rows, axis=0)).save(out / "contact_sheet.png")

coverage = [t.mask.mean() for t in corpus.triplets]
atten = [t.attenuation for t in corpus.triplets]
print(f"wrote {len(corpus.triplets)} shadow + {len(corpus.nonshadow)} shadow-free images to {out}")
print(f"affected area: {np.mean(coverage):.1%} on average ({min(coverage):.1%} to {max(coverage):.1%})")
print(f"attenuation:   {min(atten):.2f} to {max(atten):.2f}")
print(f"contact sheet: {out / 'contact_sheet.png'}")
