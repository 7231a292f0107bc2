"""
From series to tokens
=====================

How a context of example series becomes one stream of patch tokens, which
tokens are attention-eligible, and what each token is trained to predict.
"""

import numpy as np

from tsicf.model import build_attention_mask
from tsicf.tokenize import INFER, TRAIN, layout_context, pad_example, pad_history
from tsicf.train import loss_targets

p, h, T = 4, 4, 16

# Three examples of different lengths.  Short ones are left padded so that
# their first patch ends on a real value, then right padded to T.
raw = [np.arange(1.0, 17.0), np.arange(101.0, 107.0), np.array([7.0, 8.0, 9.0])]
windows = [pad_example(r, T, p) for r in raw]
for r, w in zip(raw, windows):
    print(f"length {len(r):2d}  mask {''.join(map(str, w.mask))}")

# Training layout: patches of every example, each followed by a separator.
layout = layout_context(windows, p, TRAIN)
print("\ntoken  example  patch  separator  eligible")
for t in range(layout.n_tokens):
    print(f"{t:5d}  {layout.example_id[t]:7d}  {layout.patch_index[t]:5d}  "
          f"{str(bool(layout.is_separator[t])):9s}  {bool(layout.eligible[t])}")

# A query may look at itself and earlier tokens, but never at a patch whose
# last entry is padding.
allowed = build_attention_mask(layout)
print("\nattention mask (rows = queries):")
for row in allowed.astype(int):
    print("  " + "".join(map(str, row)))

# Each patch token is scored on the h points that follow it; padded points
# and points beyond the example are masked out (mask = 1).
targets, masks = loss_targets(layout, windows, h)
print("\nfirst example targets:")
for t in range(*layout.spans[0]):
    print(f"  token {t}: {targets[t]}  mask {masks[t]}")

# At inference the target history is padded on the left only, so its last
# token is a full patch and nothing follows it.
infer = layout_context(windows[:2] + [pad_history(np.arange(10.0), p)], p, INFER)
print(f"\ninference stream: {infer.n_tokens} tokens, separators at {infer.separator_positions}")
print(f"read-out token: {infer.last_eligible_of(infer.n_examples - 1)}")
