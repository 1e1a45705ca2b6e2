# %% [markdown]
# # Offline augmentation of the stone class
#
# Each stone crop gets a mirrored copy. A seeded half of those copies is also
# rotated by up to 25 degrees. Normal crops pass through untouched, so the
# row count grows by exactly the number of stone crops.

# %%
import tempfile
from pathlib import Path

import numpy as np

from stonefuse import imaging
from stonefuse.dataprep import AugmentConfig, ManifestRow, augment, content_hashes

work = Path(tempfile.mkdtemp(prefix="stonefuse-aug-"))
rng = np.random.default_rng(0)
rows = []
for i in range(20):
    label = "stone" if i < 13 else "normal"
    path = work / "in" / f"crop{i:02d}.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(imaging.encode_png(rng.integers(0, 255, (48, 40, 3), dtype=np.uint8)))
    rows.append(ManifestRow(path.stem, path, label, "train"))

res = augment(rows, AugmentConfig(seed=7), work / "out")
print(len(rows), "inputs ->", len(res.manifest), "rows;", len(res.written), "new files")
print(sorted(p.name for p in res.written)[:6])

# %% [markdown]
# Same seed, same files and bytes.

# %%
again = augment(rows, AugmentConfig(seed=7), work / "again")
assert content_hashes(res.written) == content_hashes(again.written)
print("deterministic:", True)
