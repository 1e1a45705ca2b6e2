# %% [markdown]
# # Two kidneys per slice
#
# Every coronal slice should give exactly two ROIs. The corrector turns
# whatever the detector returned into a left/right pair, or excludes the
# slice when nothing was found.

# %%
from stonefuse.corrector import EXCLUDED, correct, correction_log_line, count_histogram
from stonefuse.imaging import BoxXYXY

W = 512
left = BoxXYXY(90, 160, 210, 330, 0.91)
right = BoxXYXY(300, 150, 420, 320, 0.87)
stray = BoxXYXY(230, 420, 280, 470, 0.40)

cases = {"none": [], "one": [left], "two": [right, left], "three": [left, right, stray]}
for name, dets in cases.items():
    out = correct(dets, W)
    print(correction_log_line(name, len(dets), out))
    if out is not EXCLUDED:
        print("    left ", out.left.as_list(), "\n    right", out.right.as_list())

# %% [markdown]
# ## Counting detections over a test split
#
# Slices with zero detections drop out; each of the others contributes two
# crops. With the per-count totals 23 / 91 / 230 / 2 over 346 slices, 323
# slices remain and 646 crops go on to the classifier.

# %%
rows = (
    [(0, "stone")] * 14 + [(1, "stone")] * 50 + [(2, "stone")] * 99 + [(3, "stone")] * 2
    + [(0, "normal")] * 9 + [(1, "normal")] * 41 + [(2, "normal")] * 131
)
hist = count_histogram(rows)
print("by count :", hist.totals())
print("stone    :", hist.by_label("stone"))
print("normal   :", hist.by_label("normal"))
kept = hist.n_images - hist.totals()[0]
print(f"{kept} slices kept -> {2 * kept} ROI crops")
