# %% [markdown]
# # Scoring crops
#
# Metrics are computed per crop with "stone" as the positive class. Ratios
# with an empty denominator come out as ``None``.

# %%
from stonefuse.evaluation import REFERENCE_METRICS, ConfusionMatrix, compare_to_reference

cm = ConfusionMatrix(tp=9, fp=1, fn=1, tn=9)
for k, v in cm.metrics().items():
    print(f"{k:<16} {v}")

# %% [markdown]
# When positives and negatives are balanced the standard and micro-averaged
# numbers coincide. On a skewed split they separate.

# %%
skewed = ConfusionMatrix(tp=40, fp=10, fn=5, tn=545)
m = skewed.metrics()
print("F1 %.4f  micro F1 %.4f  FN rate %.4f  FN share %.4f" % (m["f1"], m["micro_f1"], m["fn_rate"], m["fn_share"]))

# %% [markdown]
# Comparing against published targets uses an absolute tolerance on fractions.

# %%
target = {k: REFERENCE_METRICS["mobilenet"][k] for k in ("f1", "fn_rate")}
for check in compare_to_reference(m, target, tolerance=0.03):
    print(check.line())
