# %% [markdown]
# # Running the pipeline without trained weights
#
# Stub backends stand in for the detector and classifier, so the whole flow
# (decode, detect, correct, crop, classify) runs on synthetic slices. The
# injected delays make the latency report easy to read.

# %%
import tempfile
from pathlib import Path

import numpy as np

from stonefuse import imaging
from stonefuse.dataprep import ManifestRow
from stonefuse.detector import DetectorConfig, StubBackend
from stonefuse.pipeline import PipelineConfig, bench, run_pipeline, write_results

work = Path(tempfile.mkdtemp(prefix="stonefuse-run-"))
rows = []
for i in range(6):
    img = np.random.default_rng(i).integers(0, 50, (96, 128, 3), dtype=np.uint8)
    img[28:72, 18:50] += 120
    img[28:72, 78:110] += 120
    path = work / f"slice{i}.png"
    path.write_bytes(imaging.encode_png(img))
    rows.append(ManifestRow(path.stem, path, "stone" if i % 2 else "normal"))

# Raw detector rows are (cx, cy, w, h, score) in 64 px letterbox space.
two = np.array([[17, 33, 16, 22, 0.9], [47, 33, 16, 22, 0.8]], np.float32).T[None]


def detector():
    return StubBackend(two, delay_s=0.004)


def classifier():
    return StubBackend(lambda x: np.array([[float(x.mean())]]), output_shape=(1, 1), delay_s=0.002)


cfg = PipelineConfig(detector=DetectorConfig(input_side=64), crop_output_dir=work / "crops", workers=2)
results = run_pipeline(rows, cfg, detector_factory=detector, classifier_factory=classifier)
for r in results:
    print(r.stem, r.outcome.provenance.value, [round(v.score, 3) for v in r.roi_verdicts], r.image_verdict.positive)
write_results(results, work / "results.jsonl")
print((work / "results.jsonl").read_text().splitlines()[0][:160], "...")

# %%
report = bench(rows, cfg, repetitions=3, detector_factory=detector, classifier_factory=classifier)
print(report.summary())
