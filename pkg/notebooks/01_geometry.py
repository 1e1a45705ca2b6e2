# %% [markdown]
# # Letterbox geometry, mirroring and cropping
#
# A detector sees a square letterboxed copy of the CT slice. Boxes come back
# in that square's coordinates and have to be mapped to source pixels before
# anything is cropped.

# %%
import numpy as np

from stonefuse import imaging
from stonefuse.imaging import BoxXYXY

img = np.zeros((512, 768, 3), np.uint8)
img[:, :384] = 60  # left half slightly brighter so the crop below is visible
square, m = imaging.letterbox(img, 640)
print("letterbox", square.shape, "scale", m.scale, "pad", (m.pad_x, m.pad_y))

# %% [markdown]
# Wide images get bands top and bottom, filled with grey 114.

# %%
print("top band value:", square[0, 0], " content starts at row", int(m.pad_y))

# %%
kidney = BoxXYXY(150, 180, 300, 400, confidence=0.82)
in_square = imaging.map_box(kidney, m)
back = imaging.unmap_box(in_square, m)
print("source      ", kidney.as_list())
print("letterboxed ", [round(v, 3) for v in in_square.as_list()])
print("round trip  ", back.as_list())

# %% [markdown]
# Mirroring reflects a box across the vertical centre line. Doing it twice
# gives back the same box exactly.

# %%
other = imaging.mirror_box(kidney, image_width=768)
print("mirrored", other.as_list())
assert imaging.mirror_box(other, 768) == kidney

# %%
roi = imaging.crop(img, kidney)
tensor = imaging.normalize(roi, 224)
print("crop", roi.shape, "-> classifier tensor", tensor.shape, tensor.dtype)
print("value range %.4f .. %.4f" % (tensor.min(), tensor.max()))
