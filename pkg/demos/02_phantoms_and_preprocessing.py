"""
Phantoms and the preprocessing pipeline
=======================================

One synthetic head per contrast class. The compartment means show the
ordering that identifies each class; the pipeline then crops, resamples and
scales every volume to a 32^3 cube whose 99th percentile is 1.
"""

import numpy as np

from phinet.phantom import CLASSES, PhantomSpec, compartment_means, generate_phantom
from phinet.volume import nearest_rank_percentile, preprocess_pipeline, preprocess_volume

spec = PhantomSpec(extent=40, spacing=1.5)

print("%-11s %7s %7s %7s %7s" % ("class", "CSF", "GM", "WM", "blobs"))
for name in CLASSES:
    vol, masks = generate_phantom(name, spec, seed=3)
    m = compartment_means(vol, masks)
    print("%-11s %7.3f %7.3f %7.3f %7d" % (name, m["csf"], m["gm"], m["wm"], masks["lesion"].sum()))

vol, _ = generate_phantom("T2", spec, seed=3)
staged = preprocess_volume(vol)
cube = preprocess_pipeline(vol)
print()
print("input grid", vol.shape, "at", vol.spacing, "mm")
print("after crop + resample", staged.shape, "at", staged.spacing, "mm")
print("p99 after scaling", nearest_rank_percentile(staged.data, 99))
print("network input", cube.shape, cube.dtype)

# brightness is random per sample but the ratio pattern is not
a, _ = generate_phantom("FLAIR", spec, seed=1)
b, _ = generate_phantom("FLAIR", spec, seed=2)
print()
print("raw max of two FLAIR phantoms: %.2f %.2f" % (a.data.max(), b.data.max()))
print("after the pipeline: %.2f %.2f" % tuple(np.percentile(preprocess_pipeline(v), 99.9) for v in (a, b)))
