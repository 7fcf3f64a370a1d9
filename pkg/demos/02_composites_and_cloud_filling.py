"""From cloudy acquisitions to monthly composites.

Builds a year of synthetic scenes (several per month, each with a cloud
blob), filters scenes above the cloud threshold, fills remaining cloudy
pixels from the nearest clear acquisitions, and composites the result into a
12-frame cube.
"""

import datetime

import numpy as np

from croplandws.sits import SceneRecord, composite, fill_clouds, filter_scenes
from croplandws.synth import _grow_blob

rng = np.random.default_rng(7)
H = W = 48

scenes = []
for month in range(1, 13):
    for day in (6, 21):
        reflectance = rng.uniform(0.05, 0.4, size=(H, W, 4)).astype(np.float32)
        cloud = np.zeros((H, W), dtype=bool)
        frac = float(rng.uniform(0.0, 0.35))
        if frac > 0:
            cloud[_grow_blob((H, W), round(frac * H * W), rng)] = True
        scenes.append(SceneRecord(datetime.date(2020, month, day), reflectance, cloud))

kept = filter_scenes(scenes, max_cloud=0.2)
print(f"{len(scenes)} scenes acquired, {len(kept)} pass the 20% cloud threshold")

filled = [fill_clouds(s, [o for o in kept if o is not s]) for s in kept]
still_cloudy = sum(s.cloud_mask.sum() for s in filled)
print(f"after gap filling from adjacent acquisitions: {still_cloudy} pixels never observed")

cube = composite(filled, period="monthly")
print(f"monthly cube: frames {cube.frames.shape}, "
      f"observed fraction {cube.validity.mean():.2%}")
empty = [m for t, m in enumerate(cube.period_labels) if not cube.validity[t].any()]
print(f"months without any usable acquisition: {empty or 'none'}")
