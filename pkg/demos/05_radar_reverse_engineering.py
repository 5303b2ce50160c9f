"""Render a learner-profile radar chart and reverse-engineer the mastery
vector back out of the pixels.

This is the grey-box threat in its weakest-access form: even when a
platform exposes only the chart image, the numeric knowledge state can be
recovered to within a few hundredths, so chart-only exposure still feeds
the membership attack.
"""
import numpy as np
from PIL import Image

from cdaudit.numerics import make_rng
from cdaudit.radar import (RadarStyle, extract_kstate_canny, mae, render_radar,
                           roundtrip)

style = RadarStyle()
truth = np.array([0.82, 0.35, 0.65, 0.92, 0.15, 0.55, 0.74, 0.40])
image = render_radar(truth, style)
Image.fromarray(image).save("profile.png")
print("wrote profile.png (512x512, green polygon over gray reference rings)")

result = extract_kstate_canny(image, truth.size, style)
print(f"\n{'axis':>4s} {'truth':>6s} {'estimate':>9s} {'abs err':>8s} {'edge hits':>9s}")
for i, (t, e) in enumerate(zip(truth, result.estimates)):
    print(f"{i:4d} {t:6.2f} {e:9.3f} {abs(t - e):8.3f} {result.per_axis_confidence[i]:9d}")
print(f"single-chart MAE: {mae(result.estimates, truth):.4f}")

n = 100
vectors = make_rng(0).uniform(0.05, 1.0, size=(n, 8))
_, maes = roundtrip(vectors, style)
print(f"\n{n}-chart round trip: mean MAE={maes.mean():.4f}, "
      f"worst chart={maes.max():.4f}")
print("entries below 0.05 sit at the chart center and are unrecoverable by design")
