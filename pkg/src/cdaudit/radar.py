"""Knowledge-state radar charts: rendering to raster images and recovering
the numeric vector back out of the pixels.

Rendering draws gray reference K-gons at the 0.2/0.4/0.6/0.8/1.0 levels and
the green mastery polygon on top, axis 0 at 12 o'clock, clockwise.  The
extractor isolates green-dominant pixels, runs Canny on the mask, and reads
each axis value as the farthest edge pixel inside a narrow angular cone
around that axis ray, divided by the chart radius.

Values near 0 put the vertex at the chart center and are geometrically
unrecoverable; round-trip accuracy is specified for entries >= 0.05.

An optional vision-LLM extraction client posts the chart plus one of the
bundled prompt texts to an OpenAI-style endpoint configured via environment
variables (CDAUDIT_LLM_URL, CDAUDIT_LLM_MODEL, CDAUDIT_LLM_API_KEY).
"""
from __future__ import annotations

import base64
import io
import os
import re
from dataclasses import dataclass, field
from importlib import resources

import cv2
import numpy as np
from PIL import Image, ImageDraw

RAY_TOLERANCE_DEG = 2.0
CANNY_SIGMA = 1.4
CANNY_LOW, CANNY_HIGH = 50, 150
GREEN_MARGIN = 40  # green channel must beat red and blue by this much


class ExtractionError(RuntimeError):
    """The extractor found no usable polygon in the image."""


class LlmExtractionError(RuntimeError):
    """The LLM endpoint failed or its reply had too few numbers."""


@dataclass(frozen=True)
class RadarStyle:
    image_size: int = 512
    ring_levels: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    polygon_color: tuple = (0, 128, 0)
    ring_color: tuple = (160, 160, 160)
    background: tuple = (255, 255, 255)
    max_radius_frac: float = 0.42
    stroke_width: int = 2

    def __post_init__(self):
        lv = self.ring_levels
        if any(b <= a for a, b in zip(lv, lv[1:])) or lv[-1] != 1.0:
            raise ValueError("ring_levels must be strictly increasing and end at 1.0")
        if self.max_radius_frac <= 0 or self.max_radius_frac > 0.5:
            raise ValueError("max_radius_frac must keep the chart inside the image")

    @property
    def max_radius(self) -> float:
        return self.max_radius_frac * self.image_size

    @property
    def center(self) -> tuple:
        return (self.image_size / 2.0, self.image_size / 2.0)


def axis_angles(n_axes: int) -> np.ndarray:
    """Axis directions in degrees, 0 at 12 o'clock, increasing clockwise."""
    return np.arange(n_axes) * (360.0 / n_axes)


def vertex_positions(values, style: RadarStyle) -> np.ndarray:
    """Pixel coordinates of the polygon vertices for the given axis values."""
    values = np.asarray(values, dtype=np.float64)
    phi = np.deg2rad(axis_angles(values.size))
    cx, cy = style.center
    r = values * style.max_radius
    return np.column_stack([cx + r * np.sin(phi), cy - r * np.cos(phi)])


def render_radar(kstate, style: RadarStyle = RadarStyle()) -> np.ndarray:
    """Rasterize one chart; returns an (H, W, 3) uint8 RGB array."""
    kstate = np.asarray(kstate, dtype=np.float64)
    if kstate.ndim != 1 or kstate.size < 3:
        raise ValueError("render_radar needs a 1-D vector with K >= 3")
    if kstate.min() < 0.0 or kstate.max() > 1.0:
        raise ValueError("kstate entries must lie in [0, 1]")

    img = Image.new("RGB", (style.image_size, style.image_size), style.background)
    draw = ImageDraw.Draw(img)

    def closed(pts):
        seq = [tuple(p) for p in pts]
        return seq + seq[:1]

    outer = vertex_positions(np.ones(kstate.size), style)
    for level in style.ring_levels:
        ring = vertex_positions(np.full(kstate.size, level), style)
        draw.line(closed(ring), fill=style.ring_color, width=1)
    cx, cy = style.center
    for px, py in outer:  # axis spokes
        draw.line([(cx, cy), (px, py)], fill=style.ring_color, width=1)
    draw.line(closed(vertex_positions(kstate, style)),
              fill=style.polygon_color, width=style.stroke_width)
    return np.asarray(img)


@dataclass
class ExtractionResult:
    estimates: np.ndarray
    per_axis_confidence: np.ndarray  # edge-pixel hits inside each axis cone
    method: str
    flagged_axes: list = field(default_factory=list)


def _green_mask(image: np.ndarray) -> np.ndarray:
    px = image.astype(np.int16)
    mask = (px[:, :, 1] > px[:, :, 0] + GREEN_MARGIN) & \
           (px[:, :, 1] > px[:, :, 2] + GREEN_MARGIN)
    return (mask * 255).astype(np.uint8)


def extract_kstate_canny(image, n_axes: int,
                         style: RadarStyle = RadarStyle()) -> ExtractionResult:
    """Reverse-engineer the axis values from a rendered chart.

    Pipeline: green-channel dominance mask -> Gaussian blur -> Canny ->
    per-axis ray cast (farthest edge pixel within +/-2 degrees).  Axes with no
    edge hit are flagged and filled by circular linear interpolation; if no
    axis hits at all, the image has no polygon and extraction fails.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) RGB image")
    edges = cv2.Canny(cv2.GaussianBlur(_green_mask(image), (0, 0), CANNY_SIGMA),
                      CANNY_LOW, CANNY_HIGH)
    ys, xs = np.nonzero(edges)
    cx, cy = style.center
    dx = xs - cx
    dy = ys - cy
    dist = np.hypot(dx, dy)
    ang = np.degrees(np.arctan2(dx, -dy)) % 360.0

    estimates = np.zeros(n_axes)
    confidence = np.zeros(n_axes, dtype=np.int64)
    for i, target in enumerate(axis_angles(n_axes)):
        diff = np.abs(ang - target)
        hits = np.minimum(diff, 360.0 - diff) <= RAY_TOLERANCE_DEG
        confidence[i] = int(hits.sum())
        if confidence[i]:
            d = dist[hits].max() - style.stroke_width / 2.0  # stroke center
            estimates[i] = float(np.clip(d / style.max_radius, 0.0, 1.0))

    flagged = [int(i) for i in np.flatnonzero(confidence == 0)]
    if len(flagged) == n_axes:
        raise ExtractionError("no polygon edge found on any axis")
    for i in flagged:
        estimates[i] = _interp_circular(estimates, confidence, i)
    return ExtractionResult(estimates, confidence, "canny", flagged)


def _interp_circular(estimates, confidence, i):
    """Linear interpolation between the nearest confident axes around i."""
    n = estimates.size
    lo, lo_steps = i, 0
    while confidence[lo] == 0:
        lo = (lo - 1) % n
        lo_steps += 1
    hi, hi_steps = i, 0
    while confidence[hi] == 0:
        hi = (hi + 1) % n
        hi_steps += 1
    w = hi_steps / (lo_steps + hi_steps)
    return w * estimates[lo] + (1.0 - w) * estimates[hi]


def mae(estimates, ground_truth) -> float:
    """Mean absolute error; on stacked batches this equals the mean of the
    per-vector MAEs."""
    est = np.asarray(estimates, dtype=np.float64)
    ref = np.asarray(ground_truth, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {ref.shape}")
    return float(np.mean(np.abs(est - ref)))


def roundtrip(vectors, style: RadarStyle = RadarStyle()):
    """Render then extract each vector; returns (estimates, per-vector MAEs)."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    estimates = np.empty_like(vectors)
    for i, vec in enumerate(vectors):
        result = extract_kstate_canny(render_radar(vec, style), vec.size, style)
        estimates[i] = result.estimates
    maes = np.abs(estimates - vectors).mean(axis=1)
    return estimates, maes


# ---------------------------------------------------------------------------
# optional LLM client
# ---------------------------------------------------------------------------

PROMPT_FILES = {"general": "radar_general.txt", "in_context": "radar_in_context.txt"}

ENV_URL = "CDAUDIT_LLM_URL"
ENV_MODEL = "CDAUDIT_LLM_MODEL"
ENV_KEY = "CDAUDIT_LLM_API_KEY"


def load_prompt(prompt_kind: str) -> str:
    """Verbatim prompt text shipped with the package."""
    try:
        fname = PROMPT_FILES[prompt_kind]
    except KeyError:
        raise ValueError(f"prompt_kind must be one of {sorted(PROMPT_FILES)}") from None
    return resources.files("cdaudit").joinpath("prompts", fname).read_text(encoding="utf-8")


@dataclass(frozen=True)
class LlmEndpoint:
    url: str
    model: str
    api_key: str = ""

    @classmethod
    def from_env(cls) -> "LlmEndpoint":
        url = os.environ.get(ENV_URL)
        model = os.environ.get(ENV_MODEL)
        if not url or not model:
            raise LlmExtractionError(
                f"set {ENV_URL} and {ENV_MODEL} to use LLM extraction")
        return cls(url=url, model=model, api_key=os.environ.get(ENV_KEY, ""))


def extract_kstate_llm(image, n_axes: int, prompt_kind: str = "general",
                       endpoint: LlmEndpoint = None,
                       timeout: float = 60.0) -> ExtractionResult:
    """Ask a vision model to read the chart.  Any transport or parse failure
    raises; there is never a silent fallback to the Canny path."""
    import requests

    endpoint = endpoint or LlmEndpoint.from_env()
    prompt = load_prompt(prompt_kind)
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image)).save(buf, format="PNG")
    data_url = "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode()

    headers = {"Content-Type": "application/json"}
    if endpoint.api_key:
        headers["Authorization"] = f"Bearer {endpoint.api_key}"
    payload = {
        "model": endpoint.model,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": prompt},
                {"type": "image_url", "image_url": {"url": data_url}},
            ],
        }],
    }
    try:
        resp = requests.post(endpoint.url, json=payload, headers=headers,
                             timeout=timeout)
        resp.raise_for_status()
        text = resp.json()["choices"][0]["message"]["content"]
    except Exception as exc:
        raise LlmExtractionError(f"LLM request failed: {exc}") from exc

    # skip digits glued to identifiers so axis labels like "c1" do not parse
    numbers = [float(m) for m in
               re.findall(r"(?<![\w.])[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?", text)]
    if len(numbers) < n_axes:
        raise LlmExtractionError(
            f"reply contained {len(numbers)} numbers, need {n_axes}: {text!r}")
    estimates = np.clip(np.array(numbers[:n_axes], dtype=np.float64), 0.0, 1.0)
    return ExtractionResult(estimates, np.ones(n_axes, dtype=np.int64), "llm")
