"""Synthetic flash-thermography scenes.

A scene is a set of rectangular regions tiling the canvas, each cooling
along its own temperature-time profile, plus per-pixel Gaussian noise and
a clamp that doubles as sensor saturation. Profiles come in three kinds:

* power-law        A * t**b, the semi-infinite surface response (b = -1/2)
* adiabatic-plate  A * t**(-1/2) * (1 + 2*c*sum_n exp(-n^2 L^2 / (alpha t))),
                   the image-source series for a plate of thickness L and
                   diffusivity alpha; c in [0, 1] scales the reflection at
                   the back interface (1 = free surface, 0 = perfect
                   contact, i.e. no interface at all)
* log-polynomial   base ** p(log_base t) for a literal coefficient set

The plate series is truncated once the next term falls below 1e-12 of the
running bracket value, so the gap-0 case degrades exactly to the power law.
"""

import configparser
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ComputeError, ValidationError
from .ingest import FrameSequence, LabelMask

MM = 1e-3

# gap thickness (mm) at which the interface reflects half the heat
GAP_HALF_CONTRAST_MM = 0.1

_SERIES_CAP = 1_000_000


class SceneError(ValidationError):
    pass


@dataclass(frozen=True)
class TemperatureProfile:
    kind: str
    amplitude: float = 1.0
    exponent: float = -0.5
    thickness: float = 0.0        # m
    diffusivity: float = 0.0      # m^2/s
    contrast: float = 1.0
    coefficients: tuple = ()
    log_base: float = 10.0

    def __post_init__(self):
        if self.kind == "power-law":
            if self.amplitude <= 0:
                raise SceneError("power-law amplitude must be > 0")
        elif self.kind == "adiabatic-plate":
            if self.amplitude <= 0:
                raise SceneError("adiabatic-plate amplitude must be > 0")
            if self.thickness <= 0 or self.diffusivity <= 0:
                raise SceneError("plate thickness and diffusivity must be > 0")
            if not 0.0 <= self.contrast <= 1.0:
                raise SceneError("interface contrast must lie in [0, 1]")
        elif self.kind == "polynomial-in-log-time":
            if len(self.coefficients) == 0:
                raise SceneError("polynomial profile needs coefficients")
            if self.log_base <= 1.0:
                raise SceneError("log base must exceed 1")
        else:
            raise SceneError(f"unknown profile kind {self.kind!r}")


def power_law(amplitude, exponent=-0.5):
    return TemperatureProfile("power-law", amplitude, exponent)


def adiabatic_plate(amplitude, thickness, diffusivity, contrast=1.0):
    return TemperatureProfile("adiabatic-plate", amplitude,
                              thickness=thickness, diffusivity=diffusivity,
                              contrast=contrast)


def log_polynomial(coefficients, log_base=10.0):
    return TemperatureProfile("polynomial-in-log-time",
                              coefficients=tuple(float(c) for c in coefficients),
                              log_base=log_base)


def _plate_bracket(t, thickness, diffusivity, contrast):
    """1 + 2*c*sum_n exp(-n^2 L^2/(alpha t)), truncated at 1e-12 relative."""
    expo = -thickness * thickness / (diffusivity * t)
    bracket = np.ones_like(t)
    if contrast == 0.0:
        return bracket
    n = 1
    while True:
        term = 2.0 * contrast * np.exp(n * n * expo)
        if not np.any(term >= 1e-12 * bracket):
            return bracket
        bracket += term
        n += 1
        if n > _SERIES_CAP:
            raise ComputeError("plate series failed to converge")


def eval_profile(profile, t):
    """Profile temperature at time(s) t (seconds, > 0)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0.0):
        raise SceneError("profile times must be > 0")
    if profile.kind == "power-law":
        out = profile.amplitude * t ** profile.exponent
    elif profile.kind == "adiabatic-plate":
        bracket = _plate_bracket(t, profile.thickness, profile.diffusivity,
                                 profile.contrast)
        out = profile.amplitude / np.sqrt(t) * bracket
    else:
        u = np.log(t) / math.log(profile.log_base)
        coeffs = profile.coefficients[::-1]  # np.polyval wants leading first
        out = profile.log_base ** np.polyval(coeffs, u)
    if not np.all(np.isfinite(out)):
        raise ComputeError(f"{profile.kind} profile is non-finite in range")
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Region:
    rect: tuple  # (x0, y0, width, height)
    class_id: int
    profile: TemperatureProfile


@dataclass(frozen=True)
class RegionLayout:
    width: int
    height: int
    regions: tuple

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise SceneError("canvas must be at least 1x1")
        cover = np.zeros((self.height, self.width), dtype=np.int32)
        for region in self.regions:
            x0, y0, w, h = region.rect
            if w < 1 or h < 1:
                raise SceneError(f"region rect {region.rect} has empty size")
            if x0 < 0 or y0 < 0 or x0 + w > self.width or y0 + h > self.height:
                raise SceneError(f"region rect {region.rect} leaves the canvas")
            if region.class_id < 0:
                raise SceneError("class ids must be >= 0")
            cover[y0:y0 + h, x0:x0 + w] += 1
        if not (cover == 1).all():
            missed = int((cover == 0).sum())
            doubled = int((cover > 1).sum())
            raise SceneError(
                f"regions must tile the canvas exactly once "
                f"({missed} uncovered, {doubled} multiply covered)")

    def region_map(self):
        """(H, W) array of region list indices."""
        out = np.empty((self.height, self.width), dtype=np.int64)
        for i, region in enumerate(self.regions):
            x0, y0, w, h = region.rect
            out[y0:y0 + h, x0:x0 + w] = i
        return out

    def label_mask(self):
        out = np.empty((self.height, self.width), dtype=np.int64)
        for region in self.regions:
            x0, y0, w, h = region.rect
            out[y0:y0 + h, x0:x0 + w] = region.class_id
        return LabelMask(self.width, self.height, out,
                         np.ones((self.height, self.width), dtype=bool))


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise SceneError("noise sigma must be >= 0")


def render_video(layout, timestamps, noise, clamp=(0.0, math.inf)):
    """Render every pixel's cooling series into a FrameSequence.

    Each pixel draws its own Gaussian stream keyed on (seed, row, col), so
    output is independent of render order and stable under re-runs. The
    clamp ceiling becomes the sequence's saturation value when finite.
    """
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if timestamps.ndim != 1 or timestamps.size == 0:
        raise SceneError("timestamps must be a non-empty 1-D sequence")
    if timestamps[0] <= 0 or np.any(np.diff(timestamps) <= 0):
        raise SceneError("timestamps must be strictly increasing and > 0")
    lo, hi = float(clamp[0]), float(clamp[1])
    if not lo < hi:
        raise SceneError("clamp must satisfy lo < hi")
    base = np.empty((len(layout.regions), timestamps.size))
    for i, region in enumerate(layout.regions):
        base[i] = eval_profile(region.profile, timestamps)
    data = _kernels.render_frames(base, layout.region_map(), noise.sigma,
                                  noise.seed, lo, hi)
    saturation = hi if math.isfinite(hi) else math.inf
    return FrameSequence(layout.width, layout.height, timestamps.size,
                         timestamps, data, saturation)


def composite_layout(width, height, inner_rect, inner_profile, outer_profile,
                     inner_class=1, outer_class=0):
    """Centered-rectangle-in-border layout; the border is four rectangles."""
    x0, y0, w, h = inner_rect
    if w < 1 or h < 1:
        raise SceneError("inner rect must have positive size")
    if x0 <= 0 or y0 <= 0 or x0 + w >= width or y0 + h >= height:
        raise SceneError("inner rect must sit strictly inside the canvas")
    regions = (
        Region((0, 0, width, y0), outer_class, outer_profile),
        Region((0, y0, x0, h), outer_class, outer_profile),
        Region((x0, y0, w, h), inner_class, inner_profile),
        Region((x0 + w, y0, width - x0 - w, h), outer_class, outer_profile),
        Region((0, y0 + h, width, height - y0 - h), outer_class, outer_profile),
    )
    return RegionLayout(width, height, regions)


def gap_contrast(gap_mm):
    """Interface reflection coefficient for an air gap of the given size.

    Thin-gap thermal-resistance model: contrast g/(g + g_half) rises from 0
    (no gap) towards 1 (wide open gap), passing 1/2 at g_half.
    """
    if gap_mm < 0:
        raise SceneError("gap thickness must be >= 0")
    return gap_mm / (gap_mm + GAP_HALF_CONTRAST_MM)


def four_class_scene(width, height, gaps_mm, depth_mm, diffusivity,
                     base_depth_mm, amplitude=100.0):
    """Quadrant scene grading delamination severity by air-gap thickness.

    Gap 0 marks sound material: a plate the full sample depth with a free
    back face. Non-zero gaps put a partially reflecting interface at the
    defect depth, with reflection growing monotonically with gap size.
    Returns the layout plus its pixel-true label mask.
    """
    gaps = [float(g) for g in gaps_mm]
    if len(gaps) != 4:
        raise SceneError("expected exactly 4 gap thicknesses")
    if any(g < 0 for g in gaps):
        raise SceneError("gap thicknesses must be >= 0")
    if any(a > b for a, b in zip(gaps, gaps[1:])):
        raise SceneError("gap thicknesses must be non-decreasing")
    if depth_mm <= 0 or base_depth_mm <= 0:
        raise SceneError("depths must be > 0")
    if width < 2 or height < 2:
        raise SceneError("canvas too small for four quadrants")

    sound = adiabatic_plate(amplitude, base_depth_mm * MM, diffusivity)
    profiles = [
        sound if g == 0.0 else
        adiabatic_plate(amplitude, depth_mm * MM, diffusivity, gap_contrast(g))
        for g in gaps
    ]
    xm, ym = width // 2, height // 2
    quads = ((0, 0, xm, ym), (xm, 0, width - xm, ym),
             (0, ym, xm, height - ym), (xm, ym, width - xm, height - ym))
    regions = tuple(Region(rect, i, profiles[i]) for i, rect in enumerate(quads))
    layout = RegionLayout(width, height, regions)
    return layout, layout.label_mask()


# ---------------------------------------------------------------------------
# scene description files
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scene:
    layout: RegionLayout
    timestamps: np.ndarray
    noise: NoiseSpec
    clamp: tuple = (0.0, math.inf)


def _profile_from_options(opts, where):
    kind = opts.get("profile", "power-law").strip()
    try:
        if kind == "power-law":
            return power_law(float(opts.get("amplitude", 1.0)),
                             float(opts.get("exponent", -0.5)))
        if kind == "adiabatic-plate":
            return adiabatic_plate(float(opts.get("amplitude", 1.0)),
                                   float(opts["thickness"]),
                                   float(opts["diffusivity"]),
                                   float(opts.get("contrast", 1.0)))
        if kind == "polynomial-in-log-time":
            coeffs = [float(v) for v in opts["coefficients"].split()]
            return log_polynomial(coeffs, float(opts.get("log_base", 10.0)))
    except KeyError as exc:
        raise SceneError(f"{where}: profile {kind!r} missing option {exc}")
    except ValueError as exc:
        raise SceneError(f"{where}: bad profile value: {exc}")
    raise SceneError(f"{where}: unknown profile kind {kind!r}")


def load_scene(path):
    """Parse a flat INI scene description.

    Sections: [canvas] width/height; [timing] fps+frames or timestamps;
    optional [noise] sigma/seed; optional [clamp] lo/hi; one [region.NAME]
    per region with rect = "x0 y0 w h", class, and profile options.
    """
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise SceneError(f"cannot read scene file {path}")
    try:
        width = parser.getint("canvas", "width")
        height = parser.getint("canvas", "height")
    except (configparser.Error, ValueError) as exc:
        raise SceneError(f"{path}: bad [canvas] section: {exc}")

    if parser.has_option("timing", "timestamps"):
        try:
            stamps = np.array([float(v) for v in
                               parser.get("timing", "timestamps").split()])
        except ValueError as exc:
            raise SceneError(f"{path}: bad timestamps: {exc}")
    else:
        try:
            fps = parser.getfloat("timing", "fps")
            frames = parser.getint("timing", "frames")
        except (configparser.Error, ValueError) as exc:
            raise SceneError(f"{path}: [timing] needs timestamps "
                             f"or fps+frames: {exc}")
        if fps <= 0 or frames < 1:
            raise SceneError(f"{path}: fps and frames must be positive")
        stamps = (np.arange(frames) + 1.0) / fps

    sigma = 0.0
    seed = 0
    if parser.has_section("noise"):
        sigma = parser.getfloat("noise", "sigma", fallback=0.0)
        seed = parser.getint("noise", "seed", fallback=0)
    lo = 0.0
    hi = math.inf
    if parser.has_section("clamp"):
        lo = parser.getfloat("clamp", "lo", fallback=0.0)
        hi = parser.getfloat("clamp", "hi", fallback=math.inf)

    regions = []
    for section in parser.sections():
        if not section.startswith("region"):
            continue
        opts = dict(parser.items(section))
        try:
            rect = tuple(int(v) for v in opts["rect"].split())
            class_id = int(opts["class"])
        except KeyError as exc:
            raise SceneError(f"{path} [{section}]: missing option {exc}")
        except ValueError as exc:
            raise SceneError(f"{path} [{section}]: bad value: {exc}")
        if len(rect) != 4:
            raise SceneError(f"{path} [{section}]: rect needs 4 integers")
        regions.append(Region(rect, class_id,
                              _profile_from_options(opts, f"{path} [{section}]")))
    if not regions:
        raise SceneError(f"{path}: no [region.*] sections")
    layout = RegionLayout(width, height, tuple(regions))
    return Scene(layout, stamps, NoiseSpec(sigma, seed), (lo, hi))
