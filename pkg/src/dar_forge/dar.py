"""Distributed adversarial regions: place n circular regions of diameter s and
perturb only inside them.

Pipeline (``craft_dar``): input-gradient saliency -> greedy suppressed argmax
placement -> circular mask -> masked PGD or masked bounded noise, with a
normalised box filter applied inside the mask and optional per-channel colour
gains at the end.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from dar_forge.attacks import AttackConfig, AttackResult, pgd_step, project_linf, uniform_noise
from dar_forge.autodiff import forward, loss_and_input_gradient
from dar_forge.errors import RejectedInputError

CANONICAL_SIZES = (2, 6, 10, 14, 18)
CANONICAL_COUNTS = (1, 2, 3, 4)


@dataclass(frozen=True)
class RegionSpec:
    center_row: int
    center_col: int
    diameter: int


@dataclass(frozen=True)
class RegionSet:
    regions: tuple
    disjoint: bool = True

    @property
    def centers(self):
        return [[r.center_row, r.center_col] for r in self.regions]


@dataclass(frozen=True)
class DarConfig:
    size: int = 6
    count: int = 1
    method: str = "pgd"
    epsilon: float = 0.25
    alpha: float = None
    steps: int = 40
    smooth_kernel: int = 3
    smooth_every: int = 1
    color_gains: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    pixel_min: float = 0.0
    pixel_max: float = 1.0

    def __post_init__(self):
        if self.size < 1 or self.count < 1:
            raise RejectedInputError("size and count must be >= 1")
        if self.method not in ("pgd", "uap"):
            raise RejectedInputError(f"unknown DAR method {self.method!r}")
        if self.smooth_kernel < 1 or self.smooth_kernel % 2 == 0:
            raise RejectedInputError("smooth_kernel must be an odd integer >= 1")
        if self.smooth_every < 1:
            raise RejectedInputError("smooth_every must be >= 1")
        if len(self.color_gains) != 3 or min(self.color_gains) <= 0:
            raise RejectedInputError("color_gains must be three positive floats")
        object.__setattr__(self, "color_gains", tuple(float(g) for g in self.color_gains))
        # validates epsilon/alpha/steps and fills the alpha default
        object.__setattr__(self, "alpha", self.attack_config().alpha)

    def attack_config(self):
        return AttackConfig(epsilon=self.epsilon, alpha=self.alpha, steps=self.steps, seed=self.seed,
                            pixel_min=self.pixel_min, pixel_max=self.pixel_max)


def _window_sum(a, k):
    """Sum over the k x k window centred on each pixel (zero outside), float64."""
    a = np.asarray(a, dtype=np.float64)
    r = k // 2
    h, w = a.shape[-2:]
    pad = [(0, 0)] * (a.ndim - 2) + [(r, r), (r, r)]
    p = np.pad(a, pad)
    out = np.zeros(a.shape, dtype=np.float64)
    for i in range(k):
        for j in range(k):
            out += p[..., i:i + h, j:j + w]
    return out


def saliency_kernel(size):
    """Odd box width covering the bounding box of a diameter-``size`` disk."""
    return size if size % 2 else size + 1


def _disk_sum(a, size):
    """Sum of ``a`` over the diameter-``size`` disk centred on each pixel (float64)."""
    r = size // 2
    h, w = a.shape
    p = np.pad(np.asarray(a, dtype=np.float64), r)
    out = np.zeros((h, w), dtype=np.float64)
    for i, j in zip(*np.nonzero(disk_mask(r, r, size, (2 * r + 1, 2 * r + 1)))):
        out += p[i:i + h, j:j + w]
    return out


def saliency_from_gradient(grad, size, image=None, epsilon=None, pixel_min=0.0, pixel_max=1.0):
    """Region scores from an input gradient.

    Without ``epsilon``: box mean (in-bounds normalised, width
    ``saliency_kernel(size)``) of the channel-max ``|grad|``.

    With ``epsilon`` (and ``image``): first-order loss gain of an ε sign step
    restricted to the pixel range, ``sum_c grad * (clip(x + ε sign grad) - x)``,
    summed over the disk each centre would cover. Saturated pixels that cannot
    move in the ascent direction contribute nothing.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if epsilon is None:
        score = np.abs(grad).max(axis=0)
        k = saliency_kernel(size)
        counts = _window_sum(np.ones_like(score), k)
        return (_window_sum(score, k) / counts).astype(np.float32)
    x = np.asarray(image, dtype=np.float64)
    delta = np.clip(x + epsilon * np.sign(grad), pixel_min, pixel_max) - x
    gain = (grad * delta).sum(axis=0)
    return _disk_sum(gain, size).astype(np.float32)


def saliency_map(model, image, label, size, epsilon=None, pixel_min=0.0, pixel_max=1.0):
    """Per-centre region score from one input-gradient query (see ``saliency_from_gradient``)."""
    g = loss_and_input_gradient(model, image, label).grad_input
    return saliency_from_gradient(g, size, image, epsilon, pixel_min, pixel_max)


def place_regions(saliency, size, count):
    """Greedy selection of ``count`` score-maximal centres with distance suppression.

    After each pick every centre within Euclidean distance ``size`` is
    excluded, so the rasterised disks cannot overlap. If the image runs out of
    candidates the suppression radius is halved once and ``disjoint`` is
    reported False.
    """
    saliency = np.asarray(saliency, dtype=np.float64)
    h, w = saliency.shape
    if count < 1:
        raise RejectedInputError("count must be >= 1")
    if size < 1 or size > min(h, w):
        raise RejectedInputError(f"a region of diameter {size} does not fit a {h}x{w} image")
    rows, cols = np.mgrid[0:h, 0:w]
    available = np.ones((h, w), dtype=bool)
    chosen = []
    disjoint = True
    # squared-distance threshold scaled by 4 to stay in integers: d <= radius  <=>  4 d^2 <= (2 radius)^2
    limit4 = 4 * size * size
    while len(chosen) < count:
        if not available.any():
            if not disjoint:
                raise RejectedInputError(
                    f"only {len(chosen)} of {count} regions of diameter {size} fit the image")
            disjoint = False
            limit4 = size * size
            available = np.ones((h, w), dtype=bool)
            for r, c in chosen:
                available &= 4 * ((rows - r) ** 2 + (cols - c) ** 2) > limit4
            continue
        masked = np.where(available, saliency, -np.inf)
        r, c = divmod(int(np.argmax(masked)), w)
        chosen.append((r, c))
        available &= 4 * ((rows - r) ** 2 + (cols - c) ** 2) > limit4
    return RegionSet(tuple(RegionSpec(r, c, size) for r, c in chosen), disjoint)


def disk_mask(center_row, center_col, diameter, shape):
    h, w = shape
    rows, cols = np.mgrid[0:h, 0:w]
    return 4 * ((rows - center_row) ** 2 + (cols - center_col) ** 2) <= diameter * diameter


def rasterize_mask(regions, shape):
    """Binary (H, W) float32 mask: 1 where some region's disk covers the pixel."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    for reg in regions.regions:
        if not (0 <= reg.center_row < h and 0 <= reg.center_col < w):
            raise RejectedInputError(f"region centre ({reg.center_row}, {reg.center_col}) outside {h}x{w}")
        mask |= disk_mask(reg.center_row, reg.center_col, reg.diameter, shape)
    return mask.astype(np.float32)


def box_filter_masked(image, mask, k):
    """Replace each in-mask pixel by the mean of in-mask, in-bounds pixels in its k x k window."""
    if k < 1 or k % 2 == 0:
        raise RejectedInputError("box filter width must be an odd integer >= 1")
    image = np.asarray(image)
    if k == 1:
        return image.copy()
    m = np.asarray(mask, dtype=np.float64)
    num = _window_sum(image.astype(np.float64) * m, k)
    den = _window_sum(m, k)
    smoothed = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return np.where(m > 0, smoothed.astype(image.dtype), image)


def _check_mask(image, mask):
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape != image.shape[1:]:
        raise RejectedInputError(f"mask shape {mask.shape} does not match image {image.shape[1:]}")
    if not np.all((mask == 0) | (mask == 1)):
        raise RejectedInputError("mask must be binary")
    if not mask.any():
        raise RejectedInputError("mask selects no pixels")
    return mask


def _smooth_project(x, image, mask, cfg, acfg):
    x = box_filter_masked(x, mask, cfg.smooth_kernel)
    x = np.clip(x, np.float32(acfg.pixel_min), np.float32(acfg.pixel_max))
    return project_linf(x, image, acfg.epsilon)


def _finish(x, image, mask, cfg, acfg):
    on = mask > 0
    x = np.where(on, x, image)
    gains = np.asarray(cfg.color_gains, dtype=np.float32)
    if np.any(gains != 1):
        # single-channel images take the first gain only
        for ch in range(x.shape[0]):
            tinted = np.clip(x[ch] * gains[ch if x.shape[0] == 3 else 0],
                             np.float32(acfg.pixel_min), np.float32(acfg.pixel_max))
            x[ch] = np.where(on, tinted, x[ch])
    return x


def _result(model, image, label, adv, queries):
    if model is None:
        nan = float("nan")
        return AttackResult(adv, adv - image, nan, nan, queries)
    return AttackResult(adv, adv - image, float(forward(model, image)[label]),
                        float(forward(model, adv)[label]), queries)


def masked_pgd(model, image, label, mask, cfg):
    """PGD whose steps, smoothing and final perturbation are confined to ``mask``."""
    image = np.asarray(image, dtype=np.float32)
    mask = _check_mask(image, mask)
    acfg = cfg.attack_config()
    k = cfg.smooth_kernel
    x = image
    smoothed_last = False
    for t in range(acfg.steps):
        g = loss_and_input_gradient(model, x, label).grad_input
        x = pgd_step(x, g, acfg.alpha, image, acfg.epsilon, acfg, mask)
        smoothed_last = k > 1 and (t + 1) % cfg.smooth_every == 0
        if smoothed_last:
            x = _smooth_project(x, image, mask, cfg, acfg)
    if k > 1 and not smoothed_last:
        x = _smooth_project(x, image, mask, cfg, acfg)
    x = _finish(x, image, mask, cfg, acfg)
    return _result(model, image, label, x, acfg.steps)


def masked_uap(image, mask, cfg, model=None, label=None):
    """Bounded uniform noise inside ``mask``, smoothed and tinted like ``masked_pgd``."""
    image = np.asarray(image, dtype=np.float32)
    mask = _check_mask(image, mask)
    acfg = cfg.attack_config()
    eta = uniform_noise(image.shape, acfg.epsilon, acfg.seed) * mask
    x = np.clip(image + eta, np.float32(acfg.pixel_min), np.float32(acfg.pixel_max))
    if cfg.smooth_kernel > 1:
        x = _smooth_project(x, image, mask, cfg, acfg)
    x = _finish(x, image, mask, cfg, acfg)
    return _result(model, image, label, x, 0)


def region_drop_map(model, image, label, size, epsilon, pixel_min=0.0, pixel_max=1.0):
    """Query-based placement scores: true-class confidence drop of a single-region
    masked FGSM step centred at every pixel (H*W forward queries)."""
    image = np.asarray(image, dtype=np.float32)
    _, h, w = image.shape
    label = int(label)
    g = loss_and_input_gradient(model, image, label).grad_input
    step = np.float32(epsilon) * np.sign(g)
    base = float(forward(model, image)[label])
    drops = np.zeros((h, w), dtype=np.float64)
    for r in range(h):
        for c in range(w):
            m = disk_mask(r, c, size, (h, w)).astype(np.float32)
            adv = np.clip(image + step * m, np.float32(pixel_min), np.float32(pixel_max))
            drops[r, c] = base - float(forward(model, adv)[label])
    return drops


@dataclass
class DarResult:
    attack: AttackResult
    regions: RegionSet
    saliency: np.ndarray
    mask: np.ndarray
    config: DarConfig
    placement_queries: int = 0
    extra: dict = field(default_factory=dict)

    def record(self, image_id, model_name):
        """Flat metadata record (JSON-ready) for export."""
        return {
            "image_id": image_id,
            "model": model_name,
            "method": self.config.method,
            "size": self.config.size,
            "count": self.config.count,
            "epsilon": self.config.epsilon,
            "centers": self.regions.centers,
            "orig_conf": self.attack.original_confidence,
            "adv_conf": self.attack.adversarial_confidence,
            "disjoint": self.regions.disjoint,
            "dar_config": {k: v for k, v in asdict(self.config).items() if k not in ("size", "count", "method", "epsilon")},
        }


def craft_dar(model, image, label, cfg, placement="saliency", saliency=None):
    """Full DAR pipeline on a white-box source model.

    ``placement`` is ``"saliency"`` (one gradient query) or ``"query"``
    (brute-force masked-FGSM drop at every centre). A precomputed saliency
    map may be passed to skip recomputation.
    """
    image = np.asarray(image, dtype=np.float32)
    if saliency is not None:
        queries = 0
    elif placement == "saliency":
        saliency = saliency_map(model, image, label, cfg.size, cfg.epsilon, cfg.pixel_min, cfg.pixel_max)
        queries = 1
    elif placement == "query":
        saliency = region_drop_map(model, image, label, cfg.size, cfg.epsilon, cfg.pixel_min, cfg.pixel_max)
        queries = 1 + image.shape[1] * image.shape[2]
    else:
        raise RejectedInputError(f"unknown placement {placement!r}")
    regions = place_regions(saliency, cfg.size, cfg.count)
    mask = rasterize_mask(regions, image.shape[1:])
    if cfg.method == "pgd":
        result = masked_pgd(model, image, label, mask, cfg)
    else:
        result = masked_uap(image, mask, cfg, model, label)
    return DarResult(result, regions, saliency, mask, cfg, queries)
