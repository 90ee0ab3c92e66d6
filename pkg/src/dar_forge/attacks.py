"""Full-image baseline attacks: FGSM, L∞ PGD, bounded uniform noise and one-pixel search.

All attacks are untargeted and act on a single (C, H, W) float32 image. The
loss is cross-entropy at the true label, so every gradient step ascends it.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from dar_forge.autodiff import forward, loss_and_input_gradient
from dar_forge.errors import RejectedInputError

_MASK64 = (1 << 64) - 1


class XorShift64Star:
    """xorshift64* generator (shifts 12/25/27, multiplier 0x2545F4914F6CDD1D).

    The seed is passed through one splitmix64 round so that small or zero
    seeds still give a nonzero, well-mixed state.
    """

    MULTIPLIER = 0x2545F4914F6CDD1D

    def __init__(self, seed):
        z = (int(seed) + 0x9E3779B97F4A7C15) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        z ^= z >> 31
        self.state = z or 0x9E3779B97F4A7C15

    def next_u64(self):
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self.state = x
        return (x * self.MULTIPLIER) & _MASK64

    def uniform(self, n):
        """``n`` floats in [0, 1) on a 2^-24 grid (exact in float32)."""
        return np.array([(self.next_u64() >> 40) for _ in range(n)], dtype=np.float64) * 2.0 ** -24

    def randbelow(self, n):
        # rejection sampling keeps the draw unbiased
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n


def derive_seed(*parts):
    """Stable 64-bit seed from arbitrary printable parts (e.g. global seed, image id, config)."""
    digest = hashlib.blake2b("|".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.25
    alpha: float = None
    steps: int = 40
    seed: int = 0
    pixel_min: float = 0.0
    pixel_max: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise RejectedInputError(f"epsilon {self.epsilon} outside [0, 1]")
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.epsilon / 4)
        if not 0.0 <= self.alpha <= self.epsilon:
            raise RejectedInputError(f"alpha {self.alpha} must lie in [0, epsilon={self.epsilon}]")
        if self.steps < 1:
            raise RejectedInputError("steps must be >= 1")
        if not self.pixel_min < self.pixel_max:
            raise RejectedInputError("pixel_min must be below pixel_max")


@dataclass
class AttackResult:
    adversarial: np.ndarray
    perturbation: np.ndarray
    original_confidence: float
    adversarial_confidence: float
    queries: int = 0


def _result(model, image, label, adversarial, queries):
    return AttackResult(
        adversarial=adversarial,
        perturbation=adversarial - image,
        original_confidence=float(forward(model, image)[label]),
        adversarial_confidence=float(forward(model, adversarial)[label]),
        queries=queries,
    )


def project_linf(x, center, epsilon):
    """Clamp ``x`` componentwise into [center - ε, center + ε]."""
    x = np.asarray(x)
    center = np.asarray(center)
    if x.shape != center.shape:
        raise RejectedInputError(f"shape mismatch {x.shape} vs {center.shape}")
    eps = np.asarray(epsilon, dtype=center.dtype)
    return np.minimum(np.maximum(x, center - eps), center + eps)


def fgsm(model, image, label, cfg):
    """Single signed-gradient step of size ε, clipped to the pixel range."""
    image = np.asarray(image, dtype=np.float32)
    g = loss_and_input_gradient(model, image, label).grad_input
    adv = image + np.float32(cfg.epsilon) * np.sign(g)
    adv = np.clip(adv, np.float32(cfg.pixel_min), np.float32(cfg.pixel_max))
    return _result(model, image, label, adv, 1)


def pgd_step(x, grad, alpha, center, epsilon, cfg, mask=None):
    """One ascent step: signed step, clip to pixel range, project into the ε-ball."""
    step = np.float32(alpha) * np.sign(grad)
    if mask is not None:
        step = step * mask
    x = np.clip(x + step, np.float32(cfg.pixel_min), np.float32(cfg.pixel_max))
    return project_linf(x, center, epsilon)


def pgd(model, image, label, cfg, callback=None):
    """L∞ projected gradient ascent from the clean image (no random start).

    ``callback(t, x)`` is invoked with every iterate, for instrumentation.
    """
    image = np.asarray(image, dtype=np.float32)
    x = image
    for t in range(cfg.steps):
        g = loss_and_input_gradient(model, x, label).grad_input
        x = pgd_step(x, g, cfg.alpha, image, cfg.epsilon, cfg)
        if callback is not None:
            callback(t + 1, x)
    return _result(model, image, label, x, cfg.steps)


def uniform_noise(shape, epsilon, seed):
    """i.i.d. uniform noise on [-ε, ε] from a seeded xorshift64* stream, as float32."""
    n = int(np.prod(shape))
    u = XorShift64Star(seed).uniform(n)
    eta = (np.float32(epsilon) * (2.0 * u - 1.0).astype(np.float32)).reshape(shape)
    return eta


def uap_noise(image, cfg, model=None, label=None):
    """Bounded random noise, the operational 'universal perturbation' baseline.

    The model is only consulted to report confidences; without one they are NaN.
    """
    image = np.asarray(image, dtype=np.float32)
    eta = uniform_noise(image.shape, cfg.epsilon, cfg.seed)
    adv = np.clip(image + eta, np.float32(cfg.pixel_min), np.float32(cfg.pixel_max))
    if model is None:
        return AttackResult(adv, adv - image, float("nan"), float("nan"), 0)
    return _result(model, image, label, adv, 0)


def default_palette(channels):
    """Eight colours: RGB cube corners for 3 channels, evenly spaced grey levels for 1."""
    if channels == 3:
        return [np.array([r, g, b], dtype=np.float32) for r in (0, 1) for g in (0, 1) for b in (0, 1)]
    if channels == 1:
        return [np.array([v], dtype=np.float32) for v in np.linspace(0, 1, 8, dtype=np.float32)]
    raise RejectedInputError(f"no default palette for {channels} channels")


@dataclass
class OnePixelResult(AttackResult):
    location: tuple = None
    color_index: int = None


def one_pixel_attack(model, image, label, palette=None, search="auto", k=4096, seed=0,
                     exhaustive_limit=32 * 32):
    """Find the (pixel, palette colour) substitution minimising true-class confidence.

    ``search`` is ``"exhaustive"``, ``"random"`` (``k`` distinct candidates
    drawn without replacement from a seeded stream) or ``"auto"`` (exhaustive
    up to ``exhaustive_limit`` pixels). Ties break on (row, col, palette
    index). If no candidate beats the clean image, the clean image is
    returned with ``location=None``.
    """
    image = np.asarray(image, dtype=np.float32)
    label = int(label)
    c, h, w = image.shape
    palette = default_palette(c) if palette is None else [np.asarray(p, dtype=np.float32).reshape(c) for p in palette]
    if not palette:
        raise RejectedInputError("palette must be nonempty")
    n_pal = len(palette)
    total = h * w * n_pal
    if search == "auto":
        search = "exhaustive" if h * w <= exhaustive_limit else "random"
    if search == "exhaustive":
        candidates = range(total)
    elif search == "random":
        if k < 1:
            raise RejectedInputError("random search needs k >= 1")
        candidates = _sample_without_replacement(total, min(k, total), seed)
    else:
        raise RejectedInputError(f"unknown search mode {search!r}")

    original = float(forward(model, image)[label])
    best = None
    for idx in candidates:
        pix, ci = divmod(int(idx), n_pal)
        r, col = divmod(pix, w)
        trial = image.copy()
        trial[:, r, col] = palette[ci]
        key = (float(forward(model, trial)[label]), r, col, ci)
        if best is None or key < best:
            best = key
    queries = len(candidates)
    if best[0] >= original:
        return OnePixelResult(image.copy(), np.zeros_like(image), original, original, queries)
    conf, r, col, ci = best
    adv = image.copy()
    adv[:, r, col] = palette[ci]
    return OnePixelResult(adv, adv - image, original, conf, queries, (r, col), ci)


def _sample_without_replacement(n, k, seed):
    rng = XorShift64Star(seed)
    pool = np.arange(n)
    for i in range(k):
        j = i + rng.randbelow(n - i)
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k]
