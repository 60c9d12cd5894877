"""Procedural fingerprint-like image generator.

Each identity owns a smooth 2-D orientation field (a small sum of
low-frequency plane waves), a ridge frequency in cycles/pixel, a core
position with an elliptical pressure envelope, and a low-frequency
contrast field. An impression renders a soft-thresholded sinusoid along
that field under a per-impression random rotation (drawn within +-5 deg,
inside the <=10 deg envelope), translation (+-1.5 px, inside <=4 px) and
contrast jitter.

Attack species perturb texture statistics while preserving the
identity's field; each also carries a material-response cast (spoof
materials change overall contrast and ridge thickness, not just local
texture):

  A: Gaussian blur, sigma in [1, 2] px, plus a mild contrast drop that
     overlaps the bona fide jitter range (only texture fully gives A away)
  B: multiplicative speckle noise, plus a strong brightness lift
  C: ridge frequency scaled by 1.15, plus thickened ridges (duty shift)
     and a brightness lift

Everything is deterministic in (seed, config): per-sample generators are
derived as default_rng([seed, identity, impression]).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

BONA_FIDE = "bona_fide"
ATTACK = "attack"
NO_SPECIES = "none"
DEFAULT_SPECIES = ("A", "B", "C")

_FREQ_LO, _FREQ_HI = 0.08, 0.16
# Drawn pose jitter; kept inside the documented <=10 deg / <=4 px envelope and
# calibrated so pixel-level matching of unseen identities stays learnable.
_MAX_ROTATION = math.radians(5.0)
_MAX_TRANSLATION = 1.5
# Bound on sum(|amplitude * wave vector|) of the orientation waves, chosen so
# adjacent-pixel angle steps stay well under 0.2 rad at the 32 px reference scale.
_ORIENT_SLOPE_BOUND = 2.6


@dataclass
class Identity:
    """Seeded parameters that define one synthetic finger."""

    identity_id: int
    angle_offset: float
    orient_waves: np.ndarray      # rows of (wx, wy, phase, amplitude)
    frequency: float              # ridge frequency, cycles/pixel
    core: tuple[float, float]     # in normalized [-1, 1] coordinates
    contrast_waves: np.ndarray    # rows of (wx, wy, phase, amplitude)
    ridge_phase: float
    ridge_bias: float             # duty-cycle offset of the thresholded sinusoid
    envelope_axes: tuple[float, float]
    envelope_angle: float

    def __post_init__(self):
        if not _FREQ_LO <= self.frequency <= _FREQ_HI:
            raise ValueError(f"ridge frequency {self.frequency} outside [{_FREQ_LO}, {_FREQ_HI}]")


@dataclass
class Sample:
    """One rendered impression: image plus identity and liveness ground truth."""

    image: np.ndarray             # (C, H, W) float32 in [0, 1]
    identity_id: int
    liveness: str
    pai_species: str
    impression_index: int

    def __post_init__(self):
        if self.liveness not in (BONA_FIDE, ATTACK):
            raise ValueError(f"unknown liveness '{self.liveness}'")
        if (self.liveness == BONA_FIDE) != (self.pai_species == NO_SPECIES):
            raise ValueError(
                f"liveness '{self.liveness}' inconsistent with species '{self.pai_species}'"
            )
        if not np.all(np.isfinite(self.image)):
            raise ValueError("sample image contains non-finite values")

    @property
    def key(self) -> str:
        return f"{self.identity_id}_{self.impression_index}"


@dataclass
class DatasetSplit:
    """Identity-disjoint train/test sample lists."""

    train: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)
    train_identities: list[int] = field(default_factory=list)
    test_identities: list[int] = field(default_factory=list)

    def __post_init__(self):
        overlap = set(self.train_identities) & set(self.test_identities)
        if overlap:
            raise ValueError(f"train/test identity overlap: {sorted(overlap)}")


def make_identity(seed, identity_id: int = 0) -> Identity:
    """Deterministically draw one identity's field parameters from `seed`."""
    rng = np.random.default_rng(seed)
    n_waves = 4
    angles = rng.uniform(0.0, 2.0 * math.pi, size=n_waves)
    mags = rng.uniform(0.4 * math.pi, 1.0 * math.pi, size=n_waves)
    waves = np.zeros((n_waves, 4))
    waves[:, 0] = mags * np.cos(angles)
    waves[:, 1] = mags * np.sin(angles)
    waves[:, 2] = rng.uniform(0.0, 2.0 * math.pi, size=n_waves)
    waves[:, 3] = rng.uniform(0.2, 0.6, size=n_waves)
    slope = float(np.sum(waves[:, 3] * mags))
    if slope > _ORIENT_SLOPE_BOUND:
        waves[:, 3] *= _ORIENT_SLOPE_BOUND / slope

    n_contrast = 3
    contrast = np.zeros((n_contrast, 4))
    c_angles = rng.uniform(0.0, 2.0 * math.pi, size=n_contrast)
    c_mags = rng.uniform(0.3 * math.pi, 0.9 * math.pi, size=n_contrast)
    contrast[:, 0] = c_mags * np.cos(c_angles)
    contrast[:, 1] = c_mags * np.sin(c_angles)
    contrast[:, 2] = rng.uniform(0.0, 2.0 * math.pi, size=n_contrast)
    contrast[:, 3] = rng.uniform(0.25, 0.45, size=n_contrast)

    return Identity(
        identity_id=identity_id,
        angle_offset=float(rng.uniform(-0.5 * math.pi, 0.5 * math.pi)),
        orient_waves=waves,
        frequency=float(rng.uniform(_FREQ_LO, _FREQ_HI)),
        core=(float(rng.uniform(-0.45, 0.45)), float(rng.uniform(-0.45, 0.45))),
        contrast_waves=contrast,
        ridge_phase=float(rng.uniform(0.0, 2.0 * math.pi)),
        ridge_bias=float(rng.uniform(-0.3, 0.3)),
        envelope_axes=(float(rng.uniform(0.55, 1.05)), float(rng.uniform(0.55, 1.05))),
        envelope_angle=float(rng.uniform(0.0, math.pi)),
    )


def orientation_field(identity: Identity, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Ridge angle at normalized coordinates (u, v) in [-1, 1]."""
    theta = np.full_like(u, identity.angle_offset)
    for wx, wy, phase, amp in identity.orient_waves:
        theta = theta + amp * np.cos(wx * u + wy * v + phase)
    return theta


def _contrast_field(identity: Identity, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    a = np.ones_like(u)
    for wx, wy, phase, amp in identity.contrast_waves:
        a = a + amp * np.cos(wx * u + wy * v + phase)
    lo = 1.0 - identity.contrast_waves[:, 3].sum()
    hi = 1.0 + identity.contrast_waves[:, 3].sum()
    return (a - lo) / (hi - lo) * 0.7 + 0.3   # into [0.3, 1.0]


def _render_pattern(identity: Identity, size: int, frequency: float,
                    rotation: float, translation: tuple[float, float],
                    bias_shift: float = 0.0) -> np.ndarray:
    """Grayscale (H, W) render of the identity at a rigid pose, values in [0, 1]."""
    half = size / 2.0
    px = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    xg, yg = np.meshgrid(px, px, indexing="xy")
    # inverse rigid transform: pattern coordinates that land on each pixel
    cr, sr = math.cos(-rotation), math.sin(-rotation)
    xs = xg - translation[0]
    ys = yg - translation[1]
    xp = cr * xs - sr * ys
    yp = sr * xs + cr * ys
    u = xp / half
    v = yp / half
    theta = orientation_field(identity, u, v)
    phase = 2.0 * math.pi * frequency * (xp * np.cos(theta) + yp * np.sin(theta))
    ridge = 1.0 / (1.0 + np.exp(-5.0 * (np.sin(phase + identity.ridge_phase)
                                        - identity.ridge_bias + bias_shift)))
    amp = _contrast_field(identity, u, v)
    du = u - identity.core[0]
    dv = v - identity.core[1]
    ca, sa = math.cos(identity.envelope_angle), math.sin(identity.envelope_angle)
    ea = (ca * du + sa * dv) / identity.envelope_axes[0]
    eb = (-sa * du + ca * dv) / identity.envelope_axes[1]
    envelope = np.exp(-(ea * ea + eb * eb) / 2.0)
    return envelope * amp * ridge


def render_impression(identity: Identity, liveness: str, pai_species: str,
                      rng: np.random.Generator, impression_index: int = 0,
                      image_size: int = 32, channels: int = 1) -> Sample:
    """Render one impression; attack species perturb texture, never the field."""
    if liveness not in (BONA_FIDE, ATTACK):
        raise ValueError(f"unknown liveness '{liveness}'")
    if (liveness == BONA_FIDE) != (pai_species == NO_SPECIES):
        raise ValueError(f"liveness '{liveness}' inconsistent with species '{pai_species}'")
    if liveness == ATTACK and pai_species not in ("A", "B", "C"):
        raise ValueError(f"unknown PAI species '{pai_species}'")

    rotation = rng.uniform(-_MAX_ROTATION, _MAX_ROTATION)
    translation = (rng.uniform(-_MAX_TRANSLATION, _MAX_TRANSLATION),
                   rng.uniform(-_MAX_TRANSLATION, _MAX_TRANSLATION))
    frequency = identity.frequency * (1.15 if pai_species == "C" else 1.0)
    bias_shift = rng.uniform(0.15, 0.25) if pai_species == "C" else 0.0
    img = _render_pattern(identity, image_size, frequency, rotation, translation,
                          bias_shift=bias_shift)

    if pai_species == "A":
        img = gaussian_filter(img, sigma=rng.uniform(1.0, 2.0), mode="nearest")
        img = 0.5 + rng.uniform(0.64, 0.82) * (img - 0.5)
    elif pai_species == "B":
        img = img * (1.0 + 0.25 * rng.standard_normal(img.shape))
        img = img + rng.uniform(0.14, 0.22)
    elif pai_species == "C":
        img = img + rng.uniform(0.14, 0.22)

    gamma = rng.uniform(0.85, 1.15)
    beta = rng.uniform(-0.05, 0.05)
    img = 0.5 + gamma * (img - 0.5) + beta
    img = img + 0.01 * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    image = np.repeat(img[None, :, :], channels, axis=0)
    return Sample(image=image, identity_id=identity.identity_id, liveness=liveness,
                  pai_species=pai_species, impression_index=impression_index)


def build_dataset(num_identities: int, impressions_per_id: int = 6,
                  attack_fraction: float = 0.5, seed: int = 0, image_size: int = 32,
                  channels: int = 1, species: tuple[str, ...] = DEFAULT_SPECIES) -> DatasetSplit:
    """Identity-disjoint 80/20 split of rendered impressions.

    Every identity gets the same impression plan: bona fide impressions
    first, then attacks cycling through `species`. The plan must leave at
    least two bona fide impressions and one attack per species so genuine
    pairs and per-species IAPMR exist on the test side.
    """
    if num_identities < 2:
        raise ValueError(f"need at least 2 identities, got {num_identities}")
    n_attack = int(round(attack_fraction * impressions_per_id))
    n_bona = impressions_per_id - n_attack
    if n_bona < 2:
        raise ValueError(
            f"plan gives {n_bona} bona fide impressions per identity; need >= 2 "
            f"(impressions_per_id={impressions_per_id}, attack_fraction={attack_fraction})"
        )
    if species and n_attack < len(species):
        raise ValueError(
            f"plan gives {n_attack} attacks per identity but {len(species)} species "
            f"are configured; every species needs at least one impression"
        )

    split_rng = np.random.default_rng([seed, 0xD15])
    order = split_rng.permutation(num_identities)
    n_test = max(1, int(round(0.2 * num_identities)))
    test_ids = sorted(int(i) for i in order[:n_test])
    train_ids = sorted(int(i) for i in order[n_test:])

    def render_all(ids: list[int]) -> list[Sample]:
        samples = []
        for ident_id in ids:
            identity = make_identity([seed, ident_id], identity_id=ident_id)
            for j in range(impressions_per_id):
                if j < n_bona:
                    liveness, sp = BONA_FIDE, NO_SPECIES
                else:
                    liveness, sp = ATTACK, species[(j - n_bona) % len(species)]
                rng = np.random.default_rng([seed, ident_id, j])
                samples.append(render_impression(identity, liveness, sp, rng,
                                                 impression_index=j,
                                                 image_size=image_size, channels=channels))
        return samples

    return DatasetSplit(train=render_all(train_ids), test=render_all(test_ids),
                        train_identities=train_ids, test_identities=test_ids)


def export_dataset(split: DatasetSplit, out_dir) -> list[str]:
    """Write 8-bit grayscale PNGs plus a manifest.csv per split directory.

    Files are named {identity}_{impression}_{liveness}_{species}.png; the
    manifest columns are path, identity, liveness, species.
    """
    import csv
    from pathlib import Path

    from PIL import Image

    out = Path(out_dir)
    written = []
    for name, samples in (("train", split.train), ("test", split.test)):
        sub = out / name
        sub.mkdir(parents=True, exist_ok=True)
        rows = []
        for s in samples:
            fname = f"{s.identity_id}_{s.impression_index}_{s.liveness}_{s.pai_species}.png"
            gray = np.round(s.image[0] * 255.0).astype(np.uint8)
            Image.fromarray(gray, mode="L").save(sub / fname)
            rows.append((f"{name}/{fname}", s.identity_id, s.liveness, s.pai_species))
            written.append(str(sub / fname))
        with open(sub / "manifest.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "identity", "liveness", "species"])
            writer.writerows(rows)
    return written
