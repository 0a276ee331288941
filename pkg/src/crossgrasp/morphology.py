"""Shared canonical action space and procedural embodiment generation.

Every hand commands the same 20-dim canonical finger space: 5 fingers
(thumb, index, middle, ring, pinky) x 4 joint roles (abduction, basal
flexion, proximal flexion, distal flexion), flattened finger-major.  The
flat ordering is a convention of this artifact and is defined once here:

    slot = FINGER_ORDER.index(finger) * 4 + ROLE_ORDER.index(role)

A hand archetype maps its native joint vector into canonical slots through
an injective index table; unmapped slots stay zero.  Variants are sampled by
independent uniform multiplicative perturbation of link lengths, masses, and
tracking gains, never touching the kinematic topology or the index table.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace

import numpy as np

FINGER_ORDER = ("thumb", "index", "middle", "ring", "pinky")
ROLE_ORDER = ("abduction", "basal", "proximal", "distal")

FINGER_DIMS = 20          # canonical finger command width
ARM_DIMS = 7              # palm delta pose: translation (3) + quaternion (4)
ACTION_DIMS = FINGER_DIMS + ARM_DIMS

SEGMENTS_PER_FINGER = 4   # palm-to-mount offset + three phalanges

# Held-out variants draw from a disjoint seed range regardless of counts.
TEST_SEED_OFFSET = 10000


def canonical_slot(finger: str, role: str) -> int:
    return FINGER_ORDER.index(finger) * 4 + ROLE_ORDER.index(role)


class MorphologyError(ValueError):
    """Invalid morphology construction or transform."""


@dataclass(frozen=True)
class HandArchetype:
    """One canonical hand family: geometry, actuation map, limits.

    ``native_to_canonical`` lists, for native joint j, the canonical slot it
    commands; it must be injective.  ``mount_dirs`` are unit directions in
    the palm plane; the distance from palm origin to each finger mount is
    segment 0 of that finger's ``link_lengths`` row so that scaling lengths
    scales the whole hand.
    """

    name: str
    finger_dof: int                       # native finger DoF count
    native_to_canonical: tuple            # length == finger_dof, injective
    fingers_present: tuple                # subset of FINGER_ORDER
    link_lengths: np.ndarray              # (5, 4) metres, segment 0 = mount offset
    link_masses: np.ndarray               # (5, 4) kg
    joint_gains: np.ndarray               # (20,) 1/s first-order tracking gains
    joint_limits: np.ndarray              # (20, 2) radians [lo, hi]
    mount_dirs: np.ndarray                # (5, 3) unit vectors, z == 0
    base_dirs: np.ndarray                 # (5, 3) unit finger base directions

    def __post_init__(self):
        table = self.native_to_canonical
        if len(table) != self.finger_dof:
            raise MorphologyError(f"{self.name}: index table length {len(table)} != {self.finger_dof}")
        if len(set(table)) != len(table):
            raise MorphologyError(f"{self.name}: index table is not injective")
        if any(not 0 <= s < FINGER_DIMS for s in table):
            raise MorphologyError(f"{self.name}: canonical index out of range")

    @property
    def mapped_slots(self) -> np.ndarray:
        mask = np.zeros(FINGER_DIMS, dtype=bool)
        mask[list(self.native_to_canonical)] = True
        return mask


def _finger_rows(values: dict) -> np.ndarray:
    return np.array([values[f] for f in FINGER_ORDER], dtype=np.float64)


def _block_table(fingers: tuple) -> tuple:
    """Native joints ordered finger-block by finger-block, roles in order."""
    table = []
    for f in fingers:
        base = FINGER_ORDER.index(f) * 4
        table.extend(range(base, base + 4))
    return tuple(table)


def _limits() -> np.ndarray:
    lim = np.zeros((FINGER_DIMS, 2))
    for s in range(FINGER_DIMS):
        if s % 4 == 0:                       # abduction slots
            lim[s] = (-0.6, 0.6)
        else:                                # flexion slots
            lim[s] = (-0.3, 2.0)
    return lim


def _make_archetypes() -> dict[str, HandArchetype]:
    # Geometry is a desk-scale stand-in: three 4-finger/5-finger families with
    # distinct sizes, gains, and native joint orderings.
    unit = lambda v: np.asarray(v, dtype=np.float64) / np.linalg.norm(v)
    mount_dirs = np.stack([
        unit((0.45, 0.89, 0.0)),     # thumb, forward of the +y edge
        unit((0.85, 0.52, 0.0)),     # index
        unit((1.00, 0.00, 0.0)),     # middle
        unit((0.85, -0.52, 0.0)),    # ring
        unit((0.75, -0.66, 0.0)),    # pinky
    ])
    base_dirs = np.stack([
        unit((0.85, 0.53, 0.0)),     # thumb sweeps toward the finger cluster
        unit((1.0, 0.0, 0.0)),
        unit((1.0, 0.0, 0.0)),
        unit((1.0, 0.0, 0.0)),
        unit((1.0, 0.0, 0.0)),
    ])
    lengths = _finger_rows({
        "thumb": (0.050, 0.046, 0.036, 0.030),
        "index": (0.052, 0.050, 0.034, 0.026),
        "middle": (0.048, 0.052, 0.036, 0.026),
        "ring": (0.052, 0.050, 0.034, 0.026),
        "pinky": (0.054, 0.040, 0.028, 0.022),
    })
    masses = _finger_rows({
        "thumb": (0.030, 0.026, 0.018, 0.012),
        "index": (0.030, 0.025, 0.017, 0.011),
        "middle": (0.030, 0.026, 0.018, 0.011),
        "ring": (0.030, 0.025, 0.017, 0.011),
        "pinky": (0.028, 0.022, 0.014, 0.009),
    })
    four = ("thumb", "index", "middle", "ring")
    five = FINGER_ORDER

    leap = HandArchetype(
        name="leap-like", finger_dof=16,
        native_to_canonical=_block_table(four),
        fingers_present=four,
        link_lengths=lengths, link_masses=masses,
        joint_gains=np.full(FINGER_DIMS, 10.0),
        joint_limits=_limits(),
        mount_dirs=mount_dirs, base_dirs=base_dirs,
    )
    # Same DoF count but bigger hand, slower joints, and a different native
    # joint ordering (finger blocks first, thumb last).
    allegro = HandArchetype(
        name="allegro-like", finger_dof=16,
        native_to_canonical=_block_table(("index", "middle", "ring", "thumb")),
        fingers_present=four,
        link_lengths=lengths * 1.12, link_masses=masses * 1.25,
        joint_gains=np.full(FINGER_DIMS, 8.5),
        joint_limits=_limits(),
        mount_dirs=mount_dirs, base_dirs=base_dirs,
    )
    rapid = HandArchetype(
        name="rapid-like", finger_dof=20,
        native_to_canonical=_block_table(five),
        fingers_present=five,
        link_lengths=lengths * 0.92, link_masses=masses * 0.85,
        joint_gains=np.full(FINGER_DIMS, 11.0),
        joint_limits=_limits(),
        mount_dirs=mount_dirs, base_dirs=base_dirs,
    )
    return {a.name: a for a in (leap, allegro, rapid)}


ARCHETYPES = _make_archetypes()
ARCHETYPE_NAMES = tuple(ARCHETYPES)


@dataclass(frozen=True)
class PerturbationConfig:
    """Multiplicative sampling intervals for variant generation."""

    length_scale_range: tuple = (0.8, 1.2)
    mass_scale_range: tuple = (0.7, 1.3)
    gain_scale_range: tuple = (0.8, 1.2)

    def validate(self) -> None:
        for name in ("length_scale_range", "mass_scale_range", "gain_scale_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise MorphologyError(f"{name}: invalid interval ({lo}, {hi})")


@dataclass(frozen=True)
class Morphology:
    """A concrete embodiment: perturbed physical parameters over an archetype."""

    archetype: HandArchetype
    link_lengths: np.ndarray              # (5, 4)
    link_masses: np.ndarray               # (5, 4)
    joint_gains: np.ndarray               # (20,)
    dof_mask: np.ndarray                  # (20,) bool, mapped and not locked
    variant_id: int
    rng_seed: int

    def __post_init__(self):
        if (self.link_lengths <= 0).any() or (self.link_masses <= 0).any() \
                or (self.joint_gains <= 0).any():
            raise MorphologyError("lengths, masses, and gains must be positive")
        if (self.dof_mask & ~self.archetype.mapped_slots).any():
            raise MorphologyError("dof_mask actuates a slot the archetype does not map")

    @property
    def name(self) -> str:
        return f"{self.archetype.name}/{self.variant_id}"

    @property
    def finger_dof(self) -> int:
        return self.archetype.finger_dof

    def segment_inertias(self) -> np.ndarray:
        """Thin-rod inertia about a segment end, I = m L^2 / 3 (kg m^2)."""
        return self.link_masses * self.link_lengths ** 2 / 3.0


def canonical_morphology(archetype: HandArchetype) -> Morphology:
    """The unperturbed embodiment of an archetype (variant_id -1)."""
    return Morphology(
        archetype=archetype,
        link_lengths=archetype.link_lengths.copy(),
        link_masses=archetype.link_masses.copy(),
        joint_gains=archetype.joint_gains.copy(),
        dof_mask=archetype.mapped_slots,
        variant_id=-1,
        rng_seed=-1,
    )


def sample_variant(archetype: HandArchetype, cfg: PerturbationConfig,
                   seed: int) -> Morphology:
    """Draw one randomized embodiment, deterministic in (archetype, cfg, seed)."""
    cfg.validate()
    if seed < 0:
        raise MorphologyError("seed must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=seed, spawn_key=(zlib.crc32(archetype.name.encode()),)))
    lo, hi = cfg.length_scale_range
    lengths = archetype.link_lengths * rng.uniform(lo, hi, size=archetype.link_lengths.shape)
    lo, hi = cfg.mass_scale_range
    masses = archetype.link_masses * rng.uniform(lo, hi, size=archetype.link_masses.shape)
    lo, hi = cfg.gain_scale_range
    gains = archetype.joint_gains * rng.uniform(lo, hi, size=archetype.joint_gains.shape)
    return Morphology(
        archetype=archetype,
        link_lengths=lengths,
        link_masses=masses,
        joint_gains=gains,
        dof_mask=archetype.mapped_slots,
        variant_id=seed,
        rng_seed=seed,
    )


# ---------------------------------------------------------------------------
# canonical action space operators
# ---------------------------------------------------------------------------

def embed_action(native: np.ndarray, morph: Morphology) -> np.ndarray:
    """Write native joint commands into canonical slots, zero elsewhere."""
    native = np.asarray(native, dtype=np.float64)
    d = morph.finger_dof
    if native.shape != (d,):
        raise MorphologyError(f"embed_action: expected ({d},), got {native.shape}")
    out = np.zeros(FINGER_DIMS)
    out[list(morph.archetype.native_to_canonical)] = native
    return out


def project_action(canonical: np.ndarray, morph: Morphology) -> np.ndarray:
    """Read the mapped canonical slots back in native joint order."""
    canonical = np.asarray(canonical, dtype=np.float64)
    if canonical.shape != (FINGER_DIMS,):
        raise MorphologyError(f"project_action: expected ({FINGER_DIMS},), got {canonical.shape}")
    return canonical[list(morph.archetype.native_to_canonical)].copy()


def smooth_action(raw: np.ndarray, prev: np.ndarray, lam: float) -> np.ndarray:
    """First-order blend: out = lam * raw + (1 - lam) * prev."""
    if not 0.0 < lam <= 1.0:
        raise MorphologyError(f"smoothing weight must be in (0, 1], got {lam}")
    raw = np.asarray(raw, dtype=np.float64)
    prev = np.asarray(prev, dtype=np.float64)
    if raw.shape != prev.shape:
        raise MorphologyError(f"smooth_action: shapes {raw.shape} != {prev.shape}")
    return lam * raw + (1.0 - lam) * prev


def lock_joint(morph: Morphology, canonical_index: int) -> Morphology:
    """Copy with one actuated slot disabled; the joint holds position downstream."""
    if not 0 <= canonical_index < FINGER_DIMS:
        raise MorphologyError(f"canonical index {canonical_index} out of range")
    if not morph.archetype.mapped_slots[canonical_index]:
        raise MorphologyError(
            f"slot {canonical_index} is not mapped by {morph.archetype.name}")
    if not morph.dof_mask[canonical_index]:
        raise MorphologyError(f"slot {canonical_index} is already locked")
    mask = morph.dof_mask.copy()
    mask[canonical_index] = False
    return replace(morph, dof_mask=mask)


# ---------------------------------------------------------------------------
# morphology sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MorphologySets:
    train: tuple
    test: tuple
    canonical: tuple

    def by_name(self, which: str) -> tuple:
        return {"train": self.train, "test": self.test, "canonical": self.canonical}[which]


def build_morphology_sets(cfg: PerturbationConfig | None = None,
                          train_per_hand: int = 100,
                          test_per_hand: int = 32,
                          seed: int = 0) -> MorphologySets:
    """Sampled train/test variants plus the canonical hands.

    Train variants use seeds [seed, seed + train_per_hand) per archetype and
    test variants [seed + TEST_SEED_OFFSET, ...), so the two pools are
    disjoint for any counts below the offset.
    """
    cfg = cfg or PerturbationConfig()
    if train_per_hand < 0 or test_per_hand < 0:
        raise MorphologyError("counts must be >= 0")
    if train_per_hand > TEST_SEED_OFFSET:
        raise MorphologyError(f"train_per_hand must be <= {TEST_SEED_OFFSET}")
    train, test, canon = [], [], []
    for name in ARCHETYPE_NAMES:
        arch = ARCHETYPES[name]
        train.extend(sample_variant(arch, cfg, seed + k) for k in range(train_per_hand))
        test.extend(sample_variant(arch, cfg, seed + TEST_SEED_OFFSET + k)
                    for k in range(test_per_hand))
        canon.append(canonical_morphology(arch))
    return MorphologySets(train=tuple(train), test=tuple(test), canonical=tuple(canon))


# ---------------------------------------------------------------------------
# JSON persistence (reproducible and inspectable run inputs)
# ---------------------------------------------------------------------------

def morphology_to_dict(m: Morphology) -> dict:
    return {
        "archetype": m.archetype.name,
        "variant_id": m.variant_id,
        "rng_seed": m.rng_seed,
        "link_lengths": m.link_lengths.tolist(),
        "link_masses": m.link_masses.tolist(),
        "joint_gains": m.joint_gains.tolist(),
        "dof_mask": m.dof_mask.astype(int).tolist(),
    }


def morphology_from_dict(d: dict) -> Morphology:
    arch = ARCHETYPES[d["archetype"]]
    return Morphology(
        archetype=arch,
        link_lengths=np.asarray(d["link_lengths"], dtype=np.float64),
        link_masses=np.asarray(d["link_masses"], dtype=np.float64),
        joint_gains=np.asarray(d["joint_gains"], dtype=np.float64),
        dof_mask=np.asarray(d["dof_mask"], dtype=bool),
        variant_id=int(d["variant_id"]),
        rng_seed=int(d["rng_seed"]),
    )


def dump_morphologies(morphs, path=None) -> str:
    doc = {"schema": "crossgrasp-morphology-set", "version": 1,
           "morphologies": [morphology_to_dict(m) for m in morphs]}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path is not None:
        from .fileio import atomic_write_text
        atomic_write_text(path, text + "\n")
    return text


def load_morphologies(path) -> tuple:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != "crossgrasp-morphology-set":
        raise MorphologyError(f"not a morphology set file: {path}")
    return tuple(morphology_from_dict(d) for d in doc["morphologies"])
