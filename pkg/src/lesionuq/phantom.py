"""Synthetic scans with planted lesions and a simulated MC dropout segmenter.

Ground truth is a set of axis-aligned voxelised ellipsoids.  The simulated
segmenter works on the logit scale: every voxel gets a static logit plus
per-sample Gaussian jitter, and every planted object gets a per-sample
shift shared by its voxels, which is what makes the T samples disagree
coherently.  Small lesions are attenuated, missed more often and jitter
more; spurious blobs (false detections) sit near the decision boundary
with the largest disagreement.  The learned-variance channel is simulated
as a positive field that grows with the local sample disagreement.

Scenes are a pure function of the config, seed included; see
:mod:`lesionuq.rng` for the draw algorithm.
"""
from __future__ import annotations

import configparser
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .lesions import BINS, OFFSETS_18, connected_components_18, dilate_mask
from .measures import sample_variance_kernel
from .rng import Stream
from .volume import (
    LabelMask, SampleStack, atomic_write_bytes, load_volume, save_volume,
)

CONFIG_VERSION = 1

SIZE_RANGES = {"small": (3, 10), "medium": (11, 50), "large": (51, 180)}
_FACE_OFFSETS = [o for o in OFFSETS_18 if np.count_nonzero(o) == 1]


class PhantomError(RuntimeError):
    """The scene could not be generated (e.g. lesions do not fit)."""


@dataclass(frozen=True)
class NoiseProfile:
    miss_rate: float            # chance a planted lesion is not segmented
    fp_rate: float              # spurious blobs of this size bin per planted lesion of the bin
    boundary_jitter: float      # logit std of the one-voxel shell around a lesion
    sample_disagreement: float  # per-sample logit std shared by a lesion's voxels
    logit: tuple                # range of mean logits of segmented lesions


DEFAULT_NOISE = {
    "small": NoiseProfile(miss_rate=0.20, fp_rate=0.35, boundary_jitter=0.9,
                          sample_disagreement=1.2, logit=(1.75, 4.5)),
    "medium": NoiseProfile(miss_rate=0.03, fp_rate=0.06, boundary_jitter=0.6,
                           sample_disagreement=0.6, logit=(3.5, 5.5)),
    "large": NoiseProfile(miss_rate=0.0, fp_rate=0.0, boundary_jitter=0.5,
                          sample_disagreement=0.3, logit=(5.0, 6.0)),
}


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (48, 48, 24)
    lesion_count: tuple = (8, 12)       # inclusive range of planted lesions per scene
    small_fraction: float = 0.40
    medium_fraction: float = 0.35       # large gets the remainder
    noise: dict = field(default_factory=lambda: dict(DEFAULT_NOISE))
    background_logit: float = -7.0
    background_jitter: float = 0.3
    missed_logit: tuple = (-3.5, -1.0)  # range of interior logits of lesions the model misses
    spurious_logit: tuple = (-0.4, 0.4)  # range of mean logits of spurious blobs
    spurious_size: tuple = (3, 6)
    spurious_disagreement: float = 2.5
    lesion_voxel_jitter: float = 0.0    # per-voxel logit noise inside lesions, relative units
    spurious_voxel_jitter: float = 0.05
    T: int = 10
    with_variances: bool = True
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 8:
            raise ValueError(f"phantom dims must be three values >= 8, got {dims}")
        object.__setattr__(self, "dims", dims)
        lo, hi = (int(v) for v in self.lesion_count)
        if lo < 0 or hi < lo:
            raise ValueError(f"bad lesion_count range {(lo, hi)}")
        object.__setattr__(self, "lesion_count", (lo, hi))
        if not (0 <= self.small_fraction <= 1 and 0 <= self.medium_fraction <= 1
                and self.small_fraction + self.medium_fraction <= 1):
            raise ValueError("bin fractions must lie in [0, 1] and sum to at most 1")
        if int(self.T) < 1:
            raise ValueError("T must be >= 1")
        for b in BINS:
            p = self.noise[b]
            if not (0 <= p.miss_rate <= 1 and 0 <= p.fp_rate <= 1):
                raise ValueError(f"{b}: miss_rate and fp_rate must lie in [0, 1]")
            if p.boundary_jitter < 0 or p.sample_disagreement < 0:
                raise ValueError(f"{b}: jitter and disagreement must be >= 0")
        object.__setattr__(self, "seed", int(self.seed) & ((1 << 64) - 1))

    @property
    def bin_weights(self):
        return (self.small_fraction, self.medium_fraction,
                1.0 - self.small_fraction - self.medium_fraction)

    # --- flat key = value config text -------------------------------------

    def to_text(self) -> str:
        lines = ["[phantom]", f"version = {CONFIG_VERSION}"]
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "noise":
                for b in BINS:
                    for k, x in asdict(v[b]).items():
                        x = ", ".join(repr(e) for e in x) if isinstance(x, tuple) else repr(x)
                        lines.append(f"{b}.{k} = {x}")
            elif isinstance(v, tuple):
                lines.append(f"{f.name} = {', '.join(repr(x) for x in v)}")
            else:
                lines.append(f"{f.name} = {v!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PhantomConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if not cp.has_section("phantom"):
            raise ValueError("config needs a [phantom] section")
        sec = dict(cp["phantom"])
        version = int(sec.pop("version", CONFIG_VERSION))
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {version}")
        kwargs = {}
        noise = {b: asdict(p) for b, p in DEFAULT_NOISE.items()}
        names = {f.name.lower(): f.name for f in fields(cls)}
        types = {f.name: f.default for f in fields(cls)}
        for key, raw in sec.items():
            if "." in key:
                b, k = key.split(".", 1)
                if b not in noise or k not in noise[b]:
                    raise ValueError(f"unknown config key {key!r}")
                if isinstance(noise[b][k], tuple):
                    noise[b][k] = tuple(float(x) for x in raw.split(","))
                else:
                    noise[b][k] = float(raw)
                continue
            if key not in names or key == "noise":
                raise ValueError(f"unknown config key {key!r}")
            key = names[key]
            default = types[key]
            if isinstance(default, tuple):
                conv = int if all(isinstance(x, int) for x in default) else float
                kwargs[key] = tuple(conv(x) for x in raw.split(","))
            elif isinstance(default, bool):
                if raw.strip() not in ("True", "False"):
                    raise ValueError(f"{key} must be True or False")
                kwargs[key] = raw.strip() == "True"
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        kwargs["noise"] = {b: NoiseProfile(**v) for b, v in noise.items()}
        return cls(**kwargs)


@dataclass(frozen=True, eq=False)
class PhantomScene:
    gt_mask: LabelMask
    stack: SampleStack
    provenance: dict

    @property
    def dims(self):
        return self.gt_mask.dims


# --- geometry ---------------------------------------------------------------

def ellipsoid_offsets(radii) -> np.ndarray:
    """Lattice offsets inside an axis-aligned ellipsoid centred on a voxel.

    Along each axis the set is an interval containing 0, so it is
    6-connected (and therefore 18-connected).
    """
    a = np.asarray(radii, dtype=np.float64)
    ext = np.floor(a).astype(int)
    grids = np.meshgrid(*[np.arange(-e, e + 1) for e in ext], indexing="ij")
    off = np.stack([g.ravel() for g in grids], axis=1)
    inside = np.sum((off / a) ** 2, axis=1) <= 1.0 + 1e-12
    return off[inside]


def _draw_shape(rng: Stream, size_range, max_tries: int = 200) -> np.ndarray:
    lo, hi = size_range
    for _ in range(max_tries):
        target = int(rng.integers(lo, hi))
        r = (3.0 * target / (4.0 * math.pi)) ** (1.0 / 3.0)
        aspect = rng.uniform(3, 0.75, 1.35)
        aspect /= np.prod(aspect) ** (1.0 / 3.0)
        off = ellipsoid_offsets(np.maximum(r * aspect, 0.5))
        if lo <= len(off) <= hi:
            return off
    raise PhantomError(f"could not draw a lesion shape of {lo}-{hi} voxels in {max_tries} tries")


def _place(rng: Stream, offsets: np.ndarray, dims, forbidden: np.ndarray, max_tries: int = 500):
    lo_off, hi_off = offsets.min(axis=0), offsets.max(axis=0)
    lo = 1 - lo_off                      # keep a one-voxel border for the shell
    hi = np.asarray(dims) - 2 - hi_off
    if np.any(hi < lo):
        return None
    for _ in range(max_tries):
        centre = np.array([rng.integers(lo[k], hi[k]) for k in range(3)], dtype=np.int64).ravel()
        vox = offsets + centre
        if not forbidden[tuple(vox.T)].any():
            return centre, vox
    return None


def _grow(bits: np.ndarray, steps: int) -> np.ndarray:
    for _ in range(steps):
        bits = dilate_mask(bits)
    return bits


def _shell(obj: np.ndarray) -> np.ndarray:
    """Voxels outside ``obj`` that share a face with it."""
    out = np.zeros_like(obj)
    for off in _FACE_OFFSETS:
        out |= np.roll(obj, tuple(off), axis=(0, 1, 2))
    return out & ~obj


# --- generation ---------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def generate_scene(cfg: PhantomConfig) -> PhantomScene:
    """Plant lesions and simulate T dropout prediction samples.

    Raises:
        PhantomError: if an object cannot be placed without touching others.
    """
    rng = Stream(cfg.seed)
    dims = cfg.dims
    n = int(rng.integers(*cfg.lesion_count))

    # Objects keep >= 3 voxels of clearance so that no grown footprint touches another.
    objects = []
    forbidden = np.zeros(dims, dtype=bool)

    def plant(kind, bin):
        size_range = SIZE_RANGES[bin] if kind == "lesion" else cfg.spurious_size
        offsets = _draw_shape(rng, size_range)
        placed = _place(rng, offsets, dims, forbidden)
        if placed is None:
            raise PhantomError(f"could not place {kind} {bin} object #{len(objects)} in dims {dims}")
        centre, vox = placed
        mask = np.zeros(dims, dtype=bool)
        mask[tuple(vox.T)] = True
        forbidden[_grow(mask, 3)] = True
        objects.append({"kind": kind, "bin": bin, "size": len(vox),
                        "centre": centre.tolist(), "mask": mask})

    for _ in range(n):
        plant("lesion", BINS[rng.choice(cfg.bin_weights)])
    planted_bins = [o["bin"] for o in objects]
    for b in planted_bins:
        if rng.bernoulli(cfg.noise[b].fp_rate):
            plant("spurious", b)

    # Static logit map and per-voxel sample-jitter scale.
    static = cfg.background_logit + cfg.background_jitter * rng.normal(dims)
    jitter = np.full(dims, cfg.background_jitter)
    var_base = np.full(dims, 0.05)
    shift_scale = np.zeros(len(objects))
    static_detail = rng.normal(dims)

    for k, o in enumerate(objects):
        prof = cfg.noise[o["bin"]]
        mask = o["mask"]
        if o["kind"] == "lesion":
            detected = not bool(rng.bernoulli(prof.miss_rate))
            mean = float(rng.uniform((), *(prof.logit if detected else cfg.missed_logit)))
            sigma = prof.sample_disagreement
            o["detected"] = detected
        else:
            lo, hi = cfg.spurious_logit
            mean = float(rng.uniform((), lo, hi))
            sigma = cfg.spurious_disagreement
        o["mean_logit"] = float(mean)
        detail = cfg.lesion_voxel_jitter if o["kind"] == "lesion" else cfg.spurious_voxel_jitter
        static[mask] = mean + detail * static_detail[mask]
        jitter[mask] = detail * sigma
        var_base[mask] = 0.05 + 0.3 * sigma ** 2
        shift_scale[k] = sigma
        if o["kind"] == "lesion" and o["detected"]:
            shell = _shell(mask)
            static[shell] = -2.0 + 0.3 * static_detail[shell]
            jitter[shell] = prof.boundary_jitter
            var_base[shell] = 0.05 + 0.3 * prof.boundary_jitter ** 2

    T = cfg.T
    shifts = rng.normal((T, len(objects))) * shift_scale
    logits = static + jitter * rng.normal((T, *dims))
    for k, o in enumerate(objects):
        logits[:, o["mask"]] += shifts[:, k][:, None]
    preds = _sigmoid(logits).astype(np.float32)

    variances = None
    if cfg.with_variances:
        variances = (var_base * np.exp(0.25 * rng.normal((T, *dims)))).astype(np.float32)

    gt = np.zeros(dims, dtype=bool)
    for o in objects:
        if o["kind"] == "lesion":
            gt |= o["mask"]

    provenance = {
        "config": cfg.to_text(),
        "seed": cfg.seed,
        "objects": [{k: v for k, v in o.items() if k != "mask"} for o in objects],
    }
    return PhantomScene(LabelMask(gt), SampleStack(preds, variances), provenance)


def scene_config(cfg: PhantomConfig, index: int) -> PhantomConfig:
    """Config of the ``index``-th scene of a series seeded by ``cfg.seed``."""
    seed = (cfg.seed * 0x9E3779B97F4A7C15 + index + 1) & ((1 << 64) - 1)
    return replace(cfg, seed=seed)


def generate_series(cfg: PhantomConfig, count: int) -> list[PhantomScene]:
    return [generate_scene(scene_config(cfg, i)) for i in range(count)]


def scene_statistics(scenes) -> dict:
    """Per-bin GT lesion counts, size histogram and mean sample disagreement.

    Disagreement is the per-voxel standard deviation of the T samples,
    averaged over each lesion's voxels and then over the lesions of a bin.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("scene_statistics needs at least one scene")
    counts = {b: 0 for b in (*BINS, "subthreshold")}
    hist: dict[int, int] = {}
    disagreement = {b: [] for b in BINS}
    for s in scenes:
        lesions = connected_components_18(s.gt_mask)
        if len(lesions):
            sd = np.sqrt(sample_variance_kernel(s.stack.predictions))
        for les in lesions:
            counts[les.bin] += 1
            hist[les.size] = hist.get(les.size, 0) + 1
            if les.bin in disagreement:
                disagreement[les.bin].append(float(sd[tuple(les.voxels.T)].mean()))
    total = sum(counts.values())
    return {
        "scenes": len(scenes),
        "lesions": total,
        "counts": counts,
        "small_share": counts["small"] / total if total else math.nan,
        "size_histogram": dict(sorted(hist.items())),
        "mean_disagreement": {b: float(np.mean(v)) if v else math.nan
                              for b, v in disagreement.items()},
    }


# --- scene directories ----------------------------------------------------------

def save_scene(scene: PhantomScene, directory) -> None:
    """Write gt.uvol, sample_###.uvol, var_###.uvol and provenance.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_volume(scene.gt_mask.to_grid(), d / "gt.uvol")
    for t in range(scene.stack.T):
        save_volume(scene.stack.sample(t), d / f"sample_{t:03d}.uvol")
        if scene.stack.has_variances:
            save_volume(scene.stack.variance(t), d / f"var_{t:03d}.uvol")
    atomic_write_bytes(d / "provenance.json",
                       (json.dumps(scene.provenance, indent=1, sort_keys=True) + "\n").encode())


def load_scene(directory) -> PhantomScene:
    d = Path(directory)
    gt_path = d / "gt.uvol"
    if not gt_path.exists():
        raise FileNotFoundError(f"missing {gt_path}")
    gt = LabelMask.from_grid(load_volume(gt_path))
    samples = sorted(d.glob("sample_*.uvol"))
    if not samples:
        raise FileNotFoundError(f"no sample_###.uvol files in {d}")
    variances = sorted(d.glob("var_*.uvol"))
    preds = [load_volume(p) for p in samples]
    var = [load_volume(p) for p in variances] if variances else None
    stack = SampleStack.from_grids(preds, var)
    if stack.dims != gt.dims:
        raise ValueError(f"{d}: sample dims {stack.dims} != gt dims {gt.dims}")
    prov_path = d / "provenance.json"
    prov = json.loads(prov_path.read_text()) if prov_path.exists() else {}
    return PhantomScene(gt, stack, prov)
