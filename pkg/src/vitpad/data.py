"""Sample inventory, protocol construction, and the synthetic dataset generator.

Protocols assign whole identities to folds by a seeded hash of the
identity string, so splits are stable and independent of manifest row
order. Leave-one-out protocols push every sample of the held-out attack
type into eval and keep it out of train/dev entirely.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError, VitPadIOError
from .preprocess import EYE_X, EYE_Y, Landmarks, write_ppm
from .util import stable_fraction

LABELS = ("bonafide", "attack")
FOLDS = ("train", "dev", "eval")
MANIFEST_HEADER = ["sample_id", "path", "label", "attack_type", "identity",
                   "lx1", "ly1", "lx2", "ly2"]

SYNTH_IMAGE_SIZE = 64
# Bonafide eval share for leave-one-out protocols; bonafide must appear in
# every fold so BPCER is computable on dev and eval.
LOO_EVAL_BONAFIDE_FRACTION = 0.2


@dataclass(frozen=True)
class Sample:
    sample_id: str
    path: str
    label: str
    attack_type: str
    identity: str
    landmarks: tuple  # (lx1, ly1, lx2, ly2)

    def as_landmarks(self) -> Landmarks:
        lx1, ly1, lx2, ly2 = self.landmarks
        return Landmarks(left_eye=(lx1, ly1), right_eye=(lx2, ly2))


class Manifest:
    """Ordered sample inventory; ids unique, labels consistent with attack types."""

    def __init__(self, samples, base_dir="."):
        self.samples = list(samples)
        self.base_dir = Path(base_dir)
        seen = set()
        for s in self.samples:
            if s.sample_id in seen:
                raise FormatError(f"duplicate sample_id '{s.sample_id}'")
            seen.add(s.sample_id)
            _check_sample(s)
        self._by_id = {s.sample_id: s for s in self.samples}

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def ids(self):
        return [s.sample_id for s in self.samples]

    def by_id(self, sample_id: str) -> Sample:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise ArgumentError(f"unknown sample_id '{sample_id}'") from None

    def resolve_path(self, sample: Sample) -> Path:
        return self.base_dir / sample.path

    def identities(self):
        out = []
        seen = set()
        for s in self.samples:
            if s.identity not in seen:
                seen.add(s.identity)
                out.append(s.identity)
        return out

    def attack_types(self):
        return sorted({s.attack_type for s in self.samples if s.attack_type != "none"})


def _check_sample(s: Sample):
    if s.label not in LABELS:
        raise FormatError(f"sample '{s.sample_id}': bad label '{s.label}'")
    if (s.label == "bonafide") != (s.attack_type == "none"):
        raise FormatError(
            f"sample '{s.sample_id}': label '{s.label}' inconsistent with "
            f"attack_type '{s.attack_type}'"
        )


def load_manifest(path) -> Manifest:
    """Parse manifest.csv (see MANIFEST_HEADER); paths stay relative to its directory."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise VitPadIOError(f"cannot read manifest {path}: {exc}") from exc
    if not rows or rows[0] != MANIFEST_HEADER:
        raise FormatError(f"{path}: first row must be the header {','.join(MANIFEST_HEADER)}")

    samples = []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise FormatError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        sid, rel, label, attack_type, identity = row[:5]
        try:
            lms = tuple(float(v) for v in row[5:9])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: landmarks must be numeric") from None
        if sid in seen:
            raise FormatError(f"{path}:{lineno}: duplicate sample_id '{sid}'")
        seen.add(sid)
        sample = Sample(sid, rel, label, attack_type, identity, lms)
        try:
            _check_sample(sample)
        except FormatError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        samples.append(sample)
    return Manifest(samples, base_dir=path.parent)


def write_manifest(manifest: Manifest, path) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(MANIFEST_HEADER)
            for s in manifest:
                writer.writerow([s.sample_id, s.path, s.label, s.attack_type, s.identity,
                                 repr(s.landmarks[0]), repr(s.landmarks[1]),
                                 repr(s.landmarks[2]), repr(s.landmarks[3])])
    except OSError as exc:
        raise VitPadIOError(f"cannot write manifest {path}: {exc}") from exc


@dataclass
class Protocol:
    """Disjoint train/dev/eval sample-id lists (manifest order preserved)."""

    name: str
    train: list
    dev: list
    eval: list

    def __post_init__(self):
        folds = [set(self.train), set(self.dev), set(self.eval)]
        if folds[0] & folds[1] or folds[0] & folds[2] or folds[1] & folds[2]:
            raise ArgumentError(f"protocol '{self.name}': folds are not pairwise disjoint")

    def fold_ids(self, fold: str):
        if fold not in FOLDS:
            raise ArgumentError(f"unknown fold '{fold}' (expected one of {FOLDS})")
        return {"train": self.train, "dev": self.dev, "eval": self.eval}[fold]


def write_protocol(protocol: Protocol, path) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "fold"])
            for fold in FOLDS:
                for sid in protocol.fold_ids(fold):
                    writer.writerow([sid, fold])
    except OSError as exc:
        raise VitPadIOError(f"cannot write protocol {path}: {exc}") from exc


def load_protocol(path, name=None) -> Protocol:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise VitPadIOError(f"cannot read protocol {path}: {exc}") from exc
    if not rows or rows[0] != ["sample_id", "fold"]:
        raise FormatError(f"{path}: first row must be the header sample_id,fold")
    folds = {"train": [], "dev": [], "eval": []}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2 or row[1] not in FOLDS:
            raise FormatError(f"{path}:{lineno}: expected sample_id,fold with fold in {FOLDS}")
        folds[row[1]].append(row[0])
    return Protocol(name or path.stem, folds["train"], folds["dev"], folds["eval"])


def gen_loo(manifest: Manifest, left_out: str, dev_fraction: float = 0.2, seed: int = 0,
            eval_bonafide_fraction: float = LOO_EVAL_BONAFIDE_FRACTION) -> Protocol:
    """Leave-one-out protocol: every sample of the held-out attack type goes to
    eval; remaining attacks split train/dev; bonafide spans all three folds.
    Assignment hashes (seed, identity), so it is order independent."""
    known = manifest.attack_types()
    if left_out not in known:
        raise ArgumentError(f"unknown attack type '{left_out}'; manifest has {known}")
    if not (0.0 < dev_fraction < 1.0):
        raise ArgumentError(f"dev_fraction must be in (0,1), got {dev_fraction}")
    if dev_fraction + eval_bonafide_fraction >= 1.0:
        raise ArgumentError("dev_fraction plus bonafide eval fraction must stay below 1")

    train, dev, eval_ = [], [], []
    for s in manifest:
        u = stable_fraction(seed, s.identity)
        if s.attack_type == left_out:
            eval_.append(s.sample_id)
        elif s.label == "attack":
            (train if u < 1.0 - dev_fraction else dev).append(s.sample_id)
        else:
            if u < 1.0 - dev_fraction - eval_bonafide_fraction:
                train.append(s.sample_id)
            elif u < 1.0 - eval_bonafide_fraction:
                dev.append(s.sample_id)
            else:
                eval_.append(s.sample_id)
    return Protocol(f"loo_{left_out}", train, dev, eval_)


def gen_grandtest(manifest: Manifest, fractions, seed: int = 0) -> Protocol:
    """Grandtest protocol: identities (never individual samples) are hashed into
    folds, keeping identities disjoint across folds; a best-effort repair pass
    then fills folds that miss an attack type entirely."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ArgumentError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ArgumentError(f"fractions must sum to 1, got sum {sum(fractions)}")
    identities = manifest.identities()
    if len(identities) < 3:
        raise ArgumentError(f"grandtest needs at least 3 identities, got {len(identities)}")

    cut_train = fractions[0]
    cut_dev = fractions[0] + fractions[1]
    assign = {}
    for ident in identities:
        u = stable_fraction(seed, ident)
        assign[ident] = "train" if u < cut_train else ("dev" if u < cut_dev else "eval")
    _repair_type_presence(manifest, assign, seed)

    folds = {"train": [], "dev": [], "eval": []}
    for s in manifest:
        folds[assign[s.identity]].append(s.sample_id)
    return Protocol("grandtest", folds["train"], folds["dev"], folds["eval"])


def _repair_type_presence(manifest: Manifest, assign: dict, seed: int) -> None:
    """Single greedy pass moving whole identities so every fold sees every attack
    type where the manifest permits. Identity-fold disjointness is preserved by
    construction (the map stays a function)."""
    ids_with_type = {}
    for s in manifest:
        if s.attack_type != "none":
            ids_with_type.setdefault(s.attack_type, set()).add(s.identity)
    for attack_type in sorted(ids_with_type):
        owners = ids_with_type[attack_type]
        for fold in FOLDS:
            if any(assign[i] == fold for i in owners):
                continue
            donors = {}
            for ident in owners:
                donors.setdefault(assign[ident], []).append(ident)
            candidates = [(len(idents), f) for f, idents in donors.items() if len(idents) >= 2]
            if not candidates:
                continue
            _, donor_fold = max(candidates)
            moved = min(donors[donor_fold], key=lambda i: stable_fraction(seed, "repair", i))
            assign[moved] = fold


# -- synthetic dataset --------------------------------------------------------

def _attack_texture(attack_type: str, size: int) -> np.ndarray:
    """Deterministic type-specific overlay, strong enough to separate classes
    linearly in pixel space. Additive, applied to all channels. Spatial
    frequencies stay low so the signal survives downsampling to small
    network resolutions."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if attack_type == "replay":
        # vertical stripes, highest-frequency pattern that survives a 4x downsample
        return 70.0 * np.sin(2.0 * np.pi * 4.0 * xx / size)
    if attack_type == "print":
        # blocky halftone checkerboard
        block = size // 4
        return 60.0 * (((xx // block + yy // block) % 2) * 2.0 - 1.0)
    if attack_type == "mask":
        # bright top-left quadrant marker
        marker = np.zeros((size, size))
        marker[: size // 2, : size // 2] = 100.0
        return marker
    # any other type: stripes with hash-derived frequency and orientation
    u = stable_fraction(0, "texture", attack_type)
    freq = 2.0 + math.floor(u * 4.0)
    axis = xx if u < 0.5 else yy
    return 55.0 * np.sin(2.0 * np.pi * freq * axis / size)


def synth_dataset(out_dir, n_identities: int, frames_per_id: int, attack_types,
                  seed: int = 0) -> Manifest:
    """Generate PPM images plus manifest.csv under out_dir and return the manifest.

    Bonafide frames are smooth per-identity gradients with faint noise;
    each attack type adds its texture on top. Eye landmarks sit at fixed
    positions in every image. Byte-identical output for a given seed.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise VitPadIOError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    if n_identities < 1 or frames_per_id < 1:
        raise ArgumentError("n_identities and frames_per_id must be >= 1")
    attack_types = list(attack_types)

    size = SYNTH_IMAGE_SIZE
    lx, ly = EYE_X * size, EYE_Y * size
    rx = (1.0 - EYE_X) * size
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    rng = np.random.default_rng(seed)

    samples = []
    for idx in range(n_identities):
        identity = f"id{idx:03d}"
        base = rng.uniform(72.0, 128.0, size=3)
        slope_x = rng.uniform(-24.0, 24.0, size=3)
        slope_y = rng.uniform(-24.0, 24.0, size=3)
        gradient = np.stack(
            [base[c] + slope_x[c] * xx / size + slope_y[c] * yy / size for c in range(3)],
            axis=-1,
        )
        for frame in range(frames_per_id):
            for kind in ["none"] + attack_types:
                noise = rng.normal(0.0, 4.0, size=(size, size, 3))
                img = gradient + noise
                if kind != "none":
                    img = img + _attack_texture(kind, size)[:, :, None]
                pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
                tag = "bona" if kind == "none" else kind
                sid = f"{identity}_{tag}_f{frame:02d}"
                rel = f"images/{sid}.ppm"
                write_ppm(pixels, out_dir / rel)
                label = "bonafide" if kind == "none" else "attack"
                samples.append(Sample(sid, rel, label, kind, identity, (lx, ly, rx, ly)))

    manifest = Manifest(samples, base_dir=out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
