"""Image ingestion, manifest-driven splits, minibatching and a synthetic SAR-like set."""

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_SIZE = 158
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff"}
MANIFEST_FIELDS = ["path", "label", "class_name", "split", "depression", "serial"]
SPLITS = ("train", "test")


class DatasetError(ValueError):
    pass


@dataclass
class Record:
    path: str
    label: int
    class_name: str
    split: str
    depression: float = None
    serial: str = None


@dataclass
class Manifest:
    records: list
    class_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def counts(self):
        """{split: {class_name: count}} in label order."""
        out = {}
        for r in self.records:
            out.setdefault(r.split, {}).setdefault(r.class_name, 0)
            out[r.split][r.class_name] += 1
        return out

    def summary(self):
        lines = []
        for split, per_class in self.counts().items():
            total = sum(per_class.values())
            lines.append(f"{split}: {total} images")
            lines += [f"  {name:<12}{n:>6}" for name, n in per_class.items()]
        return "\n".join(lines)


def _validate(manifest):
    if not manifest.records:
        raise DatasetError("manifest is empty")
    labels = sorted({r.label for r in manifest.records})
    K = len(manifest.class_names) or (max(labels) + 1)
    if labels[0] < 0 or labels[-1] >= K:
        raise DatasetError(f"labels must lie in [0, {K}), got {labels[0]}..{labels[-1]}")
    for r in manifest.records:
        if not Path(r.path).exists():
            raise DatasetError(f"missing image file: {r.path}")
        if r.split not in SPLITS:
            raise DatasetError(f"unknown split {r.split!r} for {r.path}")
    paths = {s: {str(Path(r.path).resolve()) for r in manifest.split(s)} for s in SPLITS}
    shared = paths["train"] & paths["test"]
    if shared:
        raise DatasetError(f"train/test overlap on {len(shared)} files, e.g. {sorted(shared)[0]}")
    return manifest


def load_manifest(source, class_names=None):
    """Build a manifest from a ``root/split/class_name/*`` tree or a CSV manifest file.

    Directory trees take class names (and thus labels) from the train split in
    lexicographic order unless ``class_names`` is given; a test class missing
    from that list is an error.  Records are sorted (split, label, path).
    """
    src = Path(source)
    if not src.exists():
        raise DatasetError(f"dataset path does not exist: {src}")
    if src.is_dir():
        manifest = _scan_tree(src, class_names)
    else:
        manifest = _read_csv(src)
    manifest.records.sort(key=lambda r: (SPLITS.index(r.split) if r.split in SPLITS else 9, r.label, r.path))
    return _validate(manifest)


def _scan_tree(root, class_names):
    split_dirs = {s: root / s for s in SPLITS if (root / s).is_dir()}
    if not split_dirs:
        raise DatasetError(f"{root}: no train/ or test/ split directories (empty split)")
    if class_names is None:
        base = split_dirs.get("train") or next(iter(split_dirs.values()))
        class_names = sorted(p.name for p in base.iterdir() if p.is_dir())
    index = {name: i for i, name in enumerate(class_names)}
    records = []
    for split, d in split_dirs.items():
        n_before = len(records)
        for cdir in sorted(p for p in d.iterdir() if p.is_dir()):
            if cdir.name not in index:
                raise DatasetError(f"unknown class directory {cdir} (known: {', '.join(class_names)})")
            for f in sorted(cdir.rglob("*")):
                if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
                    records.append(Record(str(f), index[cdir.name], cdir.name, split))
        if len(records) == n_before:
            raise DatasetError(f"empty split: no images under {d}")
    return Manifest(records, list(class_names))


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = {"path", "label", "class_name", "split"} - set(reader.fieldnames or [])
        if missing:
            raise DatasetError(f"{path}: header lacks {sorted(missing)}")
        records = []
        for row in reader:
            p = Path(row["path"])
            if not p.is_absolute():
                p = path.parent / p
            dep = row.get("depression") or None
            records.append(Record(str(p), int(row["label"]), row["class_name"], row["split"],
                                  float(dep) if dep is not None else None, row.get("serial") or None))
    names = {}
    for r in records:
        if names.setdefault(r.label, r.class_name) != r.class_name:
            raise DatasetError(f"{path}: label {r.label} used for both {names[r.label]} and {r.class_name}")
    K = max(names) + 1 if names else 0
    return Manifest(records, [names.get(i, f"class{i}") for i in range(K)])


def write_manifest(manifest, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_FIELDS)
        for r in manifest.records:
            w.writerow([r.path, r.label, r.class_name, r.split,
                        "" if r.depression is None else r.depression, r.serial or ""])


# -- decoding and resizing --------------------------------------------------------------

def bilinear_resize(img, out_h, out_w):
    """Separable bilinear resampling with half-pixel centers and clamped edges.

    Interpolation is written as a + t (b - a), so constant images stay exact.
    """
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    if (H, W) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    lo, hi, t = axis(H, out_h)
    rows = img[lo] + t[:, None] * (img[hi] - img[lo])
    lo, hi, t = axis(W, out_w)
    return rows[:, lo] + t[None, :] * (rows[:, hi] - rows[:, lo])


def decode_and_resize(source, size=IMAGE_SIZE):
    """Decode a JPG/PNG (bytes or path) to a float32 [1, size, size] image in [0, 1].

    Colour images are reduced to the plain mean of their RGB channels.
    """
    from PIL import Image, UnidentifiedImageError

    name = "<bytes>" if isinstance(source, (bytes, bytearray)) else str(source)
    try:
        fh = io.BytesIO(source) if isinstance(source, (bytes, bytearray)) else open(source, "rb")
        with fh, Image.open(fh) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif im.mode == "I":
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif im.mode == "F":
                arr = np.asarray(im, dtype=np.float64)
            elif im.mode == "L":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64).mean(axis=2) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DatasetError(f"cannot decode image {name}: {e}") from None
    out = np.clip(bilinear_resize(arr, size, size), 0.0, 1.0)
    return out.astype(np.float32)[None]


# -- in-memory datasets ----------------------------------------------------------------------

@dataclass
class ImageDataset:
    images: np.ndarray      # [N, 1, S, S] float32 in [0, 1]
    labels: np.ndarray      # [N] int64
    class_names: list
    paths: list = None

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx)
        paths = None if self.paths is None else [self.paths[i] for i in idx]
        return ImageDataset(self.images[idx], self.labels[idx], self.class_names, paths)


def dataset_from_manifest(manifest, split, size=IMAGE_SIZE):
    recs = manifest.split(split)
    if not recs:
        raise DatasetError(f"empty split: {split!r}")
    images = np.empty((len(recs), 1, size, size), dtype=np.float32)
    for i, r in enumerate(recs):
        images[i] = decode_and_resize(r.path, size)
    labels = np.array([r.label for r in recs], dtype=np.int64)
    return ImageDataset(images, labels, list(manifest.class_names), [r.path for r in recs])


def batches(dataset, batch_size, seed=None, shuffle=False, return_indices=False):
    """Yield (images, labels) minibatches; the final partial batch is kept.

    ``seed`` may be an int or a numpy Generator; shuffling draws one permutation.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        item = (dataset.images[idx], dataset.labels[idx])
        yield (item + (idx,)) if return_indices else item


# -- synthetic SAR-like data ------------------------------------------------------------------

def texture_cell(label):
    """Speckle correlation length (pixels) used for class ``label``."""
    return 1 + label


def synth_image(label, num_classes, rng, size=IMAGE_SIZE):
    """One 'target chip': an oriented bright blob on clutter, multiplied by speckle.

    The class sets the blob orientation and the correlation length of the
    speckle, so high-pass energy falls as the class index grows.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = size / 2 + rng.normal(0, size / 16, 2)
    theta = np.pi * label / num_classes + rng.normal(0, np.pi / 36)
    a, b = size * 0.16, size * 0.06
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    scene = 0.12 + 0.55 * np.exp(-0.5 * ((u / a) ** 2 + (v / b) ** 2))
    cell = texture_cell(label)
    n = -(-size // cell)
    looks = 4.0
    speckle = rng.gamma(looks, 1.0 / looks, (n, n))
    speckle = np.repeat(np.repeat(speckle, cell, axis=0), cell, axis=1)[:size, :size]
    return np.clip(scene * speckle, 0.0, 1.0)


def synth_dataset(classes, per_class, seed, size=IMAGE_SIZE):
    """Deterministic in-memory dataset of ``classes * per_class`` images (class-major order)."""
    if classes < 2:
        raise ValueError("synthetic dataset needs at least 2 classes")
    rng = np.random.default_rng(seed)
    images = np.empty((classes * per_class, 1, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    for i, c in enumerate(labels):
        images[i, 0] = synth_image(int(c), classes, rng, size)
    return ImageDataset(images, labels, [f"class{c}" for c in range(classes)])


def high_pass_variance(img):
    """Variance of the horizontal first difference, a simple high-pass response."""
    img = np.asarray(img, dtype=np.float64)
    return float(np.var(np.diff(img, axis=-1)))


def save_image_tree(dataset, root, split):
    """Write a dataset as ``root/split/class_name/NNNNN.png`` (8-bit grayscale)."""
    from PIL import Image

    root = Path(root)
    for i, (img, lab) in enumerate(zip(dataset.images, dataset.labels)):
        d = root / split / dataset.class_names[lab]
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(img[0] * 255).astype(np.uint8), mode="L").save(d / f"{i:05d}.png")


# -- MSTAR split layouts (counts only; imagery is user-supplied) -------------------------------

def _layout(rows):
    return [dict(zip(("split", "class_name", "depression", "serial", "count"), r)) for r in rows]


MSTAR_LAYOUTS = {
    "soc": _layout(
        [("train", c, 17, None, n) for c, n in [
            ("2S1", 299), ("BMP2", 233), ("BRDM2", 298), ("BTR60", 256), ("BTR70", 233),
            ("D7", 299), ("T62", 299), ("T72", 232), ("ZIL131", 299), ("ZSU234", 299)]]
        + [("test", c, 15, None, n) for c, n in [
            ("2S1", 274), ("BMP2", 195), ("BRDM2", 274), ("BTR60", 195), ("BTR70", 196),
            ("D7", 274), ("T62", 273), ("T72", 196), ("ZIL131", 274), ("ZSU234", 274)]]),
    "eoc1": _layout(
        [("train", c, 17, None, n) for c, n in [("2S1", 299), ("BRDM2", 298), ("T72", 299), ("ZSU234", 299)]]
        + [("test", c, 30, None, n) for c, n in [("2S1", 288), ("BRDM2", 287), ("T72", 288), ("ZSU234", 288)]]),
    "eoc2": _layout(
        [("train", "BMP2", 17, None, 233), ("train", "BRDM2", 17, None, 298),
         ("train", "BTR70", 17, None, 233), ("train", "T72", 17, "SN-132", 232)]
        + [("test", "T72", "15/17", s, n) for s, n in [
            ("SN-812", 426), ("SN-A04", 573), ("SN-A05", 573), ("SN-A07", 573), ("SN-A10", 567)]]),
}


def layout_totals(name):
    totals = {}
    for row in MSTAR_LAYOUTS[name]:
        totals[row["split"]] = totals.get(row["split"], 0) + row["count"]
    return totals


def check_layout(manifest, name):
    """Compare per-(split, class) counts with a published layout; returns mismatch strings."""
    expected = {}
    for row in MSTAR_LAYOUTS[name]:
        key = (row["split"], row["class_name"])
        expected[key] = expected.get(key, 0) + row["count"]
    actual = {}
    for r in manifest.records:
        actual[(r.split, r.class_name)] = actual.get((r.split, r.class_name), 0) + 1
    return [f"{s}/{c}: expected {n}, found {actual.get((s, c), 0)}"
            for (s, c), n in sorted(expected.items()) if actual.get((s, c), 0) != n]


def layout_template(name):
    """Packaged per-(split, class) count template for a published layout, as dict rows."""
    from importlib import resources

    if name not in MSTAR_LAYOUTS:
        raise KeyError(f"unknown layout {name!r}; choose from {sorted(MSTAR_LAYOUTS)}")
    text = resources.files("emc2a").joinpath("manifests", f"{name}.csv").read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        r["count"] = int(r["count"])
        r["serial"] = r["serial"] or None
    return rows
