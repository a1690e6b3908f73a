"""On-disk synthetic datasets: NIfTI images and labels plus a JSON manifest.

Layout::

    <root>/manifest.json
    <root>/images/<sample_id>.nii.gz
    <root>/labels/<sample_id>.nii.gz

Out-of-distribution test images are shifted twins of the in-distribution
test images and share their labels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from maxent_seg.data.nifti import NiftiMeta, read_file, write_file
from maxent_seg.data.synthetic import ShiftParams, SynthConfig, apply_domain_shift, synth_sample
from maxent_seg.volume import Volume

MANIFEST_SCHEMA = 1
SPLITS = ("train", "val", "test_id", "test_ood")
# index offsets keep every split on its own generator substreams
SPLIT_OFFSETS = {"train": 0, "val": 100_000, "test_id": 200_000}
OOD_STREAM = 7


class SchemaError(ValueError):
    """An input document carries an unsupported or inconsistent schema version."""


@dataclass
class Sample:
    sample_id: str
    split: str
    domain: str
    index: int
    image: str
    label: str


def manifest_hash(synth: SynthConfig, shift: ShiftParams, counts: dict) -> str:
    doc = {"synth": synth.to_dict(), "shift": shift.to_dict(), "counts": counts}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def write_dataset(root, synth: SynthConfig, shift: ShiftParams, counts: dict[str, int]) -> dict:
    """Generate train/val/test splits plus the shifted test twins.

    ``counts`` gives ``train``, ``val`` and ``test`` sizes; the OOD split has
    as many scans as the ID test split.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    sizes = {"train": counts["train"], "val": counts["val"], "test_id": counts["test"]}
    image_meta = NiftiMeta.for_dtype("float32", descrip="maxent-seg synthetic image")
    label_meta = NiftiMeta.for_dtype("uint8", descrip="maxent-seg synthetic label")
    samples = []
    for split, n in sizes.items():
        for i in range(n):
            index = SPLIT_OFFSETS[split] + i
            img, lab = synth_sample(synth, index)
            # round to the on-disk precision first so the OOD twin is an exact function of the ID file
            img = Volume(img.data.astype(np.float32), img.spacing)
            sid = f"{split}_{i:04d}"
            write_file(root / "images" / f"{sid}.nii.gz", img, image_meta)
            write_file(root / "labels" / f"{sid}.nii.gz", lab, label_meta)
            samples.append(Sample(sid, split, "ID", index, f"images/{sid}.nii.gz", f"labels/{sid}.nii.gz"))
            if split == "test_id":
                shifted = apply_domain_shift(img, shift, seed=(synth.seed, OOD_STREAM, index))
                oid = f"test_ood_{i:04d}"
                write_file(root / "images" / f"{oid}.nii.gz", shifted, image_meta)
                samples.append(Sample(oid, "test_ood", "OOD", index, f"images/{oid}.nii.gz", f"labels/{sid}.nii.gz"))
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "seed": synth.seed,
        "config_hash": manifest_hash(synth, shift, dict(sorted(counts.items()))),
        "synth_config": synth.to_dict(),
        "shift": shift.to_dict(),
        "counts": dict(sorted(counts.items())),
        "samples": [s.__dict__ for s in samples],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("schema_version") != MANIFEST_SCHEMA:
        raise SchemaError(f"unsupported manifest schema {manifest.get('schema_version')}")
    return manifest


def load_split(root, split: str, manifest: dict | None = None):
    """``[(Sample, Volume, BinaryMask), ...]`` for one split."""
    root = Path(root)
    manifest = manifest or load_manifest(root)
    out = []
    for rec in manifest["samples"]:
        if rec["split"] != split:
            continue
        s = Sample(**rec)
        img, _ = read_file(root / s.image, "volume")
        lab, _ = read_file(root / s.label, "mask")
        out.append((s, img, lab))
    return out
