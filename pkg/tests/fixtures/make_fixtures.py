"""Regenerate the handcrafted NIfTI fixture pair (run from this directory)."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from oracles import reference_nifti  # noqa: E402

VALUES = [0.0, 1.0, -2.5, 3.25, 4.0, 5.5, -6.0, 7.75]  # x-fastest scan order

if __name__ == "__main__":
    here = Path(__file__).parent
    for name, endian in (("le_f32_2x2x2.nii", "<"), ("be_f32_2x2x2.nii", ">")):
        (here / name).write_bytes(reference_nifti(VALUES, (2, 2, 2), (1.5, 2.0, 3.0), endian))
