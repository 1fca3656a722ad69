"""Shared fixtures: synthetic CWRU-layout and IMS-layout dataset roots."""

import numpy as np
import pytest

from semivib.data import (CWRU_CLASS_DIRS, CWRU_SPEEDS_RPM, IMS_FAULT_SETS,
                          IMS_FILES_PER_CLASS, IMS_HEALTHY_SET, IMS_POINTS_PER_FILE,
                          IMS_SAMPLE_RATE_HZ, Recording, ims_fault_file_range,
                          write_recording)
from semivib.rng import RngStream

CWRU_FIXTURE_SAMPLES = 97000  # enough for the 430/30 per-recording split


def build_cwru_root(root, seed=0, samples=CWRU_FIXTURE_SAMPLES):
    rng = RngStream(seed).child("cwru-fixture")
    for class_dir, label in sorted(CWRU_CLASS_DIRS.items()):
        for rpm in CWRU_SPEEDS_RPM:
            rec = Recording(
                samples=rng.child(f"{class_dir}-{rpm}").normal((samples,)),
                sample_rate_hz=12000,
                source_id=f"{class_dir}/{rpm}rpm",
                class_label=label,
            )
            write_recording(root, class_dir, f"{rpm}rpm", rec)
    return root


def _write_ims_file(root, set_name, index, rng):
    directory = root / set_name
    directory.mkdir(parents=True, exist_ok=True)
    samples = rng.child(f"{set_name}-{index}").normal((IMS_POINTS_PER_FILE,))
    samples.astype("<f4").tofile(directory / f"{index:04d}.f32")


def build_ims_root(root, seed=0, healthy_files=IMS_FILES_PER_CLASS):
    rng = RngStream(seed).child("ims-fixture")
    for idx in range(1, healthy_files + 1):
        _write_ims_file(root, IMS_HEALTHY_SET, idx, rng)
    for set_name in IMS_FAULT_SETS:
        start, end = ims_fault_file_range(set_name)
        for idx in range(start, end + 1):
            _write_ims_file(root, set_name, idx, rng)
    return root


@pytest.fixture(scope="session")
def cwru_root(tmp_path_factory):
    return build_cwru_root(tmp_path_factory.mktemp("cwru"))


@pytest.fixture(scope="session")
def ims_root(tmp_path_factory):
    return build_ims_root(tmp_path_factory.mktemp("ims"))
