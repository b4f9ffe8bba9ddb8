"""Shared fixtures: digit image trees on disk, toy batches, acceptance summary."""

import numpy as np
import pytest
import torch
from PIL import Image
from sklearn.datasets import load_digits

from nearnd.data import ImageBatch, STORAGE_RANGE


@pytest.fixture(scope="session")
def digits():
    """The 8x8 digit set, images scaled to [0, 1], as numpy arrays."""
    raw = load_digits()
    images = (raw.images / 16.0).astype(np.float32)
    return images, raw.target.astype(np.int64)


def digit_batch(digits, classes, split, per_class, offset=0):
    """Deterministic per-class slices; 'train' takes the first samples, 'test' the next."""
    images, labels = digits
    xs, ys = [], []
    for j, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)
        take = idx[offset : offset + per_class] if split == "train" else idx[offset + per_class : offset + 2 * per_class]
        xs.append(images[take])
        ys.extend([j] * len(take))
    data = torch.from_numpy(np.concatenate(xs))[:, None, :, :]
    return ImageBatch(data, STORAGE_RANGE), np.asarray(ys, dtype=np.int64)


@pytest.fixture(scope="session")
def digit_tree_factory(tmp_path_factory, digits):
    """Write directory-per-class PNG trees of the 8x8 digits."""

    def build(name, classes, per_class_train, per_class_test):
        images, labels = digits
        root = tmp_path_factory.mktemp(name)
        for tag, lo, hi in (("train", 0, per_class_train), ("test", per_class_train, per_class_train + per_class_test)):
            for c in classes:
                cdir = root / tag / f"digit{c}"
                cdir.mkdir(parents=True, exist_ok=True)
                idx = np.flatnonzero(labels == c)[lo:hi]
                for i, sample in enumerate(idx):
                    arr = (images[sample] * 255.0).round().astype(np.uint8)
                    Image.fromarray(arr, mode="L").save(cdir / f"img_{i:04d}.png")
        return root / "train", root / "test"

    return build


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", "call") != "call":
                continue
            if "test_acceptance.py" in str(getattr(rep, "nodeid", "")):
                rows.append((rep.nodeid.split("::")[-1], outcome.upper()))
    if rows:
        terminalreporter.section("acceptance criteria")
        for name, outcome in sorted(rows):
            status = "PASS" if outcome == "PASSED" else "FAIL"
            terminalreporter.write_line(f"{status}  {name}")
