import numpy as np
import pytest
import torch

from mdbanet.phantom import PhantomSpec, generate_phantom
from mdbanet.volume_io import DatasetManifest, ManifestEntry, save_labels, save_volume, write_manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def phantom():
    return generate_phantom(PhantomSpec(seed=3))


def write_phantom_dataset(root, seeds, spec_kwargs=None, split=None):
    """Write phantoms as NIfTI files plus a manifest; returns the manifest path."""
    entries = []
    for s in seeds:
        v, lm = generate_phantom(PhantomSpec(seed=s, **(spec_kwargs or {})))
        img, lab = root / f"{v.case_id}_img.nii.gz", root / f"{v.case_id}_lab.nii.gz"
        save_volume(v, img)
        save_labels(lm, lab)
        entries.append(ManifestEntry(v.case_id, img, lab))
    manifest = DatasetManifest(entries, split or {})
    path = root / "manifest.json"
    write_manifest(manifest, path)
    return path


@pytest.fixture
def phantom_dataset(tmp_path):
    return write_phantom_dataset(tmp_path, range(3))


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or rep.outcome != "passed":
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        prev = _ACCEPTANCE.get(number, (title, "PASS"))[1]
        # a criterion passes only if every test attached to it passes
        rank = {"PASS": 0, "SKIP": 1, "FAIL": 2}
        _ACCEPTANCE[number] = (title, max(prev, status, key=rank.get))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}")
