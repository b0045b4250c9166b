import numpy as np
import pytest
import torch

from fesr.datamodel import ExperimentConfig
from fesr.datasets import ImageSet, load_manifest, make_folds
from fesr.toyfaces import generate_dataset


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """12 identities x 4 classes x 2 intensities at 32x32."""
    out = tmp_path_factory.mktemp("tiny")
    generate_dataset(12, 4, [0.7, 1.0], size=32, seed=3, out_dir=out)
    return load_manifest(out / "manifest.tsv")


@pytest.fixture(scope="session")
def tiny_data(tiny_manifest):
    split = make_folds(tiny_manifest, 3, seed=0)
    return ImageSet.load(tiny_manifest, split.train_entries(0))


def small_config(**kw) -> ExperimentConfig:
    base = dict(num_classes=4, image_size=32, channels=1, base_width=8,
                recognizer_widths=(16, 32), recognizer_hidden=64, batch_size=8,
                embed_steps=20, embed_width=8, embed_dim=16, fold_count=3,
                p_pre=5, p_max=10)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured detail."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            name = nodeid.split("::")[-1]
            detail = dict(getattr(rep, "user_properties", [])).get("detail", "")
            lines.append((name, "PASS" if outcome == "passed" else "FAIL", detail))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, status, detail in sorted(lines, key=lambda x: int(x[0].split("_")[2])):
            terminalreporter.write_line(f"{status}  {name}  {detail}")
