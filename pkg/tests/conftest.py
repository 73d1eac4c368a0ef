import numpy as np
import pytest

from vdd.data import DomainDataset
from vdd.protocol import build_task


def fake_domain(task, domain, n, rng, size=8):
    classes = task.classes_of(domain)
    labels = np.asarray([classes[k % len(classes)] for k in range(n)], dtype=np.int64)
    images = rng.uniform(0, 1, size=(n, 3, size, size)).astype(np.float32)
    is_source = domain < task.num_sources
    return DomainDataset(domain, images, labels if is_source else None, "train")


@pytest.fixture
def small_task():
    return build_task([{0, 1}, {1, 2}], unknown_classes=[3])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_MODEL = dict(image_size=8, enc_channels=(4, 4, 4), latent_s=8, latent_d=4, embed_dim=8, res_blocks=1)


def tiny_setup(task, n=24, seed=0, size=8):
    """Datasets for every domain plus an exemplar pool, all at ``size`` px."""
    from vdd.data import build_exemplar_pool

    rng = np.random.default_rng(seed)
    datasets = [fake_domain(task, d, n, rng, size) for d in range(task.num_domains)]
    pool = build_exemplar_pool(datasets[:-1], task, seed)
    return datasets, pool


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Print and keep one pass/fail line per acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
