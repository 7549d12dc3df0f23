import numpy as np
import pytest

from prunekit.dataset import BlobSpec, blob_centers, generate_blobs
from prunekit.dynamics_log import DynamicsLog

# acceptance criteria append (criterion, passed, detail) here; printed at session end
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def random_log(rng, n=6, c=3, e=4, scale=3.0, loss_kind="cross_entropy"):
    return DynamicsLog(
        labels=rng.integers(0, c, n),
        num_classes=c,
        accuracies=rng.uniform(0, 1, e).astype(np.float32),
        losses=rng.uniform(0, 3, e).astype(np.float32),
        logits=(scale * rng.standard_normal((e, n, c))).astype(np.float32),
        loss_kind=loss_kind,
        seed=int(rng.integers(0, 2**63)),
    )


NOISY_SPEC = BlobSpec(num_classes=4, samples_per_class=500, dim=8, center_separation=2.5,
                      noise_std=1.0, label_noise_rate=0.1)


def noisy_blobs_task(seed=0):
    """2000 training samples with 10% flipped labels, plus a clean test set."""
    train = generate_blobs(NOISY_SPEC, seed)
    test_spec = BlobSpec(4, 250, 8, NOISY_SPEC.center_separation, 1.0, 0.0)
    return train, generate_blobs(test_spec, seed + 1000)


def hard_class_task(seed=0, pull=0.5):
    """Blobs where class 3's center is pulled toward the origin, so it
    overlaps the others and its samples score systematically higher."""
    spec = BlobSpec(4, 250, 8, 4.0, 1.0, 0.0)

    def make(s):
        d = generate_blobs(spec, s)
        d.features[d.labels == 3] -= (1 - pull) * blob_centers(spec)[3]
        return d

    return make(seed), make(seed + 1000)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
