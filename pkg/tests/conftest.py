import numpy as np
import pytest

from budgetnet import data


def synthetic_images(n, seed):
    """Class-dependent images: each class gets its own colour and stripe orientation."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    yy, xx = np.mgrid[0:32, 0:32]
    images = np.empty((n, 3, 32, 32), dtype=np.uint8)
    for i, k in enumerate(labels):
        colour = np.array([(k * 37) % 256, (k * 91 + 60) % 256, (k * 53 + 120) % 256], dtype=np.float64)
        stripes = 40 * np.sin((xx * np.cos(k) + yy * np.sin(k)) * 0.6)
        noise = rng.normal(0, 25, size=(3, 32, 32))
        img = 0.6 * colour[:, None, None] + stripes[None] + noise + 50
        images[i] = np.clip(img, 0, 255).astype(np.uint8)
    return images, labels


def write_synthetic_cifar(directory, per_file=200, n_test=200, seed=0):
    directory.mkdir(parents=True, exist_ok=True)
    for i, name in enumerate(data.TRAIN_FILES):
        imgs, labels = synthetic_images(per_file, seed * 100 + i)
        data.write_batch_file(directory / name, imgs, labels)
    imgs, labels = synthetic_images(n_test, seed * 100 + 99)
    data.write_batch_file(directory / data.TEST_FILE, imgs, labels)
    return directory


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory):
    return write_synthetic_cifar(tmp_path_factory.mktemp("cifar"))


@pytest.fixture(scope="session")
def cifar(cifar_dir):
    return data.load_cifar10(cifar_dir)


# --- acceptance report: one line per criterion -------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or report.outcome != "passed":
        number, title = marker.args
        entry = _CRITERIA.setdefault(number, {"title": title, "passed": 0, "failed": [], "skipped": []})
        if report.passed and report.when == "call":
            entry["passed"] += 1
        elif report.failed:
            entry["failed"].append(item.name)
        elif report.skipped:
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
            entry["skipped"].append(f"{item.name}: {reason.removeprefix('Skipped: ')}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        if e["failed"]:
            verdict, detail = "FAIL", "failed: " + ", ".join(e["failed"])
        elif e["skipped"] and e["passed"]:
            verdict, detail = "PARTIAL", "skipped: " + "; ".join(e["skipped"])
        elif e["skipped"]:
            verdict, detail = "SKIP", "; ".join(e["skipped"])
        else:
            verdict, detail = "PASS", f"{e['passed']} checks"
        terminalreporter.write_line(f"criterion {number} {verdict:7} {e['title']} ({detail})")
