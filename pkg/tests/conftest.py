import numpy as np
import pytest

from phg2st.data import SlideBundle, SynthConfig, generate_synthetic_cohort, save_slide_bundle


def tiny_bundle(slide_id="s1", patient_id="p1"):
    return SlideBundle(
        slide_id=slide_id,
        patient_id=patient_id,
        coords=np.array([[112.0, 112.0], [336.0, 112.0], [112.0, 336.0]]),
        grid=np.array([[0, 0], [0, 1], [1, 0]]),
        spot_features=np.array([[0.5, 1.0], [1.5, -2.0], [0.0, 0.25]]),
        counts=np.array([[10, 90, 0], [5, 5, 0], [0, 0, 0]]),
        gene_names=("GA", "GB", "GC"),
        spot_ids=("a", "b", "c"),
    )


@pytest.fixture
def bundle_dir(tmp_path):
    return save_slide_bundle(tiny_bundle(), tmp_path / "slide")


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Four one-slide patients on a 5x6 grid, written to disk."""
    root = tmp_path_factory.mktemp("synth")
    cfg = SynthConfig(n_rows=5, n_cols=6, d=6, m=8)
    for b in generate_synthetic_cohort(cfg, 4, 1, seed=3):
        save_slide_bundle(b, root / b.slide_id)
    return root


_VERDICTS = {}


def pytest_runtest_logreport(report):
    if "test_criterion_" in report.nodeid and report.when in ("setup", "call"):
        if report.when == "setup" and report.passed:
            return
        detail = dict(report.user_properties).get("verdict", report.outcome)
        _VERDICTS[report.nodeid.split("::")[-1]] = (report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_VERDICTS):
        passed, detail = _VERDICTS[name]
        number = name.split("_")[2]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
