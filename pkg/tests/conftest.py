import pytest

from crashlab.ingest import DEFAULT_CORRIDOR_LENGTH, DEFAULT_STUDY_YEARS
from crashlab.synth import GeneratorConfig, generate, load_spec

# Published marginals the synthetic corpus must reproduce exactly.
YEAR = {"2019": 36, "2020": 25, "2021": 21, "2022": 51, "2023": 30}
MONTH = (13, 5, 11, 9, 18, 15, 16, 19, 12, 15, 17, 13)
ACCIDENT_TYPE = {"Angle": 17, "RearEnd": 32, "Sideswipe": 22, "Turn": 19,
                 "Animal": 31, "FixedObject": 25, "Other": 17}
HOUR = (1, 1, 3, 1, 0, 6, 9, 17, 9, 14, 6, 5, 5, 13, 11, 5, 11, 11, 7, 6, 11, 6, 1, 4)
MILEPOST_BINS = (7, 8, 7, 0, 21, 13, 9, 8, 2, 5, 3, 19, 5, 5, 9, 15, 27)


@pytest.fixture(scope="session")
def spec():
    return load_spec()


@pytest.fixture(scope="session")
def corpus():
    return generate(config=GeneratorConfig(seed=42))


@pytest.fixture(scope="session")
def study_frame():
    return {"corridor_length": DEFAULT_CORRIDOR_LENGTH, "study_years": DEFAULT_STUDY_YEARS}


# ---------------------------------------------------------------- acceptance reporting

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion number and summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, text = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _CRITERIA[n] = ("PASS" if rep.passed else "FAIL", text)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, text = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {text}")
