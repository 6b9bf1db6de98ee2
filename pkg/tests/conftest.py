import numpy as np
import pytest

from zarm.config import Config
from zarm.corpus import ReviewRecord, build_review_data, write_corpus
from zarm.synthetic import templated_records


def small_config(**overrides) -> Config:
    """Desk-scale dimensions used throughout the tests."""
    base = dict(d_w=8, d_s=8, d_r=8, d_latent=4, match_hidden=4, T=3, L=6, M=8, N=3, k_max=4,
                batch_size=8, epochs=1, precision="float64")
    base.update(overrides)
    return Config(**base).validate()


def data_for(cfg: Config, records=None):
    records = records if records is not None else templated_records()
    return build_review_data(records, T=cfg.T, L=cfg.L, M=cfg.M, N=cfg.N, coverage=cfg.coverage,
                             min_count=cfg.min_count, seed=cfg.seed, ratios=cfg.ratios())


def ten_pair_records():
    """10 reviews over 3 users x 4 items; every user/item keeps profile reviews under seed 0."""
    words = ["sturdy", "cheap", "bright", "soft"]
    out = []
    for u in range(3):
        for i in range(4):
            if (u, i) in ((0, 0), (2, 3)):
                continue
            r = 1 + (u + 2 * i) % 5
            out.append(ReviewRecord(f"u{u}", f"i{i}", float(r),
                                    f"The {words[i]} thing works. User {u} rates it {r}!"))
    return out


@pytest.fixture
def tiny_cfg():
    return small_config()


@pytest.fixture(scope="session")
def synthetic_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("corpus") / "synthetic.jsonl"
    write_corpus(templated_records(), p)
    return p


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ------------------------------------------------------------------ acceptance summary

_VERDICTS: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1][len("test_"):]
        detail = dict(report.user_properties).get("detail", "")
        if report.outcome != "passed" and not detail:
            detail = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else ""
        _VERDICTS.append((name, "PASS" if report.outcome == "passed" else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, detail in sorted(_VERDICTS, key=lambda v: int(v[0].split("_")[1])):
        terminalreporter.write_line(f"{verdict} {name}: {detail}")
