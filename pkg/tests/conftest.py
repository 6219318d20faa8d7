import pytest

from gradprune.toylm import ToyConfig, calibrate, gen_corpus, train


def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        outcome = "PASS" if report.passed else "FAIL"
        print(f"\nACCEPTANCE {name}: {outcome}", flush=True)


@pytest.fixture(scope="session")
def toy_runs():
    """Trained model + eval corpus + 128-sample stats for 10 seeds."""
    runs = {}
    for seed in range(10):
        cfg = ToyConfig(seed=seed)
        model = train(cfg)
        runs[seed] = {
            "cfg": cfg,
            "model": model,
            "eval": gen_corpus(cfg, "eval"),
            "stats": calibrate(model, cfg, 128),
        }
    return runs
