import sys


def pytest_terminal_summary(terminalreporter):
    # acceptance verdicts are collected while the tests run; echo them after
    # capture is torn down so they show up in a plain `pytest` invocation
    mod = next((m for name, m in sys.modules.items()
                if name.rsplit(".", 1)[-1] == "test_acceptance"), None)
    lines = getattr(mod, "VERDICTS", ())
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
