import io
import sys

import anybadge
import coverage
import pytest

from pylint import lint

PACKAGE = "pyactqa"
LINT_THRESHOLDS = {2: 'red', 4: 'orange', 6: 'yellow', 8: 'green'}
COVERAGE_THRESHOLDS = {50: 'red', 70: 'orange', 85: 'yellow', 100: 'green'}


def run_pylint() -> float:
    print("Running PyLint on", PACKAGE)
    score = lint.Run([PACKAGE, '--output', 'pylint.json'], do_exit=False).linter.stats.global_note
    print("Pylint Result:", score)

    anybadge.Badge('pylint', round(score, 1), thresholds=LINT_THRESHOLDS).write_badge('pylint.svg', overwrite=True)
    return score


def run_tests() -> int:
    print("Running PyTest with Coverage")
    _coverage = coverage.Coverage(source=[PACKAGE])
    _coverage.start()
    ret = pytest.main(["tests", "--junit-xml", "pytest.xml"])
    _coverage.stop()

    result = _coverage.report(file=io.StringIO())
    print("Coverage Result:", result)
    anybadge.Badge('coverage', round(result), thresholds=COVERAGE_THRESHOLDS, value_suffix='%') \
        .write_badge('coverage.svg', overwrite=True)

    print("Generating HTML Reports")
    _coverage.html_report()
    return ret


if __name__ == "__main__":
    run_pylint()
    sys.exit(run_tests())
