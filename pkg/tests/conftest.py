_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    number, name = props["criterion"]
    prev = _results.get(number, (name, "PASS", 0.0))
    status = prev[1]
    if report.failed:
        status = "FAIL"
    elif report.skipped and status == "PASS":
        status = "SKIP"
    _results[number] = (name, status, prev[2] + report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        name, status, seconds = _results[number]
        terminalreporter.write_line(f"criterion {number:>2}  {status}  {name} ({seconds:.1f} s)")
