import pytest

import vecpool


@pytest.fixture(params=vecpool.available_backends())
def backend(request):
    return request.param


@pytest.fixture(params=vecpool.available_backends())
def impl(request):
    from vecpool import _backend

    return _backend.get(request.param)


@pytest.fixture
def register_task():
    """Register throwaway tasks for one test."""
    from vecpool.env_core import register, unregister

    names = []

    def add(name, spec_factory, env_factory, **kwargs):
        register(name, spec_factory, env_factory, overwrite=True, **kwargs)
        names.append(name)
        return name

    yield add
    for name in names:
        unregister(name)


_ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def accept():
    """Record one acceptance check; the summary prints one line per criterion."""

    def record(criterion: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        checks = _ACCEPTANCE[n]
        status = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  " + "; ".join(d for _, d in checks))
