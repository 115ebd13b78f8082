def pytest_collection_modifyitems(items):
    # The acceptance module trains real models for minutes; fail fast on the
    # cheap unit tests first.
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")
