def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: Monte Carlo checks of operating characteristics (deselect with -m "not slow")')
