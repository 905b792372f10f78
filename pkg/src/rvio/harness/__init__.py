"""Configuration, dataset I/O, filter driver, evaluation and Monte Carlo orchestration."""
