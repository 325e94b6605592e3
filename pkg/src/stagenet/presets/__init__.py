"""Bundled experiment configurations, loadable by name via ``load_preset``."""
