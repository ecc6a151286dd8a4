"""Object-like evidence extraction from classifier attribution maps, with faithfulness tests."""

__version__ = "0.1.0"
