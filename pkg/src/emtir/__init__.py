"""EM-guided training of code-integration policies for tool-integrated reasoning."""

__version__ = "0.1.0"
