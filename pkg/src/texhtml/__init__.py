"""LaTeX to HTML conversion with MathML Core output."""

from __future__ import annotations

__version__ = "0.1.0"
