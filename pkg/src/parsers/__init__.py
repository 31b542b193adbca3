"""
SWLE Toolkit - Parsers Package

This package reads and writes dataset CSV files.
"""
from .dataset_parser import DatasetParser, DatasetWriter

__all__ = [
    'DatasetParser',
    'DatasetWriter',
]
