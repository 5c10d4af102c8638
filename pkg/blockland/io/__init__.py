"""
Read and write the tables and figures of the workbench.
"""

from .generic import BaseIOHandler
from .csv import (
    CSVWriter,
    CSVReader,
    PAIRINGS_COLUMNS,
    TRAINING_LOG_COLUMNS,
    TRACE_COLUMNS,
    read_table,
    write_table,
    read_pairings,
    write_pairings,
)
from .svg import SvgDocument, SVGWriter, save_svg
