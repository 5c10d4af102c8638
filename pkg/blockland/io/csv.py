"""
This module contains handling for CSV (comma separated values) files.

Every table the workbench writes has a header line and ``\\n`` line
endings. Floats are written with :func:`repr`, the shortest decimal form
that reads back to the same value, so a table re-read from disk holds
bitwise the same numbers. Booleans are written as ``1``/``0``, missing
values as empty fields.
"""

import math
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from blockland import ArtifactError, UsageError, typechecking
from .generic import BaseIOHandler

#: victim_id, opponent_id, episode_idx, return
PAIRINGS_COLUMNS = ("victim_id", "opponent_id", "episode_idx", "return")

TRAINING_LOG_COLUMNS = (
    "rollout",
    "env_steps",
    "mean_episode_return",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_fraction",
    "kl",
)

TRACE_COLUMNS = (
    "t",
    "robot_x",
    "robot_y",
    "human_x",
    "human_y",
    "robot_action",
    "human_action",
    "reward",
    "robot_held",
    "boxes_on_cart",
)


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        # cannot use str() on numpy scalars here because that may round
        return repr(float(value))
    text = str(value)
    if "," in text or "\n" in text or "\r" in text:
        raise UsageError(f"value {text!r} cannot be written to a CSV field")
    return text


def parse_float(text: str) -> Optional[float]:
    """Inverse of :func:`format_value` for floats; empty fields are None."""
    return float(text) if text != "" else None


class CSVWriter(BaseIOHandler):
    """Writes a comma separated table with a header line.

    >>> with CSVWriter("pairings.csv", PAIRINGS_COLUMNS) as writer:  # doctest: +SKIP
    ...     writer.write_row(["v01", "arand", 0, 5.69])
    """

    def __init__(
        self,
        file: typechecking.AcceptedIOType,
        columns: Sequence[str],
        append: bool = False,
    ) -> None:
        """
        :param file: a path-like object or a file-like object to write to.
                     If this is a file-like object, is has to open in text
                     write mode, not binary write mode.
        :param columns: the header
        :param append: if set to `True` rows are appended to the file and
                       no header line is written
        """
        super().__init__(file, mode="a" if append else "w")
        self.columns = tuple(columns)
        if not append:
            self.file.write(",".join(self.columns) + "\n")

    def write_row(self, row: Union[Sequence[Any], Mapping[str, Any]]) -> None:
        if isinstance(row, Mapping):
            row = [row.get(column) for column in self.columns]
        if len(row) != len(self.columns):
            raise UsageError(f"row has {len(row)} fields, header has {len(self.columns)}")
        self.file.write(",".join(format_value(value) for value in row))
        self.file.write("\n")

    def write_rows(self, rows) -> None:
        for row in rows:
            self.write_row(row)


class CSVReader(BaseIOHandler):
    """Iterator over the rows of a table written by :class:`CSVWriter`.

    Rows are yielded as dicts of strings keyed by the header. Any line
    separator is accepted.
    """

    def __init__(
        self, file: typechecking.AcceptedIOType, required_columns: Sequence[str] = ()
    ) -> None:
        """
        :param file: a path-like object or as file-like object to read from
        :param required_columns: columns the header must contain
        :raises blockland.ArtifactError: if the header lacks a required column
        """
        self.name = str(getattr(file, "name", file))
        try:
            super().__init__(file, mode="r")
        except OSError as e:
            raise ArtifactError(f"cannot read table {self.name}: {e}") from None
        header = self.file.readline().rstrip("\r\n")
        self.columns = tuple(header.split(",")) if header else ()
        missing = [c for c in required_columns if c not in self.columns]
        if missing:
            self.stop()
            raise ArtifactError(f"table {self.name} lacks the column(s) {', '.join(missing)}")

    def __iter__(self) -> Iterator[Dict[str, str]]:
        for number, line in enumerate(self.file, start=2):
            line = line.rstrip("\r\n")
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != len(self.columns):
                raise ArtifactError(
                    f"{self.name}:{number}: expected {len(self.columns)} fields, got {len(fields)}"
                )
            yield dict(zip(self.columns, fields))

        self.stop()


def read_table(
    file: typechecking.AcceptedIOType, required_columns: Sequence[str] = ()
) -> List[Dict[str, str]]:
    with CSVReader(file, required_columns) as reader:
        return list(reader)  # type: ignore


def write_table(
    file: typechecking.AcceptedIOType, columns: Sequence[str], rows
) -> None:
    with CSVWriter(file, columns) as writer:
        writer.write_rows(rows)  # type: ignore


def read_pairings(file: typechecking.AcceptedIOType) -> Dict[Tuple[str, str], List[float]]:
    """Returns per (victim_id, opponent_id) the returns ordered by episode index.

    Pairings keep the order of their first appearance in the file.
    """
    episodes: Dict[Tuple[str, str], List[Tuple[int, float]]] = {}
    for row in read_table(file, PAIRINGS_COLUMNS):
        key = (row["victim_id"], row["opponent_id"])
        try:
            value = float(row["return"])
            index = int(row["episode_idx"])
        except ValueError as e:
            raise ArtifactError(f"malformed pairing row {row}: {e}") from None
        if not math.isfinite(value):
            raise ArtifactError(f"non-finite return in pairing {key}")
        episodes.setdefault(key, []).append((index, value))
    return {key: [value for _, value in sorted(rows)] for key, rows in episodes.items()}


def write_pairings(
    file: typechecking.AcceptedIOType,
    victim_id: str,
    opponent_id: str,
    returns: Sequence[float],
    append: bool = False,
) -> None:
    with CSVWriter(file, PAIRINGS_COLUMNS, append=append) as writer:
        for index, value in enumerate(returns):
            writer.write_row([victim_id, opponent_id, index, float(value)])
