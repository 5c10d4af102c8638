"""
Utilities and configuration file parsing.
"""
import hashlib
import json
import os
import os.path
import logging
from configparser import ConfigParser
from typing import Any, Dict, Mapping, Optional

import numpy as np

import blockland
from blockland import typechecking

log = logging.getLogger("blockland.util")

CONFIG_FILES = ["~/.blocklandrc", "blockland.ini"]

#: environment variable holding the default root for every ``--out``
OUTPUT_ROOT_VARIABLE = "BLOCKLAND_OUTPUT_ROOT"

LOGGING_LEVELS = ["critical", "error", "warning", "info", "debug"]


def load_file_config(
    path: Optional[typechecking.StringPathLike] = None, section: str = "default"
) -> Dict[str, Any]:
    """
    Loads configuration from a file. JSON files hold a flat object whose
    nested objects act as sections; any other file is read as INI::

        [default]
        total_steps = 200000
        n_envs = 8

    :param path:
        path to config file. If not specified, the files in
        :data:`CONFIG_FILES` are tried.
    :param section:
        name of the section to read configuration from.
    """
    if path is not None and str(path).lower().endswith(".json"):
        with open(path, "r") as f:
            document = json.load(f)
        if not isinstance(document, dict):
            raise blockland.ConfigurationError(
                f"config file {path} must hold a JSON object"
            )
        if section == "default":
            return {k: v for k, v in document.items() if not isinstance(v, dict)}
        nested = document.get(section, {})
        return dict(nested) if isinstance(nested, dict) else {}

    config = ConfigParser()
    if path is None:
        config.read([os.path.expanduser(p) for p in CONFIG_FILES])
    elif not config.read(path):
        raise blockland.ArtifactError(f"cannot read config file {path}")

    _config = {}
    if config.has_section(section):
        _config.update(dict((key, val) for key, val in config.items(section)))

    return _config


def load_environment_config(context: Optional[str] = None) -> Dict[str, Any]:
    """
    Loads config dict from environmental variables (if set):

    * BLOCKLAND_CONFIG, a JSON object
    * BLOCKLAND_<KEY> for every key of the JSON object's siblings, e.g.
      BLOCKLAND_TOTAL_STEPS or BLOCKLAND_N_ENVS

    if context is supplied, "_{context}" is appended to the environment
    variable name we will look at. For example if context="SMOKE":

    * BLOCKLAND_CONFIG_SMOKE
    * BLOCKLAND_TOTAL_STEPS_SMOKE
    """
    context_suffix = "_{}".format(context.upper()) if context else ""

    config: Dict[str, Any] = json.loads(
        os.environ.get("BLOCKLAND_CONFIG" + context_suffix, "{}")
    )

    prefix = "BLOCKLAND_"
    for name, val in os.environ.items():
        if not name.startswith(prefix) or not val:
            continue
        key = name[len(prefix) :]
        if context_suffix:
            if not key.endswith(context_suffix):
                continue
            key = key[: -len(context_suffix)]
        key = key.lower()
        if key in ("config", "output_root") or key.startswith("config_"):
            continue
        config[key] = val

    return config


def _coerce(key: str, value: Any, default: Any) -> Any:
    """Coerce string values from INI files and the environment to the type of the default."""
    if not isinstance(value, str) or default is None or isinstance(default, str):
        return value
    try:
        if isinstance(default, bool):
            return value.lower() not in ("0", "false", "no", "off", "")
        if isinstance(default, int):
            return int(value, base=0)
        if isinstance(default, float):
            return float(value)
        return json.loads(value)
    except ValueError as e:
        raise blockland.ConfigurationError(
            f"configuration key '{key}' has invalid value {value!r}: {e}"
        ) from None


def load_config(
    defaults: Mapping[str, Any],
    path: Optional[typechecking.StringPathLike] = None,
    config: Optional[Mapping[str, Any]] = None,
    context: Optional[str] = None,
) -> typechecking.WorkbenchConfig:
    """
    Returns a dict with configuration details which is loaded from (in this order):

    - config (usually the command line flags; ``None`` values are ignored)
    - blockland.rc
    - Environment variables BLOCKLAND_CONFIG and BLOCKLAND_<KEY>
    - The given config file, or ``~/.blocklandrc`` / ``blockland.ini``
    - defaults

    where earlier sources win over later ones.

    :param defaults:
        the built-in values; their types drive coercion of string values.
    :param path:
        Optional path to config file.
    :param config:
        A dict of explicitly given values.
    :param context:
        Extra 'context' passed to config sources, used as a section name
        in config files and as a suffix for environment variables.
    """
    given_config = {k: v for k, v in (config or {}).items() if v is not None}
    result: Dict[str, Any] = {}

    config_sources = [
        given_config,
        blockland.rc,
        lambda _context: load_environment_config(  # pylint: disable=unnecessary-lambda
            _context
        ),
        lambda _context: load_environment_config(),
        lambda _context: load_file_config(path, _context) if _context else {},
        lambda _context: load_file_config(path),
        defaults,
    ]

    # Slightly complex here to only search for the file config if required
    for cfg in config_sources:
        if callable(cfg):
            cfg = cfg(context)
        for key in cfg:
            if key not in result:
                result[key] = cfg[key]

    for key, default in defaults.items():
        result[key] = _coerce(key, result[key], default)

    log.debug("workbench config: {}".format(result))
    return typechecking.WorkbenchConfig(result)


def default_output_root() -> str:
    """The directory used when no ``--out`` is given."""
    return os.environ.get(OUTPUT_ROOT_VARIABLE, "runs")


def set_logging_level(level_name: Optional[str] = None):
    """Set the logging level for the "blockland" logger.
    Expects one of: 'critical', 'error', 'warning', 'info', 'debug'
    """
    blockland_logger = logging.getLogger("blockland")

    try:
        blockland_logger.setLevel(getattr(logging, level_name.upper()))  # type: ignore
    except AttributeError:
        blockland_logger.setLevel(logging.DEBUG)
    log.debug("Logging set to {}".format(level_name))


def derive_seed(seed: int, stream: int) -> int:
    """Derive the seed of one random stream from a run seed.

    Stream ``i`` of run ``seed`` is seeded with the first 8 bytes
    (little endian) of ``sha256(b"<seed>:<i>")``. The split is counter-based,
    so any stream can be reconstructed without drawing from the others.
    """
    digest = hashlib.sha256("{}:{}".format(int(seed), int(stream)).encode("ascii"))
    return int.from_bytes(digest.digest()[:8], "little")


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """A PCG64 generator for stream ``stream`` of run ``seed``."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, stream)))


def rng_state(rng: np.random.Generator) -> Dict[str, Any]:
    """JSON-compatible bit generator state of ``rng``."""
    return rng.bit_generator.state


def restore_rng(state: Mapping[str, Any]) -> np.random.Generator:
    bit_generator = np.random.PCG64()
    bit_generator.state = dict(state)
    return np.random.Generator(bit_generator)


def sha256_file(path: typechecking.StringPathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def dump_json(document: Any) -> str:
    """Canonical JSON text: sorted keys, shortest round-trip floats, trailing newline."""
    return json.dumps(document, sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(path: typechecking.StringPathLike, document: Any) -> None:
    text = dump_json(document)
    tmp_path = "{}.tmp".format(path)
    with open(tmp_path, "w", newline="\n") as f:
        f.write(text)
    os.replace(tmp_path, path)


if __name__ == "__main__":
    print("Searching for configuration named:")
    print("\n".join(CONFIG_FILES))
    print()
    print("Settings:")
    print(load_config({}))
