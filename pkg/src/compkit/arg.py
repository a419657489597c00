import json
from pathlib import Path
from typing import Collection, List, Sequence

from jsonargparse.typing import register_type

from . import io

__all__ = ["RPath", "expand_config_files"]

RPath = Path
RPath.__doc__ = """
Type hint for jsonargparse to obtain a path that is `resolve`d during parsing (relative to cwd if not absolute).
This type does NOT tell jsonargparse to check the existence of the specified path,
nor does it tell jsonargparse to create the path if it does not exist.
"""


register_type(
    RPath,
    deserializer=lambda v: Path(v).resolve(),
    serializer=lambda v: str(v),
    uniqueness_key=(Path, "ResolvedPath"),
)


def _to_flag_value(value) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value)


def expand_config_files(argv: Sequence[str], subcommands: Collection[str], flag: str = "--config") -> List[str]:
    """
    Replaces ``--config FILE`` (or ``--config=FILE``) options with the ``--key value`` pairs read from the key=value
    FILE.  The pairs are inserted right after the subcommand name, so that any flag given explicitly on the command
    line (which comes later) overrides the value from the file.

    :param argv: the command line arguments, without the program name.
    :param subcommands: the names of the subcommands.
    :param flag: the option name of config files.
    :return: the expanded command line arguments.
    """
    rest: List[str] = []
    injected: List[str] = []
    i = 0
    while i < len(argv):
        token = argv[i]
        if token == flag or token.startswith(flag + "="):
            if token == flag:
                if i + 1 >= len(argv):
                    raise ValueError(f"{flag} requires a file path")
                path = argv[i + 1]
                i += 2
            else:
                path = token.split("=", 1)[1]
                i += 1
            for key, value in io.load(path, fmt=io.fmts.kv).items():
                injected += [f"--{key}", _to_flag_value(value)]
            continue
        rest.append(token)
        i += 1

    if len(injected) == 0:
        return rest

    for j, token in enumerate(rest):
        if token in subcommands:
            return rest[: j + 1] + injected + rest[j + 1 :]
    raise ValueError(f"{flag} given without a subcommand")
