import csv
import dataclasses
import inspect
import io
import json
import tempfile
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Type, TypeVar, Union, get_type_hints

import numpy as np
import typing_inspect

__all__ = [
    "mkdir",
    "mktmp_dir",
    "fmts",
    "Formatter",
    "serialize",
    "deserialize",
    "load",
    "dump",
    "DeserializationError",
]


def _unify_path(path: Union[str, Path]) -> Path:
    if not isinstance(path, Path):
        path = Path(path)
    return path


# ==========
# file and directory manipulation
# ==========


def mkdir(path: Union[str, Path], parents: bool = True) -> Path:
    """
    Creates a directory, keeping it (and its content) if it already exists.

    :param path: the path to the directory.
    :param parents: if True, automatically creates parent directories.
    :return: the directory path.
    """
    path = _unify_path(path)
    path.mkdir(parents=parents, exist_ok=True)
    return path


def mktmp_dir(prefix: Optional[str] = None, dir: Optional[Path] = None) -> Path:
    """
    Makes a temp directory.  A wrapper for `tempfile.mkdtemp`.
    """
    if prefix is not None:
        prefix = prefix + "-"
    return Path(tempfile.mkdtemp(prefix=prefix, dir=dir))


# ==========
# object (de)serialization
# ==========

TObj = TypeVar("TObj")
TData = TypeVar("TData")

_NON_TYPE = type(None)


def serialize(obj: TObj) -> TData:
    """
    Serializes an object into a data structure with only primitive types, list, dict.
    Dataclasses become dicts (field name -> value), tuples become lists, and numpy scalars/arrays become python
    numbers/lists.
    """
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    elif hasattr(obj, "serialize"):
        return getattr(obj, "serialize")()
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: serialize(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    elif isinstance(obj, (list, tuple)):
        return [serialize(item) for item in obj]
    elif isinstance(obj, dict):
        return {serialize(k): serialize(v) for k, v in obj.items()}
    elif isinstance(obj, np.generic):
        return obj.item()
    elif isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"Cannot serialize object of type {type(obj)}, please consider writing a serialize() function")


class DeserializationError(RuntimeError):
    def __init__(self, data: TData, clz: Optional[Type], reason: str):
        self.data = data
        self.clz = clz
        self.reason = reason

    def __str__(self):
        return f"Cannot deserialize the following data to {self.clz}: {self.reason}\n  {self.data}"


def deserialize(data: TData, clz: Optional[Type] = None) -> TObj:
    """
    Deserializes some data (with only primitive types, list, dict) to an object of the given type (or type hint).
    Unlike `serialize`, this function is strict: data that cannot be matched with the type raises
    DeserializationError.

    :param data: the data to be deserialized.
    :param clz: the targeted type of deserialization; if None, the data is returned as-is.
    :return: the deserialized object.
    """
    if clz is None or clz is Any:
        return data

    if clz == _NON_TYPE:
        if data is None:
            return None
        raise DeserializationError(data, clz, "None type received non-None data")

    clz_origin = typing_inspect.get_origin(clz) or clz
    clz_args = typing_inspect.get_args(clz)

    if typing_inspect.is_optional_type(clz) or typing_inspect.is_union_type(clz):
        if data is None and typing_inspect.is_optional_type(clz):
            return None
        for inner_clz in clz_args:
            if inner_clz == _NON_TYPE:
                continue
            try:
                return deserialize(data, inner_clz)
            except DeserializationError:
                continue
        raise DeserializationError(data, clz, "All inner types are incompatible")

    if data is None:
        raise DeserializationError(data, clz, "None data for non-None type")

    if clz_origin in (list, tuple):
        if not isinstance(data, (list, tuple)):
            raise DeserializationError(data, clz, "Data does not have list structure")
        if clz_origin is tuple:
            if len(clz_args) == 2 and clz_args[1] is Ellipsis:
                return tuple(deserialize(x, clz_args[0]) for x in data)
            return tuple(
                deserialize(x, clz_args[min(i, len(clz_args) - 1)] if clz_args else None) for i, x in enumerate(data)
            )
        return [deserialize(x, clz_args[0] if clz_args else None) for x in data]

    if clz_origin is dict:
        if not isinstance(data, dict):
            raise DeserializationError(data, clz, "Data does not have dict structure")
        kt, vt = clz_args if clz_args else (None, None)
        return {deserialize(k, kt): deserialize(v, vt) for k, v in data.items()}

    if inspect.isclass(clz) and hasattr(clz, "deserialize"):
        return getattr(clz, "deserialize")(data)

    if dataclasses.is_dataclass(clz):
        if not isinstance(data, dict):
            raise DeserializationError(data, clz, "Data does not have dict structure")
        hints = _dataclass_hints(clz)
        field_values = {}
        for f in dataclasses.fields(clz):
            if f.init and f.name in data:
                field_values[f.name] = deserialize(data[f.name], hints.get(f.name))
        unknown = set(data) - {f.name for f in dataclasses.fields(clz)}
        if len(unknown) > 0:
            raise DeserializationError(data, clz, f"Unknown fields {sorted(unknown)}")
        return clz(**field_values)

    if clz_origin is type(data):
        return data
    if clz_origin is float and isinstance(data, int) and not isinstance(data, bool):
        return float(data)
    if clz_origin is str and isinstance(data, (int, float)) and not isinstance(data, bool):
        return str(data)

    raise DeserializationError(data, clz, f"Cannot match requested type ({clz}) with data's type ({type(data)})")


def _dataclass_hints(clz: Type) -> Dict[str, Any]:
    try:
        return get_type_hints(clz)
    except (NameError, TypeError):
        return {f.name: f.type for f in dataclasses.fields(clz)}


# ==========
# file read and write
# ==========


def _kv_write(f: io.IOBase, obj: Dict[str, Any]):
    for key, value in obj.items():
        if isinstance(value, str):
            try:
                json.loads(value)
                # the string would be read back as another type, so quote it
                value = json.dumps(value)
            except ValueError:
                pass
        else:
            value = json.dumps(value)
        f.write(f"{key}={value}\n")


def _kv_read(f: io.IOBase) -> Dict[str, Any]:
    ret = {}
    for lineno, line in enumerate(f, start=1):
        line = line.strip()
        if len(line) == 0 or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"Line {lineno} is not in key=value form: {line!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        try:
            ret[key] = json.loads(value)
        except ValueError:
            ret[key] = value
    return ret


@dataclasses.dataclass(frozen=True)
class Formatter:
    # The function used by dump: takes a file-object and obj as input, writes the obj to the file-object
    writer: Callable[[io.IOBase, Any], None]

    # The function used by load: takes a file-object as input, reads the entire file and returns the obtained obj
    reader: Callable[[io.IOBase], Any]

    # File extensions, used for format inference; the first extension is used for output
    exts: Optional[List[str]] = None

    # If this format requires serialization
    serialize: bool = False

    # Extra keyword arguments to `open`
    open_kwargs: Dict[str, Any] = dataclasses.field(default_factory=dict)


class fmts:
    # === txt ===
    txt = Formatter(
        writer=lambda f, obj: f.write(str(obj)),
        reader=lambda f: f.read(),
        exts=["txt"],
    )

    # === csv: list of rows, the first row usually being the header ===
    csv = Formatter(
        writer=lambda f, obj: csv.writer(f, lineterminator="\n").writerows(obj),
        reader=lambda f: [row for row in csv.reader(f)],
        exts=["csv"],
        serialize=True,
        open_kwargs={"newline": ""},
    )

    # === key=value config files ===
    kv = Formatter(
        writer=_kv_write,
        reader=_kv_read,
        exts=["cfg", "conf", "kv"],
        serialize=True,
    )

    all_fmts = [v for v in locals().values() if isinstance(v, Formatter)]


def _infer_from_path(path: Path) -> Optional[Formatter]:
    if "." not in path.name:
        return None
    ext = path.name.rsplit(".", 1)[1]
    for x in fmts.all_fmts:
        if x.exts is not None and ext in x.exts:
            return x
    return None


def dump(
    path: Union[str, Path],
    obj: object,
    fmt: Optional[Formatter] = None,
    parents: bool = True,
) -> None:
    """
    Saves an object to a file.
    The format is automatically inferred from the file name, if not otherwise specified.
    Serialization (i.e., converting to primitive types and data structures) is performed for the formats that need
    it (csv, kv).

    :param path: the path to save the file.
    :param obj: the object to be saved.
    :param fmt: the format of the file; if None (default), inferred from path.
    :param parents: if True (default), create missing parent directories; otherwise raise.
    """
    path = _unify_path(path)

    if not path.parent.is_dir():
        if parents:
            path.parent.mkdir(parents=True)
        else:
            raise FileNotFoundError(str(path.parent))

    if fmt is None:
        fmt = _infer_from_path(path)
    if fmt is None:
        raise RuntimeError(f"Cannot infer format for file {path}")

    if fmt.serialize:
        obj = serialize(obj)

    with open(path, "w", **fmt.open_kwargs) as f:
        fmt.writer(f, obj)


def load(
    path: Union[str, Path],
    fmt: Optional[Formatter] = None,
    clz: Optional[Type] = None,
) -> object:
    """
    Loads an object from a file.
    The format is automatically inferred from the file name, if not otherwise specified.
    If clz is given, the loaded data is deserialized to that type.

    :param path: the path to load the object.
    :param fmt: the format of the file; if None (default), inferred from path.
    :param clz: the class to use for deserialization; if None (default), deserialization is a no-op.
    """
    path = _unify_path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Cannot load non-exist file {path}")

    if fmt is None:
        fmt = _infer_from_path(path)
    if fmt is None:
        raise RuntimeError(f"Cannot infer format for file {path}")

    with open(path, "r", **fmt.open_kwargs) as f:
        obj = fmt.reader(f)

    if clz is not None:
        obj = deserialize(obj, clz)
    return obj
