import sys
from pathlib import Path
import tempfile
import json
import datetime
from collections import OrderedDict
from collections.abc import Iterator
from typing import Optional, Union, Any, TextIO

from beartype import beartype
from termcolor import colored
import numpy as np


DEBUG: int = 10
INFO: int = 20
WARN: int = 30
ERROR: int = 40

DISABLED: int = 50

LEVEL_TAGS: dict[int, tuple[str, str]] = {
    DEBUG: ("debug", "blue"),
    WARN: ("warn", "yellow"),
    ERROR: ("error", "red"),
}

Value = Union[int, float, str, bool, np.integer, np.floating, np.ndarray]


@beartype
def to_builtin(val: Value) -> Union[int, float, str, bool, list]:
    """numpy scalars and arrays to plain json-able python values"""
    if isinstance(val, np.ndarray):
        return val.tolist()
    if isinstance(val, np.generic):
        return val.item()
    return val


class KVWriter(object):

    def writekvs(self, kvs):
        raise NotImplementedError(f"do whatever with {kvs}")


class SeqWriter(object):

    def writeseq(self, seq, level):
        raise NotImplementedError(f"do whatever with {seq} at {level}")


class HumanOutputFormat(KVWriter, SeqWriter):

    @beartype
    def __init__(self, path_or_io: Union[TextIO, Path], *, colors: bool = True):
        if isinstance(path_or_io, Path):
            self.file = path_or_io.open("wt")
            self.own_file = True
            self.colors = False  # no escape codes in files
        else:
            assert hasattr(path_or_io, "write"), f"expected file or path, got {path_or_io}"
            self.file = path_or_io
            self.own_file = False
            self.colors = colors

    @beartype
    def writekvs(self, kvs: dict[str, Value]):
        key2str = {}
        for (key, val) in kvs.items():
            valstr = f"{val:<8.3g}" if isinstance(val, (float, np.floating)) else str(val)
            key2str[self.truncate(key)] = self.truncate(valstr)
        if len(key2str) == 0:
            self.writeseq(iter(["tried to write an empty key-value dict"]), WARN)
            return
        keywidth = max(map(len, key2str.keys()))
        valwidth = max(map(len, key2str.values()))

        dashes = "-" * (keywidth + valwidth + 7)
        lines = [dashes]
        for (key, val) in key2str.items():
            lines.append(f"| {key.ljust(keywidth)} | {val.ljust(valwidth)} |")
        lines.append(dashes)
        self.file.write("\n".join(lines) + "\n")
        self.file.flush()

    @beartype
    @staticmethod
    def truncate(s: str) -> str:
        thres = 43
        return s[:40] + "..." if len(s) > thres else s

    @beartype
    def writeseq(self, seq: Iterator[str], level: int = INFO):
        if level in LEVEL_TAGS:
            tag, color = LEVEL_TAGS[level]
            prefix = f"[{tag}] "
            self.file.write(colored(prefix, color) if self.colors else prefix)
        for arg in seq:
            self.file.write(arg)
        self.file.write("\n")
        self.file.flush()

    @beartype
    def close(self):
        if self.own_file:
            self.file.close()


class JSONOutputFormat(KVWriter):

    @beartype
    def __init__(self, filename: Path):
        self.file = filename.open("wt")

    @beartype
    def writekvs(self, kvs: dict[str, Value]):
        row = {k: to_builtin(v) for k, v in kvs.items()}
        self.file.write(json.dumps(row) + "\n")
        self.file.flush()

    @beartype
    def close(self):
        self.file.close()


class CSVOutputFormat(KVWriter):

    @beartype
    def __init__(self, filename: Path):
        self.file = filename.open("w+t")
        self.keys: list[str] = []
        self.sep = ","

    @beartype
    def writekvs(self, kvs: dict[str, Value]):
        extra_keys = [k for k in kvs if k not in self.keys]
        if extra_keys:
            # the header grows: rewrite it and pad the rows already written
            self.keys.extend(extra_keys)
            self.file.seek(0)
            rows = self.file.readlines()[1:]
            self.file.seek(0)
            self.file.truncate()
            self.file.write(self.sep.join(self.keys) + "\n")
            for row in rows:
                self.file.write(row.rstrip("\n") + self.sep * len(extra_keys) + "\n")
        cells = ("" if kvs.get(k) is None else str(to_builtin(kvs[k])) for k in self.keys)
        self.file.write(self.sep.join(cells) + "\n")
        self.file.flush()

    @beartype
    def close(self):
        self.file.close()


OutputFormat = Union[HumanOutputFormat, JSONOutputFormat, CSVOutputFormat]


@beartype
def make_output_format(formatting: str, directory: Path, suffix: str = "") -> OutputFormat:
    directory.mkdir(parents=True, exist_ok=True)
    match formatting:
        case "stdout":
            return HumanOutputFormat(sys.stdout)
        case "log":
            return HumanOutputFormat(directory / f"log{suffix}.txt")
        case "json":
            return JSONOutputFormat(directory / f"progress{suffix}.json")
        case "csv":
            return CSVOutputFormat(directory / f"progress{suffix}.csv")
        case _:
            raise ValueError(f"unknown formatting specified: {formatting}")


# frontend

def logkv(key, val):
    """Log a key-value pair with the current logger; the row is written on `dumpkvs`"""
    if Logger.CURRENT is not None:
        Logger.CURRENT.logkv(key, val)


def logkvs(d):
    """Log a dictionary of key-value pairs with the current logger"""
    for (k, v) in d.items():
        logkv(k, v)


def dumpkvs():
    """Write the accumulated key-value pairs to every writer, then flush them"""
    if Logger.CURRENT is not None:
        Logger.CURRENT.dumpkvs()


def log(*args, level=INFO):
    """Write the args, with no separators, to the console and the text log"""
    if Logger.CURRENT is not None:
        Logger.CURRENT.log(*args, level=level)


def debug(*args):
    log(*args, level=DEBUG)


def info(*args):
    log(*args, level=INFO)


def warn(*args):
    log(*args, level=WARN)


def error(*args):
    log(*args, level=ERROR)


def set_level(level):
    if Logger.CURRENT is not None:
        Logger.CURRENT.set_level(level)


# backend

class Logger(object):

    DEFAULT: Optional[Any] = None
    CURRENT: Optional[Any] = None

    @beartype
    def __init__(self, directory: Path, output_formats: list[OutputFormat]):
        self.name2val: OrderedDict[str, Value] = OrderedDict()
        self.level: int = INFO
        self.directory: Path = directory
        self.output_formats: list[OutputFormat] = output_formats

    @beartype
    def logkv(self, key: str, val: Value):
        self.name2val.update({key: val})

    @beartype
    def dumpkvs(self):
        if self.level == DISABLED:
            self.name2val.clear()
            return
        for output_format in self.output_formats:
            if isinstance(output_format, KVWriter):
                output_format.writekvs(dict(self.name2val))
        self.name2val.clear()

    @beartype
    def log(self, *args: Any, level: int = INFO):
        if self.level <= level:
            for output_format in self.output_formats:
                if isinstance(output_format, SeqWriter):
                    output_format.writeseq((str(e) for e in args), level)

    @beartype
    def set_level(self, level: int):
        self.level = level

    @beartype
    def close(self):
        for output_format in self.output_formats:
            output_format.close()


@beartype
def configure(directory: Optional[Path] = None,
              format_strs: Optional[list[str]] = None,
              level: int = INFO):
    """Point the current logger at `directory` with the given writers"""
    if directory is None:
        directory = Path(tempfile.gettempdir())
        directory /= datetime.datetime.now(tz=datetime.timezone.utc).strftime(
            "%Y-%m-%d-%H-%M-%S-%f_winoq_log")
    output_formats = [make_output_format(f, directory) for f in (format_strs or [])]
    Logger.CURRENT = Logger(directory=directory, output_formats=output_formats)
    Logger.CURRENT.set_level(level)


@beartype
def configure_default_logger(level: int = INFO):
    """Log to stdout only"""
    configure(format_strs=["stdout"], level=level)
    debug("configuring default logger (logging to stdout only)")
    Logger.DEFAULT = Logger.CURRENT


@beartype
def reset():
    if Logger.CURRENT is not Logger.DEFAULT:
        Logger.CURRENT = Logger.DEFAULT
