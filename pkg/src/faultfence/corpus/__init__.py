"""Reference programs for the two case studies, with their declared inputs.

``pincheck`` grants access for the pin 1,2,3,4; ``bootloader`` boots only a
payload whose XOR-fold matches the stored digest.  Both halt with 1 on the
good input and 0 on the bad one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache, reduce
from importlib import resources

from ..asm import ProgramImage, assemble


@dataclass(frozen=True)
class CorpusEntry:
    name: str
    source: str
    good_input: tuple[int, ...]
    bad_input: tuple[int, ...]
    good_code: int = 1
    bad_code: int = 0

    def image(self) -> ProgramImage:
        return assemble(self.source)


def _read(name: str) -> str:
    return resources.files(__name__).joinpath(name).read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def _manifest() -> dict:
    return json.loads(_read("manifest.json"))


def names() -> list[str]:
    return list(_manifest())


def load(name: str) -> CorpusEntry:
    try:
        m = _manifest()[name]
    except KeyError:
        raise KeyError(f"no corpus program named {name!r}") from None
    return CorpusEntry(name, _read(m["source"]), tuple(m["good_input"]),
                       tuple(m["bad_input"]), m["good_code"], m["bad_code"])


def pincheck() -> CorpusEntry:
    return load("pincheck")


def bootloader() -> CorpusEntry:
    return load("bootloader")


def all_entries() -> list[CorpusEntry]:
    return [load(n) for n in names()]


def xor_fold(words) -> int:
    """Reference digest the bootloader computes."""
    return reduce(lambda a, b: a ^ b, (w & 0xFFFFFFFF for w in words), 0)
