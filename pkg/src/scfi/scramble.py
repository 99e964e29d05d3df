"""Flash image encryption and the VMEM text format."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Dict, Mapping, Union

from .instrument import FLASH_SIZE, GRANULE, MetadataFile
from .prince import ScrambleParams, decrypt, effective_key, encrypt


class ScrambleError(ValueError):
    pass


class VmemError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class FlashImage:
    """Ciphertext flash contents, one 64-bit word per 8-byte-aligned address."""

    words: Dict[int, int]
    params: ScrambleParams

    def __eq__(self, other: object) -> bool:
        return isinstance(other, FlashImage) and self.words == other.words and self.params == other.params


def build_flash(words: Mapping[int, int], meta: MetadataFile, params: ScrambleParams) -> FlashImage:
    """Encrypt every word under the key derived from its block's tweak.

    Words inside the scramble range must be covered by a metadata block;
    words outside it go through the untweaked path.
    """
    tweaks = meta.tweak_map()
    out: Dict[int, int] = {}
    for addr in sorted(words):
        if addr % GRANULE:
            raise ScrambleError(f"image word at {addr:#x} is not 8-byte aligned")
        if not 0 <= addr < FLASH_SIZE:
            raise ScrambleError(f"image word at {addr:#x} is outside the flash")
        if params.in_range(addr):
            if addr not in tweaks:
                raise ScrambleError(f"code word at {addr:#x} has no metadata block")
            tweak = tweaks[addr]
        else:
            tweak = 0
        key = effective_key(params.key, tweak, addr, params)
        out[addr] = encrypt(words[addr], key, params.rounds)
    return FlashImage(out, params)


def descramble_word(flash: FlashImage, addr: int, tweak: int) -> int:
    key = effective_key(flash.params.key, tweak, addr, flash.params)
    return decrypt(flash.words[addr], key, flash.params.rounds)


_VMEM_LINE = re.compile(r"@([0-9a-f]{8}) ([0-9a-f]{16})")


def emit_vmem(image: Union[FlashImage, Mapping[int, int]]) -> str:
    """One ``@<addr/8> <word>`` line per word, ascending."""
    words = image.words if isinstance(image, FlashImage) else image
    lines = []
    for addr in sorted(words):
        if addr % GRANULE:
            raise VmemError(0, f"address {addr:#x} is not 8-byte aligned")
        lines.append(f"@{addr // GRANULE:08x} {words[addr]:016x}\n")
    return "".join(lines)


def parse_vmem_words(text: str) -> Dict[int, int]:
    out: Dict[int, int] = {}
    last = -1
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for lineno, line in enumerate(lines, start=1):
        m = _VMEM_LINE.fullmatch(line)
        if m is None:
            raise VmemError(lineno, f"malformed line {line!r}")
        index = int(m.group(1), 16)
        if index == last:
            raise VmemError(lineno, f"duplicate address {index * GRANULE:#x}")
        if index < last:
            raise VmemError(lineno, f"address {index * GRANULE:#x} out of order")
        last = index
        out[index * GRANULE] = int(m.group(2), 16)
    return out


def parse_vmem(text: str, params: ScrambleParams) -> FlashImage:
    return FlashImage(parse_vmem_words(text), params)
