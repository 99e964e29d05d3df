"""Tweak-based control-flow integrity on top of a scrambled instruction flash.

Pipeline: :mod:`scfi.asm` -> :mod:`scfi.cfg` -> :mod:`scfi.instrument` ->
:mod:`scfi.scramble` -> :mod:`scfi.sim`, with :mod:`scfi.faults` and
:mod:`scfi.bench` on top and :mod:`scfi.cli` as the ``scfi`` command.
"""

__version__ = "0.1.0"
