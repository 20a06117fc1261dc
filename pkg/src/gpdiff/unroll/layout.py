"""Token layout: named row slots of the ``D x N`` token matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

PHI = ("eta", "alpha", "sigma2", "alpha2")
_PHI_INDEX = {name: k for k, name in enumerate(PHI)}


@dataclass(frozen=True)
class Layout:
    """Row slots, in order::

        x(d) e(d_e) phi(4) s(d) buf_a(d) buf_b(d) buf_c(d) mu(d) one(1) mult(3d)

    The softmax variant appends ``dhat(1)`` and ``idx(1)``.
    """

    d: int
    d_e: int = 2
    softmax: bool = False
    slots: dict = field(init=False, repr=False)
    D: int = field(init=False)

    def __post_init__(self):
        d = self.d
        sizes = [("x", d), ("e", self.d_e), ("phi", len(PHI)), ("s", d), ("buf_a", d),
                 ("buf_b", d), ("buf_c", d), ("mu", d), ("one", 1), ("mult", 3 * d)]
        if self.softmax:
            sizes += [("dhat", 1), ("idx", 1)]
        slots, off = {}, 0
        for name, size in sizes:
            slots[name] = (off, size)
            off += size
        object.__setattr__(self, "slots", slots)
        object.__setattr__(self, "D", off)

    def sl(self, name: str) -> slice:
        start, size = self.slots[name]
        return slice(start, start + size)

    def rows(self, name: str) -> range:
        start, size = self.slots[name]
        return range(start, start + size)

    def idx(self, name: str, k: int = 0) -> int:
        start, size = self.slots[name]
        if not 0 <= k < size:
            raise IndexError(f"slot {name} has size {size}")
        return start + k

    def phi(self, name: str) -> int:
        return self.idx("phi", _PHI_INDEX[name])

    def as_dict(self) -> dict:
        return {"d": self.d, "d_e": self.d_e, "softmax": self.softmax, "D": self.D,
                "slots": {k: list(v) for k, v in self.slots.items()}}
