"""Lightweight run diagnostics shared by smoothers, covariance and pipeline."""

from dataclasses import dataclass, field


@dataclass
class Diagnostics:
    counters: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def bump(self, name, k=1):
        self.counters[name] = self.counters.get(name, 0) + k

    def note(self, msg):
        self.notes.append(str(msg))

    def merge(self, other):
        for k, v in other.counters.items():
            self.bump(k, v)
        self.notes.extend(other.notes)

    def as_pairs(self):
        pairs = [(f"diag_{k}", str(v)) for k, v in sorted(self.counters.items())]
        for i, note in enumerate(self.notes):
            pairs.append((f"diag_note_{i}", note))
        return pairs
