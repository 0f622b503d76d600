"""Fine-grained patch-type classes and dataset manifests.

A patch type is the combination of a capture device and a presenting
material. Live captures of different devices are different classes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ManifestError, RegistryError

LIVE = "LIVE"
SPOOF = "SPOOF"
SPLITS = ("TRAIN", "DEV", "TEST")


@dataclass(frozen=True, order=True)
class PatchTypeLabel:
    dataset_id: str
    device_id: str
    liveness: str
    medium_id: str = ""

    def __post_init__(self):
        if self.liveness not in (LIVE, SPOOF):
            raise RegistryError(f"liveness must be LIVE or SPOOF, got {self.liveness!r}")
        if self.liveness == LIVE and self.medium_id:
            raise RegistryError(f"live label cannot carry a medium id ({self.medium_id!r})")
        for name in ("dataset_id", "device_id", "medium_id"):
            value = getattr(self, name)
            if "," in value or "\n" in value:
                raise RegistryError(f"{name} may not contain commas or newlines: {value!r}")

    @property
    def is_live(self) -> bool:
        return self.liveness == LIVE

    @property
    def name(self) -> str:
        """Short display name, e.g. ``SYN2_L`` or ``SYN2_S.print``."""
        tag = "L" if self.is_live else "S." + self.medium_id
        return f"{self.dataset_id}{self.device_id}_{tag}"


class ClassRegistry:
    """Ordered list of patch-type classes with a live/spoof partition.

    The live set is tracked separately from each label's own liveness so
    that classes can be redefined as spoof without renumbering.
    """

    def __init__(self, classes: Iterable[PatchTypeLabel] = (), live: Iterable[bool] | None = None):
        self._classes: list[PatchTypeLabel] = []
        self._live: list[bool] = []
        self._index: dict[PatchTypeLabel, int] = {}
        classes = list(classes)
        flags = [c.is_live for c in classes] if live is None else list(live)
        if len(flags) != len(classes):
            raise RegistryError("live flags and classes differ in length")
        for label, flag in zip(classes, flags):
            self._append(label, flag)

    def _append(self, label: PatchTypeLabel, live: bool) -> int:
        if label in self._index:
            raise RegistryError(f"label {label.name} already registered at index {self._index[label]}",
                                index=self._index[label])
        idx = len(self._classes)
        self._classes.append(label)
        self._live.append(bool(live))
        self._index[label] = idx
        return idx

    def register(self, label: PatchTypeLabel) -> int:
        return self._append(label, label.is_live)

    @property
    def classes(self) -> tuple[PatchTypeLabel, ...]:
        return tuple(self._classes)

    @property
    def n_classes(self) -> int:
        return len(self._classes)

    @property
    def n_live(self) -> int:
        return sum(self._live)

    @property
    def live_indices(self) -> list[int]:
        return [i for i, flag in enumerate(self._live) if flag]

    @property
    def spoof_indices(self) -> list[int]:
        return [i for i, flag in enumerate(self._live) if not flag]

    def is_live(self, index: int) -> bool:
        return self._live[index]

    def index_of(self, label: PatchTypeLabel) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise RegistryError(f"unknown label {label.name}") from None

    def live_mask(self):
        import numpy as np
        return np.array(self._live, dtype=bool)

    def validate(self) -> None:
        """Require at least one live and one spoof class."""
        k, n = self.n_live, self.n_classes
        if not 1 <= k < n:
            raise RegistryError(f"registry needs both live and spoof classes (N={n}, k={k})")

    def __len__(self):
        return self.n_classes

    def __eq__(self, other):
        if not isinstance(other, ClassRegistry):
            return NotImplemented
        return self._classes == other._classes and self._live == other._live

    def __repr__(self):
        return f"ClassRegistry(N={self.n_classes}, k={self.n_live})"

    # canonical text form, one class per line
    def to_text(self) -> str:
        lines = []
        for i, (c, flag) in enumerate(zip(self._classes, self._live)):
            lines.append(",".join([str(i), c.dataset_id, c.device_id, c.liveness, c.medium_id,
                                   LIVE if flag else SPOOF]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ClassRegistry":
        classes, flags = [], []
        for n, row in enumerate(csv.reader(io.StringIO(text))):
            if not row:
                continue
            idx, dataset, device, liveness, medium, role = row
            if int(idx) != n:
                raise RegistryError(f"class rows out of order at {idx}")
            classes.append(PatchTypeLabel(dataset, device, liveness, medium))
            flags.append(role == LIVE)
        return cls(classes, flags)


def register_class(registry: ClassRegistry, label: PatchTypeLabel) -> int:
    return registry.register(label)


def coarse_binary_view(registry: ClassRegistry) -> dict[int, int]:
    """Map every class index to 0 (live) or 1 (spoof)."""
    return {i: 0 if registry.is_live(i) else 1 for i in range(registry.n_classes)}


def relabel_as_spoof(registry: ClassRegistry, indices: Sequence[int]) -> ClassRegistry:
    indices = sorted(set(indices))
    for i in indices:
        if not 0 <= i < registry.n_classes:
            raise RegistryError(f"class index {i} out of range", index=i)
        if not registry.is_live(i):
            raise RegistryError(f"class {i} ({registry.classes[i].name}) is not live", index=i)
    if len(indices) >= registry.n_live:
        raise RegistryError("relabeling would leave no live class")
    flags = [registry.is_live(i) and i not in indices for i in range(registry.n_classes)]
    return ClassRegistry(registry.classes, flags)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: PatchTypeLabel
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def select(self, split: str | None = None, devices: Iterable[str] | None = None,
               exclude_devices: Iterable[str] | None = None) -> "Manifest":
        devices = set(devices) if devices is not None else None
        exclude = set(exclude_devices or ())
        out = [e for e in self.entries
               if (split is None or e.split == split)
               and (devices is None or e.label.device_id in devices)
               and e.label.device_id not in exclude]
        return Manifest(out, self.root)

    def device_ids(self) -> list[str]:
        seen = {}
        for e in self.entries:
            seen.setdefault(e.label.device_id, None)
        return list(seen)

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write("# path,dataset_id,device_id,liveness,medium_id,split\n")
        writer = csv.writer(buf, lineterminator="\n")
        for e in self.entries:
            writer.writerow([e.path, e.label.dataset_id, e.label.device_id,
                             e.label.liveness, e.label.medium_id, e.split])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def parse(cls, text: str, root: Path | None = None) -> "Manifest":
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            row = next(csv.reader([stripped]))
            if len(row) != 6:
                raise ManifestError(f"line {lineno}: expected 6 fields, got {len(row)}")
            path, dataset, device, liveness, medium, split = (c.strip() for c in row)
            try:
                label = PatchTypeLabel(dataset, device, liveness.upper(), medium)
                entries.append(ManifestEntry(path, label, split.upper()))
            except (RegistryError, ManifestError) as exc:
                raise ManifestError(f"line {lineno}: {exc}") from None
        return cls(entries, root)

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        return cls.parse(path.read_text(encoding="utf-8"), root=path.parent)


def from_manifest(manifest: Manifest) -> ClassRegistry:
    """Build a registry from the distinct labels in a manifest.

    Live classes come first, then spoof classes, each group in order of
    first appearance.
    """
    seen: dict[PatchTypeLabel, None] = {}
    for e in manifest:
        seen.setdefault(e.label, None)
    labels = list(seen)
    live = [l for l in labels if l.is_live]
    spoof = [l for l in labels if not l.is_live]
    if not live or not spoof:
        raise ManifestError(f"manifest needs live and spoof labels (live={len(live)}, spoof={len(spoof)})")
    registry = ClassRegistry()
    for label in live + spoof:
        registry.register(label)
    return registry
