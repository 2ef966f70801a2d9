"""Edit-task description and per-run trace records."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class EditTask:
    """One image edit: source image plus source/target prompts and outputs."""

    source_image: str | Path
    p_src: str
    p_tgt: str
    output_image: str | Path | None = None
    trace_path: str | Path | None = None
    cache_path: str | Path | None = None
    mask_path: str | Path | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.p_src or not self.p_tgt:
            raise ValueError("source and target prompts must be non-empty")


@dataclass
class RunTrace:
    """Per-reverse-step objective values, gradient norms, and wall times."""

    seed: int
    timings: bool = True
    records: list[dict] = field(default_factory=list)
    total_ms: float = 0.0
    peak_mem_kb: int | None = None

    def add(self, t: int, l_dist: float, l_cycle: float, grad_norm: float, ms: float):
        self.records.append({"t": t, "l_dist": l_dist, "l_cycle": l_cycle,
                             "grad_norm": grad_norm, "ms": ms})

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# seed={self.seed}\n")
            fh.write(f"# total_ms={self.total_ms!r}\n")
            if self.timings and self.peak_mem_kb is not None:
                fh.write(f"# peak_mem_kb={self.peak_mem_kb}\n")
            writer = csv.writer(fh)
            writer.writerow(["t", "L_dist", "L_cycle", "grad_norm", "ms"])
            for r in self.records:
                writer.writerow([r["t"], repr(float(r["l_dist"])),
                                 repr(float(r["l_cycle"])),
                                 repr(float(r["grad_norm"])), repr(float(r["ms"]))])
