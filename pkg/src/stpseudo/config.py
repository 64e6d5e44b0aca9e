"""Pipeline configuration: INI-style ``key = value`` sections with defaults."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ValidationError

# (section, key, field name, type)
_SCHEMA = [
    ("run", "seed", "seed", int),
    ("preprocess", "target_sum", "target_sum", float),
    ("preprocess", "n_components", "n_components", int),
    ("preprocess", "k", "k", int),
    ("cluster", "resolution", "resolution", float),
    ("cluster", "max_iterations", "max_iterations", int),
    ("labeling", "n", "N", int),
    ("labeling", "m", "M", int),
    ("labeling", "tau_vote", "tau_vote", float),
    ("labeling", "tau_cancer", "tau_cancer", float),
    ("labeling", "binary_votes", "binary_votes", bool),
    ("labeling", "neoplastic_refinement", "neoplastic_refinement", bool),
    ("tiling", "patch_size", "patch_size", int),
    ("tiling", "stride", "stride", int),
]
_PATH_KEYS = ("expression", "cells", "genes", "boundaries", "markers", "category_map",
              "cancer_genes", "manifest")


@dataclass(frozen=True)
class PipelineConfig:
    expression: Path | None = None
    cells: Path | None = None
    genes: Path | None = None
    boundaries: Path | None = None
    markers: tuple[Path, ...] = ()
    category_map: Path | None = None
    cancer_genes: tuple[Path, ...] = ()
    manifest: Path | None = None
    out: Path | None = None

    seed: int = 0
    target_sum: float = 1e4
    n_components: int = 50
    k: int = 15
    resolution: float = 4.0
    max_iterations: int = 100
    N: int = 10
    M: int = 20
    tau_vote: float = 5.0
    tau_cancer: float = 0.25
    binary_votes: bool = False
    neoplastic_refinement: bool = True
    patch_size: int = 256
    stride: int = 256

    # raw path strings as written in the file, for the echo
    raw_paths: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("target_sum", "resolution", "tau_vote", "tau_cancer"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.target_sum <= 0 or self.resolution <= 0:
            raise ValidationError("target_sum and resolution must be positive")
        for name in ("n_components", "k", "N", "M", "patch_size", "stride", "max_iterations"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")

    def with_overrides(self, **kw) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def echo(self) -> dict:
        """Tunables and input paths (never the output dir) as plain JSON values."""
        out: dict = {"paths": dict(sorted(self.raw_paths.items()))}
        for section, key, name, _ in _SCHEMA:
            out.setdefault(section, {})[key] = getattr(self, name)
        return out

    def hash(self) -> str:
        blob = json.dumps(self.echo(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def input_files(self) -> dict[str, Path]:
        files: dict[str, Path] = {}
        for key in ("expression", "boundaries", "category_map", "manifest"):
            p = getattr(self, key)
            if p is None:
                raise ValidationError(f"config lacks required path '{key}'")
            files[key] = p
        files["cells"] = self.cells or self.expression.parent / "cells.txt"
        files["genes"] = self.genes or self.expression.parent / "genes.txt"
        if not self.markers:
            raise ValidationError("config lacks required path 'markers'")
        for i, p in enumerate(self.markers):
            files[f"markers[{i}]"] = p
        if self.neoplastic_refinement and not self.cancer_genes:
            raise ValidationError("neoplastic_refinement needs 'cancer_genes'")
        for i, p in enumerate(self.cancer_genes):
            files[f"cancer_genes[{i}]"] = p
        return files


def _to_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def load_config(path) -> PipelineConfig:
    """Read a config file; relative paths resolve against its directory."""
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ValidationError(f"{path}: {exc}") from None
    base = path.parent
    kw: dict = {}
    raw: dict = {}
    if cp.has_section("paths"):
        for key, value in cp.items("paths"):
            if key == "out":
                kw["out"] = base / value.strip()
                continue
            if key not in _PATH_KEYS:
                raise ValidationError(f"{path}: unknown key [paths] {key}")
            raw[key] = value.strip()
            parts = [base / v.strip() for v in value.split(",") if v.strip()]
            kw[key] = tuple(parts) if key in ("markers", "cancer_genes") else parts[0]
    known = {(s, k) for s, k, _, _ in _SCHEMA}
    for section in cp.sections():
        if section == "paths":
            continue
        for key, _ in cp.items(section):
            if (section, key) not in known:
                raise ValidationError(f"{path}: unknown key [{section}] {key}")
    for section, key, name, typ in _SCHEMA:
        if cp.has_option(section, key):
            value = cp.get(section, key)
            try:
                kw[name] = _to_bool(value) if typ is bool else typ(value)
            except ValueError:
                raise ValidationError(f"{path}: [{section}] {key} = {value!r} is not {typ.__name__}") from None
    return PipelineConfig(raw_paths=raw, **kw)
