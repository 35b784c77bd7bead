"""Run configuration: one JSON document validated against the shipped schema."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .cwfa import CWFAConfig
from .optics import BeadConfig, LensletLayout, PhantomConfig, make_layout, synth_psf


def load_schema(name: str) -> dict:
    """A schema shipped with the package: ``"run_config"`` or ``"metrics"``."""
    return json.loads(resources.files("cwflow.schemas").joinpath(f"{name}.schema.json").read_text())


def validate(document: dict, schema: str) -> None:
    """Raise ``ValueError`` naming the offending path when ``document`` breaks the schema."""
    try:
        jsonschema.validate(document, load_schema(schema))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValueError(f"invalid {schema} at {where}: {exc.message}") from None


@dataclass
class RunConfig:
    seed: int = 0
    threads: int | None = None
    phantom: dict = field(default_factory=dict)
    beads: dict = field(default_factory=dict)
    layout: dict = field(default_factory=dict)
    psf: dict = field(default_factory=dict)
    deconvolution: dict = field(default_factory=dict)
    cwfa: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        validate(d, "run_config")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved(self) -> dict:
        """Every section with defaults filled in; what a run actually used."""
        lay = self.make_layout()
        return {
            "seed": self.seed,
            "threads": self.threads,
            "phantom": _plain(asdict(self.phantom_config())),
            "beads": _plain(asdict(self.bead_config())),
            "layout": {"n_lenslets": len(lay), "sensor_size": list(lay.sensor_size), "crop_size": list(lay.crop_size),
                       "ring_radius": self.layout.get("ring_radius", 48.0)},
            "psf": {"parallax_gain": 0.5, "spot_sigma": 1.0, **self.psf},
            "deconvolution": self.rl_options(),
            "cwfa": _plain(asdict(self.cwfa_config())),
            "paths": dict(self.paths),
        }

    def phantom_config(self) -> PhantomConfig:
        return PhantomConfig(**{"seed": self.seed, **self.phantom})

    def bead_config(self) -> BeadConfig:
        shape = self.phantom.get("shape", PhantomConfig().shape)
        return BeadConfig(**{"shape": shape, "seed": self.seed, **self.beads})

    def make_layout(self) -> LensletLayout:
        opts = dict(self.layout)
        n = opts.pop("n_lenslets", 9)
        return make_layout(n, **opts)

    def make_psf(self, layout: LensletLayout | None = None, depth: int | None = None):
        layout = layout or self.make_layout()
        depth = depth or self.phantom_config().shape[0]
        return synth_psf(layout, depth, **self.psf)

    def rl_options(self) -> dict:
        return {"iterations": 100, "rel_floor": 0.2, **self.deconvolution}

    def cwfa_config(self) -> CWFAConfig:
        return CWFAConfig.from_dict({"seed": self.seed, **self.cwfa, **self.optimizer})


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
