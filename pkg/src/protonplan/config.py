"""Run configuration: a YAML tree with defaults, overrides and full validation.

``load_config`` returns a :class:`RunConfig` holding both the effective
key-value tree and the domain objects built from it.  Validation never stops
at the first problem: every error is collected with its dotted field path
(and source line when the field came from the file).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from protonplan.materials import BUILTIN_MEDIA, Medium, Phantom, ScenarioParams
from protonplan.optimizer import BeamBank, OptConfig, Prescription
from protonplan.phase_space import EnergyWindow, SpatialDomain
from protonplan.scattering import CrossSections, KernelParams
from protonplan.sde_engine import Beam, SimConfig, Source, TransportModel
from protonplan.tally import Grid

_MEDIUM = {"alpha": float, "p": float, "rho": float, "e_screen": 1.0}
_BEAM = {"energy": 105.0, "sigma": 0.0, "weight": 1.0, "position": [0.0, 0.0, 0.0],
         "direction": [0.0, 0.0, 1.0], "lateral_sigma": 0.0}
_LAYER = {"medium": "water", "start": 0.0}
_XS = {"sigma_e": 0.0, "sigma_ne": 0.0, "kappa_e": 200.0, "kappa_ne": 5.0,
       "ne_frac_min": 0.5, "ne_frac_max": 0.95}

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "q_factor": 1.0,
    "output": "out",
    "media": {},
    "domain": {"kind": "slab-1d", "length": 12.0, "width": 10.0, "height": 10.0,
               "layers": [dict(_LAYER)]},
    "window": {"e_min": 1.0, "e_max": 250.0},
    "source": {"beams": [dict(_BEAM)]},
    "scattering": {"e_ref": 100.0, "q_e": 0.0, "q_ne": 0.0, "media": {}},
    "simulation": {"step_len": 0.01, "mu": 0.0, "max_track_len": 100.0, "n_particles": 100_000,
                   "mode": "1d", "chunk_size": 2048},
    "tally": {"n_z": 120, "n_e": 250, "n_angles": 1, "dose_method": "mean"},
    "mesh": {"dz": 0.005, "e_max": None, "cfl_limit": 1.0},
    "bank": {"energies": None, "sigmas": None, "z_lo": 2.9, "z_hi": 6.1, "n_beams": 20,
             "rel_sigma": 0.01, "medium": "water"},
    "prescription": {"z_lo": 3.0, "z_hi": 6.0, "level": 1.0, "w_in": 1.0, "w_out": 0.1,
                     "bin_width": 0.1},
    "optimizer": {"alpha_reg": 1e-6, "step_rule": "auto", "tau0": 1.0, "k0": 10.0,
                  "armijo_c": 1e-4, "shrink": 0.5, "tol_eps": 1e-6, "max_iters": 500,
                  "n_mc": 50_000, "n_scenarios": 1, "influence": "mc", "gradient": "influence",
                  "g_max": None, "g_max_factor": 10.0,
                  "scenario": {"density_rel_sigma": 0.0, "alpha_rel_sigma": 0.0, "truncation": 0.2}},
    "duality": {"tolerance": 0.05, "pde_medium": None},
}

# fields that may be null; everything else must match its default's type
_NULLABLE = {"mesh.e_max", "bank.energies", "bank.sigmas", "optimizer.g_max", "duality.pde_medium"}


class ConfigValidationError(ValueError):
    """All problems found in a configuration, one per line."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass
class RunConfig:
    """A validated configuration plus the objects built from it."""

    tree: dict
    source_path: str | None
    media: dict[str, Medium]
    phantom: Phantom
    domain: SpatialDomain
    window: EnergyWindow
    source: Source
    xs: CrossSections
    sim: SimConfig
    grid: Grid
    bank: BeamBank
    prescription: Prescription
    opt: OptConfig
    extras: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.sim.seed

    @property
    def q_factor(self) -> float:
        return float(self.tree["q_factor"])

    @property
    def output(self) -> str:
        return str(self.tree["output"])

    @property
    def model(self) -> TransportModel:
        return TransportModel(self.phantom, self.domain, self.window, self.xs)

    @property
    def sha256(self) -> str:
        return config_hash(self.tree)


def config_hash(tree: dict) -> str:
    """SHA-256 of the canonical JSON form of the effective tree."""
    text = json.dumps(tree, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# -- parsing -------------------------------------------------------------------

def _line_map(node, path: str = "", out: dict | None = None) -> dict[str, int]:
    """Map dotted paths to 1-based source lines of a composed YAML node tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = f"{path}.{k.value}" if path else str(k.value)
            out[p] = k.start_mark.line + 1
            _line_map(v, p, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            p = f"{path}.{i}"
            out[p] = v.start_mark.line + 1
            _line_map(v, p, out)
    return out


def parse_text(text: str, name: str = "<config>") -> tuple[dict, dict[str, int]]:
    try:
        data = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{name}:{mark.line + 1}:{mark.column + 1}" if mark else name
        raise ConfigValidationError([f"{where}: parse error: {getattr(exc, 'problem', None) or exc}"]) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigValidationError([f"{name}: top level must be a mapping"])
    return data, _line_map(node) if node is not None else {}


def apply_override(tree: dict, assignment: str) -> None:
    """Apply one ``dotted.path=value`` override; the value is read as YAML."""
    if "=" not in assignment:
        raise ConfigValidationError([f"--set {assignment!r}: expected path=value"])
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    if not all(keys):
        raise ConfigValidationError([f"--set {assignment!r}: empty path component"])
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigValidationError([f"--set {path}: cannot parse value: {exc}"]) from None
    node = tree
    for k in keys[:-1]:
        if isinstance(node, list):
            if not k.isdigit() or int(k) >= len(node):
                raise ConfigValidationError([f"--set {path}: no list element {k}"])
            node = node[int(k)]
        else:
            node = node.setdefault(k, {})
            if not isinstance(node, (dict, list)):
                raise ConfigValidationError([f"--set {path}: {k} is not a section"])
    last = keys[-1]
    if isinstance(node, list):
        if not last.isdigit() or int(last) >= len(node):
            raise ConfigValidationError([f"--set {path}: no list element {last}"])
        node[int(last)] = value
    else:
        node[last] = value


def _seed_defaults(tree: dict, defaults: dict) -> None:
    """Insert missing sections so overrides can address default list items."""
    for k, d in defaults.items():
        if k not in tree:
            tree[k] = copy.deepcopy(d)
        elif isinstance(d, dict) and isinstance(tree[k], dict) and d:
            _seed_defaults(tree[k], d)


def _merge(defaults: Any, given: Any, path: str, errors: list[str]) -> Any:
    """Fill defaults into ``given`` and flag unknown keys and type mismatches."""
    if isinstance(defaults, dict) and defaults and not _is_open(path):
        if not isinstance(given, dict):
            errors.append(f"{path}: expected a mapping")
            return copy.deepcopy(defaults)
        out = {}
        for k in given:
            if k not in defaults:
                errors.append(f"{_join(path, k)}: unknown field")
        for k, d in defaults.items():
            out[k] = _merge(d, given[k], _join(path, k), errors) if k in given else copy.deepcopy(d)
        return out
    if given is None:
        if defaults is None or path in _NULLABLE:
            return None
        errors.append(f"{path}: must not be empty")
        return copy.deepcopy(defaults)
    if defaults is None or isinstance(defaults, (dict, list)):
        return given
    if isinstance(defaults, bool):
        ok = isinstance(given, bool)
    elif isinstance(defaults, int):
        ok = isinstance(given, int) and not isinstance(given, bool)
    elif isinstance(defaults, float):
        given = _as_float(given)
        ok = isinstance(given, (int, float)) and not isinstance(given, bool)
        given = float(given) if ok else given
    else:
        ok = isinstance(given, type(defaults))
    if not ok:
        errors.append(f"{path}: expected {type(defaults).__name__}, got {given!r}")
        return copy.deepcopy(defaults)
    return given


def _as_float(value):
    # YAML 1.1 reads exponent forms such as 1e-8 as strings
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def _is_open(path: str) -> bool:
    # sections whose keys are user-chosen names
    return path in ("media", "scattering.media")


def _join(path: str, key) -> str:
    return f"{path}.{key}" if path else str(key)


def _items(tree: dict, path: str, template: dict, errors: list[str]) -> list[dict]:
    """Merge every element of a list section against ``template``."""
    node = tree
    for k in path.split("."):
        node = node[k]
    if not isinstance(node, list) or not node:
        errors.append(f"{path}: expected a non-empty list")
        return []
    out = [_merge(template, item, f"{path}.{i}", errors) for i, item in enumerate(node)]
    node[:] = out
    return out


def _named(tree: dict, path: str, template: dict, errors: list[str]) -> dict[str, dict]:
    node = tree
    for k in path.split("."):
        node = node[k]
    if not isinstance(node, dict):
        errors.append(f"{path}: expected a mapping of names")
        return {}
    for name in list(node):
        node[name] = _merge(template, node[name], f"{path}.{name}", errors)
    return node


def _field_errors(prefix: str, messages: list[str], names) -> list[str]:
    """Attach a field path to messages that start with a field name."""
    out = []
    for msg in messages:
        first = msg.split()[0] if msg else ""
        out.append(f"{prefix}.{first}: {msg}" if first in names else f"{prefix}: {msg}")
    return out


# -- building ------------------------------------------------------------------

def _build_media(tree: dict, errors: list[str]) -> dict[str, Medium]:
    media = dict(BUILTIN_MEDIA)
    given = tree["media"]
    if not isinstance(given, dict):
        errors.append("media: expected a mapping of names")
        return media
    for name, spec in given.items():
        path = f"media.{name}"
        if not isinstance(spec, dict):
            errors.append(f"{path}: expected a mapping")
            continue
        base = BUILTIN_MEDIA.get(name)
        vals = {}
        for k in spec:
            if k not in _MEDIUM:
                errors.append(f"{path}.{k}: unknown field")
        for k in _MEDIUM:
            v = _as_float(spec.get(k, getattr(base, k, None) if base else (1.0 if k == "e_screen" else None)))
            if v is None:
                errors.append(f"{path}.{k}: required for a new medium")
            elif isinstance(v, bool) or not isinstance(v, (int, float)):
                errors.append(f"{path}.{k}: expected a number, got {v!r}")
            else:
                vals[k] = float(v)
        if len(vals) != len(_MEDIUM):
            continue
        probe = object.__new__(Medium)
        for k, v in dict(name=name, **vals).items():
            object.__setattr__(probe, k, v)
        msgs = probe.validate()
        if msgs:
            errors.extend(_field_errors(path, msgs, _MEDIUM))
            continue
        media[name] = Medium(name, **vals)
        spec.update(vals)
    return media


def _try(errors: list[str], path: str, fn, *args, names=(), **kw):
    try:
        return fn(*args, **kw)
    except ValueError as exc:
        errors.extend(_field_errors(path, [m.strip() for m in str(exc).split(";")], names))
        return None


def build(tree: dict, source_path: str | None = None, lines: dict[str, int] | None = None) -> RunConfig:
    """Validate a raw tree (already overridden) and build the run objects."""
    errors: list[str] = []
    raw_media = copy.deepcopy(tree.get("media", {}) or {})
    raw_xs_media = copy.deepcopy((tree.get("scattering") or {}).get("media", {}) or {}) \
        if isinstance(tree.get("scattering"), dict) else {}
    tree = _merge(DEFAULTS, tree, "", errors)
    tree["media"] = raw_media
    tree["scattering"]["media"] = raw_xs_media
    layers = _items(tree, "domain.layers", _LAYER, errors)
    beams = _items(tree, "source.beams", _BEAM, errors)
    xs_specs = _named(tree, "scattering.media", _XS, errors)

    media = _build_media(tree, errors)

    def medium_ref(name, path):
        if name not in media:
            errors.append(f"{path}: unknown medium {name!r}")
            return None
        return media[name]

    win_spec = tree["window"]
    window = _try(errors, "window", EnergyWindow, win_spec["e_min"], win_spec["e_max"], names=win_spec)

    dom = tree["domain"]
    domain = None
    if dom["kind"] == "slab-1d":
        domain = _try(errors, "domain", SpatialDomain.slab, dom["length"])
    elif dom["kind"] == "box-3d":
        domain = _try(errors, "domain", SpatialDomain.box, dom["width"], dom["height"], dom["length"])
    else:
        errors.append(f"domain.kind: must be 'slab-1d' or 'box-3d' (got {dom['kind']!r})")

    layer_media = [medium_ref(lay["medium"], f"domain.layers.{i}.medium") for i, lay in enumerate(layers)]
    phantom = None
    if layers and all(m is not None for m in layer_media):
        for i, lay in enumerate(layers):
            if not 0 <= lay["start"] < dom["length"]:
                errors.append(f"domain.layers.{i}.start: must lie in [0, domain.length)")
        phantom = _try(errors, "domain.layers", Phantom.layered, [(lay["start"], m) for lay, m in zip(layers, layer_media)])

    beam_objs = []
    for i, b in enumerate(beams):
        path = f"source.beams.{i}"
        obj = _try(errors, path, Beam, b["energy"], b["sigma"], b["weight"], tuple(b["position"]),
                   tuple(b["direction"]), b["lateral_sigma"])
        if obj is None:
            continue
        if window is not None and not window.e_min < b["energy"] <= window.e_max:
            errors.append(f"{path}.energy: {b['energy']} MeV lies outside the window "
                          f"({window.e_min}, {window.e_max}]")
        beam_objs.append(obj)
    source = _try(errors, "source", Source, tuple(beam_objs)) if len(beam_objs) == len(beams) and beams else None

    xs = None
    sc = tree["scattering"]
    if phantom is not None:
        for name in xs_specs:
            if name not in media:
                errors.append(f"scattering.media.{name}: unknown medium {name!r}")
        kernels, se, sne = [], [], []
        for i, m in enumerate(phantom.media):
            spec = xs_specs.get(m.name, _XS)
            k = _try(errors, f"scattering.media.{m.name}", KernelParams, spec["kappa_e"], spec["kappa_ne"],
                     spec["ne_frac_min"], spec["ne_frac_max"], names=spec)
            kernels.append(k or KernelParams())
            se.append(spec["sigma_e"])
            sne.append(spec["sigma_ne"])
        xs = _try(errors, "scattering", CrossSections, phantom, tuple(se), tuple(sne), tuple(kernels),
                  sc["e_ref"], sc["q_e"], sc["q_ne"])

    seed = tree["seed"]
    sim_spec = tree["simulation"]
    sim = None
    if not 0 <= seed < 2**64:
        errors.append("seed: must be a 64-bit unsigned integer")
    else:
        probe = object.__new__(SimConfig)
        for k, v in dict(sim_spec, seed=seed).items():
            object.__setattr__(probe, k, v)
        msgs = probe.validate()
        if msgs:
            errors.extend(_field_errors("simulation", msgs, sim_spec))
        else:
            sim = SimConfig(seed=seed, **sim_spec)
    if sim is not None and sim.mode == "1d" and dom["kind"] != "slab-1d":
        errors.append("simulation.mode: '1d' needs domain.kind 'slab-1d'")

    tal = tree["tally"]
    grid = None
    if tal["dose_method"] not in ("mean", "center"):
        errors.append("tally.dose_method: must be 'mean' or 'center'")
    for k in ("n_z", "n_e", "n_angles"):
        if tal[k] < 1:
            errors.append(f"tally.{k}: must be >= 1")
    if window is not None and domain is not None and min(tal["n_z"], tal["n_e"], tal["n_angles"]) >= 1:
        grid = Grid.uniform(domain.length, tal["n_z"], window.e_min, window.e_max, tal["n_e"], tal["n_angles"])

    mesh = tree["mesh"]
    if not mesh["dz"] > 0:
        errors.append("mesh.dz: must be > 0")
    if not 0 < mesh["cfl_limit"] <= 1:
        errors.append("mesh.cfl_limit: must lie in (0, 1]")
    if mesh["e_max"] is not None and window is not None and not window.e_min < mesh["e_max"] <= window.e_max:
        errors.append("mesh.e_max: must lie in (window.e_min, window.e_max]")
    if not tree["q_factor"] > 0:
        errors.append("q_factor: must be > 0")

    bank_spec = tree["bank"]
    bank = None
    bank_medium = medium_ref(bank_spec["medium"], "bank.medium")
    if bank_spec["energies"] is not None:
        energies = bank_spec["energies"]
        sigmas = bank_spec["sigmas"] if bank_spec["sigmas"] is not None else [0.0] * len(energies)
        if not isinstance(energies, list) or not isinstance(sigmas, list):
            errors.append("bank.energies: energies and sigmas must be lists")
        else:
            bank = _try(errors, "bank", BeamBank, tuple(energies), tuple(sigmas))
    elif bank_medium is not None:
        if not 0 < bank_spec["z_lo"] <= bank_spec["z_hi"]:
            errors.append("bank.z_lo: need 0 < z_lo <= z_hi")
        elif bank_spec["n_beams"] < 0:
            errors.append("bank.n_beams: must be >= 0")
        elif bank_spec["rel_sigma"] < 0:
            errors.append("bank.rel_sigma: must be >= 0")
        else:
            bank = BeamBank.spanning(bank_medium, bank_spec["z_lo"], bank_spec["z_hi"], bank_spec["n_beams"],
                                     bank_spec["rel_sigma"])
    if bank is not None and window is not None and bank.n_beams:
        outside = [k for k, e in enumerate(bank.energies) if not window.e_min < e <= window.e_max]
        if outside:
            errors.append(f"bank: {len(outside)} beam energies lie outside the window "
                          f"({window.e_min}, {window.e_max}] (first: beam {outside[0]}, "
                          f"{bank.energies[outside[0]]:.6g} MeV)")

    pre = tree["prescription"]
    prescription = None
    for k in ("level", "w_in", "w_out"):
        if pre[k] < 0:
            errors.append(f"prescription.{k}: must be >= 0")
    if domain is not None and min(pre["level"], pre["w_in"], pre["w_out"]) >= 0:
        n_bins = int(round(domain.length / pre["bin_width"])) if pre["bin_width"] > 0 else 0
        if n_bins < 1 or abs(n_bins * pre["bin_width"] - domain.length) > 1e-9 * domain.length:
            errors.append("prescription.bin_width: must be > 0 and divide domain.length")
        elif not 0 <= pre["z_lo"] < pre["z_hi"] <= domain.length:
            errors.append("prescription.z_lo: need 0 <= z_lo < z_hi <= domain.length")
        else:
            z_edges = np.linspace(0.0, domain.length, n_bins + 1)
            prescription = _try(errors, "prescription", Prescription.target_box, z_edges, pre["z_lo"],
                                pre["z_hi"], pre["level"], pre["w_in"], pre["w_out"])

    o = tree["optimizer"]
    opt = None
    scen = _try(errors, "optimizer.scenario", ScenarioParams, **o["scenario"], names=o["scenario"])
    if o["influence"] not in ("mc", "pde"):
        errors.append("optimizer.influence: must be 'mc' or 'pde'")
    if o["gradient"] not in ("influence", "adjoint"):
        errors.append("optimizer.gradient: must be 'influence' or 'adjoint'")
    if o["g_max"] is not None and not (isinstance(o["g_max"], (int, float)) and o["g_max"] > 0):
        errors.append("optimizer.g_max: must be a positive number or null")
    if not o["g_max_factor"] > 0:
        errors.append("optimizer.g_max_factor: must be > 0")
    opt_fields = {k: v for k, v in o.items() if k not in ("influence", "gradient", "g_max", "g_max_factor", "scenario")}
    if scen is not None:
        probe = object.__new__(OptConfig)
        for k, v in dict(opt_fields, scenario=scen).items():
            object.__setattr__(probe, k, v)
        msgs = probe.validate()
        if msgs:
            errors.extend(_field_errors("optimizer", msgs, opt_fields))
        else:
            opt = OptConfig(scenario=scen, **opt_fields)

    dual = tree["duality"]
    if not 0 < dual["tolerance"]:
        errors.append("duality.tolerance: must be > 0")
    if dual["pde_medium"] is not None:
        medium_ref(dual["pde_medium"], "duality.pde_medium")

    if errors:
        raise ConfigValidationError([_locate(e, lines, source_path) for e in errors])
    return RunConfig(tree, source_path, media, phantom, domain, window, source, xs, sim, grid, bank,
                     prescription, opt)


def _locate(error: str, lines: dict[str, int] | None, source_path: str | None) -> str:
    """Prefix an error with ``file:line`` when its field appears in the file."""
    if not lines:
        return error
    path = error.split(":", 1)[0]
    while path:
        if path in lines:
            return f"{source_path or '<config>'}:{lines[path]}: {error}"
        path = path.rpartition(".")[0]
    return error


def load_config(path=None, overrides=(), text: str | None = None) -> RunConfig:
    """Read, override and validate a configuration.

    ``path`` may be None (defaults only) and ``text`` replaces reading the file.
    Raises :class:`ConfigValidationError` listing every problem found.
    """
    name = str(path) if path is not None else "<config>"
    if text is None and path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigValidationError([f"{name}: cannot read: {exc.strerror}"]) from None
    tree, lines = parse_text(text or "", name)
    _seed_defaults(tree, DEFAULTS)
    for assignment in overrides:
        apply_override(tree, assignment)
    return build(tree, name, lines)
