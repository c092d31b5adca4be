"""Scenario files: one YAML document holding the network and training knobs.

Two ways to describe the network:

* ``intersections:`` lists every intersection with its lanes and phases;
  lanes name their downstream lane as ``<intersection>.<lane>``.
* ``grid:`` generates a rows x cols grid of four-approach intersections
  with two phases (north-south, east-west) and through routing.

Validation errors carry the line of the offending node.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .simcore import ConfigError, IntersectionSpec, LaneSpec
from .training import Scenario, TrainConfig

SCHEMA_VERSION = 1

INTERSECTION_KEYS = {"cycle_length", "yellow_seconds", "green_bounds", "n_max", "g_max"}
LANE_KEYS = {"saturation_rate", "arrival_rate", "free_flow_time", "length_capacity"}
TOP_KEYS = {"schema_version", "name", "horizon", "seed", "r_max", "defaults",
            "intersections", "grid", "train"}

# approach order inside every generated intersection
APPROACHES = ("N", "S", "E", "W")


class ScenarioError(ConfigError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source:
            where = f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class _Doc:
    """YAML data plus the 1-based line of every node, keyed by path."""

    def __init__(self, text: str, source: str | None = None):
        self.source = source
        self.lines: dict[tuple, int] = {}
        self._loader = yaml.SafeLoader("")
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ScenarioError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                                None if mark is None else mark.line + 1, source) from exc
        if node is None:
            raise ScenarioError("empty scenario file", 1, source)
        self.data = self._build(node, ())

    def _build(self, node: yaml.Node, path: tuple) -> Any:
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            out = {}
            for k, v in node.value:
                out[k.value] = self._build(v, path + (k.value,))
            return out
        if isinstance(node, yaml.SequenceNode):
            return [self._build(v, path + (i,)) for i, v in enumerate(node.value)]
        return self._loader.construct_object(node, deep=True)

    def line(self, path: tuple) -> int | None:
        while path not in self.lines and path:
            path = path[:-1]
        return self.lines.get(path)

    def error(self, path: tuple, message: str) -> ScenarioError:
        label = ".".join(str(p) for p in path)
        return ScenarioError(f"{label}: {message}" if label else message, self.line(path), self.source)


def _number(doc: _Doc, value: Any, path: tuple, kind=float, positive: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise doc.error(path, f"expected a number, got {value!r}")
    if kind is int and float(value) != int(value):
        raise doc.error(path, f"expected an integer, got {value!r}")
    v = kind(value)
    if positive and v <= 0:
        raise doc.error(path, "must be > 0")
    return v


def _check_keys(doc: _Doc, mapping: Any, allowed: set[str], path: tuple) -> dict:
    if not isinstance(mapping, dict):
        raise doc.error(path, "expected a mapping")
    for k in mapping:
        if k not in allowed:
            raise doc.error(path + (k,), f"unknown key (allowed: {', '.join(sorted(allowed))})")
    return mapping


def _intersection_kwargs(doc: _Doc, raw: dict, path: tuple) -> dict:
    out = {}
    for key in INTERSECTION_KEYS & raw.keys():
        p = path + (key,)
        if key == "green_bounds":
            gb = raw[key]
            if not isinstance(gb, list) or len(gb) != 2:
                raise doc.error(p, "expected [D_min, D_max]")
            out[key] = (_number(doc, gb[0], p + (0,), int), _number(doc, gb[1], p + (1,), int))
        else:
            out[key] = _number(doc, raw[key], p, int)
    return out


def _lane_kwargs(doc: _Doc, raw: dict, path: tuple) -> dict:
    out = {}
    for key in LANE_KEYS & raw.keys():
        kind = int if key in {"free_flow_time", "length_capacity"} else float
        out[key] = _number(doc, raw[key], path + (key,), kind)
    return out


def _explicit(doc: _Doc, raw: list, defaults: dict, lane_defaults: dict) -> tuple[IntersectionSpec, ...]:
    if not isinstance(raw, list) or not raw:
        raise doc.error(("intersections",), "expected a non-empty list")
    names: dict[str, int] = {}
    lane_names: list[dict[str, int]] = []
    for i, item in enumerate(raw):
        p = ("intersections", i)
        _check_keys(doc, item, INTERSECTION_KEYS | {"name", "position", "lanes", "phases"}, p)
        name = str(item.get("name", f"I{i}"))
        if name in names:
            raise doc.error(p + ("name",), f"duplicate intersection name {name!r}")
        names[name] = i
        lanes = item.get("lanes")
        if not isinstance(lanes, list) or not lanes:
            raise doc.error(p + ("lanes",), "expected a non-empty list of lanes")
        ln = {}
        for j, lane in enumerate(lanes):
            _check_keys(doc, lane, LANE_KEYS | {"name", "downstream"}, p + ("lanes", j))
            lname = str(lane.get("name", f"L{j}"))
            if lname in ln:
                raise doc.error(p + ("lanes", j, "name"), f"duplicate lane name {lname!r}")
            ln[lname] = j
        lane_names.append(ln)

    specs = []
    for i, item in enumerate(raw):
        p = ("intersections", i)
        lanes = []
        for j, lane in enumerate(item["lanes"]):
            lp = p + ("lanes", j)
            kw = {**lane_defaults, **_lane_kwargs(doc, lane, lp)}
            if "arrival_rate" not in kw:
                raise doc.error(lp, "missing arrival_rate")
            if "saturation_rate" not in kw:
                raise doc.error(lp, "missing saturation_rate")
            down = None
            if lane.get("downstream") is not None:
                ref = str(lane["downstream"])
                iname, _, lname = ref.partition(".")
                if iname not in names or lname not in lane_names[names[iname]]:
                    raise doc.error(lp + ("downstream",), f"unknown lane reference {ref!r}")
                down = (names[iname], lane_names[names[iname]][lname])
            try:
                lanes.append(LaneSpec(name=str(lane.get("name", f"L{j}")), downstream=down, **kw))
            except ConfigError as exc:
                raise doc.error(lp, str(exc)) from None
        phases_raw = item.get("phases")
        if not isinstance(phases_raw, list) or not phases_raw:
            raise doc.error(p + ("phases",), "expected a list of lane-name lists")
        phases = []
        for k, ph in enumerate(phases_raw):
            if not isinstance(ph, list):
                raise doc.error(p + ("phases", k), "expected a list of lane names")
            try:
                phases.append(tuple(lane_names[i][str(x)] for x in ph))
            except KeyError as exc:
                raise doc.error(p + ("phases", k), f"unknown lane {exc.args[0]!r}") from None
        pos = item.get("position", [0, i])
        if not isinstance(pos, list) or len(pos) != 2:
            raise doc.error(p + ("position",), "expected [row, col]")
        kw = {**defaults, **_intersection_kwargs(doc, item, p)}
        try:
            specs.append(IntersectionSpec(
                lanes=tuple(lanes), phases=tuple(phases), name=str(item.get("name", f"I{i}")),
                position=(_number(doc, pos[0], p + ("position", 0), int),
                          _number(doc, pos[1], p + ("position", 1), int)),
                **kw))
        except ConfigError as exc:
            raise doc.error(p, str(exc)) from None
    return tuple(specs)


def grid_intersections(
    rows: int,
    cols: int,
    ns_rate: float | list = 0.1,
    ew_rate: float | list = 0.1,
    internal_rate: float = 0.0,
    saturation_rate: float = 0.5,
    free_flow_time: int = 10,
    length_capacity: int = 60,
    missing: tuple[tuple[int, int], ...] = (),
    **intersection_kw,
) -> tuple[IntersectionSpec, ...]:
    """Grid of four-approach intersections with through routing, row-major.

    Lane ``N`` carries southbound traffic (arriving from the north), ``S``
    northbound, ``E`` westbound and ``W`` eastbound. A lane's external arrival
    rate is ``ns_rate``/``ew_rate`` at the network boundary and
    ``internal_rate`` where an upstream intersection feeds it. Rates may be
    given per row/column as lists. Positions in ``missing`` are left empty.
    """
    present = [(r, c) for r in range(rows) for c in range(cols) if (r, c) not in missing]
    if not present:
        raise ConfigError("grid has no intersections")
    index = {pos: i for i, pos in enumerate(present)}

    def rate(base, k):
        return base[k] if isinstance(base, (list, tuple)) else base

    # heading of each approach and the neighbour it feeds
    step = {"N": (1, 0), "S": (-1, 0), "E": (0, -1), "W": (0, 1)}
    specs = []
    for r, c in present:
        lanes = []
        for a in APPROACHES:
            dr, dc = step[a]
            upstream = (r - dr, c - dc)
            downstream = (r + dr, c + dc)
            boundary = upstream not in index
            base = rate(ns_rate, c) if a in "NS" else rate(ew_rate, r)
            lanes.append(LaneSpec(
                saturation_rate=saturation_rate,
                arrival_rate=base if boundary else internal_rate,
                free_flow_time=free_flow_time,
                length_capacity=length_capacity,
                name=a,
                downstream=(index[downstream], APPROACHES.index(a)) if downstream in index else None,
            ))
        specs.append(IntersectionSpec(lanes=tuple(lanes), phases=((0, 1), (2, 3)),
                                      name=f"R{r}C{c}", position=(r, c), **intersection_kw))
    return tuple(specs)


def _grid(doc: _Doc, raw: dict, defaults: dict, lane_defaults: dict) -> tuple[IntersectionSpec, ...]:
    p = ("grid",)
    _check_keys(doc, raw, {"rows", "cols", "ns_rate", "ew_rate", "internal_rate", "missing"}, p)
    for key in ("rows", "cols"):
        if key not in raw:
            raise doc.error(p, f"missing {key}")
    kw: dict[str, Any] = {}
    for key in ("ns_rate", "ew_rate"):
        v = raw.get(key, 0.1)
        if isinstance(v, list):
            kw[key] = [_number(doc, x, p + (key, i)) for i, x in enumerate(v)]
        else:
            kw[key] = _number(doc, v, p + (key,))
    kw["internal_rate"] = _number(doc, raw.get("internal_rate", 0.0), p + ("internal_rate",))
    missing = raw.get("missing", [])
    if not isinstance(missing, list):
        raise doc.error(p + ("missing",), "expected a list of [row, col]")
    kw["missing"] = tuple(tuple(int(x) for x in pos) for pos in missing)
    try:
        return grid_intersections(
            _number(doc, raw["rows"], p + ("rows",), int, positive=True),
            _number(doc, raw["cols"], p + ("cols",), int, positive=True),
            **kw, **lane_defaults, **defaults)
    except ConfigError as exc:
        raise doc.error(p, str(exc)) from None


def _train(doc: _Doc, raw: Any) -> TrainConfig:
    if raw is None:
        return TrainConfig()
    allowed = TrainConfig.field_names()
    _check_keys(doc, raw, allowed, ("train",))
    kw = dict(raw)
    if "hidden" in kw:
        kw["hidden"] = tuple(kw["hidden"])
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise doc.error(("train",), str(exc)) from None


def parse_scenario(text: str, source: str | None = None) -> Scenario:
    doc = _Doc(text, source)
    data = _check_keys(doc, doc.data, TOP_KEYS, ())
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise doc.error(("schema_version",), f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    raw_defaults = _check_keys(doc, data.get("defaults", {}) or {}, INTERSECTION_KEYS | {"lane"}, ("defaults",))
    defaults = _intersection_kwargs(doc, raw_defaults, ("defaults",))
    lane_raw = _check_keys(doc, raw_defaults.get("lane", {}) or {}, LANE_KEYS - {"arrival_rate"},
                           ("defaults", "lane"))
    lane_defaults = _lane_kwargs(doc, lane_raw, ("defaults", "lane"))
    if ("intersections" in data) == ("grid" in data):
        raise doc.error((), "give exactly one of 'intersections' or 'grid'")
    if "grid" in data:
        specs = _grid(doc, data["grid"], defaults, lane_defaults)
    else:
        specs = _explicit(doc, data["intersections"], defaults, lane_defaults)
    horizon = _number(doc, data.get("horizon", 3600), ("horizon",), int, positive=True)
    seed = _number(doc, data.get("seed", 0), ("seed",), int)
    train = _train(doc, data.get("train"))
    if "horizon" not in (data.get("train") or {}):
        train.horizon = horizon
    if "seed" not in (data.get("train") or {}):
        train.seed = seed
    return Scenario(
        intersections=specs,
        horizon=horizon,
        r_max=_number(doc, data.get("r_max", 1.0), ("r_max",), positive=True),
        seed=seed,
        name=str(data.get("name", "scenario")),
        train=train,
    )


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    if not path.exists():
        bundled = bundled_scenario_path(str(path))
        if bundled is None:
            raise FileNotFoundError(f"scenario not found: {path}")
        path = bundled
    return parse_scenario(path.read_text(encoding="utf-8"), str(path))


def bundled_scenario_path(name: str) -> Path | None:
    """Resolve a bundled scenario by stem, e.g. ``corridor2``."""
    stem = Path(name).stem
    ref = resources.files("coopsignal") / "scenarios" / f"{stem}.yaml"
    return Path(str(ref)) if ref.is_file() else None


def bundled_scenario(name: str) -> Scenario:
    path = bundled_scenario_path(name)
    if path is None:
        raise FileNotFoundError(f"no bundled scenario {name!r}")
    return load_scenario(path)
