"""Experiment configuration: YAML documents layered over packaged defaults."""
import copy
import functools
import math
import re
from importlib import resources

import yaml


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = f"{path or '<config>'}:{line}: " if line else (f"{path}: " if path else "")
        super().__init__(where + message)


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 wants "1.0e+9"; accept the 1e9 / 1.5e-6 spellings people actually type
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?|\.[0-9_]+)[eE][-+]?[0-9]+$"),
    list("-+0123456789."),
)


def _record_lines(node, path, lines):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        seen = set()
        for key_node, value_node in node.value:
            key = key_node.value
            if key in seen:
                raise ConfigError(f"duplicate key {'.'.join(map(str, path + (key,)))!r}",
                                  line=key_node.start_mark.line + 1)
            seen.add(key)
            _record_lines(value_node, path + (key,), lines)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _record_lines(v, path + (i,), lines)


def parse_yaml(text, source=None):
    """Parse text into (data, {key path: 1-based line number})."""
    try:
        node = yaml.compose(text, Loader=_Loader)
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(str(getattr(exc, "problem", None) or exc), source,
                          mark.line + 1 if mark else None) from None
    lines = {}
    if node is None:
        return {}, lines
    try:
        _record_lines(node, (), lines)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], source, exc.line) from None
    return data, lines


@functools.lru_cache(maxsize=None)
def _defaults_text():
    return resources.files("loraserve").joinpath("defaults.yaml").read_text()


def default_config():
    data, _ = parse_yaml(_defaults_text(), "defaults.yaml")
    return data


def _type_ok(default, value):
    if default is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


# keys whose default is concrete but which also accept null
_NULLABLE = {("workload", "num_requests")}


def _merge(defaults, user, lines, source, prefix=()):
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        path = prefix + (key,)
        dotted = ".".join(map(str, path))
        if key not in defaults:
            raise ConfigError(f"unknown key {dotted!r}", source, lines.get(path))
        default = defaults[key]
        if isinstance(default, dict) and isinstance(value, dict):
            out[key] = _merge(default, value, lines, source, path)
        elif value is None and path in _NULLABLE:
            out[key] = None
        elif not _type_ok(default, value):
            raise ConfigError(
                f"{dotted} expects {type(default).__name__}, got {type(value).__name__} {value!r}",
                source, lines.get(path))
        else:
            out[key] = float(value) if isinstance(default, float) else value
    return out


_POSITIVE = {
    "cost_model": ["peak_flops", "mem_bw", "kernel_overhead", "step_kernel_overhead",
                   "layer_overhead", "pcie_bw", "layers", "attn_coeff", "proj_coeff",
                   "hidden_dim", "ffn_dim", "lora_rank"],
    "kvcache": ["page_size", "layers", "kv_heads", "head_dim", "total_pages"],
    "scheduler": ["max_batch", "lightly_loaded_threshold", "headroom_tokens"],
    "cluster": ["gpu_count", "gpu_memory"],
    "output": ["throughput_window"],
}


def validate(cfg, lines=None, source=None):
    """Semantic checks over a merged config; raises ConfigError."""
    lines = lines or {}

    def fail(path, msg):
        raise ConfigError(msg, source, lines.get(path) or lines.get(path[:1]))

    for group, keys in _POSITIVE.items():
        for key in keys:
            v = cfg[group][key]
            if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0):
                fail((group, key), f"{group}.{key} must be positive, got {v}")
    for group in ("cost_model", "kvcache"):
        if cfg[group]["elem_bytes"] not in (2, 4):
            fail((group, "elem_bytes"), f"{group}.elem_bytes must be 2 or 4")
    if cfg["scheduler"]["lightly_loaded_threshold"] is not None and \
            cfg["scheduler"]["lightly_loaded_threshold"] > cfg["scheduler"]["max_batch"]:
        fail(("scheduler", "lightly_loaded_threshold"), "threshold exceeds max_batch")
    for i, a in enumerate(cfg["cost_model"]["anchors"]):
        if not (isinstance(a, list) and len(a) == 3 and all(isinstance(x, (int, float)) and x > 0 for x in a)):
            fail(("cost_model", "anchors", i), "anchors entries are [batch_size, seq_len, seconds]")

    wl = cfg["workload"]
    if wl["popularity"] not in ("distinct", "uniform", "skewed", "identical"):
        fail(("workload", "popularity"), f"unknown popularity {wl['popularity']!r}")
    if wl["alpha"] <= 1:
        fail(("workload", "alpha"), "workload.alpha must exceed 1")
    if wl["num_requests"] is not None and wl["num_requests"] < 0:
        fail(("workload", "num_requests"), "num_requests must be >= 0")
    arr = wl["arrival"]
    if arr["kind"] == "poisson":
        if not arr["rate"] > 0:
            fail(("workload", "arrival", "rate"), "arrival rate must be positive")
        if wl["num_requests"] is None:
            fail(("workload", "num_requests"), "poisson arrivals need num_requests")
    elif arr["kind"] == "ramp":
        prof = arr["profile"]
        if not isinstance(prof, list) or len(prof) < 2:
            fail(("workload", "arrival", "profile"), "ramp profile needs >= 2 [t, rate] points")
        for i, pt in enumerate(prof):
            ok = isinstance(pt, list) and len(pt) == 2 and all(
                isinstance(x, (int, float)) and not isinstance(x, bool) for x in pt)
            if not ok or pt[0] < 0 or pt[1] < 0 or (i and pt[0] <= prof[i - 1][0]):
                fail(("workload", "arrival", "profile", i),
                     "profile points are [t, rate] with increasing t and rate >= 0")
        if not any(pt[1] > 0 for pt in prof):
            fail(("workload", "arrival", "profile"), "ramp profile has zero rate everywhere")
    elif arr["kind"] == "trace":
        tr = arr["trace"]
        if not isinstance(tr, list) or not all(isinstance(t, (int, float)) and t >= 0 for t in tr):
            fail(("workload", "arrival", "trace"), "trace must be a list of times >= 0")
    else:
        fail(("workload", "arrival", "kind"), f"unknown arrival kind {arr['kind']!r}")
    fixed = wl["lengths"]["fixed"]
    if fixed is not None and not (isinstance(fixed, list) and len(fixed) == 2
                                  and all(isinstance(x, int) and x >= 1 for x in fixed)):
        fail(("workload", "lengths", "fixed"), "fixed lengths are [prompt_len, output_len] >= 1")
    if cfg["cluster"]["reserved_memory"] < 0 or \
            cfg["cluster"]["reserved_memory"] >= cfg["cluster"]["gpu_memory"]:
        fail(("cluster", "reserved_memory"), "reserved_memory must be in [0, gpu_memory)")
    if cfg["kvcache"]["total_pages"] is None and _derived_pages(cfg) < 1:
        fail(("cluster", "gpu_memory"), "GPU memory leaves no room for a single KvCache page")
    return cfg


def _derived_pages(cfg):
    kv = cfg["kvcache"]
    page_bytes = kv["layers"] * 2 * kv["kv_heads"] * kv["page_size"] * kv["head_dim"] * kv["elem_bytes"]
    free = cfg["cluster"]["gpu_memory"] - cfg["cluster"]["reserved_memory"]
    return int(math.floor(free / page_bytes))


def total_pages(cfg):
    tp = cfg["kvcache"]["total_pages"]
    return int(tp) if tp is not None else _derived_pages(cfg)


def load_config(path=None, text=None, overrides=None):
    """Merge a user document (file or text) and optional dict over the defaults."""
    cfg = default_config()
    lines, source = {}, None
    if path is not None:
        source = str(path)
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", source) from None
    if text is not None:
        user, lines = parse_yaml(text, source)
        if not isinstance(user, dict):
            raise ConfigError("top level must be a mapping", source, 1)
        cfg = _merge(cfg, user, lines, source)
    if overrides:
        cfg = _merge(cfg, overrides, {}, source)
    return validate(cfg, lines, source)
