"""Experiment configuration: YAML file + CLI overrides, validated up front.

A complete annotated example lives in ``configs/example.yaml`` of the
repository.  Unknown keys are rejected so typos surface early.
"""
import copy
import math
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from prguide.guidance import MODES
from prguide.schedule import SCHEDULE_KINDS

OUTPUT_ENV = "PRGUIDE_OUTPUT_ROOT"

DEFAULTS = {
    "scenario": {
        "kind": "toy",
        "shape": [4, 4, 4],
        "seed": 2025,
        "amplitude": 1.0,
        "variance": 0.1,
        "subject_weight": 0.5,
        "identity_shift": 0.5,
        "n_references": 5,
        "style_jitter": 0.25,
    },
    "condition": {"label": 0, "subject": 0},
    "sampling": {
        "modes": ["CFG", "CG", "PR"],
        "omega_text": 7.5,
        "omega_cons": 3.0,
        "steps": 50,
        "eta": 0.0,
        "schedule": "cosine",
        "eps_std": 1e-8,
        "eps_proj": 1e-12,
        "seeds": [0, 1, 2, 3],
        "n_bins": 60,
        "half_range": 3.0,
    },
    "output": {"dir": None},
}

TRAIN_DEFAULTS = {
    "scenario": copy.deepcopy(DEFAULTS["scenario"]),
    "data": {"n_samples": 512, "seed": 0},
    "training": {
        "hidden_layer_sizes": [128, 128],
        "activation": "silu",
        "prediction": "v",
        "n_steps": 2000,
        "learning_rate": 1e-3,
        "batch_size": 128,
        "p_uncond": 0.1,
        "random_state": 0,
        "schedule_steps": 50,
    },
    "finetune": {"n_steps": 300, "learning_rate": 5e-4, "batch_size": 64, "random_state": 0},
    "condition": {"label": 0, "subject": 0},
    "output": {"dir": None},
}

_SCENARIO_KEYS = {
    "toy": {"kind", "shape", "seed", "amplitude", "variance", "subject_weight", "identity_shift", "n_references", "style_jitter"},
    "gmm": {"kind", "components", "subject", "references", "n_references", "seed"},
    "files": {"kind", "base_model", "personalized_model", "references", "reference_model"},
}


class ConfigError(ValueError):
    """Invalid configuration; ``str()`` includes file and line when known."""

    def __init__(self, message, source=None, line=None):
        self.message, self.source, self.line = message, source, line
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


def _line_map(text):
    """Map key paths (tuples) to 1-based line numbers using the YAML node tree."""
    lines = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                sub = path + (key.value,)
                lines[sub] = key.start_mark.line + 1
                walk(value, sub)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                lines[path + (i,)] = item.start_mark.line + 1
                walk(item, path + (i,))

    root = yaml.compose(text)
    if root is not None:
        walk(root, ())
    return lines


def _merge(base, override, path, ctx):
    for key, value in override.items():
        if key not in base:
            ctx.fail(f"unknown key '{'.'.join(map(str, path + (key,)))}'", path + (key,))
        if isinstance(base[key], dict) and key != "scenario":
            if not isinstance(value, dict):
                ctx.fail(f"'{'.'.join(map(str, path + (key,)))}' must be a mapping", path + (key,))
            _merge(base[key], value, path + (key,), ctx)
        else:
            base[key] = value


class _Context:
    def __init__(self, source=None, lines=None):
        self.source = source
        self.lines = lines or {}

    def fail(self, message, path=()):
        line = None
        while path and line is None:
            line = self.lines.get(tuple(path))
            path = path[:-1]
        raise ConfigError(message, self.source, line)


@dataclass
class ExperimentConfig:
    """Validated configuration; ``raw`` is the resolved tree used in manifests."""

    raw: dict
    base_dir: Path

    @property
    def scenario(self):
        return self.raw["scenario"]

    @property
    def sampling(self):
        return self.raw["sampling"]

    @property
    def condition(self):
        return self.raw["condition"]

    @property
    def output_dir(self):
        return Path(self.raw["output"]["dir"])


def _read(path, defaults):
    tree = copy.deepcopy(defaults)
    if path is None:
        return tree, _Context(), Path.cwd()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config ({exc.strerror})", str(path)) from exc
    try:
        data = yaml.safe_load(text)
        ctx = _Context(str(path), _line_map(text))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(
            f"YAML syntax error: {getattr(exc, 'problem', exc)}", str(path), mark.line + 1 if mark else None
        ) from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", str(path), 1)
    if "scenario" in data:
        if not isinstance(data["scenario"], dict):
            ctx.fail("'scenario' must be a mapping", ("scenario",))
        kind = data["scenario"].get("kind", "toy")
        if kind == "toy":
            tree["scenario"].update(data["scenario"])
        else:
            tree["scenario"] = dict(data["scenario"])
    _merge(tree, {k: v for k, v in data.items() if k != "scenario"}, (), ctx)
    return tree, ctx, path.parent


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _validate_scenario(sc, ctx):
    kind = sc.get("kind")
    if kind not in _SCENARIO_KEYS:
        ctx.fail(f"scenario.kind must be one of {sorted(_SCENARIO_KEYS)}, got {kind!r}", ("scenario", "kind"))
    for key in sc:
        if key not in _SCENARIO_KEYS[kind]:
            ctx.fail(f"unknown key 'scenario.{key}' for kind '{kind}'", ("scenario", key))
    if kind == "toy":
        shape = sc["shape"]
        if not (isinstance(shape, list) and len(shape) == 3 and all(_is_int(s) and s >= 1 for s in shape)):
            ctx.fail("scenario.shape must be three positive integers [C, W, H]", ("scenario", "shape"))
        if shape[0] % 2:
            ctx.fail("toy scenario needs an even channel count", ("scenario", "shape"))
        for key in ("amplitude", "variance"):
            if not (_is_number(sc[key]) and sc[key] > 0):
                ctx.fail(f"scenario.{key} must be a positive number", ("scenario", key))
        if not (_is_number(sc["subject_weight"]) and 0 < sc["subject_weight"] < 1):
            ctx.fail("scenario.subject_weight must lie in (0, 1)", ("scenario", "subject_weight"))
        if not (_is_number(sc["style_jitter"]) and sc["style_jitter"] >= 0):
            ctx.fail("scenario.style_jitter must be a number >= 0", ("scenario", "style_jitter"))
        if not _is_number(sc["identity_shift"]):
            ctx.fail("scenario.identity_shift must be a number", ("scenario", "identity_shift"))
        for key in ("seed", "n_references"):
            if not (_is_int(sc[key]) and sc[key] >= (1 if key == "n_references" else 0)):
                ctx.fail(f"scenario.{key} must be a non-negative integer", ("scenario", key))
    elif kind == "gmm":
        comps = sc.get("components")
        if not isinstance(comps, list) or not comps:
            ctx.fail("scenario.components must be a non-empty list", ("scenario", "components"))
        for i, comp in enumerate(comps):
            if not isinstance(comp, dict) or not {"weight", "variance", "label", "mean"} <= set(comp):
                ctx.fail("each component needs weight, variance, label and mean", ("scenario", "components", i))
        subj = sc.get("subject")
        if subj is not None and (not isinstance(subj, dict) or not {"mean", "weight"} <= set(subj)):
            ctx.fail("scenario.subject needs at least mean and weight", ("scenario", "subject"))
    else:
        for key in ("base_model", "personalized_model"):
            if key not in sc or not isinstance(sc[key], str):
                ctx.fail(f"scenario.{key} must be a path", ("scenario", key))


def _validate_sampling(sm, ctx):
    modes = sm["modes"]
    if isinstance(modes, str):
        modes = sm["modes"] = [modes]
    if not isinstance(modes, list) or not modes or any(m not in MODES for m in modes):
        ctx.fail(f"sampling.modes must be a non-empty list drawn from {list(MODES)}", ("sampling", "modes"))
    if len(set(modes)) != len(modes):
        ctx.fail("sampling.modes contains duplicates", ("sampling", "modes"))
    for key in ("omega_text", "omega_cons"):
        if not (_is_number(sm[key]) and sm[key] >= 0):
            ctx.fail(f"sampling.{key} must be a finite number >= 0", ("sampling", key))
    if "PR" in modes and sm["omega_text"] == 0:
        ctx.fail("PR mode needs sampling.omega_text > 0", ("sampling", "omega_text"))
    if not (_is_int(sm["steps"]) and sm["steps"] >= 1):
        ctx.fail("sampling.steps must be a positive integer", ("sampling", "steps"))
    if not (_is_number(sm["eta"]) and 0 <= sm["eta"] <= 1):
        ctx.fail("sampling.eta must lie in [0, 1]", ("sampling", "eta"))
    if sm["schedule"] not in SCHEDULE_KINDS:
        ctx.fail(f"sampling.schedule must be one of {list(SCHEDULE_KINDS)}", ("sampling", "schedule"))
    for key in ("eps_std", "eps_proj", "half_range"):
        if not (_is_number(sm[key]) and sm[key] > 0):
            ctx.fail(f"sampling.{key} must be a positive number", ("sampling", key))
    if not (_is_int(sm["n_bins"]) and sm["n_bins"] >= 1):
        ctx.fail("sampling.n_bins must be a positive integer", ("sampling", "n_bins"))
    seeds = sm["seeds"]
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = sm["seeds"] = [seeds]
    if not isinstance(seeds, list) or not seeds or any(not (_is_int(s) and s >= 0) for s in seeds):
        ctx.fail("sampling.seeds must be a non-empty list of non-negative integers", ("sampling", "seeds"))


def validate_sampling(sampling, source=None):
    """Validate a resolved ``sampling`` mapping in place."""
    _validate_sampling(sampling, _Context(source))


def _validate_condition(cond, ctx):
    if cond.get("label") is not None and not (_is_int(cond["label"]) and cond["label"] >= 0):
        ctx.fail("condition.label must be a non-negative integer or null", ("condition", "label"))
    if cond.get("subject") is not None:
        if not (_is_int(cond["subject"]) and cond["subject"] >= 0):
            ctx.fail("condition.subject must be a non-negative integer or null", ("condition", "subject"))
        if cond.get("label") is None:
            ctx.fail("condition.subject requires condition.label", ("condition", "subject"))


def _resolve_output(tree, out_override):
    if out_override is not None:
        tree["output"]["dir"] = str(out_override)
    elif tree["output"]["dir"] is None:
        tree["output"]["dir"] = os.environ.get(OUTPUT_ENV, "runs")


def load_config(path=None, overrides=None, out=None):
    """Read, merge and validate a sampling configuration.

    ``overrides`` maps ``sampling`` keys to values coming from CLI flags and
    wins over the file.
    """
    tree, ctx, base_dir = _read(path, DEFAULTS)
    for key, value in (overrides or {}).items():
        if value is not None:
            tree["sampling"][key] = value
    _validate_scenario(tree["scenario"], ctx)
    _validate_condition(tree["condition"], ctx)
    _validate_sampling(tree["sampling"], ctx)
    _resolve_output(tree, out)
    return ExperimentConfig(raw=tree, base_dir=base_dir)


def load_train_config(path=None, out=None):
    tree, ctx, base_dir = _read(path, TRAIN_DEFAULTS)
    if tree["scenario"].get("kind") != "toy":
        ctx.fail("train-toy draws its data from a toy scenario (scenario.kind: toy)", ("scenario", "kind"))
    _validate_scenario(tree["scenario"], ctx)
    _validate_condition(tree["condition"], ctx)
    if tree["condition"].get("label") is None or tree["condition"].get("subject") is None:
        ctx.fail("train-toy needs condition.label and condition.subject", ("condition",))
    d = tree["data"]
    if not (_is_int(d["n_samples"]) and d["n_samples"] >= 1):
        ctx.fail("data.n_samples must be a positive integer", ("data", "n_samples"))
    if not (_is_int(d["seed"]) and d["seed"] >= 0):
        ctx.fail("data.seed must be a non-negative integer", ("data", "seed"))
    tr = tree["training"]
    sizes = tr["hidden_layer_sizes"]
    if not (isinstance(sizes, list) and sizes and all(_is_int(s) and s >= 1 for s in sizes)):
        ctx.fail("training.hidden_layer_sizes must be a list of positive integers", ("training", "hidden_layer_sizes"))
    for section in ("training", "finetune"):
        sec = tree[section]
        for key in ("n_steps", "batch_size", "random_state"):
            lo = 1 if key == "batch_size" else 0
            if not (_is_int(sec[key]) and sec[key] >= lo):
                ctx.fail(f"{section}.{key} must be an integer >= {lo}", (section, key))
        if not (_is_number(sec["learning_rate"]) and sec["learning_rate"] >= 0):
            ctx.fail(f"{section}.learning_rate must be a number >= 0", (section, "learning_rate"))
    if not (_is_int(tr["schedule_steps"]) and tr["schedule_steps"] >= 1):
        ctx.fail("training.schedule_steps must be a positive integer", ("training", "schedule_steps"))
    if tr["activation"] not in ("silu", "relu", "tanh"):
        ctx.fail("training.activation must be silu, relu or tanh", ("training", "activation"))
    if tr["prediction"] not in ("epsilon", "v"):
        ctx.fail("training.prediction must be epsilon or v", ("training", "prediction"))
    if not (_is_number(tr["p_uncond"]) and 0 <= tr["p_uncond"] <= 1):
        ctx.fail("training.p_uncond must lie in [0, 1]", ("training", "p_uncond"))
    _resolve_output(tree, out)
    return ExperimentConfig(raw=tree, base_dir=base_dir)
