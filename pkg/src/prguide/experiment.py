"""Run orchestration behind the CLI: scenarios, run directories, manifests."""
import copy
import csv
import hashlib
import json
from pathlib import Path

import numpy as np

import prguide
from prguide.config import ConfigError
from prguide.diagnostics import identity_score, prompt_alignment_score
from prguide.exceptions import FormatError, ParameterError
from prguide.grid import LatentGrid, ScalarField, load_grid, save_grid
from prguide.models.conditions import Condition
from prguide.models.gmm import GaussianMixtureModel, make_personalized
from prguide.models.serialization import load_model
from prguide.sampler import GuidedDDIMSampler, write_trace_csv
from prguide.scenario import Scenario, toy_scenario

SWEEP_AXES = ("omega_text", "omega_cons")


def condition_from(cfg_cond):
    return Condition(label=cfg_cond.get("label"), subject=cfg_cond.get("subject"))


def _grid_from_nested(value, where):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 3:
        raise ConfigError(f"{where} must be a nested [C][W][H] list")
    return LatentGrid(arr)


def _load_references(entries, base_dir):
    paths = []
    for entry in [entries] if isinstance(entries, str) else list(entries):
        p = base_dir / entry
        paths.extend(sorted(p.glob("*.lgrd")) if p.is_dir() else [p])
    if not paths:
        raise ConfigError("scenario.references matched no .lgrd files")
    return tuple(load_grid(p) for p in paths)


def build_scenario(config):
    """Instantiate models, condition and references described by ``config``."""
    sc = config.scenario
    cond = condition_from(config.condition)
    kind = sc["kind"]
    try:
        if kind == "toy":
            built = toy_scenario(
                shape=tuple(sc["shape"]), seed=sc["seed"], amplitude=sc["amplitude"],
                variance=sc["variance"], subject_weight=sc["subject_weight"],
                identity_shift=sc["identity_shift"], n_references=sc["n_references"],
                style_jitter=sc["style_jitter"],
            )
            return Scenario(built.base, built.personalized, cond, built.references, built.shape)
        if kind == "gmm":
            comps = sc["components"]
            base = GaussianMixtureModel(
                means=[_grid_from_nested(c["mean"], f"components[{i}].mean") for i, c in enumerate(comps)],
                weights=[c["weight"] for c in comps],
                variances=[c["variance"] for c in comps],
                labels=[c["label"] for c in comps],
            )
            personalized, references = None, ()
            subj = sc.get("subject")
            if subj is not None:
                mean = _grid_from_nested(subj["mean"], "subject.mean")
                personalized = make_personalized(
                    base, mean, subj["weight"], subj.get("label", cond.label or 0),
                    subject=subj.get("id", 0), subject_variance=subj.get("variance"),
                )
                if "references" in sc:
                    references = tuple(_grid_from_nested(r, "references[]") for r in sc["references"])
                else:
                    rng = np.random.default_rng(sc.get("seed", 0))
                    var = personalized.variances[-1]
                    noise = rng.standard_normal((sc.get("n_references", 5),) + mean.locations.shape)
                    references = tuple(LatentGrid.from_locations(mean.locations + np.sqrt(var) * n) for n in noise)
            return Scenario(base, personalized, cond, references, base.grid_shape)
        base = load_model(config.base_dir / sc["base_model"])
        personalized = load_model(config.base_dir / sc["personalized_model"])
        references = _load_references(sc["references"], config.base_dir) if "references" in sc else ()
        reference_model = None
        if "reference_model" in sc:
            reference_model = load_model(config.base_dir / sc["reference_model"])
        elif isinstance(base, GaussianMixtureModel):
            reference_model = base
        return Scenario(base, personalized, cond, references, tuple(base.grid_shape), reference_model)
    except (OSError, FormatError, ParameterError) as exc:
        raise ConfigError(f"cannot build scenario: {exc}") from exc


def sampler_for(sampling, mode):
    return GuidedDDIMSampler(
        mode=mode,
        omega_text=float(sampling["omega_text"]),
        omega_cons=float(sampling["omega_cons"]),
        steps=int(sampling["steps"]),
        eta=float(sampling["eta"]),
        schedule=sampling["schedule"],
        eps_std=float(sampling["eps_std"]),
        eps_proj=float(sampling["eps_proj"]),
        n_bins=int(sampling["n_bins"]),
        half_range=float(sampling["half_range"]),
        keep_fields=True,
    )


def has_metrics(scenario):
    return isinstance(scenario.metrics_model, GaussianMixtureModel) and len(scenario.references) > 0


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def manifest_config(raw):
    out = copy.deepcopy(raw)
    out.pop("output", None)
    return out


def run_modes(config, scenario, sampling, out_dir):
    """Sample every (mode, seed) pair into ``out_dir/<mode>/seed<k>/``.

    Seeds share ``x_T`` across modes.  Returns metric rows
    ``(mode, seed, prompt_alignment, identity_score)`` (metrics are None when
    the scenario has no analytic reference model).
    """
    seeds = list(sampling["seeds"])
    rows = []
    for mode in sampling["modes"]:
        personalized = scenario.personalized
        if mode in ("CG", "PR") and personalized is None:
            raise ConfigError(f"mode {mode} needs a personalized model in the scenario")
        sampler = sampler_for(sampling, mode).fit(scenario.base, personalized)
        xs, traces = sampler.sample_batch(scenario.condition, seeds, shape=scenario.shape)
        for seed, x0, trace in zip(seeds, xs, traces):
            run_dir = Path(out_dir) / mode / f"seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            save_grid(x0, run_dir / "x0.lgrd")
            write_trace_csv(trace, run_dir / "trace.csv")
            z_first = trace.records[0].cp_standardized.values
            save_grid(LatentGrid.from_locations(z_first[..., None]), run_dir / "cp_standardized_first.lgrd")
            run_info = {
                "version": prguide.__version__,
                "mode": mode,
                "seed": seed,
                "sampler": sampler.get_params(),
                "config": manifest_config(config.raw),
            }
            run_info["config"]["sampling"] = {**sampling, "modes": [mode], "seeds": [seed]}
            _dump_json(run_info, run_dir / "run.json")
            if has_metrics(scenario):
                pa = prompt_alignment_score([x0], scenario.metrics_model, scenario.condition)
                ids = identity_score([x0], scenario.references)
            else:
                pa = ids = None
            rows.append((mode, seed, pa, ids))
    return rows


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_metrics(rows, path, axis=False):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        if axis:
            wr.writerow(["mode", "axis_value", "seed", "prompt_alignment", "identity_score"])
            for mode, value, seed, pa, ids in rows:
                wr.writerow([mode, repr(float(value)), seed, _fmt(pa), _fmt(ids)])
        else:
            wr.writerow(["mode", "seed", "prompt_alignment", "identity_score"])
            for mode, seed, pa, ids in rows:
                wr.writerow([mode, seed, _fmt(pa), _fmt(ids)])


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command, raw, extra=None):
    """Top-level manifest: resolved config (minus output path) + file hashes."""
    out_dir = Path(out_dir)
    files = {
        p.relative_to(out_dir).as_posix(): sha256_file(p)
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "version": prguide.__version__,
        "command": command,
        "config": manifest_config(raw),
        "files": files,
    }
    if extra:
        manifest.update(extra)
    _dump_json(manifest, out_dir / "manifest.json")
    return manifest


def axis_dir_name(axis, value):
    return f"{axis}={float(value)!r}"


def cp_field_from_grid(grid):
    return ScalarField(grid.locations[..., 0])
