"""Run configuration: strict YAML schema and builders for model objects.

Unknown keys are rejected everywhere so that 55-model sweep configs stay
diffable and typo-safe.  See ``docs/example-config.yaml`` for a full
annotated example.
"""

import math

import numpy as np
import yaml

from .errors import ConfigError
from .population import Population, load_location_pool, load_population, synthesize_population
from .smc2 import Prior
from .transmission import Constants, ModelSpec, Theta


def _require_mapping(node, path):
    if not isinstance(node, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return node


def _check_keys(node, path, required=(), optional=()):
    node = _require_mapping(node, path)
    unknown = set(node) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(node)
    if missing:
        raise ConfigError(f"{path}: missing keys {sorted(missing)}")
    return node


def _number(node, path, lo=None, hi=None):
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ConfigError(f"{path}: expected a number")
    v = float(node)
    if lo is not None and v < lo:
        raise ConfigError(f"{path}: must be >= {lo}")
    if hi is not None and v > hi:
        raise ConfigError(f"{path}: must be <= {hi}")
    return v


def _integer(node, path, lo=None):
    if isinstance(node, bool) or not isinstance(node, int):
        raise ConfigError(f"{path}: expected an integer")
    if lo is not None and node < lo:
        raise ConfigError(f"{path}: must be >= {lo}")
    return node


def _string(node, path, choices=None):
    if not isinstance(node, str):
        raise ConfigError(f"{path}: expected a string")
    if choices and node not in choices:
        raise ConfigError(f"{path}: must be one of {sorted(choices)}")
    return node


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            cfg = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    validate_config(cfg if cfg is not None else {})
    return cfg


TOP_KEYS = ("population", "observations", "model", "prior", "run", "simulate",
            "analysis", "select")


def validate_config(cfg):
    _check_keys(cfg, "config", optional=TOP_KEYS)
    if "population" in cfg:
        _validate_population(cfg["population"], "population")
    if "observations" in cfg:
        _string(cfg["observations"], "observations")
    if "model" in cfg:
        _validate_model(cfg["model"], "model")
    if "prior" in cfg:
        _validate_prior(cfg["prior"], "prior")
    if "run" in cfg:
        _validate_run(cfg["run"], "run")
    if "simulate" in cfg:
        _validate_simulate(cfg["simulate"], "simulate")
    if "analysis" in cfg:
        _validate_analysis(cfg["analysis"], "analysis")
    if "select" in cfg:
        _validate_select(cfg["select"], "select")
    return cfg


def _validate_population(node, path):
    _check_keys(node, path, required=("households", "individuals"), optional=("synthesize",))
    _string(node["households"], f"{path}.households")
    _string(node["individuals"], f"{path}.individuals")
    if "synthesize" in node:
        syn = _check_keys(node["synthesize"], f"{path}.synthesize",
                          required=("locations", "target_individuals", "seed"))
        _string(syn["locations"], f"{path}.synthesize.locations")
        _integer(syn["target_individuals"], f"{path}.synthesize.target_individuals", lo=0)
        _integer(syn["seed"], f"{path}.synthesize.seed")


def _validate_model(node, path):
    _check_keys(node, path, optional=("kappa1", "kappa2", "kernel", "alpha", "delta",
                                      "epsilon", "constants"))
    for key in ("kappa1", "kappa2"):
        if key in node:
            _string(node[key], f"{path}.{key}", {"one", "household_size"})
    if "kernel" in node:
        _string(node["kernel"], f"{path}.kernel", {"exponential", "gaussian"})
    if "alpha" in node:
        a = _check_keys(node["alpha"], f"{path}.alpha", required=("mode",), optional=("value",))
        _string(a["mode"], f"{path}.alpha.mode", {"fixed", "learned"})
        if a["mode"] == "fixed":
            _number(a.get("value", 0.8), f"{path}.alpha.value")
    for key in ("delta", "epsilon"):
        if key in node:
            d = _check_keys(node[key], f"{path}.{key}", required=("mode",))
            _string(d["mode"], f"{path}.{key}.mode", {"fixed", "learned"})
    if "constants" in node:
        c = _check_keys(node["constants"], f"{path}.constants",
                        optional=("gamma", "lambda0", "s_e", "s_p", "frequency", "phase"))
        for key in c:
            _number(c[key], f"{path}.constants.{key}")


def _validate_prior(node, path):
    allowed = ("log_beta1", "log_beta2", "log_phi", "delta", "alpha", "log_epsilon")
    _check_keys(node, path, optional=allowed)
    for key in ("log_beta1", "log_beta2", "log_phi", "delta", "log_epsilon"):
        if key in node:
            p = _check_keys(node[key], f"{path}.{key}", required=("mean", "sd"))
            _number(p["mean"], f"{path}.{key}.mean")
            _number(p["sd"], f"{path}.{key}.sd", lo=1e-300)
    if "alpha" in node:
        p = _check_keys(node["alpha"], f"{path}.alpha", required=("a", "b"))
        _number(p["a"], f"{path}.alpha.a", lo=1e-300)
        _number(p["b"], f"{path}.alpha.b", lo=1e-300)


def _validate_run(node, path):
    _check_keys(node, path, optional=("p_theta", "p", "h", "seed", "repeats", "workers",
                                      "ess_threshold", "mh_steps", "proposal",
                                      "resampling", "save_states"))
    for key, lo in (("p_theta", 2), ("p", 2), ("seed", None), ("repeats", 1),
                    ("workers", 1), ("mh_steps", 1)):
        if key in node:
            _integer(node[key], f"{path}.{key}", lo=lo)
    if "h" in node:
        _number(node["h"], f"{path}.h", lo=1)
    if "ess_threshold" in node:
        _number(node["ess_threshold"], f"{path}.ess_threshold", lo=0.0, hi=1.0)
    if "proposal" in node:
        p = _check_keys(node["proposal"], f"{path}.proposal", optional=("scale", "ridge"))
        for key in p:
            _number(p[key], f"{path}.proposal.{key}", lo=0.0)
    if "resampling" in node:
        _string(node["resampling"], f"{path}.resampling", {"systematic", "multinomial"})
    if "save_states" in node and not isinstance(node["save_states"], bool):
        raise ConfigError(f"{path}.save_states: expected a boolean")


def _validate_simulate(node, path):
    _check_keys(node, path, required=("theta",), optional=("panel", "panel_file", "h"))
    if "h" in node:
        _number(node["h"], f"{path}.h", lo=1)
    t = _check_keys(node["theta"], f"{path}.theta",
                    required=("log_beta1", "log_beta2", "log_phi", "alpha", "delta", "epsilon"))
    for key in ("log_beta1", "log_beta2", "log_phi"):
        _number(t[key], f"{path}.theta.{key}")
    _number(t["alpha"], f"{path}.theta.alpha", lo=0.0, hi=1.0)
    _number(t["epsilon"], f"{path}.theta.epsilon", lo=0.0)
    if not isinstance(t["delta"], list) or len(t["delta"]) != 3:
        raise ConfigError(f"{path}.theta.delta: expected a list of 3 numbers")
    for i, v in enumerate(t["delta"]):
        _number(v, f"{path}.theta.delta[{i}]")
    if ("panel" in node) == ("panel_file" in node):
        raise ConfigError(f"{path}: exactly one of 'panel' or 'panel_file' is required")
    if "panel_file" in node:
        _string(node["panel_file"], f"{path}.panel_file")
    if "panel" in node:
        p = _check_keys(node["panel"], f"{path}.panel",
                        required=("households", "start", "end", "period"),
                        optional=("groups", "gaps", "seed"))
        _integer(p["households"], f"{path}.panel.households", lo=1)
        _number(p["start"], f"{path}.panel.start", lo=0)
        _number(p["end"], f"{path}.panel.end", lo=0)
        _number(p["period"], f"{path}.panel.period", lo=1)
        if "groups" in p:
            _integer(p["groups"], f"{path}.panel.groups", lo=1)
        if "seed" in p:
            _integer(p["seed"], f"{path}.panel.seed")
        for i, gap in enumerate(p.get("gaps", [])):
            if not isinstance(gap, list) or len(gap) != 2:
                raise ConfigError(f"{path}.panel.gaps[{i}]: expected [start_day, end_day]")
            _number(gap[0], f"{path}.panel.gaps[{i}][0]")
            _number(gap[1], f"{path}.panel.gaps[{i}][1]")


def _validate_analysis(node, path):
    _check_keys(node, path, optional=("bandwidth", "grid", "quantiles", "time_average",
                                      "r_draws"))
    if node.get("bandwidth") is not None:
        bw = node["bandwidth"]
        if not isinstance(bw, list) or len(bw) != 2:
            raise ConfigError(f"{path}.bandwidth: expected [bx, by]")
        for i, v in enumerate(bw):
            _number(v, f"{path}.bandwidth[{i}]", lo=1e-300)
    if node.get("grid") is not None:
        g = _check_keys(node["grid"], f"{path}.grid", required=("x", "y"))
        for axis in ("x", "y"):
            spec = g[axis]
            if not isinstance(spec, list) or len(spec) != 3:
                raise ConfigError(f"{path}.grid.{axis}: expected [lo, hi, n]")
            _number(spec[0], f"{path}.grid.{axis}[0]")
            _number(spec[1], f"{path}.grid.{axis}[1]")
            _integer(spec[2], f"{path}.grid.{axis}[2]", lo=2)
    if "quantiles" in node:
        q = node["quantiles"]
        if not isinstance(q, list) or len(q) != 3:
            raise ConfigError(f"{path}.quantiles: expected [low, mid, high]")
        for i, v in enumerate(q):
            _number(v, f"{path}.quantiles[{i}]", lo=0.0, hi=1.0)
    if "time_average" in node:
        _string(node["time_average"], f"{path}.time_average",
                {"all_steps", "observation_times"})


def _validate_select(node, path):
    n = _check_keys(node, path, required=("areas", "models"))
    if not isinstance(n["areas"], list) or not n["areas"]:
        raise ConfigError(f"{path}.areas: expected a nonempty list")
    for i, area in enumerate(n["areas"]):
        a = _check_keys(area, f"{path}.areas[{i}]",
                        required=("name", "population", "observations"))
        _string(a["name"], f"{path}.areas[{i}].name")
        _validate_population(a["population"], f"{path}.areas[{i}].population")
        _string(a["observations"], f"{path}.areas[{i}].observations")
    if not isinstance(n["models"], list) or not n["models"]:
        raise ConfigError(f"{path}.models: expected a nonempty list")
    for i, model in enumerate(n["models"]):
        m = _check_keys(model, f"{path}.models[{i}]", required=("id",),
                        optional=("model", "prior"))
        _string(m["id"], f"{path}.models[{i}].id")
        if "model" in m:
            _validate_model(m["model"], f"{path}.models[{i}].model")
        if "prior" in m:
            _validate_prior(m["prior"], f"{path}.models[{i}].prior")


def population_from_config(node) -> Population:
    pop = load_population(node["households"], node["individuals"])
    if "synthesize" in node:
        syn = node["synthesize"]
        pool = load_location_pool(syn["locations"])
        pop = synthesize_population(pop, pool, syn["target_individuals"], syn["seed"])
    return pop


def modelspec_from_config(node=None) -> ModelSpec:
    node = node or {}
    constants = Constants(**node.get("constants", {}))
    alpha = node.get("alpha", {"mode": "fixed", "value": 0.8})
    return ModelSpec(
        kappa1=node.get("kappa1", "household_size"),
        kappa2=node.get("kappa2", "household_size"),
        kernel=node.get("kernel", "exponential"),
        alpha_mode=alpha["mode"],
        alpha_value=float(alpha.get("value", 0.8)),
        delta_mode=node.get("delta", {"mode": "fixed"})["mode"],
        epsilon_mode=node.get("epsilon", {"mode": "learned"})["mode"],
        constants=constants,
    )


def modelspec_to_config(spec: ModelSpec) -> dict:
    """Config-file form of a ModelSpec (inverse of modelspec_from_config)."""
    c = spec.constants
    alpha = {"mode": spec.alpha_mode}
    if spec.alpha_mode == "fixed":
        alpha["value"] = spec.alpha_value
    return {
        "kappa1": spec.kappa1,
        "kappa2": spec.kappa2,
        "kernel": spec.kernel,
        "alpha": alpha,
        "delta": {"mode": spec.delta_mode},
        "epsilon": {"mode": spec.epsilon_mode},
        "constants": {"gamma": c.gamma, "lambda0": c.lambda0, "s_e": c.s_e,
                      "s_p": c.s_p, "frequency": c.frequency, "phase": c.phase},
    }


def prior_from_config(spec: ModelSpec, node=None) -> Prior:
    node = node or {}
    kwargs = {}
    for key in ("log_beta1", "log_beta2", "log_phi", "delta", "log_epsilon"):
        if key in node:
            kwargs[key] = (node[key]["mean"], node[key]["sd"])
    if "alpha" in node:
        kwargs["alpha"] = (node["alpha"]["a"], node["alpha"]["b"])
    return Prior(spec, **kwargs)


def theta_from_config(node, spec: ModelSpec) -> Theta:
    theta = Theta(
        beta1=math.exp(node["log_beta1"]),
        beta2=math.exp(node["log_beta2"]),
        phi=math.exp(node["log_phi"]),
        alpha=node["alpha"],
        delta=np.asarray(node["delta"], dtype=float),
        epsilon=node["epsilon"],
    )
    theta.validate_against(spec)
    return theta


def merged_model_config(base_cfg, overrides):
    """Model block with per-model overrides applied on top of the base."""
    merged = dict(base_cfg.get("model", {}))
    for key, value in (overrides or {}).items():
        if key == "constants":
            base_constants = dict(merged.get("constants", {}))
            base_constants.update(value)
            merged["constants"] = base_constants
        else:
            merged[key] = value
    return merged
