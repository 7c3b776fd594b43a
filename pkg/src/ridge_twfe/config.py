import hashlib
import json
import math

import numpy as np

from ridge_twfe import __version__
from ridge_twfe.bounds import log_rule_penalties
from ridge_twfe.errors import ConfigError, RidgeTwfeError
from ridge_twfe.graph import DENSE_CAP, RidgePenalties
from ridge_twfe.sbm import SbmParams, design_affinity

COMMANDS = ("simulate", "estimate", "decompose", "cv", "bounds", "report")
ESTIMATORS = ("ols", "ols_debiased", "ridge")

# n0, p0, K, c, delta
PRESETS = {
    "c1": (90000, 30000, 5, 1.0, 0.1),
    "c2": (13500, 4500, 5, 2.0, 0.1),
    "desk": (600, 200, 3, 4.0, 0.1),
}

DEFAULT_PENALTIES = {
    "decompose": {"lw_norm": 0.48, "lf_norm": 0.53},
    "estimate": {"lw_norm": 0.48, "lf_norm": 0.53},
    "bounds": {"rule": "log", "nu": 0.5},
}
DEFAULT_CV_GRID = [0.05, 5.0, 12]


def load_config(path):
    """Read a JSON run config; a missing path means an empty config."""
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return raw


def normalize_run_config(command, raw=None, seed=None):
    """Resolve presets and defaults into one plain dict for ``command``.

    ``seed`` (the --seed flag) overrides the config's seed. Every value the
    run depends on ends up in the returned dict, so its hash identifies
    the run.
    """
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    raw = dict(raw or {})
    seed = int(raw.get("seed", 0) if seed is None else seed)
    cfg = {
        "command": command,
        "seed": seed,
        "workers": _positive_int(raw.get("workers", 1), "workers"),
        "dense_cap": _positive_int(raw.get("dense_cap", DENSE_CAP), "dense_cap"),
    }
    if command == "report":
        return cfg

    if command == "estimate" and raw.get("input") is not None:
        cfg["input"] = str(raw["input"])
        cfg["largest_component"] = bool(raw.get("largest_component", True))
    else:
        cfg["sbm"] = sbm_block(raw.get("sbm", {"preset": "desk"}), seed)
        cfg["dgp"] = dgp_block(raw.get("dgp", {}), cfg["sbm"]["K"])

    if command in ("estimate", "decompose", "bounds"):
        cfg["penalties"] = penalty_block(raw.get("penalties", DEFAULT_PENALTIES[command]))
    if command == "estimate":
        estimator = raw.get("estimator", "ridge")
        if estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}, got {estimator!r}")
        cfg["estimator"] = estimator
        cfg["pin_firm"] = int(raw.get("pin_firm", 0))
        cfg["method"] = _solver_method(raw.get("method", "auto"))
    if command in ("decompose", "cv"):
        cfg["cv"] = cv_block(raw.get("cv", {}))
        cfg["cross_validate"] = bool(raw.get("cross_validate", command == "cv"))
    if command == "bounds":
        cfg["bounds"] = bounds_block(raw.get("bounds", {}))
    return cfg


def _positive_int(value, name):
    try:
        value = int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be an integer, got {value!r}") from exc
    if value < 1:
        raise ConfigError(f"{name} must be at least 1, got {value}")
    return value


def _nonnegative(value, name):
    try:
        value = float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a number, got {value!r}") from exc
    if not math.isfinite(value) or value < 0:
        raise ConfigError(f"{name} must be finite and nonnegative, got {value}")
    return value


def _solver_method(method):
    if method not in ("auto", "cholmod", "splu", "pcg"):
        raise ConfigError(f"unknown solver method {method!r}")
    return method


def sbm_block(block, seed):
    """Block model parameters from a preset name plus explicit overrides."""
    block = dict(block)
    preset = block.pop("preset", None)
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; known presets are {sorted(PRESETS)}")
    n0, p0, K, c, delta = PRESETS[preset] if preset else (None, None, None, None, 0.1)
    n0 = block.pop("n0", n0)
    p0 = block.pop("p0", p0)
    K = block.pop("K", K)
    c = block.pop("c", c)
    delta = block.pop("delta", delta)
    affinity = block.pop("affinity", None)
    if n0 is None or p0 is None:
        raise ConfigError("sbm block needs a preset or explicit n0 and p0")
    if affinity is None:
        if K is None or c is None:
            raise ConfigError("sbm block needs an affinity matrix or (K, c, delta)")
        affinity = design_affinity(float(c), int(K), int(p0), float(delta))
    affinity = np.asarray(affinity, dtype=float)
    K = affinity.shape[0] if K is None else int(K)
    pi_w = block.pop("pi_w", np.full(K, 1.0 / K))
    pi_f = block.pop("pi_f", np.full(K, 1.0 / K))
    alpha = block.pop("theta_pareto_alpha", 2.0)
    theta_min = block.pop("theta_min", 1.0)
    if block:
        raise ConfigError(f"unknown sbm keys {sorted(block)}")
    try:
        params = SbmParams(
            int(n0),
            int(p0),
            K,
            pi_w,
            pi_f,
            affinity,
            theta_pareto_alpha=math.inf if alpha is None else alpha,
            theta_min=theta_min,
            seed=seed,
        )
    except RidgeTwfeError as exc:
        raise ConfigError(f"invalid sbm block: {exc}") from exc
    out = params.to_dict()
    out["preset"] = preset
    return out


def sbm_params(cfg):
    block = {k: v for k, v in cfg["sbm"].items() if k != "preset"}
    return SbmParams.from_dict(block)


def dgp_block(block, K):
    """Effect and residual parameters; defaults follow the simulation design."""
    block = dict(block)
    mu_star = block.pop("mu_star", list(range(K)))
    phi_star = block.pop("phi_star", [0.4 * k for k in range(K)])
    out = {
        "mu_star": [float(v) for v in mu_star],
        "phi_star": [float(v) for v in phi_star],
        "sigma": _nonnegative(block.pop("sigma", 2.0), "sigma"),
        "sigma_w": _nonnegative(block.pop("sigma_w", math.sqrt(2.0)), "sigma_w"),
        "sigma_f": _nonnegative(block.pop("sigma_f", 1.0), "sigma_f"),
    }
    if block:
        raise ConfigError(f"unknown dgp keys {sorted(block)}")
    if len(out["mu_star"]) != K or len(out["phi_star"]) != K:
        raise ConfigError(f"mu_star and phi_star must have length K={K}")
    return out


def penalty_block(block):
    block = dict(block)
    if "rule" in block:
        if block["rule"] != "log":
            raise ConfigError(f"unknown penalty rule {block['rule']!r}")
        nu = float(block.get("nu", 0.5))
        if not 0 < nu < 1:
            raise ConfigError(f"nu must lie in (0, 1), got {nu}")
        return {"mode": "rule", "rule": "log", "nu": nu}
    if "lw_norm" in block or "lf_norm" in block:
        return {"mode": "normalized", **{key: _nonnegative(block.get(key), key) for key in ("lw_norm", "lf_norm")}}
    if "lambda_w" in block or "lambda_f" in block:
        return {"mode": "explicit", **{key: _nonnegative(block.get(key), key) for key in ("lambda_w", "lambda_f")}}
    raise ConfigError("penalties need lambda_w/lambda_f, lw_norm/lf_norm or a rule")


def resolve_penalties(block, n, p, big_n=None):
    """Penalties for a graph with n workers, p firms and N observations."""
    mode = block["mode"]
    if mode == "explicit":
        return RidgePenalties(block["lambda_w"], block["lambda_f"])
    if mode == "normalized":
        if not big_n or not n or not p:
            raise ConfigError("degree-normalized penalties need a nonempty graph")
        return RidgePenalties(block["lw_norm"] * big_n / n, block["lf_norm"] * big_n / p)
    penalties, _ = log_rule_penalties(n, p, block["nu"])
    return penalties


def cv_block(block):
    block = dict(block)
    out = {
        "lw_norm": _grid_spec(block.pop("lw_norm", DEFAULT_CV_GRID), "lw_norm"),
        "lf_norm": _grid_spec(block.pop("lf_norm", DEFAULT_CV_GRID), "lf_norm"),
        "n_test_draws": _positive_int(block.pop("n_test_draws", 1), "n_test_draws"),
    }
    if block:
        raise ConfigError(f"unknown cv keys {sorted(block)}")
    return out


def _grid_spec(spec, name):
    """[lo, hi, num] (num an integer) for a log grid, or {"values": [...]} for explicit points."""
    if isinstance(spec, dict) and "values" in spec:
        values = [float(v) for v in spec["values"]]
        if not values or min(values) <= 0:
            raise ConfigError(f"{name} grid values must be positive")
        return {"values": values}
    if isinstance(spec, dict):
        spec = [spec.get("lo"), spec.get("hi"), spec.get("num")]
    if not isinstance(spec, (list, tuple)) or len(spec) != 3 or not isinstance(spec[2], int) or isinstance(spec[2], bool):
        raise ConfigError(f"{name} grid must be [lo, hi, num] or {{'values': [...]}}, got {spec!r}")
    lo, hi, num = float(spec[0]), float(spec[1]), spec[2]
    if not (0 < lo <= hi) or num < 1:
        raise ConfigError(f"{name} grid needs 0 < lo <= hi and num >= 1, got {spec!r}")
    return {"lo": lo, "hi": hi, "num": num}


def bounds_block(block):
    block = dict(block)
    theorems = sorted({int(t) for t in block.pop("theorems", [1, 2, 3, 4, 5])})
    if not theorems or not set(theorems) <= {1, 2, 3, 4, 5}:
        raise ConfigError(f"theorems must be a nonempty subset of 1..5, got {theorems}")
    epsilon = float(block.pop("epsilon", 0.1))
    if not 0 < epsilon < 1:
        raise ConfigError(f"epsilon must lie in (0, 1), got {epsilon}")
    out = {
        "theorems": theorems,
        "epsilon": epsilon,
        "replications": _positive_int(block.pop("replications", 200), "replications"),
    }
    if block:
        raise ConfigError(f"unknown bounds keys {sorted(block)}")
    return out


# --------------------------------------------------------------------------- #
# Run identity
# --------------------------------------------------------------------------- #
def config_hash(cfg):
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=json_default)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def header_line(cfg):
    return f"# ridge-twfe {__version__} config={config_hash(cfg)[:12]}"


def json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")
