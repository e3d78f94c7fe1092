"""Declarative analysis configuration (YAML/JSON tree) and spec construction."""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from . import model as zm
from . import selection
from .errors import ConfigError

RESPONSE_TRANSFORMS = ("identity", "log1p")


@dataclass(frozen=True)
class FactorConfig:
    name: str
    reference: str | None = None
    levels: tuple[str, ...] | None = None


@dataclass(frozen=True)
class FitOptions:
    tol: float = 1e-8
    max_iter: int = 200


@dataclass(frozen=True)
class SimulateConfig:
    n: tuple[int, ...] = (400,)
    sigma: tuple[float, ...] = (0.5,)
    replications: int = 100
    b: int = 50
    nu: float = 0.5
    stratified: bool = True
    full_study: bool = False


@dataclass(frozen=True)
class AnalysisConfig:
    input_path: str | None
    response: str | None
    response_transform: str
    delimiter: str
    factors: tuple[FactorConfig, ...]
    continuous: tuple[str, ...]
    binary_parametric: tuple[str, ...]
    binary_smooth: tuple[str, ...]
    mean_parametric: tuple[str, ...]
    mean_smooth: tuple[str, ...]
    link: str
    knots: int
    knots_overrides: dict[str, int]
    epsilon: float | None
    candidates: tuple[tuple[str, tuple[str, ...]], ...]
    model: str | None
    mccv: selection.MccvConfig
    fit: FitOptions
    seed: int
    output_dir: str
    simulate: SimulateConfig

    def factor_names(self):
        return tuple(f.name for f in self.factors)

    def smooth_spec(self, name: str) -> zm.SmoothSpec:
        return zm.SmoothSpec(name, self.knots_overrides.get(name, self.knots))

    def base_spec(self) -> zm.ModelSpec:
        return zm.ModelSpec(
            binary_part=zm.PartSpec(
                parametric=self.binary_parametric,
                smooths=tuple(self.smooth_spec(n) for n in self.binary_smooth),
            ),
            mean_part=zm.PartSpec(
                parametric=self.mean_parametric,
                smooths=tuple(self.smooth_spec(n) for n in self.mean_smooth),
            ),
            link=self.link,
            epsilon=self.epsilon,
        )

    def candidate_specs(self) -> dict[str, zm.ModelSpec]:
        base = self.base_spec()
        return {name: base.with_constraint(terms) for name, terms in self.candidates}


def _expect(mapping, key, kind, default=None, required=False, context="config"):
    if key not in mapping or mapping[key] is None:
        if required:
            raise ConfigError(f"{context}: missing required key {key!r}")
        return default
    value = mapping[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(
            f"{context}: key {key!r} must be {getattr(kind, '__name__', kind)}, "
            f"got {type(value).__name__}"
        )
    return value


def _as_name_list(value, key):
    if value is None:
        return ()
    if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
        raise ConfigError(f"config: key {key!r} must be a list of column names")
    return tuple(value)


def parse_config(tree: dict) -> AnalysisConfig:
    """Validate a parsed configuration tree; every defect raises ConfigError."""
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")

    factors = []
    raw_factors = tree.get("factors") or {}
    if isinstance(raw_factors, list):
        raw_factors = {name: {} for name in raw_factors}
    if not isinstance(raw_factors, dict):
        raise ConfigError("config: 'factors' must be a mapping or list of names")
    for name, opts in raw_factors.items():
        opts = opts or {}
        if not isinstance(opts, dict):
            raise ConfigError(f"config: factor {name!r} options must be a mapping")
        ref = opts.get("reference")
        levels = opts.get("levels")
        factors.append(FactorConfig(
            name=str(name),
            reference=None if ref is None else str(ref),
            levels=None if levels is None else tuple(str(v) for v in levels),
        ))

    continuous = _as_name_list(tree.get("continuous"), "continuous")

    def part(key):
        sub = tree.get(key) or {}
        if not isinstance(sub, dict):
            raise ConfigError(f"config: {key!r} must be a mapping")
        return (_as_name_list(sub.get("parametric"), f"{key}.parametric"),
                _as_name_list(sub.get("smooth"), f"{key}.smooth"))

    binary_parametric, binary_smooth = part("binary_part")
    mean_parametric, mean_smooth = part("mean_part")

    smooth_opts = tree.get("smooth_options") or {}
    if not isinstance(smooth_opts, dict):
        raise ConfigError("config: 'smooth_options' must be a mapping")
    knots_raw = smooth_opts.get("knots", 9)
    overrides = {}
    if isinstance(knots_raw, dict):
        overrides = {str(k): int(v) for k, v in knots_raw.items()}
        knots = 9
    elif isinstance(knots_raw, int) and not isinstance(knots_raw, bool):
        knots = knots_raw
    else:
        raise ConfigError("config: smooth_options.knots must be an int or a name->int map")
    if knots < 0 or any(v < 0 for v in overrides.values()):
        raise ConfigError("config: knot counts must be >= 0")
    epsilon = _expect(smooth_opts, "epsilon", float, context="smooth_options")
    if epsilon is not None and epsilon <= 0:
        raise ConfigError("config: smooth_options.epsilon must be positive")

    link = _expect(tree, "link", str, default="logit")
    if link not in ("logit", "probit"):
        raise ConfigError(f"config: unknown link {link!r}")

    transform = _expect(tree, "response_transform", str, default="identity")
    if transform not in RESPONSE_TRANSFORMS:
        raise ConfigError(
            f"config: response_transform must be one of {RESPONSE_TRANSFORMS}"
        )

    declared_smooths = set(binary_smooth) | set(mean_smooth)
    candidates = []
    raw_candidates = tree.get("candidates") or {}
    if not isinstance(raw_candidates, dict):
        raise ConfigError("config: 'candidates' must map names to constrained-term lists")
    for name, terms in raw_candidates.items():
        terms = _as_name_list(terms, f"candidates.{name}")
        for t in terms:
            if t not in declared_smooths:
                raise ConfigError(
                    f"config: candidate {name!r} constrains {t!r}, which is not a declared smooth"
                )
            if t not in binary_smooth or t not in mean_smooth:
                raise ConfigError(
                    f"config: candidate {name!r} constrains {t!r}, which must be a smooth in both parts"
                )
        candidates.append((str(name), terms))

    model = _expect(tree, "model", str)
    if model is not None and model not in dict(candidates):
        raise ConfigError(f"config: model {model!r} is not a declared candidate")

    seed = _expect(tree, "seed", int, default=0)

    raw_mccv = tree.get("mccv") or {}
    if not isinstance(raw_mccv, dict):
        raise ConfigError("config: 'mccv' must be a mapping")
    try:
        mccv_cfg = selection.MccvConfig(
            b=_expect(raw_mccv, "b", int, default=100, context="mccv"),
            nu=_expect(raw_mccv, "nu", float, default=0.5, context="mccv"),
            seed=_expect(raw_mccv, "seed", int, default=seed, context="mccv"),
            stratified=_expect(raw_mccv, "stratified", bool, default=True, context="mccv"),
        )
    except ValueError as exc:
        raise ConfigError(f"config: mccv: {exc}") from None

    raw_fit = tree.get("fit") or {}
    if not isinstance(raw_fit, dict):
        raise ConfigError("config: 'fit' must be a mapping")
    fit = FitOptions(
        tol=_expect(raw_fit, "tol", float, default=1e-8, context="fit"),
        max_iter=_expect(raw_fit, "max_iter", int, default=200, context="fit"),
    )
    if fit.max_iter < 1 or fit.tol <= 0:
        raise ConfigError("config: fit.max_iter must be >= 1 and fit.tol positive")

    raw_sim = tree.get("simulate") or {}
    if not isinstance(raw_sim, dict):
        raise ConfigError("config: 'simulate' must be a mapping")
    n_values = raw_sim.get("n", [400])
    sigma_values = raw_sim.get("sigma", [0.5])
    if isinstance(n_values, int):
        n_values = [n_values]
    if isinstance(sigma_values, (int, float)):
        sigma_values = [sigma_values]
    sim = SimulateConfig(
        n=tuple(int(v) for v in n_values),
        sigma=tuple(float(v) for v in sigma_values),
        replications=_expect(raw_sim, "replications", int, default=100, context="simulate"),
        b=_expect(raw_sim, "b", int, default=50, context="simulate"),
        nu=_expect(raw_sim, "nu", float, default=0.5, context="simulate"),
        stratified=_expect(raw_sim, "stratified", bool, default=True, context="simulate"),
        full_study=_expect(raw_sim, "full_study", bool, default=False, context="simulate"),
    )

    response = _expect(tree, "response", str)
    declared_columns = set(continuous) | {f.name for f in factors}
    for group, names in (
        ("binary_part.parametric", binary_parametric),
        ("mean_part.parametric", mean_parametric),
    ):
        for n in names:
            if n not in declared_columns:
                raise ConfigError(f"config: {group} references undeclared column {n!r}")
    for group, names in (("binary_part.smooth", binary_smooth),
                         ("mean_part.smooth", mean_smooth)):
        for n in names:
            if n not in continuous:
                raise ConfigError(
                    f"config: {group} references {n!r}, which is not a continuous column"
                )
    if response is not None and response in declared_columns:
        raise ConfigError(f"config: response {response!r} must not also be a covariate")

    return AnalysisConfig(
        input_path=_expect(tree, "input", str),
        response=response,
        response_transform=transform,
        delimiter=_expect(tree, "delimiter", str, default=","),
        factors=tuple(factors),
        continuous=continuous,
        binary_parametric=binary_parametric,
        binary_smooth=binary_smooth,
        mean_parametric=mean_parametric,
        mean_smooth=mean_smooth,
        link=link,
        knots=knots,
        knots_overrides=overrides,
        epsilon=epsilon,
        candidates=tuple(candidates),
        model=model,
        mccv=mccv_cfg,
        fit=fit,
        seed=seed,
        output_dir=_expect(tree, "output_dir", str, default="out"),
        simulate=sim,
    )


def load_config(path) -> AnalysisConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            tree = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    return parse_config(tree)
