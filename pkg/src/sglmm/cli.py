"""Command-line interface: simulate, fit, predict, bootstrap, study.

Configuration is a flat ``key = value`` text file with ``--key value``
command-line overrides (the command line wins); unknown keys are rejected.
Every command writes a JSON manifest echoing the configuration, the seeds,
and the SHA-256 of each output file.

Exit codes: 0 success, 2 input or configuration error, 3 statistical
non-convergence.
"""

from __future__ import annotations

import os
import sys
import time
from pathlib import Path

import numpy as np

from .exceptions import BootstrapError, InputError, SglmmError
from .glm import PsiParams
from .io import (
    DesignInfo,
    format_parameter_table,
    read_dataset_csv,
    read_fit_json,
    write_dataset_csv,
    write_edge_list,
    write_fit_json,
    write_manifest,
)
from .kernels import AdjacencyGraph
from .mcml import McmlConfig, fit_continuous, fit_discrete
from .predict import predict_w_star
from .projection import BasisBuilder
from .rng import substream_seed
from .simulate import ScenarioSpec, SpatialDataset, simulate_continuous, simulate_lattice
from .study import run_study
from .uncertainty import fisher_intervals, parametric_bootstrap

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NOT_CONVERGED = 3

_COMMON_KEYS = {
    "out_dir": ".",
    "seed": 0,
}

_SCENARIO_KEYS = {
    "domain": "continuous",
    "family": "poisson",
    "n_fit": 1000,
    "n_predict": 400,
    "rows": 30,
    "cols": 30,
    "beta": "1,1",
    "sigma2": 1.0,
    "phi": 0.2,
    "tau": 6.0,
    "nu": 2.5,
    "truth_rank": 400,
}

_ALGO_KEYS = {
    "m": 50,
    "restricted": False,
    "design": "auto",
    "ess_search_mult": 3.0,
    "ess_final_mult": 20.0,
    "epsilon": 0.5,
    "outer_cap": 50,
    "proposal_sd": "auto",
    "burn_in": 1000,
    "max_chain_iterations": 2_000_000,
    "thin": "auto",
}

_SCHEMAS = {
    "simulate": {**_COMMON_KEYS, **_SCENARIO_KEYS},
    "fit": {**_COMMON_KEYS, **_ALGO_KEYS, "dataset": "", "edges": "",
            "domain": "continuous", "family": "poisson", "nu": 2.5},
    "predict": {**_COMMON_KEYS, "fit": "", "locations": ""},
    "bootstrap": {**_COMMON_KEYS, "fit": "", "dataset": "", "edges": "",
                  "replicates": 100, "level": 0.95, "workers": 0},
    "study": {**_COMMON_KEYS, **_SCENARIO_KEYS, **_ALGO_KEYS,
              "replicates": 5, "bootstrap_replicates": 0, "level": 0.90,
              "workers": 0},
}


def _parse_config_file(path: Path) -> dict:
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise InputError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = text.partition("=")
        out[key.strip()] = value.strip()
    return out


def _coerce(value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise InputError(f"expected a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def _build_config(command: str, argv: list) -> dict:
    schema = _SCHEMAS[command]
    raw: dict = {}
    args = list(argv)
    i = 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--"):
            raise InputError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if i + 1 >= len(args):
            raise InputError(f"missing value for --{key}")
        val = args[i + 1]
        i += 2
        if key == "config":
            file_conf = _parse_config_file(Path(val))
            for k, v in file_conf.items():
                raw.setdefault(k, v)
            continue
        raw[key] = val  # command line wins: set last, below
    # Re-apply command-line pairs so they override config-file values.
    i = 0
    while i < len(args):
        key = args[i][2:].replace("-", "_")
        if key != "config":
            raw[key] = args[i + 1]
        i += 2
    conf = dict(schema)
    for key, val in raw.items():
        if key not in schema:
            raise InputError(f"unknown configuration key {key!r} for '{command}'")
        conf[key] = _coerce(val, schema[key])
    return conf


def _truth_from(conf: dict) -> PsiParams:
    beta = [float(b) for b in str(conf["beta"]).split(",") if b.strip()]
    if conf["domain"] == "continuous":
        return PsiParams(beta=beta, sigma2=float(conf["sigma2"]), phi=float(conf["phi"]))
    return PsiParams(beta=beta, tau=float(conf["tau"]))


def _scenario_from(conf: dict) -> ScenarioSpec:
    return ScenarioSpec(
        domain="continuous" if conf["domain"] == "continuous" else "lattice",
        family=conf["family"],
        n_fit=int(conf["n_fit"]), n_predict=int(conf["n_predict"]),
        rows=int(conf["rows"]), cols=int(conf["cols"]),
        truth=_truth_from(conf), nu=float(conf["nu"]),
        basis_rank_for_truth=int(conf["truth_rank"]), seed=int(conf["seed"]),
    )


def _mcml_config_from(conf: dict) -> McmlConfig:
    proposal = conf["proposal_sd"]
    if proposal != "auto":
        proposal = float(proposal)
    thin = conf["thin"]
    if thin != "auto":
        thin = int(thin)
    return McmlConfig(
        m=int(conf["m"]), family=conf["family"], nu=float(conf.get("nu", 2.5)),
        restricted=bool(conf["restricted"]),
        ess_search_mult=float(conf["ess_search_mult"]),
        ess_final_mult=float(conf["ess_final_mult"]),
        epsilon=float(conf["epsilon"]), outer_cap=int(conf["outer_cap"]),
        proposal_sd=proposal, burn_in=int(conf["burn_in"]),
        max_chain_iterations=int(conf["max_chain_iterations"]), thin=thin,
        seed=int(conf["seed"]),
    )


def _design_info(conf: dict, covs) -> DesignInfo:
    mode = conf.get("design", "auto")
    if mode == "auto":
        has_covs = covs is not None and covs.size
        if conf["domain"] == "continuous":
            return DesignInfo(use_coords=not has_covs, use_covariates=True,
                              intercept=False)
        return DesignInfo(use_coords=not has_covs, use_covariates=True,
                          intercept=False)
    tokens = {t.strip() for t in mode.split(",") if t.strip()}
    unknown = tokens - {"coords", "covs", "intercept"}
    if unknown:
        raise InputError(f"unknown design tokens {sorted(unknown)}")
    return DesignInfo(
        use_coords="coords" in tokens,
        use_covariates="covs" in tokens,
        intercept="intercept" in tokens,
    )


def _workers(conf: dict) -> int:
    configured = int(conf.get("workers", 0))
    if configured > 0:
        return configured
    env = os.environ.get("SGLMM_THREADS")
    if env:
        return max(1, int(env))
    return 1


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(conf: dict) -> int:
    t0 = time.perf_counter()
    out_dir = Path(conf["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = _scenario_from(conf)
    outputs = []
    if spec.domain == "continuous":
        fit_ds, pred_ds = simulate_continuous(spec)
        data_path = out_dir / "dataset.csv"
        write_dataset_csv(data_path, fit_ds, covariates=fit_ds.X)
        outputs.append(data_path)
        if pred_ds.n:
            pred_path = out_dir / "predict_locations.csv"
            write_dataset_csv(pred_path, pred_ds, covariates=pred_ds.X)
            outputs.append(pred_path)
    else:
        ds = simulate_lattice(spec)
        data_path = out_dir / "dataset.csv"
        write_dataset_csv(data_path, ds)
        edge_path = out_dir / "edges.txt"
        write_edge_list(edge_path, ds.graph)
        outputs += [data_path, edge_path]
    write_manifest(out_dir / "manifest.json", "simulate", conf,
                   {"master": conf["seed"]}, outputs, time.perf_counter() - t0)
    print(f"simulate: wrote {', '.join(str(p) for p in outputs)}")
    return EXIT_OK


def _load_fit_inputs(conf: dict):
    dataset_path = conf["dataset"]
    if not dataset_path:
        raise InputError("fit requires --dataset")
    edges = conf.get("edges") or None
    if conf["domain"] != "continuous" and not edges:
        raise InputError("lattice fits require --edges")
    ds, covs = read_dataset_csv(dataset_path, edge_list=edges)
    info = _design_info(conf, covs)
    X = info.build(ds, covs)
    return ds, covs, info, X


def cmd_fit(conf: dict) -> int:
    t0 = time.perf_counter()
    out_dir = Path(conf["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    ds, covs, info, X = _load_fit_inputs(conf)
    cfg = _mcml_config_from(conf)
    if conf["domain"] == "continuous":
        fit = fit_continuous(ds.z, X, ds.coords, cfg, offset=ds.offset)
    else:
        fit = fit_discrete(ds.z, X, ds.graph, cfg, offset=ds.offset)

    fit_path = out_dir / "fit.json"
    write_fit_json(fit_path, fit, design_info=info)
    trace_path = out_dir / "trace.csv"
    fit.trace.to_csv(trace_path)
    table_path = out_dir / "params.txt"
    try:
        fisher = fisher_intervals(fit, level=0.95)
    except SglmmError:
        fisher = None
    mc_se = None
    if fit.mc_error_cov is not None:
        mc_se = np.sqrt(np.clip(np.diag(fit.mc_error_cov), 0.0, None))
    table = format_parameter_table(fit.parameter_names(),
                                   fit.psi_hat.as_vector(), fisher, mc_se)
    table_path.write_text(table + "\n", encoding="utf-8")
    print(table)
    outputs = [fit_path, trace_path, table_path]
    write_manifest(out_dir / "manifest.json", "fit", conf,
                   {"master": conf["seed"]}, outputs, time.perf_counter() - t0)
    if not fit.converged:
        print("fit: NOT CONVERGED (results written)", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    print(f"fit: wrote {fit_path}")
    return EXIT_OK


def cmd_predict(conf: dict) -> int:
    t0 = time.perf_counter()
    out_dir = Path(conf["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    if not conf["fit"] or not conf["locations"]:
        raise InputError("predict requires --fit and --locations")
    loaded = read_fit_json(conf["fit"])
    if loaded.domain != "continuous":
        raise InputError("prediction at coordinates requires a continuous-domain fit")
    new_ds, new_covs = read_dataset_csv_for_locations(conf["locations"])
    if new_ds.coords.shape[0] == 0:
        raise InputError("prediction file has no locations")

    cfg = loaded.config or McmlConfig()
    basis_info = loaded.basis_info or {}
    builder = BasisBuilder(
        m=int(basis_info.get("m", cfg.m)), nu=cfg.nu,
        restricted=False,
        exact_threshold=cfg.exact_eig_threshold, force_exact=cfg.force_exact_eig,
        oversample=cfg.nystrom_oversample,
        sketch_seed=int(basis_info.get("seed") or 0),
    )
    basis = builder.build(loaded.coords, loaded.psi_hat.phi)
    from .mcml import FitTrace, McmlFit
    from .sampler import DeltaChain

    # Reconstruct a minimal fit: stored field draws stand in for the chain.
    w_samples = loaded.w_samples if loaded.w_samples is not None else loaded.w_obs[None, :]
    # Coefficients of the stored fields in the rebuilt basis; numerically
    # null directions get zero coefficients.
    root_d = np.sqrt(np.clip(basis.D, 0.0, None))
    inv_root = np.where(root_d > 0, 1.0 / np.maximum(root_d, 1e-300), 0.0)
    delta_samples = (w_samples @ basis.U) * inv_root
    chain = DeltaChain(samples=delta_samples, acceptance_rate=0.0,
                       ess_first_coord=float(len(delta_samples)), converged=True,
                       thin=1, n_raw=len(delta_samples), burn_in=0, seed=0,
                       proposal_sd=0.0)
    fit = McmlFit(
        psi_hat=loaded.psi_hat, hessian_at_hat=loaded.hessian_at_hat,
        fisher_cov=loaded.fisher_cov, mc_error_cov=loaded.mc_error_cov,
        final_chain=chain, trace=FitTrace(), converged=loaded.converged,
        family=loaded.family, domain=loaded.domain, basis=basis,
        config=cfg, coords=loaded.coords,
    )
    X_new = None
    if loaded.design_info is not None:
        try:
            X_new = loaded.design_info.build(new_ds, new_covs)
        except InputError:
            X_new = None
    if X_new is not None and X_new.shape[1] != loaded.psi_hat.beta.shape[0]:
        X_new = None
    res = predict_w_star(fit, coords_new=new_ds.coords, X_new=X_new)
    out_path = out_dir / "predictions.csv"
    res.to_csv(out_path, new_ds.coords)
    write_manifest(out_dir / "manifest.json", "predict", conf,
                   {"master": conf["seed"]}, [out_path], time.perf_counter() - t0)
    print(f"predict: wrote {out_path} ({res.n} rows)")
    return EXIT_OK


def read_dataset_csv_for_locations(path):
    """Location CSVs may omit the response column; synthesize zeros if so."""
    import csv as _csv

    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = next(_csv.reader(fh), None)
    if header is None:
        raise InputError(f"{path}: empty file")
    if "z" in [h.strip().lower() for h in header]:
        return read_dataset_csv(path)
    # No response column: read coordinates and covariates manually.
    data = np.genfromtxt(path, delimiter=",", names=True)
    names = list(data.dtype.names)
    if "x" not in names or "y" not in names:
        raise InputError(f"{path}: needs x and y columns")
    coords = np.column_stack([data["x"], data["y"]])
    coords = np.atleast_2d(coords)
    cov_names = sorted((nm for nm in names if nm.startswith("cov")),
                       key=lambda nm: int(nm[3:]) if nm[3:].isdigit() else 0)
    covs = (np.column_stack([np.atleast_1d(data[nm]) for nm in cov_names])
            if cov_names else None)
    ds = SpatialDataset(z=np.zeros(coords.shape[0]), X=coords, coords=coords)
    return ds, covs


def cmd_bootstrap(conf: dict) -> int:
    t0 = time.perf_counter()
    out_dir = Path(conf["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    if not conf["fit"] or not conf["dataset"]:
        raise InputError("bootstrap requires --fit and --dataset")
    loaded = read_fit_json(conf["fit"])
    edges = conf.get("edges") or None
    ds, covs = read_dataset_csv(conf["dataset"], edge_list=edges)
    if loaded.domain == "discrete" and ds.graph is None:
        raise InputError("bootstrap of a lattice fit requires --edges")
    info = loaded.design_info or DesignInfo()
    X = info.build(ds, covs)
    cfg = loaded.config or McmlConfig()
    # Re-fit once to recover a full in-memory fit at the stored configuration.
    if loaded.domain == "continuous":
        fit = fit_continuous(ds.z, X, ds.coords, cfg, offset=ds.offset)
    else:
        fit = fit_discrete(ds.z, X, ds.graph, cfg, offset=ds.offset)
    template = SpatialDataset(z=ds.z, X=X, coords=ds.coords, graph=ds.graph,
                              offset=ds.offset)
    try:
        result = parametric_bootstrap(
            fit, template, B=int(conf["replicates"]), seed=int(conf["seed"]),
            level=float(conf["level"]), n_workers=_workers(conf),
        )
    except BootstrapError as exc:
        print(f"bootstrap: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    rep_path = out_dir / "bootstrap.csv"
    result.to_csv(rep_path)
    table_path = out_dir / "intervals.txt"
    try:
        fisher = fisher_intervals(fit, level=float(conf["level"]))
    except SglmmError:
        fisher = None
    mc_se = None
    if fit.mc_error_cov is not None:
        mc_se = np.sqrt(np.clip(np.diag(fit.mc_error_cov), 0.0, None))
    table = format_parameter_table(fit.parameter_names(), fit.psi_hat.as_vector(),
                                   fisher, mc_se, bootstrap=result.intervals)
    table_path.write_text(table + "\n", encoding="utf-8")
    print(table)
    outputs = [rep_path, table_path]
    write_manifest(out_dir / "manifest.json", "bootstrap", conf,
                   {"master": conf["seed"]}, outputs, time.perf_counter() - t0)
    print(f"bootstrap: {result.estimates.shape[0]} replicates "
          f"({result.n_failed} failed)")
    return EXIT_OK


def cmd_study(conf: dict) -> int:
    t0 = time.perf_counter()
    out_dir = Path(conf["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = _scenario_from(conf)
    cfg = _mcml_config_from(conf)
    result = run_study(
        spec, cfg, replicates=int(conf["replicates"]),
        bootstrap_B=int(conf["bootstrap_replicates"]),
        level=float(conf["level"]), seed=int(conf["seed"]),
        n_workers=_workers(conf),
    )
    est_path = out_dir / "estimates.csv"
    result.estimates_csv(est_path)
    cov_path = out_dir / "coverage.csv"
    result.coverage_csv(cov_path)
    outputs = [est_path, cov_path]
    write_manifest(out_dir / "manifest.json", "study", conf,
                   {"master": conf["seed"]}, outputs, time.perf_counter() - t0)
    for out in result.outcomes:
        if out.error:
            print(f"replicate {out.index}: FAILED ({out.error})", file=sys.stderr)
    print(f"study: {len(result.outcomes) - result.n_failed} of "
          f"{len(result.outcomes)} replicates completed; wrote {est_path}")
    return EXIT_OK


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "bootstrap": cmd_bootstrap,
    "study": cmd_study,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(__doc__)
        print("usage: sglmm simulate|fit|predict|bootstrap|study "
              "[--config FILE] [--key value ...]")
        return EXIT_OK
    command = argv[0]
    if command not in _COMMANDS:
        print(f"unknown command {command!r}", file=sys.stderr)
        return EXIT_INPUT
    try:
        conf = _build_config(command, argv[1:])
        return _COMMANDS[command](conf)
    except (InputError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"{command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SglmmError as exc:
        print(f"{command}: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
