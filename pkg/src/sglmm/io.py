"""File formats: dataset CSVs, fit documents, manifests, and report tables.

Dataset CSV: UTF-8 with a header row.  Columns ``x,y,z`` are required;
``offset`` and any number of ``cov1..covk`` columns are optional.  Lattice
datasets use the same node CSV (row order = node index) plus the plain-text
edge list handled by :mod:`sglmm.kernels`.

Fit documents are JSON.  They carry everything needed to predict at new
sites and to report intervals, but not the raw training data; commands that
need the data take the dataset file alongside.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .exceptions import InputError
from .glm import PsiParams
from .kernels import AdjacencyGraph, read_edge_list, write_edge_list
from .mcml import FitTrace, McmlConfig, McmlFit, TraceRow
from .simulate import SpatialDataset

_MAX_SAVED_FIELD_SAMPLES = 64


@dataclass(frozen=True)
class DesignInfo:
    """How the regression design matrix is assembled from a dataset file."""

    use_coords: bool = True
    use_covariates: bool = True
    intercept: bool = False

    def build(self, dataset: SpatialDataset, covariates: np.ndarray | None) -> np.ndarray:
        cols = []
        if self.intercept:
            cols.append(np.ones((dataset.n, 1)))
        if self.use_coords:
            if dataset.coords is None:
                raise InputError("design requests coordinates but the dataset has none")
            cols.append(dataset.coords)
        if self.use_covariates and covariates is not None and covariates.size:
            cols.append(covariates)
        if not cols:
            raise InputError("design matrix would be empty")
        return np.hstack(cols)

    def to_dict(self) -> dict:
        return {"use_coords": self.use_coords, "use_covariates": self.use_covariates,
                "intercept": self.intercept}

    @classmethod
    def from_dict(cls, d: dict) -> "DesignInfo":
        return cls(**d)


def write_dataset_csv(path, dataset: SpatialDataset, covariates: np.ndarray | None = None) -> None:
    """Write a dataset to the ``x,y,z[,offset][,cov1..covk]`` CSV format."""
    if dataset.coords is None:
        raise InputError("dataset has no coordinates to write")
    header = ["x", "y", "z"]
    cols = [dataset.coords[:, 0], dataset.coords[:, 1], dataset.z]
    if dataset.offset is not None:
        header.append("offset")
        cols.append(dataset.offset)
    if covariates is not None and covariates.size:
        covariates = np.atleast_2d(covariates)
        for k in range(covariates.shape[1]):
            header.append(f"cov{k + 1}")
            cols.append(covariates[:, k])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in zip(*cols):
            writer.writerow([f"{v:.17g}" for v in row])


def read_dataset_csv(path, edge_list=None) -> tuple[SpatialDataset, np.ndarray | None]:
    """Read a dataset CSV; returns the dataset and its covariate block.

    A malformed row raises :class:`InputError` naming the line number.
    ``edge_list`` attaches a lattice graph read from the companion file.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        header = [h.strip().lower() for h in header]
        for required in ("x", "y", "z"):
            if required not in header:
                raise InputError(f"{path}: missing required column {required!r}")
        cov_names = sorted(
            (h for h in header if h.startswith("cov")),
            key=lambda h: int(h[3:]) if h[3:].isdigit() else 0,
        )
        idx = {name: header.index(name) for name in header}
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-numeric value") from None
    if not rows:
        raise InputError(f"{path}: no data rows")
    data = np.asarray(rows)
    coords = data[:, [idx["x"], idx["y"]]]
    z = data[:, idx["z"]]
    offset = data[:, idx["offset"]] if "offset" in idx else None
    covs = data[:, [idx[c] for c in cov_names]] if cov_names else None
    graph = read_edge_list(edge_list) if edge_list is not None else None
    if graph is not None and graph.n != data.shape[0]:
        raise InputError(
            f"edge list declares {graph.n} nodes but the CSV has {data.shape[0]} rows"
        )
    ds = SpatialDataset(z=z, X=coords, coords=coords, graph=graph, offset=offset)
    return ds, covs


def _arr(x):
    return None if x is None else np.asarray(x).tolist()


def fit_to_dict(fit: McmlFit, design_info: DesignInfo | None = None) -> dict:
    """JSON-ready dictionary for a fit document."""
    w_obs = None
    w_samples = None
    if fit.basis is not None and fit.final_chain is not None:
        samples = fit.final_chain.samples
        w_obs = fit.basis.M @ samples.mean(axis=0)
        step = max(1, samples.shape[0] // _MAX_SAVED_FIELD_SAMPLES)
        w_samples = (fit.basis.M @ samples[::step].T).T
    basis_info = None
    if fit.basis is not None:
        basis_info = {
            "method": fit.basis.method,
            "m": fit.basis.rank,
            "phi_at_build": fit.basis.phi_at_build,
            "restricted": fit.basis.restricted,
            "seed": fit.basis.seed,
        }
    return {
        "format": "sglmm-fit/1",
        "version": __version__,
        "family": fit.family,
        "domain": fit.domain,
        "converged": bool(fit.converged),
        "psi_hat": fit.psi_hat.to_dict(),
        "psi_tilde": None if fit.psi_tilde is None else fit.psi_tilde.to_dict(),
        "parameter_names": fit.parameter_names(),
        "hessian_at_hat": _arr(fit.hessian_at_hat),
        "fisher_cov": _arr(fit.fisher_cov),
        "mc_error_cov": _arr(fit.mc_error_cov),
        "config": None if fit.config is None else fit.config.to_dict(),
        "design_info": None if design_info is None else design_info.to_dict(),
        "coords": _arr(fit.coords),
        "offset": _arr(fit.offset),
        "basis": basis_info,
        "w_obs": _arr(w_obs),
        "w_samples": _arr(w_samples),
        "final_chain": None if fit.final_chain is None else {
            "ess_first_coord": fit.final_chain.ess_first_coord,
            "acceptance_rate": fit.final_chain.acceptance_rate,
            "thin": fit.final_chain.thin,
            "n_raw": fit.final_chain.n_raw,
            "K": fit.final_chain.K,
            "seed": fit.final_chain.seed,
            "proposal_sd": fit.final_chain.proposal_sd,
        },
        "trace": fit.trace.to_records(),
        "diagnostics": fit.diagnostics,
    }


def write_fit_json(path, fit: McmlFit, design_info: DesignInfo | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(fit_to_dict(fit, design_info), fh, indent=1)


@dataclass
class LoadedFit:
    """A fit document read back from disk.

    Carries the estimate, covariances, and the reconstructed latent field;
    the projection basis is rebuilt deterministically from the stored recipe
    when prediction needs it.
    """

    psi_hat: PsiParams
    family: str
    domain: str
    converged: bool
    parameter_names: list
    hessian_at_hat: np.ndarray | None
    fisher_cov: np.ndarray | None
    mc_error_cov: np.ndarray | None
    config: McmlConfig | None
    design_info: DesignInfo | None
    coords: np.ndarray | None
    offset: np.ndarray | None
    basis_info: dict | None
    w_obs: np.ndarray | None
    w_samples: np.ndarray | None
    trace: list
    diagnostics: dict
    raw: dict


def read_fit_json(path) -> LoadedFit:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "sglmm-fit/1":
        raise InputError(f"{path}: not a fit document")

    def arr(key):
        val = doc.get(key)
        return None if val is None else np.asarray(val, dtype=float)

    return LoadedFit(
        psi_hat=PsiParams.from_dict(doc["psi_hat"]),
        family=doc["family"],
        domain=doc["domain"],
        converged=doc["converged"],
        parameter_names=doc["parameter_names"],
        hessian_at_hat=arr("hessian_at_hat"),
        fisher_cov=arr("fisher_cov"),
        mc_error_cov=arr("mc_error_cov"),
        config=None if doc.get("config") is None else McmlConfig.from_dict(doc["config"]),
        design_info=None if doc.get("design_info") is None
        else DesignInfo.from_dict(doc["design_info"]),
        coords=arr("coords"),
        offset=arr("offset"),
        basis_info=doc.get("basis"),
        w_obs=arr("w_obs"),
        w_samples=arr("w_samples"),
        trace=doc.get("trace", []),
        diagnostics=doc.get("diagnostics", {}),
        raw=doc,
    )


def sha256_of(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path, command: str, config: dict, seeds: dict,
                   outputs: list, wall_time: float) -> None:
    """Run manifest: config echo, seeds, output hashes, versions, timing.

    For a fixed config and seed set the output hashes are reproducible;
    wall time is informational only.
    """
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seeds": seeds,
        "outputs": {str(p): sha256_of(p) for p in outputs},
        "wall_time_seconds": wall_time,
        "created_unix": time.time(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def format_parameter_table(names, estimates, fisher: list | None,
                           mc_se: np.ndarray | None,
                           bootstrap: list | None = None) -> str:
    """Fixed-width parameter table with one row per parameter."""
    lines = [f"{'parameter':<12}{'estimate':>12}{'fisher_lo':>12}{'fisher_hi':>12}"
             f"{'mc_se':>12}{'boot_lo':>12}{'boot_hi':>12}"]
    fisher_map = {r.name: r for r in (fisher or [])}
    boot_map = {r.name: r for r in (bootstrap or [])}

    def fmt(v):
        if v is None:
            return f"{'NA':>12}"
        if isinstance(v, str):
            return f"{v:>12}"
        return f"{v:>12.5g}"

    all_names = list(names)
    for extra in boot_map:
        if extra not in all_names:
            all_names.append(extra)
    est_map = dict(zip(names, estimates))
    for i, name in enumerate(all_names):
        est = est_map.get(name)
        if est is None and name in boot_map:
            est = boot_map[name].estimate
        frow = fisher_map.get(name)
        flo = fhi = "NA"
        if frow is not None and frow.available:
            flo, fhi = frow.lower, frow.upper
        se = None
        if mc_se is not None and i < len(names):
            se = float(mc_se[i])
        brow = boot_map.get(name)
        blo = brow.lower if brow else None
        bhi = brow.upper if brow else None
        lines.append(f"{name:<12}" + fmt(est) + fmt(flo) + fmt(fhi)
                     + fmt(se) + fmt(blo) + fmt(bhi))
    return "\n".join(lines)


__all__ = [
    "DesignInfo",
    "LoadedFit",
    "format_parameter_table",
    "read_dataset_csv",
    "read_edge_list",
    "read_fit_json",
    "sha256_of",
    "write_dataset_csv",
    "write_edge_list",
    "write_fit_json",
    "write_manifest",
]
