"""Command-line entry point: simulate, fit, diagnose, summarize, check-identifiability."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .basis import BasisSpec
from .errors import CafmmError
from .io import (
    REPORT_SCHEMA,
    SIM_SCHEMA,
    RunConfig,
    canonical_json,
    file_sha256,
    load_chain,
    load_config,
    load_dataset,
    read_manifest,
    save_chain,
    save_dataset,
    to_jsonable,
    write_json,
)
from .model import ModelData

log = logging.getLogger("cafmm")


def _parse_vectors(text, R):
    """``"0.5,1;2,3"`` -> list of covariate vectors."""
    if text is None:
        return None
    out = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        vals = [float(v) for v in chunk.split(",")] if chunk else []
        if len(vals) != R:
            raise CafmmError(f"covariate vector {chunk!r} has {len(vals)} entries, expected {R}")
        out.append(vals)
    return out


def _parse_grid(text, domain):
    if text is None:
        return np.linspace(domain[0], domain[1], 50)
    text = text.strip()
    if "," not in text:
        return np.linspace(domain[0], domain[1], int(text))
    return np.array([float(v) for v in text.split(",")])


def _basis_from_meta(meta) -> BasisSpec:
    return BasisSpec(num_basis=int(meta["P"]), degree=int(meta["basis_degree"]), domain=tuple(meta["basis_domain"]))


def _data_hashes(curves, covariates):
    return {"curves_sha256": file_sha256(curves), "covariates_sha256": file_sha256(covariates) if covariates else None}


def _load_fit_data(args, manifest):
    ds = load_dataset(args.data, args.covariates)
    want = manifest.get("data_hashes")
    if want is not None:
        got = _data_hashes(args.data, args.covariates)
        if got != want:
            raise CafmmError("data files do not match the data the chain was fitted to")
    return ModelData(ds, _basis_from_meta(manifest["meta"]))


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    from .simulation import ScenarioSpec, generate

    spec = ScenarioSpec(scenario=args.scenario, N=args.n, grid_size=args.grid_size, P=args.P,
                        seed=args.seed, sigma2=args.sigma2)
    ds, truth = generate(spec)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(ds, os.path.join(args.out, "curves.csv"), os.path.join(args.out, "covariates.csv"))
    truth_d = {k: getattr(truth, k) for k in ("nu", "eta", "phi", "chi", "Z", "sigma2")}
    write_json(os.path.join(args.out, "truth.json"), to_jsonable(truth_d))
    write_json(os.path.join(args.out, "manifest.json"), {
        "schema": SIM_SCHEMA,
        "scenario": {"scenario": spec.scenario, "N": spec.N, "grid_size": spec.grid_size, "P": spec.P,
                     "seed": spec.seed, "sigma2": spec.sigma2},
        "dims": dict(zip(("K", "M", "R"), spec.dims)),
        "files": ["covariates.csv", "curves.csv", "truth.json"],
    })
    print(f"wrote {spec.N} curves to {args.out}")
    return 0


def cmd_fit(args) -> int:
    from .sampler import run_chain

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.sampler.seed = args.seed
    ds = load_dataset(args.data, args.covariates)
    dom = cfg.dims.domain
    if dom is None:
        allt = np.concatenate(ds.times)
        dom = [float(allt.min()), float(allt.max())]
    basis = BasisSpec(num_basis=cfg.dims.P, degree=cfg.dims.degree, domain=tuple(dom))
    data = ModelData(ds, basis)
    store = run_chain(data, cfg.dims.K, cfg.dims.M, cfg.hyper, cfg.sampler, cfg.covariance_adjusted)
    effective = cfg.to_dict()
    effective["dims"]["domain"] = list(basis.domain)
    effective["data"] = {"curves": None, "covariates": None}
    save_chain(store, args.out, config=effective, extra={"data_hashes": _data_hashes(args.data, args.covariates)})
    rates = store.acceptance_rates()
    print(f"stored {store.n_stored} draws in {args.out}; acceptance " +
          ", ".join(f"{k}={v:.3f}" for k, v in sorted(rates.items())))
    return 0


def _postprocess(chain, diag):
    from .identifiability import relabel_chain, rescale_separability

    if diag.get("relabel", True) and chain.K > 1:
        chain = relabel_chain(chain)
    if diag.get("rescale", True) and chain.K == 2:
        chain = rescale_separability(chain)
    return chain


def cmd_diagnose(args) -> int:
    from .diagnostics import build_report

    manifest = read_manifest(args.chain)
    chain = load_chain(args.chain)
    data = _load_fit_data(args, manifest)
    diag = (manifest.get("config") or {}).get("diagnostics") or {}
    chain = _postprocess(chain, diag)
    grid = np.linspace(*data.basis.domain, int(diag.get("grid_size", 50)))
    cov = diag.get("covariate_values")
    report = build_report(
        chain, data, covariate_values=cov, grid=grid, dic=diag.get("dic", True), cpo=diag.get("cpo", True),
        eigen=diag.get("eigen", True), identifiability=diag.get("identifiability", True),
    )
    out = {"schema": REPORT_SCHEMA, "chain_config_hash": manifest.get("config_hash"), "report": report.to_dict()}
    write_json(args.out, to_jsonable(out))
    print(f"aic={report.aic:.4f} bic={report.bic:.4f} dic={report.dic} log_pml={report.log_pml}")
    return 0


def cmd_summarize(args) -> int:
    from .diagnostics import posterior_summary

    manifest = read_manifest(args.chain)
    chain = _postprocess(load_chain(args.chain), (manifest.get("config") or {}).get("diagnostics") or {})
    basis = _basis_from_meta(manifest["meta"])
    grid = _parse_grid(args.grid, basis.domain)
    xs = _parse_vectors(args.covariate_values, int(manifest["dims"]["R"]))
    summ = posterior_summary(chain, basis, grid, xs)
    text = canonical_json(to_jsonable(summ))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_check(args) -> int:
    from .identifiability import check_assumptions

    manifest = read_manifest(args.chain)
    chain = load_chain(args.chain)
    ds = load_dataset(args.data, args.covariates)
    Zbar = chain.draws["Z"].mean(axis=0)
    if Zbar.shape[0] != ds.N:
        raise CafmmError("chain and data disagree on the number of curves")
    rep = check_assumptions(ds.X, Zbar, ds.lengths, int(manifest["dims"]["P"]))
    text = canonical_json(to_jsonable(rep.to_dict()))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cafmm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--scenario", required=True, choices=["two_cov", "one_cov", "no_cov", "ic_study"])
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--grid-size", type=int, default=25)
    s.add_argument("--P", type=int, default=8)
    s.add_argument("--sigma2", type=float, default=1.0)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="run the sampler and write a chain archive")
    f.add_argument("--data", required=True)
    f.add_argument("--covariates")
    f.add_argument("--config")
    f.add_argument("--seed", type=int)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    d = sub.add_parser("diagnose", help="compute information criteria and summaries")
    d.add_argument("--chain", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--covariates")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_diagnose)

    m = sub.add_parser("summarize", help="posterior bands of the feature means")
    m.add_argument("--chain", required=True)
    m.add_argument("--grid", help="number of points or comma-separated times")
    m.add_argument("--covariate-values", help="vectors separated by ';', entries by ','")
    m.add_argument("--out")
    m.set_defaults(func=cmd_summarize)

    c = sub.add_parser("check-identifiability", help="check the rank conditions")
    c.add_argument("--data", required=True)
    c.add_argument("--covariates")
    c.add_argument("--chain", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return int(args.func(args) or 0)
    except (CafmmError, OSError, ValueError) as exc:
        print(f"cafmm {args.command}: error: {exc}", file=sys.stderr)
        return 2


cli = main

if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
