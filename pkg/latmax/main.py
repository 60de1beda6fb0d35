import argparse
import itertools
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import structlog
from pydantic import ValidationError
from pythonjsonlogger import jsonlogger

from . import __version__
from .adlm import adlm_pvalues, boundary_profile_for
from .config import settings
from .covariance import (
    NeighborhoodCov,
    discrete_adjacent_rho,
    empirical_cov,
    eta_for_rho,
    kernel_cov,
    kronecker_cov,
    psd_repair,
)
from .errors import InvalidInputError, LatmaxError
from .fieldsim import reference_distribution, simulate
from .lattice import build_neighborhood, eta_to_fwhm, find_peaks, fwhm_to_eta, fwhm_to_rho, rho_to_fwhm
from .lookup import build_table, default_rho_grid, query, smooth_table
from .mcdlm import SamplingModel, peak_pvalues, sample_local_maxima
from .pipeline import METHODS, StudyData, analyze_peaks, one_sample_t
from .schemas import AdlmParams, KernelSpec, LatticeSpec, SimSpec
from . import storage
from .validate import bh_adjust, emit_pp_svg, mean_ratio, pp_data, rmse_identity

logger = structlog.get_logger("latmax")


def setup_logging(level: Optional[str] = None, fmt: Optional[str] = None):
    """Structured logging to stderr; JSON lines unless ``fmt`` is ``console``"""
    level = (level or settings.LOG_LEVEL).upper()
    fmt = fmt or settings.LOG_FORMAT
    handler = logging.StreamHandler(sys.stderr)
    if fmt == "json":
        handler.setFormatter(jsonlogger.JsonFormatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
    else:
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)-7s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, level))

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            structlog.stdlib.render_to_log_kwargs,
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=False,
    )


# --- argument helpers -----------------------------------------------------


def parse_model(text: str) -> SamplingModel:
    """``gaussian`` or ``t:<nu>``"""
    if text.startswith("t:"):
        try:
            return SamplingModel.student_t(int(text[2:]))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad degrees of freedom in '{text}'") from None
    if text == "gaussian":
        return SamplingModel.gaussian()
    raise argparse.ArgumentTypeError(f"model must be 'gaussian' or 't:<nu>', got '{text}'")


def _lattice(args) -> LatticeSpec:
    steps = tuple(args.steps) if args.steps else (1.0,) * args.dim
    sizes = tuple(args.size) if len(args.size) > 1 else (args.size[0],) * args.dim
    return LatticeSpec(dim=args.dim, sizes=sizes, steps=steps)


def _kernel(args, lattice: LatticeSpec) -> KernelSpec:
    """Kernel from --eta, --fwhm or --rho (lattice-sum correlation per axis)"""
    if args.eta:
        etas = tuple(args.eta)
    elif args.fwhm:
        etas = tuple(fwhm_to_eta(f) for f in args.fwhm)
    elif args.rho:
        rhos = args.rho if len(args.rho) > 1 else args.rho * lattice.dim
        discrete = args.kernel != "continuous"
        etas = tuple(eta_for_rho(r, lattice.steps[d], discrete) for d, r in enumerate(rhos))
    else:
        raise InvalidInputError("Give the kernel width with --eta, --fwhm or --rho")
    if args.kernel == "isotropic" and len(set(etas)) > 1:
        raise InvalidInputError("An isotropic kernel takes one width; use --kernel elliptical")
    return KernelSpec(kind=args.kernel, etas=etas[:1] if args.kernel == "isotropic" else etas)


def _mask(path) -> Optional[np.ndarray]:
    if not path:
        return None
    return storage.read_volume(path).array != 0


def _emit(frame: pd.DataFrame, out: Optional[str]):
    if out:
        storage.write_csv(out, frame)
        logger.info("wrote table", path=out, rows=len(frame))
    else:
        frame.to_csv(sys.stdout, index=False, float_format=storage.FLOAT_FORMAT, lineterminator="\n")


def _cov_from_args(args) -> NeighborhoodCov:
    if getattr(args, "cov", None):
        cov = psd_repair(storage.read_cov(args.cov))
        if args.nbhd:
            wanted = build_neighborhood(args.nbhd, cov.nbhd.dim)
            if wanted != cov.nbhd:
                cov = cov.select(wanted)
                logger.info("covariance restricted", nbhd=args.nbhd, size=cov.nbhd.size)
        return cov
    if args.rho is None:
        raise InvalidInputError("Give either --cov or --rho")
    nbhd = build_neighborhood(args.nbhd or "fc", args.dim)
    return kronecker_cov(args.rho, args.dim, nbhd)


# --- commands -------------------------------------------------------------


def cmd_rho(args):
    if args.fwhm is not None:
        eta = fwhm_to_eta(args.fwhm)
        rho = discrete_adjacent_rho(eta, args.step) if args.discrete else fwhm_to_rho(args.fwhm, args.step)
        print(f"{rho:.10g}")
    elif args.discrete:
        print(f"{eta_to_fwhm(eta_for_rho(args.rho, args.step)):.10g}")
    else:
        print(f"{rho_to_fwhm(args.rho, args.step):.10g}")


def cmd_cov_build(args):
    nbhd = build_neighborhood(args.nbhd, args.dim)
    if args.kind == "kronecker":
        if args.rho is None or len(args.rho) != 1:
            raise InvalidInputError("The Kronecker covariance takes a single --rho")
        cov = kronecker_cov(args.rho[0], args.dim, nbhd)
    else:
        lattice = LatticeSpec(dim=args.dim, sizes=(3,) * args.dim, steps=tuple(args.steps or (1.0,) * args.dim))
        cov = kernel_cov(_kernel(args, lattice), lattice, nbhd)
    storage.write_cov(args.output, cov)
    logger.info("covariance built", provenance=cov.provenance, size=cov.size, fingerprint=cov.fingerprint())


def cmd_cov_estimate(args):
    fields = storage.read_volumes(args.volumes)
    nbhd = build_neighborhood(args.nbhd, fields[0].lattice.dim)
    cov = empirical_cov(fields, nbhd, isotropic=args.isotropic, standardize=args.standardize, mask=_mask(args.mask))
    if not args.no_repair:
        cov = psd_repair(cov)
    storage.write_cov(args.output, cov)
    logger.info(
        "covariance estimated",
        fields=len(fields),
        psd_repaired=cov.psd_repaired,
        clipped=cov.clipped,
        axis_rho=cov.adjacent_correlations(),
    )


def cmd_sample(args):
    cov = _cov_from_args(args)
    samples = sample_local_maxima(
        cov, args.model, target_n=args.target_n, max_m=args.max_m, seed=args.seed, threads=args.threads
    )
    storage.write_samples(args.output, samples)
    logger.info(
        "sample set written",
        path=args.output,
        accepted=samples.n_accepted,
        attempted=samples.n_attempted,
        acceptance_rate=samples.acceptance_rate,
    )


def _heights(args) -> np.ndarray:
    if args.height is not None:
        return np.asarray(args.height, dtype=np.float64)
    if args.heights:
        frame = storage.read_csv(args.heights)
        column = args.column or ("height" if "height" in frame.columns else frame.columns[0])
        return frame[column].to_numpy(dtype=np.float64)
    raise InvalidInputError("Give --height or --heights")


def cmd_pvalue(args):
    u = _heights(args)
    if args.samples:
        p, censored = peak_pvalues(storage.read_samples(args.samples), u)
    elif args.table:
        if args.rho is None:
            raise InvalidInputError("Table queries need --rho")
        table = storage.read_table(args.table)
        results = [query(table, args.rho, float(x)) for x in u]
        p = np.array([r.value for r in results])
        censored = np.array([r.censored for r in results])
    else:
        raise InvalidInputError("Give --samples or --table")
    _emit(pd.DataFrame({"height": u, "p": p, "censored": censored}), args.output)


def cmd_adlm(args):
    rhos = tuple(args.rho) if len(args.rho) > 1 else tuple(args.rho) * args.dim
    params = AdlmParams(rhos=rhos, profile=tuple(args.profile or ()))
    u = np.asarray(args.u, dtype=np.float64)
    _emit(pd.DataFrame({"u": u, "p": adlm_pvalues(params, u)}), args.output)


def cmd_simulate(args):
    lattice = _lattice(args)
    kernel = _kernel(args, lattice)
    model = args.model
    spec = SimSpec(
        lattice=lattice,
        kernel=kernel,
        model="mixture" if model == "mixture" else ("t" if model.startswith("t:") else "gaussian"),
        nu=int(model[2:]) if model.startswith("t:") else None,
        n_fields=args.n_fields,
        seed=args.seed,
        padding=args.padding,
    )
    out = Path(args.out_dir)
    for i, field in enumerate(simulate(spec, args.threads)):
        storage.write_volume(out / f"field_{i:05d}.vol", field)
    logger.info("fields simulated", count=spec.n_fields, model=spec.model, padding=spec.resolved_padding())


def cmd_peaks(args):
    field = storage.read_volume(args.volume)
    nbhd = build_neighborhood(args.nbhd, field.lattice.dim)
    mask = _mask(args.mask)
    if args.adlm_rho and nbhd.kind != "pc":
        raise InvalidInputError("ADLM p-values need the PC neighborhood; use --nbhd pc")
    peaks = find_peaks(field, nbhd, args.boundary, mask)
    if args.adlm_rho:
        rhos = tuple(args.adlm_rho) if len(args.adlm_rho) > 1 else tuple(args.adlm_rho) * field.lattice.dim
        updated = []
        for p in peaks:
            profile = boundary_profile_for(p.location, field.lattice, mask)
            pv = float(adlm_pvalues(AdlmParams(rhos=rhos, profile=profile), p.height))
            updated.append(p.model_copy(update={"pvalues": {"adlm": pv}}))
        peaks = updated
    _emit(storage.peaks_frame(peaks, field.lattice.dim), args.output)


def cmd_reference(args):
    first = storage.read_volume(args.volumes[0])
    fields = itertools.chain([first], (storage.read_volume(p) for p in args.volumes[1:]))
    nbhd = build_neighborhood(args.nbhd, first.lattice.dim)
    ref = reference_distribution(fields, nbhd, args.boundary, _mask(args.mask))
    storage.write_samples(args.output, ref.as_sample_set(seed=args.seed))
    if args.csv:
        frame = pd.DataFrame({"field": ref.field_index})
        for d in range(first.lattice.dim):
            frame[f"x{d}"] = ref.locations[:, d]
        frame["height"] = ref.heights
        frame["p"] = ref.pvalues
        storage.write_csv(args.csv, frame)
    logger.info("reference pooled", peaks=ref.size, fields=ref.n_fields)


def cmd_lookup_build(args):
    grid = None
    if args.rho_grid:
        grid = np.asarray(args.rho_grid, dtype=np.float64)
    table = build_table(
        args.dim,
        samples_per_rho=args.samples_per_rho,
        seed=args.seed,
        n_u=args.n_u,
        rho_grid=grid if grid is not None else default_rho_grid(),
        threads=args.threads,
    )
    storage.write_table(args.output, table)


def cmd_lookup_smooth(args):
    table = smooth_table(storage.read_table(args.table), lam_rho=args.lam_rho, lam_u=args.lam_u)
    storage.write_table(args.output, table)


def cmd_lookup_query(args):
    table = storage.read_table(args.table)
    results = [query(table, args.rho, float(u)) for u in args.u]
    frame = pd.DataFrame(
        {"u": args.u, "p": [r.value for r in results], "censored": [r.censored for r in results]}
    )
    _emit(frame, args.output)


def _study(args) -> StudyData:
    return StudyData(tuple(storage.read_volumes(args.volumes)), _mask(args.mask))


def cmd_tstat(args):
    tmap = one_sample_t(_study(args))
    storage.write_volume(args.output, tmap.field)
    print(tmap.nu)


def _external(path, dim: int):
    if not path:
        return None
    frame = storage.read_csv(path)
    coords = [f"x{d}" for d in range(dim)]
    missing = [c for c in coords + ["p"] if c not in frame.columns]
    if missing:
        raise InvalidInputError(f"External p-value file lacks columns {missing}")
    return {tuple(int(r[c]) for c in coords): float(r["p"]) for r in frame.to_dict(orient="records")}


def cmd_analyze(args):
    study = _study(args)
    nbhd = build_neighborhood(args.nbhd, study.lattice.dim)
    result = analyze_peaks(
        study,
        nbhd,
        args.method,
        boundary_policy=args.boundary,
        isotropic=args.isotropic,
        table=storage.read_table(args.table) if args.table else None,
        external=_external(args.external, study.lattice.dim),
        target_n=args.target_n,
        max_m=args.max_m,
        seed=args.seed,
        threads=args.threads,
        alpha=args.alpha,
    )
    storage.write_peaks(args.output, result.peaks, study.lattice.dim)
    logger.info(
        "analysis done",
        method=result.method,
        peaks=len(result.peaks),
        rejected=result.bh.n_rejected if result.bh else 0,
        axis_rho=[round(r, 4) for r in result.axis_rhos],
        axis_fwhm=[round(f, 3) for f in result.axis_fwhm],
    )


def cmd_validate(args):
    reference = storage.read_pvalue_column(args.reference)
    methods = {}
    for item in args.method:
        label, _, path = item.partition("=")
        if not path:
            raise InvalidInputError(f"--method expects label=path, got '{item}'")
        methods[label] = storage.read_pvalue_column(path)
    window = tuple(args.window) if args.window else None
    rows = [
        {
            "method": label,
            "mean_ratio": mean_ratio(reference, p, window),
            "rmse": rmse_identity(reference, p, window),
        }
        for label, p in methods.items()
    ]
    _emit(pd.DataFrame(rows, columns=["method", "mean_ratio", "rmse"]), args.metrics)
    if args.svg:
        emit_pp_svg(pp_data(reference, methods), args.svg, title=args.title or "")


def cmd_bh(args):
    frame = storage.read_csv(args.csv)
    column = args.column or ("p" if "p" in frame.columns else frame.columns[-1])
    result = bh_adjust(frame[column].to_numpy(dtype=np.float64), args.alpha)
    frame["p_adjusted"] = result.adjusted
    frame["rejected"] = result.rejected
    _emit(frame, args.output)
    logger.info("bh done", tests=len(frame), rejected=result.n_rejected)


# --- parser ---------------------------------------------------------------


def _add_kernel_args(p):
    p.add_argument("--kernel", choices=["isotropic", "elliptical", "continuous"], default="isotropic")
    width = p.add_mutually_exclusive_group()
    width.add_argument("--eta", type=float, nargs="+", help="kernel standard deviation(s)")
    width.add_argument("--fwhm", type=float, nargs="+", help="kernel FWHM(s)")
    width.add_argument("--rho", type=float, nargs="+", help="adjacent-voxel correlation(s)")
    p.add_argument("--steps", type=float, nargs="+")


def build_parser() -> argparse.ArgumentParser:
    # flags accepted both before and after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="64-bit master seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads (0 = all cores)")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(
        prog="latmax", description="Peak height distributions of lattice random fields", parents=[common]
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-format", choices=["json", "console"], default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rho", parents=[common], help="FWHM <-> adjacent correlation")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--fwhm", type=float)
    g.add_argument("--rho", type=float)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--discrete", action="store_true", help="use the lattice-sum correlation")
    p.set_defaults(func=cmd_rho)

    cov = sub.add_parser("cov", help="neighborhood covariance").add_subparsers(dest="cov_command", required=True)
    p = cov.add_parser("build", parents=[common], help="analytic covariance -> CSV")
    p.add_argument("--kind", choices=["kronecker", "kernel"], default="kronecker")
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--nbhd", choices=["pc", "fc"], default="fc")
    _add_kernel_args(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_cov_build)

    p = cov.add_parser("estimate", parents=[common], help="empirical covariance from volumes -> CSV")
    p.add_argument("volumes", nargs="+")
    p.add_argument("--nbhd", choices=["pc", "fc"], default="fc")
    p.add_argument("--isotropic", action="store_true")
    p.add_argument("--standardize", choices=["voxel", "global", "none"], default="voxel")
    p.add_argument("--mask")
    p.add_argument("--no-repair", action="store_true")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_cov_estimate)

    p = sub.add_parser("sample", parents=[common], help="MCDLM sampling -> sample-set file")
    p.add_argument("--cov", help="covariance CSV")
    p.add_argument("--rho", type=float, help="Kronecker covariance correlation")
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--nbhd", choices=["pc", "fc"], help="default fc; with --cov, restricts the file to this neighborhood")
    p.add_argument("--model", type=parse_model, default=SamplingModel.gaussian(), help="gaussian | t:<nu>")
    p.add_argument("--target-n", type=int)
    p.add_argument("--max-m", type=int)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("pvalue", parents=[common], help="p-values from a sample set or lookup table")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--samples")
    src.add_argument("--table")
    p.add_argument("--rho", type=float)
    p.add_argument("--height", type=float, nargs="+")
    p.add_argument("--heights", help="CSV with a height column")
    p.add_argument("--column")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_pvalue)

    p = sub.add_parser("adlm", parents=[common], help="closed-form PC peak p-values")
    p.add_argument("--rho", type=float, nargs="+", required=True)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--u", type=float, nargs="+", required=True)
    p.add_argument("--profile", type=int, nargs="+")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_adlm)

    p = sub.add_parser("simulate", parents=[common], help="smoothed random fields -> volume files")
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--size", type=int, nargs="+", default=[50])
    _add_kernel_args(p)
    p.add_argument("--model", default="gaussian", help="gaussian | t:<nu> | mixture")
    p.add_argument("--n-fields", type=int, default=1)
    p.add_argument("--padding", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("peaks", parents=[common], help="local maxima of a volume -> CSV")
    p.add_argument("volume")
    p.add_argument("--nbhd", choices=["pc", "fc"], default="fc")
    p.add_argument("--boundary", choices=["exclude", "reduced"], default="exclude")
    p.add_argument("--mask")
    p.add_argument("--adlm-rho", type=float, nargs="+", help="attach closed-form PC p-values")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_peaks)

    p = sub.add_parser("reference", parents=[common], help="pooled peak heights of simulated volumes")
    p.add_argument("volumes", nargs="+")
    p.add_argument("--nbhd", choices=["pc", "fc"], default="fc")
    p.add_argument("--boundary", choices=["exclude", "reduced"], default="exclude")
    p.add_argument("--mask")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--csv", help="per-peak reference p-values")
    p.set_defaults(func=cmd_reference)

    lookup = sub.add_parser("lookup", help="precomputed CDF tables").add_subparsers(
        dest="lookup_command", required=True
    )
    p = lookup.add_parser("build", parents=[common])
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--samples-per-rho", type=int)
    p.add_argument("--n-u", type=int)
    p.add_argument("--rho-grid", type=float, nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_lookup_build)
    p = lookup.add_parser("smooth", parents=[common])
    p.add_argument("table")
    p.add_argument("--lam-rho", type=float)
    p.add_argument("--lam-u", type=float)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_lookup_smooth)
    p = lookup.add_parser("query", parents=[common])
    p.add_argument("table")
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--u", type=float, nargs="+", required=True)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_lookup_query)

    p = sub.add_parser("tstat", parents=[common], help="one-sample t map of subject volumes")
    p.add_argument("volumes", nargs="+")
    p.add_argument("--mask")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_tstat)

    p = sub.add_parser("analyze", parents=[common], help="t map, peaks, p-values and BH")
    p.add_argument("volumes", nargs="+")
    p.add_argument("--mask")
    p.add_argument("--nbhd", choices=["pc", "fc"], default="fc")
    p.add_argument("--method", choices=METHODS, default="mcdlm_t")
    p.add_argument("--boundary", choices=["exclude", "reduced"], default="exclude")
    p.add_argument("--isotropic", action="store_true", help="pool covariance lags of equal length")
    p.add_argument("--table")
    p.add_argument("--external", help="CSV with x0.. and p columns")
    p.add_argument("--target-n", type=int)
    p.add_argument("--max-m", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("validate", parents=[common], help="pp metrics and plot")
    p.add_argument("--reference", required=True, help="CSV with a p column")
    p.add_argument("--method", action="append", required=True, help="label=path.csv")
    p.add_argument("--window", type=float, nargs=2)
    p.add_argument("--metrics")
    p.add_argument("--svg")
    p.add_argument("--title")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("bh", parents=[common], help="Benjamini-Hochberg adjustment of a p column")
    p.add_argument("csv")
    p.add_argument("--column")
    p.add_argument("--alpha", type=float)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_bh)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed = getattr(args, "seed", settings.DEFAULT_SEED)
    args.threads = getattr(args, "threads", settings.THREADS)
    quiet = getattr(args, "quiet", False)
    setup_logging("WARNING" if quiet else None, args.log_format)

    try:
        args.func(args)
    except LatmaxError as e:
        logger.error("command failed", command=args.command, error=type(e).__name__, detail=e.detail)
        return e.exit_code
    except (ValidationError, ValueError) as e:
        logger.error("invalid input", command=args.command, detail=str(e))
        return 2
    except OSError as e:
        logger.error("i/o failure", command=args.command, detail=str(e))
        return 4
    except Exception:
        logger.exception("unexpected failure", command=args.command)
        return 1
    return 0
