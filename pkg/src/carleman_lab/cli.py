"""Batch driver: load one configuration, run the pipelines, emit report files.

The configuration is a single JSON document validated against the schema
shipped in ``schema/config.schema.json``.  Unknown keys are errors at every
depth, so a typo cannot silently change an experiment.  Each command reads
only the blocks it needs and writes its reports into the configured output
directory; every report embeds the hash of the effective configuration and
the tool version, so an artifact can always be traced back to the exact
inputs that produced it.

Commands: ``plan`` (weight-parameter report), ``verify`` (weighted
inequality table plus identity residual table), ``make-instance``
(manufactured problem archive), ``reconstruct`` (lateral solve of the
noiseless instance), ``sweep`` (noise ladder CSV), ``all`` (the pipeline in
that order).  Exit codes: 0 success, 1 configuration or validation failure,
2 solver non-convergence, 3 filesystem trouble.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import IO, Mapping

import jsonschema
import numpy as np

from . import __version__
from .errors import SolverError, ValidationError
from .geometry import CylinderGeometry, FieldKind, GammaSide, discrete_norm
from .problems import (
    ProblemInstance,
    Recipe,
    axial_profile,
    cross_time_profile,
    make_instance,
    save_instance,
)
from .reconstruct import (
    Regularization,
    lateral_reconstruct,
    stability_region,
    stability_sweep,
    write_sweep_csv,
)
from .verifier import lemma1_residual, smooth_corpus, verify_carleman
from .weight import DMode, build_d, plan_parameters, plan_report, region_family

__all__ = [
    "ExperimentConfig",
    "load_config",
    "run",
    "main",
    "load_table_csv",
    "load_reconstruction",
    "CARLEMAN_CSV_HEADER",
    "LEMMA1_CSV_HEADER",
]

COMMANDS = ("plan", "verify", "make-instance", "reconstruct", "sweep", "all")

CARLEMAN_CSV_HEADER = "member,s,lhs,rhs,log_scale,ratio"
LEMMA1_CSV_HEADER = "member,coarse,fine,ratio"

_VERIFY_DEFAULTS: Mapping[str, object] = {
    "corpus_size": 20,
    "corpus_seed": 11,
    "s_values": (2.0, 5.0, 10.0, 20.0, 50.0),
    "c_cap": 10.0,
    "lemma1_members": 24,
    "lemma1_seed": 7,
}


# ---- configuration ------------------------------------------------------------------


def _schema() -> dict:
    text = resources.files("carleman_lab").joinpath("schema/config.schema.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated configuration document plus builders for the domain objects.

    ``raw`` is the parsed JSON; builders raise ValidationError when the block
    a command needs is absent, which keeps per-command requirements out of
    the schema (any block may be omitted if no executed command reads it).
    """

    raw: dict

    @property
    def config_hash(self) -> str:
        """Hash of the effective configuration (canonical JSON, SHA-256)."""
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        if "instance" not in self.raw:
            raise ValidationError("seed override needs an instance block in the config")
        raw = copy.deepcopy(self.raw)
        raw["instance"]["seed"] = int(seed)
        return ExperimentConfig(raw=raw)

    def _block(self, name: str) -> dict:
        if name not in self.raw:
            raise ValidationError(f"this command needs a {name!r} block in the config")
        return self.raw[name]

    def output_dir(self) -> str:
        return self.raw["output_dir"]

    def geometry(self) -> CylinderGeometry:
        gb = self._block("geometry")
        return CylinderGeometry(
            d_lo=float(gb["d_lo"]),
            d_hi=float(gb["d_hi"]),
            ell=float(gb["ell"]),
            delta=float(gb["delta"]),
            gamma_side=GammaSide(gb["gamma_side"]),
            nx_prime=int(gb["nx_prime"]),
            nx_n=int(gb["nx_n"]),
            nt=int(gb["nt"]),
        )

    def weight_plan(self, geometry: CylinderGeometry):
        wb = self._block("weight")
        has_window = "D0" in wb
        has_region = "region" in wb
        if has_window == has_region:
            raise ValidationError(
                "weight block needs exactly one of 'D0' (explicit window) or 'region' (collar search)"
            )
        lam = float(wb.get("lam", 1.0))
        margin = float(wb.get("margin", 1.1))
        if has_window:
            d, _ = build_d(geometry, DMode.EXPLICIT_INTERVAL)
            lo, hi = (float(v) for v in wb["D0"])
            delta0 = wb.get("delta0")
            return plan_parameters(
                d, (lo, hi),
                delta0=None if delta0 is None else float(delta0),
                lam=lam, margin=margin,
            )
        if "delta0" in wb:
            raise ValidationError(
                "delta0 applies to the explicit 'D0' form; the collar search sets its own time level"
            )
        rb = wb["region"]
        fam = region_family(
            geometry,
            float(rb["delta1"]),
            float(rb["x0_prime"]),
            None if rb.get("epsilon0") is None else float(rb["epsilon0"]),
            lam=lam,
            margin=margin,
        )
        return fam.plan

    def _profile(self, factory, spec: Mapping) -> object:
        params = dict(spec.get("params", {}))
        try:
            return factory(spec["name"], **params)
        except TypeError as exc:
            raise ValidationError(
                f"profile {spec['name']!r} rejected parameters {sorted(params)}: {exc}"
            ) from exc

    def recipe(self) -> Recipe:
        ib = self._block("instance")
        rb = ib["recipe"]
        return Recipe(
            a=self._profile(axial_profile, rb["a"]),
            b=self._profile(cross_time_profile, rb["b"]),
            f=self._profile(cross_time_profile, rb["f"]),
            p0=self._profile(cross_time_profile, ib["p0"]),
        )

    def noise_levels(self) -> list[float]:
        ib = self._block("instance")
        if "noise_levels" not in ib:
            raise ValidationError("this command needs 'noise_levels' in the instance block")
        return [float(v) for v in ib["noise_levels"]]

    def seed(self) -> int:
        return int(self._block("instance")["seed"])

    def regularization(self) -> Regularization:
        sb = self._block("solver")
        return Regularization(
            tikhonov_weight=float(sb["mu"]),
            carleman_s=float(sb.get("carleman_s", 0.0)),
            cg_tol=float(sb.get("cg_tol", 1e-8)),
            cg_maxit=int(sb.get("cg_maxit", 10000)),
            cauchy_weight=float(sb.get("cauchy_weight", 100.0)),
            face_weight=float(sb.get("face_weight", 100.0)),
        )

    def verify_settings(self) -> dict:
        merged = dict(_VERIFY_DEFAULTS)
        merged.update(self.raw.get("verify", {}))
        merged["s_values"] = [float(s) for s in merged["s_values"]]
        return merged


def load_config(path) -> ExperimentConfig:
    """Read, parse, and schema-validate a configuration file."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from exc
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        where = "/".join(str(p) for p in first.absolute_path) or "top level"
        raise ValidationError(f"config rejected at {where}: {first.message}")
    return ExperimentConfig(raw=raw)


# ---- report files -------------------------------------------------------------------


def _write_table_csv(stream: IO[str], header: str, rows, footer: Mapping[str, str]) -> None:
    """CSV with repr floats and a key=value footer block, LF endings."""
    stream.write(header + "\n")
    for row in rows:
        cells = [repr(v) if isinstance(v, float) else str(v) for v in row]
        stream.write(",".join(cells) + "\n")
    for key, value in footer.items():
        stream.write(f"{key}={value}\n")


def load_table_csv(stream: IO[str], expected_header: str) -> tuple[list[tuple], dict]:
    """Parse a table CSV back into float rows plus the footer mapping."""
    header = stream.readline().strip()
    if header != expected_header:
        raise ValidationError(f"unexpected CSV header {header!r}")
    ncols = len(expected_header.split(","))
    rows: list[tuple] = []
    footer: dict = {}
    for line in stream:
        line = line.strip()
        if not line:
            continue
        if "=" in line and "," not in line:
            key, _, value = line.partition("=")
            footer[key] = value
            continue
        parts = line.split(",")
        if len(parts) != ncols:
            raise ValidationError(f"malformed CSV row {line!r}")
        rows.append(tuple(float(p) for p in parts))
    return rows, footer


def _save_reconstruction(path, f_hat, u_hat, meta: dict) -> None:
    np.savez(
        path,
        f_hat=np.ascontiguousarray(f_hat, dtype="<f8"),
        u_hat=np.ascontiguousarray(u_hat, dtype="<f8"),
        meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
    )


def load_reconstruction(path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Inverse of the reconstruct command's archive writer."""
    with np.load(path, allow_pickle=False) as z:
        try:
            meta = json.loads(bytes(z["meta"]).decode())
            return z["f_hat"].copy(), z["u_hat"].copy(), meta
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"not a reconstruction archive: {exc}") from exc


# ---- commands -----------------------------------------------------------------------


def _say(quiet: bool, message: str) -> None:
    if not quiet:
        print(message)


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.config_hash, "version": __version__}


def _cmd_plan(cfg: ExperimentConfig, out_dir: Path, quiet: bool) -> list[Path]:
    plan = cfg.weight_plan(cfg.geometry())
    text = plan_report(plan)
    for key, value in _stamp(cfg).items():
        text += f"{key} = {value}\n"
    path = out_dir / "plan.txt"
    with path.open("w", newline="") as fh:
        fh.write(text)
    _say(
        quiet,
        f"plan: beta={plan.beta!r} alpha={plan.alpha!r} "
        f"sigma0/sigma1={plan.sigma0 / plan.sigma1!r}",
    )
    return [path]


def _cmd_verify(cfg: ExperimentConfig, out_dir: Path, quiet: bool) -> list[Path]:
    geometry = cfg.geometry()
    plan = cfg.weight_plan(geometry)
    vs = cfg.verify_settings()

    corpus = smooth_corpus(int(vs["corpus_size"]), int(vs["corpus_seed"]))
    report = verify_carleman(plan, corpus, vs["s_values"], c_cap=float(vs["c_cap"]))
    rows = [
        (i, sides.s, sides.lhs, sides.rhs, sides.log_scale, sides.ratio)
        for i, sides in report.rows
    ]
    smin = "none" if report.s_min_emp is None else repr(report.s_min_emp)
    footer = {
        "c_emp": repr(report.c_emp),
        "s_min_emp": smin,
        "c_cap": repr(report.c_cap),
        "corpus_size": str(report.corpus_size),
        "geometry": report.geometry_fingerprint,
        **_stamp(cfg),
    }
    carleman_path = out_dir / "carleman_rows.csv"
    with carleman_path.open("w", newline="") as fh:
        _write_table_csv(fh, CARLEMAN_CSV_HEADER, rows, footer)

    ident_corpus = smooth_corpus(
        int(vs["lemma1_members"]), int(vs["lemma1_seed"]), kind=FieldKind.SPACE_ONLY
    )
    coarse = geometry.extend()
    fine = coarse.refine()
    ident_rows = []
    in_window = 0
    for i, member in enumerate(ident_corpus):
        rc = lemma1_residual(member.sample(coarse)).normalized
        rf = lemma1_residual(member.sample(fine)).normalized
        ratio = rc / rf if rf > 0 else float("inf")
        if 3.5 <= ratio <= 4.5:
            in_window += 1
        ident_rows.append((i, rc, rf, ratio))
    ident_footer = {
        "in_window": str(in_window),
        "members": str(len(ident_rows)),
        "geometry": coarse.fingerprint(),
        "geometry_fine": fine.fingerprint(),
        **_stamp(cfg),
    }
    lemma1_path = out_dir / "lemma1_rows.csv"
    with lemma1_path.open("w", newline="") as fh:
        _write_table_csv(fh, LEMMA1_CSV_HEADER, ident_rows, ident_footer)

    _say(
        quiet,
        f"verify: c_emp={report.c_emp!r} s_min_emp={smin} "
        f"identity two-grid in window {in_window}/{len(ident_rows)}",
    )
    return [carleman_path, lemma1_path]


def _stamped_instance(cfg: ExperimentConfig) -> ProblemInstance:
    inst = make_instance(cfg.geometry(), cfg.recipe())
    return replace(inst, provenance={**inst.provenance, **_stamp(cfg)})


def _cmd_make_instance(cfg: ExperimentConfig, out_dir: Path, quiet: bool) -> list[Path]:
    inst = _stamped_instance(cfg)
    path = out_dir / "instance.npz"
    save_instance(inst, path)
    _say(
        quiet,
        f"make-instance: grid {inst.geometry.fingerprint()} "
        f"data size {inst.d_of_u!r}",
    )
    return [path]


def _cmd_reconstruct(cfg: ExperimentConfig, out_dir: Path, quiet: bool) -> list[Path]:
    geometry = cfg.geometry()
    plan = cfg.weight_plan(geometry)
    inst = _stamped_instance(cfg)
    reg = cfg.regularization()
    solution = lateral_reconstruct(inst.data, geometry, plan, inst.p0, inst.R, reg)

    diff = inst.f.with_values(solution.f_hat.values - inst.f.values)
    region = stability_region(plan)
    err_region = discrete_norm(diff, region=region)
    err_global = discrete_norm(diff)
    scale_region = discrete_norm(inst.f, region=region)
    meta = {
        "err_region": err_region,
        "err_global": err_global,
        "err_region_rel": err_region / scale_region,
        "iterations": solution.iterations,
        "geometry": geometry.fingerprint(),
        **_stamp(cfg),
    }
    path = out_dir / "reconstruction.npz"
    _save_reconstruction(path, solution.f_hat.values, solution.u_hat.values, meta)
    _say(
        quiet,
        f"reconstruct: err_region={err_region!r} err_global={err_global!r} "
        f"({solution.iterations} iterations)",
    )
    return [path]


def _cmd_sweep(cfg: ExperimentConfig, out_dir: Path, quiet: bool) -> list[Path]:
    geometry = cfg.geometry()
    plan = cfg.weight_plan(geometry)
    inst = _stamped_instance(cfg)
    reg = cfg.regularization()
    seed = cfg.seed()
    report = stability_sweep(inst, cfg.noise_levels(), plan, reg, seed=seed)
    footer = {"seed": str(seed), **_stamp(cfg)}
    path = out_dir / "sweep.csv"
    with path.open("w", newline="") as fh:
        write_sweep_csv(report, fh, footer=footer)
    _say(quiet, f"sweep: {len(report.rows)} rows, theta_emp={report.theta_emp!r}")
    return [path]


_RUNNERS = {
    "plan": _cmd_plan,
    "verify": _cmd_verify,
    "make-instance": _cmd_make_instance,
    "reconstruct": _cmd_reconstruct,
    "sweep": _cmd_sweep,
}


def run(command: str, cfg: ExperimentConfig, out_dir: Path, quiet: bool = False) -> list[Path]:
    """Execute one command (or the whole pipeline) and return written paths."""
    if command not in COMMANDS:
        raise ValidationError(f"unknown command {command!r}; choose from {COMMANDS}")
    names = list(_RUNNERS) if command == "all" else [command]
    written: list[Path] = []
    for name in names:
        written.extend(_RUNNERS[name](cfg, out_dir, quiet))
    return written


# ---- entry point --------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carleman-lab",
        description="Weight planning, inequality verification, and lateral reconstruction runs.",
    )
    parser.add_argument("--config", required=True, help="path to the JSON configuration")
    parser.add_argument("--command", required=True, choices=COMMANDS, help="pipeline stage to run")
    parser.add_argument("--out", default=None, help="output directory (overrides the config)")
    parser.add_argument(
        "--seed-override", type=int, default=None, help="replace the instance seed"
    )
    parser.add_argument("--quiet", action="store_true", help="suppress progress lines")
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage errors; fold the latter
        # into the validation-failure code so 2 keeps meaning solver trouble
        return 0 if exc.code == 0 else 1
    try:
        cfg = load_config(args.config)
        if args.seed_override is not None:
            cfg = cfg.with_seed(args.seed_override)
        out_dir = Path(args.out) if args.out is not None else Path(cfg.output_dir())
        out_dir.mkdir(parents=True, exist_ok=True)
        written = run(args.command, cfg, out_dir, quiet=args.quiet)
        for path in written:
            _say(args.quiet, f"wrote {path}")
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
