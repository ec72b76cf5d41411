"""``wipr`` command-line interface.

Subcommands: ``model``, ``forward``, ``invert``, ``bilinear`` and ``report``.
Every error is printed to stderr as one line starting with ``wipr: error:``
and the process exits nonzero.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datafile import read_data, write_data
from .grid import Bounds, Grid2D, ModelFormatError, make_toy_model, read_model, write_model
from .helmholtz import PmlProfile, SolverError, StencilConfig, assemble, forward_solve
from .inversion import (
    PENALTY_RULES,
    ConfigurationError,
    Dataset,
    InversionConfig,
    IterationLog,
    bilinear_recovery,
    run_inversion,
    simulate_data,
    surface_acquisition,
)
from .regularization import TTConfig

PROG = "wipr"
REPORT_COLUMNS = ("run", "model_error", "source_residual", "data_residual")

# paired runs: name -> per-batch modes (the last entry repeats)
MODE_PRESETS = {
    "irwri": ("irwri",),
    "wipr": ("wipr",),
    "wipr-first": ("wipr", "irwri"),
}


class CliError(Exception):
    """User-facing failure; the message is printed after the error prefix."""


# ---------------------------------------------------------------------------
# parsing helpers


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def parse_frequencies(text) -> list[float]:
    """``"3.0:0.5:4.0"`` (inclusive range) or a comma list ``"3, 3.5"``."""
    text = str(text).strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"frequency range must be start:step:stop, got {text!r}")
        start, step, stop = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ValueError(f"empty frequency range {text!r}")
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        # round away accumulated float noise so 3.0:0.1:3.3 gives 3.3, not 3.3000000000000003
        return [round(start + k * step, 12) for k in range(count)]
    freqs = [float(f) for f in text.split(",") if f.strip()]
    if not freqs:
        raise ValueError("no frequencies given")
    return freqs


def parse_schedule(text) -> list[list[float]]:
    """Batches separated by ``;``, each a frequency list or range."""
    return [parse_frequencies(b) for b in str(text).split(";") if b.strip()]


def parse_rect(text) -> tuple[int, int, int, int]:
    vals = [int(v) for v in str(text).split(",")]
    if len(vals) != 4:
        raise ValueError("rect must be x0,x1,z0,z1")
    return tuple(vals)


def parse_nodes(text) -> list[tuple[int, int]]:
    nodes = []
    for item in str(text).split(";"):
        if item.strip():
            ix, iz = (int(v) for v in item.split(","))
            nodes.append((ix, iz))
    return nodes


# ---------------------------------------------------------------------------
# experiment configuration


@dataclasses.dataclass
class ExperimentConfig:
    """Everything ``invert`` needs, parsed from a flat ``key = value`` file."""

    initial_model: Path
    data: Path
    output_dir: Path
    frequencies: list
    true_model: Path | None = None
    schedule: list | None = None
    batch_size: int = 2
    mode: str = "irwri"
    src_spacing: int = 4
    rec_spacing: int = 1
    src_depth: int = 1
    rec_depth: int = 1
    pml_thickness: int = 10
    pml_amplitude: float = 6.0
    stencil: str = "lumped"
    lam0: float = 1e-2
    lam: float | None = None
    penalty_rule: str = "data-ratio"
    max_iters: int = 30
    eps_source: float = 1e-3
    eps_data: float = 1e-5
    vmin: float | None = None
    vmax: float | None = None
    bounds_start: int = 1
    carry_multipliers: bool = False
    update_pml: bool = False
    wavelet_peak: float | None = None
    regularization: bool = False
    tv_weight: float = TTConfig.tv_weight
    alpha: float = TTConfig.alpha
    fit_weight: float = TTConfig.fit_weight
    inner_iters: int = TTConfig.inner_iters
    mu_tv: float = TTConfig.mu_tv
    mu_tikh: float = TTConfig.mu_tikh
    mu_bound: float = TTConfig.mu_bound
    emit_images: bool = True
    record_timing: bool = False
    seed: int = 0

    _PATHS = ("initial_model", "data", "output_dir", "true_model")
    _CONVERTERS = {
        "frequencies": parse_frequencies,
        "schedule": parse_schedule,
        "carry_multipliers": parse_bool,
        "update_pml": parse_bool,
        "regularization": parse_bool,
        "emit_images": parse_bool,
        "record_timing": parse_bool,
    }

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, raw: dict, base: Path = Path(".")) -> "ExperimentConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise CliError(f"unknown config key(s): {', '.join(unknown)}")
        missing = [k for k in ("initial_model", "data", "output_dir", "frequencies")
                   if k not in raw]
        if missing:
            raise CliError(f"missing required config key(s): {', '.join(missing)}")
        kwargs = {}
        for key, text in raw.items():
            try:
                kwargs[key] = cls._convert(key, text, known[key], base)
            except ValueError as exc:
                raise CliError(f"config key {key!r}: {exc}") from None
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def _convert(cls, key, text, fld, base):
        if text.strip().lower() in ("", "none") and fld.default is None:
            return None
        if key in cls._PATHS:
            p = Path(text.strip())
            return p if p.is_absolute() else base / p
        if key in cls._CONVERTERS:
            return cls._CONVERTERS[key](text)
        kind = type(fld.default) if fld.default is not None else float
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text.strip()

    def validate(self) -> None:
        paths = [getattr(self, k) for k in self._PATHS if getattr(self, k) is not None]
        resolved = [p.resolve() for p in paths]
        if len(set(resolved)) != len(resolved):
            raise CliError("config paths must be distinct")
        if self.mode not in (*MODE_PRESETS, "paired"):
            raise CliError(f"mode must be one of {', '.join([*MODE_PRESETS, 'paired'])}")
        if self.stencil not in ("lumped", "anti-lumped"):
            raise CliError("stencil must be 'lumped' or 'anti-lumped'")
        if self.penalty_rule not in PENALTY_RULES:
            raise CliError(f"penalty_rule must be one of {', '.join(PENALTY_RULES)}")
        if self.batch_size < 1:
            raise CliError("batch_size must be >= 1")
        if (self.vmin is None) != (self.vmax is None):
            raise CliError("vmin and vmax must be given together")
        if self.schedule is not None:
            stray = sorted({f for b in self.schedule for f in b} - set(self.frequencies))
            if stray:
                raise CliError("schedule uses frequencies not listed in 'frequencies': "
                               + ", ".join(f"{f:g}" for f in stray))

    def batches(self) -> list[list[float]]:
        if self.schedule is not None:
            return self.schedule
        f = sorted(self.frequencies)
        return [f[i:i + self.batch_size] for i in range(0, len(f), self.batch_size)]

    def pml(self) -> PmlProfile:
        return PmlProfile(self.pml_thickness, self.pml_amplitude)

    def stencil_config(self) -> StencilConfig:
        return StencilConfig.anti_lumped() if self.stencil == "anti-lumped" else StencilConfig()

    def inversion_config(self, modes) -> InversionConfig:
        reg = None
        if self.regularization:
            reg = TTConfig(self.tv_weight, self.alpha, self.fit_weight, self.inner_iters,
                           self.mu_tv, self.mu_tikh, self.mu_bound)
        bounds = None if self.vmin is None else Bounds.from_velocity(self.vmin, self.vmax)
        return InversionConfig(
            self.batches(), modes=modes, lam0=self.lam0, lam=self.lam,
            penalty_rule=self.penalty_rule, max_iters=self.max_iters,
            eps_source=self.eps_source, eps_data=self.eps_data, regularization=reg,
            bounds=bounds, bounds_start=self.bounds_start,
            carry_multipliers=self.carry_multipliers, update_pml=self.update_pml,
            pml=self.pml(), stencil=self.stencil_config(), wavelet_peak=self.wavelet_peak)

    def dump(self) -> str:
        lines = []
        for key in self.keys():
            v = getattr(self, key)
            if isinstance(v, Path):
                v = v.as_posix()
            elif key == "frequencies":
                v = ", ".join(repr(f) for f in v)
            elif key == "schedule":
                v = "none" if v is None else "; ".join(", ".join(repr(f) for f in b) for b in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            elif v is None:
                v = "none"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def read_config_text(text: str, source: str = "<config>") -> dict:
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       delimiters=("=",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[wipr]\n" + text, source=source)
    except configparser.Error as exc:
        raise CliError(f"{source}: {exc}".replace("\n", " ")) from None
    return dict(parser["wipr"])


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    raw = read_config_text(text, str(path))
    raw.update(overrides or {})
    return ExperimentConfig.from_mapping(raw, path.parent)


# ---------------------------------------------------------------------------
# outputs


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM; ``image`` is indexed ``[ix, iz]`` so width is ``nx``."""
    a = np.asarray(image, dtype=float)
    lo, hi = a.min(), a.max()
    scaled = np.zeros(a.shape) if hi == lo else (a - lo) / (hi - lo) * 255.0
    pixels = np.round(scaled).astype(np.uint8).T  # rows are depth
    nz, nx = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {nz}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Inverse of :func:`write_pgm`, returned as ``[ix, iz]``."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    nx, nz, maxval = (int(f) for f in fields[1:])
    pixels = np.frombuffer(raw, np.uint8, nx * nz, pos + 1).reshape(nz, nx)
    return pixels.T


def _write_manifest(path, entries: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in entries.items()))


# ---------------------------------------------------------------------------
# commands


def cmd_model(args) -> int:
    grid = Grid2D(args.nx, args.nz, args.h)
    params = {}
    if args.kind == "homogeneous":
        params["v"] = _need(args, "v")
    elif args.kind == "layered":
        params["velocities"] = [float(v) for v in _need(args, "velocities").split(",")]
        params["interfaces"] = [int(z) for z in _need(args, "interfaces").split(",")]
    elif args.kind == "inclusion":
        params.update(v_background=_need(args, "v_background"),
                      v_anomaly=_need(args, "v_anomaly"), rect=parse_rect(_need(args, "rect")))
    else:
        params.update(vmin=_need(args, "vmin"), vmax=_need(args, "vmax"), seed=args.seed,
                      correlation=args.correlation)
    model = make_toy_model(args.kind, grid, **params)
    write_model(args.out, model)
    print(f"wrote {args.out}: {args.kind} model {grid.nx}x{grid.nz}, h={grid.h:g}, "
          f"seed={args.seed}")
    return 0


def _need(args, name):
    value = getattr(args, name)
    if value is None:
        raise CliError(f"--{name.replace('_', '-')} is required for --kind {args.kind}")
    return value


def cmd_forward(args) -> int:
    model = read_model(args.model)
    freqs = sorted(parse_frequencies(args.frequencies))
    pml = PmlProfile(args.pml, args.pml_amplitude)
    stencil = StencilConfig.anti_lumped() if args.stencil == "anti-lumped" else StencilConfig()
    acq = surface_acquisition(model.grid, args.pml, args.src_spacing, args.rec_spacing,
                              args.src_depth, args.rec_depth)
    data = simulate_data(model, acq, freqs, pml, stencil, args.wavelet_peak)
    if args.noise > 0:
        rng = np.random.default_rng(args.seed)
        v = data.values
        sigma = args.noise * np.sqrt(np.mean(np.abs(v) ** 2))
        noise = rng.standard_normal(v.shape) + 1j * rng.standard_normal(v.shape)
        data = Dataset(data.frequencies, v + sigma / np.sqrt(2) * noise)
    write_data(args.out, data)
    print(f"wrote {args.out}: {len(freqs)} frequencies, {acq.n_sources} sources, "
          f"{acq.n_receivers} receivers, seed={args.seed}")
    return 0


def _run_one(cfg: ExperimentConfig, name: str, modes, acq, data, m0, m_true, outdir: Path,
             tag: str):
    inv = cfg.inversion_config(modes)

    def on_batch(i, model):
        if cfg.emit_images:
            write_pgm(outdir / f"model{tag}_batch{i}.pgm",
                      model.velocity().reshape(model.grid.shape))

    model, log = run_inversion(inv, acq, data, m0, m_true, callback=on_batch)
    write_model(outdir / f"final{tag}.wmod", model)
    log.to_csv(outdir / f"log{tag}.csv", record_timing=cfg.record_timing)
    final = log[-1]
    print(f"{name}: {len(log)} iterations, model_error={final.model_error:.6g}, "
          f"source_residual={final.source_residual:.6g}, "
          f"data_residual={final.data_residual:.6g}")


def cmd_invert(args) -> int:
    overrides = {"seed": str(args.seed)} if args.seed is not None else {}
    if args.emit_images is not None:
        overrides["emit_images"] = args.emit_images
    cfg = load_config(args.config, overrides)
    m0 = read_model(cfg.initial_model)
    m_true = read_model(cfg.true_model) if cfg.true_model is not None else None
    if m_true is not None and m_true.grid != m0.grid:
        raise CliError("true and initial models have different grids")
    data = read_data(cfg.data, sorted(cfg.frequencies))
    acq = surface_acquisition(m0.grid, cfg.pml_thickness, cfg.src_spacing, cfg.rec_spacing,
                              cfg.src_depth, cfg.rec_depth)
    # surface all configuration errors before the first solve
    runs = ({"irwri": MODE_PRESETS["irwri"], "wipr-first": MODE_PRESETS["wipr-first"]}
            if cfg.mode == "paired" else {cfg.mode: MODE_PRESETS[cfg.mode]})
    for modes in runs.values():
        cfg.inversion_config(modes)
    if data.values.shape[1:] != (acq.n_sources, acq.n_receivers):
        raise CliError(f"data file has {data.values.shape[1]} sources x "
                       f"{data.values.shape[2]} receivers; acquisition gives "
                       f"{acq.n_sources} x {acq.n_receivers}")
    outdir = cfg.output_dir
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.resolved").write_text(cfg.dump())
    for name, modes in runs.items():
        tag = f"_{name}" if cfg.mode == "paired" else ""
        _run_one(cfg, name, modes, acq, data, m0, m_true, outdir, tag)
    return 0


def cmd_bilinear(args) -> int:
    if args.model is not None:
        model = read_model(args.model)
    else:
        grid = Grid2D(args.nx, args.nz, args.h)
        model = make_toy_model("smooth", grid, vmin=args.vmin, vmax=args.vmax, seed=args.seed)
    grid = model.grid
    omega = 2 * np.pi * args.freq
    pml = PmlProfile(args.pml, args.pml_amplitude)
    stencil = StencilConfig.anti_lumped() if args.stencil == "anti-lumped" else StencilConfig()
    ix, iz = (grid.nx // 2, grid.nz // 2) if args.source is None else parse_nodes(args.source)[0]
    if not grid.contains(ix, iz):
        raise CliError(f"source node ({ix}, {iz}) outside the grid")
    b = np.zeros(grid.n, dtype=complex)
    b[grid.index(ix, iz)] = 1.0
    # a weak everywhere-nonzero term keeps the wavefield free of nodal zeros
    b += args.distributed * np.exp(1j * np.linspace(0.0, 9.0, grid.n))
    u = forward_solve(assemble(model, omega, pml, stencil), b)
    for jx, jz in parse_nodes(args.zero_nodes or ""):
        if not grid.contains(jx, jz):
            raise CliError(f"zero node ({jx}, {jz}) outside the grid")
        u[grid.index(jx, jz)] = 0.0
    interior = np.zeros(grid.shape, dtype=bool)
    t = args.pml
    interior[t + 1:grid.nx - t - 1, t + 1:grid.nz - t - 1] = True
    interior = interior.ravel()
    print("variant,interior_rel_error,masked_nodes,masked_fraction")
    worst = 0.0
    for label, mag in (("full", False), ("magnitude", True)):
        rec = bilinear_recovery(u, b, omega, grid, pml, stencil, magnitude_only=mag)
        keep = interior & ~np.ma.getmaskarray(rec)
        err = (np.linalg.norm(rec.data[keep] - model.values[keep])
               / np.linalg.norm(model.values[keep])) if keep.any() else float("nan")
        n_masked = int(np.ma.getmaskarray(rec).sum())
        print(f"{label},{err:.3e},{n_masked},{n_masked / grid.n:.6f}")
        worst = max(worst, err)
        if args.out is not None and not mag:
            fill = rec.mean() if rec.count() else 1.0
            write_model(args.out, model.with_values(rec.filled(fill)))
    print(f"# seed={args.seed} freq={args.freq:g} grid={grid.nx}x{grid.nz}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.logs:
        try:
            log = IterationLog.from_csv(path)
        except OSError as exc:
            raise CliError(f"cannot read {path}: {exc.strerror}") from None
        if not log:
            raise CliError(f"{path}: log has no iterations")
        last = log[-1]
        rows.append([Path(path).stem, repr(last.model_error), repr(last.source_residual),
                     repr(last.data_residual)])
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerows(rows)
    finally:
        if args.out:
            out.close()
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{PROG}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    seed = argparse.ArgumentParser(add_help=False)
    seed.add_argument("--seed", type=int, default=0, help="random seed (default 0)")

    p = _Parser(prog=PROG, description="Wavefield inversion with phase retrieval.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("model", parents=[seed], help="write a toy velocity model")
    m.add_argument("--kind", required=True,
                   choices=("homogeneous", "layered", "inclusion", "smooth"))
    m.add_argument("--nx", type=int, required=True)
    m.add_argument("--nz", type=int, required=True)
    m.add_argument("--h", type=float, required=True, help="grid spacing (m)")
    m.add_argument("--out", required=True)
    m.add_argument("--v", type=float, help="homogeneous velocity")
    m.add_argument("--velocities", help="layered: comma list, top to bottom")
    m.add_argument("--interfaces", help="layered: comma list of z indices")
    m.add_argument("--v-background", type=float)
    m.add_argument("--v-anomaly", type=float)
    m.add_argument("--rect", help="inclusion: x0,x1,z0,z1 (inclusive)")
    m.add_argument("--vmin", type=float)
    m.add_argument("--vmax", type=float)
    m.add_argument("--correlation", type=float, default=3.0,
                   help="smooth: correlation length in cells")
    m.set_defaults(func=cmd_model)

    f = sub.add_parser("forward", parents=[seed], help="simulate observed data")
    f.add_argument("--model", required=True)
    f.add_argument("--frequencies", required=True, help="start:step:stop or comma list (Hz)")
    f.add_argument("--out", required=True)
    f.add_argument("--pml", type=int, default=10, help="PML thickness in cells")
    f.add_argument("--pml-amplitude", type=float, default=6.0)
    f.add_argument("--stencil", choices=("lumped", "anti-lumped"), default="lumped")
    f.add_argument("--src-spacing", type=int, default=4)
    f.add_argument("--rec-spacing", type=int, default=1)
    f.add_argument("--src-depth", type=int, default=1)
    f.add_argument("--rec-depth", type=int, default=1)
    f.add_argument("--wavelet-peak", type=float, default=None,
                   help="scale sources by a Ricker spectrum with this peak (Hz)")
    f.add_argument("--noise", type=float, default=0.0,
                   help="relative RMS of complex Gaussian noise added to the data")
    f.set_defaults(func=cmd_forward)

    i = sub.add_parser("invert", help="run an inversion from a config file")
    i.add_argument("--config", required=True)
    i.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    i.add_argument("--emit-images", default=None, help="true/false, overrides the config")
    i.set_defaults(func=cmd_invert)

    b = sub.add_parser("bilinear", parents=[seed],
                       help="recover a model from its full wavefield")
    b.add_argument("--model", default=None, help="model file (default: smooth random)")
    b.add_argument("--nx", type=int, default=21)
    b.add_argument("--nz", type=int, default=21)
    b.add_argument("--h", type=float, default=10.0)
    b.add_argument("--vmin", type=float, default=1800.0)
    b.add_argument("--vmax", type=float, default=3200.0)
    b.add_argument("--freq", type=float, default=6.0)
    b.add_argument("--pml", type=int, default=0)
    b.add_argument("--pml-amplitude", type=float, default=6.0)
    b.add_argument("--stencil", choices=("lumped", "anti-lumped"), default="lumped")
    b.add_argument("--source", default=None, help="point source node ix,iz (default centre)")
    b.add_argument("--distributed", type=float, default=0.05,
                   help="amplitude of the distributed source term")
    b.add_argument("--zero-nodes", default=None,
                   help="ix,iz;ix,iz nodes whose wavefield is zeroed before recovery")
    b.add_argument("--out", default=None, help="write the recovered model (full variant; masked nodes get the mean)")
    b.set_defaults(func=cmd_bilinear)

    r = sub.add_parser("report", parents=[seed], help="summarize final rows of CSV logs")
    r.add_argument("logs", nargs="+")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors, --help and --version
        return exc.code if isinstance(exc.code, int) else 1
    try:
        if getattr(args, "emit_images", None) is not None:
            parse_bool(args.emit_images)
        return args.func(args)
    except (CliError, ConfigurationError, ModelFormatError, SolverError, ValueError,
            OSError) as exc:
        msg = str(exc).replace("\n", " ")
        if isinstance(exc, OSError) and exc.filename is not None:
            msg = f"{exc.filename}: {exc.strerror}"
        print(f"{PROG}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
