"""Command line interface.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines; keys
are option names (``max-vertices`` or ``max_vertices``). Options given on
the command line take precedence.
"""
from __future__ import annotations

import logging
import os
import sys

import click
import numpy as np

log = logging.getLogger("tvafem")


def read_config(path):
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise click.BadParameter(f"{path}:{i}: expected 'key = value'", param_hint="--config")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _load_config(ctx, param, value):
    if value is None:
        return None
    cfg = read_config(value)
    known = {p.name for p in ctx.command.params}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise click.BadParameter(f"unknown keys in {value}: {', '.join(unknown)}", param_hint="--config")
    for p in ctx.command.params:
        if p.name in cfg and getattr(p, "is_flag", False):
            cfg[p.name] = cfg[p.name].lower() in ("1", "true", "yes", "on")
    ctx.default_map = {**(ctx.default_map or {}), **cfg}
    return value


config_option = click.option("--config", type=click.Path(exists=True, dir_okay=False), callback=_load_config,
                             is_eager=True, expose_value=False, help="key = value file with option defaults.")


def _run_afem(spec, levels, theta, eps, uniform, warm_start, max_vertices, callback=None):
    from .afem import AfemConfig, afem_run
    cfg = AfemConfig(theta=1.0 if uniform else theta, eps_strategy=eps, max_levels=levels,
                     uniform=uniform, warm_start=warm_start, max_vertices=max_vertices)
    return afem_run(spec, cfg, callback=callback)


def _level_fields(lv):
    from .fem import P0Function, p0_project
    return {"u": lv.u, "Pi_u": p0_project(lv.u), "z_bar": lv.z_bar,
            "eps": P0Function(lv.mesh, lv.eps), "eta_local": P0Function(lv.mesh, lv.eta_local)}


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="Log progress (-vv for debug output).")
def cli(verbose):
    """Adaptive Crouzeix-Raviart finite elements for TV denoising."""
    level = logging.WARNING if not verbose else (logging.INFO if verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command("run-benchmark")
@config_option
@click.option("--name", required=True, help="Benchmark name.")
@click.option("--levels", default=10, show_default=True, type=click.IntRange(1))
@click.option("--theta", default=0.5, show_default=True, type=click.FloatRange(0, 1, min_open=True))
@click.option("--eps", "eps", default="global", show_default=True, type=click.Choice(["global", "local"]))
@click.option("--uniform", is_flag=True, help="Refine all elements (theta = 1).")
@click.option("--warm-start", is_flag=True, help="Start each flow from the previous solution.")
@click.option("--max-vertices", type=click.IntRange(1), default=None)
@click.option("--vtk/--no-vtk", default=True, show_default=True, help="Write a VTK file per level.")
@click.option("--out", default="out", show_default=True, type=click.Path(file_okay=False))
def run_benchmark(name, levels, theta, eps, uniform, warm_start, max_vertices, vtk, out):
    """Run the adaptive loop on a benchmark; writes convergence.csv and level_XX.vtk."""
    from .benchmarks import BENCHMARKS, benchmark
    from .io import ConvergenceRow, ensure_dir, export_vtk, write_convergence_csv
    if name not in BENCHMARKS:
        raise click.BadParameter(f"choose from {', '.join(BENCHMARKS)}", param_hint="--name")
    spec = benchmark(name)
    ensure_dir(out)

    def cb(lv):
        click.echo(f"level {lv.level:2d}  N={lv.n_vertices:7d}  eta={lv.eta:.4e}  steps={lv.flow_steps}")
        if vtk:
            export_vtk(lv.mesh, _level_fields(lv), os.path.join(out, f"level_{lv.level:02d}.vtk"))

    levels_ = _run_afem(spec, levels, theta, eps, uniform, warm_start, max_vertices, cb)
    path = os.path.join(out, "convergence.csv")
    write_convergence_csv([ConvergenceRow.from_level(lv) for lv in levels_], path, dim=spec.mesh.dim)
    click.echo(f"wrote {path}")


@cli.command("denoise-image")
@config_option
@click.option("--pgm", type=click.Path(exists=True, dir_okay=False), default=None, help="Input PGM image.")
@click.option("--synthetic", type=click.IntRange(2), default=None,
              help="Use the built-in synthetic test image of this size instead of --pgm.")
@click.option("--noise", default=0.0, show_default=True, type=click.FloatRange(0))
@click.option("--alpha", default=1e4, show_default=True, type=click.FloatRange(0, min_open=True))
@click.option("--levels", default=20, show_default=True, type=click.IntRange(1))
@click.option("--theta", default=0.5, show_default=True, type=click.FloatRange(0, 1, min_open=True))
@click.option("--eps", "eps", default="global", show_default=True, type=click.Choice(["global", "local"]))
@click.option("--subdivisions", default=8, show_default=True, type=click.IntRange(1))
@click.option("--out", default="out", show_default=True, type=click.Path(file_okay=False))
def denoise_image(pgm, synthetic, noise, alpha, levels, theta, eps, subdivisions, out):
    """Adaptive TV denoising of a grayscale image; writes denoised.pgm, mesh.vtk and convergence.csv."""
    from .benchmarks import image_error, image_to_problem, rasterize, synthetic_image
    from .io import ConvergenceRow, ensure_dir, export_vtk, load_pgm, save_pgm, write_convergence_csv
    if (pgm is None) == (synthetic is None):
        raise click.UsageError("give exactly one of --pgm and --synthetic")
    img = load_pgm(pgm) if pgm else synthetic_image(synthetic, noise=noise)
    spec = image_to_problem(img, alpha, subdivisions)
    ensure_dir(out)
    levels_ = _run_afem(spec, levels, theta, eps, False, False, None,
                        lambda lv: click.echo(f"level {lv.level:2d}  N={lv.n_vertices:7d}  eta={lv.eta:.4e}"))
    last = levels_[-1]
    err = image_error(last.u, img)
    save_pgm(np.clip(rasterize(last.u, img.width, img.height), 0, 1), os.path.join(out, "denoised.pgm"))
    export_vtk(last.mesh, _level_fields(last), os.path.join(out, "mesh.vtk"))
    write_convergence_csv([ConvergenceRow.from_level(lv) for lv in levels_], os.path.join(out, "convergence.csv"))
    n0 = levels_[0].n_vertices
    click.echo(f"vertices {n0} -> {last.n_vertices}; squared L2 error {err:.4e}")


@cli.command("rates")
@config_option
@click.argument("csv_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--last", default=5, show_default=True, type=click.IntRange(2), help="Rows used in the fit.")
@click.option("--dim", default=2, show_default=True, type=click.Choice(["2", "3"]))
def rates(csv_path, last, dim):
    """Print the least-squares convergence rate of eta from a convergence table."""
    from .afem import fitted_rate
    from .io import read_convergence_csv
    rows, _ = read_convergence_csv(csv_path)
    if len(rows) < 2:
        raise click.ClickException("need at least two rows")
    rows = rows[-last:]
    rate = fitted_rate([r.n_vertices for r in rows], [r.eta for r in rows], int(dim))
    click.echo(f"{rate:.6f}")


@cli.command("export")
@config_option
@click.option("--name", required=True, help="Benchmark name.")
@click.option("--refine", "n_refine", default=0, show_default=True, type=click.IntRange(0))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="VTK file to write.")
def export(name, n_refine, out):
    """Dump a benchmark mesh with its data (and exact solution when known) to VTK."""
    from .benchmarks import BENCHMARKS, benchmark
    from .fem import p0_project
    from .io import export_vtk
    from .mesh import uniform_refine
    if name not in BENCHMARKS:
        raise click.BadParameter(f"choose from {', '.join(BENCHMARKS)}", param_hint="--name")
    spec = benchmark(name)
    mesh = spec.mesh
    for _ in range(n_refine):
        mesh = uniform_refine(mesh)
    fields = {"g_h": spec.g_h(mesh)}
    if spec.exact is not None:
        fields["u_exact"] = p0_project(spec.exact.u, mesh, order=spec.quad_order, subdivide=spec.quad_subdivide)
        fields["z_exact"] = spec.exact.z(mesh.barycenters)
    export_vtk(mesh, fields, out)
    click.echo(f"wrote {out}: {mesh.n_vertices} points, {mesh.n_elements} cells")


def main(argv=None):
    """Entry point; returns 0 on success, 2 on usage errors and 1 on failures."""
    try:
        cli.main(args=argv, prog_name="tvafem", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    except Exception as exc:                                  # runtime failure
        click.echo(f"error: {exc}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
