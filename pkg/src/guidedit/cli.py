"""Command-line interface.

Subcommands: edit (guided reverse-only editing), edit-plus (interleaved
forward/backward editing with coherence guidance), invert (build and save
a trajectory cache), metrics (evaluate image pairs from a manifest CSV),
selftest (analytic-backend property suite). Guidance fields are exposed
as flags of the same names and override the config file.

Exit codes: 0 success, 1 usage/config error, 2 numeric-guard abort.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import config as cfgmod
from . import imgio, metrics
from .backends import embed_prompt
from .ddim import run_inversion
from .errors import ConfigError, GuidEditError, NumericGuardError
from .pipeline import run_edit
from .task import EditTask


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_edit_flags(p: _Parser, need_target: bool = True):
    p.add_argument("--src", required=True, help="source image (PNG)")
    p.add_argument("--src-prompt", required=True, help="source prompt text")
    if need_target:
        p.add_argument("--tgt-prompt", required=True, help="target prompt text")
        p.add_argument("--out", help="output image path (PNG)")
        p.add_argument("--trace", help="trace CSV path (figure written alongside)")
    p.add_argument("--cache", help="trajectory cache output path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="config file (key=value lines)")
    # schedule
    p.add_argument("--steps", type=int, help="sampling grid length (default 50)")
    p.add_argument("--total-steps", type=int, help="base schedule length (default 1000)")
    p.add_argument("--schedule-family", choices=["linear-beta", "cosine", "explicit-list"])
    # guidance (flag names mirror the config fields)
    for name in ("lambda1", "lambda2", "beta-f", "beta-p", "lambda3", "lambda4",
                 "cfg-scale", "inversion-cfg-scale", "gradient-clip", "fd-step"):
        p.add_argument(f"--{name}", type=float, default=None)
    p.add_argument("--fd-probes", type=int, default=None)
    p.add_argument("--first-step-policy", choices=["skip-prev-term", "use-current"])
    p.add_argument("--grad-mode", choices=["auto", "autograd", "finite-diff"])
    p.add_argument("--coherence", choices=["on", "off"],
                   help="toggle the cycle-consistency terms")
    # io
    p.add_argument("--figures", dest="figures", action="store_true", default=None)
    p.add_argument("--no-figures", dest="figures", action="store_false")
    p.add_argument("--trace-timings", choices=["on", "off"],
                   help="off makes traces byte-reproducible")
    p.add_argument("--store-features", choices=["on", "off"])


def build_parser() -> _Parser:
    parser = _Parser(prog="guidedit",
                     description="Guided-diffusion image editing toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_edit = sub.add_parser("edit", help="guided reverse-only edit")
    _add_edit_flags(p_edit)

    p_plus = sub.add_parser("edit-plus", help="interleaved edit with coherence guidance")
    _add_edit_flags(p_plus)

    p_inv = sub.add_parser("invert", help="build and save a trajectory cache")
    _add_edit_flags(p_inv, need_target=False)

    p_met = sub.add_parser("metrics", help="evaluate image pairs from a manifest CSV")
    p_met.add_argument("--manifest", required=True,
                       help="CSV with columns pair_id,src,tgt,prompt,mask")
    p_met.add_argument("--out", required=True, help="report CSV output path")
    p_met.add_argument("--config", help="config file (encoder/metrics settings)")
    p_met.add_argument("--figures", dest="figures", action="store_true", default=None)
    p_met.add_argument("--no-figures", dest="figures", action="store_false")

    sub.add_parser("selftest", help="run the analytic-backend property suite")
    return parser


def _config_map(args) -> dict[str, str]:
    cfg = {}
    if getattr(args, "config", None):
        cfg.update(cfgmod.parse_config_file(args.config))
    # CLI overrides, written back into the flat map
    override = {
        "schedule.grid_steps": getattr(args, "steps", None),
        "schedule.total_steps": getattr(args, "total_steps", None),
        "schedule.family": getattr(args, "schedule_family", None),
        "guidance.lambda1": getattr(args, "lambda1", None),
        "guidance.lambda2": getattr(args, "lambda2", None),
        "guidance.beta_f": getattr(args, "beta_f", None),
        "guidance.beta_p": getattr(args, "beta_p", None),
        "coherence.lambda3": getattr(args, "lambda3", None),
        "coherence.lambda4": getattr(args, "lambda4", None),
        "guidance.cfg_scale": getattr(args, "cfg_scale", None),
        "guidance.inversion_cfg_scale": getattr(args, "inversion_cfg_scale", None),
        "guidance.gradient_clip": getattr(args, "gradient_clip", None),
        "guidance.first_step_policy": getattr(args, "first_step_policy", None),
        "guidance.grad_mode": getattr(args, "grad_mode", None),
        "guidance.fd_step": getattr(args, "fd_step", None),
        "guidance.fd_probes": getattr(args, "fd_probes", None),
    }
    if getattr(args, "coherence", None) is not None:
        override["coherence.enabled"] = "true" if args.coherence == "on" else "false"
    if getattr(args, "figures", None) is not None:
        override["io.figures"] = "true" if args.figures else "false"
    if getattr(args, "trace_timings", None) is not None:
        override["io.trace_timings"] = "true" if args.trace_timings == "on" else "false"
    if getattr(args, "store_features", None) is not None:
        override["io.store_features"] = "true" if args.store_features == "on" else "false"
    for key, value in override.items():
        if value is not None:
            cfg[key] = str(value)
    return cfg


def _setup(args, need_tgt: bool = True):
    cfg_map = _config_map(args)
    schedule = cfgmod.build_schedule_from_config(cfg_map)
    guidance = cfgmod.build_guidance_from_config(cfg_map)
    io_opts = cfgmod.io_options(cfg_map)
    image = imgio.load_image(args.src)
    backend = cfgmod.build_backend_from_config(cfg_map, schedule,
                                               tuple(image.shape))
    task = EditTask(source_image=args.src, p_src=args.src_prompt,
                    p_tgt=args.tgt_prompt if need_tgt else args.src_prompt,
                    output_image=getattr(args, "out", None),
                    trace_path=getattr(args, "trace", None),
                    cache_path=args.cache, seed=args.seed)
    return task, schedule, backend, guidance, io_opts


def _cmd_edit(args, interleaved: bool) -> int:
    if interleaved and getattr(args, "coherence", None) != "off":
        # edit-plus turns the coherence terms on unless explicitly disabled
        args.coherence = "on"
    task, schedule, backend, guidance, io_opts = _setup(args)
    run_edit(task, schedule, backend, guidance, interleaved=interleaved,
             timings=io_opts["timings"], figures=io_opts["figures"],
             store_features=io_opts["store_features"])
    if task.output_image:
        print(f"wrote {task.output_image}")
    if task.trace_path:
        print(f"wrote {task.trace_path}")
    if task.cache_path:
        print(f"wrote {task.cache_path}")
    return 0


def _cmd_invert(args) -> int:
    if not args.cache:
        raise UsageError("invert: --cache output path is required")
    task, schedule, backend, guidance, io_opts = _setup(args, need_tgt=False)
    x0 = backend.encode(imgio.load_image(task.source_image))
    y_src = embed_prompt(backend, task.p_src)
    y_null = embed_prompt(backend, "")
    _, cache = run_inversion(x0, y_src, schedule, backend, y_null=y_null,
                             w=guidance.inversion_cfg_scale,
                             store_features=io_opts["store_features"])
    cache.save(task.cache_path)
    print(f"wrote {task.cache_path}")
    return 0


def _read_manifest(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        table = [r for r in reader if r and any(cell.strip() for cell in r)]
    if not table:
        raise ConfigError(f"manifest {path} is empty")
    header = [c.strip().lower() for c in table[0]]
    if "pair_id" in header:
        names = header
        body = table[1:]
    else:
        names = ["pair_id", "src", "tgt", "prompt", "mask"]
        body = table
    for lineno, row in enumerate(body, start=2 if names is header else 1):
        rec = {name: (row[i].strip() if i < len(row) else "")
               for i, name in enumerate(names)}
        for col in ("pair_id", "src", "tgt", "prompt"):
            if not rec.get(col):
                raise ConfigError(f"manifest missing {col}", line=lineno, field=col)
        rows.append(rec)
    return rows


def _cmd_metrics(args) -> int:
    cfg_map = _config_map(args)
    encoder = cfgmod.build_vocab_encoder(cfg_map)
    structure = cfgmod.build_structure_encoder(cfg_map)
    report = metrics.MetricReport()
    for rec in _read_manifest(args.manifest):
        src = imgio.load_image(rec["src"])
        tgt = imgio.load_image(rec["tgt"])
        cs = metrics.clip_similarity(tgt, rec["prompt"], encoder)
        sd = metrics.structure_distance(src, tgt, structure)
        bd = None
        if rec.get("mask"):
            bd = metrics.background_distance(src, tgt, imgio.load_mask(rec["mask"]))
        report.add(rec["pair_id"], cs, sd, bd)
    report.write_csv(args.out)
    print(f"wrote {args.out}")
    if cfgmod.io_options(cfg_map)["figures"] and (getattr(args, "figures", None)
                                                  is not False):
        from .plotting import save_report_figure

        fig_path = str(Path(args.out).with_suffix(".png"))
        save_report_figure(report, fig_path)
        print(f"wrote {fig_path}")
    agg = report.aggregates()
    bd_txt = "n/a" if agg["mean_bd"] is None else f"{agg['mean_bd']:.6f}"
    print(f"pairs={agg['count']} mean CS={agg['mean_cs']:.6f} "
          f"mean SD={agg['mean_sd']:.6f} mean BD={bd_txt}")
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_selftests

    return 0 if run_selftests() else 1


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "edit":
            return _cmd_edit(args, interleaved=False)
        if args.command == "edit-plus":
            return _cmd_edit(args, interleaved=True)
        if args.command == "invert":
            return _cmd_invert(args)
        if args.command == "metrics":
            return _cmd_metrics(args)
        if args.command == "selftest":
            return _cmd_selftest(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericGuardError as exc:
        print(f"numeric guard abort: {exc}", file=sys.stderr)
        return 2
    except (GuidEditError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint():
    sys.exit(cli_main())
