"""Command-line entry point: run, explain, delays, synth."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import act, esc
from .config import ExperimentConfig
from .data import SynthSpec, synthesize_fire_like, write_dataset
from .errors import SemflError
from .experiment import build, run_experiment
from .model import SCModel, load_model
from .network import compute_delay, downlink_rate, model_bits, transmission_delays, uplink_rate
from .pgm import read_pgm

log = logging.getLogger("semfl")


def _load_config(path, seed=None, no_act=False, esc_export=False):
    cfg = ExperimentConfig.from_file(path)
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if no_act:
        changes["act_enabled"] = False
    if esc_export:
        changes["esc_export"] = True
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args):
    cfg = _load_config(args.config, args.seed, args.no_act, args.esc)
    result = run_experiment(cfg, out_dir=args.out)
    if result.rows:
        last = result.rows[-1]
        print(f"rounds {len(result.rows)}  loss {last['global_loss']:.4f}  acc {last['acc']:.4f}  "
              f"objective {last['objective']:.4f}")
    print(f"outputs written to {args.out}")
    return 0


def cmd_explain(args):
    params, arch = load_model(args.model)
    img = read_pgm(args.input)
    if (1,) + img.shape != arch.image_shape:
        raise SemflError(f"{args.input}: image shape {img.shape} does not match model input {arch.image_shape[1:]}")
    exp = esc.explain(SCModel(arch), params, img[None], slope=args.slope)
    paths = esc.export_heatmaps(exp, Path(args.input).stem, args.out)
    if exp.constant:
        print("warning: aggregated map is constant", file=sys.stderr)
    print(f"wrote {len(paths)} heatmaps to {args.out}")
    return 0


def delay_table(cfg):
    """Per-device rows of the first-round delay breakdown, full and ACT-frozen."""
    data, model, state = build(cfg)
    n_params = model.arch.num_params
    bits = model_bits(n_params)
    rows = []
    for i, dev in enumerate(state.devices):
        zeta = float(state.zeta[i])
        trainable_act = n_params - act.frozen_count(n_params, zeta)
        up, down = uplink_rate(dev.profile), downlink_rate(dev.profile)
        d_up, d_down = transmission_delays(bits, up, down)
        kw = dict(volume=dev.volume, kappa=dev.profile.kappa, epochs=cfg.local_epochs, cpu_freq_hz=dev.profile.cpu_freq_hz)
        d_full = compute_delay(trainable_params=n_params, **kw)
        d_act = compute_delay(trainable_params=trainable_act, **kw)
        rows.append({
            "device": dev.id, "volume": dev.volume, "cluster": int(state.clustering.assignment[i]),
            "zeta": zeta, "up_bps": up, "down_bps": down, "d_up_s": d_up, "d_down_s": d_down,
            "d_comp_full_s": d_full, "d_comp_act_s": d_act,
            "d_total_s": d_up + d_down + (d_act if cfg.act_enabled else d_full),
        })
    return rows


def cmd_delays(args):
    cfg = _load_config(args.config)
    rows = delay_table(cfg)
    cols = list(rows[0])
    print("  ".join(f"{c:>13}" for c in cols))
    for r in rows:
        print("  ".join(f"{r[c]:>13.6g}" if isinstance(r[c], float) else f"{r[c]:>13}" for c in cols))
    ok = [r["d_total_s"] for r in rows if r["d_total_s"] <= cfg.d_max]
    if ok:
        print(f"round delay {max(ok):.6g} s, {len(ok)}/{len(rows)} devices within d_max")
    else:
        print("no device fits within d_max; every round would abort")
    return 0


def cmd_synth(args):
    spec = SynthSpec.from_file(args.spec)
    ds = synthesize_fire_like(spec)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} images to {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="semfl", description="Explainable semantic federated learning simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a federated experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--no-act", action="store_true", help="disable freezing (FedAvg baseline)")
    r.add_argument("--esc", action="store_true", help="export heatmaps for class-1 test images")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("explain", help="heatmaps for one PGM image")
    e.add_argument("--model", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--slope", type=float, default=0.2)
    e.set_defaults(func=cmd_explain)

    d = sub.add_parser("delays", help="print the per-device delay table")
    d.add_argument("--config", required=True)
    d.set_defaults(func=cmd_delays)

    s = sub.add_parser("synth", help="write a synthetic fire-like PGM dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SemflError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
