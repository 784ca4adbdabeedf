"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Every output file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis, config, dataio, export, finetune, physics
from .train import (
    TrainConfig,
    atomic_write_bytes,
    load_model,
    load_train_state,
    new_state,
    save_train_state,
    train_steps,
    write_log_csv,
)

log = logging.getLogger("hmtpf")


class UsageError(Exception):
    pass


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _dirs(values) -> list[str]:
    out = []
    for v in values:
        out += [p for p in v.split(",") if p]
    return out


def _load_config(path) -> config.RunConfig:
    return config.load(path) if path else config.RunConfig()


def _write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _check_model_vs_pack(model_cfg, pack: dataio.FieldPack, where: str) -> None:
    if (model_cfg.d, model_cfg.n_phi) != (pack.d, pack.n_phi):
        raise UsageError(f"{where}: model expects d={model_cfg.d}, n_phi={model_cfg.n_phi}; pack has d={pack.d}, n_phi={pack.n_phi}")


# -- subcommands ----------------------------------------------------------

GENERATORS = {
    "uniform": lambda a: dataio.gen_uniform_flow(a.n_bd, a.n_q, a.steps, a.dt, seed=a.seed),
    "gaussian": lambda a: dataio.gen_advecting_gaussian(a.n_bd, a.n_q, a.steps, a.dt, seed=a.seed),
    "vortex": lambda a: dataio.gen_isentropic_vortex(a.n_bd, a.n_q, a.steps, a.dt, seed=a.seed),
}


def cmd_gen_data(a) -> int:
    if min(a.n_bd, a.n_q, a.steps) < 1 or not a.dt > 0:
        raise UsageError("--n-bd, --n-q and --steps must be >= 1 and --dt > 0")
    dataio.write_fieldpack(GENERATORS[a.case](a), a.out)
    return 0


def cmd_train(a) -> int:
    cfg = _load_config(a.config)
    packs = [dataio.read_fieldpack(d) for d in _dirs(a.data)]
    for d, p in zip(_dirs(a.data), packs):
        _check_model_vs_pack(cfg.model, p, d)
    if a.resume:
        state, tcfg = load_train_state(a.resume)
        _check_model_vs_pack(state.model.cfg, packs[0], a.resume)
    else:
        state, tcfg = new_state(cfg.model, cfg.train), cfg.train
    total = tcfg.epochs * len(packs)
    n_steps = max(0, total - state.step) if a.max_steps is None else min(a.max_steps, max(0, total - state.step))

    def report(row):
        if a.log_every and (row["step"] + 1) % a.log_every == 0:
            log.info("step %d loss %.6g", row["step"] + 1, row["loss"])

    rows = train_steps(state, packs, tcfg, n_steps, report)
    save_train_state(a.out, state, tcfg)
    write_log_csv(rows, a.log or f"{a.out}.log.csv")
    return 0


def cmd_finetune(a) -> int:
    cfg = _load_config(a.config)
    model = load_model(a.ckpt)
    pack = dataio.read_fieldpack(a.data)
    _check_model_vs_pack(model.cfg, pack, a.data)
    params = finetune.init_finetune(model.cfg, cfg.finetune.seed)
    gt = None if a.no_gt else pack.phi
    params, history = finetune.finetune_loop(model, params, pack, cfg.finetune, gt=gt)
    first, last = history[0], history[-1]
    log.info("R %.6g -> %.6g after %d steps", first["r_total"], last["r_total"], cfg.finetune.steps)
    finetune.save_finetune(a.out, params, cfg.finetune, model.cfg)
    _write_text(a.history or f"{a.out}.history.csv", finetune.history_csv(history))
    return 0


def _predict(a, model, pack, fd):
    """(fields at the queries, their residuals) from the backbone or the fine-tuned model."""
    if a.ft:
        ft_params, _ = finetune.load_finetune(a.ft)
        return finetune.finetuned_prediction(model, ft_params, pack, fd)
    return physics.model_residuals(model, pack, fd)


def cmd_eval(a) -> int:
    cfg = _load_config(a.config)
    model = load_model(a.ckpt)
    pack = dataio.read_fieldpack(a.data)
    _check_model_vs_pack(model.cfg, pack, a.data)
    pred, res = _predict(a, model, pack, cfg.fd)
    rep = physics.mse_r_report(pred, None if a.no_gt else pack.phi, res, pack.channel_names, cfg.fd.resolve(pack.x_bd), pack.dt)
    text = rep.to_text() if a.format == "text" else rep.to_kv()
    if not np.isfinite(rep.r["total"]):
        raise RuntimeError("non-finite residual metric")
    if a.out:
        _write_text(a.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_analyze(a) -> int:
    dirs = _dirs(a.data)
    if len(dirs) < 2:
        raise UsageError("analyze needs at least 2 packs")
    model = load_model(a.ckpt)
    packs = [dataio.read_fieldpack(d) for d in dirs]
    for d, p in zip(dirs, packs):
        _check_model_vs_pack(model.cfg, p, d)
    out = Path(a.out)
    z0, _ = analysis.latent_vectors(model, packs)
    res = analysis.pca(z0)
    m = min(3, z0.shape[1])
    scores = analysis.project(z0, res, m)
    ids = [Path(d).name for d in dirs]
    ks = range(2, min(a.k_max, len(packs) - 1) + 1)
    sil = {}
    clusters = np.zeros(len(packs), dtype=int)
    if len(ks):
        best, sil, results = analysis.select_k(scores, ks, seed=a.seed, restarts=a.restarts)
        clusters = results[best].assignments
    else:
        log.warning("too few packs for clustering; all samples assigned to cluster 0")
    _write_text(out / "evr.csv", analysis.evr_csv(res))
    _write_text(out / "scores.csv", analysis.scores_csv(ids, scores, clusters))
    _write_text(out / "silhouette.csv", analysis.silhouette_csv(sil))

    # segment ablation on the first pack
    pack = packs[0]
    full = model.predict(pack)
    lines = ["segment_start,segment_stop,step,query," + ",".join(pack.channel_names)]
    summary = ["segment_start,segment_stop,mse_vs_full"]
    for seg in analysis.segments(model.cfg.n_g, a.segment_width):
        phi = analysis.segment_ablation(z0[0], seg, model, pack)
        summary.append(f"{seg[0]},{seg[1]},{float(np.mean((phi - full) ** 2))!r}")
        for t in range(phi.shape[0]):
            for q in range(phi.shape[1]):
                lines.append(f"{seg[0]},{seg[1]},{t},{q}," + ",".join(repr(float(v)) for v in phi[t, q]))
    _write_text(out / "ablation.csv", "\n".join(lines) + "\n")
    _write_text(out / "ablation_summary.csv", "\n".join(summary) + "\n")
    return 0


def cmd_export(a) -> int:
    suffix = Path(a.out).suffix.lower()
    if suffix not in (".csv", ".ppm"):
        raise UsageError("--out must end in .csv or .ppm")
    pack = dataio.read_fieldpack(a.data)
    if a.channel not in pack.channel_names:
        raise UsageError(f"unknown channel {a.channel!r}; pack has {', '.join(pack.channel_names)}")
    if not 0 <= a.step < pack.t:
        raise UsageError(f"--step must be in 0..{pack.t - 1}")
    if a.source == "gt":
        fields = pack.phi
    else:
        if not a.ckpt:
            raise UsageError("--ckpt is required unless --source gt")
        cfg = _load_config(a.config)
        model = load_model(a.ckpt)
        _check_model_vs_pack(model.cfg, pack, a.data)
        fields = _predict(a, model, pack, cfg.fd)[0] if a.ft else model.predict(pack)
    values = fields[a.step, :, pack.channel_names.index(a.channel)]
    if suffix == ".csv":
        _write_text(a.out, export.points_csv(pack.x_q, values, a.channel))
    else:
        if pack.d != 2:
            raise UsageError("PPM export needs 2-d points")
        atomic_write_bytes(a.out, export.ppm_bytes(export.rasterize_nearest(pack.x_q, values)))
    return 0


# -- parser ---------------------------------------------------------------

def build_parser() -> ArgParser:
    p = ArgParser(
        prog="hmtpf",
        description="Point-cloud spatiotemporal field generator with physics-informed fine-tuning.",
        epilog=config.help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, bitwise reproducible)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=ArgParser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=config.help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(func=fn)
        return sp

    g = add("gen-data", cmd_gen_data, "write a synthetic field pack")
    g.add_argument("--case", choices=sorted(GENERATORS), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-bd", type=int, default=200)
    g.add_argument("--n-q", type=int, default=100)
    g.add_argument("--steps", type=int, default=5, help="predicted time steps")
    g.add_argument("--dt", type=float, default=0.02)

    t = add("train", cmd_train, "stage-1 supervised training")
    t.add_argument("--data", action="append", required=True, help="pack directory (comma-separated or repeated)")
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="loss CSV (default OUT.log.csv)")
    t.add_argument("--resume", help="continue from a training checkpoint")
    t.add_argument("--max-steps", type=int, help="stop after this many steps in this invocation")
    t.add_argument("--log-every", type=int, default=100)

    f = add("finetune", cmd_finetune, "stage-2 physics-informed fine-tuning on one pack")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--config")
    f.add_argument("--out", required=True, help="fine-tune checkpoint path")
    f.add_argument("--history", help="history CSV (default OUT.history.csv)")
    f.add_argument("--no-gt", action="store_true", help="leave the diagnostic mse_vs_gt column out")

    e = add("eval", cmd_eval, "MSE-R report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--ft", help="fine-tune checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--config", help="only the fd section is used")
    e.add_argument("--no-gt", action="store_true", help="report R only")
    e.add_argument("--format", choices=("kv", "text"), default="kv")
    e.add_argument("--out", help="write the report here instead of stdout")

    n = add("analyze", cmd_analyze, "PCA, clustering and segment ablation of z0")
    n.add_argument("--ckpt", required=True)
    n.add_argument("--data", nargs="+", required=True)
    n.add_argument("--out", required=True, help="output directory")
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--restarts", type=int, default=10)
    n.add_argument("--k-max", type=int, default=10)
    n.add_argument("--segment-width", type=int, default=16)

    x = add("export", cmd_export, "export one channel at one step as CSV or a 256x256 PPM heatmap")
    x.add_argument("--ckpt")
    x.add_argument("--ft")
    x.add_argument("--data", required=True)
    x.add_argument("--config")
    x.add_argument("--channel", required=True)
    x.add_argument("--step", type=int, required=True, help="0-based predicted step")
    x.add_argument("--source", choices=("pred", "gt"), default="pred")
    x.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (UsageError, config.ConfigError) as exc:
        sys.stderr.write(f"hmtpf {args.command}: error: {exc}\n")
        return 1
    except Exception as exc:  # runtime failure
        sys.stderr.write(f"hmtpf {args.command}: failed: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
