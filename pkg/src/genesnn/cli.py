"""Command-line entry point: ``genesnn <command> --config cfg.json [flags]``.

Exit codes: 0 success, 1 a check failed, 2 bad config or input.
"""
import argparse
import logging
import os
import sys

import numpy as np

from . import experiments as ex
from . import serialization
from .config import ABLATIONS, ConfigError, default_config, load_config, validate
from .data import add_gaussian_noise, encode_spikes
from .errors import ParseError, ShapeMismatchError, StateError
from .evolution import CANDIDATE_CSV_HEADER, EVOLUTION_CSV_HEADER
from .genome import Genome, compression_ratio, load_genotype
from .snn import energy_report
from .training import FAULTS, TrainingDiverged, evaluate, grad_check, train

EXIT_OK, EXIT_CHECK, EXIT_INPUT = 0, 1, 2
METRICS_CSV_HEADER = ("epoch", "loss", "accuracy")

log = logging.getLogger("genesnn")


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


# ---------------------------------------------------------------- helpers

def _config(args):
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    t = cfg.training
    for flag, attr in (("lr", "lr"), ("epochs", "epochs"), ("batch_size", "batch_size"),
                       ("noise", "input_noise")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(t, attr, v)
    e = cfg.evolution
    for flag, attr in (("generations", "generations"), ("pop", "popsize"), ("workers", "workers"),
                       ("ablation", "ablation")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(e, attr, v)
    if getattr(args, "seed", None) is not None:
        cfg.seeds.evolution = cfg.seeds.training = cfg.seeds.init = args.seed
    return validate(cfg)


def _outdir(cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


def _write_manifest(cfg, command, files):
    path = os.path.join(cfg.output_dir, f"{command}_manifest.json")
    with open(path, "w") as fh:
        fh.write(serialization.dumps({"command": command, "config_hash": cfg.hash(),
                                      "config": cfg.to_dict(), "files": sorted(files)}))


def _load_checkpoint(path, net):
    genome, extra = Genome.load(path)
    try:
        net.check_genome(genome)
    except ShapeMismatchError as exc:
        raise InputError(f"{path}: {exc}") from exc
    return genome, extra


def _save_checkpoint(path, genome, epoch, cfg, opt_state):
    opt = {f"opt_{k}": np.asarray(v) for k, v in opt_state.items()}
    genome.save(path, epoch=epoch, config_hash=cfg.hash(), **opt)


# ---------------------------------------------------------------- commands

def cmd_evolve(args):
    cfg = _config(args)
    out = _outdir(cfg)
    if cfg.evolution.ablation == "random":
        raise InputError("ablation 'random' skips evolution; use the 'ablation' command")

    def progress(t, es, result):
        row = result.history[-1]
        print(f"gen {t:3d} best_f={row[1]:.6g} median_f={row[2]:.6g} sigma={row[3]:.4g}")

    res = ex.evolve(cfg, on_generation=progress)
    if res.best is None:
        print("no candidate produced a finite fitness", file=sys.stderr)
        return EXIT_CHECK
    files = ["best_genotype.json", "evolution.csv", "candidates.csv", "cma_state.json"]
    with open(os.path.join(out, files[0]), "w") as fh:
        fh.write(serialization.dumps({**res.best.to_dict(), "config_hash": cfg.hash(),
                                      "best_f": res.best_f, "generation": res.best_generation}))
    ex.write_csv(os.path.join(out, files[1]), EVOLUTION_CSV_HEADER, res.history)
    ex.write_csv(os.path.join(out, files[2]), CANDIDATE_CSV_HEADER, res.candidates)
    res.state.save(os.path.join(out, files[3]))
    _write_manifest(cfg, "evolve", files)
    print(f"best f={res.best_f:.6g} at generation {res.best_generation}; beta1={res.best.beta1:.6g} "
          f"beta2={res.best.beta2:.6g}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    out = _outdir(cfg)
    net = cfg.network_spec()
    dataset = cfg.load_dataset()
    tcfg = ex.train_config(cfg)
    start_epoch, opt_state = 0, None
    if args.resume:
        genome, extra = _load_checkpoint(args.resume, net)
        start_epoch = int(extra.get("epoch", -1)) + 1
        opt_state = {k[4:]: v for k, v in extra.items() if k.startswith("opt_")}
    else:
        genotype = load_genotype(args.genotype) if args.genotype else cfg.initial_genotype()
        if genotype.g != net.g:
            raise InputError(f"genotype has g={genotype.g}, network expects g={net.g}")
        genome = net.init_genome(genotype, cfg.seeds.init)

    if args.gradcheck:
        code = _run_gradcheck(cfg, net, genome, dataset, args)
        if code != EXIT_OK:
            return code

    ckpt = os.path.join(out, "checkpoint.npz")
    metrics_path = os.path.join(out, "metrics.csv")
    rows = _read_metrics(metrics_path, start_epoch) if args.resume else []

    def on_epoch(epoch, g, loss, acc, opt):
        rows.append((epoch, loss, acc))
        print(f"epoch {epoch:4d} loss={loss:.6f} accuracy={acc:.4f}")
        _save_checkpoint(ckpt, g, epoch, cfg, opt)
        ex.write_csv(metrics_path, METRICS_CSV_HEADER, rows)

    epochs = max(cfg.training.epochs - start_epoch, 0)
    try:
        res = train(net, genome, *dataset.split("train"), tcfg, epochs=epochs, start_epoch=start_epoch,
                    callback=on_epoch, optimizer_state=opt_state)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    if epochs == 0:
        _save_checkpoint(ckpt, res.genome, start_epoch - 1, cfg, res.optimizer_state)
        ex.write_csv(metrics_path, METRICS_CSV_HEADER, rows)
    summary = _summarize(cfg, net, res.genome, dataset)
    with open(os.path.join(out, "eval.json"), "w") as fh:
        fh.write(serialization.dumps({**summary, "config_hash": cfg.hash()}))
    _write_manifest(cfg, "train", ["checkpoint.npz", "metrics.csv", "eval.json"])
    return EXIT_OK


def _read_metrics(path, upto):
    if not os.path.exists(path):
        return []
    with open(path) as fh:
        lines = fh.read().splitlines()[1:]
    rows = []
    for line in lines:
        e, loss, acc = line.split(",")
        if int(e) < upto:
            rows.append((int(e), float(loss), float(acc)))
    return rows


def _summarize(cfg, net, genome, dataset, noise=0.0):
    summary = {}
    for split in ("val", "test"):
        x, y = dataset.split(split)
        if noise > 0:
            x = add_gaussian_noise(x, noise, [cfg.seeds.data, 3])
        ev = evaluate(net, genome, x, y, encoding=cfg.dataset.encoding, seed=cfg.seeds.training)
        summary[f"{split}_loss"], summary[f"{split}_accuracy"] = ev.loss, ev.accuracy
        print(f"{split}: loss={ev.loss:.6f} accuracy={ev.accuracy:.4f}")
    return summary


def cmd_evaluate(args):
    cfg = _config(args)
    net = cfg.network_spec()
    genome, _ = _load_checkpoint(args.checkpoint, net)
    _summarize(cfg, net, genome, cfg.load_dataset(), noise=args.noise or 0.0)
    return EXIT_OK


def cmd_report(args):
    cfg = _config(args)
    net = cfg.network_spec()
    genome, _ = _load_checkpoint(args.checkpoint, net)
    dataset = cfg.load_dataset()
    x, y = dataset.split(args.split)
    ev = evaluate(net, genome, x, y, encoding=cfg.dataset.encoding, seed=cfg.seeds.training)
    rep = energy_report(net, ev.spike_counts, ev.n, e_mac=cfg.energy.e_mac, e_ac=cfg.energy.e_ac)
    lines = [f"config_hash {cfg.hash()}", f"split {args.split} samples {ev.n} T {net.T} g {net.g}",
             "layer kind c_in c_out k genetic_params dense_params ratio"]
    tot_gen = tot_dense = 0
    for i, (geo, (p, d)) in enumerate(zip(net.geometry(), net.layer_param_counts())):
        k = geo.layer.kernel
        lines.append(f"{i} {geo.layer.kind} {geo.c_in} {geo.layer.out} {k} {p} {d} "
                     f"{compression_ratio(net.g, geo.c_in, geo.layer.out, k):.6f}")
        tot_gen += p
        tot_dense += d
    stored = genome.n_params()
    lines.append(f"total genetic_params {tot_gen} dense_params {tot_dense} ratio {tot_gen / tot_dense:.6f}")
    lines.append(f"stored reals (shared encodings, single G) {stored}")
    lines.append("layer flops spikes_per_sample firing_rate energy_pj")
    for row in rep.csv_rows():
        lines.append(f"{row[0]} {row[1]} {row[2]:.6f} {row[3]:.6f} {row[4]:.6f}")
    lines.append(f"SOPs {rep.sops:.6f}")
    lines.append(f"total spikes per sample {rep.spike_total:.6f}")
    lines.append(f"energy {rep.energy_pj:.6f} pJ = {rep.energy_mj:.6e} mJ per sample")
    print("\n".join(lines))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(rep.to_csv())
    return EXIT_OK


def _run_gradcheck(cfg, net, genome, dataset, args):
    x, y = dataset.split("train")
    n = min(len(y), args.batch)
    inputs = encode_spikes(x[:n], net.T, cfg.dataset.encoding, [cfg.seeds.training, 0])
    rep = grad_check(net, genome, inputs, y[:n], step=args.step, tolerance=args.tolerance,
                     n_coords=args.coords, seed=cfg.seeds.training, fault=args.inject_fault)
    print(f"gradcheck {rep.summary()}")
    print(f"coordinates sampled {len(rep.coordinates)}: " + " ".join(rep.coordinates))
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_gradcheck(args):
    cfg = _config(args)
    net = cfg.network_spec()
    genome = net.init_genome(cfg.initial_genotype(), cfg.seeds.init)
    return _run_gradcheck(cfg, net, genome, cfg.load_dataset(), args)


def cmd_ablation(args):
    cfg = _config(args)
    out = _outdir(cfg)
    rows, medians = ex.run_ablation(cfg, args.variants, range(args.seeds), args.post_epochs, log_dir=out,
                                    progress=lambda row: print(" ".join(str(v) for v in row)))
    print("variant median_val_loss")
    for variant, m in medians.items():
        print(f"{variant} {m:.6f}")
    _write_manifest(cfg, "ablation", ["ablation.csv"])
    return EXIT_OK


def cmd_init_config(args):
    text = serialization.dumps(default_config().to_dict())
    if args.path == "-":
        print(text)
    else:
        with open(args.path, "w") as fh:
            fh.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="genesnn", description=(
        "Genetically encoded spiking networks: evolve a wiring genotype with CMA-ES, "
        "train with surrogate gradients, report parameters and energy."))
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config JSON (defaults used when omitted)")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="sets the evolution, training and init seeds")

    def train_flags(sp):
        sp.add_argument("--lr", type=float, help="learning rate")
        sp.add_argument("--epochs", type=int, help="training epochs")
        sp.add_argument("--batch-size", type=int, help="mini-batch size")
        sp.add_argument("--noise", type=float,
                        help="relative L2 norm of Gaussian input noise")

    def check_flags(sp):
        sp.add_argument("--coords", type=int, default=200, help="coordinates to sample (default 200)")
        sp.add_argument("--step", type=float, default=3e-3, help="finite-difference step")
        sp.add_argument("--tolerance", type=float, default=1e-4, help="max relative error")
        sp.add_argument("--batch", type=int, default=8, help="samples in the check batch")
        sp.add_argument("--inject-fault", nargs="?", const="surrogate", choices=FAULTS,
                        help="plant a known gradient bug to prove the check can fail: "
                             "'surrogate' (default) doubles the surrogate height, 'transpose' "
                             "uses G.T in the input-encoding gradient")

    def evo_flags(sp):
        sp.add_argument("--generations", type=int, help="CMA-ES generations")
        sp.add_argument("--pop", type=int, help="population size")
        sp.add_argument("--workers", type=int, help="concurrent candidate evaluations")
        sp.add_argument("--ablation", choices=ABLATIONS, help="fitness preset")

    sp = sub.add_parser("evolve", help="evolve a genotype; writes best_genotype.json and CSV logs")
    common(sp), evo_flags(sp), train_flags(sp)
    sp.set_defaults(func=cmd_evolve)

    sp = sub.add_parser("train", help="train from a genotype; writes checkpoint.npz and metrics.csv")
    common(sp), train_flags(sp), check_flags(sp)
    sp.add_argument("--genotype", help="genotype JSON (default: the config's initial genotype)")
    sp.add_argument("--resume", help="continue from a checkpoint.npz")
    sp.add_argument("--gradcheck", action="store_true", help="gradient check before training")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="loss and accuracy of a checkpoint on val and test")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--noise", type=float, help="relative L2 norm of Gaussian input noise")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="parameter counts, firing rates, SOPs and energy")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--csv", help="also write the per-layer energy CSV here")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradient")
    common(sp), check_flags(sp)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablation", help="evolve and post-train each fitness preset over seeds")
    common(sp), evo_flags(sp), train_flags(sp)
    sp.add_argument("--variants", nargs="+", choices=ABLATIONS,
                    default=["baseline", "baseline_r1", "baseline_r2", "ste"])
    sp.add_argument("--seeds", type=int, default=5, help="seeds 0..N-1 (default 5)")
    sp.add_argument("--post-epochs", type=int, default=20, help="training epochs after evolution")
    sp.set_defaults(func=cmd_ablation)

    sp = sub.add_parser("init-config", help="write the default config JSON")
    sp.add_argument("path", nargs="?", default="-", help="output path, '-' for stdout")
    sp.set_defaults(func=cmd_init_config)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
    except (InputError, ParseError, ShapeMismatchError, StateError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
    except ValueError as exc:
        print(f"input error: {exc}", file=sys.stderr)
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
