"""Command line: gen-data, train, eval, rollout, prodmp-check, bench.

Settings resolve as flags > JSON config file (``--config``) > defaults.
Contract, configuration and numeric errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datagen, evaluation, plotting, prodmp
from .errors import ConfigError, ContractError, NumericError
from .meshgraph import Scene, load_dataset
from .mgn import MGN, MGNConfig
from .model import M3GN, M3GNConfig, ContextSet, input_scales
from .trainer import TrainConfig, train

log = logging.getLogger("m3gn")

DEFAULTS = {
    "gen-data": dict(task="block", n=280, seed=0, kappa_set=None, ood_kappa=None, n_ood=40, split="5,1,1", frames=None),
    "train": dict(
        model="m3gn", epochs=10, lr=5e-4, seed=0, latent=64, latent_task=32, steps=5, decoder_hidden=None,
        t_min=2, t_max=15, noise=0.001, history=None, material=False, eval_every=1, max_val=None, n_weights=30,
        transitions=16, wall_clock=None,
    ),
    "eval": dict(split="test", context_sizes="2,5,10,15", seeds=None, dump_latents=None, resamples=1000, latent_context=10),
    "rollout": dict(split="test", index=0, context=10),
    "prodmp-check": dict(seed=0, n_cases=10, dt=1e-4),
    "bench": dict(horizons="50,100,200", context=20, repeats=10, latent=64, steps=5, seed=0),
}


def _ints(text) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def _floats(text) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m3gn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON file with default values for this command")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--no-plots", action="store_true", default=None, help="skip PNG figures")
        return sp

    g = common(sub.add_parser("gen-data", help="simulate a synthetic dataset"))
    g.add_argument("--task", choices=["block", "sheet"])
    g.add_argument("--n", type=int, help="in-distribution trajectories (split train/val/test)")
    g.add_argument("--seed", type=int)
    g.add_argument("--kappa-set", help="comma-separated training stiffness values")
    g.add_argument("--ood-kappa", help="comma-separated out-of-distribution stiffness values")
    g.add_argument("--n-ood", type=int)
    g.add_argument("--split", help="train,val,test ratios")
    g.add_argument("--frames", type=int, help="frames per trajectory")

    t = common(sub.add_parser("train", help="train a model"))
    t.add_argument("--model", choices=["m3gn", "mgn"])
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--latent", type=int)
    t.add_argument("--latent-task", type=int)
    t.add_argument("--steps", type=int, help="message passing steps")
    t.add_argument("--decoder-hidden", type=int)
    t.add_argument("--n-weights", type=int)
    t.add_argument("--t-min", type=int)
    t.add_argument("--t-max", type=int)
    t.add_argument("--noise", type=float, help="baseline random-walk noise sigma")
    t.add_argument("--history", type=int)
    t.add_argument("--material", action="store_const", const=True, help="baseline gets the oracle stiffness")
    t.add_argument("--transitions", type=int, help="baseline transitions per batch")
    t.add_argument("--eval-every", type=int)
    t.add_argument("--max-val", type=int)
    t.add_argument("--wall-clock", type=float)

    e = common(sub.add_parser("eval", help="evaluate trained models"))
    e.add_argument("--model-dir", nargs="+", required=True, help="checkpoint dirs; '{seed}' expands over --seeds")
    e.add_argument("--data", required=True)
    e.add_argument("--split")
    e.add_argument("--context-sizes")
    e.add_argument("--seeds")
    e.add_argument("--dump-latents", help="CSV path for z_v rows (meta model only)")
    e.add_argument("--latent-context", type=int)
    e.add_argument("--resamples", type=int)

    r = common(sub.add_parser("rollout", help="roll out one trajectory"))
    r.add_argument("--model-dir", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--split")
    r.add_argument("--index", type=int)
    r.add_argument("--context", type=int)

    c = common(sub.add_parser("prodmp-check", help="ProDMP vs Euler oracle"), out=False)
    c.add_argument("--seed", type=int)
    c.add_argument("--n-cases", type=int)
    c.add_argument("--dt", type=float)

    b = common(sub.add_parser("bench", help="rollout runtime and call counts"))
    b.add_argument("--m3gn", help="checkpoint dir (fresh model when omitted)")
    b.add_argument("--mgn", help="checkpoint dir (fresh model when omitted)")
    b.add_argument("--horizons")
    b.add_argument("--context", type=int)
    b.add_argument("--repeats", type=int)
    b.add_argument("--latent", type=int)
    b.add_argument("--steps", type=int)
    b.add_argument("--seed", type=int)
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    cfg = dict(DEFAULTS.get(args.command, {}))
    if getattr(args, "config", None):
        try:
            extra = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(extra) - set(cfg) - set(vars(args))
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(extra)
    for k, v in vars(args).items():
        if v is not None:
            cfg[k] = v
    return cfg


# ---------------------------------------------------------------- commands


def cmd_gen_data(c: dict) -> int:
    task = c["task"]
    kappa = _floats(c["kappa_set"]) if c["kappa_set"] else list(datagen.BLOCK_KAPPA if task == "block" else datagen.SHEET_KAPPA)
    ood = _floats(c["ood_kappa"]) if c["ood_kappa"] else list(datagen.BLOCK_OOD_KAPPA if task == "block" else datagen.SHEET_OOD_KAPPA)
    over = {"n_frames": c["frames"]} if c["frames"] else {}
    trajs = datagen.generate(task, c["n"], c["seed"], kappa, **over)
    ood_trajs = datagen.generate(task, c["n_ood"], c["seed"], ood, offset=10**6, **over) if c["n_ood"] else None
    out = datagen.write_dataset(c["out"], trajs, _floats(c["split"]), ood_trajs, task=task, seed=c["seed"], extra={"kappa_set": kappa, "ood_kappa": ood if c["n_ood"] else []})
    print(json.dumps({"out": str(out), "n": len(trajs), "n_ood": len(ood_trajs or [])}))
    return 0


def scenes_of(ds, split: str) -> list[Scene]:
    if split not in ds.splits:
        raise ContractError(f"dataset has no split {split!r}; available: {sorted(ds.splits)}")
    return [Scene.from_trajectory(t) for t in ds.split(split)]


def make_model(c: dict, ds, train_scenes: list[Scene]):
    scales = input_scales(train_scenes)
    sheet = ds.task == "sheet"
    T = train_scenes[0].n_steps
    d = train_scenes[0].dim
    hidden = c["decoder_hidden"] or c["latent"]
    if c["model"] == "m3gn":
        cfg = M3GNConfig(
            dim=d, latent=c["latent"], latent_task=c["latent_task"], steps=c["steps"], decoder_hidden=hidden,
            history=c["history"] or 1, n_weights=c["n_weights"], frame_dt=1.0 / (T - 1),
            collider_target=not sheet, force_flag=sheet, **scales,
        )
        return M3GN(cfg, seed=c["seed"])
    cfg = MGNConfig(
        dim=d, latent=c["latent"], steps=c["steps"], decoder_hidden=hidden, history=2 if c["history"] is None else c["history"],
        noise_sigma=c["noise"], material_feature=bool(c["material"]), force_flag=sheet, collider_velocity=not sheet,
        transitions_per_batch=c["transitions"], **scales,
    )
    return MGN(cfg, seed=c["seed"])


def cmd_train(c: dict) -> int:
    ds = load_dataset(c["data"])
    tr, va = scenes_of(ds, "train"), scenes_of(ds, "val") if "val" in ds.splits else []
    model = make_model(c, ds, tr)
    tc = TrainConfig(lr=c["lr"], epochs=c["epochs"], t_min=c["t_min"], t_max=c["t_max"], seed=c["seed"], eval_every=c["eval_every"], max_val=c["max_val"], wall_clock=c["wall_clock"])
    res = train(model, tr, va, tc, out_dir=c["out"])
    summary = {"out": c["out"], "best_epoch": res.best_epoch, "best_val": res.best_val, "seconds": res.seconds, "final_train_loss": res.curve[-1]["train_loss"] if res.curve else None}
    (Path(c["out"]) / "train_summary.json").write_text(json.dumps(summary, indent=1))
    if not c.get("no_plots") and res.curve:
        plotting.plot_loss_curve(res.curve, Path(c["out"]) / "loss_curve.png")
    print(json.dumps(summary))
    return 0


def load_model(path):
    meta = json.loads((Path(path) / "model.json").read_text())
    return (M3GN if meta["kind"] == "m3gn" else MGN).load(path)


def cmd_eval(c: dict) -> int:
    ds = load_dataset(c["data"])
    scenes = scenes_of(ds, c["split"])
    sizes = _ints(c["context_sizes"])
    seeds = _ints(c["seeds"]) if c["seeds"] else [None]
    out = Path(c["out"])
    reports, summary = [], []
    for template in c["model_dir"]:
        per_seed = []
        for s in seeds:
            path = template.format(seed=s) if s is not None else template
            model = load_model(path)
            rep = evaluation.evaluate(model, scenes, sizes, split=c["split"], seed=s or 0, n_resamples=c["resamples"])
            tag = Path(path).name
            rep.model = f"{model.kind}_{tag}"
            evaluation.write_report(rep, out)
            reports.append(rep)
            per_seed.append(rep)
            if c["dump_latents"] and model.kind == "m3gn":
                dest = Path(c["dump_latents"])
                if len(seeds) > 1 or len(c["model_dir"]) > 1:
                    dest = dest.with_name(f"{dest.stem}_{tag}{dest.suffix}")
                evaluation.dump_latents(model, scenes, c["latent_context"], dest, ids=ds.splits[c["split"]])
        for n in sizes:
            vals = [r.by_context(n).mse for r in per_seed]
            summary.append({"model": template, "context": n, "median_mse": float(np.nanmedian(vals)), "seeds": len(vals), "diverged": int(sum(r.by_context(n).diverged for r in per_seed))})
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=1))
    if not c.get("no_plots"):
        plotting.plot_context_sweep(reports, out / "context_sweep.png")
        plotting.plot_per_timestep(reports, sizes[0], out / f"per_timestep_c{sizes[0]}.png")
    for row in summary:
        print(f"{row['model']},{row['context']},{row['median_mse']:.6g},{row['diverged']}")
    return 0


def cmd_rollout(c: dict) -> int:
    ds = load_dataset(c["data"])
    scenes = scenes_of(ds, c["split"])
    if not 0 <= c["index"] < len(scenes):
        raise ContractError(f"index {c['index']} outside split of size {len(scenes)}")
    sc = scenes[c["index"]]
    model = load_model(c["model_dir"])
    full, calls, dt = evaluation.rollout_scene(model, sc, c["context"])
    out = Path(c["out"])
    out.mkdir(parents=True, exist_ok=True)
    world = ds.normalizer.denormalize(full)
    np.save(out / "rollout.npy", world.astype(np.float32))
    mse = evaluation.full_rollout_mse(full, sc.positions, c["context"] - 1, sc.moving_mask())
    info = {"mse": mse, "calls": calls, "seconds": dt, "frames": int(full.shape[0]), "anchor": c["context"] - 1}
    (out / "rollout.json").write_text(json.dumps(info, indent=1))
    if not c.get("no_plots") and sc.dim == 2:
        plotting.plot_rollout(ds.normalizer.denormalize(sc.positions), world, c["context"] - 1, out / "rollout.png")
    print(json.dumps(info))
    return 0


def cmd_prodmp_check(c: dict) -> int:
    res = prodmp.oracle_check(seed=c["seed"], n_cases=c["n_cases"], dt=c["dt"])
    print(json.dumps(res))
    return 0


def bench_scene(n_frames: int, seed: int = 0) -> Scene:
    """A long block press (slow collider) in roughly normalised units."""
    rng = np.random.default_rng(seed)
    spec = datagen.random_block_spec(rng, 2.0, n_frames=n_frames, collider_velocity=(0.0, -1.2 / n_frames))
    tr = datagen.simulate_block(spec)
    norm = datagen.Normalizer.from_arrays([tr.mesh, tr.collider])
    return Scene.from_trajectory(tr.normalized(norm))


def cmd_bench(c: dict) -> int:
    horizons = _ints(c["horizons"])
    sc = bench_scene(max(horizons), c["seed"])
    scales = input_scales([sc])
    models = {}
    models["m3gn"] = M3GN.load(c["m3gn"]) if c.get("m3gn") else M3GN(M3GNConfig(latent=c["latent"], decoder_hidden=c["latent"], steps=c["steps"], **scales), seed=c["seed"])
    models["mgn"] = MGN.load(c["mgn"]) if c.get("mgn") else MGN(MGNConfig(latent=c["latent"], decoder_hidden=c["latent"], steps=c["steps"], **scales), seed=c["seed"])
    rows = evaluation.bench(models, sc, c["context"], horizons, c["repeats"])
    paths = evaluation.write_bench(rows, c["out"])
    if not c.get("no_plots"):
        plotting.plot_bench(rows, Path(c["out"]) / "bench.png")
    for row in rows:
        print(f"{row['model']},{row['horizon']},{row['calls']},{row['median_seconds']:.6g}")
    log.info("wrote %s", paths["csv"])
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "prodmp-check": cmd_prodmp_check,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](resolve(args))
    except (ContractError, ConfigError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
