"""Command-line entry points.

    ms2edge synth-data        --out DIR [--n 500 --size 64 --seed 0 --split train]
    ms2edge train             --config CFG.json --data DIR --out DIR [--seed S]
    ms2edge infer             --checkpoint CKPT --out DIR [--multi-scale] INPUT...
    ms2edge eval              --pred DIR --gt DIR [--protocol c|s --tol 0.0075 --out DIR]
    ms2edge profile-energy    --checkpoint CKPT --data DIR [--split S --constants float32|int8 --out DIR]
    ms2edge verify-isometry   [--config CFG.json --images 8 --probes 16 --seed 0 --out DIR]
    ms2edge demo-quantization [--image FILE] --out DIR [--T 1 --D 4 --u-max 2]

Config files are JSON objects with the optional sections "network",
"train", "data" and "eval"; unknown keys are rejected. The resolved
configuration is written to <out>/config.json.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as D
from . import energy, evaluation, neuron, train, verify
from .network import NetworkSpec, build, load_checkpoint, save_checkpoint
from .neuron import NeuronConfig

log = logging.getLogger("ms2edge")

SECTIONS = {
    "network": {f.name for f in fields(NetworkSpec)},
    "train": {f.name for f in fields(train.TrainConfig)},
    "data": {"train_split", "val_split"},
    "eval": {"protocol", "tol"},
    "energy": {"constants", "E_MAC", "E_AC"},
}
NEURON_KEYS = {f.name for f in fields(NeuronConfig)}


class ConfigError(ValueError):
    pass


def load_config(path):
    cfg = {} if path is None else json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    for sec, body in cfg.items():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section {sec!r}; expected one of {sorted(SECTIONS)}")
        if not isinstance(body, dict):
            raise ConfigError(f"config section {sec!r} must be an object")
        unknown = set(body) - SECTIONS[sec]
        if unknown:
            raise ConfigError(f"unknown keys in {sec!r}: {sorted(unknown)}")
    neu = cfg.get("network", {}).get("neuron")
    if neu is not None:
        if not isinstance(neu, dict) or set(neu) - NEURON_KEYS:
            raise ConfigError(f"network.neuron must be an object with keys from {sorted(NEURON_KEYS)}")
    return cfg


def network_spec(cfg, seed=None):
    net = dict(cfg.get("network", {}))
    if seed is not None:
        net["seed"] = seed
    try:
        return NetworkSpec(**net)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"network config: {e}") from e


def train_config(cfg, seed=None):
    tr = dict(cfg.get("train", {}))
    if seed is not None:
        tr["seed"] = seed
    try:
        return train.TrainConfig(**tr)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train config: {e}") from e


def energy_constants(ec, preset=None):
    """pJ-per-operation table: a named preset, optionally with E_MAC / E_AC overrides (joules)."""
    name = preset or ec.get("constants", "float32")
    if name not in energy.CONSTANTS:
        raise ConfigError(f"energy.constants must be one of {sorted(energy.CONSTANTS)}, got {name!r}")
    consts = dict(energy.CONSTANTS[name])
    for k in ("E_MAC", "E_AC"):
        if k in ec:
            if not float(ec[k]) > 0:
                raise ConfigError(f"energy.{k} must be > 0")
            consts[k] = float(ec[k])
    return consts


def _echo(out, resolved):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _images_in(paths):
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += [f for f in sorted(p.iterdir()) if f.suffix.lower() in D.EXTS]
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"no such input: {p}")
    return files


def to_png8(values):
    """Edge map [1,H,W] or [H,W] in [0,1] -> uint8 grayscale round(255 * o)."""
    v = np.asarray(values, np.float64)
    v = v[0] if v.ndim == 3 else v
    return np.clip(np.round(255 * v), 0, 255).astype(np.uint8)


# subcommands -------------------------------------------------------------------

def cmd_synth_data(a):
    samples = D.synth_shapes(a.n, a.size, a.seed)
    base = D.save_dir(samples, a.out, a.split)
    _echo(a.out, {"synth-data": {"n": a.n, "size": a.size, "seed": a.seed, "split": a.split}})
    print(f"wrote {len(samples)} samples to {base}")
    return 0


def cmd_train(a):
    cfg = load_config(a.config)
    spec, tc = network_spec(cfg, a.seed), train_config(cfg, a.seed)
    dc = cfg.get("data", {})
    tr = D.load_dir(a.data, dc.get("train_split", "train"))
    va = D.load_dir(a.data, dc.get("val_split", "val")) if dc.get("val_split", "val") else []
    if not tr:
        raise FileNotFoundError(f"no training samples under {a.data}")
    _echo(a.out, {"network": spec.to_dict(), "train": tc.to_dict(), "data": {"dir": str(a.data), **dc}})
    net = build(spec)
    res = train.fit(net, tr, tc, va or None, a.out)
    save_checkpoint(net, Path(a.out) / "final.ckpt", meta={"best_ods": res.best_ods, "best_epoch": res.best_epoch})
    print(f"best validation ODS {res.best_ods:.4f} at epoch {res.best_epoch}; "
          f"checkpoint {Path(a.out) / 'final.ckpt'}")
    return 0


def cmd_infer(a):
    net, _, _ = load_checkpoint(a.checkpoint)
    net.prepare_inference()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _images_in(a.inputs)
    for f in files:
        img = D.read_image(f)
        em = net.multi_scale_infer(img, tuple(a.scales)) if a.multi_scale else net.forward_infer(img)
        D.write_png(out / f"{f.stem}.png", to_png8(em.values))
    _echo(out, {"infer": {"checkpoint": str(a.checkpoint), "multi_scale": a.multi_scale,
                          "scales": list(a.scales), "inputs": [str(f) for f in files]}})
    print(f"wrote {len(files)} edge maps to {out}")
    return 0


def _read_pred(path):
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), np.float32) / 255.0


def cmd_eval(a):
    preds = {p.stem: p for p in _images_in([a.pred])}
    gts = {p.stem: p for p in _images_in([a.gt])}
    common = sorted(set(preds) & set(gts))
    if not common:
        raise FileNotFoundError("no prediction/ground-truth pairs with matching names")
    for stem in sorted(set(gts) - set(preds)):
        log.warning("no prediction for %s", stem)
    pm = [_read_pred(preds[s]) for s in common]
    gm = [D.read_gt(gts[s])[0] for s in common]
    ec = load_config(a.config).get("eval", {})
    proto = (a.protocol or ec.get("protocol", "C")).upper()
    tol = a.tol if a.tol is not None else float(ec.get("tol", 0.0075))
    if proto not in ("C", "S") or not tol > 0:
        raise ConfigError(f"eval needs protocol C or S and tol > 0, got {proto!r}, {tol}")
    res = evaluation.ods_ois_ap(pm, gm, proto, tol)
    ac = evaluation.dataset_crispness(pm)
    report = f"{res.summary()} AC={ac:.4f} images={len(common)} tol={tol}"
    print(report)
    if a.out:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report + "\n", encoding="utf-8")
        evaluation.write_pr_table(out / "pr.tsv", res)
        _echo(out, {"eval": {"pred": str(a.pred), "gt": str(a.gt), "protocol": proto, "tol": tol}})
    return 0


def cmd_profile_energy(a):
    net, _, _ = load_checkpoint(a.checkpoint)
    net.prepare_inference()
    samples = D.load_dir(a.data, a.split)
    if not samples:
        raise FileNotFoundError(f"no samples under {a.data}")
    groups = {}
    for s in samples:
        groups.setdefault(s.image.shape, []).append(s.image)
    consts = energy_constants(load_config(a.config).get("energy", {}), a.constants)
    out = Path(a.out) if a.out else None
    texts = []
    for k, (shape, imgs) in enumerate(sorted(groups.items())):
        rep = energy.profile(net, np.stack(imgs), consts)
        texts.append(f"[input {shape[1]}x{shape[2]}]\n" + rep.summary())
        if out:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"layers_{shape[1]}x{shape[2]}.tsv").write_text(rep.table() + "\n", encoding="utf-8")
    text = "\n".join(texts)
    print(text)
    if out:
        (out / "energy.txt").write_text(text + "\n", encoding="utf-8")
        _echo(out, {"profile-energy": {"checkpoint": str(a.checkpoint), "data": str(a.data),
                                       "constants": consts}})
    return 0


def cmd_verify_isometry(a):
    cfg = load_config(a.config)
    net_cfg = dict(cfg.get("network", {}))
    neu = dict(net_cfg.get("neuron", {}))
    neu["beta"] = 0.0                  # the clean-theory regime
    net_cfg["neuron"] = neu
    spec = network_spec({"network": net_cfg}, a.seed)
    net = build(spec)
    if a.inputs == "noise":
        imgs = np.random.default_rng(a.seed + 1000).uniform(0, 1, (a.images, 3, a.size, a.size)).astype(np.float32)
    else:
        imgs = np.stack([s.image for s in D.synth_shapes(a.images, a.size, a.seed + 1000)])
    reports = verify.isometry_report(net, imgs, a.probes, a.seed)
    backbone = {b.name for st in net.stages for b in st.blocks}
    lines = [r.line() + ("" if r.block_id in backbone else "  (bottleneck, not gated)") for r in reports]
    ins = verify.block_inputs(net, imgs)
    blocks = net.blocks()
    comp = []
    for i in range(len(blocks) - 1):
        tot, prod = verify.composition_check(blocks[i], blocks[i + 1], ins[i], a.probes, a.seed)
        comp.append(f"compose {blocks[i].name} -> {blocks[i + 1].name}: phi={tot:.4f} "
                    f"product={prod:.4f} rel.gap={abs(tot - prod) / prod:.3f}")
    gated = [r for r in reports if r.block_id in backbone]
    ok = all(r.passed for r in gated)
    summary = f"backbone blocks in band {verify.BAND}: {sum(r.passed for r in gated)}/{len(gated)} -> " + \
              ("PASS" if ok else "FAIL")
    note = ("note: these are checks of the conclusions (band, composition); the unitary-invariance "
            "hypotheses behind them are not tested")
    text = "\n".join(lines + comp + [note, summary])
    print(text)
    if a.out:
        out = Path(a.out)
        _echo(out, {"network": spec.to_dict(), "verify": {"images": a.images, "probes": a.probes, "size": a.size,
                                                          "inputs": a.inputs}})
        (out / "isometry.txt").write_text(text + "\n", encoding="utf-8")
        with open(out / "isometry.tsv", "w", encoding="utf-8") as f:
            f.write("block\tphi\tphi_se\tvarphi\talpha2\tphi_alpha2\tphi_sc\tphi_res\n")
            for r in reports:
                e = r.estimate
                f.write(f"{r.block_id}\t{e.phi:.6f}\t{e.phi_se:.6f}\t{e.varphi:.6f}\t{e.alpha2:.6f}\t"
                        f"{e.product:.6f}\t{r.phi_shortcut:.6f}\t{r.phi_residual:.6f}\n")
    return 0 if ok else 3


def quantize_demo(u, T=1, D_max=4, v_th=1.0):
    """Time-averaged LIF and I-LIF outputs for a static membrane input u."""
    x = np.broadcast_to(np.asarray(u, np.float32), (T,) + np.shape(u))
    lif = neuron.fire(x, NeuronConfig.lif(v_th=v_th)).data.mean(axis=0)
    ilif = neuron.fire(x, NeuronConfig.ilif(D=D_max)).data.mean(axis=0)
    return lif, ilif


def cmd_demo_quantization(a):
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    if a.image:
        gray = D.read_image(a.image).mean(axis=0)
    else:
        gray = np.tile(np.linspace(0, 1, 256, dtype=np.float32), (32, 1))
    u = gray * a.u_max
    lif, ilif = quantize_demo(u, a.T, a.D, a.v_th)
    panel = np.concatenate([u, lif, ilif], axis=1) / a.u_max
    D.write_png(out / "quantized.png", to_png8(panel))
    lif_cfg, ilif_cfg = NeuronConfig.lif(v_th=a.v_th), NeuronConfig.ilif(D=a.D)
    prof_l = neuron.quantization_error_profile(lif_cfg, (0.0, a.u_max), a.points)
    prof_i = neuron.quantization_error_profile(ilif_cfg, (0.0, a.u_max), a.points)
    neuron.write_table(out / "error_curves.tsv", np.column_stack([prof_l[:, 0], prof_l[:, 1], prof_i[:, 1]]),
                       ("u", "lif_error", "ilif_error"))
    ramp = np.linspace(0, a.u_max, a.points)
    text = (f"mean |s-u| over u in [0, {a.u_max}]: LIF(V_th={a.v_th}) "
            f"{neuron.mean_quantization_error(lif_cfg, ramp):.4f}, "
            f"I-LIF(D={a.D}) {neuron.mean_quantization_error(ilif_cfg, ramp):.4f}")
    (out / "summary.txt").write_text(text + "\n", encoding="utf-8")
    _echo(out, {"demo-quantization": {"image": a.image, "T": a.T, "D": a.D, "v_th": a.v_th, "u_max": a.u_max}})
    print(text)
    return 0


# parser ------------------------------------------------------------------------

def parser():
    p = argparse.ArgumentParser(prog="ms2edge", description="Spiking multi-scale edge detection at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic shapes dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train", help="subdirectory name ('' for none)")
    s.set_defaults(fn=cmd_synth_data)

    s = sub.add_parser("train", help="train from a config file and a data directory")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None, help="overrides network.seed and train.seed")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", help="write 8-bit edge-map PNGs for images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--multi-scale", action="store_true", help="fuse predictions over an image pyramid")
    s.add_argument("--scales", type=float, nargs="+", default=[0.5, 1.0, 2.0])
    s.add_argument("inputs", nargs="+", help="image files or directories")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("eval", help="ODS/OIS/AP/AC of predicted edge maps")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--config", default=None, help="reads the eval section; flags win")
    s.add_argument("--protocol", choices=["c", "s", "C", "S"], default=None, help="default C")
    s.add_argument("--tol", type=float, default=None,
                   help="match radius as a fraction of the image diagonal (default 0.0075)")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("profile-energy", help="operation counts, firing rates and energy")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default=None)
    s.add_argument("--config", default=None, help="reads the energy section; flags win")
    s.add_argument("--constants", choices=sorted(energy.CONSTANTS), default=None, help="default float32")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_profile_energy)

    s = sub.add_parser("verify-isometry", help="per-block gradient isometry estimates")
    s.add_argument("--config", default=None)
    s.add_argument("--images", type=int, default=8)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--probes", type=int, default=16)
    s.add_argument("--inputs", choices=["noise", "shapes"], default="noise",
                   help="i.i.d. uniform pixel noise or synthetic-shape images")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_verify_isometry)

    s = sub.add_parser("demo-quantization", help="LIF vs I-LIF quantization of an image and error curves")
    s.add_argument("--image", default=None, help="input image (default: a horizontal ramp)")
    s.add_argument("--out", required=True)
    s.add_argument("--T", type=int, default=1)
    s.add_argument("--D", type=int, default=4)
    s.add_argument("--v-th", type=float, default=1.0, help="LIF threshold")
    s.add_argument("--u-max", type=float, default=2.0, help="pixel value 1 maps to this membrane input")
    s.add_argument("--points", type=int, default=401)
    s.add_argument("--seed", type=int, default=0, help="accepted for uniformity; the demo is deterministic")
    s.set_defaults(fn=cmd_demo_quantization)
    return p


def main(argv=None):
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError, OSError) as e:
        print(f"ms2edge {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
