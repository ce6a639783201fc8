"""Command-line front end.

Subcommands: quantize-rtn, faar-stage1, faar-stage2, harden, oracle, study,
eval-recon, plus demo (generates the bundled demo inputs). Flags override
config-file values, which override defaults. Every run writes its fully
resolved config next to its outputs; outputs are bitwise reproducible given
the same inputs, config, and seed. Errors print one JSON line to stderr and
exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .codec import compute_scales, dequantize, quantize_rtn
from .config import (
    OUT_DIR_ENV,
    ConfigError,
    RunConfig,
    load_config,
    resolved_dict,
    resolved_json,
)
from .oracles import brute_force_optimal, compare_rounding_study
from .optim import DivergenceError
from .rounding import harden_to_quantized, init_rounding_vars
from .stage1 import LinearLayer, make_calib_batch, optimize_layer, reconstruction_mse
from .stage2 import MicroNet, align_model, forward, make_micronet
from .tensorio import (
    FormatError,
    atomic_write_text,
    load_named_tensor,
    load_rounding_vars,
    load_tensor,
    pack_nvfp4,
    save_rounding_vars,
    save_tensor,
    unpack_nvfp4,
)


def _float_repr(x) -> str:
    return repr(float(x))


def _write_trace(path: str, header: list[str], rows: list[tuple]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(int(c)) if i == 0 else _float_repr(c)
                              for i, c in enumerate(row)))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()

    def take(flag, *path):
        val = getattr(args, flag, None)
        if val is None:
            return
        obj = cfg
        for p in path[:-1]:
            obj = getattr(obj, p)
        setattr(obj, path[-1], val)

    take("seed", "seed")
    take("block_size", "block_size")
    stage = getattr(args, "_stage", None)
    if stage:
        take("steps", stage, "steps")
        take("lr", stage, "learning_rate")
        take("lambda_round", stage, "lambda_round")
        take("beta_start", stage, "beta_start")
        take("beta_end", stage, "beta_end")
    take("lambda_kl", "stage2", "lambda_kl")
    take("tau", "stage2", "tau")
    take("batch_size", "stage2", "batch_size")
    if getattr(args, "beta_restart", False):
        cfg.stage2.beta_restart = True
    take("samples", "study_samples")
    take("max_n", "oracle_max_n")
    # Re-validate after overrides.
    cfg.stage1_config()
    cfg.stage2_config()
    return cfg


def _out_dir(args, cfg: RunConfig) -> str:
    out = getattr(args, "out", None) or cfg.out_dir or os.environ.get(OUT_DIR_ENV)
    if not out:
        raise ConfigError("no output directory: pass --out, set out_dir in the "
                          f"config, or export {OUT_DIR_ENV}")
    os.makedirs(out, exist_ok=True)
    return out


def _load_layer(path: str) -> LinearLayer:
    W, name = load_named_tensor(path)
    return LinearLayer(W=np.asarray(W, dtype=np.float64), name=name)


def _load_calib(path: str, layer: LinearLayer, block_size: int):
    X = np.asarray(load_tensor(path), dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != layer.in_dim:
        raise ConfigError(f"calibration data {X.shape} does not feed a layer "
                          f"with in_dim {layer.in_dim}")
    return make_calib_batch(X, block_size)


def cmd_quantize_rtn(args) -> int:
    cfg = _resolve_config(args)
    W, name = load_named_tensor(args.weights)
    scales = compute_scales(np.asarray(W, dtype=np.float64), cfg.block_size)
    pack_nvfp4(quantize_rtn(np.asarray(W, dtype=np.float64), scales), args.out_file)
    atomic_write_text(args.out_file + ".config.json", resolved_json(cfg))
    return 0


def cmd_faar_stage1(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    layer = _load_layer(args.weights)
    batch = _load_calib(args.calib, layer, cfg.block_size)
    rv, trace = optimize_layer(layer, [batch], cfg.stage1_config())
    save_rounding_vars(rv, os.path.join(out, f"{layer.name}.rv.json"),
                       weights_file=os.path.abspath(args.weights), name=layer.name)
    _write_trace(os.path.join(out, "trace.csv"),
                 ["step", "mse_term", "reg_term", "beta"], trace)
    atomic_write_text(os.path.join(out, "config.json"), resolved_json(cfg))
    return 0


def _load_net(path: str) -> tuple[MicroNet, list[str], float, dict]:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError("malformed-header", f"{path}: {e}") from e
    if not isinstance(doc, dict) or doc.get("kind") != "micronet":
        raise FormatError("malformed-header", f"{path}: not a micro-net manifest")
    base = os.path.dirname(os.path.abspath(path))
    layers, weight_files = [], []
    for entry in doc.get("layers", []):
        wpath = entry["weights"]
        if not os.path.isabs(wpath):
            wpath = os.path.join(base, wpath)
        W, _ = load_named_tensor(wpath)
        layers.append(LinearLayer(W=np.asarray(W, dtype=np.float64), name=entry["name"]))
        weight_files.append(wpath)
    return MicroNet(layers=layers), weight_files, float(doc.get("tau", 1.0)), doc


def cmd_faar_stage2(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    net, weight_files, _, _ = _load_net(args.net)
    s2 = cfg.stage2_config()
    rvs = []
    for layer in net.layers:
        rv, _, _ = load_rounding_vars(os.path.join(args.rvs, f"{layer.name}.rv.json"))
        if rv.shape != layer.W.shape:
            raise ConfigError(f"checkpoint for {layer.name} has shape {rv.shape}, "
                              f"layer is {layer.W.shape}")
        rvs.append(rv)
    X = np.asarray(load_tensor(args.data), dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.in_dim:
        raise ConfigError(f"data {X.shape} does not feed a net with in_dim {net.in_dim}")
    batches = [X[i:i + s2.batch_size] for i in range(0, X.shape[0], s2.batch_size)]
    rvs, trace = align_model(net, rvs, batches, s2)
    manifest = {"kind": "micronet-rvs", "version": 1, "layers": []}
    for layer, rv, wfile in zip(net.layers, rvs, weight_files):
        save_rounding_vars(rv, os.path.join(out, f"{layer.name}.rv.json"),
                           weights_file=wfile, name=layer.name)
        manifest["layers"].append({"name": layer.name,
                                   "dims": [layer.out_dim, layer.in_dim],
                                   "rv": f"{layer.name}.rv.json"})
    atomic_write_text(os.path.join(out, "model.json"),
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _write_trace(os.path.join(out, "trace.csv"),
                 ["step", "kl", "mse", "round", "beta", "total"], trace)
    atomic_write_text(os.path.join(out, "config.json"), resolved_json(cfg))
    return 0


def cmd_harden(args) -> int:
    cfg = _resolve_config(args)
    rv, _, _ = load_rounding_vars(args.checkpoint)
    pack_nvfp4(harden_to_quantized(rv), args.out_file)
    atomic_write_text(args.out_file + ".config.json", resolved_json(cfg))
    return 0


def cmd_oracle(args) -> int:
    cfg = _resolve_config(args)
    layer = _load_layer(args.weights)
    batch = _load_calib(args.calib, layer, cfg.block_size)
    scales = compute_scales(layer.W, cfg.block_size)
    v_star, loss_star = brute_force_optimal(layer, batch, scales, max_n=cfg.oracle_max_n)
    rv = init_rounding_vars(layer.W, scales)
    report = {
        "loss": loss_star,
        "assignment": [int(b) for b in v_star.reshape(-1)],
        "n_free": int((~rv.frozen_mask).sum()),
        "config": resolved_dict(cfg),
    }
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if getattr(args, "out", None) or cfg.out_dir or os.environ.get(OUT_DIR_ENV):
        out = _out_dir(args, cfg)
        atomic_write_text(os.path.join(out, "oracle.json"), text)
        atomic_write_text(os.path.join(out, "config.json"), resolved_json(cfg))
    else:
        sys.stdout.write(text)
    return 0


def cmd_study(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    layer = _load_layer(args.weights)
    batch = _load_calib(args.calib, layer, cfg.block_size)
    report = compare_rounding_study(layer, batch, n_samples=cfg.study_samples,
                                    seed=cfg.seed, block_size=cfg.block_size,
                                    max_n=cfg.oracle_max_n)
    atomic_write_text(os.path.join(out, "study.json"),
                      json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
    atomic_write_text(os.path.join(out, "study.txt"), report.format_table())
    atomic_write_text(os.path.join(out, "config.json"), resolved_json(cfg))
    return 0


def cmd_eval_recon(args) -> int:
    cfg = _resolve_config(args)
    W, name = load_named_tensor(args.original)
    W = np.asarray(W, dtype=np.float64)
    q = unpack_nvfp4(args.packed)
    if q.shape != W.shape:
        raise ConfigError(f"packed shape {q.shape} does not match original {W.shape}")
    W_hat = dequantize(q)
    if getattr(args, "calib", None):
        layer = LinearLayer(W=W, name=name)
        batch = _load_calib(args.calib, layer, q.scales.block_size)
        result = {"kind": "output_reconstruction",
                  "mse": reconstruction_mse(layer, batch, W_hat)}
    else:
        result = {"kind": "weight", "mse": float(np.sum((W - W_hat) ** 2))}
    result["config"] = resolved_dict(cfg)
    sys.stdout.write(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_demo(args) -> int:
    """Deterministic demo bundle: teacher net, per-layer calibration, config."""
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    rng = np.random.default_rng(cfg.seed)
    net = make_micronet(rng)
    X = rng.normal(size=(128, net.in_dim))
    manifest = {"kind": "micronet", "version": 1, "tau": cfg.stage2.tau, "layers": []}
    H = X
    for k, layer in enumerate(net.layers):
        save_tensor(layer.W, os.path.join(out, f"{layer.name}.tensor"), name=layer.name)
        save_tensor(H, os.path.join(out, f"calib_{layer.name}.tensor"),
                    name=f"calib_{layer.name}")
        manifest["layers"].append({"name": layer.name, "weights": f"{layer.name}.tensor",
                                   "dims": [layer.out_dim, layer.in_dim]})
        if k < len(net.layers) - 1:
            H = np.maximum(H @ layer.W.T, 0.0)   # teacher activations feed the next layer
    save_tensor(X, os.path.join(out, "calib.tensor"), name="calib")
    atomic_write_text(os.path.join(out, "net.json"),
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    atomic_write_text(os.path.join(out, "config.json"), resolved_json(cfg))
    return 0


def _add_common(p, *, stage: str | None = None):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--block-size", dest="block_size", type=int)
    if stage:
        p.set_defaults(_stage=stage)
        p.add_argument("--steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--lambda-round", dest="lambda_round", type=float)
        p.add_argument("--beta-start", dest="beta_start", type=float)
        p.add_argument("--beta-end", dest="beta_end", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="faarkit",
                                 description="NVFP4 quantization with learnable rounding")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize-rtn", help="round-to-nearest encode a tensor")
    p.add_argument("weights")
    p.add_argument("out_file")
    _add_common(p)
    p.set_defaults(fn=cmd_quantize_rtn)

    p = sub.add_parser("faar-stage1", help="per-layer rounding calibration")
    p.add_argument("--weights", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out")
    _add_common(p, stage="stage1")
    p.set_defaults(fn=cmd_faar_stage1)

    p = sub.add_parser("faar-stage2", help="full-model alignment of a micro-net")
    p.add_argument("--net", required=True)
    p.add_argument("--rvs", required=True, help="directory of stage-1 checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    _add_common(p, stage="stage2")
    p.add_argument("--lambda-kl", dest="lambda_kl", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--beta-restart", dest="beta_restart", action="store_true")
    p.set_defaults(fn=cmd_faar_stage2)

    p = sub.add_parser("harden", help="binarize a checkpoint into a packed tensor")
    p.add_argument("checkpoint")
    p.add_argument("out_file")
    _add_common(p)
    p.set_defaults(fn=cmd_harden)

    p = sub.add_parser("oracle", help="enumerate the optimal rounding of a small layer")
    p.add_argument("--weights", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out")
    p.add_argument("--max-n", dest="max_n", type=int)
    _add_common(p)
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("study", help="compare rounding strategies on one layer")
    p.add_argument("--weights", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out")
    p.add_argument("--samples", type=int)
    p.add_argument("--max-n", dest="max_n", type=int)
    _add_common(p)
    p.set_defaults(fn=cmd_study)

    p = sub.add_parser("eval-recon", help="loss of a packed tensor against its original")
    p.add_argument("original")
    p.add_argument("packed")
    p.add_argument("--calib", help="report output reconstruction loss on this data")
    _add_common(p)
    p.set_defaults(fn=cmd_eval_recon)

    p = sub.add_parser("demo", help="write the deterministic demo bundle")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(fn=cmd_demo)

    return ap


def _fail(code: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")
    return 1


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except ConfigError as e:
        return _fail("config", str(e))
    except FormatError as e:
        return _fail(e.code, str(e))
    except FileNotFoundError as e:
        return _fail("file-not-found", str(e))
    except DivergenceError as e:
        return _fail("divergence", str(e))
    except ValueError as e:
        return _fail("validation", str(e))


if __name__ == "__main__":
    sys.exit(main())
