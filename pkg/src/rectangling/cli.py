"""Command-line entry point.

Subcommands: gen-data, train (mdm|cdm), rectangle, eval. Every output
directory receives a manifest.json echoing the fully-resolved configuration,
so any artifact can be regenerated bit-exactly by replaying the manifest.

A flat key=value config file (--config) supplies defaults; explicit CLI
flags override it.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .cdm import PipelineConfig, rectangle_full, train_cdm
from .data import SynthConfig, load_dataset, load_inputs, write_dataset
from .io_utils import read_manifest, save_image_png, write_manifest
from .mdm import train_mdm
from .metrics import EvalReport, psnr, ssim
from .schedule import SamplerConfig
from .training import TrainConfig, load_model
from .warp import save_field_png16, save_field_raw


def _read_config_file(path) -> dict:
    """Flat key=value lines; '#' starts a comment; keys use - or _."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _apply_config_file(parser: argparse.ArgumentParser, argv):
    """Load --config key=value pairs as subcommand defaults; flags override."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    sub_actions = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    command = next((tok for tok in argv if not tok.startswith("-")), None)
    if not sub_actions or command not in sub_actions[0].choices:
        return
    target = sub_actions[0].choices[command]
    file_values = _read_config_file(known.config)
    valid = {a.dest for a in target._actions}
    unknown = set(file_values) - valid
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    typed = {}
    for action in target._actions:
        if action.dest in file_values:
            raw = file_values[action.dest]
            if action.type is not None:
                typed[action.dest] = action.type(raw)
            elif action.const is True or isinstance(action.default, bool):
                typed[action.dest] = raw.lower() in ("1", "true", "yes", "on")
            else:
                typed[action.dest] = raw
    target.set_defaults(**typed)


def _resolved_manifest(command: str, args: argparse.Namespace, extra: dict | None = None) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    payload = {
        "tool": "rectangling",
        "version": __version__,
        "command": command,
        "config": cfg,
    }
    if extra:
        payload.update(extra)
    return payload


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = SynthConfig(
        H=args.height,
        W=args.width,
        n_samples=args.n,
        field_family=args.family,
        max_disp=args.max_disp,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset_manifest = write_dataset(out, cfg)
    # Keep the dataset manifest's own config/baseline sections and append
    # the CLI invocation details alongside them.
    manifest = dict(dataset_manifest)
    manifest.update(
        {"tool": "rectangling", "version": __version__, "command": "gen-data",
         "cli_config": {k: v for k, v in vars(args).items() if k not in ("func", "config")}}
    )
    write_manifest(out, manifest)
    print(f"wrote {cfg.n_samples} samples to {out}")
    print(
        f"baseline: psnr {dataset_manifest['baseline']['psnr_mean']:.3f} "
        f"ssim {dataset_manifest['baseline']['ssim_mean']:.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# train


DEFAULT_LR = {"mdm": 2e-4, "cdm": 1e-5}


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    max_disp = args.max_disp
    if max_disp is None:
        if dataset.manifest and "config" in dataset.manifest:
            max_disp = float(dataset.manifest["config"]["max_disp"])
        else:
            max_disp = 6.0
    lr = args.lr if args.lr is not None else DEFAULT_LR[args.model]
    cfg = TrainConfig(
        steps=args.steps,
        batch_size=args.batch,
        lr=lr,
        cond_drop=args.cond_drop,
        seed=args.seed,
        T=args.t,
        beta_start=args.beta_start,
        beta_end=args.beta_end,
        base_channels=args.base_channels,
        emb_dim=args.emb_dim,
        max_disp=max_disp,
        use_cond_mask=not args.no_cond_mask,
        ckpt_every=args.ckpt_every,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_fn = train_mdm if args.model == "mdm" else train_cdm
    model, history = train_fn(dataset, cfg, out_dir=out, resume_from=args.resume)
    write_manifest(out, _resolved_manifest(f"train {args.model}", args, {"train_config": asdict(cfg)}))
    if history:
        final = history[-1][-1]
        print(f"trained {args.model} for {cfg.steps} steps; final loss {final:.6f}")
    else:
        print(f"trained {args.model} for {cfg.steps} steps")
    print(f"checkpoint: {out / (args.model + '.ckpt')}")
    return 0


# ---------------------------------------------------------------------------
# rectangle


def _check_ckpt(path, flag: str):
    if path is None:
        raise FileNotFoundError(f"missing checkpoint: pass {flag}")
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found at '{path}' (pass {flag})")


def cmd_rectangle(args) -> int:
    pipe = PipelineConfig(
        mdm_sampler=SamplerConfig(
            num_steps=args.mdm_steps, cfg_scale=args.cfg_scale, seed=args.seed
        ),
        cdm_sampler=SamplerConfig(
            num_steps=args.cdm_steps, cfg_scale=args.cdm_cfg_scale, seed=args.seed,
            eta=args.fusion_eta,
        ),
        omega0=args.omega0,
        tau_valid=args.tau_valid,
        use_warped_mask=not args.unwarped_mask,
        mask_polarity=args.mask_polarity,
        wsm=args.wsm,
        fixed_mask_value=args.fixed_mask_value,
    )
    names, inputs, masks, fields = load_inputs(args.data)
    if args.gt_field:
        missing = [n for n, f in zip(names, fields) if f is None]
        if missing:
            raise FileNotFoundError(
                f"--gt-field needs field/<name>.f32 for every input; missing: {missing[:5]}"
            )
        mdm_model = None
    else:
        _check_ckpt(args.mdm_ckpt, "--mdm-ckpt")
        mdm_model = load_model(args.mdm_ckpt)
    _check_ckpt(args.cdm_ckpt, "--cdm-ckpt")
    cdm_model = load_model(args.cdm_ckpt)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, i_s, m_s, f_gt in zip(names, inputs, masks, fields):
        res = rectangle_full(
            mdm_model,
            cdm_model,
            i_s,
            m_s,
            pipe,
            field_override=f_gt if args.gt_field else None,
        )
        save_image_png(out / f"{name}.png", res.I_R_prime)
        if args.debug:
            save_field_raw(out / f"{name}_field.f32", res.field)
            max_disp = float(np.abs(res.field).max()) or 1.0
            save_field_png16(out / f"{name}_field", res.field, max_disp)
            save_image_png(out / f"{name}_coarse.png", res.I_R_hat)
            res.I_R_hat.astype("<f4").tofile(out / f"{name}_coarse.f32")
            save_image_png(out / f"{name}_conf.png", res.M_R_hat)
            res.M_R_hat.astype("<f4").tofile(out / f"{name}_conf.f32")
            res.I_R_prime.astype("<f4").tofile(out / f"{name}_out.f32")
    write_manifest(out, _resolved_manifest("rectangle", args, {"n_images": len(names)}))
    print(f"rectangled {len(names)} images into {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    from .io_utils import load_image_png

    data = load_dataset(args.data)
    out_dir = Path(args.outputs)
    report = EvalReport()
    missing = []
    for i, name in enumerate(data.names):
        path = out_dir / f"{name}.png"
        if not path.exists():
            missing.append(name)
            continue
        out_img = load_image_png(path)
        if out_img.ndim == 2:
            out_img = np.repeat(out_img[..., None], 3, axis=2)
        if out_img.shape != data.I_R[i].shape:
            raise ValueError(f"{path}: output shape {out_img.shape} does not match gt")
        report.add(
            name,
            psnr(out_img, data.I_R[i]),
            ssim(out_img, data.I_R[i]),
            ref_psnr=psnr(data.I_S[i], data.I_R[i]),
            ref_ssim=ssim(data.I_S[i], data.I_R[i]),
        )
    if missing:
        raise ValueError(
            f"{len(missing)} dataset samples have no output image (e.g. {missing[:5]}); "
            "eval needs a matched file set"
        )
    if not report.names:
        raise ValueError("evaluation set is empty")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    summary = report.summary()
    (out / "summary.txt").write_text(summary + "\n")
    write_manifest(
        out,
        _resolved_manifest(
            "eval",
            args,
            {
                "psnr_mean": report.psnr_mean,
                "ssim_mean": report.ssim_mean,
                "ref_psnr_mean": report.ref_psnr_mean,
                "ref_ssim_mean": report.ref_ssim_mean,
            },
        ),
    )
    print(summary)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rectangling",
        description="Diffusion-based rectangling of stitched images.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--max-disp", type=float, default=6.0)
    p.add_argument("--family", choices=("boundary-shrink", "smooth-random"), default="boundary-shrink")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a diffusion model")
    p.add_argument("model", choices=("mdm", "cdm"))
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--cond-drop", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t", type=int, default=1000)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--emb-dim", type=int, default=32)
    p.add_argument("--max-disp", type=float, default=None,
                   help="field normalization; defaults to the dataset manifest value")
    p.add_argument("--no-cond-mask", action="store_true",
                   help="train without the stitched-content mask condition")
    p.add_argument("--ckpt-every", type=int, default=2000)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rectangle", help="rectangle stitched images end to end")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="directory with img/ and mask/")
    p.add_argument("--out", required=True)
    p.add_argument("--mdm-ckpt", default=None)
    p.add_argument("--cdm-ckpt", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mdm-steps", type=int, default=2)
    p.add_argument("--cdm-steps", type=int, default=200)
    p.add_argument("--cfg-scale", type=float, default=1.0,
                   help="motion-stage guidance scale (amplification overshoots "
                        "on the synthetic benchmark; raise for experiments)")
    p.add_argument("--cdm-cfg-scale", type=float, default=1.0)
    p.add_argument("--omega0", type=float, default=0.25)
    p.add_argument("--tau-valid", type=float, default=0.999)
    p.add_argument("--wsm", choices=("eq12", "fixed", "off"), default="eq12")
    p.add_argument("--fixed-mask-value", type=float, default=0.5)
    p.add_argument("--unwarped-mask", action="store_true",
                   help="use the unwarped stitched mask in the confidence formula")
    p.add_argument("--mask-polarity", choices=("margin", "content"), default="margin",
                   help="how the stitched mask enters the confidence average: "
                        "as the margin indicator (default) or as raw valid content")
    p.add_argument("--fusion-eta", type=float, default=0.0,
                   help="stochastic fusion: DDIM eta for the content stage")
    p.add_argument("--gt-field", action="store_true",
                   help="bypass the motion model and warp by the stored field files")
    p.add_argument("--debug", action="store_true", help="emit intermediates")
    p.set_defaults(func=cmd_rectangle)

    p = sub.add_parser("eval", help="score outputs against ground truth")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--outputs", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
