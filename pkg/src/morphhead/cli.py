"""Command-line surface: dataset generation, training, rendering,
animation sweeps, evaluation, gradient checking, and the HTTP service.

Every subcommand accepts `--config FILE` (KEY=VALUE text) plus repeated
`--set section.key=value` overrides. Exit codes: 0 success, 1 invalid
input (bad flags, malformed requests, missing files), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import Config, load_config, set_key
from .datasets import load_dataset
from .errors import InvalidInputError, MorphheadError
from .fields import build_networks
from .gradcheck import run_gradcheck
from .infer import (
    evaluate_frames,
    load_for_inference,
    parse_render_request,
    render_params,
    template_from_config,
)
from .metrics import MetricsReport, compute_metrics
from .rendering import save_image_png
from .synth import generate_dataset, template_hash
from .train import fit

CHANNELS = ("rgb", "mask", "normal", "depth")


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, default=None, help="KEY=VALUE config file")
    sub.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )


def _load_cfg(args) -> Config:
    return load_config(args.config, args.overrides)


def _checkpoint_cfg(args, ckpt_cfg: Config) -> Config:
    """Configuration for checkpoint-driven commands: the checkpoint's own
    training config unless a file replaces it, then flag overrides."""
    cfg = load_config(args.config) if args.config else ckpt_cfg
    for item in args.overrides:
        if "=" not in item:
            raise InvalidInputError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        set_key(cfg, key.strip(), raw.strip())
    return cfg


def _read_json(source: str | Path, label: str) -> dict:
    text = str(source)
    if text.lstrip().startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise InvalidInputError(f"inline {label} JSON is invalid: {e}")
    path = Path(source)
    if not path.exists():
        raise InvalidInputError(f"no {label} file at {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"{path} is not valid JSON: {e}")


def _write_bundle(prefix: Path, bundle, near: float, far: float) -> list[Path]:
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for kind in CHANNELS:
        path = prefix.parent / f"{prefix.name}.{kind}.png"
        save_image_png(path, getattr(bundle, kind), kind, near=near, far=far)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    template = template_from_config(cfg.data)
    dataset = generate_dataset(template, cfg.data, args.out)
    counts = {s: len(dataset.split(s)) for s in ("train", "test", "holdout")}
    print(f"wrote {len(dataset)} frames to {dataset.root} {counts}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    dataset = load_dataset(args.data, split="train")
    template = template_from_config(cfg.data)
    recorded = dataset.manifest.get("template_hash")
    if recorded and recorded != template_hash(template):
        raise InvalidInputError(
            f"dataset at {args.data} was generated with a different head template; "
            "match data.template_seed/data.template_subdivisions"
        )
    nets = build_networks(cfg.fields, n_frames=len(dataset.frames))
    result = fit(dataset.frames, nets, template, cfg, args.out)
    print(
        f"trained {result.epochs_completed} epochs; checkpoint {result.checkpoint_path}; "
        f"log {result.log_path}"
    )
    return 0


def cmd_render(args) -> int:
    nets, template, ckpt_cfg = load_for_inference(args.checkpoint)
    cfg = _checkpoint_cfg(args, ckpt_cfg)
    body = _read_json(args.params, "parameter") if args.params else {}
    request = parse_render_request(body, cfg)
    bundle = render_params(
        nets, template, request.params, request.camera, cfg, seed=args.seed
    )
    written = _write_bundle(args.out, bundle, request.camera.near, request.camera.far)
    print("\n".join(str(p) for p in written))
    return 0


def _sweep_bodies(spec: dict, defaults: dict) -> list[dict]:
    """Linear parameter sweep: t runs from 0 to t_max (t > 1 extrapolates
    past the target key-frame, matching the interpolation/extrapolation
    protocol for expression transfer)."""
    for key in spec:
        if key not in ("from", "to", "steps", "t_max"):
            raise InvalidInputError(f"unknown field sweep.{key!r}")
    start, end = spec.get("from", {}), spec.get("to", {})
    if not isinstance(start, dict) or not isinstance(end, dict):
        raise InvalidInputError("sweep.from and sweep.to must be objects")
    steps = spec.get("steps", 8)
    if isinstance(steps, bool) or not isinstance(steps, int) or steps < 2:
        raise InvalidInputError("sweep.steps must be an integer >= 2")
    t_max = spec.get("t_max", 1.0)
    if isinstance(t_max, bool) or not isinstance(t_max, (int, float)) or t_max <= 0:
        raise InvalidInputError("sweep.t_max must be a positive number")

    bodies = []
    for t in np.linspace(0.0, float(t_max), steps):
        body = dict(defaults)
        for key in ("theta", "psi"):
            a = np.asarray(start.get(key, defaults.get(key, [])), dtype=np.float64)
            b = np.asarray(end.get(key, defaults.get(key, [])), dtype=np.float64)
            if a.size == 0 and b.size == 0:
                continue
            if a.size == 0 or b.size == 0 or a.shape != b.shape:
                raise InvalidInputError(
                    f"sweep endpoints must both provide {key} with equal length"
                )
            body[key] = ((1.0 - t) * a + t * b).tolist()
        bodies.append(body)
    return bodies


def cmd_animate(args) -> int:
    nets, template, ckpt_cfg = load_for_inference(args.checkpoint)
    cfg = _checkpoint_cfg(args, ckpt_cfg)
    script = _read_json(args.script, "animation script")
    if not isinstance(script, dict):
        raise InvalidInputError("animation script must be a JSON object")
    defaults = {k: v for k, v in script.items() if k not in ("frames", "sweep")}

    if ("frames" in script) == ("sweep" in script):
        raise InvalidInputError("animation script needs exactly one of 'frames' or 'sweep'")
    if "frames" in script:
        entries = script["frames"]
        if not isinstance(entries, list) or not entries:
            raise InvalidInputError("frames must be a non-empty list of objects")
        bodies = []
        for entry in entries:
            if not isinstance(entry, dict):
                raise InvalidInputError("frames must be a non-empty list of objects")
            bodies.append({**defaults, **entry})
    else:
        bodies = _sweep_bodies(script["sweep"], defaults)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, body in enumerate(bodies):
        request = parse_render_request(body, cfg)
        bundle = render_params(
            nets, template, request.params, request.camera, cfg, seed=args.seed
        )
        _write_bundle(out_dir / f"{i:06d}", bundle, request.camera.near, request.camera.far)
        manifest.append(
            {
                "frame": i,
                "theta": request.params.theta.tolist(),
                "psi": request.params.psi.tolist(),
            }
        )
    with open(out_dir / "animation.json", "w") as fh:
        json.dump({"frames": manifest}, fh, indent=1)
    print(f"wrote {len(bodies)} frames to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data, split=args.split)
    frames = dataset.split(args.split) if args.split else list(dataset.frames)
    if not frames:
        raise InvalidInputError(f"no frames to evaluate in {args.data} (split={args.split})")
    if args.self_check:
        # score the dataset against itself: every metric must sit at its
        # identity value, validating the metrics/dataset plumbing
        report = MetricsReport(region=args.region)
        for frame in frames:
            report.frames.append(
                compute_metrics(frame, frame, region=args.region, frame_id=frame.frame_id)
            )
    else:
        if args.checkpoint is None:
            raise InvalidInputError("eval requires --checkpoint (or --self-check)")
        nets, template, ckpt_cfg = load_for_inference(args.checkpoint)
        cfg = _checkpoint_cfg(args, ckpt_cfg)
        report = evaluate_frames(frames, nets, template, cfg, region=args.region)
    text = json.dumps(report.as_dict(), indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed, n_rays=args.rays, n_params=args.params)
    print(report.summary())
    return 0 if report.passed else 2


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_app

    cfg = _checkpoint_cfg(args, load_for_inference(args.checkpoint)[2])
    app = build_app(args.checkpoint, cfg=cfg, frontend_dir=args.frontend)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="morphhead",
        description="Animatable implicit head avatars: data, training, rendering, serving.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="render the synthetic ground-truth dataset")
    p.add_argument("--out", type=Path, required=True, help="output dataset directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train", help="fit the field networks on a dataset")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="run directory for checkpoints/logs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("render", help="render one frame from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--params", default=None,
                   help="render request: inline JSON or a path to a JSON file")
    p.add_argument("--out", type=Path, required=True, help="output prefix for PNG channels")
    p.add_argument("--seed", type=int, default=0, help="sampling-jitter seed")
    _add_config_flags(p)
    p.set_defaults(func=cmd_render)

    p = subs.add_parser("animate", help="render a parameter schedule to an image sequence")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--script", required=True,
                   help="inline JSON or a path; keys 'frames': [...] or "
                        "'sweep': {from, to, steps, t_max}")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    _add_config_flags(p)
    p.set_defaults(func=cmd_animate)

    p = subs.add_parser("eval", help="score a checkpoint against a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--split", default=None, choices=("train", "test", "holdout"))
    p.add_argument("--region", default="gt",
                   choices=("gt", "intersection", "union", "full"))
    p.add_argument("--self-check", action="store_true",
                   help="score the dataset against itself (metrics identity check)")
    p.add_argument("--out", type=Path, default=None, help="also write the JSON report here")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rays", type=int, default=20)
    p.add_argument("--params", type=int, default=30, help="parameter entries to probe")
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("serve", help="serve renders (and the puppeteer UI) over HTTP")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--frontend", type=Path, default=None,
                   help="static directory to serve at /")
    _add_config_flags(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse prints usage itself; fold its exit into our code space
        return 0 if e.code == 0 else 1
    try:
        return args.func(args)
    except InvalidInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except MorphheadError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
