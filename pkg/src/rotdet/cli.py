"""Command-line surface: train, eval, bench-iou, selfcheck, render.

All commands exit 0 on success. ``selfcheck`` runs fast oracle suites
(geometry vs rasterization, coder round trips, convolution reduction and
finite-difference gradients, loss closed forms, pooling exactness) and
exits nonzero if any suite fails; ``bench-iou`` measures rotated-IoU
throughput against the recorded floor of 1e5 pairs/second.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np
import yaml

from .config import RunConfig
from .data.evaluate import dump_detections, format_ap_table
from .data.synthetic import CLASS_NAMES, DatasetRecord, SceneSpec, generate_scene, load_dataset
from .geometry import obb_corners, rotated_iou_pairs
from .model import Detector
from .train import build_records, run_eval, train

BENCH_MIN_PAIRS_PER_SEC = 1e5  # recorded from the first benchmark run


# ---------------------------------------------------------------------------
# config plumbing


def _coerce(current, raw: str):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_yaml(args.config) if args.config else RunConfig()
    data = cfg.to_dict()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        target = data
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in target or not isinstance(target[p], dict):
                raise SystemExit(f"unknown config key: {key}")
            target = target[p]
        leaf = parts[-1]
        if leaf not in target:
            raise SystemExit(f"unknown config key: {key}")
        try:
            target[leaf] = _coerce(target[leaf], raw)
        except ValueError as e:
            raise SystemExit(f"bad value for {key}: {e}")
    cfg = RunConfig.from_dict(data)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "checkpoint_dir", None) is not None:
        overrides["checkpoint_dir"] = args.checkpoint_dir
    return cfg.with_overrides(**overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# rendering


def draw_obb(rgb: np.ndarray, box: np.ndarray, color: tuple[int, int, int]) -> None:
    """Rasterize the four edges of an oriented box into an (H, W, 3) image."""
    h, w = rgb.shape[:2]
    corners = obb_corners(np.asarray(box, dtype=np.float64)[None])[0]
    for i in range(4):
        p0, p1 = corners[i], corners[(i + 1) % 4]
        n = max(int(np.ceil(np.hypot(*(p1 - p0)))) * 2, 2)
        ts = np.linspace(0.0, 1.0, n)
        xs = np.clip(np.round(p0[0] + ts * (p1[0] - p0[0])).astype(int), 0, w - 1)
        ys = np.clip(np.round(p0[1] + ts * (p1[1] - p0[1])).astype(int), 0, h - 1)
        rgb[ys, xs] = color


def write_ppm(path: str, rgb: np.ndarray) -> None:
    """Binary P6 portable pixmap."""
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


CLASS_COLORS = ((255, 80, 80), (80, 255, 120), (90, 140, 255), (250, 220, 80), (230, 110, 250))


# ---------------------------------------------------------------------------
# selfcheck suites


def _suite_geometry(rng) -> str | None:
    from .geometry import OrientedBox, rotated_iou, rotated_nms
    from .oracles import iou_rasterized, nms_quadratic

    for _ in range(60):
        a = OrientedBox(rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(4, 25), rng.uniform(4, 25), rng.uniform(-np.pi / 2, np.pi / 2))
        b = OrientedBox(a.cx + rng.uniform(-12, 12), a.cy + rng.uniform(-12, 12), rng.uniform(4, 25), rng.uniform(4, 25), rng.uniform(-np.pi / 2, np.pi / 2))
        got = rotated_iou(a, b)
        ref = iou_rasterized(a, b, grid=256)
        if abs(got - ref) > 5e-3:
            return f"IoU {got:.5f} vs rasterized {ref:.5f}"
    for _ in range(10):
        n = int(rng.integers(4, 16))
        boxes = [
            OrientedBox(rng.uniform(0, 60), rng.uniform(0, 60), rng.uniform(4, 20), rng.uniform(4, 20), rng.uniform(-np.pi / 2, np.pi / 2))
            for _ in range(n)
        ]
        scores = rng.uniform(0, 1, n)
        if list(rotated_nms(boxes, scores, 0.5)) != list(nms_quadratic(boxes, scores, 0.5)):
            return "NMS disagrees with quadratic oracle"
    return None


def _suite_coders(rng) -> str | None:
    from .coders import decode_o_array, encode_o_array

    refs = np.column_stack([rng.uniform(-20, 20, 2000), rng.uniform(-20, 20, 2000), rng.uniform(4, 50, 2000), rng.uniform(4, 50, 2000)])
    tgts = np.column_stack(
        [rng.uniform(-20, 20, 2000), rng.uniform(-20, 20, 2000), rng.uniform(4, 50, 2000), rng.uniform(4, 50, 2000), rng.uniform(-np.pi / 2, np.pi / 2, 2000)]
    )
    tgts = np.where(tgts[:, 2:3] >= tgts[:, 3:4], tgts, tgts[:, [0, 1, 3, 2, 4]])
    back = decode_o_array(refs, encode_o_array(refs, tgts))
    err = np.abs(back - tgts).max()
    return None if err < 1e-9 else f"round-trip error {err:.2e}"


def _suite_oaconv(rng) -> str | None:
    from .netcore import conv2d_forward
    from .oaware import oaconv_forward, zero_offset_field
    from .oracles import oaconv_naive

    x = rng.standard_normal((1, 3, 6, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    off = zero_offset_field((6, 7))[None]
    y, _ = oaconv_forward(x, w, b, off)
    ref, _ = conv2d_forward(x, w, b, stride=1, pad=1)
    if np.abs(y - ref).max() > 1e-6:
        return f"zero-offset reduction error {np.abs(y - ref).max():.2e}"

    off = rng.uniform(-0.6, 0.6, off.shape)
    y, _ = oaconv_forward(x, w, b, off)
    slow = oaconv_naive(x, w, b, off)
    err = np.abs(y - slow).max()
    if err > 1e-9:
        return f"offset sampling disagrees with naive loop: {err:.2e}"
    return None


def _suite_oaconv_grad(rng) -> str | None:
    from .oaware import oaconv_backward, oaconv_forward
    from .oracles import finite_difference, relative_error

    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    off = rng.uniform(-0.5, 0.5, (1, 18, 5, 5))
    y, cache = oaconv_forward(x, w, b, off)
    dy = rng.standard_normal(y.shape)
    dx, dw, db = oaconv_backward(dy, cache)

    def loss_x(v):
        return float((oaconv_forward(v.reshape(x.shape), w, b, off)[0] * dy).sum())

    def loss_w(v):
        return float((oaconv_forward(x, v.reshape(w.shape), b, off)[0] * dy).sum())

    ex = relative_error(dx.reshape(-1), finite_difference(loss_x, x.reshape(-1), eps=1e-6))
    ew = relative_error(dw.reshape(-1), finite_difference(loss_w, w.reshape(-1), eps=1e-6))
    if max(ex, ew) > 1e-5:
        return f"gradient error dx {ex:.2e} dw {ew:.2e}"
    return None


def _suite_loss(rng) -> str | None:
    from .rpn import IOU_EPS, iou_loss

    box = np.array([0.0, 0.0, 8.0, 8.0])
    if iou_loss(box, box, 7.0) != 0.0:
        return "loss at identity not zero"
    d = (np.e - 1) / (np.e + 1)
    got = iou_loss(np.array([d, 0.0, 1.0, 1.0]), np.array([0.0, 0.0, 1.0, 1.0]), 7.0)
    if abs(got - 7.0) > 1e-9:
        return f"loss at IoU 1/e: {got}"
    far = iou_loss(np.array([1e3, 0.0, 1.0, 1.0]), np.array([0.0, 0.0, 1.0, 1.0]), 7.0)
    if abs(far - 7.0 * -np.log(IOU_EPS)) > 1e-9:
        return "clamped loss off"
    return None


def _suite_roialign(rng) -> str | None:
    from .heads import roi_align

    # A linear ramp is reproduced exactly by bilinear pooling.
    h = w = 8
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    feat = (2.0 * xs + 3.0 * ys)[None]
    box = np.array([32.0, 32.0, 32.0, 32.0])
    pooled, _ = roi_align(feat, box, out=4, stride=8.0)
    ctrs_x = (np.arange(4) + 0.5) * 8.0 / 8 + 16.0 / 8 - 0.5
    ctrs_y = ctrs_x
    want = 2.0 * ctrs_x[None, :] + 3.0 * ctrs_y[:, None]
    err = np.abs(pooled[0] - want).max()
    return None if err < 1e-9 else f"ramp error {err:.2e}"


def _suite_checkpoint(rng) -> str | None:
    import tempfile

    from . import checkpoint as ckpt

    arrays = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": np.arange(7, dtype=np.int64)}
    with tempfile.TemporaryDirectory() as td:
        path = os.path.join(td, "x.ckpt")
        ckpt.save_checkpoint(path, arrays, {"k": 1})
        back, meta = ckpt.load_checkpoint(path)
    if meta != {"k": 1}:
        return "meta mismatch"
    for k, v in arrays.items():
        if not np.array_equal(back[k], v):
            return f"tensor {k} mismatch"
    return None


SUITES = (
    ("geometry-vs-oracles", _suite_geometry),
    ("coder-round-trip", _suite_coders),
    ("conv-reduction", _suite_oaconv),
    ("conv-gradients", _suite_oaconv_grad),
    ("iou-loss-closed-form", _suite_loss),
    ("roi-align-ramp", _suite_roialign),
    ("checkpoint-round-trip", _suite_checkpoint),
)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _load_config(args)
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    echo_path = os.path.join(cfg.checkpoint_dir, "config.yaml")
    with open(echo_path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
    if not args.quiet:
        print(f"effective config written to {echo_path}")

    t0 = time.time()
    last = {"epoch": -1}

    def progress(epoch, iteration, losses):
        if args.quiet:
            return
        if epoch != last["epoch"]:
            last["epoch"] = epoch
            print(f"epoch {epoch}: start (iteration {iteration}, {time.time() - t0:.0f}s elapsed)")

    result = train(cfg, resume=args.resume, progress=progress)
    if not args.quiet:
        print(
            f"trained {result.epochs_run} epoch(s) in {time.time() - t0:.0f}s; "
            f"final epoch mean loss {result.final_epoch_mean_loss:.4f}"
        )
        print(f"checkpoint: {result.checkpoint_path}")
        print(f"loss log:   {result.log_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    ckpt_path = args.checkpoint or os.path.join(cfg.checkpoint_dir, "latest.ckpt")
    if not os.path.exists(ckpt_path):
        print(f"error: checkpoint not found: {ckpt_path}", file=sys.stderr)
        return 1
    model, _ = Detector.load(ckpt_path)
    records = build_records(cfg, args.split)
    voc07, voc12, detections = run_eval(
        model, records, score_thr=cfg.score_thr, iou_thr=cfg.eval_iou_thr
    )
    names = list(CLASS_NAMES[: cfg.num_classes])
    print(f"split: {args.split} ({len(records)} images), IoU {cfg.eval_iou_thr}")
    print("\nVOC07 (11-point):")
    print(format_ap_table(voc07, names))
    print("\nVOC12 (area under PR):")
    print(format_ap_table(voc12, names))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump({"voc07": voc07, "voc12": voc12}, f, indent=1)
        print(f"\nreport written to {args.out}")
    if args.dump_detections:
        dump_detections(args.dump_detections, detections)
        print(f"detections written to {args.dump_detections}")
    return 0


def cmd_bench_iou(args) -> int:
    rng = np.random.default_rng(args.seed)
    n = args.n

    def boxes(count):
        return np.column_stack(
            [
                rng.uniform(0, 100, count),
                rng.uniform(0, 100, count),
                rng.uniform(5, 40, count),
                rng.uniform(5, 40, count),
                rng.uniform(-np.pi / 2, np.pi / 2, count),
            ]
        )

    a, b = boxes(n), boxes(n)
    rotated_iou_pairs(a[:1000], b[:1000])  # warm
    t0 = time.time()
    rotated_iou_pairs(a, b)
    dt = time.time() - t0
    rate = n / dt
    ok = rate >= BENCH_MIN_PAIRS_PER_SEC
    print(f"rotated IoU: {n} pairs in {dt:.3f}s = {rate:,.0f} pairs/sec")
    print(f"floor {BENCH_MIN_PAIRS_PER_SEC:,.0f} pairs/sec: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_selfcheck(args) -> int:
    failures = 0
    for name, fn in SUITES:
        rng = np.random.default_rng(2024)
        t0 = time.time()
        try:
            detail = fn(rng)
        except Exception as e:  # a crashed suite is a failed suite
            detail = f"exception: {e!r}"
        dt = time.time() - t0
        status = "ok" if detail is None else "FAIL"
        line = f"{name:<24} {status:>4}  ({dt:.2f}s)"
        if detail is not None:
            failures += 1
            line += f"  {detail}"
        print(line)
    print(f"\n{len(SUITES) - failures}/{len(SUITES)} suites passed")
    return 1 if failures else 0


def _load_render_scene(args):
    if args.manifest:
        records = load_dataset(args.manifest)
        by_id = {r.image_id: r for r in records}
        if args.image_id is None:
            raise SystemExit("--image-id is required with --manifest")
        if args.image_id not in by_id:
            raise SystemExit(f"image id {args.image_id!r} not in manifest ({len(by_id)} images)")
        return by_id[args.image_id]
    image, gts, labels = generate_scene(SceneSpec(seed=args.synthetic_seed, image_size=args.image_size))
    return DatasetRecord(f"synthetic_{args.synthetic_seed}", image, gts, labels)


def cmd_render(args) -> int:
    rec = _load_render_scene(args)
    rgb = np.repeat((rec.image[0] * 255.0).round().astype(np.uint8)[:, :, None], 3, axis=2)
    if args.draw_gt:
        for box in rec.gts:
            draw_obb(rgb, box, (255, 255, 255))
    if args.checkpoint:
        if not os.path.exists(args.checkpoint):
            print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
            return 1
        model, _ = Detector.load(args.checkpoint)
        dets = model.infer(rec.image, score_thr=args.score_thr)
        for d in dets:
            draw_obb(rgb, d.box.as_array(), CLASS_COLORS[d.class_id % len(CLASS_COLORS)])
        print(f"{len(dets)} detections on {rec.image_id}")
    write_ppm(args.out, rgb)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rotdet", description="Oriented-object detection toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config")
    t.add_argument("--config", help="YAML config path (defaults used when omitted)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (dotted for nested)")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.add_argument("--epochs", type=int)
    e.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--checkpoint", help="path to a .ckpt (default: <checkpoint_dir>/latest.ckpt)")
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.add_argument("--out", help="write the mAP report as JSON")
    e.add_argument("--dump-detections", help="write detections as JSON lines")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench-iou", help="rotated-IoU throughput")
    b.add_argument("--n", type=int, default=200_000)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=cmd_bench_iou)

    s = sub.add_parser("selfcheck", help="run oracle suites")
    s.set_defaults(fn=cmd_selfcheck)

    r = sub.add_parser("render", help="draw detections into a PPM image")
    r.add_argument("--checkpoint", help="detector checkpoint; omit to draw ground truth only")
    r.add_argument("--manifest", help="dataset directory with manifest.json")
    r.add_argument("--image-id", help="image id within the manifest")
    r.add_argument("--synthetic-seed", type=int, default=0, help="render a generated scene instead")
    r.add_argument("--image-size", type=int, default=128)
    r.add_argument("--score-thr", type=float, default=0.3)
    r.add_argument("--draw-gt", action="store_true")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
