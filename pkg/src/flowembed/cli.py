"""``flowembed`` command line: synth, pretrain, finetune, eval, viz.

stdout carries machine-readable results (dice values, artifact paths);
diagnostics go to stderr.  Any failure exits nonzero with one stderr line.
"""

import argparse
import csv
import dataclasses
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import evalviz, fileio, plotting, synthgen, trainer
from .embednet import AugmentationConfig, NetworkConfig, build_network
from .flowloss import KernelConfig

log = logging.getLogger("flowembed")


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 64
    max_shift: float = 8.0
    max_rotation_deg: float = 10.0

    def ranges(self):
        s, r = self.max_shift, self.max_rotation_deg
        return synthgen.TransformRanges((-s, s), (-s, s), (-r, r))


SECTIONS = {
    "kernel": KernelConfig(),
    "net": NetworkConfig(),
    "train": trainer.TrainConfig(),
    "aug": AugmentationConfig(),
    "synth": SynthConfig(),
}


def load_config(path):
    """Resolve every section from ``path`` (or pure defaults when None)."""
    text = "" if path is None else Path(path).read_text(encoding="utf-8")
    cfg = fileio.parse_config(text, SECTIONS)
    cfg["explicit"] = set(re.findall(r"^\s*(\w+)\.\w+\s*=", text, flags=re.M))
    return cfg


# padding -------------------------------------------------------------------------

def pad_to_multiple(arr, divisor):
    """Edge-replicate the two spatial axes (first two for H x W[ x C]) up to ``divisor``."""
    arr = np.asarray(arr)
    h, w = arr.shape[:2]
    pad = [(0, (-h) % divisor), (0, (-w) % divisor)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pad, mode="edge") if any(p[1] for p in pad) else arr


def _padded_pair(p, divisor):
    return fileio.FramePair(
        frame1=pad_to_multiple(p.frame1, divisor),
        forward_flow=None if p.forward_flow is None else pad_to_multiple(p.forward_flow, divisor),
        mask=None if p.mask is None else pad_to_multiple(p.mask, divisor),
        pair_id=p.pair_id)


class _Cropped:
    """Network wrapper that pads inputs and crops outputs back to the input extents."""

    def __init__(self, net):
        self.net, self.cfg = net, net.cfg

    def forward(self, image):
        image = np.asarray(image, dtype=np.float64)
        h, w = image.shape
        full = self.net.forward(pad_to_multiple(image, self.cfg.divisor))
        return full[:, :h, :w] if full.shape[1:] != (h, w) else full

    def embed(self, image):
        return self.forward(image).data


# subcommands ------------------------------------------------------------------------

def cmd_synth(args):
    cfg = load_config(args.config)["synth"]
    specs = synthgen.shapes_corpus(args.count, (cfg.height, cfg.width), args.seed, cfg.ranges())
    synthgen.generate_dataset(specs, args.out)
    print(Path(args.out) / "manifest.txt")


def _load_pairs(root, need):
    pairs = fileio.read_dataset(root)
    if not pairs:
        raise ValueError(f"{root}: manifest lists no pairs")
    for p in pairs:
        if getattr(p, need) is None:
            raise ValueError(f"{root}/{p.pair_id}: missing {'flow_fwd.flo' if need == 'forward_flow' else 'mask.pgm'}")
    return pairs


def _write_run_outputs(rec, out, title):
    out = Path(out)
    csv_path, png_path = out.with_suffix(".csv"), out.with_suffix(".png")
    rec.write_csv(csv_path)
    plotting.plot_curves({title: rec}, png_path, title)
    print(out)
    print(csv_path)
    print(png_path)


def cmd_pretrain(args):
    cfg = load_config(args.config)
    net_cfg, tcfg = cfg["net"], dataclasses.replace(cfg["train"], phase="pretrain")
    pairs = [_padded_pair(p, net_cfg.divisor) for p in _load_pairs(args.data, "forward_flow")]
    net = build_network(net_cfg, rng_seed=tcfg.seed)
    rec = trainer.pretrain(net, pairs, tcfg, cfg["kernel"], checkpoint=args.out)
    _write_run_outputs(rec, args.out, "pretrain")


def _load_test_set(root, divisor):
    if root is None:
        return None
    return [(pad_to_multiple(p.frame1, divisor), pad_to_multiple(p.mask, divisor))
            for p in _load_pairs(root, "mask")]


def cmd_finetune(args):
    cfg = load_config(args.config)
    if args.labels < 1:
        raise ValueError("--labels must be >= 1")
    if args.init == "scratch":
        net = build_network(cfg["net"], rng_seed=cfg["train"].seed)
        phase = "scratch"
    else:
        expect = cfg["net"] if "net" in cfg["explicit"] else None
        net, _, _ = trainer.load_checkpoint(args.init, expect=expect)
        phase = "finetune"
    tcfg = dataclasses.replace(cfg["train"], phase=phase, labeled_count=args.labels)
    d = net.cfg.divisor
    pairs = _load_pairs(args.data, "mask")
    if len(pairs) < args.labels:
        raise ValueError(f"{args.data}: only {len(pairs)} labeled pairs, --labels {args.labels} requested")
    labeled = [(pad_to_multiple(p.frame1, d), pad_to_multiple(p.mask, d)) for p in pairs[:args.labels]]
    test_set = _load_test_set(args.test, d)
    _, rec = trainer.finetune(net, labeled, tcfg, cfg["aug"], test_set, checkpoint=args.out)
    _write_run_outputs(rec, args.out, f"{phase} K={args.labels}")


def cmd_eval(args):
    net, head, _ = trainer.load_checkpoint(args.ckpt)
    if head is None:
        raise ValueError(f"{args.ckpt}: checkpoint has no segmentation head; run finetune first")
    pairs = _load_pairs(args.data, "mask")
    wrapped = _Cropped(net)
    scores = [evalviz.dice_score(head.forward(wrapped.forward(p.frame1)).data, p.mask) for p in pairs]
    mean = float(np.mean(scores))
    out_dir = Path(args.out) if args.out else Path(args.ckpt).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{Path(args.ckpt).stem}_dice.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pair_id", "dice"])
        for p, s in zip(pairs, scores):
            w.writerow([p.pair_id, repr(float(s))])
        w.writerow(["mean", repr(mean)])
    png_path = plotting.plot_dice([p.pair_id for p in pairs], scores, csv_path.with_suffix(".png"))
    print(repr(mean))
    print(csv_path)
    print(png_path)


def _parse_pair(text, name):
    try:
        a, b = (int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"{name} must look like 'a,b'") from None
    return a, b


def cmd_viz(args):
    cfg = load_config(args.config)
    kcfg = cfg["kernel"]
    net, _, _ = trainer.load_checkpoint(args.ckpt)
    image = fileio.pgm_read(args.image)
    h, w = image.shape
    emb = _Cropped(net).embed(image)
    anchor = args.anchor or (h // 2, w // 2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    basis = evalviz.make_basis(net.cfg.embedding_dim, args.seed)
    prov = f"ckpt={args.ckpt} image={args.image} basis_seed={args.seed} sigma={kcfg.sigma} eps_flow={kcfg.eps_flow}"
    manifest, panels = [], {}

    def emit(name, img, desc, extra=""):
        path = out / name
        (fileio.ppm_write if img.ndim == 3 else fileio.pgm_write)(img, path)
        manifest.append(f"{name}\t{desc}\t{prov}{extra}")
        panels[desc] = img

    emit("frame1.pgm", image, "input")
    emit("embedding_rgb.ppm", evalviz.random_projection(emb, basis), "embedding projection")
    a_map = evalviz.anchor_similarity_map(emb, anchor, kcfg, "embedding")
    emit("embedding_anchor.pgm", a_map.to_image(), "embedding anchor sim", f" anchor={anchor}")
    s_map = evalviz.shifted_similarity_map(emb, args.offset, kcfg, "embedding")
    emit("embedding_shifted.pgm", s_map.to_image(), "embedding shifted sim", f" offset={args.offset}")
    if args.flow:
        flow = fileio.flo_read(args.flow).astype(np.float64)
        if flow.shape[:2] != (h, w):
            raise ValueError(f"flow {flow.shape[:2]} and image {(h, w)} extents differ")
        emit("flow_color.ppm", evalviz.flow_color_encode(flow), "flow color")
        emit("flow_anchor.pgm", evalviz.anchor_similarity_map(flow, anchor, kcfg, "flow").to_image(),
             "flow anchor sim", f" anchor={anchor}")
        emit("flow_shifted.pgm", evalviz.shifted_similarity_map(flow, args.offset, kcfg, "flow").to_image(),
             "flow shifted sim", f" offset={args.offset}")
        if args.frame2 and args.backward:
            frame2 = fileio.pgm_read(args.frame2)
            back = fileio.flo_read(args.backward).astype(np.float64)
            warped, occ = evalviz.warp_and_occlude(frame2, flow, back)
            emit("warped.pgm", warped, "warped frame 2")
            emit("occlusion.pgm", occ.astype(np.float64), "occlusion")
    png = plotting.plot_panels(panels, out / "panels.png")
    manifest.append(f"panels.png\tmontage\t{prov}")
    (out / "manifest.txt").write_text("# file\tcontent\tprovenance\n" + "\n".join(manifest) + "\n")
    for line in manifest:
        print(out / line.split("\t", 1)[0])
    return png


def build_parser():
    p = argparse.ArgumentParser(prog="flowembed", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress and resolved config to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic shapes dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="flow-supervised embedding pretraining")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="checkpoint path; .csv/.png written alongside")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="few-shot segmentation finetuning")
    s.add_argument("--data", required=True, help="dataset whose first K pairs are the labeled set")
    s.add_argument("--labels", type=int, required=True)
    s.add_argument("--init", required=True, help="pretrained checkpoint or 'scratch'")
    s.add_argument("--config")
    s.add_argument("--test", help="optional held-out dataset for the dice curve")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="mean dice of a finetuned checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", help="directory for the dice CSV and plot (default: next to the checkpoint)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("viz", help="similarity, projection and flow panels")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--flow")
    s.add_argument("--frame2", help="with --flow and --backward, also render the warp/occlusion panel")
    s.add_argument("--backward")
    s.add_argument("--anchor", type=lambda t: _parse_pair(t, "--anchor"), help="row,col")
    s.add_argument("--offset", type=lambda t: _parse_pair(t, "--offset"), default=(5, 5), help="dx,dy")
    s.add_argument("--seed", type=int, default=0, help="projection basis seed")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_viz)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (ValueError, OSError, ag.CheckpointError, KeyError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"flowembed {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
