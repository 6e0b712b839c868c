"""Command-line pipeline: model and corpus generation, training, captioning,
sink analysis, attack, noise baseline, evaluation and replay.

Every run writes ``manifest.json`` (plus ``<subcommand>.manifest.json``)
into its output directory with the argv, the fully resolved options and the
sha256 of each artifact; ``attnsink replay <manifest>`` re-runs it and
checks the hashes.

Exit status: 0 success, 1 replay mismatch, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .analysis import (analysis_report, default_layer, detect_sinks, relevance_csv,
                       relevance_profile, report_json)
from .attack import AttackConfig, gaussian_baseline, run_attack
from .corpus import (Scene, corpus_from_json, corpus_to_json, decode as decode_words, encode,
                     generate_corpus, oracle_annotate, render_scene)
from .decoding import DecodeConfig, decode
from .judge import ENV_ENDPOINT, JudgeClient
from .metrics import hallucination_metrics, offline_quality_judge, perplexity
from .model import ModelConfig, NumericalError, assemble, init_params, train_toy_model
from .serialization import export_ppm, load_image, load_params, save_image, save_params

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    subcommand: str
    argv: list[str]
    options: dict
    seed: int | None = None
    outputs: dict = field(default_factory=dict)
    version: str = __version__

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ parsing


def parse_budget(text: str) -> float:
    """``"8/255"`` or a plain fraction of the pixel range such as ``0.0314``."""
    text = str(text).strip()
    try:
        val = float(Fraction(text)) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"cannot parse budget {text!r}") from None
    if not 0 < val <= 1:
        raise argparse.ArgumentTypeError(
            f"budget {text!r} must lie in (0, 1]; write pixel-level budgets as n/255")
    return val


def parse_step(text: str) -> str:
    # resolved against --gamma-units after parsing
    text = str(text).strip()
    try:
        float(Fraction(text)) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"cannot parse step size {text!r}") from None
    return text


def resolve_gamma(text: str, units: str) -> float:
    """``"5/255"`` is taken literally; a bare number is in 1/255 units unless units == "raw"."""
    if "/" in text:
        return float(Fraction(text))
    val = float(text)
    return val if units == "raw" else val / 255.0


def prompt_tokens(text: str) -> list[int]:
    words = text.split()
    if not words or words[0] != "<bos>":
        words = ["<bos>"] + words
    try:
        return encode(words)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--decode", choices=["greedy", "beam", "nucleus"], default="greedy")
    p.add_argument("--beam-width", type=int, default=3)
    p.add_argument("--top-p", type=float, default=0.9)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-new-tokens", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)


def _prompt_flag(p):
    p.add_argument("--prompt", default="describe the image",
                   help="prompt words; <bos> is prepended when missing")


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="attnsink", description=__doc__.split("\n\n")[0])
    root.add_argument("--version", action="version", version=__version__)
    sub = root.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--run-config", type=Path, default=None,
                       help="JSON file of option defaults; explicit flags win")
        return p

    p = add("gen-model", "initialize model weights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, default=None, help="ModelConfig JSON")
    p.add_argument("--out", type=Path, required=True)

    p = add("gen-corpus", "generate scenes, captions and rendered images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--max-objects", type=int, default=4)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = add("train", "teacher-forced training on a corpus")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-grad-norm", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    _prompt_flag(p)
    p.add_argument("--out", type=Path, required=True)

    p = add("caption", "decode a caption for one image")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    _prompt_flag(p)
    _decode_flags(p)
    p.add_argument("--out", type=Path, default=None, help="optional output directory")

    p = add("analyze", "sink report and per-sentence relevance for one image")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    _prompt_flag(p)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--tau", type=float, default=0.2)
    p.add_argument("--w-min", type=int, default=4)
    _decode_flags(p)
    p.add_argument("--out", type=Path, required=True)

    p = add("attack", "attention-sink attack on one image or a corpus")
    p.add_argument("--weights", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", type=Path)
    src.add_argument("--corpus", type=Path)
    p.add_argument("--images-dir", type=Path, default=None)
    p.add_argument("--limit", type=int, default=None, help="attack only the first N scenes")
    _prompt_flag(p)
    p.add_argument("--eps", type=parse_budget, default=8 / 255)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--gamma", type=parse_step, default="5")
    p.add_argument("--gamma-units", choices=["255", "raw"], default="255")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.6)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--tau", type=float, default=0.2)
    p.add_argument("--w-min", type=int, default=4)
    _decode_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--svg", action="store_true", help="also write loss charts as SVG")
    p.add_argument("--ppm", action="store_true", help="also export adversarial images as PPM")
    p.add_argument("--out", type=Path, required=True)

    p = add("baseline", "Gaussian-noise images at a matched l-inf budget")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", type=Path)
    src.add_argument("--corpus", type=Path)
    p.add_argument("--images-dir", type=Path, default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--noise-scale", type=parse_budget, default=8 / 255)
    p.add_argument("--std", type=parse_budget, default=None, help="noise std (default: noise scale)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = add("eval", "caption every scene image and report hallucination metrics")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--images-dir", type=Path, default=None)
    _prompt_flag(p)
    _decode_flags(p)
    p.add_argument("--judge-endpoint", nargs="?", const=os.environ.get(ENV_ENDPOINT, ""),
                   default=None, help=f"external judge URL (bare flag reads ${ENV_ENDPOINT})")
    p.add_argument("--judge-timeout", type=float, default=10.0)
    p.add_argument("--out", type=Path, required=True, help="metrics CSV path")

    p = sub.add_parser("replay", help="re-run a manifest and verify its artifact hashes")
    p.add_argument("manifest", type=Path)
    return root


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    rc = getattr(args, "run_config", None)
    if rc is not None:
        try:
            defaults = json.loads(Path(rc).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read run config {rc}: {exc}") from None
        sub = parser._subparsers._group_actions[0].choices[args.subcommand]
        known = {a.dest for a in sub._actions}
        unknown = set(defaults) - known
        if unknown:
            raise ConfigError(f"unknown keys in run config: {sorted(unknown)}")
        for action in sub._actions:
            if action.dest in defaults and action.type is not None and isinstance(defaults[action.dest], str):
                defaults[action.dest] = action.type(defaults[action.dest])
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# ------------------------------------------------------------------ helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_manifest(out_dir: Path, run: RunConfig, outputs: Sequence[Path]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    run.outputs = {str(Path(p)): _sha256(p) for p in sorted(set(map(Path, outputs)))}
    text = json.dumps(_jsonable(run.to_dict()), indent=2, sort_keys=True)
    (out_dir / f"{run.subcommand}.manifest.json").write_text(text)
    path = out_dir / "manifest.json"
    path.write_text(text)
    return path


def _decode_config(args) -> DecodeConfig:
    return DecodeConfig(strategy=args.decode, beam_width=args.beam_width, top_p=args.top_p,
                        temperature=args.temperature, max_new_tokens=args.max_new_tokens,
                        seed=args.seed)


def _corpus_path(path: Path) -> Path:
    return path / "corpus.json" if path.is_dir() else path


def load_corpus(path: Path) -> list[Scene]:
    return corpus_from_json(_corpus_path(path).read_text())


def _images_dir(args) -> Path:
    return args.images_dir if args.images_dir is not None else _corpus_path(args.corpus).parent / "images"


def svg_line_chart(xs: Sequence[float], series: dict[str, Sequence[float]], title: str,
                   width: int = 480, height: int = 300) -> str:
    """Single-file SVG polyline chart; one line per series."""
    pad = 40
    ys_all = [y for ys in series.values() for y in ys]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys_all), max(ys_all)
    sx = (width - 2 * pad) / ((x1 - x0) or 1)
    sy = (height - 2 * pad) / ((y1 - y0) or 1)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<text x="{pad}" y="20" font-size="13">{title}</text>',
           f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
           'fill="none" stroke="#999"/>',
           f'<text x="4" y="{pad + 4}" font-size="10">{y1:.3g}</text>',
           f'<text x="4" y="{height - pad}" font-size="10">{y0:.3g}</text>']
    for k, (name, ys) in enumerate(series.items()):
        pts = " ".join(f"{pad + (x - x0) * sx:.1f},{height - pad - (y - y0) * sy:.1f}"
                       for x, y in zip(xs, ys))
        c = colors[k % len(colors)]
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{width - pad - 90}" y="{pad + 14 * (k + 1)}" font-size="11" '
                   f'fill="{c}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ------------------------------------------------------------------ commands


def cmd_gen_model(args, run):
    cfg = ModelConfig()
    if args.config is not None:
        cfg = ModelConfig.from_dict(json.loads(args.config.read_text()))
    run.options["model_config"] = cfg.to_dict()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_params(init_params(cfg, args.seed), args.out)
    return args.out.parent, [args.out]


def cmd_gen_corpus(args, run):
    scenes = generate_corpus(args.seed, args.n, max_objects=args.max_objects)
    img_dir = args.out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    corpus = args.out / "corpus.json"
    corpus.write_text(corpus_to_json(scenes))
    outs = [corpus]
    for s in scenes:
        raw = save_image(render_scene(s), img_dir / f"{s.id}.f32")
        outs += [raw, raw.with_suffix(".json")]
    return args.out, outs


def cmd_train(args, run):
    params = load_params(args.weights)
    scenes = load_corpus(args.corpus)
    data = [(render_scene(s), s.caption) for s in scenes]
    trained = train_toy_model(params, data, args.epochs, args.lr, prompt_tokens(args.prompt),
                              batch_size=args.batch_size, seed=args.seed,
                              max_grad_norm=args.max_grad_norm)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_params(trained, args.out)
    hist = args.out.with_suffix(".loss.csv")
    hist.write_text(_csv_text(["epoch", "loss"], [[i, repr(v)] for i, v in enumerate(trained.loss_history)]))
    run.options["loss_first"] = trained.loss_history[0]
    run.options["loss_last"] = trained.loss_history[-1]
    print(f"loss {trained.loss_history[0]:.4f} -> {trained.loss_history[-1]:.4f}")
    return args.out.parent, [args.out, hist]


def cmd_caption(args, run):
    params = load_params(args.weights)
    resp = decode(assemble(load_image(args.image), prompt_tokens(args.prompt), params),
                  params, _decode_config(args))
    print(decode_words(resp.tokens))
    if args.out is None:
        return None, []
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "caption.json"
    doc = resp.to_json_dict() | {"text": decode_words(resp.tokens)}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return args.out, [path]


def cmd_analyze(args, run):
    params = load_params(args.weights)
    image = load_image(args.image)
    layer = args.layer if args.layer is not None else default_layer(params.config.n_layers)
    run.options["layer"] = layer
    resp = decode(assemble(image, prompt_tokens(args.prompt), params), params, _decode_config(args))
    sinks = detect_sinks(resp.trace, layer, args.tau, args.w_min)
    rel = relevance_profile(resp, image, params, layer, args.tau, args.w_min)
    report = analysis_report(resp.trace, layer, rel, sinks)
    report["response"] = decode_words(resp.tokens)
    args.out.mkdir(parents=True, exist_ok=True)
    rp, cp = args.out / "sink_report.json", args.out / "relevance.csv"
    rp.write_text(report_json(report))
    cp.write_text(relevance_csv(rel))
    print(f"sinks at {sinks.positions}; turning point {rel.turning_point}")
    return args.out, [rp, cp]


def _attack_config(args, params) -> AttackConfig:
    cfg = AttackConfig(epsilon=args.eps, gamma=resolve_gamma(args.gamma, args.gamma_units),
                       steps=args.steps, alpha=args.alpha, sigma=args.sigma, layer=args.layer,
                       decode=_decode_config(args), seed=args.seed)
    layer = cfg.resolved_layer(params)
    if not 1 <= layer < params.config.n_layers:
        raise ConfigError(f"--layer must lie in 1..{params.config.n_layers - 1}")
    return cfg


def _attack_one(job):
    name, pixels, prompt, params, cfg, tau, w_min = job
    return name, run_attack(pixels, prompt, params, cfg, tau, w_min)


def _write_attack(out: Path, name: str, tr, svg: bool, ppm: bool) -> list[Path]:
    raw = save_image(tr.adversarial, out / f"{name}.f32")
    tp = out / f"{name}.trace.json"
    tp.write_text(tr.to_json())
    recs = tr.records + [tr.final]
    lp = out / f"{name}.losses.csv"
    lp.write_text(_csv_text(
        ["step", "idx", "attn_loss", "emb_loss", "total_loss", "window_mass", "delta_linf"],
        [[r.step, r.idx, repr(r.attn_loss), repr(r.emb_loss), repr(r.total_loss),
          repr(r.window_mass), repr(r.delta_linf)] for r in recs]))
    outs = [raw, raw.with_suffix(".json"), tp, lp]
    if svg:
        sp = out / f"{name}.losses.svg"
        sp.write_text(svg_line_chart([r.step for r in recs],
                                     {"total": [r.total_loss for r in recs],
                                      "attn": [r.attn_loss for r in recs]},
                                     f"attack loss ({name})"))
        outs.append(sp)
    if ppm:
        pp = out / f"{name}.ppm"
        export_ppm(tr.adversarial, pp)
        outs.append(pp)
    return outs


def cmd_attack(args, run):
    params = load_params(args.weights)
    cfg = _attack_config(args, params)
    run.options["attack_config"] = cfg.to_dict()
    prompt = prompt_tokens(args.prompt)
    if args.image is not None:
        jobs = [("adv", load_image(args.image).pixels, prompt, params, cfg, args.tau, args.w_min)]
    else:
        scenes = load_corpus(args.corpus)[: args.limit]
        img_dir = _images_dir(args)
        jobs = [(str(s.id), load_image(img_dir / f"{s.id}.f32").pixels, prompt, params, cfg,
                 args.tau, args.w_min) for s in scenes]
    args.out.mkdir(parents=True, exist_ok=True)
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_attack_one, jobs))
    else:
        results = [_attack_one(j) for j in jobs]
    outs = []
    for name, tr in results:
        outs += _write_attack(args.out, name, tr, args.svg, args.ppm)
        print(f"{name}: loss {tr.initial.total_loss:.4f} -> {tr.final.total_loss:.4f}, "
              f"idx {tr.initial.idx} -> {tr.final.idx}")
    return args.out, outs


def cmd_baseline(args, run):
    args.out.mkdir(parents=True, exist_ok=True)
    if args.image is not None:
        items = [("noisy", load_image(args.image))]
    else:
        scenes = load_corpus(args.corpus)[: args.limit]
        img_dir = _images_dir(args)
        items = [(str(s.id), load_image(img_dir / f"{s.id}.f32")) for s in scenes]
    outs = []
    for k, (name, img) in enumerate(items):
        noisy = gaussian_baseline(img, args.noise_scale, args.seed + k, args.std)
        raw = save_image(noisy, args.out / f"{name}.f32")
        outs += [raw, raw.with_suffix(".json")]
    return args.out, outs


EVAL_HEADER = ["scene_id", "n_sentences", "n_hallucinated_sentences", "n_words",
               "n_hallucinated_words", "hsr", "hwr", "quality", "perplexity",
               "perplexity_clamped", "response"]


def cmd_eval(args, run):
    params = load_params(args.weights)
    scenes = load_corpus(args.corpus)
    img_dir = _images_dir(args)
    present = [s for s in scenes if (img_dir / f"{s.id}.f32").exists()]
    if not present:
        raise ConfigError(f"no scene images found in {img_dir}")
    run.options["n_scenes"] = len(present)
    prompt = prompt_tokens(args.prompt)
    dcfg = _decode_config(args)
    judge = None
    if args.judge_endpoint is not None:
        if not args.judge_endpoint:
            raise ConfigError(f"--judge-endpoint given without a URL and ${ENV_ENDPOINT} is unset")
        args.out.parent.mkdir(parents=True, exist_ok=True)
        judge = JudgeClient(args.judge_endpoint, args.out.with_suffix(".judge.jsonl"),
                            timeout=args.judge_timeout)
    annotated, rows = [], []
    try:
        for s in present:
            asm = assemble(load_image(img_dir / f"{s.id}.f32"), prompt, params)
            resp = decode(asm, params, dcfg)
            ann = judge.judge(s, resp.tokens) if judge else oracle_annotate(resp.tokens, s)
            annotated.append(ann)
            q = judge.quality(s, resp.tokens) if judge else offline_quality_judge(resp.tokens)
            ppl = perplexity(resp.tokens, asm, params)
            ns, nw = ann.n_sentences, sum(ann.word_counts)
            hs, hw = sum(ann.hallucinated), sum(ann.hallucinated_words)
            rows.append([s.id, ns, hs, nw, hw, repr(hs / ns if ns else 0.0),
                         repr(hw / nw if nw else 0.0), q.score, repr(ppl.value),
                         int(ppl.clamped), decode_words(resp.tokens)])
    finally:
        if judge:
            judge.close()
    rep = hallucination_metrics(annotated)
    rows.append(["mean", repr(rep.spi), repr(rep.hspi), repr(rep.wpi), repr(rep.hwpi),
                 repr(rep.hsr), repr(rep.hwr),
                 repr(float(np.mean([r[7] for r in rows]))),
                 repr(float(np.mean([float(r[8]) for r in rows]))), "", ""])
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(_csv_text(EVAL_HEADER, rows))
    mj = args.out.with_suffix(".json")
    mj.write_text(json.dumps({"report": rep.to_dict(), "judge": "external" if judge else "oracle",
                              "decode": dcfg.to_dict()}, indent=2, sort_keys=True))
    print(f"HSR {rep.hsr:.4f}  HWR {rep.hwr:.4f}  over {rep.n_items} scenes")
    outs = [args.out, mj]
    if judge:
        outs.append(args.out.with_suffix(".judge.jsonl"))
    return args.out.parent, outs


def cmd_replay(args) -> int:
    man = json.loads(args.manifest.read_text())
    code = main(man["argv"])
    if code != EXIT_OK:
        return code
    bad = [p for p, h in man["outputs"].items() if not Path(p).exists() or _sha256(Path(p)) != h]
    for p in bad:
        print(f"mismatch: {p}", file=sys.stderr)
    return EXIT_MISMATCH if bad else EXIT_OK


COMMANDS = {
    "gen-model": cmd_gen_model, "gen-corpus": cmd_gen_corpus, "train": cmd_train,
    "caption": cmd_caption, "analyze": cmd_analyze, "attack": cmd_attack,
    "baseline": cmd_baseline, "eval": cmd_eval,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        if args.subcommand == "replay":
            return cmd_replay(args)
        options = {k: v for k, v in vars(args).items() if k != "subcommand"}
        run = RunConfig(args.subcommand, argv, options, getattr(args, "seed", None))
        out_dir, outputs = COMMANDS[args.subcommand](args, run)
        if out_dir is not None:
            write_manifest(out_dir, run, outputs)
        return EXIT_OK
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, FileNotFoundError, argparse.ArgumentTypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
