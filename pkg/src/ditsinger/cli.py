"""Command-line entry point: ``ditsinger <subcommand> ...``.

Exit codes: 0 ok, 2 bad arguments, 3 I/O failure, 4 non-finite training
loss, 5 checkpoint/score geometry mismatch, 6 unpaired evaluation files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from . import __version__
from .numerics import ContractError, Rng

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NONFINITE, EXIT_GEOMETRY, EXIT_ORPHANS = 0, 2, 3, 4, 5, 6

logger = logging.getLogger("ditsinger")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Everything needed to reproduce a training or sampling run."""

    preset: str = "tiny"
    model: dict = field(default_factory=dict)  # ModelConfig overrides on top of the preset
    train: dict = field(default_factory=dict)  # TrainConfig fields
    guidance: dict = field(default_factory=dict)  # GuidanceConfig fields
    corpus: str | None = None
    sampler: str = "ode"
    sample_steps: int = 50
    out: str | None = None

    def model_config(self):
        from .model import preset

        return preset(self.preset, **self.model)

    def train_config(self):
        from .trainer import TrainConfig

        return TrainConfig.from_dict(self.train)

    def guidance_config(self):
        from .diffusion import GuidanceConfig

        return GuidanceConfig(**self.guidance)

    def resolved(self) -> dict:
        """Fully expanded view, with every model/train/guidance field spelled out."""
        d = asdict(self)
        d["model"] = self.model_config().to_dict()
        d["train"] = self.train_config().to_dict()
        d["guidance"] = asdict(self.guidance_config())
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.resolved(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown run-config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.model.get("name") == cfg.preset:
            cfg.model = {k: v for k, v in cfg.model.items() if k != "name"}
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)


EXAMPLE_CONFIG = """\
# ditsinger run configuration. Command-line flags override these values.
preset: tiny            # tiny | small_toy | small[_2|_4] | base[_2|_4] | large[_2|_4]
model:                  # optional ModelConfig overrides, e.g. depth, width, delta, masked
  masked: true
train:
  iterations: 2000
  batch_size: 8
  grad_accum_steps: 1
  learning_rate: 0.001
  weight_decay: 0.01
  seed: 0
  cond_dropout_p: 0.1
  checkpoint_every: 500
guidance:
  w: 4.0
corpus: data/train      # directory written by `ditsinger gen-data`
sampler: ode            # ode | ancestral
sample_steps: 50
out: runs/tiny
"""


def _config_digest(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()


def _write_sidecar(path: Path, payload: dict) -> None:
    payload = {"code_version": __version__, **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .score_data import build_corpus, save_corpus

    try:
        train_c, test_c = build_corpus(
            Rng(args.seed), args.groups, args.melodies, args.variants, args.holdout,
            unseen_melodies=args.unseen_melodies, max_chars=args.max_chars, vocab=args.vocab,
        )
    except ContractError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    out = Path(args.out)
    try:
        save_corpus(train_c, out / "train")
        save_corpus(test_c, out / "test")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write corpus to {out}: {exc}") from exc
    print(f"train {len(train_c)} test {len(test_c)} total {len(train_c) + len(test_c)}")
    return EXIT_OK


def _load_corpus(path):
    from .score_data import CorpusFormatError, load_corpus

    try:
        return load_corpus(path)
    except (OSError, CorpusFormatError) as exc:
        raise CliError(EXIT_IO, f"cannot load corpus {path}: {exc}") from exc


def cmd_train(args) -> int:
    from .trainer import NonFiniteLossError, load_checkpoint, train

    run = RunConfig.load(args.config) if args.config else RunConfig()
    if args.preset:
        run.preset = args.preset
    overrides = {"iterations": args.iters, "seed": args.seed, "batch_size": args.batch_size,
                 "learning_rate": args.lr, "checkpoint_every": args.checkpoint_every}
    run.train.update({k: v for k, v in overrides.items() if v is not None})
    if args.corpus:
        run.corpus = args.corpus
    if args.out:
        run.out = args.out
    if args.unmasked:
        run.model["masked"] = False
    if run.corpus is None or run.out is None:
        raise CliError(EXIT_USAGE, "both a corpus and an output directory are required")
    try:
        model_cfg, train_cfg = run.model_config(), run.train_config()
    except (ContractError, TypeError) as exc:
        raise CliError(EXIT_USAGE, f"invalid configuration: {exc}") from exc

    corpus = _load_corpus(run.corpus)
    out = Path(run.out)
    state = None
    if args.resume:
        try:
            state = load_checkpoint(args.resume)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot load checkpoint {args.resume}: {exc}") from exc
        model_cfg = state.model_config
        state.train_config = replace(state.train_config, iterations=train_cfg.iterations, checkpoint_every=train_cfg.checkpoint_every)
        train_cfg = state.train_config
    resolved = run.resolved()
    resolved["model"] = model_cfg.to_dict()
    resolved["train"] = train_cfg.to_dict()
    text = yaml.safe_dump(resolved, sort_keys=True)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_config.yaml").write_text(text)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {out}: {exc}") from exc
    print(text, end="")
    try:
        state, report = train(model_cfg, corpus, train_cfg, state=state, out_dir=out)
    except NonFiniteLossError as exc:
        dump = {"step": exc.step, "lr": exc.lr, "grad_norms": exc.grad_norms}
        (out / "nonfinite.json").write_text(json.dumps(dump, indent=2, sort_keys=True, default=str))
        raise CliError(EXIT_NONFINITE, str(exc)) from exc
    except ContractError as exc:
        raise CliError(EXIT_GEOMETRY, str(exc)) from exc
    report["config_sha256"] = _config_digest(resolved)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: report[k] for k in ("steps", "first_window_mean", "last_window_mean")}))
    return EXIT_OK


def _scores_from(path: Path):
    """(name, score, geometry or None) triples from a score JSON file or a corpus directory."""
    from .score_data import ScoreSequence

    if path.is_dir():
        corpus = _load_corpus(path)
        geometry = {k: corpus.manifest.get(k) for k in ("bins", "hop", "sample_rate")}
        return [(f"sample_{k:06d}", s.score, geometry) for k, s in enumerate(corpus.samples)]
    try:
        data = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot read scores from {path}: {exc}") from exc
    items = data if isinstance(data, list) else [data]
    stem = path.stem
    names = [stem] if len(items) == 1 else [f"{stem}_{k:04d}" for k in range(len(items))]
    try:
        return [(n, ScoreSequence.from_dict(d), None) for n, d in zip(names, items)]
    except (KeyError, TypeError, ContractError) as exc:
        raise CliError(EXIT_USAGE, f"malformed score in {path}: {exc}") from exc


def cmd_sample(args) -> int:
    from .diffusion import GuidanceConfig, NoiseSchedule, sample
    from .score_data import write_mel
    from .trainer import CheckpointError, checkpoint_sha256, load_checkpoint

    try:
        state = load_checkpoint(args.ckpt)
    except (OSError, CheckpointError) as exc:
        raise CliError(EXIT_IO, f"cannot load checkpoint {args.ckpt}: {exc}") from exc
    cfg = state.model_config
    items = _scores_from(Path(args.scores))
    if args.limit is not None:
        items = items[: args.limit]
    for name, score, geometry in items:
        if geometry is not None and geometry != {"bins": cfg.mel_bins, "hop": cfg.hop, "sample_rate": cfg.sample_rate}:
            raise CliError(EXIT_GEOMETRY, f"corpus geometry {geometry} does not match checkpoint ({cfg.mel_bins} bins, hop {cfg.hop}, {cfg.sample_rate} Hz)")
        try:
            score.validate(cfg.phoneme_vocab)
        except ContractError as exc:
            raise CliError(EXIT_GEOMETRY, f"score {name} does not fit the checkpoint vocabulary: {exc}") from exc
        if not 0 <= score.speaker_id < cfg.speaker_count:
            raise CliError(EXIT_GEOMETRY, f"score {name} speaker {score.speaker_id} outside the speaker table")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}") from exc
    ckpt_hash = checkpoint_sha256(args.ckpt)
    schedule = NoiseSchedule.from_kind(state.train_config.schedule, state.train_config.diffusion_steps)
    guidance = GuidanceConfig(w=args.w)
    root = Rng(args.seed)
    for k, (name, score, _) in enumerate(items):
        mel = sample(state.model, score, schedule, guidance, root.child("sample", k), args.sampler, args.steps)
        digest = write_mel(out / f"{name}.mel", mel)
        _write_sidecar(out / f"{name}.json", {
            "checkpoint_sha256": ckpt_hash,
            "sampler": args.sampler,
            "steps": args.steps,
            "w": args.w,
            "unconditional": args.w == 0,
            "seed": args.seed,
            "rng_path": ["sample", k],
            "mel_sha256": digest,
            "score": score.to_dict(),
        })
    print(f"wrote {len(items)} samples to {out}")
    return EXIT_OK


def _mel_files(path: Path) -> dict:
    if (path / "manifest.bin").exists():
        corpus = _load_corpus(path)
        return {f"sample_{k:06d}": s.mel for k, s in enumerate(corpus.samples)}
    return {p.stem: p for p in sorted(path.glob("*.mel"))}


METRIC_FIELDS = ["pair", "mcd", "ffe", "f0rmse", "frames_compared"]


def cmd_eval(args) -> int:
    from .metrics import MetricReport, aggregate, evaluate_pair
    from .score_data import CorpusFormatError, MelTensor, read_mel

    ref, hyp = Path(args.ref), Path(args.hyp)
    for p in (ref, hyp):
        if not p.is_dir():
            raise CliError(EXIT_IO, f"{p} is not a directory")
    refs, hyps = _mel_files(ref), _mel_files(hyp)
    orphans = sorted(set(refs) ^ set(hyps))
    if orphans:
        for name in orphans:
            side = "reference" if name in refs else "hypothesis"
            print(f"orphan {side}: {name}", file=sys.stderr)
        raise CliError(EXIT_ORPHANS, f"{len(orphans)} unpaired file(s)")

    def load(x):
        if isinstance(x, MelTensor):
            return x
        try:
            return read_mel(x)
        except (OSError, CorpusFormatError) as exc:
            raise CliError(EXIT_IO, f"cannot read {x}: {exc}") from exc

    reports: list[MetricReport] = []
    rows = []
    for name in sorted(refs):
        r = evaluate_pair(load(refs[name]), load(hyps[name]))
        reports.append(r)
        rows.append({"pair": name, **r.to_dict()})
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k]) for k in METRIC_FIELDS})
    summary = aggregate(reports)
    out = Path(args.out) if args.out else None
    if out is None:
        print(buf.getvalue(), end="")
        print(json.dumps(summary, sort_keys=True))
        return EXIT_OK
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(buf.getvalue())
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {out}: {exc}") from exc
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_dump_mask(args) -> int:
    from .alignment import latent_frame_clock, score_mask
    from .model import latent_length, preset
    from .score_data import frame_count

    items = _scores_from(Path(args.score))
    name, score, _ = items[args.index] if args.index < len(items) else (None, None, None)
    if score is None:
        raise CliError(EXIT_USAGE, f"index {args.index} out of range ({len(items)} scores)")
    cfg = preset(args.preset)
    delta = cfg.delta if args.delta is None else args.delta
    factor = cfg.downsample_factor if args.factor is None else args.factor
    frames = frame_count(score.total_duration, cfg.hop, cfg.sample_rate)
    try:
        mask = score_mask(score, delta, latent_length(frames, factor), latent_frame_clock(cfg.hop, cfg.sample_rate, factor))
    except ContractError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    text = mask.to_csv()
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from exc
    else:
        print(text, end="")
    return EXIT_OK


def _emit_table(rows: list[dict], out: str | None, stem: str, meta: dict) -> None:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(buf.getvalue(), end="")
    if out:
        d = Path(out)
        try:
            d.mkdir(parents=True, exist_ok=True)
            (d / f"{stem}.csv").write_text(buf.getvalue())
            _write_sidecar(d / f"{stem}.json", {**meta, "rows": rows})
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write to {d}: {exc}") from exc


def cmd_scaling(args) -> int:
    from .trainer import scaling_experiment

    try:
        rows = scaling_experiment(args.presets, args.sizes, Rng(args.seed), iterations=args.iters,
                                  batch_size=args.batch_size, eval_samples=args.eval_samples, sample_steps=args.steps)
    except ContractError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    _emit_table(rows, args.out, "scaling", {"presets": args.presets, "sizes": args.sizes, "iters": args.iters, "seed": args.seed})
    return EXIT_OK


def cmd_grouping(args) -> int:
    from .model import preset
    from .trainer import TrainConfig, grouped_pseudosinger_experiment

    try:
        rows = grouped_pseudosinger_experiment(
            args.groups, args.budget, Rng(args.seed), variants_per_melody=args.variants,
            model_config=preset(args.preset), train_config=TrainConfig(iterations=args.iters, batch_size=args.batch_size),
            eval_samples=args.eval_samples, sample_steps=args.steps,
        )
    except ContractError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    _emit_table(rows, args.out, "grouping", {"groups": args.groups, "budget": args.budget, "iters": args.iters, "seed": args.seed})
    return EXIT_OK


def cmd_example_config(args) -> int:
    print(EXAMPLE_CONFIG, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ditsinger", description="Diffusion-transformer singing acoustic model toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="build a synthetic train/test corpus")
    g.add_argument("--groups", type=int, required=True)
    g.add_argument("--melodies", type=int, required=True, help="melodies per group")
    g.add_argument("--variants", type=int, required=True, help="lyric variants per melody")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--holdout", type=float, default=0.25)
    g.add_argument("--unseen-melodies", type=int, default=0)
    g.add_argument("--max-chars", type=int, default=4)
    g.add_argument("--vocab", type=int, default=9)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="run-config YAML (flags override it)")
    t.add_argument("--corpus")
    t.add_argument("--out")
    t.add_argument("--preset")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--unmasked", action="store_true", help="ablation: disable the span mask")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate mel spectrograms from scores")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scores", required=True, help="score JSON file (object or list) or a corpus directory")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sampler", choices=("ode", "ancestral"), default="ode")
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--w", type=float, default=4.0)
    s.add_argument("--limit", type=int)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score hypothesis mels against references")
    e.add_argument("--ref", required=True, help="directory of .mel files or a corpus directory")
    e.add_argument("--hyp", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("dump-mask", help="print the alignment mask of a score as CSV")
    m.add_argument("--score", required=True, help="score JSON file or corpus directory")
    m.add_argument("--index", type=int, default=0)
    m.add_argument("--preset", default="tiny")
    m.add_argument("--delta", type=float)
    m.add_argument("--factor", type=int, choices=(1, 2, 4))
    m.add_argument("--out")
    m.set_defaults(func=cmd_dump_mask)

    sc = sub.add_parser("scaling", help="architecture/data scaling sweep")
    sc.add_argument("--presets", type=_str_list, default=["tiny", "small_toy"])
    sc.add_argument("--sizes", type=_int_list, default=[8], help="training melody counts")
    sc.add_argument("--iters", type=int, default=200)
    sc.add_argument("--batch-size", type=int, default=8)
    sc.add_argument("--eval-samples", type=int, default=4)
    sc.add_argument("--steps", type=int, default=10)
    sc.add_argument("--seed", type=int, required=True)
    sc.add_argument("--out")
    sc.set_defaults(func=cmd_scaling)

    gr = sub.add_parser("grouping", help="melody-group sweep under a fixed melody budget")
    gr.add_argument("--groups", type=_int_list, default=[1, 10, 20, 30, 40, 50])
    gr.add_argument("--budget", type=int, default=50, help="total training melodies")
    gr.add_argument("--variants", type=int, default=8)
    gr.add_argument("--preset", default="tiny")
    gr.add_argument("--iters", type=int, default=200)
    gr.add_argument("--batch-size", type=int, default=8)
    gr.add_argument("--eval-samples", type=int, default=8)
    gr.add_argument("--steps", type=int, default=10)
    gr.add_argument("--seed", type=int, required=True)
    gr.add_argument("--out")
    gr.set_defaults(func=cmd_grouping)

    ex = sub.add_parser("example-config", help="print a commented run-config template")
    ex.set_defaults(func=cmd_example_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
