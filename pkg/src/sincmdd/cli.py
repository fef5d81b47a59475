"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error (missing files
included), 3 a gradient check exceeded its tolerance.

Configuration precedence is flags > ``--config`` file > defaults. Every
command echoes its effective configuration next to its outputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import DEFAULT_PHONES, CorpusConfig, gen_corpus, load_corpus, write_corpus
from .decode import DecodeConfig, decode_utterances
from .frontend import FrontendConfig, SincFilterbankParams, SincFrontend, export_filters
from .mddeval import (
    MetricsReport,
    evaluate,
    format_table,
    read_annotations,
    read_hypotheses,
    write_hypotheses,
    write_report,
)
from .seqmodel import ModelConfig, MddModel
from .train import (
    Checkpoint,
    TrainConfig,
    ctc_nll,
    default_model_config,
    flatten_config,
    grad_check,
    model_grad_check,
    read_kv,
    tiny_model_config,
    tiny_sample,
    train_loop,
    unflatten_config,
    write_kv,
)

log = logging.getLogger("sincmdd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
FRONTENDS = ("sinc", "fbank")

# tolerances of the shipped gradient checks
CTC_GRAD_TOL = 1e-5
SINC_GRAD_TOL = 1e-4
MODEL_GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything a command may consume, keyed ``corpus.*``, ``model.*``, ``train.*``, ``decode.*``."""

    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=lambda: default_model_config(_symbols(DEFAULT_PHONES), "sinc"))
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def to_kv(self) -> dict[str, str]:
        kv = {"corpus.phones": ",".join(_symbols(self.corpus.phones))}
        kv.update({k: v for k, v in flatten_config(self.corpus, "corpus.").items() if k != "corpus.phones"})
        kv.update({k: v for k, v in flatten_config(self.model, "model.").items() if k != "model.phones"})
        kv.update(flatten_config(self.train, "train."))
        kv.update(flatten_config(self.decode, "decode."))
        return kv


def _symbols(specs) -> tuple[str, ...]:
    return tuple(p.symbol for p in specs)


def _phone_specs(raw: str):
    table = {p.symbol: p for p in DEFAULT_PHONES}
    names = [x for x in raw.split(",") if x]
    unknown = [n for n in names if n not in table]
    if unknown:
        raise KeyError(f"no formant table for phones {unknown}; known: {sorted(table)}")
    return tuple(table[n] for n in names)


def build_config(kv: dict[str, str]) -> RunConfig:
    """Apply ``key=value`` overrides to the defaults; unknown keys raise ``KeyError``."""
    base = RunConfig()
    allowed = set(base.to_kv())
    unknown = sorted(set(kv) - allowed)
    if unknown:
        raise KeyError(f"unknown config keys: {', '.join(unknown)}")
    corpus = base.corpus
    if "corpus.phones" in kv:
        corpus = dataclasses.replace(corpus, phones=_phone_specs(kv["corpus.phones"]))
    rest = {k: v for k, v in kv.items() if k != "corpus.phones"}
    corpus = unflatten_config(corpus, rest, "corpus.")
    model = default_model_config(_symbols(corpus.phones), base.model.frontend)
    model = unflatten_config(model, rest, "model.")
    return RunConfig(
        corpus,
        model,
        unflatten_config(base.train, rest, "train."),
        unflatten_config(base.decode, rest, "decode."),
    )


def _parse_sets(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(args) -> RunConfig:
    kv: dict[str, str] = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(path)
        kv.update(read_kv(path))
        build_config(kv)  # file errors surface as data errors
    overrides = _parse_sets(args.set)
    if args.seed is not None:
        for key in ("corpus.seed", "model.seed", "train.seed"):
            overrides[key] = str(args.seed)
    try:
        cfg = build_config({**kv, **overrides})
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def echo_config(cfg: RunConfig, path: Path, extra: dict[str, str] | None = None) -> None:
    kv = cfg.to_kv()
    kv.update(extra or {})
    path.parent.mkdir(parents=True, exist_ok=True)
    write_kv(path, kv)


def _sidecar(out: Path) -> Path:
    return out.with_name(out.stem + ".config.txt")


# --- commands -----------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    corpus = gen_corpus(cfg.corpus)
    write_corpus(corpus, out)
    echo_config(cfg, out / "effective_config.txt")
    print(f"wrote {len(corpus.utterances)} utterances ({corpus.n_injected_errors} injected errors) to {out}")
    return EXIT_OK


def _model_config(cfg: RunConfig, phones: Sequence[str], frontend: str) -> ModelConfig:
    return dataclasses.replace(cfg.model, phones=tuple(phones), frontend=frontend)


def train_frontend(corpus, cfg: RunConfig, frontend: str, out: Path) -> Checkpoint:
    train_cfg = dataclasses.replace(cfg.train, frontend=frontend)
    ck = train_loop(corpus, train_cfg, _model_config(cfg, corpus.phones, frontend))
    ck.save(out)
    return ck


def cmd_train(args, cfg: RunConfig) -> int:
    corpus = load_corpus(_existing(args.corpus))
    frontend = args.frontend or cfg.train.frontend
    out = Path(args.out)
    ck = train_frontend(corpus, cfg, frontend, out)
    echo_config(cfg, out / "effective_config.txt", {"train.frontend": frontend})
    print(f"best dev loss {ck.best_val:.4f} at epoch {ck.epoch}; checkpoint in {out}")
    return EXIT_OK


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    return p


def _load_model(directory: str | Path) -> MddModel:
    directory = _existing(str(directory))
    for name in ("model.bin", "config.txt"):
        _existing(str(directory / name))
    return Checkpoint.load(directory).build_model()


def cmd_decode(args, cfg: RunConfig) -> int:
    model = _load_model(args.checkpoint)
    corpus = load_corpus(_existing(args.corpus))
    utts = corpus.split(args.split)
    if not utts:
        raise ValueError(f"split {args.split!r} of {args.corpus} is empty")
    hyps = decode_utterances(model, utts, cfg.decode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_hypotheses(hyps, out)
    echo_config(cfg, _sidecar(out), {"decode.split": args.split})
    print(f"decoded {len(hyps)} utterances to {out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    if args.corpus is None and args.annotations is None:
        raise UsageError("eval-mdd needs --annotations or --corpus")
    if args.annotations is not None:
        anns = read_annotations(_existing(args.annotations))
    else:
        corpus = load_corpus(_existing(args.corpus))
        anns = [u.annotation for u in corpus.split(args.split)]
    if args.oracle:
        hyps = {a.utt_id: a.realized for a in anns}
    elif args.hyp is None:
        raise UsageError("eval-mdd needs --hyp unless --oracle is given")
    else:
        hyps = read_hypotheses(_existing(args.hyp))
    report = evaluate(anns, hyps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out)
    echo_config(cfg, _sidecar(out))
    print(format_table({"system": report}), end="")
    return EXIT_OK


def cmd_export(args, cfg: RunConfig) -> int:
    if args.checkpoint is not None:
        model = _load_model(args.checkpoint)
        if not isinstance(model.frontend, SincFrontend):
            raise ValueError(f"{args.checkpoint} holds a {model.cfg.frontend} model; no sinc filters to export")
        params = model.frontend.filterbank_params()
    else:
        sc = cfg.model.sinc
        params = SincFilterbankParams.mel_init(sc.filter_count, sc.kernel_length, sc.sample_rate_hz)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_filters(params, out, nfft=args.nfft)
    echo_config(cfg, _sidecar(out))
    print(f"wrote {params.filter_count} filter responses to {out}")
    return EXIT_OK


def run_grad_checks(seed: int = 0) -> dict[str, dict]:
    """The three shipped gradient checks; each entry has ``max_rel_error``, ``tol`` and ``passed``."""
    results = {}
    rng = np.random.default_rng(seed)

    # CTC: gradient w.r.t. logits of -log p(y | x) for a random instance
    logits = torch.tensor(rng.normal(size=(6, 4)), dtype=torch.float64, requires_grad=True)
    target = [1, 2, 2]

    class _Logits(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.logits = torch.nn.Parameter(logits.detach().clone())

    holder = _Logits()
    rep = grad_check(holder, lambda: ctc_nll(holder.logits, target)[0], seed=seed)
    results["ctc_logits"] = {"max_rel_error": rep.worst, "tol": CTC_GRAD_TOL}

    # sinc cutoffs through the frontend alone
    sc = FrontendConfig(filter_count=4, kernel_length=31, conv_layer_filters=(3,), conv_kernel_sizes=(3,), pooling=(16, 1))
    fe = SincFrontend(sc, seed=seed, dtype=torch.float64)
    wave = torch.tensor(rng.uniform(-0.9, 0.9, (1, 31 - 1 + 16 * 8)), dtype=torch.float64)
    weights = torch.tensor(rng.normal(size=(1, 8, 3)), dtype=torch.float64)
    rep = grad_check(fe, lambda: (fe(wave)[0] * weights).sum(), only=["theta_low", "theta_band"], seed=seed)
    results["sinc_cutoffs"] = {"max_rel_error": rep.worst, "tol": SINC_GRAD_TOL}

    # full tiny model under the joint loss
    mc = tiny_model_config(seed=seed)
    model = MddModel(mc, dtype=torch.float64)
    rep = model_grad_check(model, tiny_sample(mc, seed=seed))
    results["full_model"] = {"max_rel_error": rep.worst, "tol": MODEL_GRAD_TOL}

    for r in results.values():
        r["passed"] = r["max_rel_error"] < r["tol"]
    return results


def cmd_grad_check(args, cfg: RunConfig) -> int:
    results = run_grad_checks(cfg.train.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    lines = [f"{name:<14}{r['max_rel_error']:12.3e}  tol {r['tol']:.0e}  {'PASS' if r['passed'] else 'FAIL'}"
             for name, r in results.items()]
    out.with_suffix(".txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    echo_config(cfg, _sidecar(out))
    print("\n".join(lines))
    return EXIT_OK if all(r["passed"] for r in results.values()) else EXIT_CHECK


# --- pipeline -----------------------------------------------------------------

def _stage(name: str, fn, *args):
    try:
        return fn(*args)
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc


def write_comparison(rows: dict[str, MetricsReport], out: Path) -> None:
    doc = {"rows": {name: r.to_dict() for name, r in rows.items()}}
    if set(FRONTENDS) <= set(rows):
        # reported, not asserted: at toy scale neither front-end is guaranteed to win
        doc["sinc_minus_fbank_per"] = rows["sinc"].per - rows["fbank"].per
    (out / "comparison.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "comparison.txt").write_text(format_table(rows), encoding="utf-8")


def pipeline_run(cfg: RunConfig, out: str | Path, oracle: bool = False) -> dict[str, MetricsReport]:
    """synth -> train (both front-ends) -> decode test -> eval; writes the comparison table.

    With ``oracle`` the hypotheses are the perceived phones and nothing is trained.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out / "effective_config.txt", {"pipeline.oracle": str(oracle)})
    corpus_dir = out / "corpus"
    _stage("synth", lambda: write_corpus(gen_corpus(cfg.corpus), corpus_dir))
    corpus = _stage("load", load_corpus, corpus_dir)
    anns = [u.annotation for u in corpus.split("test")]
    rows: dict[str, MetricsReport] = {}
    if oracle:
        hyps = {a.utt_id: a.realized for a in anns}
        rows["oracle"] = _stage("eval-oracle", evaluate, anns, hyps)
    else:
        for fe in FRONTENDS:
            fe_dir = out / fe
            ck = _stage(f"train-{fe}", train_frontend, corpus, cfg, fe, fe_dir)
            model = ck.build_model()
            hyps = _stage(f"decode-{fe}", decode_utterances, model, corpus.split("test"), cfg.decode)
            write_hypotheses(hyps, fe_dir / "hyps_test.tsv")
            rows[fe] = _stage(f"eval-{fe}", evaluate, anns, hyps)
            write_report(rows[fe], fe_dir / "report.json")
    write_comparison(rows, out)
    return rows


def cmd_pipeline(args, cfg: RunConfig) -> int:
    rows = pipeline_run(cfg, args.out, oracle=args.oracle)
    print(format_table(rows), end="")
    return EXIT_OK


# --- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help="seed for every random choice (corpus, init, batch order)")
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="sincmdd", description="Sinc-frontend CTC/attention phone recognizer for MDD")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train one front-end")
    p.add_argument("--corpus", required=True)
    p.add_argument("--frontend", choices=FRONTENDS)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", parents=[common], help="decode a corpus split to a hypothesis file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--out", required=True, help="hypothesis TSV")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval-mdd", parents=[common], help="score hypotheses against annotations")
    p.add_argument("--annotations")
    p.add_argument("--corpus")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--hyp")
    p.add_argument("--oracle", action="store_true", help="use the perceived phones as hypotheses")
    p.add_argument("--out", required=True, help="report JSON (a .txt table is written alongside)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-filters", parents=[common], help="write sinc filter responses as CSV")
    p.add_argument("--checkpoint", help="trained sinc checkpoint (default: mel initialization)")
    p.add_argument("--nfft", type=int, default=512)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--out", required=True, help="report JSON")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("pipeline", parents=[common], help="synth, train both front-ends, decode, evaluate")
    p.add_argument("--out", required=True)
    p.add_argument("--oracle", action="store_true", help="skip training; hypotheses := perceived phones")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        torch.set_num_threads(1)
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        path = exc.filename if exc.filename is not None else exc.args[0]
        print(f"error: file not found: {path}", file=sys.stderr)
        return EXIT_DATA
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
