"""Command-line entry point: ``svback <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or file-format error.  Report
tables go to stdout, warnings to stderr.  A ``--config`` file of
``key=value`` lines supplies defaults for any flag; flags given on the
command line win.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import fusion, metrics, plda, psvm, scoring, synth, transforms
from .core import DataError, EmbeddingSet, ScoreSet, TrialKey, align, probe_durations, reference_durations
from .formats import (FileFormatError, load, parse_durations, parse_key, parse_manifest,
                      parse_trial_list, read_embeddings, read_scores, write_durations,
                      write_embeddings, write_key, write_scores, write_trial_list)

log = logging.getLogger("svback")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# -- helpers -------------------------------------------------------------------

def _need(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, [])]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"{args._parser.format_usage()}missing required flag(s): {flags}")


def _read_emb(path) -> EmbeddingSet:
    return read_embeddings(Path(path).read_bytes(), path)


def _write_bytes(path, data: bytes):
    Path(path).write_bytes(data)


def _write_text(path, text: str):
    Path(path).write_text(text, encoding="utf-8")


def _load_scores(paths) -> list[ScoreSet]:
    out = []
    for p in paths:
        ss = load(p, read_scores)
        out.append(ScoreSet(ss.trials, ss.scores, Path(p).stem))
    return out


def _trial_durations(trials, args):
    if not args.durations:
        return None, None
    durs = load(args.durations, parse_durations)
    manifest = load(args.manifest, parse_manifest) if args.manifest else None
    return reference_durations(trials, durs, manifest), probe_durations(trials, durs)


def _load_model(path):
    data = Path(path).read_bytes()
    tag = data[:4]
    if tag == b"PLDA":
        return plda.PldaScorer(plda.PldaModel.from_bytes(data, path))
    if tag == b"PSVM":
        return psvm.PsvmScorer(psvm.PsvmModel.from_bytes(data, path))
    raise FileFormatError(f"unknown model container {tag!r}", path)


def _scorer(args):
    if args.backend == "cosine":
        return scoring.CosineScorer()
    _need(args, "model")
    return _load_model(args.model)


def _table(rows) -> str:
    return "".join(f"{k}\t{v:.6f}\n" if isinstance(v, float) else f"{k}\t{v}\n" for k, v in rows)


# -- subcommands -----------------------------------------------------------------

def cmd_synth(args):
    _need(args, "out_dir")
    shift = None
    if args.shift:
        shift = tuple([args.shift] + [0.0] * (args.dim - 1))
    spec = synth.CorpusSpec(n_speakers=args.n_speakers, utts_per_speaker=args.utts, dim=args.dim,
                            b=args.b, w=args.w, domain_shift=shift,
                            shifted_fraction=args.shifted_fraction,
                            duration_log_mean=args.duration_log_mean,
                            duration_log_sd=args.duration_log_sd, seed=args.seed)
    corpus = synth.make_corpus(spec)
    trials, key = synth.make_trials(corpus, args.n_target, args.n_nontarget, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_bytes(out / "embeddings.emb", write_embeddings(corpus))
    _write_text(out / "trials.tsv", write_trial_list(trials))
    _write_text(out / "key.tsv", write_key(key))
    _write_text(out / "durations.tsv", write_durations(corpus.durations))
    oracle = ScoreSet(trials, synth.oracle_scores(spec, corpus, trials))
    _write_text(out / "oracle_scores.tsv", write_scores(oracle))


def cmd_transform_fit(args):
    _need(args, "embeddings", "out")
    train = _read_emb(args.embeddings)
    cfg = transforms.PipelineConfig(center=not args.no_center,
                                    coral_weight=args.coral_weight if args.coral_in else None,
                                    whiten=args.whiten, lda_dim=args.lda_dim, length_norm=False,
                                    whiten_ridge=args.ridge)
    in_dom = _read_emb(args.coral_in) if args.coral_in else None
    pipe = transforms.fit_pipeline(train, cfg, in_dom)
    _write_bytes(args.out, pipe.transform.to_bytes())


def cmd_transform_apply(args):
    _need(args, "embeddings", "transform", "out")
    es = _read_emb(args.embeddings)
    t = transforms.LinearTransform.from_bytes(Path(args.transform).read_bytes(), args.transform)
    out = transforms.apply_transform(t, es)
    if args.length_norm:
        out = transforms.length_normalize_set(out)
    _write_bytes(args.out, write_embeddings(out))


def cmd_stack(args):
    _need(args, "embeddings", "out")
    _write_bytes(args.out, write_embeddings(transforms.stack_embeddings([_read_emb(p) for p in args.embeddings])))


def cmd_plda_train(args):
    _need(args, "embeddings", "out")
    m = plda.fit_plda_em(_read_emb(args.embeddings), args.iterations)
    _write_bytes(args.out, m.to_bytes())


def cmd_plda_interp(args):
    _need(args, "model_out", "out")
    m_out = plda.PldaModel.from_bytes(Path(args.model_out).read_bytes(), args.model_out)
    if args.adapt_embeddings:
        m = plda.adapt_plda(m_out, _read_emb(args.adapt_embeddings), args.alpha, args.alpha,
                            args.iterations)
    else:
        _need(args, "model_in")
        m_in = plda.PldaModel.from_bytes(Path(args.model_in).read_bytes(), args.model_in)
        m = plda.interpolate_plda(m_out, m_in, args.alpha)
    _write_bytes(args.out, m.to_bytes())


def cmd_score(args):
    _need(args, "embeddings", "trials", "out")
    sc = _scorer(args)
    es = _read_emb(args.embeddings)
    trials = load(args.trials, parse_trial_list)
    manifest = load(args.manifest, parse_manifest) if args.manifest else None
    probes = _read_emb(args.probe_embeddings) if args.probe_embeddings else None
    ss = scoring.score_trials(sc, trials, es, manifest, probes, threads=args.threads)
    _write_text(args.out, write_scores(ss))


def cmd_snorm(args):
    _need(args, "scores", "embeddings", "cohort", "out")
    sc = _scorer(args)
    raw = load(args.scores[0], read_scores)
    es = _read_emb(args.embeddings)
    cohort = _read_emb(args.cohort)
    manifest = load(args.manifest, parse_manifest) if args.manifest else None
    e_lists, t_lists = scoring.cohort_score_lists(sc, raw.trials, es, cohort, manifest)
    if args.cal_norm:
        out = scoring.cal_norm(raw, e_lists, t_lists, args.top_fraction, args.cal_a, args.cal_b)
    else:
        out = scoring.adaptive_snorm(raw, e_lists, t_lists, args.top_fraction)
    _write_text(args.out, write_scores(out))


def cmd_psvm_init(args):
    _need(args, "model", "out")
    m = plda.PldaModel.from_bytes(Path(args.model).read_bytes(), args.model)
    _write_bytes(args.out, psvm.init_psvm_from_plda(m).to_bytes())


def cmd_psvm_train(args):
    _need(args, "model", "embeddings", "out")
    m = psvm.PsvmModel.from_bytes(Path(args.model).read_bytes(), args.model)
    es = _read_emb(args.embeddings)
    pairs = psvm.mine_pairs(es, None, args.n_same, args.n_imp, args.seed)
    data = psvm.PairData.build(pairs, es, use_durations=args.use_durations)
    cfg = psvm.RefineConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                            tau=args.tau, seed=args.seed, momentum=args.momentum)
    refined, hist = psvm.refine_psvm(m, data, config=cfg, return_history=True)
    log.info("psvm training loss %.6f -> %.6f", hist[0], min(hist))
    _write_bytes(args.out, refined.to_bytes())


def _fused_output(args, model, trials, matrix, d_r, d_p):
    if args.out_scores:
        s = fusion.apply_fusion(model, matrix, d_r, d_p) + args.offset
        _write_text(args.out_scores, write_scores(ScoreSet(trials, s)))


def cmd_fuse(args):
    _need(args, "scores")
    systems = _load_scores(args.scores)
    if args.model:
        model = fusion.FusionModel.from_text(Path(args.model).read_text(), args.model)
        ref = load(args.key, parse_key).trials if args.key else systems[0].trials
        matrix = align(systems, ref)
        d_r, d_p = _trial_durations(ref, args)
        _fused_output(args, model, ref, matrix, d_r, d_p)
        return
    _need(args, "key")
    key = load(args.key, parse_key)
    matrix = align(systems, key)
    d_r, d_p = _trial_durations(key.trials, args)
    model = fusion.train_fusion(matrix, key, d_r, d_p, args.prior, d_r is not None, args.ridge,
                                [s.name for s in systems])
    if args.out_model:
        _write_text(args.out_model, model.to_text())
    _fused_output(args, model, key.trials, matrix, d_r, d_p)


def cmd_calibrate(args):
    _need(args, "scores", "key")
    if len(args.scores) != 1:
        raise UsageError("calibrate takes exactly one --scores file")
    args.durations = None
    cmd_fuse(args)


def cmd_evaluate(args):
    _need(args, "scores", "key")
    key = load(args.key, parse_key)
    s = align(_load_scores(args.scores[:1]), key)[0]
    rows = list(metrics.report(s, key).items())
    if args.equalized:
        if key.partitions is None:
            raise DataError("--equalized needs a key with a partition column")
        for name, fn in (("eer", metrics.eer), ("min_cprimary", metrics.min_cprimary),
                         ("act_cprimary", metrics.act_cprimary)):
            rows.append((f"equalized_{name}", metrics.equalized(fn, s, key)))
    sys.stdout.write("metric\tvalue\n" + _table(rows))
    if args.det_out:
        pts = metrics.det_points(s, key)
        _write_text(args.det_out, "probit_pfa\tprobit_pmiss\n"
                    + "".join(f"{x!r}\t{y!r}\n" for x, y in pts.tolist()))


def cmd_contributions(args):
    _need(args, "model", "scores")
    model = fusion.FusionModel.from_text(Path(args.model).read_text(), args.model)
    systems = _load_scores(args.scores)
    ref = load(args.key, parse_key).trials if args.key else systems[0].trials
    d_r, d_p = _trial_durations(ref, args)
    rows = fusion.contribution_report(model, align(systems, ref), d_r, d_p)
    sys.stdout.write(fusion.format_contributions(rows))


def cmd_jackknife(args):
    _need(args, "scores", "key")
    systems = _load_scores(args.scores)
    key = load(args.key, parse_key)
    d_r, d_p = _trial_durations(key.trials, args)
    kw = {}
    if args.eval_key:
        _need(args, "eval_scores")
        ekey = load(args.eval_key, parse_key)
        esys = _load_scores(args.eval_scores)
        kw = dict(eval_scores=align(esys, ekey), eval_labels=ekey)
        if d_r is not None:
            kw["eval_d_r"], kw["eval_d_p"] = _trial_durations(ekey.trials, args)
    res = fusion.jackknife(align(systems, key), key, d_r, d_p, args.prior, d_r is not None,
                           [s.name for s in systems], ridge=args.ridge, **kw)
    out = ["left_out\t" + "\t".join("delta_" + k for k in fusion.JACKKNIFE_METRICS)]
    for name, d in res.items():
        out.append(name + "\t" + "\t".join(f"{d[k]:.6f}" for k in fusion.JACKKNIFE_METRICS))
    sys.stdout.write("\n".join(out) + "\n")


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="svback", description="Speaker-verification back-end toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn, _parser=sp)
        sp.add_argument("--config", help="key=value defaults file")
        return sp

    def common_seed(sp):
        sp.add_argument("--seed", type=int, default=0)

    sp = add("synth", cmd_synth, "generate a synthetic corpus, trials and key")
    sp.add_argument("--out-dir")
    sp.add_argument("--n-speakers", type=int, default=200)
    sp.add_argument("--utts", type=int, default=5)
    sp.add_argument("--dim", type=int, default=32)
    sp.add_argument("--b", type=float, default=1.0)
    sp.add_argument("--w", type=float, default=1.0)
    sp.add_argument("--shift", type=float, default=0.0, help="domain shift along axis 0")
    sp.add_argument("--shifted-fraction", type=float, default=0.5)
    sp.add_argument("--duration-log-mean", type=float, default=math.log(60.0))
    sp.add_argument("--duration-log-sd", type=float, default=0.5)
    sp.add_argument("--n-target", type=int, default=2000)
    sp.add_argument("--n-nontarget", type=int, default=20000)
    common_seed(sp)

    sp = add("transform-fit", cmd_transform_fit, "fit center/CORAL/whiten/LDA transform")
    sp.add_argument("--embeddings")
    sp.add_argument("--out")
    sp.add_argument("--no-center", action="store_true")
    sp.add_argument("--whiten", action="store_true")
    sp.add_argument("--ridge", type=float, default=0.0)
    sp.add_argument("--lda-dim", type=int)
    sp.add_argument("--coral-in", help="in-domain embeddings for CORAL")
    sp.add_argument("--coral-weight", type=float, default=0.5)

    sp = add("transform-apply", cmd_transform_apply, "apply a transform to embeddings")
    sp.add_argument("--embeddings")
    sp.add_argument("--transform")
    sp.add_argument("--out")
    sp.add_argument("--length-norm", action="store_true")

    sp = add("stack", cmd_stack, "concatenate embeddings of several systems")
    sp.add_argument("--embeddings", nargs="+")
    sp.add_argument("--out")

    sp = add("plda-train", cmd_plda_train, "train a two-covariance PLDA by EM")
    sp.add_argument("--embeddings")
    sp.add_argument("--out")
    sp.add_argument("--iterations", type=int, default=10)

    sp = add("plda-interp", cmd_plda_interp, "interpolate or adapt PLDA models")
    sp.add_argument("--model-out")
    sp.add_argument("--model-in")
    sp.add_argument("--adapt-embeddings")
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--iterations", type=int, default=10)
    sp.add_argument("--out")

    for name, fn, help_ in (("score", cmd_score, "score a trial list"),
                            ("snorm", cmd_snorm, "adaptive S-norm or Cal-Norm")):
        sp = add(name, fn, help_)
        sp.add_argument("--model", help="PLDA or PSVM container")
        sp.add_argument("--backend", choices=["model", "cosine"], default="model")
        sp.add_argument("--embeddings")
        sp.add_argument("--manifest")
        sp.add_argument("--out")
        sp.add_argument("--threads", type=int)
    sp_score = sub.choices["score"]
    sp_score.add_argument("--trials")
    sp_score.add_argument("--probe-embeddings")
    sp = sub.choices["snorm"]
    sp.add_argument("--scores", nargs=1)
    sp.add_argument("--cohort")
    sp.add_argument("--top-fraction", type=float, default=0.3)
    sp.add_argument("--cal-norm", action="store_true")
    sp.add_argument("--cal-a", type=float, default=1.0)
    sp.add_argument("--cal-b", type=float, default=0.5)

    sp = add("psvm-init", cmd_psvm_init, "initialize a PSVM from a PLDA model")
    sp.add_argument("--model")
    sp.add_argument("--out")

    sp = add("psvm-train", cmd_psvm_train, "refine a PSVM on the smoothed DCF")
    sp.add_argument("--model")
    sp.add_argument("--embeddings")
    sp.add_argument("--out")
    sp.add_argument("--n-same", type=int, default=16)
    sp.add_argument("--n-imp", type=int, default=240)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--batch-size", type=int, default=40 * 4096)
    sp.add_argument("--tau", type=float, default=1.0)
    sp.add_argument("--momentum", type=float, default=0.0)
    sp.add_argument("--use-durations", action="store_true")
    common_seed(sp)

    for name, fn, help_ in (("calibrate", cmd_calibrate, "train/apply single-system calibration"),
                            ("fuse", cmd_fuse, "train/apply linear fusion")):
        sp = add(name, fn, help_)
        sp.add_argument("--scores", nargs="+")
        sp.add_argument("--key")
        sp.add_argument("--model", help="apply an existing fusion model instead of training")
        sp.add_argument("--out-model")
        sp.add_argument("--out-scores")
        sp.add_argument("--prior", type=float, default=0.01)
        sp.add_argument("--ridge", type=float, default=1e-6)
        sp.add_argument("--offset", type=float, default=0.0)
        if name == "fuse":
            sp.add_argument("--durations")
            sp.add_argument("--manifest")

    sp = add("evaluate", cmd_evaluate, "EER, C_primary and Cllr of a score file")
    sp.add_argument("--scores", nargs=1)
    sp.add_argument("--key")
    sp.add_argument("--equalized", action="store_true")
    sp.add_argument("--det-out")

    sp = add("contributions", cmd_contributions, "per-subsystem LLR contribution table")
    sp.add_argument("--model")
    sp.add_argument("--scores", nargs="+")
    sp.add_argument("--key")
    sp.add_argument("--durations")
    sp.add_argument("--manifest")

    sp = add("jackknife", cmd_jackknife, "leave-one-subsystem-out fusion analysis")
    sp.add_argument("--scores", nargs="+")
    sp.add_argument("--key")
    sp.add_argument("--durations")
    sp.add_argument("--manifest")
    sp.add_argument("--eval-scores", nargs="+")
    sp.add_argument("--eval-key")
    sp.add_argument("--prior", type=float, default=0.01)
    sp.add_argument("--ridge", type=float, default=1e-6)
    return p


def read_config(path) -> dict:
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = (x.strip() for x in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _apply_config(sp: argparse.ArgumentParser, cfg: dict):
    actions = {a.dest: a for a in sp._actions}
    defaults = {}
    for k, v in cfg.items():
        a = actions.get(k)
        if a is None or k in ("help", "config"):
            raise UsageError(f"unknown config key {k!r}")
        if a.nargs == 0:  # store_true flags
            defaults[k] = v.lower() in ("1", "true", "yes", "on")
        elif a.nargs in ("+", 1):
            defaults[k] = [a.type(x) if a.type else x for x in v.split()]
        else:
            try:
                defaults[k] = a.type(v) if a.type else v
            except ValueError:
                raise UsageError(f"bad value for config key {k!r}: {v!r}") from None
    sp.set_defaults(**defaults)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "missing subcommand")
        if args.config:
            _apply_config(args._parser, read_config(args.config))
            args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    try:
        args.func(args)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return 1
    except (DataError, FileFormatError, OSError, RuntimeError, np.linalg.LinAlgError) as e:
        sys.stderr.write(f"svback {args.command}: error: {e}\n")
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
