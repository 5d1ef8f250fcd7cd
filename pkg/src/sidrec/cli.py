"""``sidrec``: one subcommand per pipeline stage, driven by a YAML config.

Reports go to stdout as ``key=value`` lines; logs go to stderr. Exit codes:
0 success, 1 runtime failure, 2 usage error, 3 invalid configuration.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import alignpipe, embedstore, esu, gsu, metrics, quantizer, records, segmask, sidstore, synth
from .config import ConfigError, load_config

log = logging.getLogger("sidrec")


class Report:
    """Ordered key=value lines; floats use a fixed repr so runs diff cleanly."""

    def __init__(self, base_dir: Path):
        self.base_dir = Path(base_dir)
        self.lines = []

    def add(self, key, value):
        self.lines.append(f"{key}={self._fmt(value)}")

    def path(self, key, p):
        self.add(key, os.path.relpath(Path(p), self.base_dir))

    def digest(self, key, p):
        self.add(key, hashlib.sha256(Path(p).read_bytes()).hexdigest())

    @staticmethod
    def _fmt(v):
        if isinstance(v, (bool, np.bool_)):
            return "true" if v else "false"
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return format(float(v), ".10g")
        if v is None:
            return "none"
        if isinstance(v, (list, tuple)):
            return ",".join(Report._fmt(x) for x in v)
        return str(v)

    def emit(self, out=None):
        out = out or sys.stdout
        for line in self.lines:
            out.write(line + "\n")
        out.flush()


def _out(p: Path) -> Path:
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _figure(ctx, name):
    if ctx.figures is None:
        return None
    ctx.figures.mkdir(parents=True, exist_ok=True)
    return ctx.figures / f"{name}.png"


class Context:
    def __init__(self, cfg, figures):
        self.cfg = cfg
        self.figures = figures
        self.report = Report(cfg.base_dir)

    def seed(self, section_seed=None):
        return self.cfg.seed if section_seed is None else section_seed

    def add_figure(self, name, render, *args):
        path = _figure(self, name)
        if path is not None:
            render(*args, path)
            self.report.path(f"figure.{name}", path)


# --------------------------------------------------------------------------
# stages

def cmd_ingest(ctx, args):
    cfg = ctx.cfg
    m = embedstore.read_jsonl_embeddings(cfg.require_path("embeddings_jsonl"))
    out = _out(cfg.require_path("embeddings"))
    embedstore.save_embeddings(m, out)
    r = ctx.report
    r.add("n_items", m.n)
    r.add("dim", m.d)
    r.path("embeddings", out)
    r.digest("embeddings.sha256", out)


def cmd_pca(ctx, args):
    cfg = ctx.cfg
    m = embedstore.load_embeddings(cfg.require_path("embeddings"))
    p = embedstore.pca_fit(m, cfg.pca.rank)
    reduced = embedstore.pca_apply(p, m)
    pca_path = _out(cfg.require_path("pca"))
    red_path = _out(cfg.require_path("reduced"))
    embedstore.save_pca(p, pca_path)
    embedstore.save_embeddings(reduced, red_path)
    total = float(np.var(m.as_float64(), axis=0, ddof=1).sum())
    r = ctx.report
    r.add("rank", p.r)
    r.add("input_dim", p.d)
    r.add("explained_variance_ratio", float(p.explained_variance.sum()) / total if total else 0.0)
    r.path("pca", pca_path)
    r.path("reduced", red_path)
    r.digest("reduced.sha256", red_path)


def cmd_quantize_train(ctx, args):
    cfg, q = ctx.cfg, ctx.cfg.quantizer
    m = embedstore.load_embeddings(cfg.require_path("embeddings"))
    if q.K > m.n:
        raise ConfigError("quantizer.K", f"K={q.K} exceeds the {m.n} catalog items")
    model = quantizer.res_kmeans_fsq_fit(m.as_float64(), K=q.K, fsq_dims=q.n_fsq, L=q.L,
                                         seed=ctx.seed(q.seed), max_iters=q.max_iters,
                                         fsq_epochs=q.fsq_epochs, fsq_lr=q.fsq_lr,
                                         threads=cfg.threads)
    out = _out(cfg.require_path("quantizer"))
    quantizer.save_quantizer(model, out)
    r = ctx.report
    r.add("n_items", m.n)
    r.add("vocab", list(model.vocab_sizes))
    r.add("level1.iters", model.level1.n_iter)
    r.add("level2.iters", model.level2.n_iter)
    for name, v in zip(("level1", "level2", "fsq"), model.training_report):
        r.add(f"mse.{name}", v)
    r.path("quantizer", out)
    r.digest("quantizer.sha256", out)
    from . import plotting
    ctx.add_figure("level_mse", plotting.level_mse, list(model.training_report))


def cmd_quantize_assign(ctx, args):
    cfg = ctx.cfg
    model = quantizer.load_quantizer(cfg.require_path("quantizer"))
    m = embedstore.load_embeddings(cfg.require_path("embeddings"))
    codes = quantizer.assign_sids(model, m.as_float64(), threads=cfg.threads)
    out = _out(cfg.require_path("sids"))
    records.write_sids(out, m.ids, codes)
    r = ctx.report
    r.add("n_items", m.n)
    r.add("distinct_sids", len({tuple(c) for c in codes.tolist()}))
    for j in range(3):
        r.add(f"c{j + 1}.distinct", len(np.unique(codes[:, j])))
    r.path("sids", out)
    r.digest("sids.sha256", out)


def cmd_sid_analyze(ctx, args):
    cfg = ctx.cfg
    sids = records.read_sids(cfg.require_path("sids"))
    store = sidstore.SidEdgeStore()
    for item in sorted(sids):
        store.insert_observation(item, sids[item])
    observed = 0
    seq_path = cfg.path("sequences")
    if seq_path is not None:
        for seq in records.read_sequences(seq_path):
            for item in seq.items():
                if item in sids:
                    store.insert_observation(item, sids[item])
                    observed += 1
    out = _out(cfg.require_path("store"))
    store.save(out)
    rep = sidstore.collision_report(store, sorted(sids.items()), cfg.sid_analyze.ks)
    r = ctx.report
    for key, value in rep.as_pairs():
        r.add(key, value)
    r.add("observations", observed)
    r.path("store", out)
    r.digest("store.sha256", out)
    from . import plotting
    ctx.add_figure("bucket_sizes", plotting.bucket_sizes, store)


def _gsu_matrix(cfg):
    if cfg.gsu.use_reduced:
        p = cfg.require_path("reduced")
        if not p.exists():
            raise FileNotFoundError(f"{p}: reduced embeddings missing; run `pca` first "
                                    "or set gsu.use_reduced=false")
        return embedstore.load_embeddings(p)
    return embedstore.load_embeddings(cfg.require_path("embeddings"))


def cmd_gsu_retrieve(ctx, args):
    cfg = ctx.cfg
    index = gsu.CatalogIndex.from_matrix(_gsu_matrix(cfg))
    seqs = {s.user_id: s for s in records.read_sequences(cfg.require_path("sequences"))}
    if args.user not in seqs:
        raise KeyError(f"user {args.user} not found in sequences")
    if args.target not in index:
        raise KeyError(f"target item {args.target} has no embedding")
    hist = [i for i in seqs[args.user].items() if i in index]
    vecs = np.stack([index.vector(i) for i in hist]) if hist else np.zeros((0, index.vectors.shape[1]))
    res = gsu.top_k_gsu(hist, vecs, index.vector(args.target), cfg.gsu.k)
    r = ctx.report
    r.add("user", args.user)
    r.add("target", args.target)
    r.add("k", cfg.gsu.k)
    r.add("history_len", len(hist))
    r.add("n_selected", len(res.entries))
    r.add("selected", res.ids)
    r.add("scores", [s for _, s in res.entries])


def cmd_gsu_eval(ctx, args):
    cfg, g = ctx.cfg, ctx.cfg.gsu
    index = gsu.CatalogIndex.from_matrix(_gsu_matrix(cfg))
    triggers, truth = {}, {}
    for seq in records.read_sequences(cfg.require_path("sequences")):
        triggers[seq.user_id] = seq.items(g.trigger_flag)[-g.n_triggers:]
        truth[seq.user_id] = list(seq.future)
    res = gsu.pooled_retrieve_eval(index, triggers, truth, g.per_trigger_k, g.ks)
    r = ctx.report
    r.add("per_trigger_k", g.per_trigger_k)
    r.add("n_triggers", g.n_triggers)
    for k in sorted(res.hr_macro):
        r.add(f"hr@{k}", res.hr_macro[k])
    for k in sorted(res.hr_micro):
        r.add(f"hr_micro@{k}", res.hr_micro[k])
    r.add("users_evaluated", res.users_evaluated)
    r.add("users_skipped", res.users_skipped)
    from . import plotting
    ctx.add_figure("hit_rate", plotting.hit_rate_curve, res.hr_macro)


def _esu_examples(cfg, path_name):
    """Examples with SIDs joined and subsequences cut to gsu.k by GSU."""
    sids = records.read_sids(cfg.require_path("sids"))
    index = gsu.CatalogIndex.from_matrix(_gsu_matrix(cfg))
    out = []
    for rec in records.read_example_records(cfg.require_path(path_name)):
        ex = records.example_from_record(rec, sids)
        if len(ex.subsequence) > cfg.gsu.k and ex.target[0] in index:
            hist = [i for i, _ in ex.subsequence if i in index]
            vecs = np.stack([index.vector(i) for i in hist])
            keep = gsu.top_k_gsu(hist, vecs, index.vector(ex.target[0]), cfg.gsu.k).ids
            sid_of = dict(ex.subsequence)
            ex.subsequence = [(i, sid_of[i]) for i in keep]
        elif len(ex.subsequence) > cfg.gsu.k:
            ex.subsequence = ex.subsequence[-cfg.gsu.k:]
        out.append(ex)
    if not out:
        raise ValueError(f"{cfg.path(path_name)}: no examples")
    return out, sids


def _esu_config(cfg, sids):
    model = quantizer.load_quantizer(cfg.require_path("quantizer"))
    m = embedstore.load_embeddings(cfg.require_path("embeddings"))
    n_item = int(max(int(m.ids.max()), max(sids, default=0))) + 1
    e = cfg.esu
    return esu.EsuConfig(vocab=(n_item, *model.vocab_sizes), e=e.e, h=e.h, experts=e.experts,
                         expert_hidden=e.expert_hidden, mix_dim=e.mix_dim,
                         tasks=tuple(e.tasks), use_sid=e.use_sid, init_scale=e.init_scale,
                         seed=cfg.seed)


def _score_report(r, model, examples, prefix):
    prob = esu.predict(model, examples)
    for j, task in enumerate(model.config.tasks):
        rows = [(ex.user_id, float(prob[i, j]), ex.labels[task])
                for i, ex in enumerate(examples) if task in ex.labels]
        try:
            rm = metrics.rank_metrics(rows)
        except metrics.MetricUndefinedError as exc:
            log.warning("%s %s: %s", prefix, task, exc)
            r.add(f"{prefix}{task}.auc", None)
            continue
        r.add(f"{prefix}{task}.auc", rm.auc)
        r.add(f"{prefix}{task}.uauc", rm.uauc)
        r.add(f"{prefix}{task}.gauc", rm.gauc)
        r.add(f"{prefix}{task}.users", rm.n_users)


def cmd_esu_train(ctx, args):
    cfg = ctx.cfg
    examples, sids = _esu_examples(cfg, "train_examples")
    model = esu.EsuModel(_esu_config(cfg, sids))
    history = esu.fit(model, examples, lr=cfg.esu.lr, epochs=cfg.esu.epochs,
                      batch_size=cfg.esu.batch_size, seed=cfg.seed,
                      callback=lambda ep, loss: log.info("epoch %d loss %.6f", ep + 1, loss))
    out = _out(cfg.require_path("checkpoint"))
    esu.save_model(model, out)
    r = ctx.report
    r.add("n_examples", len(examples))
    r.add("epochs", len(history))
    r.add("loss.first", history[0] if history else None)
    r.add("loss.final", history[-1] if history else None)
    _score_report(r, model, examples, "train.")
    r.path("checkpoint", out)
    r.digest("checkpoint.sha256", out)
    from . import plotting
    ctx.add_figure("esu_loss", plotting.loss_curve, history)


def cmd_esu_eval(ctx, args):
    cfg = ctx.cfg
    model = esu.load_model(cfg.require_path("checkpoint"))
    examples, _ = _esu_examples(cfg, "eval_examples")
    r = ctx.report
    r.add("n_examples", len(examples))
    batch = esu.make_batch(model, examples)
    prob, _ = esu.forward(model, batch)
    loss = esu.multitask_bce_loss({t: prob[:, j] for j, t in enumerate(model.config.tasks)},
                                  {t: batch.labels[:, j] for j, t in enumerate(model.config.tasks)})
    r.add("loss", loss / len(examples))
    _score_report(r, model, examples, "")


def cmd_pairs_export(ctx, args):
    cfg, pc = ctx.cfg, ctx.cfg.pairs
    pairs = []
    n_i2i = n_u2i = missing = 0
    sess_path = cfg.path("sessions")
    if sess_path is not None:
        i2i = alignpipe.export_i2i_pairs(records.read_sessions(sess_path), pc.min_score, pc.top_n)
        pairs.extend(i2i)
        n_i2i = len(i2i)
    seq_path = cfg.path("sequences")
    if seq_path is not None:
        m = embedstore.load_embeddings(cfg.require_path("embeddings"))
        emb = {int(i): v for i, v in zip(m.ids, m.as_float64())}
        positives = {s.user_id: s.items(pc.positive_flag)
                     for s in records.read_sequences(seq_path)}
        u2i = alignpipe.export_u2i_pairs(positives, emb, pc.window)
        pairs.extend(u2i.pairs)
        n_u2i, missing = len(u2i.pairs), u2i.missing_embedding
    if sess_path is None and seq_path is None:
        raise ConfigError("paths.sessions", "pairs-export needs paths.sessions and/or paths.sequences")
    out = _out(cfg.require_path("pairs"))
    alignpipe.write_lines(out, (alignpipe.pair_to_json(p) for p in pairs))
    r = ctx.report
    r.add("pairs.i2i", n_i2i)
    r.add("pairs.u2i", n_u2i)
    r.add("missing_embedding", missing)
    r.path("pairs", out)
    r.digest("pairs.sha256", out)


def _judges(cfg):
    j = cfg.judge
    if j.mode == "mock":
        rule = alignpipe.category_match_rule if j.mock_rule == "category" else alignpipe.accept_all_rule
        judge = alignpipe.MockJudge(rule)
        return {alignpipe.I2I: judge, alignpipe.U2I: judge}
    return {alignpipe.I2I: alignpipe.HttpJudge(j.i2i_url or j.url, j.timeout),
            alignpipe.U2I: alignpipe.HttpJudge(j.u2i_url or j.url, j.timeout)}


def cmd_pairs_filter(ctx, args):
    cfg = ctx.cfg
    pairs = alignpipe.read_pairs(cfg.require_path("pairs"))
    meta = alignpipe.read_meta(cfg.require_path("meta"))
    missing = sorted({i for p in pairs for i in (p.trigger, p.target) if i not in meta})
    if missing:
        raise KeyError(f"no metadata for {len(missing)} items, e.g. {missing[:5]}")
    policy = alignpipe.FilterPolicy(max_retries=cfg.judge.max_retries,
                                    max_in_flight=cfg.judge.max_in_flight)
    res = alignpipe.filter_pairs(pairs, meta, _judges(cfg), policy)
    verdicts = sorted(res.accepted + res.rejected + res.quarantined,
                      key=lambda v: (v.pair.source, -v.pair.score, v.pair.trigger, v.pair.target))
    v_path = _out(cfg.require_path("verdicts"))
    a_path = _out(cfg.require_path("accepted"))
    alignpipe.write_lines(v_path, (alignpipe.verdict_to_json(v) for v in verdicts))
    alignpipe.write_lines(a_path, (alignpipe.pair_to_json(v.pair) for v in res.accepted))
    r = ctx.report
    r.add("accepted", len(res.accepted))
    r.add("rejected", len(res.rejected))
    r.add("quarantined", len(res.quarantined))
    for src in sorted(res.stats):
        for key in ("total", "accepted", "rejected", "parse_errors", "rejection_rate"):
            r.add(f"{src.lower()}.{key}", res.stats[src][key])
    r.path("verdicts", v_path)
    r.path("accepted_pairs", a_path)


def cmd_mask_demo(ctx, args):
    mc = ctx.cfg.mask
    layout = segmask.SegmentLayout(mc.n_in, mc.n_emb, mc.n_qa)
    sched = segmask.AnnealSchedule(mc.total_steps, mc.shape)
    mask = segmask.anneal_input_bias(segmask.build_segment_mask(layout), layout, mc.step, sched)
    r = ctx.report
    r.add("n_in", layout.n_in)
    r.add("n_emb", layout.n_emb)
    r.add("n_qa", layout.n_qa)
    r.add("step", mc.step)
    r.add("alpha", sched.alpha(mc.step))
    for i, row in enumerate(mask.to_text().splitlines()):
        r.add(f"row.{i}", row)
    from . import plotting
    ctx.add_figure("mask", plotting.mask_grid, mask, layout)


def _read_ratings(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for rec in reader:
            if not rec or rec[0].strip().lower() in ("user", "user_id", "userid"):
                continue
            rows.append(tuple(rec) if len(rec) == 4 else ("bad",) * 4)
    return rows


def cmd_prep_public(ctx, args):
    cfg, pc = ctx.cfg, ctx.cfg.prep
    res = gsu.prep_public_dataset(_read_ratings(cfg.require_path("ratings")), seed=cfg.seed,
                                  min_len=pc.min_len, positive_rating=pc.positive_rating,
                                  test_fraction=pc.test_fraction, depth=pc.depth)
    index = None
    emb = cfg.path("embeddings")
    if emb is not None and emb.exists():
        index = gsu.CatalogIndex.from_matrix(embedstore.load_embeddings(emb))
    out_dir = cfg.require_path("prep_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    r = ctx.report
    for name, samples in (("train", res.train), ("test", res.test)):
        path = out_dir / f"{name}.jsonl"
        records.write_jsonl(path, ({"user_id": s.user_id, "target": s.target,
                                    "subsequence": gsu.gsu_subsequence(s, index),
                                    "labels": {"ctr": s.label}} for s in samples))
        r.add(f"{name}.samples", len(samples))
        r.add(f"{name}.users", len({s.user_id for s in samples}))
        r.path(name, path)
    r.add("malformed", res.malformed)
    r.add("excluded_short", res.excluded_short)
    r.add("excluded_one_class", res.excluded_one_class)
    r.add("depth", pc.depth)
    r.add("retrieval", "gsu" if index is not None else "recency")


DEMO_CONFIG = {
    "seed": 0,
    "threads": 1,
    "paths": {"embeddings_jsonl": "embeddings.jsonl", "sequences": "sequences.jsonl",
              "sessions": "sessions.jsonl", "meta": "meta.jsonl",
              "train_examples": "train.jsonl", "eval_examples": "test.jsonl",
              "ratings": "ratings.csv"},
    "pca": {"rank": 8},
    "quantizer": {"K": 32, "n_fsq": 6, "L": 1, "max_iters": 50, "fsq_epochs": 5},
    "sid_analyze": {"ks": [1, 10]},
    "gsu": {"k": 20, "per_trigger_k": 50, "n_triggers": 10, "ks": [10, 50, 100]},
    "esu": {"lr": 1.0, "epochs": 30, "batch_size": 32},
    "mask": {"n_in": 5, "n_emb": 2, "n_qa": 3, "total_steps": 10, "step": 4},
}


def cmd_demo_data(ctx, args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = synth.demo_corpus(seed=args.seed)
    records.write_jsonl(out / "embeddings.jsonl",
                        ({"item_id": int(i), "vector": [round(float(x), 6) for x in v]}
                         for i, v in zip(data["ids"], data["vectors"])))
    records.write_sequences(out / "sequences.jsonl", data["sequences"])
    records.write_jsonl(out / "sessions.jsonl",
                        ({"user_id": n, "items": s} for n, s in enumerate(data["sessions"])))
    records.write_jsonl(out / "meta.jsonl", data["meta"])
    records.write_jsonl(out / "train.jsonl", data["train"])
    records.write_jsonl(out / "test.jsonl", data["test"])
    with open(out / "ratings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "rating", "timestamp"])
        w.writerows(data["ratings"])
    cfg_path = out / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(DEMO_CONFIG, sort_keys=False))
    r = Report(out)
    r.add("items", len(data["ids"]))
    r.add("users", len(data["sequences"]))
    r.add("train_examples", len(data["train"]))
    r.add("test_examples", len(data["test"]))
    r.path("config", cfg_path)
    ctx.report = r


COMMANDS = {
    "ingest": (cmd_ingest, "import JSONL embeddings into the binary store"),
    "pca": (cmd_pca, "fit PCA and write reduced embeddings"),
    "quantize-train": (cmd_quantize_train, "train the Res-Kmeans + FSQ quantizer"),
    "quantize-assign": (cmd_quantize_assign, "assign a SID to every catalog item"),
    "sid-analyze": (cmd_sid_analyze, "build the SID edge store and report collisions"),
    "gsu-retrieve": (cmd_gsu_retrieve, "top-k history items for one user and target"),
    "gsu-eval": (cmd_gsu_eval, "pooled trigger retrieval HR@K"),
    "esu-train": (cmd_esu_train, "train the ESU ranker"),
    "esu-eval": (cmd_esu_eval, "score held-out examples with a checkpoint"),
    "pairs-export": (cmd_pairs_export, "export I2I / U2I candidate pairs"),
    "pairs-filter": (cmd_pairs_filter, "filter pairs through the judge"),
    "mask-demo": (cmd_mask_demo, "print a three-segment attention mask"),
    "prep-public": (cmd_prep_public, "prepare a public rating dataset"),
    "demo-data": (cmd_demo_data, "write a small synthetic fixture and config"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", default=argparse.SUPPRESS, help="YAML run config")
    common.add_argument("--set", dest="overrides", action="append", default=argparse.SUPPRESS,
                        metavar="KEY=VALUE", help="override a config value (repeatable)")
    common.add_argument("--figures", default=argparse.SUPPRESS, metavar="DIR",
                        help="also render PNG figures into DIR")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="sidrec", description=__doc__.splitlines()[0],
                                     parents=[common])
    parser.set_defaults(config=None, overrides=[], figures=None, verbose=0)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, parents=[common])
        if name == "gsu-retrieve":
            p.add_argument("--user", type=int, required=True)
            p.add_argument("--target", type=int, required=True)
        if name == "demo-data":
            p.add_argument("out_dir")
            p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config, args.overrides) if args.command != "demo-data" else load_config()
        figures = Path(args.figures) if args.figures else cfg.path("figures")
        ctx = Context(cfg, figures)
        func(ctx, args)
    except ConfigError as exc:
        print(f"sidrec {args.command}: invalid config key {exc.key}: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - every failure becomes a diagnostic
        log.debug("failure detail", exc_info=True)
        print(f"sidrec {args.command}: error: {exc}", file=sys.stderr)
        return 1
    ctx.report.emit()
    return 0


if __name__ == "__main__":
    sys.exit(main())
