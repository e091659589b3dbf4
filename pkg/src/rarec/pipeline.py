"""File-based pipeline stages shared by the CLI and the test suite.

Each stage reads what earlier stages wrote into ``cfg.run.out`` and writes
its own artifacts there:

    generate         corpus.jsonl
    pretrain         id_model.{manifest,bin}, item_map.tsv
    build-align-set  align_set-<mode>.jsonl, align_set-<mode>.report
    train-align      encoder.{manifest,bin}, align-<name>.{manifest,bin}, loss-<name>.tsv
    eval             metrics-<name>.txt
    export           export-<name>/*.tsv

Every stage also writes ``config.effective.ini``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data
from . import evaluation as ev
from .alignment import (AlignedModel, AlignmentHyperparams, AlignmentParams, IdOnlyModel,
                        TextOnlyModel, TrainingResult, plain_pooled, train_alignment,
                        trainable_parameter_count)
from .config import RunConfig, stage_seed
from .encoder import HASH_FUNCTION_ID, Encoder, EncoderConfig, EncoderWeights, warm_up
from .id_model import IdEmbeddings, IdModelConfig, train_id_model
from .numerics import Tensor

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


def out_dir(cfg: RunConfig) -> Path:
    p = Path(cfg.run.out)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PipelineError(f"cannot create output directory {p}: {exc.strerror}") from None
    return p


def echo_config(cfg: RunConfig) -> Path:
    path = out_dir(cfg) / "config.effective.ini"
    cfg.write(path)
    return path


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing {what}: {path} (run the earlier stage first)")
    return path


# ---------------------------------------------------------------------------
# generate


def cmd_generate(cfg: RunConfig) -> str:
    s = cfg.synthetic
    if s.num_users < 1:
        raise data.DataError("synthetic.num_users must be >= 1")
    corpus = data.generate_synthetic(s.num_users, s.num_items, s.num_clusters, s.interactions_per_user,
                                     s.vocab_per_cluster, stage_seed(cfg.run.seed, "generate"),
                                     in_cluster_rate=s.in_cluster_rate, favourite_rate=s.favourite_rate)
    out = out_dir(cfg)
    echo_config(cfg)
    data.write_jsonl(out / "corpus.jsonl", (r.to_record() for r in corpus.interactions))
    users = len(corpus.user_cluster)
    return (f"generated interactions={len(corpus.interactions)} users={users} items={s.num_items} "
            f"clusters={s.num_clusters} path={out / 'corpus.jsonl'}")


# ---------------------------------------------------------------------------
# shared loading


def load_split(cfg: RunConfig) -> data.SplitDataset:
    path = Path(cfg.data.path) if cfg.data.path else Path(cfg.run.out) / "corpus.jsonl"
    raw = data.load_interactions(_require(path, "interaction file"))
    return data.leave_one_out_split(data.preprocess(raw))


def id_model_config(cfg: RunConfig) -> IdModelConfig:
    c = cfg.id_model
    return IdModelConfig(c.embedding_dim, c.num_epochs, c.batch_size, c.negatives_per_positive,
                         c.learning_rate, c.weight_decay, c.interest_count, c.heldout_fraction,
                         stage_seed(cfg.run.seed, "pretrain"))


def encoder_config(cfg: RunConfig) -> EncoderConfig:
    c = cfg.encoder
    return EncoderConfig(c.num_layers, c.hidden_dim, c.num_heads, c.ffn_dim, c.vocab_size,
                         c.max_sequence_length, stage_seed(cfg.run.seed, "encoder"), c.output_init_scale)


def hyperparams(cfg: RunConfig) -> AlignmentHyperparams:
    a, o = cfg.alignment, cfg.optimizer
    return AlignmentHyperparams(tau=a.tau, lam=a.lam, lam_theta=a.lam_theta, batch_size=a.batch_size,
                                variant=a.variant, prefix_len=a.prefix_len, steps=a.steps, lr=o.lr,
                                weight_decay=o.weight_decay, beta1=o.beta1, beta2=o.beta2,
                                max_history=a.max_history, rng_seed=stage_seed(cfg.run.seed, "align_train"))


def _round32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def load_id_model(cfg: RunConfig) -> IdEmbeddings:
    c = ckpt.load(_require(Path(cfg.run.out) / "id_model.manifest", "ID-model checkpoint"))
    t = c.component("id")
    return IdEmbeddings(t["item_table"], t["pool.w"], t["pool.b"], t["pool.v"]).freeze()


# ---------------------------------------------------------------------------
# pretrain


def cmd_pretrain(cfg: RunConfig) -> str:
    split = load_split(cfg)
    out = out_dir(cfg)
    echo_config(cfg)
    model = train_id_model(split.train, split.dataset.num_items, id_model_config(cfg))
    tensors = {f"id/{k}": v.data for k, v in model.params.items()}
    ckpt.save(out / "id_model", tensors, seed=cfg.run.seed,
              meta={"embedding_dim": cfg.id_model.embedding_dim, "num_items": split.dataset.num_items})
    ckpt.write_item_map(out / "item_map.tsv", split.dataset.item_ids)
    lg = model.log
    return (f"pretrained items={split.dataset.num_items} users={split.dataset.num_users} "
            f"epoch_losses={','.join(f'{x:.4f}' for x in lg.epoch_losses)} "
            f"heldout_before={lg.heldout_before:.4f} heldout_after={lg.heldout_after:.4f}")


# ---------------------------------------------------------------------------
# align set


def align_set_path(cfg: RunConfig) -> Path:
    return Path(cfg.run.out) / f"align_set-{cfg.alignment.mode}.jsonl"


def build_align_set(cfg: RunConfig, split: data.SplitDataset) -> data.EfficientSet:
    a = cfg.alignment
    pool_size = sum(max(0, len(s) - 1) for s in split.train)
    n = max(1, int(round(a.set_fraction * pool_size)))
    return data.build_efficient_set(split, n, stage_seed(cfg.run.seed, "align_set"), mode=a.mode,
                                    user_buckets=a.user_buckets, item_buckets=a.item_buckets)


def cmd_build_align_set(cfg: RunConfig) -> str:
    split = load_split(cfg)
    out = out_dir(cfg)
    echo_config(cfg)
    es = build_align_set(cfg, split)
    path = align_set_path(cfg)
    data.write_jsonl(path, data.align_set_records(split, es.samples))
    lines = [f"mode {es.mode}", f"pool {es.pool_size}", f"denoised {es.denoised_size}",
             f"n {len(es.samples)}"]
    for (bu, bi), count in sorted(es.report.allocation.items()):
        lines.append(f"cell {bu} {bi} available {es.report.cells[(bu, bi)]} allocated {count}")
    report = "\n".join(lines)
    path.with_suffix(".report").write_text(report + "\n")
    return report


def load_align_set(cfg: RunConfig, split: data.SplitDataset) -> list[data.TrainingSample]:
    records = data.load_interactions(_require(align_set_path(cfg), "align set"))
    return data.samples_from_records(split, [r.to_record() for r in records],
                                     stage_seed(cfg.run.seed, "align_set"))


# ---------------------------------------------------------------------------
# encoder


def _encoder_meta(cfg: RunConfig) -> dict[str, object]:
    meta = {f"encoder.{k}": v for k, v in asdict(cfg.encoder).items()}
    meta["hash_function"] = HASH_FUNCTION_ID
    return meta


def build_encoder(cfg: RunConfig, titles) -> Encoder:
    """Initialise, optionally warm on item titles, round to float32 and save.

    An existing encoder checkpoint with matching settings is reused.
    """
    out = out_dir(cfg)
    stem = out / "encoder"
    meta = {k: str(v) for k, v in _encoder_meta(cfg).items()}
    if ckpt.paths(stem)[0].exists():
        c = ckpt.load(stem)
        if c.seed == cfg.run.seed and all(c.meta.get(k) == v for k, v in meta.items()):
            return encoder_from_checkpoint(c, encoder_config(cfg))
    weights = EncoderWeights.initialize(encoder_config(cfg))
    warm_up(weights, list(titles), cfg.encoder.warmup_steps, lr=cfg.encoder.warmup_lr,
            seed=stage_seed(cfg.run.seed, "encoder"))
    for t in weights.tensors.values():
        t.data = _round32(t.data)
    ckpt.save(stem, {f"encoder/{k}": t.data for k, t in weights.tensors.items()},
              seed=cfg.run.seed, meta=meta)
    return Encoder(weights)


def encoder_from_checkpoint(c: ckpt.Checkpoint, config: EncoderConfig) -> Encoder:
    tensors = {k: Tensor(v, name=k) for k, v in c.component("encoder").items()}
    return Encoder(EncoderWeights(config, tensors))


def load_encoder(cfg: RunConfig) -> Encoder:
    c = ckpt.load(_require(Path(cfg.run.out) / "encoder.manifest", "encoder checkpoint"))
    return encoder_from_checkpoint(c, encoder_config(cfg))


# ---------------------------------------------------------------------------
# train-align


@dataclass
class AlignRun:
    model: AlignedModel
    result: TrainingResult
    encoder_checksum: tuple[str, str]  # before, after
    id_checksum: tuple[str, str]
    split: data.SplitDataset


def holdout_samples(split: data.SplitDataset, size: int, seed: int) -> list[data.TrainingSample]:
    """(train sequence -> validation item) pairs for a fixed user sample; never in the tuning pool."""
    rng = np.random.default_rng(seed)
    users = np.sort(rng.permutation(split.dataset.num_users)[:size])
    return [data.TrainingSample(int(u), tuple(split.train[u]), split.val[u]) for u in users]


def train_align(cfg: RunConfig) -> AlignRun:
    split = load_split(cfg)
    samples = load_align_set(cfg, split)
    idm = load_id_model(cfg)
    encoder = build_encoder(cfg, split.dataset.titles)
    echo_config(cfg)
    hp = hyperparams(cfg)
    params = AlignmentParams.initialize(hp.variant, encoder.num_layers, idm.dim, encoder.hidden_dim,
                                        hp.prefix_len, stage_seed(cfg.run.seed, "align_init"))
    model = AlignedModel(encoder, idm, params, split.dataset.titles, max_history=hp.max_history)
    enc_before, id_before = encoder.weights.checksum(), idm.checksum()
    seen = [set(s) for s in split.train]
    holdout = holdout_samples(split, cfg.alignment.holdout_size, stage_seed(cfg.run.seed, "align_train"))
    result = train_alignment(model, samples, hp, seen=seen, holdout=holdout)
    out = Path(cfg.run.out)
    name = cfg.run_name
    ckpt.save(out / f"align-{name}", {f"align/{k}": t.data for k, t in params.tensors.items()},
              seed=cfg.run.seed, meta=_align_meta(params))
    (out / f"loss-{name}.tsv").write_text("".join(line + "\n" for line in result.loss_log_lines()))
    return AlignRun(model, result, (enc_before, encoder.weights.checksum()),
                    (id_before, idm.checksum()), split)


def _align_meta(params: AlignmentParams) -> dict[str, object]:
    return {"variant": params.variant, "num_layers": params.num_layers, "id_dim": params.id_dim,
            "hidden_dim": params.hidden_dim, "prefix_len": params.prefix_len}


def cmd_train_align(cfg: RunConfig) -> str:
    run = train_align(cfg)
    p = run.model.params
    r = run.result
    first = np.mean([x.total for x in r.history[:50]])
    last = np.mean([x.total for x in r.history[-50:]])
    lines = [f"variant={p.variant} trainable_parameters={p.num_parameters()}"]
    if p.variant == "full":
        lines[0] += f" closed_form={trainable_parameter_count(p.num_layers, p.id_dim, p.hidden_dim, p.prefix_len)}"
    lines.append(f"steps={len(r.history)} first50_total={first:.4f} last50_total={last:.4f}")
    if cfg.alignment.lam == 0:
        lines.append("lam=0: L_ua/L_ia are logged for monitoring only")
    lines.append(f"alignment_cosine before={r.cosine_before:.4f} after={r.cosine_after:.4f}")
    lines.append(f"frozen encoder checksum {run.encoder_checksum[1]} unchanged")
    lines.append(f"frozen id checksum {run.id_checksum[1]} unchanged")
    return "\n".join(lines)


def load_aligned_model(cfg: RunConfig, split: data.SplitDataset | None = None) -> AlignedModel:
    split = split or load_split(cfg)
    idm = load_id_model(cfg)
    encoder = load_encoder(cfg)
    c = ckpt.load(_require(Path(cfg.run.out) / f"align-{cfg.run_name}.manifest", "alignment checkpoint"))
    m = c.meta
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in c.component("align").items()}
    params = AlignmentParams(tensors, m["variant"], int(m["num_layers"]), int(m["id_dim"]),
                             int(m["hidden_dim"]), int(m["prefix_len"]))
    return AlignedModel(encoder, idm, params, split.dataset.titles, max_history=cfg.alignment.max_history)


# ---------------------------------------------------------------------------
# eval


@dataclass
class EvalResult:
    rarec: ev.MetricsReport
    text: ev.MetricsReport
    id_only: ev.MetricsReport
    vs_text: ev.Comparison
    vs_id: ev.Comparison


def evaluate_run(cfg: RunConfig) -> EvalResult:
    split = load_split(cfg)
    model = load_aligned_model(cfg, split)
    ks = cfg.eval.k_values()
    excl = cfg.eval.exclude_seen
    lengths = [len(split.history_for_test(u)) for u in range(split.dataset.num_users)]
    ra = ev.evaluate(model, split, ks, exclude_seen=excl)
    tx = ev.evaluate(TextOnlyModel(model.encoder, split.dataset.titles, cfg.alignment.max_history),
                     split, ks, exclude_seen=excl)
    io = ev.evaluate(IdOnlyModel(model.id_embeddings), split, ks, exclude_seen=excl)
    edges = cfg.eval.edges()
    return EvalResult(ra, tx, io, ev.compare_reports(ra, tx, lengths, edges, ks),
                      ev.compare_reports(ra, io, lengths, edges, ks))


def cmd_eval(cfg: RunConfig) -> str:
    res = evaluate_run(cfg)
    echo_config(cfg)
    text = "\n".join([
        f"rarec {res.rarec.record()}",
        f"text {res.text.record()}",
        f"id {res.id_only.record()}",
        "",
        "aligned model vs hard-prompt baseline",
        res.vs_text.table("rarec", "text"),
        "",
        "aligned model vs ID model",
        res.vs_id.table("rarec", "id"),
    ])
    (Path(cfg.run.out) / f"metrics-{cfg.run_name}.txt").write_text(text + "\n")
    return text


# ---------------------------------------------------------------------------
# export


def fmt32(x: float) -> str:
    """Shortest decimal string that reads back to the same float32."""
    return np.format_float_positional(np.float32(x), unique=True, trim="-")


def write_matrix(path: Path, source: str, side: str, layer: int | None, entities, matrix: np.ndarray) -> None:
    m = np.asarray(matrix, dtype=np.float32)
    header = ["source", "side", "layer", "entity"] + [f"v{k}" for k in range(m.shape[1])]
    lines = ["\t".join(header)]
    lay = "-" if layer is None else str(layer)
    for ent, row in zip(entities, m):
        lines.append("\t".join([source, side, lay, ent] + [fmt32(x) for x in row]))
    path.write_text("\n".join(lines) + "\n")


def read_matrix(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Labels column and float32 matrix of an exported file."""
    rows = Path(path).read_text().splitlines()[1:]
    labels = [r.split("\t", 1)[0] for r in rows]
    values = np.array([[np.float32(x) for x in r.split("\t")[4:]] for r in rows], dtype=np.float32)
    return labels, values


def cmd_export(cfg: RunConfig) -> str:
    split = load_split(cfg)
    model = load_aligned_model(cfg, split)
    echo_config(cfg)
    n = cfg.eval.export_samples
    rng = np.random.default_rng(stage_seed(cfg.run.seed, "export"))
    users = np.sort(rng.permutation(split.dataset.num_users)[:n])
    items = np.sort(rng.permutation(split.dataset.num_items)[:n])
    hists = [split.history_for_test(int(u)) for u in users]
    ds = split.dataset
    target = Path(cfg.run.out) / f"export-{cfg.run_name}"
    target.mkdir(parents=True, exist_ok=True)
    L = model.encoder.num_layers
    written = []
    sides = (("user", [ds.user_ids[u] for u in users], model.encode_users(hists),
              model.id_embeddings.user_embeddings(hists),
              plain_pooled(model.encoder, [model.user_tokens(h) for h in hists])),
             ("item", [ds.item_ids[i] for i in items], model.encode_items(items),
              model.id_embeddings.item_table[items],
              plain_pooled(model.encoder, [model.item_tokens[i] for i in items])))
    for side, names, enc, ids, plain in sides:
        files = [(f"{side}_id.tsv", "id", None, ids)]
        for l in range(1, L + 1):
            files.append((f"{side}_text_l{l}.tsv", "text", l, plain[:, l]))
            files.append((f"{side}_aligned_l{l}.tsv", "aligned", l, enc.aligned[l - 1].data))
        for fname, source, layer, mat in files:
            write_matrix(target / fname, source, side, layer, names, mat)
            written.append(fname)
    return f"exported {len(written)} files with {len(users)} user rows / {len(items)} item rows each to {target}"
