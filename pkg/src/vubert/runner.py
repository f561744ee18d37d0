"""Run orchestration shared by the command line and the acceptance suite.

A run is fully determined by a :class:`RunConfig`: data preparation, model
initialization, batch order, masking and dropout all derive from seeds in the
config, and nothing time- or host-dependent is written to any artifact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from vubert.checkpoint import load_tensors, save_tensors
from vubert.config import RunConfig
from vubert.data import DialogInstance, batch_iter, generate_synthetic, load_visdial, strip_image, truncate_history
from vubert.embeddings import Vocab
from vubert.errors import ContractError
from vubert.metrics import RankMetrics, aggregate, format_report, rank_split, report_record
from vubert.model import ModelConfig, VUBert
from vubert.objectives import CandidateCache, LossWeights, train_step
from vubert.optim import AdamState

EVAL_SEED_OFFSET = 10_007  # synthetic eval corpus seed = synth_seed + offset


# ---------------------------------------------------------------- data

def apply_ablation(instances: Sequence[DialogInstance], cfg: RunConfig) -> list[DialogInstance]:
    out = list(instances)
    if cfg.ablation.max_turns >= 0:
        out = [truncate_history(i, cfg.ablation.max_turns) for i in out]
    if not cfg.ablation.use_image:
        out = [strip_image(i) for i in out]
    return out


def load_split(cfg: RunConfig, split: str) -> list[DialogInstance]:
    """Raw (un-ablated) instances of ``split``: the configured train or eval split."""
    d = cfg.data
    if split not in (d.train_split, d.eval_split):
        raise ContractError(f"unknown split {split!r}; configured splits are {d.train_split!r} and {d.eval_split!r}")
    limit = d.n_train if split == d.train_split else d.n_eval
    if d.source == "synthetic":
        seed = d.synth_seed if split == d.train_split else d.synth_seed + EVAL_SEED_OFFSET
        return generate_synthetic(seed, limit, d.turns, d.n_candidates, d.image_size, cfg.model.patch,
                                  d.image_fraction, d.shapes)
    instances = load_visdial(d.source, split)
    return instances[:limit] if limit else instances


def vocab_texts(instances: Sequence[DialogInstance]):
    for inst in instances:
        yield inst.caption
        yield from inst.history
        yield inst.question
        yield from inst.candidates


def build_vocab(cfg: RunConfig) -> Vocab:
    """Vocabulary over every text of both configured splits, train first."""
    return Vocab.build(vocab_texts(load_split(cfg, cfg.data.train_split) + load_split(cfg, cfg.data.eval_split)))


# ---------------------------------------------------------------- checkpoints

def checkpoint_metadata(cfg: RunConfig, model: VUBert, state: AdamState, epoch: int) -> dict:
    return {
        "config": cfg.to_dict(), "config_hash": cfg.hash(), "model_hash": cfg.model_hash(),
        "epoch": epoch, "step": state.step, "vocab": model.vocab.itos[7:],
        "adam": {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
    }


def save_checkpoint(path: str | os.PathLike, cfg: RunConfig, model: VUBert, state: AdamState, epoch: int) -> None:
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    for name in model.named_params():
        if name in state.m:
            tensors[f"adam.m/{name}"] = state.m[name]
            tensors[f"adam.v/{name}"] = state.v[name]
    save_tensors(path, tensors, checkpoint_metadata(cfg, model, state, epoch))


def load_checkpoint(path: str | os.PathLike) -> tuple[VUBert, AdamState, dict]:
    tensors, meta = load_tensors(path)
    model_cfg = ModelConfig(**meta["config"]["model"])
    model = VUBert(model_cfg, Vocab(meta["vocab"]), np.random.default_rng(0))
    model.load_state_dict({k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")})
    state = AdamState(**meta["adam"], step=meta["step"])
    for k, v in tensors.items():
        if k.startswith("adam.m/"):
            state.m[k[len("adam.m/"):]] = v
        elif k.startswith("adam.v/"):
            state.v[k[len("adam.v/"):]] = v
    return model, state, meta


def check_compatible(meta: dict, cfg: RunConfig) -> None:
    """Refuse a checkpoint whose model section does not match ``cfg``."""
    if meta.get("model_hash") != cfg.model_hash():
        theirs = meta.get("config", {}).get("model", {})
        ours = cfg.to_dict()["model"]
        diff = ", ".join(f"model.{k}: checkpoint={theirs.get(k)!r} config={ours[k]!r}"
                         for k in ours if theirs.get(k) != ours[k])
        raise ContractError(f"checkpoint model hash {meta.get('model_hash')} does not match config model hash "
                            f"{cfg.model_hash()} ({diff or 'unknown difference'})")


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: VUBert
    state: AdamState
    losses: list[float] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def train(cfg: RunConfig, out_dir: str | os.PathLike | None = None,
          train_data: Sequence[DialogInstance] | None = None, eval_data: Sequence[DialogInstance] | None = None,
          vocab: Vocab | None = None, log: Callable[[str], None] | None = None) -> TrainResult:
    """Train from scratch under ``cfg``; checkpoint and log into ``out_dir`` when given.

    A checkpoint is written after initialization and after every epoch, so a
    failing run always leaves the last good state behind.
    """
    cfg.validate()
    t = cfg.train
    if train_data is None:
        train_data = load_split(cfg, cfg.data.train_split)
    if eval_data is None:
        eval_data = load_split(cfg, cfg.data.eval_split)
    if vocab is None:
        vocab = Vocab.build(vocab_texts(list(train_data) + list(eval_data)))
    train_data = apply_ablation(train_data, cfg)
    eval_data = apply_ablation(eval_data, cfg)

    model = VUBert(cfg.model, vocab, np.random.default_rng([t.seed, 0]))
    state = AdamState(lr=t.lr)
    rng = np.random.default_rng([t.seed, 1])
    weights = LossWeights(t.alpha, t.beta)
    result = TrainResult(model, state)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = out / "model.ckpt"
        save_checkpoint(result.checkpoint, cfg, model, state, 0)
        (out / "config.txt").write_text(f"# config_hash = {cfg.hash()}\n" + cfg.to_text(), encoding="utf-8")
        log_file = open(out / "train_log.jsonl", "w", encoding="utf-8")
    else:
        log_file = None

    try:
        for epoch in range(1, t.epochs + 1):
            if t.max_steps and state.step >= t.max_steps:
                break
            epoch_losses = []
            for batch in batch_iter(train_data, t.batch, shuffle_seed=t.seed * 100_003 + epoch):
                if t.max_steps and state.step >= t.max_steps:
                    break
                loss, _ = train_step(batch, model, weights, state, rng, t.mlm_rate, t.negatives, t.random_replace,
                                     answer_rate=t.answer_mask_rate if t.answer_mask_rate >= 0 else None)
                epoch_losses.append(loss)
            result.losses += epoch_losses
            record = {"config_hash": cfg.hash(), "epoch": epoch, "step": state.step,
                      "loss": float(np.mean(epoch_losses)) if epoch_losses else None}
            if t.eval_every and eval_data and epoch % t.eval_every == 0:
                record["eval"] = evaluate(model, eval_data).as_dict()
            result.records.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
                save_checkpoint(result.checkpoint, cfg, model, state, epoch)
            if log is not None:
                log(" ".join(f"{k}={v}" for k, v in record.items() if k != "eval")
                    + (f" eval_mrr={record['eval']['mrr']:.4f}" if "eval" in record else ""))
    finally:
        if log_file is not None:
            log_file.close()
    return result


# ---------------------------------------------------------------- evaluation

def evaluate(model: VUBert, instances: Sequence[DialogInstance], cache: CandidateCache | None = None,
             mode: str = "discriminative") -> RankMetrics:
    """Aggregate metrics plus per-kind breakdowns for instances tagged with ``meta['kind']``."""
    results = rank_split(model, instances, cache, mode)
    metrics = aggregate(results)
    kinds = sorted({i.meta.get("kind") for i in instances if i.meta.get("kind")})
    for kind in kinds:
        sub = [r for r, i in zip(results, instances) if i.meta.get("kind") == kind]
        for key, value in aggregate(sub).as_dict().items():
            metrics.extra[f"{kind}/{key}"] = value
    return metrics


@dataclass
class EvalReport:
    metrics: RankMetrics
    text: str
    record: str


def evaluate_checkpoint(checkpoint: str | os.PathLike, cfg: RunConfig, split: str, mode: str = "discriminative",
                        cache_path: str | os.PathLike | None = None) -> EvalReport:
    model, _, meta = load_checkpoint(checkpoint)
    check_compatible(meta, cfg)
    instances = apply_ablation(load_split(cfg, split), cfg)
    cache = None
    if cache_path is not None:
        cache_path = Path(cache_path)
        cache = CandidateCache.load(cache_path) if cache_path.exists() else CandidateCache()
        cache.populate([c for i in instances for c in i.candidates], model)
        cache.save(cache_path, {"model_hash": meta["model_hash"], "checkpoint_step": meta["step"]})
    metrics = evaluate(model, instances, cache, mode)
    header = {"config_hash": cfg.hash(), "model_hash": meta["model_hash"], "checkpoint_config_hash":
              meta["config_hash"], "checkpoint_step": meta["step"], "split": split, "mode": mode}
    return EvalReport(metrics, format_report(metrics, header),
                      report_record(metrics, cfg.hash(), split, mode=mode, model_hash=meta["model_hash"],
                                    checkpoint_config_hash=meta["config_hash"], checkpoint_step=meta["step"]))


# ---------------------------------------------------------------- ablation grid

@dataclass
class AblationCell:
    turns: int
    use_image: bool

    @property
    def name(self) -> str:
        return f"turns={self.turns},vis={int(self.use_image)}"


def ablation_config(cfg: RunConfig, cell: AblationCell) -> RunConfig:
    return cfg.with_overrides({"ablation.max_turns": cell.turns, "ablation.use_image": cell.use_image})


def run_ablation(cfg: RunConfig, cells: Sequence[AblationCell], out_dir: str | os.PathLike | None = None,
                 log: Callable[[str], None] | None = None) -> tuple[list[tuple[str, str, object]], list[str]]:
    """Train and evaluate one fresh model per cell; returns ``(rows, failures)``.

    Rows are ``(condition, metric, value)``. A failing cell is reported and
    the sweep moves on.
    """
    rows: list[tuple[str, str, object]] = []
    failures: list[str] = []
    raw_train = load_split(cfg, cfg.data.train_split)
    raw_eval = load_split(cfg, cfg.data.eval_split)
    vocab = Vocab.build(vocab_texts(raw_train + raw_eval))
    for cell in cells:
        cell_cfg = ablation_config(cfg, cell)
        cell_dir = Path(out_dir) / cell.name.replace(",", "_") if out_dir is not None else None
        try:
            cell_cfg.validate()
            if log is not None:
                log(f"cell {cell.name} config_hash={cell_cfg.hash()}")
            res = train(cell_cfg, cell_dir, raw_train, raw_eval, vocab, log)
            metrics = evaluate(res.model, apply_ablation(raw_eval, cell_cfg))
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
            failures.append(f"{cell.name}: {type(exc).__name__}: {exc}")
            rows.append((cell.name, "error", f"{type(exc).__name__}: {exc}"))
            continue
        rows.append((cell.name, "config_hash", cell_cfg.hash()))
        for key, value in metrics.as_dict().items():
            rows.append((cell.name, key, value))
    return rows, failures


def format_table(rows: Sequence[tuple[str, str, object]], config_hash: str) -> str:
    lines = [f"# config_hash={config_hash}", "condition\tmetric\tvalue"]
    for cond, metric, value in rows:
        lines.append(f"{cond}\t{metric}\t{float(value)!r}" if isinstance(value, float) else f"{cond}\t{metric}\t{value}")
    return "\n".join(lines) + "\n"
