"""End-to-end runs: corpus, pretraining, fine-tuning, evaluation, checkpoints.

The command-line tool and the acceptance experiments both go through these
functions, so a run started from either place is the same computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from . import checkpoint as ckpt_io
from .config import FOLDERS, ConfigError, RunConfig
from .data import (KWS, SV, Loader, load_kws_folder, load_speaker_tree, read_trial_list,
                   synth_dataset)
from .evaluation import classify, compute_eer, score_trial_pairs, top1_accuracy
from .heads import HeadConfig
from .losses import AngularSoftmaxConfig
from .nn import make_rng
from .sre import SREConfig, SREModel
from .trainer import (FROZEN_SRE, NORMAL, PRETRAIN, RANDOM_SRE, MetricsLog, TrainConfig,
                      build_task_head, multitask_train, pretrain)

SRE_PREFIX = "sre"
HEAD_PREFIX = "heads"


class CompatibilityError(ValueError):
    """A checkpoint does not fit the configured model."""


@dataclass
class Corpus:
    kws_train: list
    kws_test: list
    sv_train: list
    trials: list
    keyword_names: list
    speaker_names: list = field(default_factory=list)

    @property
    def n_speakers(self):
        return len(self.speaker_names)


def load_corpus(cfg: RunConfig) -> Corpus:
    data = cfg.data
    if data.source == FOLDERS:
        kws_train, names = load_kws_folder(data.kws_train)
        kws_test, _ = load_kws_folder(data.kws_test, names)
        sv_train, speakers = load_speaker_tree(data.sv_train)
        trials = read_trial_list(data.trials, data.sv_test)
        return Corpus(kws_train, kws_test, sv_train, trials, names, speakers)
    synth = synth_dataset(data.synthetic)
    return Corpus(synth.kws_train, synth.kws_test, synth.sv_train, synth.trials,
                  synth.keyword_names, synth.train_speakers)


# -- model assembly ------------------------------------------------------------------

def build_sre(sre_config: SREConfig, seed):
    return SREModel(sre_config, make_rng(seed, "sre-init"))


def n_classes_for(task, corpus: Corpus):
    return len(corpus.keyword_names) if task == KWS else corpus.n_speakers


def build_heads(cfg: RunConfig, n_classes: dict):
    heads = {}
    for task in cfg.train.tasks:
        spec = cfg.head_for(task)
        if task == KWS and spec.head.n_out != n_classes[KWS]:
            raise ConfigError(
                f"heads[kws].n_out is {spec.head.n_out} but the corpus has {n_classes[KWS]} classes")
        heads[task] = build_task_head(task, cfg.sre.d_model, spec.head, cfg.seed,
                                      n_classes[task], spec.angular_softmax)
    return heads


def task_loaders(cfg: RunConfig, corpus: Corpus):
    data = {KWS: corpus.kws_train, SV: corpus.sv_train}
    return {task: Loader(data[task], cfg.train.batch_sizes[task], cfg.seed, task=task, name=task)
            for task in cfg.train.tasks}


def pretrain_loader(cfg: RunConfig, corpus: Corpus):
    length = int(round(cfg.train.pretrain_seconds * 16000))
    utts = corpus.kws_train + corpus.sv_train
    return Loader(utts, cfg.train.pretrain_batch, cfg.seed, task=PRETRAIN, length=length,
                  name="pretrain")


# -- checkpoints ---------------------------------------------------------------------

def sre_checkpoint(cfg: RunConfig, sre):
    config = {"kind": "sre", "run": cfg.to_dict(), "run_hash": cfg.hash}
    return ckpt_io.Checkpoint(config, ckpt_io.module_tensors(SRE_PREFIX, sre))


def model_checkpoint(cfg: RunConfig, sre, heads, n_classes):
    config = {"kind": "model", "run": cfg.to_dict(), "run_hash": cfg.hash,
              "tasks": {t: {"n_classes": int(n_classes[t])} for t in heads}}
    tensors = ckpt_io.module_tensors(SRE_PREFIX, sre)
    for task, binding in heads.items():
        tensors.update(ckpt_io.module_tensors(f"{HEAD_PREFIX}.{task}", binding))
    return ckpt_io.Checkpoint(config, tensors)


def _sre_dims(sre_dict):
    keys = ("conv_channels", "conv_strides", "conv_kernels", "d_model", "n_layers", "n_heads",
            "ffn_dim", "codebooks", "entries_per_codebook", "code_dim")
    return {k: sre_dict[k] for k in keys}


def checkpoint_sre_config(ckpt):
    try:
        return SREConfig(**ckpt.config["run"]["sre"])
    except (KeyError, TypeError) as exc:
        raise CompatibilityError(f"checkpoint config has no usable 'sre' section ({exc})") from None


def load_sre_into(sre, ckpt):
    """Copy the checkpoint's SRE tensors into ``sre`` after a dims check."""
    theirs = _sre_dims(checkpoint_sre_config(ckpt).to_dict())
    ours = _sre_dims(sre.config.to_dict())
    diffs = [f"{k}: checkpoint {theirs.get(k)!r}, config {ours[k]!r}"
             for k in ours if theirs.get(k) != ours[k]]
    if diffs:
        raise CompatibilityError("checkpoint SRE does not match config.sre: " + "; ".join(diffs))
    try:
        sre.load_state_dict(ckpt.subset(SRE_PREFIX))
    except (KeyError, ValueError) as exc:
        raise CompatibilityError(f"checkpoint SRE tensors do not fit the model: {exc}") from None


def restore_model(ckpt):
    """Rebuild SRE and heads from a self-describing model checkpoint."""
    if ckpt.config.get("kind") != "model":
        raise CompatibilityError("checkpoint holds no task heads (an SRE-only checkpoint?)")
    run = ckpt.config["run"]
    sre = SREModel(checkpoint_sre_config(ckpt), make_rng(0, "restore"))
    sre.load_state_dict(ckpt.subset(SRE_PREFIX))
    heads = {}
    for task, info in ckpt.config["tasks"].items():
        entry = next(h for h in run["heads"] if h["task"] == task)
        entry = {k: v for k, v in entry.items() if k != "task"}
        angular = AngularSoftmaxConfig(**entry.pop("angular_softmax", {}))
        binding = build_task_head(task, run["sre"]["d_model"], HeadConfig(**entry), 0,
                                  info["n_classes"], angular)
        binding.load_state_dict(ckpt.subset(f"{HEAD_PREFIX}.{task}"))
        heads[task] = binding
    return sre, heads


# -- runs ----------------------------------------------------------------------------

def run_pretrain(cfg: RunConfig, corpus: Corpus, log=None, on_step=None):
    sre = build_sre(cfg.sre, cfg.seed)
    log = log if log is not None else MetricsLog()
    pretrain(cfg.train, sre, pretrain_loader(cfg, corpus), cfg.seed, log, on_step)
    return sre, log


def run_finetune(cfg: RunConfig, corpus: Corpus, sre_ckpt=None, ablation=None, log=None,
                 on_update=None):
    """Fine-tune per ``cfg.train``; ``ablation`` overrides ``train.ablation``.

    ``normal`` and ``frozen_sre`` start from ``sre_ckpt``; ``random_sre``
    starts from the seeded random initialisation.
    """
    ablation = ablation or cfg.train.ablation
    train = TrainConfig(**{**cfg.train.to_dict(), "ablation": ablation})
    sre = build_sre(cfg.sre, cfg.seed)
    if ablation in (NORMAL, FROZEN_SRE):
        if sre_ckpt is None:
            raise ConfigError(f"ablation {ablation!r} needs a pretrained SRE checkpoint")
        load_sre_into(sre, sre_ckpt)
    elif ablation != RANDOM_SRE:
        raise ConfigError(f"unknown ablation {ablation!r}")
    n_classes = {t: n_classes_for(t, corpus) for t in train.tasks}
    heads = build_heads(cfg, n_classes)
    log = log if log is not None else MetricsLog()
    multitask_train(train, sre, heads, task_loaders(cfg, corpus), log, on_update)
    return sre, heads, n_classes, log


def evaluate_kws(sre, heads, corpus: Corpus):
    logits = classify(sre, heads[KWS].head, corpus.kws_test)
    return top1_accuracy(logits, [u.label for u in corpus.kws_test])


def evaluate_sv(sre, heads, corpus: Corpus):
    trials = score_trial_pairs(sre, heads[SV].head, corpus.trials)
    return compute_eer(trials), trials


def evaluate(sre, heads, corpus: Corpus, tasks=None):
    tasks = tasks or list(heads)
    out = {}
    if KWS in tasks:
        out["kws_top1"] = evaluate_kws(sre, heads, corpus)
    if SV in tasks:
        out["sv_eer"], _ = evaluate_sv(sre, heads, corpus)
    return out


def default_paths(out):
    out = Path(out)
    return out.with_name(out.name + ".metrics.txt")

