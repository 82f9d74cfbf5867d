"""Single-run pipeline: corpus -> task synthesis -> schedule -> training ->
held-out evaluation, all inside one run directory.

The split is at image level so no eval image contributes training examples.
Eval questions are always synthesized with the easy policy: the training
policy is the experimental variable, the probe stays fixed.
"""

from __future__ import annotations

import json
import os
import random
import time

import numpy as np

from . import load_bundled_lexicon
from .config import RunConfig, render_config
from .corpus import ConfigError, load_corpus, synth_corpus
from .evalkit import evaluate, write_predictions
from .mixture import MixtureSpec, ScheduleConfig, build_schedule
from .model import (
    AdamState,
    Model,
    ModelConfig,
    build_vocab,
    load_checkpoint,
    restore_model,
    train,
)
from .tasksynth import (
    SynthConfig,
    TaskKind,
    load_task_file,
    synth_dataset,
    write_task_files,
)

CHECKPOINT = "checkpoint.mpt"
EVAL_REPORT = "eval.json"
CONFIG_ECHO = "config.ini"


def split_image_ids(ids, fraction, seed):
    """Deterministic image-level split -> (train_ids, eval_ids)."""
    ids = sorted(ids)
    n_eval = int(round(len(ids) * fraction))
    if fraction > 0.0:
        n_eval = max(1, min(len(ids) - 1, n_eval))
    rng = random.Random(f"split|{seed}")
    eval_ids = set(rng.sample(ids, n_eval))
    return [i for i in ids if i not in eval_ids], sorted(eval_ids)


def _load_or_synth_corpus(cfg):
    c = cfg.corpus
    if c["source"] == "dir":
        corpus, lexicon = load_corpus(c["dir"])
        if lexicon is None:
            lexicon = load_bundled_lexicon()
        return corpus, lexicon
    corpus = synth_corpus(seed=cfg.seed, n_images=c["n_images"], grid=c["grid"],
                          hidden_rate=c["hidden_rate"], cell=c["cell"])
    return corpus, load_bundled_lexicon()


def _synth_config(cfg, seed):
    t = cfg.tasks
    return SynthConfig(seed=seed, mlm_mask_rate=t["mlm_mask_rate"],
                       mlm_mean_span=t["mlm_mean_span"],
                       yes_no_balance=t["yes_no_balance"], policy=t["policy"])


def _model_config(cfg, vocab_size):
    m = cfg.model
    return ModelConfig(vocab_size=vocab_size, d_model=m["d_model"], n_heads=m["n_heads"],
                       n_encoder_layers=m["n_encoder_layers"],
                       n_decoder_layers=m["n_decoder_layers"], d_ff=m["d_ff"],
                       patch=m["patch"], image_size=cfg.image_size,
                       max_prompt=m["max_prompt"], max_target=m["max_target"])


def run_complete(run_dir, config_text):
    """True when the directory holds a finished run of exactly this config."""
    echo = os.path.join(run_dir, CONFIG_ECHO)
    done = os.path.join(run_dir, EVAL_REPORT)
    if not (os.path.exists(echo) and os.path.exists(done)):
        return False
    with open(echo) as f:
        return f.read() == config_text


def _last_logged_loss(run_dir):
    # resume of an already-finished run trains zero steps; recover the loss
    # from the metrics log instead of clobbering run.json with null
    path = os.path.join(run_dir, "metrics.jsonl")
    last = None
    try:
        with open(path) as f:
            for line in f:
                if line.strip():
                    last = line
    except OSError:
        return None
    return json.loads(last)["loss"] if last else None


def run_training(cfg: RunConfig, resume=False, log=None):
    """Execute one configured run.  Returns a summary dict (also written to
    run.json).  With ``resume``, continues from the run's checkpoint."""
    say = log or (lambda msg: None)
    run_dir = cfg.out
    os.makedirs(run_dir, exist_ok=True)
    t0 = time.time()

    config_text = cfg.source_text or render_config(cfg)
    with open(os.path.join(run_dir, CONFIG_ECHO), "w") as f:
        f.write(config_text)

    corpus, lexicon = _load_or_synth_corpus(cfg)
    train_ids, eval_ids = split_image_ids(corpus.image_ids(), cfg.eval_split, cfg.seed)
    train_corpus = corpus.subset(train_ids)
    eval_corpus = corpus.subset(eval_ids) if eval_ids else None
    say(f"corpus: {len(train_ids)} train / {len(eval_ids)} eval images")

    kinds = [TaskKind(k) for k in cfg.kinds]
    scfg = _synth_config(cfg, cfg.seed)
    tasks_dir = os.path.join(run_dir, "tasks")
    paths = write_task_files(train_corpus, kinds, cfg.tasks["count_per_kind"], scfg,
                             tasks_dir, lexicon=lexicon)
    datasets = {kind.value: load_task_file(paths[kind]) for kind in kinds}
    all_train = [ex for exs in datasets.values() for ex in exs]
    say(f"tasks: {len(all_train)} examples over {len(kinds)} kinds")

    vocab = build_vocab(all_train)
    vocab.save(os.path.join(run_dir, "vocab.json"))
    say(f"vocab: {len(vocab)} tokens")

    mcfg = _model_config(cfg, len(vocab))
    ckpt_path = os.path.join(run_dir, CHECKPOINT)
    start_step = 0
    if resume and os.path.exists(ckpt_path):
        state = load_checkpoint(ckpt_path)
        if state.vocab_fingerprint and state.vocab_fingerprint != vocab.fingerprint():
            raise ConfigError("resume: vocab changed since checkpoint was written")
        model, opt = restore_model(state)
        start_step = state.step
        say(f"resumed at step {start_step}")
    else:
        model = Model(mcfg, seed=cfg.seed)
        opt = AdamState(lr=cfg.train["lr"])

    weights = cfg.weights or None
    spec = MixtureSpec(cfg.kinds, weights) if weights else MixtureSpec.equal(cfg.kinds)
    sched_cfg = ScheduleConfig(total_steps=cfg.schedule["total_steps"],
                               batch_size=cfg.schedule["batch_size"], seed=cfg.seed)
    sizes = {k: len(v) for k, v in datasets.items()}
    schedule = build_schedule(spec, sched_cfg, sizes)

    images = {i: corpus.images[i].pixels for i in train_ids}
    history = train(
        model, schedule, datasets, vocab, opt, images=images, start_step=start_step,
        metrics_path=os.path.join(run_dir, "metrics.jsonl"),
        checkpoint_path=ckpt_path, checkpoint_every=cfg.train["checkpoint_every"],
        vocab_fingerprint=vocab.fingerprint(), corpus_fingerprint=corpus.fingerprint(),
    )
    final_loss = history[-1]["loss"] if history else _last_logged_loss(run_dir)
    say(f"trained {len(history)} steps, final loss {final_loss}")

    summary = {
        "steps": sched_cfg.total_steps,
        "final_loss": final_loss,
        "n_train_images": len(train_ids),
        "n_eval_images": len(eval_ids),
        "kinds": cfg.kinds,
        "policy": cfg.tasks["policy"],
        "seed": cfg.seed,
        "wall_seconds": None,  # filled below; excluded from idempotency checks
    }

    if eval_corpus is not None:
        report = evaluate_run(model, vocab, cfg, eval_corpus, run_dir)
        summary["eval"] = {
            "overall_exact_match": report.overall_exact_match,
            "per_task": report.per_task,
            "hidden_penalties": report.hidden_penalties,
        }
        say(f"eval exact match {report.overall_exact_match:.3f}")

    summary["wall_seconds"] = round(time.time() - t0, 3)
    with open(os.path.join(run_dir, "run.json"), "w") as f:
        json.dump(summary, f, sort_keys=True, indent=2)
    return summary


def eval_questions(cfg, eval_corpus):
    """Probe set on eval images, easy policy.  ``eval_kinds`` makes the probe
    independent of the training mixture, so ablation variants trained on
    different kinds still answer the same questions."""
    probe = SynthConfig(seed=cfg.seed, mlm_mask_rate=cfg.tasks["mlm_mask_rate"],
                        mlm_mean_span=cfg.tasks["mlm_mean_span"],
                        yes_no_balance=cfg.tasks["yes_no_balance"])
    kinds = [TaskKind(k) for k in (cfg.train["eval_kinds"] or cfg.kinds)]
    return list(synth_dataset(eval_corpus, kinds, cfg.train["eval_count_per_kind"], probe))


def evaluate_run(model, vocab, cfg, eval_corpus, run_dir):
    examples = eval_questions(cfg, eval_corpus)
    images = {i: eval_corpus.images[i].pixels for i in eval_corpus.image_ids()}
    report = evaluate(model, vocab, examples, images, corpus=eval_corpus,
                      batch_size=cfg.train["eval_batch"])
    with open(os.path.join(run_dir, EVAL_REPORT), "w") as f:
        f.write(report.to_json())
    write_predictions(os.path.join(run_dir, "predictions.jsonl"),
                      [it["id"] for it in report.items],
                      [it["prediction"] for it in report.items])
    return report


def load_run_report(run_dir):
    with open(os.path.join(run_dir, EVAL_REPORT)) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# gradient diagnostics

def gradcheck_suite(seeds=(0, 1, 2, 3, 4), n_samples=6, include_model=True):
    """Central-difference check of every differentiable kernel op plus a full
    d_model=8 model, in float64.  Returns {case: worst relative error}."""
    from . import nnkernel as K

    def t64(rng, *shape):
        return K.Tensor(rng.normal(size=shape), requires_grad=True)

    def proj(out):
        w = np.random.default_rng(999).normal(size=(out.data.size, 1))
        return K.matmul(K.reshape(out, (1, out.data.size)), K.Tensor(w))

    def causal(n):
        m = np.zeros((n, n))
        m[np.triu_indices(n, k=1)] = K.MASK_NEG
        return m

    def cases(rng):
        a, b = t64(rng, 3, 4), t64(rng, 3, 4)
        yield "add", (lambda: proj(K.add(a, b))), [a, b]
        yield "mul", (lambda: proj(K.mul(a, b))), [a, b]
        yield "scale", (lambda: proj(K.scale(a, -1.7))), [a]
        m1, m2 = t64(rng, 2, 3, 4), t64(rng, 2, 4, 5)
        yield "matmul", (lambda: proj(K.matmul(m1, m2))), [m1, m2]
        r = K.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        r.data += 0.1 * np.sign(r.data)  # keep clear of the relu kink
        yield "relu", (lambda: proj(K.relu(r))), [r]
        s = t64(rng, 2, 6)
        yield "softmax", (lambda: proj(K.softmax(s))), [s]
        x, g, c = t64(rng, 3, 8), t64(rng, 8), t64(rng, 8)
        yield "layer_norm", (lambda: proj(K.layer_norm(x, g, c))), [x, g, c]
        q, k, v = t64(rng, 2, 5, 8), t64(rng, 2, 5, 8), t64(rng, 2, 5, 8)
        mask = causal(5)
        yield "attention", (lambda: proj(K.attention(q, k, v, mask=mask))), [q, k, v]
        img = K.Tensor(rng.uniform(size=(2, 8, 8, 3)), requires_grad=True)
        kern = t64(rng, 48, 6)
        yield "conv_patchify", (lambda: proj(K.conv_patchify(img, kern, 4))), [img, kern]
        table = t64(rng, 9, 5)
        ids = rng.integers(0, 9, size=(2, 6))
        yield "embedding", (lambda: proj(K.embedding(table, ids))), [table]
        c1, c2 = t64(rng, 2, 3, 4), t64(rng, 2, 2, 4)
        yield "concat_transpose_reshape", (lambda: proj(
            K.reshape(K.transpose(K.concat([c1, c2], axis=1), (0, 2, 1)), (2, 20)))), [c1, c2]
        logits = t64(rng, 2, 4, 7)
        targets = rng.integers(0, 7, size=(2, 4))
        lmask = np.ones((2, 4))
        lmask[0, 3] = 0.0
        yield "cross_entropy", (lambda: K.cross_entropy_masked(logits, targets, lmask)), [logits]

    worst = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, make_loss, leaves in cases(rng):
            err = K.finite_difference_check(make_loss, leaves, n_samples=n_samples, seed=seed)
            worst[name] = max(worst.get(name, 0.0), err)

    if include_model:
        cfg = ModelConfig(vocab_size=24, d_model=8, n_heads=2, n_encoder_layers=2,
                          n_decoder_layers=2, d_ff=16, patch=4, image_size=8,
                          max_prompt=6, max_target=5)
        for seed in seeds:
            rng = np.random.default_rng(seed)
            model = Model(cfg, seed=seed, dtype=np.float64)
            images = rng.uniform(size=(2, 8, 8, 3))
            prompts = rng.integers(3, 24, size=(2, 6))
            targets = rng.integers(3, 24, size=(2, 5))

            def make_loss():
                return model.forward(images, prompts, targets)[1]

            leaves = [p.value for p in model.parameters()]
            err = K.finite_difference_check(make_loss, leaves, n_samples=2, seed=seed,
                                            h_fallback=1e-7)
            worst["model_d8"] = max(worst.get("model_d8", 0.0), err)
    return worst
