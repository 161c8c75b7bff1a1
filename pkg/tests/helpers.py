"""Shared harnesses: gradient checks, small trained models, fast experiment configs."""

import numpy as np

from radlab import corpus as C
from radlab import model as M
from radlab import tensor as T
from radlab.checkpoint import Checkpoint
from radlab.train import StageConfig, run_stage

from oracles import central_difference, rel_error


def grad_check(build, arrays, tol=1e-3):
    """Compare tape gradients of ``build(*tensors)`` with central differences, in float64."""
    with T.precision(np.float64):
        leaves = [T.tensor(a, requires_grad=True) for a in arrays]
        with T.Tape() as tape:
            loss = build(*leaves)
        grads = T.backward(tape, loss)
        for i, a in enumerate(arrays):
            def f(x, i=i):
                args = [T.tensor(x if j == i else arrays[j]) for j in range(len(arrays))]
                return build(*args).item()

            numeric = central_difference(f, a)
            assert rel_error(grads[leaves[i]], numeric) < tol, f"input {i}"


def project(t, seed):
    """Random linear readout to a scalar so every output element matters."""
    r = np.random.default_rng(seed + 100).standard_normal(t.shape)
    return T.sum_all(T.mul(t, T.tensor(r)))


def pairs_from(vocab, reports, src_len=40, tgt_len=16):
    return [(vocab.encode(r.findings)[:src_len], vocab.encode(r.impression)[:tgt_len]) for r in reports]


def trained_small_model(vocab, n_pairs=40, steps=120, seed=0):
    cfg = M.ModelConfig(vocab_size=vocab.vocab_size, d_model=32, n_heads=2, d_ff=64, n_enc_layers=1, n_dec_layers=1,
                        rel_pos_buckets=8, rel_pos_max_distance=32)
    pairs = pairs_from(vocab, C.synth_corpus(seed + 100, "radiology", n_pairs))
    stage = StageConfig(kind="finetune", objective="supervised", max_lr=5e-3, min_lr=5e-3, total_steps=steps,
                        batch_size=8, seed=seed)
    ckpt, _ = run_stage(Checkpoint.initial(cfg, seed), stage, pairs, vocab)
    return ckpt.model(), pairs


FAST_INI = """
[experiment]
seed = 0
seeds = 0
strategies = general-only, +clinical-pretrain, +midtrain
ks = 5 10 20

[corpus]
general_reports = 60
midtrain_reports = 120
finetune_reports = 60

[model]
preset = toy
vocab_size = 300
num_sentinels = 20
d_model = 16
n_heads = 2
d_ff = 32
n_enc_layers = 1
n_dec_layers = 1

[pretrain]
total_steps = 6
batch_size = 8

[midtrain]
epochs = 1
batch_size = 16

[finetune]
epochs = 2
batch_size = 8

[decode]
max_len = 8
eval_limit = 4
"""


def write_fast_config(directory, **experiment):
    text = FAST_INI
    for key, value in experiment.items():
        text = text.replace(f"\n{key} = ", f"\n{key} = {value}\n#", 1)
    path = directory / "fast.ini"
    path.write_text(text)
    return path
