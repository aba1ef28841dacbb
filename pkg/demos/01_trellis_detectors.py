"""Viterbi, BCJR and their learned counterparts on one ISI channel.

We build an l=4 ISI channel with exponentially decaying taps and BPSK
inputs. Then we train a likelihood model on 5000 labelled samples. The
Viterbi and BCJR recursions run twice: once with the true channel
likelihood, once with the learned one.
"""

import numpy as np

import neurodetect as nd
from neurodetect import detect_model as dm
from neurodetect import nn

gamma, snr_db = 0.5, 6.0
ch = nd.FiniteMemoryChannel("awgn", nd.make_decay_vector(gamma, 4), 10 ** (snr_db / 10))
print("taps:", np.round(ch.h, 4))

# Training and test data come from different streams of the same master seed.
train = nd.generate_dataset(ch, 5000, nd.RngStream(0, 1))
test = nd.generate_dataset(ch, 20_000, nd.RngStream(0, 2))
truth = test.labels[:, 0]

# The learned model is an MLP for p(state | y) plus a 16-component mixture for p(y).
history = []
model = nd.train_likelihood_model(train, l=4, m=2, cfg=nn.TrainConfig(), history=history)
print(f"classifier loss: first epoch {history[0]:.3f}, last epoch {history[-1]:.3f}")

# Detection runs in blocks of 1000, as in the sweep harness.
blocks = np.split(test.observations, 20)


def run(detect):
    return np.concatenate([detect(y) for y in blocks])


results = {
    "viterbi": run(lambda y: nd.viterbi(y, nd.exact_cost(ch), 4, 2)),
    "viterbi (sequential)": run(lambda y: nd.viterbi(y, nd.exact_cost(ch), 4, 2, "sequential")),
    "bcjr": run(lambda y: np.argmax(nd.bcjr(y, nd.exact_function_node(ch), 4, 2), axis=1)),
    "viterbinet": run(lambda y: nd.viterbinet_detect(model, y)),
    "bcjrnet": run(lambda y: nd.bcjrnet_detect(model, y)),
}
for name, decided in results.items():
    print(f"{name:>22s}: SER {nd.ser(decided, truth):.4f}")

# With the exact posterior and marginal plugged in, the learned pipeline
# reproduces the model-based detectors exactly.
oracle = nd.AnalyticLikelihoodModel(ch)
y0 = blocks[0]
same = np.array_equal(nd.viterbinet_detect(oracle, y0), dm.viterbi(y0, dm.exact_cost(ch), 4, 2))
print("analytic plug-in reproduces viterbi:", same)
