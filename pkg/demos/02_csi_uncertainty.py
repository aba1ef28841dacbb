"""Detection when the receiver only has a noisy channel estimate.

The model-based detectors get one estimate of the taps, h + N(0, 0.1).
The learned detectors are trained on samples where every sample uses its
own noisy tap vector. Testing always uses the true channel. We average over
a few decay profiles at 8 dB.
"""

import neurodetect as nd
from neurodetect import harness

cfg = harness.ExperimentConfig(
    family="isi-awgn",
    detectors=("viterbi", "bcjr", "viterbinet", "bcjrnet"),
    snr_db=(8.0,),
    n_channels=3,
    n_test=10_000,
    sigma_e2=0.1,
    master_seed=11,
)
print("decay profiles:", cfg.gammas())
curve = nd.run_sweep(cfg)
for row in curve.rows:
    print(f"{row.detector:>10s}: SER {row.ser:.4f} +/- {row.stderr:.4f}")

perfect = nd.run_sweep(harness.with_overrides(cfg, sigma_e2=0.0, detectors=("viterbi",)))
print(f"   viterbi with perfect CSI: SER {perfect.rows[0].ser:.4f}")
