"""Seeded learning tasks shared by unit and acceptance tests."""

import numpy as np

from scod.spiking import encode_rate, lif_run, low_pass_trace, spike_train_update, train_disagreement

N_INPUTS = 8
STEPS = 64


def single_neuron_task(seed, iterations=100, lr=0.02, v_th=1.0, sign=1.0):
    """One integrate-and-fire neuron with 8 phase-coded inputs learns a periodic target train.

    Input ``i`` fires whenever ``t % 8`` equals its phase; the target fires
    periodically at rate ``k / 8``. Returns ``(initial, final)`` disagreement.
    ``sign=-1`` applies the update with the opposite sign.
    """
    rng = np.random.default_rng(seed)
    phases = rng.permutation(N_INPUTS)
    t = np.arange(STEPS)[:, None]
    inputs = (t % N_INPUTS == phases[None, :]).astype(np.uint8)
    target = encode_rate(np.array([rng.integers(1, 5) / N_INPUTS]), STEPS)[:, 0]
    w = rng.uniform(0.0, 0.3, size=N_INPUTS)
    trace = low_pass_trace(inputs)

    def run(weights):
        return lif_run((inputs @ weights)[:, None], v_th)[0][:, 0]

    initial = train_disagreement(target, run(w))
    for _ in range(iterations):
        w = spike_train_update(w, target, run(w), trace, sign * lr)
    return initial, train_disagreement(target, run(w))
