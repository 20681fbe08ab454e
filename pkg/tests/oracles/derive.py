"""Independent oracle for the closed-form reference values used by the tests.

Pure ``math`` (no numpy, no package imports), so an error in the library
cannot leak into its own reference numbers. Run as a script to refresh
``derived.json``; ``test_oracles.py`` checks that the frozen file still
matches this derivation.
"""

import json
import math
import statistics
from pathlib import Path

FROZEN = Path(__file__).with_name("derived.json")


def softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def harmonic(a, b):
    return 0.0 if a + b == 0 else 2 * a * b / (a + b)


def mad_index(norms):
    med = statistics.median(norms)
    mad = statistics.median([abs(n - med) for n in norms])
    return [abs(n - med) / (1.4826 * mad) for n in norms]


def clp_threshold(scores, u):
    mu = sum(scores) / len(scores)
    sd = math.sqrt(sum((s - mu) ** 2 for s in scores) / len(scores))
    return mu + u * sd


def cosine_lr(peak, it, warm, total):
    if it < warm:
        return peak * it / warm
    span = total - warm
    pos = min(it - warm + 1, span)
    return peak * 0.5 * (1 + math.cos(math.pi * pos / span))


def derive():
    # two asymmetric runs: the per-run H and the H of averaged values disagree
    runs = [(82.69, 63.22), (63.22, 82.69)]
    per_run = sum(harmonic(a, b) for a, b in runs) / len(runs)
    mean_a = sum(a for a, _ in runs) / len(runs)
    mean_b = sum(b for _, b in runs) / len(runs)
    return {
        "softmax_1_0": softmax([1.0, 0.0]),
        "cosine_10_11": 1 / math.sqrt(2),
        "harmonic_76_47_67_88": harmonic(76.47, 67.88),
        "psnr_uniform_4_255": 10 * math.log10(255 ** 2 / 16),
        "anomaly_10_12_8_11_2": mad_index([10, 12, 8, 11, 2]),
        "clp_threshold_u1": clp_threshold([1, 1, 1, 5], 1),
        "clp_threshold_u3": clp_threshold([1, 1, 1, 5], 3),
        "ce_grad_logits_1_2_3_target_0": [p - (1 if i == 0 else 0) for i, p in enumerate(softmax([1.0, 2.0, 3.0]))],
        "cosine_lr_end_ratio": cosine_lr(1.0, 99, 10, 100),
        "h_counterexample": {"per_run": per_run, "of_means": harmonic(mean_a, mean_b)},
        "uniform_ce_k8": math.log(8),
    }


if __name__ == "__main__":
    FROZEN.write_text(json.dumps(derive(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {FROZEN}")
