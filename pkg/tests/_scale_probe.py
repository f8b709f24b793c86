"""Subprocess probe: forward+backward through the interaction model at a
given spatial-token count, reporting this process's peak RSS as JSON.

Run in a fresh process so the measurement starts from a clean baseline.
"""

import json
import resource
import sys

import numpy as np
import torch


def scene_with_tokens(n_tokens: int):
    """Jittered grid with > 5 mm spacing: every point is its own token."""
    from slap.geometry import PointCloud

    side = int(np.ceil(np.sqrt(n_tokens)))
    rng = np.random.default_rng(0)
    xs = np.arange(side) * 0.007
    xx, yy = np.meshgrid(xs, xs)
    pos = np.stack([xx.ravel(), yy.ravel(), np.zeros(side * side)], axis=1)[:n_tokens]
    pos = pos + rng.uniform(-0.0005, 0.0005, pos.shape)
    return PointCloud(pos, rng.uniform(0, 1, pos.shape))


def main():
    n_tokens = int(sys.argv[1]) if len(sys.argv) > 1 else 8000
    torch.set_num_threads(2)
    torch.manual_seed(0)

    from slap.config import BackboneConfig, EncoderConfig
    from slap.dataio import Vocabulary
    from slap.ipm import InteractionModel, ipm_loss
    from slap.scenegen import ProprioState

    cloud = scene_with_tokens(n_tokens)
    vocab = Vocabulary(["drawer", "open", "the", "top"])
    model = InteractionModel(EncoderConfig(), BackboneConfig(), vocab)
    scores, points = model.score(cloud, "open the top drawer",
                                 ProprioState(0, 0.08, 0), np.random.default_rng(0))
    loss = ipm_loss(scores, points, points[0], w=1.0)
    loss.backward()

    peak_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    print(json.dumps({"tokens": int(scores.shape[0]), "peak_rss_kb": int(peak_kb)}))


if __name__ == "__main__":
    main()
