"""Look for attention sinks in a trained model's own captions.

For each response this prints the potential sink (the generated token whose
hidden state is closest to the mean input hidden state), any columnar sinks
in the head-averaged attention, and per-sentence image relevance.

Run: python3 demos/sink_analysis.py
"""

import numpy as np

from attnsink import corpus as C
from attnsink.analysis import (calibrate_sigma, default_layer, detect_sinks, relevance_profile,
                               select_potential_sink, similarity_profile)
from attnsink.decoding import greedy_decode
from attnsink.model import ModelConfig, assemble, init_params, train_toy_model


def main():
    scenes = C.generate_corpus(seed=0, count=64)
    data = [(C.render_scene(s), s.caption) for s in scenes]
    prompt = C.prompt_ids()
    params = train_toy_model(init_params(ModelConfig(), 0), data, 200, 0.5, prompt)
    layer = default_layer(params.config.n_layers)

    traces = []
    for s in scenes[:6]:
        img = C.render_scene(s)
        r = greedy_decode(assemble(img, prompt, params), params)
        traces.append(r.trace)
        prof = similarity_profile(r.trace, layer)
        idx = select_potential_sink(prof)
        sinks = detect_sinks(r.trace, layer)
        rel = relevance_profile(r, img, params, layer)
        tok = r.tokens[idx - r.trace.prompt_len]
        print(f"scene {s.id}: {C.decode(r.tokens)}")
        print(f"  potential sink at {idx} ({C.VOCAB[tok]!r}, cos {prof.scores.max():.3f}); "
              f"columnar sinks {sinks.positions}")
        print(f"  sentence relevance {np.round(rel.scores, 3).tolist()}")

    print(f"\nhinge threshold calibrated on these responses: {calibrate_sigma(traces, layer):.2f}")


if __name__ == "__main__":
    main()
