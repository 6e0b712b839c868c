"""Attack one scene, compare against Gaussian noise of the same budget.

The attack pushes attention onto a potential sink token by signed gradient
steps on the image, staying inside an l-infinity ball of radius 8/255.

Run: python3 demos/run_attack.py
"""

import numpy as np

from attnsink import corpus as C
from attnsink.analysis import calibrate_sigma, default_layer
from attnsink.attack import AttackConfig, gaussian_baseline, run_attack
from attnsink.decoding import greedy_decode
from attnsink.metrics import hallucination_metrics
from attnsink.model import ModelConfig, assemble, init_params, train_toy_model


def hwr(tokens, scene):
    return hallucination_metrics([C.oracle_annotate(tokens, scene)]).hwr


def main():
    scenes = C.generate_corpus(seed=0, count=64)
    data = [(C.render_scene(s), s.caption) for s in scenes]
    prompt = C.prompt_ids()
    params = train_toy_model(init_params(ModelConfig(), 0), data, 200, 0.5, prompt)
    layer = default_layer(params.config.n_layers)

    clean = [greedy_decode(assemble(img, prompt, params), params) for img, _ in data]
    sigma = calibrate_sigma([r.trace for r in clean], layer)
    cfg = AttackConfig(epsilon=8 / 255, gamma=5 / 255, steps=30, alpha=1.0, sigma=sigma)

    scene = scenes[0]
    img = C.render_scene(scene)
    trace = run_attack(img, prompt, params, cfg)
    for rec in trace.records[::5] + [trace.final]:
        print(f"step {rec.step:2d}  idx {rec.idx}  loss {rec.total_loss:.4f}  "
              f"window mass {rec.window_mass:.3f}  |delta| {rec.delta_linf * 255:.1f}/255")

    noisy = gaussian_baseline(img, cfg.epsilon, seed=scene.id)
    noisy_resp = greedy_decode(assemble(noisy, prompt, params), params)
    print(f"\nclean     ({hwr(clean[0].tokens, scene):.2f}) {C.decode(clean[0].tokens)}")
    print(f"attacked  ({hwr(trace.final.response, scene):.2f}) {C.decode(trace.final.response)}")
    print(f"gaussian  ({hwr(noisy_resp.tokens, scene):.2f}) {C.decode(noisy_resp.tokens)}")
    print(f"max pixel change {np.abs(trace.adversarial - img.pixels).max() * 255:.2f}/255")


if __name__ == "__main__":
    main()
