"""Train the toy model on a small synthetic corpus and caption a few scenes.

Run: python3 demos/train_and_caption.py
"""

from attnsink import corpus as C
from attnsink.decoding import DecodeConfig, decode
from attnsink.metrics import hallucination_metrics
from attnsink.model import ModelConfig, assemble, caption_loss, init_params, train_toy_model


def main():
    scenes = C.generate_corpus(seed=0, count=64)
    data = [(C.render_scene(s), s.caption) for s in scenes]
    prompt = C.prompt_ids()

    params = init_params(ModelConfig(), seed=0)
    print(f"caption loss before training: {caption_loss(params, data, prompt):.3f}")
    params = train_toy_model(params, data, epochs=200, lr=0.5, prompt_ids=prompt)
    print(f"caption loss after training:  {caption_loss(params, data, prompt):.4f}")

    annotated = []
    for s in scenes[:4]:
        asm = assemble(C.render_scene(s), prompt, params)
        print(f"\nscene {s.id}: reference  {C.decode(s.caption)}")
        for cfg in (DecodeConfig("greedy"), DecodeConfig("beam", beam_width=3),
                    DecodeConfig("nucleus", top_p=0.9, seed=s.id)):
            r = decode(asm, params, cfg)
            print(f"  {cfg.strategy:8s} {C.decode(r.tokens)}")
            if cfg.strategy == "greedy":
                annotated.append(C.oracle_annotate(r.tokens, s))

    rep = hallucination_metrics(annotated)
    print(f"\ngreedy captions: HSR {rep.hsr:.3f}  HWR {rep.hwr:.3f}  SPI {rep.spi:.2f}")


if __name__ == "__main__":
    main()
