import numpy as np
import pytest

from attnsink import corpus as C


def test_vocabulary_layout():
    assert len(C.VOCAB) == 64 and len(set(C.VOCAB)) == 64
    assert (C.PAD, C.BOS, C.EOS) == (0, 1, 2)
    assert len(C.OBJECTS) == 16 and len(C.COLORS) == 8
    assert C.decode(C.encode("there is a red cat .")) == "there is a red cat ."
    with pytest.raises(ValueError):
        C.encode("zebra")


def test_same_seed_same_json_bytes():
    a = C.corpus_to_json(C.generate_corpus(7, 20))
    assert a == C.corpus_to_json(C.generate_corpus(7, 20))
    assert a != C.corpus_to_json(C.generate_corpus(8, 20))
    back = C.corpus_from_json(a)
    assert C.corpus_to_json(back) == a


def test_scene_k_independent_of_count():
    assert C.generate_corpus(3, 5)[4].to_dict() == C.generate_corpus(3, 50)[4].to_dict()


def test_scene_invariants():
    for s in C.generate_corpus(0, 200):
        assert 1 <= len(s.objects) <= 4
        cells = [(o.row, o.col) for o in s.objects]
        assert len(set(cells)) == len(cells)
        assert len({o.word for o in s.objects}) == len(s.objects)
        named = [t for t in s.caption if t in C.OBJECT_IDS]
        assert sorted(named) == sorted(C.TOKEN_ID[o.word] for o in s.objects)
        assert s.caption[-1] == C.EOS


def test_single_object_caption():
    s = C.make_scene(0, [C.SceneObject("dog", "green", 1, 2)])
    assert C.decode(s.caption) == "there is a green dog . <eos>"
    assert s.caption.count(C.TOKEN_ID["dog"]) == 1


def test_generation_errors():
    with pytest.raises(ValueError):
        C.generate_corpus(0, 0)
    with pytest.raises(ValueError):
        C.generate_corpus(0, 5, n_objects=3)
    with pytest.raises(ValueError):
        C.generate_corpus(0, 5, grid=(1, 2))
    with pytest.raises(ValueError):
        C.make_scene(0, [C.SceneObject("cat", "red", 0, 0), C.SceneObject("dog", "red", 0, 0)])


def test_object_frequencies_uniform():
    scenes = C.generate_corpus(11, 10_000)
    counts = np.zeros(16)
    for s in scenes:
        for o in s.objects:
            counts[C.OBJECTS.index(o.word)] += 1
    n = counts.sum()
    expected, sd = n / 16, np.sqrt(n * (1 / 16) * (15 / 16))
    assert np.all(np.abs(counts - expected) <= 3 * sd)
    sizes = np.bincount([len(s.objects) for s in scenes], minlength=5)[1:]
    assert np.all(np.abs(sizes - 2500) <= 3 * np.sqrt(10_000 * 0.25 * 0.75))


def test_render_background_and_single_object():
    empty = C.Scene(0, (4, 4), [], [C.EOS])
    px = C.render_scene(empty).pixels
    assert np.all(px == 0.5)
    s = C.make_scene(0, [C.SceneObject("shoe", "red", 2, 3)])
    px = C.render_scene(s).pixels
    h, w = C.OBJECT_BLOCK["shoe"]
    assert (h, w) == (4, 4)
    assert np.all(px[8:12, 12:16] == (1.0, 0.0, 0.0))
    mask = np.ones((16, 16), bool)
    mask[8:12, 12:16] = False
    assert np.all(px[mask] == 0.5)


def test_render_injective_on_fixture():
    scenes = C.generate_corpus(0, 64)
    layouts = {tuple(sorted((o.word, o.color, o.row, o.col) for o in s.objects)) for s in scenes}
    renders = {C.render_scene(s).pixels.tobytes() for s in scenes}
    assert len(renders) == len(layouts) == 64


def test_sentence_spans():
    toks = C.encode("there is a cat . a dog") + [C.EOS]
    assert C.sentence_spans(toks) == [(0, 5), (5, 8)]
    toks = C.encode("a cat .") + [C.EOS]
    assert C.sentence_spans(toks) == [(0, 4)]
    assert C.sentence_spans([]) == []
    assert C.sentence_spans([C.EOS]) == [(0, 1)]


def test_oracle_examples():
    scene = C.make_scene(0, [C.SceneObject("cat", "red", 0, 0)])
    clean = C.oracle_annotate(C.encode("there is a red cat ."), scene)
    assert clean.hallucinated == [False] and clean.hallucinated_words == [0]
    ann = C.oracle_annotate(C.encode("blue cat ."), scene)
    assert ann.hallucinated == [True] and ann.hallucinated_words == [1]
    assert ann.offending == [0]
    ann = C.oracle_annotate(C.encode("a red cat . a red dog near a cup ."), scene)
    assert ann.hallucinated == [False, True] and ann.hallucinated_words == [0, 2]
    assert ann.word_counts == [3, 6]


def test_reference_captions_are_clean():
    for s in C.generate_corpus(0, 64):
        assert not any(C.oracle_annotate(s.caption, s).hallucinated)


def brute_force_annotate(tokens, scene):
    """Independent string-level reimplementation of the closed-world rule."""
    truth = {o.word: o.color for o in scene.objects}
    words = [C.VOCAB[t] for t in tokens]
    sentences, cur = [], []
    for w in words:
        cur.append(w)
        if w in (".", "!", "?"):
            sentences.append(cur)
            cur = []
    if cur:
        if sentences and all(w == "<eos>" for w in cur):
            sentences[-1] += cur
        else:
            sentences.append(cur)
    flags, counts = [], []
    for sent in sentences:
        bad = 0
        for k, w in enumerate(sent):
            if w in C.OBJECTS and w not in truth:
                bad += 1
            elif w in C.COLORS and k + 1 < len(sent):
                nxt = sent[k + 1]
                if nxt in truth and truth[nxt] != w:
                    bad += 1
        flags.append(bad > 0)
        counts.append(bad)
    return flags, counts


def random_response(rng, scene):
    """Mix of true facts, wrong colors, absent objects and filler."""
    toks = []
    for _ in range(int(rng.integers(1, 6))):
        kind = rng.integers(0, 4)
        if kind == 0 and scene.objects:
            o = scene.objects[rng.integers(len(scene.objects))]
            toks += C.encode(["there", "is", "a", o.color, o.word])
        elif kind == 1 and scene.objects:
            o = scene.objects[rng.integers(len(scene.objects))]
            toks += C.encode(["a", C.COLORS[rng.integers(8)], o.word])
        elif kind == 2:
            toks += C.encode(["a", C.COLORS[rng.integers(8)], C.OBJECTS[rng.integers(16)]])
        else:
            toks += [int(t) for t in rng.integers(3, 64, rng.integers(1, 5))]
        if rng.random() < 0.8:
            toks.append(C.TOKEN_ID[[".", "!", "?"][rng.integers(3)]])
    if rng.random() < 0.5:
        toks.append(C.EOS)
    return toks


def test_oracle_matches_brute_force():
    rng = np.random.default_rng(42)
    scenes = C.generate_corpus(9, 50)
    for s in scenes:
        toks = random_response(rng, s)
        ann = C.oracle_annotate(toks, s)
        flags, counts = brute_force_annotate(toks, s)
        assert ann.hallucinated == flags and ann.hallucinated_words == counts
        for (a, b), c in zip(ann.spans, ann.hallucinated_words):
            assert c <= b - a


def test_oracle_sentence_order_independent():
    scene = C.make_scene(0, [C.SceneObject("cat", "red", 0, 0)])
    a = C.encode("a red cat .")
    b = C.encode("a blue dog .")
    x = C.oracle_annotate(a + b, scene)
    y = C.oracle_annotate(b + a, scene)
    assert x.hallucinated == y.hallucinated[::-1]


def test_vqa_item():
    s = C.make_scene(0, [C.SceneObject("cat", "red", 0, 0)])
    item = C.color_question(s, s.objects[0])
    assert C.decode(item.question) == "what color is the cat ?"
    assert item.answers == [[C.TOKEN_ID["red"]]] * 5
    with pytest.raises(ValueError):
        C.VQAItem(0, [1], [])
