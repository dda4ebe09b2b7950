"""Regenerate the bundled seed corpus, toy tokenizer, toy weights, toy SAEs
and the recorded annotation responses.

    python scripts/build_toy_assets.py

Everything is deterministic; rerunning reproduces the committed files.
"""

from __future__ import annotations

import json

from neglab import annotate, corpus
from neglab.attribution import random_sae, save_sae
from neglab.model import Transformer, save_weights, train_bpe
from neglab.model.toy import BOS_TOKEN, TOY_SEED, data_path, init_weights, toy_config

VOCAB_SIZE = 1024
SAE_LATENTS = 256
N_ANNOTATED = 10

# (category, x singular, x plural, y singular, y plural, y article, y_plus, y_minus,
#  extra positive answers, extra negative answers)
QUESTIONS = [
    ("Living things", "animal", "animals", "amphibian", "amphibians", None, " frog", " dog",
     ["toad", "salamander", "newt"], ["cat", "horse", "eagle"]),
    ("Living things", "animal", "animals", "mammal", "mammals", None, " dog", " snake",
     ["cat", "horse", "whale"], ["lizard", "shark", "eagle"]),
    ("Living things", "plant", "plants", "tree", "trees", None, " oak", " rose",
     ["pine", "maple", "birch"], ["tulip", "fern", "grass"]),
    ("Living things", "fruit", "fruits", "citrus fruit", "citrus fruits", None, " lemon", " apple",
     ["orange", "lime", "grapefruit"], ["banana", "grape", "pear"]),
    ("Living things", "vegetable", "vegetables", "root vegetable", "root vegetables", None, " carrot", " lettuce",
     None, None),
    ("Living things", "insect", "insects", "pollinator", "pollinators", None, " bee", " ant", None, None),
    ("Living things", "mammal", "mammals", "aquatic", "aquatic", "", " whale", " horse",
     ["dolphin", "seal", "otter"], ["horse", "dog", "lion"]),
    ("Living things", "bird", "birds", "able to fly", "able to fly", "", " eagle", " penguin", None, None),
    ("Human domains", "career", "careers", "medical", "medical", "", " doctor", " lawyer",
     ["nurse", "surgeon", "dentist"], ["teacher", "lawyer", "pilot"]),
    ("Human domains", "sport", "sports", "team sport", "team sports", None, " soccer", " tennis", None, None),
    ("Human domains", "festival", "festivals", "religious", "religious", "", " Christmas", " Halloween", None, None),
    ("Human domains", "language", "languages", "European", "European", "", " French", " Chinese",
     ["German", "Spanish", "Italian"], ["Japanese", "Arabic", "Hindi"]),
    ("Human domains", "sport", "sports", "played with a ball", "played with a ball", "", " basketball", " swimming",
     None, None),
    ("Technology", "app", "apps", "free", "free", "", " Facebook", " Netflix", None, None),
    ("Technology", "operating system", "operating systems", "open source", "open source", "", " Linux", " Windows",
     None, None),
    ("Technology", "programming language", "programming languages", "compiled", "compiled", "", " C", " Python",
     None, None),
    ("Technology", "website", "websites", "search engine", "search engines", None, " Google", " Wikipedia", None, None),
    ("Technology", "device", "devices", "portable", "portable", "", " phone", " desktop", None, None),
    ("Materials & objects", "material", "materials", "biodegradable", "biodegradable", "", " paper", " plastic",
     ["wood", "cotton", "leather"], ["plastic", "glass", "steel"]),
    ("Materials & objects", "tool", "tools", "electric", "electric", "", " drill", " hammer", None, None),
    ("Materials & objects", "piece of furniture", "pieces of furniture", "used for sitting", "used for sitting", "",
     " chair", " table", None, None),
    ("Materials & objects", "garment", "garments", "worn on the feet", "worn on the feet", "", " sock", " hat",
     None, None),
    ("Materials & objects", "instrument", "instruments", "string instrument", "string instruments", None,
     " guitar", " drum", ["violin", "harp", "cello"], ["drum", "flute", "trumpet"]),
    ("Materials & objects", "metal", "metals", "magnetic", "magnetic", "", " iron", " gold", None, None),
    ("Environment", "natural disaster", "natural disasters", "caused by water", "caused by water", "",
     " flood", " earthquake", None, None),
    ("Environment", "weather condition", "weather conditions", "cold", "cold", "", " snow", " sunshine", None, None),
    ("Environment", "planet", "planets", "gas giant", "gas giants", None, " Jupiter", " Mars",
     ["Saturn", "Neptune", "Uranus"], ["Earth", "Venus", "Mercury"]),
    ("Environment", "substance", "substances", "a gas at room temperature", "gases at room temperature", "",
     " oxygen", " iron", None, None),
    ("Environment", "place", "places", "located near the ocean", "located near the ocean", "", " beach", " desert",
     None, None),
    ("Consumables", "food", "foods", "sweet", "sweet", "", " cake", " bread", None, None),
    ("Consumables", "beverage", "beverages", "alcoholic", "alcoholic", "", " beer", " juice",
     ["wine", "vodka", "whiskey"], ["milk", "water", "tea"]),
    ("Consumables", "drink", "drinks", "hot", "hot", "", " coffee", " soda", None, None),
    ("Consumables", "food", "foods", "dairy product", "dairy products", None, " cheese", " rice", None, None),
    ("Consumables", "fruit", "fruits", "red", "red", "", " strawberry", " banana", None, None),
    ("Geography", "city", "cities", "in Asia", "in Asia", "", " Tokyo", " Paris",
     ["Beijing", "Seoul", "Bangkok"], ["London", "Berlin", "Rome"]),
    ("Geography", "country", "countries", "in Europe", "in Europe", "", " France", " Brazil", None, None),
    ("Geography", "city", "cities", "capital city", "capital cities", None, " London", " Sydney", None, None),
    ("Geography", "country", "countries", "landlocked", "landlocked", "", " Switzerland", " Japan", None, None),
    ("Geography", "city", "cities", "in the United States", "in the United States", "", " New York", " New Delhi",
     None, None),
    ("Miscellaneous", "color", "colors", "warm", "warm", "", " red", " blue", None, None),
    ("Miscellaneous", "game", "games", "board game", "board games", None, " chess", " poker", None, None),
    ("Miscellaneous", "object", "objects", "sharp", "sharp", "", " knife", " spoon", None, None),
    ("Miscellaneous", "shape", "shapes", "round", "round", "", " circle", " square", None, None),
]

FILLER = [
    "The quick brown fox jumps over the lazy dog.",
    "Hello, world! This is a small test of the tokenizer.",
    "New York and New Delhi are large cities. New Orleans is in the United States.",
    "It is a list of things that are not what they seem, and it is indeed a list.",
    "Here is a short sentence about animals, plants, cities, and countries.",
    "What is it? It is something that is an object and a thing.",
]


def _slug(s: str) -> str:
    return "-".join(s.lower().split())


def build_entries() -> list[corpus.DatasetEntry]:
    entries = []
    for cat, xs, xp, ys, yp, yart, yplus, yminus, pos_extra, neg_extra in QUESTIONS:
        for tid in (1, 2, 3, 4):
            x, y = (xp, yp) if tid == 1 else (xs, ys)
            e = corpus.DatasetEntry(
                id=f"{_slug(xs)}--{_slug(ys)}--t{tid}",
                x=x,
                y=y,
                template=tid,
                y_plus=yplus,
                y_minus=yminus,
                category=cat,
                y_article=None if tid == 1 else yart,
            )
            if pos_extra is not None:
                e = corpus.expand_answers(e, [yplus.strip()] + pos_extra, [yminus.strip()] + neg_extra)
            entries.append(e)
    return entries


def synthetic_response(n: int, sample, tokenizer, mode: str) -> str:
    """Scripted annotator reply; the shapes cycle through the formats parsers must handle."""
    r0 = sample.readouts[0]
    ids = r0.promoted_ids() if mode == annotate.PROMOTED else r0.demoted_ids()
    toks = [tokenizer.token_bytes(t).decode("utf-8", errors="replace") for t in ids[:2]]
    item = {"layer": r0.layer + 1, "tokens": toks, "justification": f"scripted fixture for {sample.entry.y!r}"}
    shape = (n + (mode == annotate.DEMOTED)) % 4
    if shape == 0:
        return "```json\n" + json.dumps([item], indent=4, ensure_ascii=False) + "\n```"
    if shape == 1:
        return "```json\n[]\n```"
    if shape == 2:
        items = [item] + [
            {"layer": r.layer + 1, "tokens": toks[:1], "justification": "same token again"} for r in sample.readouts[1:]
        ]
        return "- the negation part is \"not " + sample.entry.y + "\"\n\n" + json.dumps(items, ensure_ascii=False)
    return "[]"


def build_fixtures(model, tokenizer, entries) -> annotate.FixtureStore:
    store = annotate.FixtureStore()
    samples = annotate.build_samples(entries, model, tokenizer, n=N_ANNOTATED)
    for mode in annotate.MODES:
        for n, s in enumerate(samples):
            prompt = annotate.build_annotation_prompt(s.entry, s.readouts, tokenizer, mode)
            store.add(annotate.annotation_messages(prompt), synthetic_response(n, s, tokenizer, mode))
    return store


def main() -> None:
    entries = build_entries()
    corpus.dump(entries, data_path("seed_corpus.jsonl"))
    texts = list(FILLER)
    for e in entries:
        texts += [e.p_plus, e.p_minus, e.y_plus, e.y_minus]
        texts += [e.p_plus + e.y_plus, e.p_minus + e.y_minus]
        texts += list(e.y_plus_set or ()) + list(e.y_minus_set or ())
    tok = train_bpe(texts, VOCAB_SIZE, special_tokens=(BOS_TOKEN,))
    tok.save(data_path("toy_vocab.json"), data_path("toy_merges.txt"))
    weights = init_weights(toy_config(len(tok)), TOY_SEED)
    save_weights(data_path("toy_model.safetensors"), weights)
    cfg = weights.config
    sae_dir = data_path("toy_sae")
    sae_dir.mkdir(exist_ok=True)
    for i in range(cfg.n_layers):
        save_sae(sae_dir / f"layer_{i + 1}.safetensors", random_sae(cfg.d_model, SAE_LATENTS, TOY_SEED + i))
    store = build_fixtures(Transformer(weights), tok, corpus.load(data_path("seed_corpus.jsonl"), tok))
    store.save(data_path("fixtures/annotations.jsonl"))
    print(f"{len(entries)} entries, vocab {len(tok)}, {len(weights.names())} tensors")


if __name__ == "__main__":
    main()
